//! Synthetic multi-step problems with exact verifiers, step parsing and
//! judging.

mod chain;
mod io;
mod judge;
mod parse;
mod schedule;

pub use io::{read_jsonl, write_jsonl, ArtifactHeader, ChainRecord, LabelRecord};
pub use judge::{
    external_judge, noisy_judge, oracle_judge, JudgeId, StepLabels, DEFAULT_JUDGE_ACCURACY,
};
pub use parse::{parse_steps, parse_tokens, render, Step, StepTrace};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;
use crate::toylm::vocab::{BOS, END, NEWLINE};
use crate::toylm::{LmError, Vocabulary};

/// Number of sampled chains per problem.
pub const CHAINS_PER_PROBLEM: usize = 3;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown family {0:?}")]
    UnknownFamily(String),
    #[error("bad difficulty {0}; expected 0..=3")]
    BadDifficulty(u8),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("trace has no steps")]
    EmptyTrace,
    #[error("judge accuracy {0} outside (0, 1]")]
    BadAccuracy(f64),
    #[error("label file: {0}")]
    LabelFile(String),
    #[error("jsonl line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    ChainArith,
    Schedule,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::ChainArith => "chain-arith",
            Family::Schedule => "schedule",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        match s {
            "chain-arith" => Ok(Family::ChainArith),
            "schedule" => Ok(Family::Schedule),
            _ => Err(TaskError::UnknownFamily(s.to_string())),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    pub fn keyword(self) -> &'static str {
        match self {
            ArithOp::Add => "add",
            ArithOp::Sub => "sub",
            ArithOp::Mul => "mul",
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
        }
    }

    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        let (a, b, m) = (a as u64, b as u64, modulus as u64);
        (match self {
            ArithOp::Add => (a + b) % m,
            ArithOp::Sub => (a + m - b % m) % m,
            ArithOp::Mul => (a * b) % m,
        }) as u32
    }
}

/// Half-open availability window `[start, end)`.
pub type Window = (u32, u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemSpec {
    ChainArith {
        start: u32,
        ops: Vec<(ArithOp, u32)>,
        modulus: u32,
    },
    Schedule {
        windows: Vec<Window>,
        duration: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub family: Family,
    pub prompt: String,
    pub answer: String,
    pub seed: u64,
    pub difficulty: u8,
    pub spec: ProblemSpec,
}

impl Problem {
    pub fn from_spec(id: String, seed: u64, difficulty: u8, spec: ProblemSpec) -> Self {
        let family = match spec {
            ProblemSpec::ChainArith { .. } => Family::ChainArith,
            ProblemSpec::Schedule { .. } => Family::Schedule,
        };
        let prompt = match &spec {
            ProblemSpec::ChainArith { .. } => chain::prompt(&spec),
            ProblemSpec::Schedule { .. } => schedule::prompt(&spec),
        };
        let mut p = Self {
            id,
            family,
            prompt,
            answer: String::new(),
            seed,
            difficulty,
            spec,
        };
        p.answer = p.ground_truth();
        p
    }

    /// Answer recomputed from the generator parameters.
    pub fn ground_truth(&self) -> String {
        match &self.spec {
            ProblemSpec::ChainArith { .. } => chain::answer(&self.spec),
            ProblemSpec::Schedule { .. } => schedule::answer(&self.spec),
        }
    }

    /// Number of steps in the reference solution.
    pub fn reference_steps(&self) -> usize {
        match &self.spec {
            ProblemSpec::ChainArith { ops, .. } => ops.len(),
            ProblemSpec::Schedule { windows, .. } => windows.len() - 1,
        }
    }

    /// Prompt tokens the language model is conditioned on.
    pub fn prompt_tokens(&self, vocab: &Vocabulary) -> Result<Vec<usize>, TaskError> {
        let mut t = vec![BOS];
        t.extend(vocab.tokenize(&self.prompt)?);
        t.push(NEWLINE);
        Ok(t)
    }

    /// Reference solution text with randomized connective words.
    pub fn render_reference(&self, rng: &mut ChaCha8Rng) -> String {
        let lines = match &self.spec {
            ProblemSpec::ChainArith { .. } => chain::reference_bodies(&self.spec),
            ProblemSpec::Schedule { .. } => schedule::reference_bodies(&self.spec),
        };
        let mut out = String::new();
        for (k, body) in lines.iter().enumerate() {
            out.push_str(&format!("- Step {}:", k + 1));
            let n = rng.gen_range(0..=2);
            for _ in 0..n {
                out.push(' ');
                out.push_str(CONNECTIVES[rng.gen_range(0..CONNECTIVES.len())]);
            }
            out.push(' ');
            out.push_str(body);
            out.push('\n');
        }
        out.push_str(&format!("<Answer>: {}\n", self.answer));
        out
    }

    /// Full training sequence: prompt, reference solution, end token.
    pub fn reference_tokens(
        &self,
        vocab: &Vocabulary,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, TaskError> {
        let mut t = self.prompt_tokens(vocab)?;
        t.extend(vocab.tokenize(&self.render_reference(rng))?);
        t.push(END);
        Ok(t)
    }
}

/// Filler words that may precede a step body without changing its meaning.
pub const CONNECTIVES: [&str; 4] = ["so", "then", "now", "next"];

pub fn gen_problems(
    family: Family,
    n: usize,
    seed: u64,
    difficulty: u8,
) -> Result<Vec<Problem>, TaskError> {
    if difficulty > 3 {
        return Err(TaskError::BadDifficulty(difficulty));
    }
    let prefix = match family {
        Family::ChainArith => "ca",
        Family::Schedule => "sc",
    };
    Ok((0..n)
        .map(|i| {
            let mut rng = stream(seed, family.name(), i as u64);
            let spec = match family {
                Family::ChainArith => chain::sample_spec(&mut rng, difficulty),
                Family::Schedule => schedule::sample_spec(&mut rng, difficulty),
            };
            Problem::from_spec(format!("{prefix}-{seed}-{i:05}"), seed, difficulty, spec)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn worked_chain_example() {
        let p = Problem::from_spec(
            "x".into(),
            0,
            2,
            ProblemSpec::ChainArith {
                start: 7,
                ops: vec![(ArithOp::Add, 5), (ArithOp::Mul, 3)],
                modulus: 97,
            },
        );
        assert_eq!(p.answer, "36");
        assert_eq!(p.prompt, "Q: start 7 ; add 5 ; mul 3 ; mod 97");
    }

    #[test]
    fn generation_is_deterministic() {
        for fam in [Family::ChainArith, Family::Schedule] {
            let a = gen_problems(fam, 20, 4, 1).unwrap();
            assert_eq!(a, gen_problems(fam, 20, 4, 1).unwrap());
            assert_ne!(a, gen_problems(fam, 20, 5, 1).unwrap());
            assert!(gen_problems(fam, 0, 4, 1).unwrap().is_empty());
            for p in &a {
                assert_eq!(p.answer, p.ground_truth());
            }
        }
    }

    #[test]
    fn unknown_family_and_difficulty() {
        assert!(matches!(
            "sudoku".parse::<Family>(),
            Err(TaskError::UnknownFamily(_))
        ));
        assert!(matches!(
            gen_problems(Family::Schedule, 1, 0, 4),
            Err(TaskError::BadDifficulty(4))
        ));
    }

    #[test]
    fn modular_ops() {
        assert_eq!(ArithOp::Sub.apply(3, 5, 23), 21);
        assert_eq!(ArithOp::Mul.apply(12, 3, 97), 36);
        assert_eq!(ArithOp::Add.apply(20, 5, 23), 2);
    }

    #[test]
    fn reference_sequences_tokenize_within_context() {
        let vocab = Vocabulary::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for fam in [Family::ChainArith, Family::Schedule] {
            for p in gen_problems(fam, 50, 1, 3).unwrap() {
                let t = p.reference_tokens(&vocab, &mut rng).unwrap();
                assert!(t.len() < 512);
            }
        }
    }
}

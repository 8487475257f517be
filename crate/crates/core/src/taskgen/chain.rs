//! Chain arithmetic: a start value and a list of modular operations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ArithOp, ProblemSpec};

/// Per difficulty level: modulus, step count range, largest addend and
/// largest factor.
const LEVELS: [(u32, usize, usize, u32, u32); 4] = [
    (7, 3, 4, 3, 3),
    (11, 3, 5, 5, 4),
    (13, 3, 6, 6, 4),
    (19, 3, 8, 9, 5),
];

fn unpack(spec: &ProblemSpec) -> (u32, &[(ArithOp, u32)], u32) {
    match spec {
        ProblemSpec::ChainArith {
            start,
            ops,
            modulus,
        } => (*start, ops, *modulus),
        _ => unreachable!("chain spec expected"),
    }
}

pub(super) fn sample_spec(rng: &mut ChaCha8Rng, difficulty: u8) -> ProblemSpec {
    let (modulus, lo, hi, addend, factor) = LEVELS[difficulty as usize];
    let n = rng.gen_range(lo..=hi);
    let start = rng.gen_range(0..modulus);
    let ops = (0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => (ArithOp::Add, rng.gen_range(1..=addend)),
            1 => (ArithOp::Sub, rng.gen_range(1..=addend)),
            _ => (ArithOp::Mul, rng.gen_range(2..=factor)),
        })
        .collect();
    ProblemSpec::ChainArith {
        start,
        ops,
        modulus,
    }
}

pub(super) fn prompt(spec: &ProblemSpec) -> String {
    let (start, ops, modulus) = unpack(spec);
    let mut s = format!("Q: start {start}");
    for (op, b) in ops {
        s.push_str(&format!(" ; {} {b}", op.keyword()));
    }
    s.push_str(&format!(" ; mod {modulus}"));
    s
}

fn values(spec: &ProblemSpec) -> Vec<u32> {
    let (start, ops, m) = unpack(spec);
    let mut v = vec![start];
    for (op, b) in ops {
        v.push(op.apply(*v.last().unwrap(), *b, m));
    }
    v
}

pub(super) fn answer(spec: &ProblemSpec) -> String {
    values(spec).last().unwrap().to_string()
}

pub(super) fn reference_bodies(spec: &ProblemSpec) -> Vec<String> {
    let (_, ops, _) = unpack(spec);
    let v = values(spec);
    ops.iter()
        .enumerate()
        .map(|(k, (op, b))| format!("{} {} {b} = {}", v[k], op.symbol(), v[k + 1]))
        .collect()
}

/// Parsed `a op b = c` body.
fn parse_body(words: &[&str]) -> Option<(u32, ArithOp, u32, u32)> {
    let [a, op, b, eq, c] = words else {
        return None;
    };
    let op = match *op {
        "+" => ArithOp::Add,
        "-" => ArithOp::Sub,
        "*" => ArithOp::Mul,
        _ => return None,
    };
    if *eq != "=" {
        return None;
    }
    Some((a.parse().ok()?, op, b.parse().ok()?, c.parse().ok()?))
}

/// Step validity given the previous step's stated result and the problem.
/// Falls back to the true running value when the previous step is unreadable.
pub(super) fn judge_steps(spec: &ProblemSpec, bodies: &[Vec<&str>]) -> Vec<bool> {
    let (start, ops, m) = unpack(spec);
    let truth = values(spec);
    let mut premise = Some(start);
    let mut out = Vec::with_capacity(bodies.len());
    for (k, words) in bodies.iter().enumerate() {
        let parsed = parse_body(words);
        let expected_premise = premise.unwrap_or_else(|| truth[k.min(truth.len() - 1)]);
        let ok = match (parsed, ops.get(k)) {
            (Some((a, op, b, c)), Some(&(want_op, want_b))) => {
                a == expected_premise && op == want_op && b == want_b && c == op.apply(a, b, m)
            }
            _ => false,
        };
        out.push(ok);
        premise = parsed.map(|(_, _, _, c)| c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ProblemSpec {
        ProblemSpec::ChainArith {
            start: 7,
            ops: vec![(ArithOp::Add, 5), (ArithOp::Mul, 3), (ArithOp::Sub, 40)],
            modulus: 97,
        }
    }

    fn words(lines: &[&'static str]) -> Vec<Vec<&'static str>> {
        lines.iter().map(|l| l.split(' ').collect()).collect()
    }

    #[test]
    fn reference_is_all_valid() {
        let b = reference_bodies(&spec());
        assert_eq!(b, vec!["7 + 5 = 12", "12 * 3 = 36", "36 - 40 = 93"]);
        let w: Vec<Vec<&str>> = b.iter().map(|l| l.split(' ').collect()).collect();
        assert_eq!(judge_steps(&spec(), &w), vec![true; 3]);
    }

    #[test]
    fn error_does_not_poison_later_steps() {
        let w = words(&["7 + 5 = 12", "12 * 3 = 35", "35 - 40 = 92"]);
        assert_eq!(judge_steps(&spec(), &w), vec![true, false, true]);
    }

    #[test]
    fn wrong_premise_operand_or_extra_step() {
        let w = words(&["7 + 5 = 12", "13 * 3 = 39", "39 - 41 = 95", "95 + 1 = 96"]);
        assert_eq!(judge_steps(&spec(), &w), vec![true, false, false, false]);
        let w = words(&["7 + 5 = 12", "12 + 3 = 15"]);
        assert_eq!(judge_steps(&spec(), &w), vec![true, false]);
    }
}

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::baselines::Method;
use crate::features::FeatureConfig;
use crate::hashing::sha256_hex;
use crate::toylm::{LmConfig, LmTrainHyper, SamplingParams, Vocabulary, TRACE_LOOKBACK, TRACE_TOP_K};
use crate::tts::{Aggregation, DEFAULT_MAX_STEPS, ONLINE_POOL_SIZE, ONLINE_TEMPERATURE};
use crate::uhead::{UHeadConfig, UHeadTrainHyper};

/// Source of the step labels the head is trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum JudgeMode {
    Oracle,
    Noisy { accuracy: f64 },
    ExternalFile { path: String },
}

/// Gold-solution corpus for the language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub chain_arith: usize,
    pub schedule: usize,
    pub difficulty: u8,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            chain_arith: 2000,
            schedule: 1000,
            difficulty: 0,
        }
    }
}

/// Problem counts for the sampled splits. Training and in-domain test
/// problems are chain arithmetic; out-of-domain problems are schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_problems: usize,
    pub test_id_problems: usize,
    pub test_ood_problems: usize,
    pub chains_per_problem: usize,
    pub difficulty: u8,
    pub ood_difficulty: u8,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_problems: 2000,
            test_id_problems: 1000,
            test_ood_problems: 300,
            chains_per_problem: crate::taskgen::CHAINS_PER_PROBLEM,
            difficulty: 0,
            ood_difficulty: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LexicalConfig {
    pub enabled: bool,
    pub samples: usize,
    pub max_new_tokens: usize,
}

impl Default for LexicalConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            samples: 10,
            max_new_tokens: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BonConfig {
    pub chain_arith_problems: usize,
    pub schedule_problems: usize,
    pub n_chain_arith: usize,
    pub n_schedule: usize,
    pub aggregate: Aggregation,
    pub online_problems: usize,
    pub online_n: usize,
    pub online_temperature: f32,
    /// Scorer guiding online search: `uhead` or a single-generation baseline.
    pub online_scorer: Method,
    pub max_steps: usize,
}

impl Default for BonConfig {
    fn default() -> Self {
        Self {
            chain_arith_problems: 200,
            schedule_problems: 100,
            n_chain_arith: 10,
            n_schedule: 5,
            aggregate: Aggregation::Min,
            online_problems: 200,
            online_n: ONLINE_POOL_SIZE,
            online_temperature: ONLINE_TEMPERATURE,
            online_scorer: Method::Uhead,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CombinerConfig {
    pub problems: usize,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            problems: crate::eval::COMBINER_SUBSET,
            iterations: 500,
            lr: 1.0,
        }
    }
}

/// Training-set scaling and diversity-subset analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub enabled: bool,
    /// Problem counts for the add-questions curve (3 trajectories each).
    pub grid: Vec<usize>,
    /// Problem count for the 1- vs 3-trajectory comparison.
    pub trajectory_problems: usize,
    /// Fraction of training problems kept by the diversity subsets.
    pub subset_frac: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grid: vec![250, 1000, 2000],
            trajectory_problems: 1000,
            subset_frac: 0.25,
        }
    }
}

/// Everything a run depends on. `out_dir` is excluded from the hash so
/// the same settings give the same artifacts wherever they are written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub lm: LmConfig,
    pub lm_train: LmTrainHyper,
    pub corpus: CorpusConfig,
    pub data: DataConfig,
    pub sampling: SamplingParams,
    pub judge: JudgeMode,
    pub features: FeatureConfig,
    pub uhead: UHeadConfig,
    pub uhead_train: UHeadTrainHyper,
    pub lexical: LexicalConfig,
    pub bon: BonConfig,
    pub combiner: CombinerConfig,
    pub analysis: AnalysisConfig,
}

/// Head size used by the bundled configs; the full-size head is
/// `UHeadConfig::new`.
pub fn desk_uhead(input_dim: usize) -> UHeadConfig {
    UHeadConfig {
        d_model: 128,
        n_heads: 8,
        ..UHeadConfig::new(input_dim)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = LmConfig::default();
        let features = FeatureConfig::all_heads(lm.n_layers, lm.n_heads);
        let uhead = desk_uhead(features.width());
        Self {
            seed: 0,
            out_dir: "out".into(),
            lm_train: LmTrainHyper {
                epochs: 6,
                ..LmTrainHyper::default()
            },
            lm,
            corpus: CorpusConfig::default(),
            data: DataConfig::default(),
            sampling: SamplingParams::traindata(0),
            judge: JudgeMode::Noisy {
                accuracy: crate::taskgen::DEFAULT_JUDGE_ACCURACY,
            },
            features,
            uhead,
            uhead_train: UHeadTrainHyper::default(),
            lexical: LexicalConfig::default(),
            bon: BonConfig::default(),
            combiner: CombinerConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small end-to-end configuration that runs in a few minutes.
    pub fn tiny() -> Self {
        let lm = LmConfig {
            d_model: 64,
            n_layers: 1,
            n_heads: 4,
            context: 256,
            ..LmConfig::default()
        };
        let features = FeatureConfig::all_heads(lm.n_layers, lm.n_heads);
        let uhead = UHeadConfig {
            d_model: 32,
            n_heads: 4,
            ..UHeadConfig::new(features.width())
        };
        Self {
            seed: 7,
            out_dir: "out-tiny".into(),
            lm,
            lm_train: LmTrainHyper {
                epochs: 6,
                ..LmTrainHyper::default()
            },
            corpus: CorpusConfig {
                chain_arith: 2000,
                schedule: 1000,
                difficulty: 0,
            },
            data: DataConfig {
                train_problems: 80,
                test_id_problems: 40,
                test_ood_problems: 20,
                ..DataConfig::default()
            },
            sampling: SamplingParams {
                max_new_tokens: 96,
                ..SamplingParams::traindata(0)
            },
            features,
            uhead,
            uhead_train: UHeadTrainHyper {
                batch: 32,
                epochs: 2,
                ..UHeadTrainHyper::default()
            },
            lexical: LexicalConfig {
                enabled: true,
                samples: 3,
                max_new_tokens: 16,
            },
            bon: BonConfig {
                chain_arith_problems: 12,
                schedule_problems: 8,
                n_chain_arith: 4,
                n_schedule: 3,
                online_problems: 8,
                online_n: 3,
                max_steps: 8,
                ..BonConfig::default()
            },
            combiner: CombinerConfig {
                problems: 20,
                iterations: 200,
                lr: 1.0,
            },
            analysis: AnalysisConfig {
                enabled: true,
                grid: vec![20, 80],
                trajectory_problems: 40,
                subset_frac: 0.25,
            },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical JSON with `out_dir` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::ConfigInvalid(m));
        self.lm.validate().map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        self.features
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        self.uhead
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        self.sampling
            .validate(self.lm.vocab_size)
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        if self.lm.vocab_size != Vocabulary::new().len() {
            return bad(format!(
                "lm.vocab_size must be {}",
                Vocabulary::new().len()
            ));
        }
        if self.features.top_k > TRACE_TOP_K || self.features.lookback > TRACE_LOOKBACK {
            return bad(format!(
                "features need top_k <= {TRACE_TOP_K} and lookback <= {TRACE_LOOKBACK}"
            ));
        }
        if let Some((l, h)) = self
            .features
            .heads
            .iter()
            .find(|&&(l, h)| l >= self.lm.n_layers || h >= self.lm.n_heads)
        {
            return bad(format!("feature head ({l}, {h}) not in the language model"));
        }
        if self.uhead.input_dim != self.features.width() {
            return bad(format!(
                "uhead.input_dim {} != feature width {}",
                self.uhead.input_dim,
                self.features.width()
            ));
        }
        let d = &self.data;
        if d.train_problems < 2
            || d.test_id_problems == 0
            || d.test_ood_problems == 0
            || d.chains_per_problem == 0
        {
            return bad("data sizes must be positive (train >= 2)".into());
        }
        if d.difficulty > 3 || d.ood_difficulty > 3 || self.corpus.difficulty > 3 {
            return bad("difficulty must be 0..=3".into());
        }
        if self.corpus.chain_arith + self.corpus.schedule == 0 {
            return bad("empty language-model corpus".into());
        }
        if let JudgeMode::Noisy { accuracy } = self.judge {
            if !(0.0..=1.0).contains(&accuracy) {
                return bad(format!("judge accuracy {accuracy} outside [0, 1]"));
            }
        }
        let h = &self.uhead_train;
        if h.batch == 0 || h.epochs == 0 || !(h.val_frac > 0.0 && h.val_frac < 1.0) || !(h.lr > 0.0) {
            return bad("uhead_train needs batch, epochs, lr > 0 and val_frac in (0, 1)".into());
        }
        let b = &self.bon;
        if b.n_chain_arith == 0 || b.n_schedule == 0 || b.online_n == 0 || b.max_steps == 0 {
            return bad("best-of-N pool sizes and max_steps must be >= 1".into());
        }
        if b.online_scorer != Method::Uhead && !Method::SINGLE_GENERATION.contains(&b.online_scorer) {
            return bad(format!(
                "online scorer must be uhead or a single-generation method, got {}",
                b.online_scorer.name()
            ));
        }
        if !(b.online_temperature >= 0.0) {
            return bad("online temperature must be >= 0".into());
        }
        if b.chain_arith_problems > d.test_id_problems
            || b.online_problems > d.test_id_problems
            || b.schedule_problems > d.test_ood_problems
        {
            return bad("best-of-N problem counts exceed the test splits".into());
        }
        if self.lexical.enabled && self.lexical.samples < 2 {
            return bad("lexical.samples must be >= 2".into());
        }
        if self.combiner.problems == 0 || self.combiner.problems >= d.test_id_problems {
            return bad("combiner.problems must be in 1..test_id_problems".into());
        }
        let a = &self.analysis;
        if a.enabled {
            if a.grid.is_empty() || a.grid.iter().any(|&g| g < 2 || g > d.train_problems) {
                return bad("analysis.grid must be nonempty with entries in 2..=train_problems".into());
            }
            if a.trajectory_problems < 2 || a.trajectory_problems > d.train_problems {
                return bad("analysis.trajectory_problems out of range".into());
            }
            if !(a.subset_frac > 0.0 && a.subset_frac <= 1.0) {
                return bad("analysis.subset_frac must be in (0, 1]".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        for c in [RunConfig::default(), RunConfig::tiny()] {
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
        assert_eq!(RunConfig::default().features.width(), 36);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
        assert!(matches!(err, PipelineError::ConfigInvalid(_)));
        let err = RunConfig::from_json(r#"{"bon": {"n_chain_arith": 3, "extra": 1}}"#).unwrap_err();
        assert!(matches!(err, PipelineError::ConfigInvalid(_)));
        let c = RunConfig::from_json(r#"{"seed": 5}"#).unwrap();
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn inconsistent_widths_are_rejected() {
        let mut c = RunConfig::default();
        c.uhead.input_dim += 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.features.heads.push((5, 0));
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, JudgeMode, PipelineError, RunConfig};
use crate::baselines::{
    lexical_similarity_uncertainty, random_scores, select_fewest_steps,
    single_generation_scores, write_score_table, Method, StepScore,
};
use crate::eval::{
    diversity_subset, fit_combiner, head_pr_auc, judge_agreement, pr_auc, prevalence,
    problem_subset, question_embedding, scaling_curves, select_steps, GridPoint, MetricReport,
    ScalingMode, ScalingPoint, SubsetMode,
};
use crate::features::{extract_chain, read_feature_file, write_feature_file, StepFeatures};
use crate::rng::derive_seed;
use crate::taskgen::{
    external_judge, gen_problems, noisy_judge, oracle_judge, parse_tokens, read_jsonl,
    write_jsonl, ArtifactHeader, ChainRecord, Family, LabelRecord, Problem, StepTrace,
};
use crate::toylm::{
    read_checkpoint, rescore, train_lm, write_checkpoint, LanguageModel, SamplingParams,
    Vocabulary,
};
use crate::tts::{
    argmax_first, majority_vote, online_bon, pass_at, sample_pool, select_offline,
    BaselineScorer, BoNResult, ChainOutcome, OnlineConfig, OracleAnswerScorer, Scorer,
    UHeadScorer,
};
use crate::uhead::{read_uhead, train_uhead, write_uhead, UHeadCheckpoint};

const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainLm,
    Sample,
    Annotate,
    Extract,
    TrainUhead,
    Score,
    BonOffline,
    BonOnline,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::GenData,
        Stage::TrainLm,
        Stage::Sample,
        Stage::Annotate,
        Stage::Extract,
        Stage::TrainUhead,
        Stage::Score,
        Stage::BonOffline,
        Stage::BonOnline,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainLm => "train-lm",
            Stage::Sample => "sample",
            Stage::Annotate => "annotate",
            Stage::Extract => "extract",
            Stage::TrainUhead => "train-uhead",
            Stage::Score => "score",
            Stage::BonOffline => "bon-offline",
            Stage::BonOnline => "bon-online",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    LmCorpus,
    Train,
    TestId,
    TestOod,
}

impl Split {
    pub const SAMPLED: [Split; 3] = [Split::Train, Split::TestId, Split::TestOod];
    pub const TEST: [Split; 2] = [Split::TestId, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::LmCorpus => "lm-corpus",
            Split::Train => "train",
            Split::TestId => "test-id",
            Split::TestOod => "test-ood",
        }
    }
}

fn problems_path(s: Split) -> String {
    format!("problems/{}.jsonl", s.name())
}
fn chains_path(s: Split) -> String {
    format!("chains/{}.jsonl", s.name())
}
fn oracle_labels_path(s: Split) -> String {
    format!("labels/{}.oracle.jsonl", s.name())
}
const JUDGE_LABELS: &str = "labels/train.judge.jsonl";
fn features_path(s: Split) -> String {
    format!("features/{}.uhft", s.name())
}
fn scores_path(s: Split) -> String {
    format!("scores/{}.jsonl", s.name())
}
fn offline_path(f: Family) -> String {
    format!("bon/offline-{}.jsonl", f.name())
}
const CONFIG_COPY: &str = "config.json";
const LM_CKPT: &str = "lm/lm.bin";
const LM_REPORT: &str = "lm/train_report.json";
const UHEAD_CKPT: &str = "uhead/uhead.bin";
const UHEAD_METRICS: &str = "uhead/train_metrics.json";
const ONLINE: &str = "bon/online.jsonl";
const COMBINED_SCORES: &str = "scores/combined.jsonl";
const COMBINER_MODEL: &str = "combiner/combiner.json";
const ANALYSIS: &str = "report/analysis.json";
pub const REPORT_JSON: &str = "report/report.json";
pub const REPORT_CSV: &str = "report/report.csv";

/// Steps of a sampled chain. Unfinished chains are parsed as truncated so
/// their completed steps still count; `None` when no step was written.
pub fn parse_chain(record: &ChainRecord, vocab: &Vocabulary) -> Option<StepTrace> {
    parse_tokens(&record.tokens[record.prompt_len..], record.prompt_len, true, vocab).ok()
}

/// Training-set scaling and diversity results stored next to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub scaling: Vec<ScalingPoint>,
    pub diversity: Vec<DiversityPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityPoint {
    pub mode: SubsetMode,
    pub problems: usize,
    pub pr_auc_id: f64,
    pub pr_auc_ood: f64,
}

/// A run directory together with its config and manifest.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
    manifest: DatasetManifest,
    pub verbose: bool,
    vocab: Vocabulary,
}

impl Run {
    pub fn open(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out)?;
        let hash = cfg.hash();
        let manifest = DatasetManifest::open(&out, &hash)?;
        let mut run = Self {
            cfg,
            out,
            hash,
            manifest,
            verbose: false,
            vocab: Vocabulary::new(),
        };
        let mut stored = run.cfg.clone();
        stored.out_dir.clear();
        run.write_bytes(CONFIG_COPY, stored.to_json().as_bytes())?;
        Ok(run)
    }

    /// Opens a finished run without writing to it. The stored config must
    /// hash to the manifest's config hash.
    pub fn existing(dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let out = dir.into();
        let manifest = DatasetManifest::load(&out)?;
        let bytes = manifest.read_verified(&out, CONFIG_COPY)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| PipelineError::Data(format!("{CONFIG_COPY}: not UTF-8")))?;
        let mut cfg = RunConfig::from_json(&text)?;
        let hash = cfg.hash();
        if hash != manifest.config_hash {
            return Err(PipelineError::HashMismatch {
                path: out.join(CONFIG_COPY).display().to_string(),
                detail: format!("config hashes to {hash}, manifest says {}", manifest.config_hash),
            });
        }
        cfg.out_dir = out.display().to_string();
        Ok(Self {
            cfg,
            out,
            hash,
            manifest,
            verbose: false,
            vocab: Vocabulary::new(),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn seed(&self, name: &str) -> u64 {
        derive_seed(self.cfg.seed, name, 0)
    }

    fn header(&self, artifact: &str) -> ArtifactHeader {
        ArtifactHeader {
            artifact: artifact.to_string(),
            version: ARTIFACT_VERSION,
            config_hash: self.hash.clone(),
        }
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        self.manifest.record(&self.out, rel)?;
        self.manifest.save(&self.out)
    }

    fn read_bytes(&self, rel: &str) -> Result<Vec<u8>, PipelineError> {
        self.manifest.read_verified(&self.out, rel)
    }

    fn check_hash(&self, rel: &str, found: &str) -> Result<(), PipelineError> {
        if found != self.hash {
            return Err(PipelineError::HashMismatch {
                path: self.out.join(rel).display().to_string(),
                detail: format!("produced under config {found}, current config is {}", self.hash),
            });
        }
        Ok(())
    }

    fn write_jsonl<T: Serialize>(
        &mut self,
        rel: &str,
        artifact: &str,
        items: &[T],
    ) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, Some(&self.header(artifact)), items)?;
        self.write_bytes(rel, &buf)
    }

    fn read_jsonl<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>, PipelineError> {
        let bytes = self.read_bytes(rel)?;
        let (header, items) = read_jsonl(bytes.as_slice())?;
        let header = header.ok_or_else(|| PipelineError::Data(format!("{rel}: missing header")))?;
        self.check_hash(rel, &header.config_hash)?;
        Ok(items)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), PipelineError> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write_bytes(rel, s.as_bytes())
    }

    /// Runs one stage; `Report` runs every stage in order.
    pub fn run_stage(&mut self, stage: Stage) -> Result<(), PipelineError> {
        if stage == Stage::Report {
            for s in &Stage::ALL[..Stage::ALL.len() - 1] {
                self.run_stage(*s)?;
            }
            return Ok(());
        }
        let t = Instant::now();
        match stage {
            Stage::GenData => self.gen_data()?,
            Stage::TrainLm => self.train_lm()?,
            Stage::Sample => self.sample()?,
            Stage::Annotate => self.annotate()?,
            Stage::Extract => self.extract()?,
            Stage::TrainUhead => self.train_uhead()?,
            Stage::Score => self.score()?,
            Stage::BonOffline => self.bon_offline()?,
            Stage::BonOnline => self.bon_online()?,
            Stage::Eval => self.eval()?,
            Stage::Report => unreachable!(),
        }
        self.log(format!("{}: done in {:.1}s", stage.name(), t.elapsed().as_secs_f64()));
        Ok(())
    }

    // ---- loaders ----

    pub fn problems(&self, split: Split) -> Result<Vec<Problem>, PipelineError> {
        self.read_jsonl(&problems_path(split))
    }

    pub fn chains(&self, split: Split) -> Result<Vec<ChainRecord>, PipelineError> {
        self.read_jsonl(&chains_path(split))
    }

    pub fn oracle_labels(&self, split: Split) -> Result<Vec<LabelRecord>, PipelineError> {
        self.read_jsonl(&oracle_labels_path(split))
    }

    pub fn judge_labels(&self) -> Result<Vec<LabelRecord>, PipelineError> {
        self.read_jsonl(JUDGE_LABELS)
    }

    pub fn language_model(&self) -> Result<LanguageModel, PipelineError> {
        let bytes = self.read_bytes(LM_CKPT)?;
        let ck = read_checkpoint(&mut bytes.as_slice())?;
        self.check_hash(LM_CKPT, &ck.meta.config_hash)?;
        Ok(ck.model)
    }

    pub fn uhead(&self) -> Result<UHeadCheckpoint, PipelineError> {
        let bytes = self.read_bytes(UHEAD_CKPT)?;
        let ck = read_uhead(&mut bytes.as_slice())?;
        self.check_hash(UHEAD_CKPT, &ck.config_hash)?;
        Ok(ck)
    }

    pub fn features(&self, split: Split) -> Result<Vec<StepFeatures>, PipelineError> {
        let rel = features_path(split);
        let bytes = self.read_bytes(&rel)?;
        let (cfg, hash, steps) = read_feature_file(&mut bytes.as_slice())?;
        self.check_hash(&rel, &hash)?;
        if cfg != self.cfg.features {
            return Err(PipelineError::Data(format!("{rel}: feature config differs from run config")));
        }
        Ok(steps)
    }

    /// Features with their "incorrect" labels from `labels`.
    pub fn labelled_features(
        &self,
        split: Split,
        labels: &[LabelRecord],
    ) -> Result<(Vec<StepFeatures>, Vec<bool>), PipelineError> {
        let steps = self.features(split)?;
        let index: HashMap<(&str, usize), &LabelRecord> = labels
            .iter()
            .map(|l| ((l.problem_id.as_str(), l.chain_index), l))
            .collect();
        let mut incorrect = Vec::with_capacity(steps.len());
        for s in &steps {
            let bit = index
                .get(&(s.problem_id.as_str(), s.chain_index))
                .and_then(|l| l.steps.get(s.step_index))
                .ok_or_else(|| {
                    PipelineError::Data(format!(
                        "no label for {} chain {} step {}",
                        s.problem_id, s.chain_index, s.step_index
                    ))
                })?;
            incorrect.push(*bit == 0);
        }
        Ok((steps, incorrect))
    }

    pub fn scores(&self, split: Split) -> Result<Vec<StepScore>, PipelineError> {
        self.read_jsonl(&scores_path(split))
    }

    pub fn offline_results(&self, family: Family) -> Result<Vec<BoNResult>, PipelineError> {
        self.read_jsonl(&offline_path(family))
    }

    pub fn online_results(&self) -> Result<Vec<BoNResult>, PipelineError> {
        self.read_jsonl(ONLINE)
    }

    pub fn report(&self) -> Result<MetricReport, PipelineError> {
        Ok(serde_json::from_slice(&self.read_bytes(REPORT_JSON)?)?)
    }

    pub fn analysis(&self) -> Result<AnalysisRecord, PipelineError> {
        Ok(serde_json::from_slice(&self.read_bytes(ANALYSIS)?)?)
    }

    // ---- stages ----

    fn gen_data(&mut self) -> Result<(), PipelineError> {
        let c = self.cfg.clone();
        let mut corpus = gen_problems(
            Family::ChainArith,
            c.corpus.chain_arith,
            self.seed("problems-lm-corpus-chain-arith"),
            c.corpus.difficulty,
        )?;
        corpus.extend(gen_problems(
            Family::Schedule,
            c.corpus.schedule,
            self.seed("problems-lm-corpus-schedule"),
            c.corpus.difficulty,
        )?);
        let splits = [
            (Split::LmCorpus, corpus),
            (
                Split::Train,
                gen_problems(
                    Family::ChainArith,
                    c.data.train_problems,
                    self.seed("problems-train"),
                    c.data.difficulty,
                )?,
            ),
            (
                Split::TestId,
                gen_problems(
                    Family::ChainArith,
                    c.data.test_id_problems,
                    self.seed("problems-test-id"),
                    c.data.difficulty,
                )?,
            ),
            (
                Split::TestOod,
                gen_problems(
                    Family::Schedule,
                    c.data.test_ood_problems,
                    self.seed("problems-test-ood"),
                    c.data.ood_difficulty,
                )?,
            ),
        ];
        let mut ids = std::collections::HashSet::new();
        for (_, ps) in &splits {
            for p in ps {
                if !ids.insert(p.id.clone()) {
                    return Err(PipelineError::Data(format!("duplicate problem id {}", p.id)));
                }
            }
        }
        for (split, ps) in &splits {
            self.write_jsonl(&problems_path(*split), "problems", ps)?;
        }
        Ok(())
    }

    fn train_lm(&mut self) -> Result<(), PipelineError> {
        let problems = self.problems(Split::LmCorpus)?;
        let render_seed = self.seed("lm-corpus-render");
        let corpus = problems
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = crate::rng::stream(render_seed, "reference", i as u64);
                p.reference_tokens(&self.vocab, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let hyper = crate::toylm::LmTrainHyper {
            seed: derive_seed(self.cfg.seed, "lm-train", self.cfg.lm_train.seed),
            ..self.cfg.lm_train.clone()
        };
        let (mut ck, report) = train_lm(&corpus, &self.cfg.lm, &hyper)?;
        ck.meta.config_hash = self.hash.clone();
        self.log(format!(
            "train-lm: epoch losses {:?}, held-out nll {:?}",
            report.epoch_losses, report.heldout_nll
        ));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck)?;
        self.write_bytes(LM_CKPT, &buf)?;
        self.write_json(LM_REPORT, &report)
    }

    fn sample(&mut self) -> Result<(), PipelineError> {
        let model = self.language_model()?;
        for split in Split::SAMPLED {
            let problems = self.problems(split)?;
            let params = SamplingParams {
                seed: self.seed(&format!("sampling-{}", split.name())),
                ..self.cfg.sampling.clone()
            };
            let mut records = Vec::new();
            for p in &problems {
                for c in sample_pool(&model, p, self.cfg.data.chains_per_problem, &params)? {
                    let g = c.generation;
                    records.push(ChainRecord {
                        problem_id: p.id.clone(),
                        chain_index: c.chain_index,
                        family: p.family,
                        text: self.vocab.detokenize(g.generated())?,
                        tokens: g.tokens,
                        prompt_len: g.prompt_len,
                        stop: g.stop,
                    });
                }
            }
            self.log(format!("sample: {} chains for {}", records.len(), split.name()));
            self.write_jsonl(&chains_path(split), "chains", &records)?;
        }
        Ok(())
    }

    fn annotate(&mut self) -> Result<(), PipelineError> {
        let external: Option<(String, Vec<LabelRecord>)> = match &self.cfg.judge {
            JudgeMode::ExternalFile { path } => {
                let f = fs::File::open(path)
                    .map_err(|_| PipelineError::MissingFile(path.clone()))?;
                let (_, records) = read_jsonl(std::io::BufReader::new(f))?;
                Some((path.clone(), records))
            }
            _ => None,
        };
        for split in Split::SAMPLED {
            let problems: HashMap<String, Problem> = self
                .problems(split)?
                .into_iter()
                .map(|p| (p.id.clone(), p))
                .collect();
            let chains = self.chains(split)?;
            let mut oracle = Vec::with_capacity(chains.len());
            let mut judged = Vec::new();
            for c in &chains {
                let p = problems.get(&c.problem_id).ok_or_else(|| {
                    PipelineError::Data(format!("chain for unknown problem {}", c.problem_id))
                })?;
                let Some(trace) = parse_chain(c, &self.vocab) else {
                    let empty = LabelRecord {
                        problem_id: c.problem_id.clone(),
                        chain_index: c.chain_index,
                        steps: Vec::new(),
                        final_correct: false,
                        judge: None,
                        note: Some("no parsable steps".into()),
                    };
                    oracle.push(empty.clone());
                    judged.push(empty);
                    continue;
                };
                let labels = oracle_judge(p, &trace)?;
                oracle.push(LabelRecord::from_labels(&c.problem_id, c.chain_index, &labels));
                if split == Split::Train {
                    let j = match (&self.cfg.judge, &external) {
                        (JudgeMode::Oracle, _) => labels,
                        (JudgeMode::Noisy { accuracy }, _) => noisy_judge(
                            &labels,
                            *accuracy,
                            derive_seed(
                                self.cfg.seed,
                                &format!("judge:{}", c.problem_id),
                                c.chain_index as u64,
                            ),
                        )?,
                        (JudgeMode::ExternalFile { .. }, Some((src, records))) => external_judge(
                            records,
                            src,
                            &c.problem_id,
                            c.chain_index,
                            trace.steps.len(),
                        )?,
                        (JudgeMode::ExternalFile { .. }, None) => unreachable!(),
                    };
                    judged.push(LabelRecord::from_labels(&c.problem_id, c.chain_index, &j));
                }
            }
            let bits: Vec<bool> = oracle.iter().flat_map(|l| l.steps.iter().map(|&b| b == 0)).collect();
            self.log(format!(
                "annotate: {} steps in {}, incorrect fraction {:.3}",
                bits.len(),
                split.name(),
                prevalence(&bits)
            ));
            self.write_jsonl(&oracle_labels_path(split), "labels", &oracle)?;
            if split == Split::Train {
                self.write_jsonl(JUDGE_LABELS, "labels", &judged)?;
            }
        }
        Ok(())
    }

    fn extract(&mut self) -> Result<(), PipelineError> {
        let model = self.language_model()?;
        for split in Split::SAMPLED {
            let chains = self.chains(split)?;
            let mut steps = Vec::new();
            for c in &chains {
                let Some(trace) = parse_chain(c, &self.vocab) else {
                    continue;
                };
                let internal = rescore(&model, &c.tokens)?;
                steps.extend(extract_chain(
                    &internal,
                    &trace,
                    &self.cfg.features,
                    &c.problem_id,
                    c.chain_index,
                )?);
            }
            let mut buf = Vec::new();
            write_feature_file(&mut buf, &self.cfg.features, &self.hash, &steps)?;
            self.write_bytes(&features_path(split), &buf)?;
        }
        Ok(())
    }

    /// Trains a head on the given training labels with the run's settings.
    pub fn fit_head(
        &self,
        steps: &[StepFeatures],
        incorrect: &[bool],
    ) -> Result<UHeadCheckpoint, PipelineError> {
        let hyper = crate::uhead::UHeadTrainHyper {
            seed: derive_seed(self.cfg.seed, "uhead-train", self.cfg.uhead_train.seed),
            ..self.cfg.uhead_train.clone()
        };
        let mut ck = train_uhead(steps, incorrect, &self.cfg.uhead, &hyper)?;
        ck.config_hash = self.hash.clone();
        Ok(ck)
    }

    fn train_uhead(&mut self) -> Result<(), PipelineError> {
        let labels = self.judge_labels()?;
        let (steps, incorrect) = self.labelled_features(Split::Train, &labels)?;
        let ck = self.fit_head(&steps, &incorrect)?;
        self.log(format!(
            "train-uhead: {} steps, selected epoch {}, {:?}",
            steps.len(),
            ck.selected_epoch,
            ck.metrics
        ));
        let mut buf = Vec::new();
        write_uhead(&mut buf, &ck)?;
        self.write_bytes(UHEAD_CKPT, &buf)?;
        self.write_json(UHEAD_METRICS, &ck.metrics)
    }

    fn score(&mut self) -> Result<(), PipelineError> {
        let model = self.language_model()?;
        let head = self.uhead()?.head;
        let vocab_size = model.config.vocab_size;
        for split in Split::TEST {
            let chains = self.chains(split)?;
            let features = self.features(split)?;
            let refs: Vec<&crate::numerics::Tensor> = features.iter().map(|s| &s.data).collect();
            let u_head = head.score_steps(&refs)?;
            let mut rows = Vec::new();
            let mut k = 0usize;
            for c in &chains {
                let Some(trace) = parse_chain(c, &self.vocab) else {
                    continue;
                };
                let internal = rescore(&model, &c.tokens)?;
                for (i, step) in trace.steps.iter().enumerate() {
                    let f = features.get(k).ok_or_else(|| {
                        PipelineError::Data("feature file has fewer steps than the chains".into())
                    })?;
                    if f.problem_id != c.problem_id || f.chain_index != c.chain_index || f.step_index != i {
                        return Err(PipelineError::Data(format!(
                            "feature order differs from chains at {} chain {} step {i}",
                            c.problem_id, c.chain_index
                        )));
                    }
                    let row = |method: Method, value: f64, fallback: bool| StepScore {
                        problem_id: c.problem_id.clone(),
                        chain_index: c.chain_index,
                        step_index: i,
                        method,
                        value,
                        fallback,
                    };
                    for (m, v) in single_generation_scores(&internal, step.span, vocab_size)? {
                        rows.push(row(m, v, false));
                    }
                    rows.push(row(Method::Uhead, u_head[k], false));
                    if self.cfg.lexical.enabled {
                        let params = SamplingParams {
                            max_new_tokens: self.cfg.lexical.max_new_tokens,
                            seed: derive_seed(
                                self.cfg.seed,
                                &format!("lexical:{}:{}", c.problem_id, c.chain_index),
                                i as u64,
                            ),
                            ..self.cfg.sampling.clone()
                        };
                        let s = lexical_similarity_uncertainty(
                            &model,
                            &c.tokens[..step.span.0],
                            self.cfg.lexical.samples,
                            &params,
                        )?;
                        rows.push(row(Method::LexicalSimilarity, s.value, s.sampler_failure));
                    }
                    k += 1;
                }
            }
            if k != features.len() {
                return Err(PipelineError::Data("feature file has more steps than the chains".into()));
            }
            let random = random_scores(k, self.seed(&format!("random-{}", split.name())));
            let mut r = 0;
            let mut with_random = Vec::with_capacity(rows.len() + k);
            for row in rows {
                let boundary = row.method == Method::Uhead;
                let (pid, chain, step) = (row.problem_id.clone(), row.chain_index, row.step_index);
                with_random.push(row);
                if boundary {
                    with_random.push(StepScore {
                        problem_id: pid,
                        chain_index: chain,
                        step_index: step,
                        method: Method::Random,
                        value: random[r],
                        fallback: false,
                    });
                    r += 1;
                }
            }
            let mut buf = Vec::new();
            write_score_table(&mut buf, Some(&self.header("scores")), &with_random)?;
            self.write_bytes(&scores_path(split), &buf)?;
        }
        Ok(())
    }

    fn bon_offline(&mut self) -> Result<(), PipelineError> {
        let model = self.language_model()?;
        let head = self.uhead()?.head;
        let vocab_size = model.config.vocab_size;
        let uhead_scorer = UHeadScorer {
            head: &head,
            features: &self.cfg.features,
        };
        let mut scorers: Vec<Box<dyn Scorer + '_>> =
            vec![Box::new(OracleAnswerScorer), Box::new(uhead_scorer)];
        for m in Method::SINGLE_GENERATION {
            scorers.push(Box::new(BaselineScorer::new(m, vocab_size)?));
        }
        let params = SamplingParams {
            seed: self.seed("bon-pool"),
            ..self.cfg.sampling.clone()
        };
        let mut outputs = Vec::new();
        for (split, family, count, n) in [
            (Split::TestId, Family::ChainArith, self.cfg.bon.chain_arith_problems, self.cfg.bon.n_chain_arith),
            (Split::TestOod, Family::Schedule, self.cfg.bon.schedule_problems, self.cfg.bon.n_schedule),
        ] {
            let problems = self.problems(split)?;
            let mut results = Vec::new();
            for p in problems.iter().take(count) {
                let pool = sample_pool(&model, p, n, &params)?;
                for s in &scorers {
                    results.push(select_offline(p, &pool, s.as_ref(), self.cfg.bon.aggregate)?);
                }
                results.push(majority_result(p, &pool));
                results.push(fewest_steps_result(p, &pool));
            }
            outputs.push((offline_path(family), results));
        }
        drop(scorers);
        for (rel, results) in outputs {
            self.write_jsonl(&rel, "bon-offline", &results)?;
        }
        Ok(())
    }

    fn bon_online(&mut self) -> Result<(), PipelineError> {
        let model = self.language_model()?;
        let head = self.uhead()?.head;
        let b = &self.cfg.bon;
        let scorer: Box<dyn Scorer + '_> = match b.online_scorer {
            Method::Uhead => Box::new(UHeadScorer {
                head: &head,
                features: &self.cfg.features,
            }),
            m => Box::new(BaselineScorer::new(m, model.config.vocab_size)?),
        };
        let seed = self.seed("online");
        let selective = OnlineConfig {
            n: b.online_n,
            max_steps: b.max_steps,
            params: SamplingParams {
                temperature: b.online_temperature,
                seed,
                ..self.cfg.sampling.clone()
            },
        };
        let plain_hot = OnlineConfig {
            n: 1,
            ..selective.clone()
        };
        let plain = OnlineConfig {
            n: 1,
            params: SamplingParams {
                seed,
                ..self.cfg.sampling.clone()
            },
            ..selective.clone()
        };
        let mut results = Vec::new();
        for p in self.problems(Split::TestId)?.iter().take(b.online_problems) {
            results.push(online_bon(&model, p, scorer.as_ref(), &selective)?);
            for (name, cfg) in [("plain-online-temperature", &plain_hot), ("plain", &plain)] {
                let mut r = online_bon(&model, p, &OracleAnswerScorer, cfg)?;
                r.scorer = name.to_string();
                results.push(r);
            }
        }
        drop(scorer);
        self.write_jsonl(ONLINE, "bon-online", &results)
    }

    fn eval(&mut self) -> Result<(), PipelineError> {
        let mut report = MetricReport::new(self.hash.clone(), self.cfg.seed);
        self.step_detection(&mut report)?;
        self.judge_metrics(&mut report)?;
        self.combiner(&mut report)?;
        self.bon_metrics(&mut report)?;
        if self.cfg.analysis.enabled {
            let analysis = self.analysis_run(&mut report)?;
            self.write_json(ANALYSIS, &analysis)?;
        }
        self.write_bytes(REPORT_JSON, report.to_json().as_bytes())?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        self.write_bytes(REPORT_CSV, &csv)
    }

    /// Scores of `split` joined with oracle "incorrect" labels, per method.
    fn labelled_scores(
        &self,
        split: Split,
    ) -> Result<BTreeMap<Method, (Vec<bool>, Vec<f64>, usize)>, PipelineError> {
        let labels = self.oracle_labels(split)?;
        let index: HashMap<(&str, usize), &LabelRecord> = labels
            .iter()
            .map(|l| ((l.problem_id.as_str(), l.chain_index), l))
            .collect();
        let mut out: BTreeMap<Method, (Vec<bool>, Vec<f64>, usize)> = BTreeMap::new();
        for s in self.scores(split)? {
            let bit = index
                .get(&(s.problem_id.as_str(), s.chain_index))
                .and_then(|l| l.steps.get(s.step_index))
                .ok_or_else(|| PipelineError::Data(format!("no label for score row {}", s.problem_id)))?;
            let e = out.entry(s.method).or_default();
            e.0.push(*bit == 0);
            e.1.push(s.value);
            e.2 += s.fallback as usize;
        }
        Ok(out)
    }

    fn step_detection(&self, report: &mut MetricReport) -> Result<(), PipelineError> {
        for split in Split::TEST {
            let table = self.labelled_scores(split)?;
            let Some((labels, _, _)) = table.get(&Method::Uhead) else {
                return Err(PipelineError::Data(format!("{}: no head scores", split.name())));
            };
            report.push(split.name(), "-", "steps", labels.len() as f64);
            report.push(split.name(), "-", "prevalence", prevalence(labels));
            for (method, (labels, scores, fallbacks)) in &table {
                match pr_auc(labels, scores) {
                    Ok(ap) => report.push(split.name(), method.name(), "pr_auc", ap),
                    Err(crate::eval::EvalError::DegenerateLabels) => {}
                    Err(e) => return Err(e.into()),
                }
                if *fallbacks > 0 {
                    report.push(split.name(), method.name(), "fallbacks", *fallbacks as f64);
                }
            }
        }
        report.add_macro_average(&["test-id", "test-ood"], &["pr_auc", "prevalence"], "macro");
        Ok(())
    }

    fn judge_metrics(&self, report: &mut MetricReport) -> Result<(), PipelineError> {
        let oracle = self.oracle_labels(Split::Train)?;
        let judged = self.judge_labels()?;
        let flat = |ls: &[LabelRecord]| -> Vec<bool> {
            ls.iter().flat_map(|l| l.steps.iter().map(|&b| b == 1)).collect()
        };
        if let Ok(a) = judge_agreement(&flat(&judged), &flat(&oracle)) {
            report.push("train", "judge", "step_agreement", a);
        }
        Ok(())
    }

    fn combiner(&mut self, report: &mut MetricReport) -> Result<(), PipelineError> {
        let labels = self.oracle_labels(Split::TestId)?;
        let index: HashMap<(&str, usize), &LabelRecord> = labels
            .iter()
            .map(|l| ((l.problem_id.as_str(), l.chain_index), l))
            .collect();
        let mut by_key: BTreeMap<(String, usize, usize), [Option<f64>; 2]> = BTreeMap::new();
        let mut order = Vec::new();
        for s in self.scores(Split::TestId)? {
            let slot = match s.method {
                Method::Uhead => 0,
                Method::Perplexity => 1,
                _ => continue,
            };
            let key = (s.problem_id.clone(), s.chain_index, s.step_index);
            let e = by_key.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                [None, None]
            });
            e[slot] = Some(s.value);
        }
        let ids: Vec<String> = order.iter().map(|k| k.0.clone()).collect();
        let subset: std::collections::HashSet<String> =
            problem_subset(&ids, self.cfg.combiner.problems, self.seed("combiner"))?
                .into_iter()
                .collect();
        let mut fit = (Vec::new(), Vec::new(), Vec::new());
        let mut held = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for key in &order {
            let [Some(a), Some(b)] = by_key[key] else {
                return Err(PipelineError::Data(format!("missing head or perplexity score for {}", key.0)));
            };
            let y = index
                .get(&(key.0.as_str(), key.1))
                .and_then(|l| l.steps.get(key.2))
                .map(|&b| b == 0)
                .ok_or_else(|| PipelineError::Data(format!("no label for {}", key.0)))?;
            if subset.contains(&key.0) {
                fit.0.push(a);
                fit.1.push(b);
                fit.2.push(y);
            } else {
                held.0.push(a);
                held.1.push(b);
                held.2.push(y);
                held.3.push(key.clone());
            }
        }
        if !two_classes(&fit.2) || !two_classes(&held.2) {
            self.log("eval: combiner skipped, one label class only");
            return Ok(());
        }
        let model = fit_combiner(&fit.0, &fit.1, &fit.2, self.cfg.combiner.iterations, self.cfg.combiner.lr)?;
        let combined = model.apply_all(&held.0, &held.1);
        let ds = "test-id-heldout";
        report.push(ds, "-", "steps", held.2.len() as f64);
        for (name, s) in [("uhead", &held.0), ("perplexity", &held.1), ("combined", &combined)] {
            if let Ok(ap) = pr_auc(&held.2, s) {
                report.push(ds, name, "pr_auc", ap);
            }
        }
        let rows: Vec<StepScore> = held
            .3
            .iter()
            .zip(&combined)
            .map(|(k, &v)| StepScore {
                problem_id: k.0.clone(),
                chain_index: k.1,
                step_index: k.2,
                method: Method::Combined,
                value: v,
                fallback: false,
            })
            .collect();
        let mut buf = Vec::new();
        write_score_table(&mut buf, Some(&self.header("scores")), &rows)?;
        self.write_bytes(COMBINED_SCORES, &buf)?;
        self.write_json(COMBINER_MODEL, &model)
    }

    fn bon_metrics(&self, report: &mut MetricReport) -> Result<(), PipelineError> {
        for family in [Family::ChainArith, Family::Schedule] {
            let results = self.offline_results(family)?;
            let ds = format!("bon-{}", family.name());
            let mut names: Vec<String> = Vec::new();
            for r in &results {
                if !names.contains(&r.scorer) {
                    names.push(r.scorer.clone());
                }
            }
            for name in &names {
                let rs: Vec<&BoNResult> = results.iter().filter(|r| &r.scorer == name).collect();
                let acc = rs.iter().filter(|r| r.correct).count() as f64 / rs.len().max(1) as f64;
                report.push(&ds, name, "accuracy", acc);
            }
            let pools: Vec<Vec<bool>> = results
                .iter()
                .filter(|r| r.scorer == "oracle-answer")
                .map(|r| r.chains.iter().map(|c| c.correct).collect())
                .collect();
            if let Ok(p) = pass_at(&pools) {
                report.push(&ds, "-", "pass@1", p.pass_1);
                report.push(&ds, "-", "pass@n", p.pass_n);
                report.push(&ds, "-", "problems", pools.len() as f64);
            }
        }
        let online = self.online_results()?;
        let mut names: Vec<String> = Vec::new();
        for r in &online {
            if !names.contains(&r.scorer) {
                names.push(r.scorer.clone());
            }
        }
        for name in names {
            let rs: Vec<&BoNResult> = online.iter().filter(|r| r.scorer == name).collect();
            let n = rs.len().max(1) as f64;
            report.push("online-chain-arith", &name, "accuracy", rs.iter().filter(|r| r.correct).count() as f64 / n);
            report.push(
                "online-chain-arith",
                &name,
                "budget_exhausted",
                rs.iter().filter(|r| r.budget_exhausted).count() as f64,
            );
        }
        Ok(())
    }

    fn analysis_run(&self, report: &mut MetricReport) -> Result<AnalysisRecord, PipelineError> {
        let a = self.cfg.analysis.clone();
        let chains = self.cfg.data.chains_per_problem;
        let judged = self.judge_labels()?;
        let (train, train_y) = self.labelled_features(Split::Train, &judged)?;
        let (id, id_y) = self.labelled_features(Split::TestId, &self.oracle_labels(Split::TestId)?)?;
        let (ood, ood_y) =
            self.labelled_features(Split::TestOod, &self.oracle_labels(Split::TestOod)?)?;
        if ![&train_y, &id_y, &ood_y].iter().all(|y| two_classes(y)) {
            self.log("eval: analysis skipped, one label class only");
            return Ok(AnalysisRecord {
                scaling: Vec::new(),
                diversity: Vec::new(),
            });
        }
        let hyper = crate::uhead::UHeadTrainHyper {
            seed: derive_seed(self.cfg.seed, "uhead-train", self.cfg.uhead_train.seed),
            ..self.cfg.uhead_train.clone()
        };

        // label source: the same head trained on exact labels
        if self.cfg.judge != JudgeMode::Oracle {
            let oracle = self.oracle_labels(Split::Train)?;
            let (steps, y) = self.labelled_features(Split::Train, &oracle)?;
            if two_classes(&y) {
                let ck = self.fit_head(&steps, &y)?;
                report.push("test-id", "uhead-oracle-labels", "pr_auc", head_pr_auc(&ck.head, &id, &id_y)?);
                report.push("test-ood", "uhead-oracle-labels", "pr_auc", head_pr_auc(&ck.head, &ood, &ood_y)?);
            }
        }

        let mut grid: Vec<GridPoint> = a
            .grid
            .iter()
            .map(|&g| GridPoint {
                mode: ScalingMode::AddQuestions,
                problems: g,
                trajectories: chains,
            })
            .collect();
        for t in [1, chains] {
            grid.push(GridPoint {
                mode: ScalingMode::AddTrajectories,
                problems: a.trajectory_problems,
                trajectories: t,
            });
        }
        let scaling = scaling_curves((&train, &train_y), (&id, &id_y), &grid, &self.cfg.uhead, &hyper)?;
        for p in &scaling {
            let mode = match p.mode {
                ScalingMode::AddQuestions => "questions",
                ScalingMode::AddTrajectories => "trajectories",
            };
            report.push(
                "scaling",
                &format!("{mode}-{}x{}", p.problems, p.trajectories),
                "pr_auc",
                p.pr_auc,
            );
        }

        let model = self.language_model()?;
        let problems = self.problems(Split::Train)?;
        let embeddings = problems
            .iter()
            .map(|p| {
                let t = p.prompt_tokens(&self.vocab)?;
                Ok(question_embedding(&model, &t)?)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let k = ((problems.len() as f64 * a.subset_frac).round() as usize).clamp(2, problems.len());
        let mut diversity = Vec::new();
        for (mode, name) in [
            (SubsetMode::FarthestFirst, "farthest-first"),
            (SubsetMode::NearestMedian, "nearest-median"),
        ] {
            let idx = diversity_subset(&embeddings, k, mode)?;
            let ids: Vec<String> = idx.iter().map(|&i| problems[i].id.clone()).collect();
            let (steps, y) = select_steps(&train, &train_y, &ids, chains);
            let ck = self.fit_head(&steps, &y)?;
            let point = DiversityPoint {
                mode,
                problems: k,
                pr_auc_id: head_pr_auc(&ck.head, &id, &id_y)?,
                pr_auc_ood: head_pr_auc(&ck.head, &ood, &ood_y)?,
            };
            report.push("diversity", name, "pr_auc-id", point.pr_auc_id);
            report.push("diversity", name, "pr_auc-ood", point.pr_auc_ood);
            report.push("diversity", name, "pr_auc-macro", (point.pr_auc_id + point.pr_auc_ood) / 2.0);
            diversity.push(point);
        }
        Ok(AnalysisRecord { scaling, diversity })
    }
}

fn two_classes(y: &[bool]) -> bool {
    y.contains(&true) && y.contains(&false)
}

fn pool_outcomes(pool: &[crate::tts::SampledChain]) -> Vec<ChainOutcome> {
    pool.iter()
        .map(|c| ChainOutcome {
            chain_index: c.chain_index,
            step_uncertainties: Vec::new(),
            aggregate: None,
            answer: c.parsed.as_ref().ok().and_then(|p| p.answer.clone()),
            correct: c.correct,
            error: c.parsed.as_ref().err().cloned(),
        })
        .collect()
}

/// Majority vote over the pool's answers; the first chain giving the
/// winning answer is reported as chosen.
fn majority_result(p: &Problem, pool: &[crate::tts::SampledChain]) -> BoNResult {
    let chains = pool_outcomes(pool);
    let answers: Vec<&str> = chains.iter().filter_map(|c| c.answer.as_deref()).collect();
    let winner = majority_vote(&answers).ok();
    let chosen = winner
        .as_ref()
        .and_then(|w| chains.iter().position(|c| c.answer.as_deref().map(str::trim) == Some(w.as_str())))
        .unwrap_or(0);
    let correct = winner.as_deref() == Some(p.answer.as_str());
    BoNResult {
        problem_id: p.id.clone(),
        scorer: "majority-vote".into(),
        chains,
        chosen,
        answer: winner,
        correct,
        budget_exhausted: false,
        candidate_qualities: Vec::new(),
    }
}

/// Fewest steps wins; chains without steps rank last.
fn fewest_steps_result(p: &Problem, pool: &[crate::tts::SampledChain]) -> BoNResult {
    let mut chains = pool_outcomes(pool);
    let counts: Vec<usize> = pool
        .iter()
        .map(|c| c.parsed.as_ref().map_or(usize::MAX, |t| t.steps.len()))
        .collect();
    for (o, &n) in chains.iter_mut().zip(&counts) {
        o.aggregate = (n != usize::MAX).then(|| -(n as f64));
    }
    let chosen = select_fewest_steps(&counts).unwrap_or_else(|_| {
        argmax_first(
            &chains
                .iter()
                .map(|c| c.aggregate.unwrap_or(f64::NEG_INFINITY))
                .collect::<Vec<_>>(),
        )
        .unwrap_or(0)
    });
    BoNResult {
        problem_id: p.id.clone(),
        scorer: "min-steps".into(),
        answer: chains[chosen].answer.clone(),
        correct: chains[chosen].correct,
        chains,
        chosen,
        budget_exhausted: false,
        candidate_qualities: Vec::new(),
    }
}

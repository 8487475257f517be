//! Command-line front end over the pipeline stages.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::baselines::Method;
use crate::pipeline::{validate_manifest, JudgeMode, PipelineError, Run, RunConfig, Stage};
use crate::tts::Aggregation;

pub const TINY_CONFIG: &str = include_str!("../configs/tiny.json");

#[derive(Debug, Parser)]
#[command(
    name = "steplab",
    version,
    about = "Step-level uncertainty heads and best-of-N selection on a toy reasoning model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate problem splits
    GenData(Common),
    /// Train the language model on gold solutions
    TrainLm(Common),
    /// Sample reasoning chains for every split
    Sample(Common),
    /// Label steps with the oracle and the configured judge
    Annotate(Common),
    /// Extract per-step feature tensors
    Extract(Common),
    /// Train the uncertainty head
    TrainUhead(Common),
    /// Score test steps with the head and the baselines
    Score(Common),
    /// Offline best-of-N over sampled pools
    BonOffline(Common),
    /// Step-wise online best-of-N
    BonOnline(Common),
    /// Compute the metric report
    Eval(Common),
    /// Run every stage and write the metric report
    Report(Common),
    /// Check every artifact in a run directory against its manifest
    Verify {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Config file, or `tiny` / `default` for the bundled configs
    #[arg(long, value_name = "PATH")]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Pool size (bon stages) or chains per problem (sample)
    #[arg(long)]
    n: Option<usize>,
    /// Online search temperature (bon-online) or sampling temperature
    #[arg(long)]
    temperature: Option<f32>,
    /// Switches the judge to noisy labels with this accuracy
    #[arg(long)]
    judge_accuracy: Option<f64>,
    /// Online search scorer
    #[arg(long, value_enum)]
    scorer: Option<Method>,
    #[arg(long, value_enum)]
    aggregate: Option<Aggregation>,
    /// Log stage progress to stderr
    #[arg(long, short)]
    verbose: bool,
}

fn load_config(spec: Option<&str>) -> Result<RunConfig, PipelineError> {
    match spec {
        None | Some("default") => Ok(RunConfig::default()),
        Some("tiny") => RunConfig::from_json(TINY_CONFIG),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::ConfigInvalid(format!("{path}: {e}")))?;
            RunConfig::from_json(&text)
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, stage: Stage, c: &Common) {
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(n) = c.n {
        match stage {
            Stage::Sample => cfg.data.chains_per_problem = n,
            Stage::BonOnline => cfg.bon.online_n = n,
            _ => {
                cfg.bon.n_chain_arith = n;
                cfg.bon.n_schedule = n;
            }
        }
    }
    if let Some(t) = c.temperature {
        match stage {
            Stage::BonOnline => cfg.bon.online_temperature = t,
            _ => cfg.sampling.temperature = t,
        }
    }
    if let Some(a) = c.judge_accuracy {
        cfg.judge = JudgeMode::Noisy { accuracy: a };
    }
    if let Some(m) = c.scorer {
        cfg.bon.online_scorer = m;
    }
    if let Some(a) = c.aggregate {
        cfg.bon.aggregate = a;
    }
}

fn execute(stage: Stage, c: &Common) -> Result<(), PipelineError> {
    let mut cfg = load_config(c.config.as_deref())?;
    apply_overrides(&mut cfg, stage, c);
    let out = PathBuf::from(&cfg.out_dir);
    let mut run = Run::open(cfg, &out)?;
    run.verbose = c.verbose;
    run.run_stage(stage)?;
    if matches!(stage, Stage::Eval | Stage::Report) {
        println!("{}", out.join(crate::pipeline::REPORT_JSON).display());
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 ok, 2 usage or config error, 3 data error, 4
/// runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Verify { out } => validate_manifest(out).map(|m| {
            println!("ok: {} artifacts", m.artifacts.len());
        }),
        cmd => {
            let (stage, common) = match cmd {
                Command::GenData(c) => (Stage::GenData, c),
                Command::TrainLm(c) => (Stage::TrainLm, c),
                Command::Sample(c) => (Stage::Sample, c),
                Command::Annotate(c) => (Stage::Annotate, c),
                Command::Extract(c) => (Stage::Extract, c),
                Command::TrainUhead(c) => (Stage::TrainUhead, c),
                Command::Score(c) => (Stage::Score, c),
                Command::BonOffline(c) => (Stage::BonOffline, c),
                Command::BonOnline(c) => (Stage::BonOnline, c),
                Command::Eval(c) => (Stage::Eval, c),
                Command::Report(c) => (Stage::Report, c),
                Command::Verify { .. } => unreachable!(),
            };
            execute(stage, common)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_tiny_config_matches_code() {
        assert_eq!(RunConfig::from_json(TINY_CONFIG).unwrap(), RunConfig::tiny());
    }

    #[test]
    fn help_and_usage_errors() {
        assert_eq!(run(["steplab", "--help"]), 0);
        assert_eq!(run(["steplab", "report", "--help"]), 0);
        assert_eq!(run(["steplab", "report", "--bogus"]), 2);
        assert_eq!(run(["steplab", "frobnicate"]), 2);
        assert_eq!(run(["steplab", "report", "--aggregate", "median"]), 2);
    }

    #[test]
    fn config_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 1, "colour": "red"}"#).unwrap();
        let out = dir.path().join("o");
        let args = [
            "steplab",
            "gen-data",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        assert_eq!(run(args), 2);
        assert_eq!(run(["steplab", "gen-data", "--config", "/nonexistent/x.json"]), 2);
    }

    #[test]
    fn missing_inputs_exit_3() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["steplab", "train-lm", "--config", "tiny", "--out", out]), 3);
        assert_eq!(run(["steplab", "verify", "--out", "/nonexistent/run"]), 3);
    }

    #[test]
    fn overrides_reach_config() {
        let c = Cli::try_parse_from([
            "steplab",
            "bon-online",
            "--n",
            "7",
            "--temperature",
            "0.5",
            "--scorer",
            "perplexity",
            "--aggregate",
            "mean",
            "--judge-accuracy",
            "0.9",
            "--seed",
            "3",
        ])
        .unwrap();
        let Command::BonOnline(common) = c.command else {
            panic!("wrong subcommand")
        };
        let mut cfg = RunConfig::tiny();
        apply_overrides(&mut cfg, Stage::BonOnline, &common);
        assert_eq!(cfg.bon.online_n, 7);
        assert_eq!(cfg.bon.online_temperature, 0.5);
        assert_eq!(cfg.bon.online_scorer, Method::Perplexity);
        assert_eq!(cfg.bon.aggregate, Aggregation::Mean);
        assert_eq!(cfg.judge, JudgeMode::Noisy { accuracy: 0.9 });
        assert_eq!(cfg.seed, 3);
        cfg.validate().unwrap();
    }
}

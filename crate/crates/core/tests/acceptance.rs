//! End-to-end acceptance run. Trains the default pipeline once, then checks
//! each numbered criterion and prints one PASS/FAIL line per criterion.
//! Exits nonzero when any criterion fails.
//!
//! `STEPLAB_ACCEPTANCE_DIR` keeps the default run's artifacts in that
//! directory instead of a temporary one.


use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steplab::eval::{pr_auc, MetricReport};
use steplab::pipeline::{desk_uhead, Run, RunConfig, Stage, REPORT_JSON};
use steplab::rng::{derive_seed, stream};
use steplab::taskgen::{gen_problems, Family};
use steplab::toylm::{mean_nll, Vocabulary};
use steplab::tts::{aggregate_chain, argmax_first, Aggregation, BoNResult};
use steplab::uhead::{UHead, UHeadConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---- 1 ----

fn autodiff() -> Verdict {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let g = gradcheck::random_graph(0xACCE, i);
        worst = worst.max(gradcheck::max_relative_error(&g, 1e-3));
    }
    let el = t.elapsed();
    verdict(
        worst <= 1e-4 && el < Duration::from_secs(60),
        format!("100 graphs, worst relative error {worst:.2e}, {:.1}s", secs(el)),
    )
}

// ---- 2 ----

/// Mean over positives of the precision at that positive's score, with
/// every tied item counted as retrieved.
fn brute_force_ap(labels: &[bool], scores: &[f64]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut sum = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        let mut hits = 0.0;
        let mut retrieved = 0.0;
        for (j, &lj) in labels.iter().enumerate() {
            if scores[j] >= scores[i] {
                retrieved += 1.0;
                if lj {
                    hits += 1.0;
                }
            }
        }
        sum += hits / retrieved;
    }
    sum / positives
}

fn metric_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA9);
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    for n in 1..=6usize {
        for mask in 0u32..(1 << n) {
            let labels: Vec<bool> = (0..n).map(|b| mask >> b & 1 == 1).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            for _ in 0..100 {
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 * 0.25).collect();
                let got = pr_auc(&labels, &scores).expect("two classes");
                worst = worst.max((got - brute_force_ap(&labels, &scores)).abs());
                cases += 1;
            }
        }
    }
    let el = t.elapsed();
    verdict(
        worst <= 1e-12 && el < Duration::from_secs(60),
        format!("{cases} cases, max deviation {worst:.1e}, {:.1}s", secs(el)),
    )
}

// ---- default run ----

struct Lab {
    run: Run,
    report: MetricReport,
    times: BTreeMap<&'static str, Duration>,
    _tmp: Option<tempfile::TempDir>,
}

fn run_default() -> Result<Lab, String> {
    let (dir, tmp) = match std::env::var_os("STEPLAB_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir().map_err(|e| e.to_string())?;
            (t.path().to_path_buf(), Some(t))
        }
    };
    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.display().to_string();
    let mut run = Run::open(cfg, &dir).map_err(|e| e.to_string())?;
    run.verbose = true;
    let mut times = BTreeMap::new();
    for stage in &Stage::ALL[..Stage::ALL.len() - 1] {
        let t = Instant::now();
        run.run_stage(*stage).map_err(|e| format!("{}: {e}", stage.name()))?;
        times.insert(stage.name(), t.elapsed());
    }
    let report = run.report().map_err(|e| e.to_string())?;
    Ok(Lab {
        run,
        report,
        times,
        _tmp: tmp,
    })
}

impl Lab {
    fn metric(&self, dataset: &str, method: &str, metric: &str) -> f64 {
        self.report.get(dataset, method, metric).unwrap_or(f64::NAN)
    }

    fn time(&self, names: &[&str]) -> Duration {
        names.iter().map(|n| self.times[n]).sum()
    }
}

// ---- 3 ----

fn lm_learns(lab: &Lab) -> Result<Verdict, String> {
    let model = lab.run.language_model().map_err(|e| e.to_string())?;
    let vocab = Vocabulary::new();
    let seed = derive_seed(lab.run.cfg.seed, "acceptance-heldout", 0);
    let problems = gen_problems(Family::ChainArith, 300, seed, lab.run.cfg.data.difficulty)
        .map_err(|e| e.to_string())?;
    let mut rng = stream(seed, "render", 0);
    let seqs = problems
        .iter()
        .map(|p| p.reference_tokens(&vocab, &mut rng))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let nll = mean_nll(&model, &refs).map_err(|e| e.to_string())?;
    let bound = 0.8 * (vocab.len() as f64).ln();
    let el = lab.time(&["train-lm"]);
    Ok(verdict(
        nll <= bound && el < Duration::from_secs(600),
        format!("held-out chain-arith NLL {nll:.3} (bound {bound:.3}), training {:.0}s", secs(el)),
    ))
}

// ---- 4, 5 ----

fn id_detection(lab: &Lab) -> Verdict {
    let steps = lab.metric("test-id", "-", "steps");
    let prev = lab.metric("test-id", "-", "prevalence");
    let uh = lab.metric("test-id", "uhead", "pr_auc");
    let mut ok = steps >= 3000.0 && uh >= prev + 0.15;
    let mut parts = vec![format!("{steps} steps, prevalence {prev:.3}, uhead {uh:.3}")];
    for m in ["msp", "mean-entropy", "perplexity", "self-certainty"] {
        let v = lab.metric("test-id", m, "pr_auc");
        ok &= uh >= v;
        parts.push(format!("{m} {v:.3}"));
    }
    let el = lab.time(&["extract", "train-uhead", "score"]);
    ok &= el < Duration::from_secs(900);
    parts.push(format!("extract+train+score {:.0}s", secs(el)));
    verdict(ok, parts.join(", "))
}

fn ood_detection(lab: &Lab) -> Verdict {
    let prev = lab.metric("test-ood", "-", "prevalence");
    let uh = lab.metric("test-ood", "uhead", "pr_auc");
    verdict(uh >= prev + 0.05, format!("uhead {uh:.3}, prevalence {prev:.3}"))
}

// ---- 6 ----

fn noisy_vs_oracle(lab: &Lab) -> Verdict {
    let noisy = lab.metric("test-id", "uhead", "pr_auc");
    let oracle = lab.metric("test-id", "uhead-oracle-labels", "pr_auc");
    verdict(
        (noisy - oracle).abs() <= 0.05,
        format!("noisy-label head {noisy:.3}, oracle-label head {oracle:.3}"),
    )
}

// ---- 7 ----

fn min_aggregation_matches(results: &[BoNResult]) -> bool {
    results.iter().filter(|r| r.scorer == "uhead").all(|r| {
        let q: Vec<f64> = r
            .chains
            .iter()
            .map(|c| {
                if c.step_uncertainties.is_empty() {
                    return f64::NEG_INFINITY;
                }
                let brute = c.step_uncertainties.iter().map(|u| 1.0 - u).fold(f64::INFINITY, f64::min);
                let lib = aggregate_chain(&c.step_uncertainties, Aggregation::Min).unwrap();
                if c.aggregate != Some(brute) || lib != brute {
                    return f64::NAN;
                }
                brute
            })
            .collect();
        q.iter().all(|v| !v.is_nan()) && argmax_first(&q) == Some(r.chosen)
    })
}

fn bon_sanity(lab: &Lab) -> Result<Verdict, String> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (family, n) in [(Family::ChainArith, 10), (Family::Schedule, 5)] {
        let ds = format!("bon-{}", family.name());
        let results = lab.run.offline_results(family).map_err(|e| e.to_string())?;
        let pool_n = results.first().map_or(0, |r| r.chains.len());
        let oracle = lab.metric(&ds, "oracle-answer", "accuracy");
        let uh = lab.metric(&ds, "uhead", "accuracy");
        let p1 = lab.metric(&ds, "-", "pass@1");
        let pn = lab.metric(&ds, "-", "pass@n");
        let min_ok = min_aggregation_matches(&results);
        ok &= pool_n == n && oracle == pn && uh >= p1 && min_ok;
        parts.push(format!(
            "{}: N={pool_n}, oracle {oracle:.3} = pass@N {pn:.3}, uhead {uh:.3} vs pass@1 {p1:.3}, min-agg {}",
            family.name(),
            if min_ok { "exact" } else { "MISMATCH" }
        ));
    }
    Ok(verdict(ok, parts.join("; ")))
}

// ---- 8 ----

fn online(lab: &Lab) -> Result<Verdict, String> {
    let results = lab.run.online_results().map_err(|e| e.to_string())?;
    let count = |s: &str| results.iter().filter(|r| r.scorer == s).count();
    let uh = lab.metric("online-chain-arith", "uhead", "accuracy");
    let plain = lab.metric("online-chain-arith", "plain-online-temperature", "accuracy");
    let plain_t1 = lab.metric("online-chain-arith", "plain", "accuracy");
    let b = &lab.run.cfg.bon;
    let n = count("uhead");
    Ok(verdict(
        n >= 200 && b.online_n == 5 && b.online_temperature == 1.5 && uh >= plain,
        format!(
            "{n} problems, uhead N=5 T=1.5 {uh:.3} vs plain T=1.5 {plain:.3} (plain at sampling T {plain_t1:.3})"
        ),
    ))
}

// ---- 9 ----

fn combiner(lab: &Lab) -> Verdict {
    let ds = "test-id-heldout";
    let c = lab.metric(ds, "combined", "pr_auc");
    let a = lab.metric(ds, "uhead", "pr_auc");
    let b = lab.metric(ds, "perplexity", "pr_auc");
    verdict(
        c >= a.max(b) - 0.02 && lab.run.cfg.combiner.problems == 200,
        format!("combined {c:.3}, uhead {a:.3}, perplexity {b:.3}, fit on 200 problems"),
    )
}

// ---- 10 ----

fn scaling(lab: &Lab) -> Verdict {
    let grid = &lab.run.cfg.analysis.grid;
    let chains = lab.run.cfg.data.chains_per_problem;
    let tp = lab.run.cfg.analysis.trajectory_problems;
    let q = |p: usize| lab.metric("scaling", &format!("questions-{p}x{chains}"), "pr_auc");
    let t = |k: usize| lab.metric("scaling", &format!("trajectories-{tp}x{k}"), "pr_auc");
    let (small, large) = (q(grid[0]), q(*grid.last().unwrap()));
    let (one, three) = (t(1), t(chains));
    let ff = lab.metric("diversity", "farthest-first", "pr_auc-macro");
    let nm = lab.metric("diversity", "nearest-median", "pr_auc-macro");
    verdict(
        large >= small && three >= one && ff >= nm - 0.02,
        format!(
            "questions {}→{}: {small:.3}→{large:.3}; trajectories 1→{chains}: {one:.3}→{three:.3}; farthest-first {ff:.3} vs nearest-median {nm:.3}",
            grid[0],
            grid.last().unwrap()
        ),
    )
}

// ---- 11 ----

fn parameter_budget() -> Verdict {
    let cfg = RunConfig::default();
    let desk = UHead::init(cfg.uhead.clone(), 0).unwrap().parameter_count();
    let full_cfg = UHeadConfig::new(cfg.features.width());
    let full = full_cfg.parameter_count();
    verdict(
        desk < 10_000_000 && full < 10_000_000 && cfg.uhead == desk_uhead(cfg.features.width()),
        format!("bundled head {desk} parameters, full-size head {full}"),
    )
}

// ---- 12 ----

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Result<Verdict, String> {
    let t = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    for dir in [a.path(), b.path()] {
        let code = steplab::cli::run([
            "steplab",
            "report",
            "--config",
            "tiny",
            "--out",
            dir.to_str().unwrap(),
        ]);
        if code != 0 {
            return Err(format!("tiny run exited with {code}"));
        }
    }
    let el = t.elapsed();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    let differing: Vec<_> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let report_same = ta.get(Path::new(REPORT_JSON)).is_some() && ta.get(Path::new(REPORT_JSON)) == tb.get(Path::new(REPORT_JSON));
    Ok(verdict(
        differing.is_empty() && report_same && el < Duration::from_secs(1200),
        format!(
            "{} files compared, {} differ, two runs in {:.0}s",
            ta.len(),
            differing.len(),
            secs(el)
        ),
    ))
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    results.push((1, "autodiff gradients", autodiff()));
    results.push((2, "pr-auc oracle", metric_oracle()));
    results.push((11, "parameter budget", parameter_budget()));
    results.push((
        12,
        "tiny pipeline determinism",
        determinism().unwrap_or_else(|e| verdict(false, e)),
    ));
    match run_default() {
        Ok(lab) => {
            for (k, v) in &lab.times {
                eprintln!("stage {k}: {:.1}s", secs(*v));
            }
            let err = |e: String| verdict(false, e);
            results.push((3, "language model learns", lm_learns(&lab).unwrap_or_else(err)));
            results.push((4, "in-domain step detection", id_detection(&lab)));
            results.push((5, "out-of-domain step detection", ood_detection(&lab)));
            results.push((6, "noisy labels vs oracle labels", noisy_vs_oracle(&lab)));
            results.push((7, "offline best-of-n", bon_sanity(&lab).unwrap_or_else(err)));
            results.push((8, "online best-of-n", online(&lab).unwrap_or_else(err)));
            results.push((9, "score combiner", combiner(&lab)));
            results.push((10, "scaling and diversity", scaling(&lab)));
        }
        Err(e) => {
            for (id, name) in [
                (3, "language model learns"),
                (4, "in-domain step detection"),
                (5, "out-of-domain step detection"),
                (6, "noisy labels vs oracle labels"),
                (7, "offline best-of-n"),
                (8, "online best-of-n"),
                (9, "score combiner"),
                (10, "scaling and diversity"),
            ] {
                results.push((id, name, verdict(false, format!("default run failed: {e}"))));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, v) in &results {
        println!("[{}] {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

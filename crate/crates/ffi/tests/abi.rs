use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use steplab::baselines::Method;
use steplab::pipeline::{parse_chain, Run, RunConfig, Split, Stage};
use steplab::toylm::Vocabulary;
use steplab_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe { sl_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/steplab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["sl_run_open", "sl_run_free", "sl_pr_auc", "sl_run_step_uncertainties", "SlStatus"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Builds and runs a C program against the static library next to this
/// test binary.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libsteplab_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("static library or C compiler missing; link check skipped");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "steplab.h"
int main(void) {
    uint8_t labels[3] = {1, 0, 1};
    double scores[3] = {0.9, 0.8, 0.1};
    double ap = 0.0;
    if (sl_pr_auc(labels, scores, 3, &ap) != SL_STATUS_OK) return 1;
    if (ap < 0.8333 || ap > 0.8334) return 2;
    SlRun *run = NULL;
    SlStatus s = sl_run_open("/nonexistent/run", &run);
    if (s == SL_STATUS_OK || run != NULL) return 3;
    char msg[256];
    if (sl_last_error(msg, sizeof msg) == 0) return 4;
    if (strcmp(sl_status_name(SL_STATUS_OK), "ok") != 0) return 5;
    if (SL_METHOD_SELF_CERTAINTY != 4) return 6;
    printf("%s %.4f\n", sl_version(), ap);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).ends_with("0.8333\n"));
}

/// Scores computed through the handle match the ones the pipeline stored.
#[test]
fn run_handle_reproduces_stored_scores() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.analysis.enabled = false;
    cfg.lexical.enabled = false;
    let mut run = Run::open(cfg, dir.path()).unwrap();
    for stage in [
        Stage::GenData,
        Stage::TrainLm,
        Stage::Sample,
        Stage::Annotate,
        Stage::Extract,
        Stage::TrainUhead,
        Stage::Score,
    ] {
        run.run_stage(stage).unwrap();
    }
    let stored = run.scores(Split::TestId).unwrap();
    let chains = run.chains(Split::TestId).unwrap();
    let vocab = Vocabulary::new();
    let chain = chains
        .iter()
        .find(|c| parse_chain(c, &vocab).is_some_and(|t| t.steps.len() >= 2))
        .expect("a chain with two steps");

    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { sl_run_open(path.as_ptr(), &mut handle) }, SlStatus::Ok, "{}", last_error());
    let mut params = 0;
    assert_eq!(unsafe { sl_run_uhead_parameters(handle, &mut params) }, SlStatus::Ok);
    assert!(params > 0);

    let tokens: Vec<u32> = chain.tokens.iter().map(|&t| t as u32).collect();
    for (method, name) in [
        (SlMethod::Uhead, Method::Uhead),
        (SlMethod::MaxProb, Method::Msp),
        (SlMethod::MeanEntropy, Method::MeanEntropy),
        (SlMethod::Perplexity, Method::Perplexity),
        (SlMethod::SelfCertainty, Method::SelfCertainty),
    ] {
        let mut len = 0;
        let s = unsafe {
            sl_run_step_uncertainties(handle, tokens.as_ptr(), tokens.len(), chain.prompt_len, method as i32, ptr::null_mut(), 0, &mut len)
        };
        assert_eq!(s, SlStatus::BufferTooSmall);
        let mut out = vec![0.0; len];
        let s = unsafe {
            sl_run_step_uncertainties(handle, tokens.as_ptr(), tokens.len(), chain.prompt_len, method as i32, out.as_mut_ptr(), out.len(), &mut len)
        };
        assert_eq!(s, SlStatus::Ok, "{}", last_error());
        let expected: Vec<f64> = stored
            .iter()
            .filter(|r| r.problem_id == chain.problem_id && r.chain_index == chain.chain_index && r.method == name)
            .map(|r| r.value)
            .collect();
        assert_eq!(out, expected, "{name:?}");
    }

    let s = unsafe {
        sl_run_step_uncertainties(handle, tokens.as_ptr(), tokens.len(), tokens.len() + 1, SlMethod::Uhead as i32, ptr::null_mut(), 0, &mut 0)
    };
    assert_eq!(s, SlStatus::InvalidArgument);
    let s = unsafe {
        sl_run_step_uncertainties(handle, tokens.as_ptr(), tokens.len(), chain.prompt_len, 9, ptr::null_mut(), 0, &mut 0)
    };
    assert_eq!(s, SlStatus::InvalidArgument);
    assert!(last_error().contains("unknown method"));
    unsafe { sl_run_free(handle) };
}

#[test]
fn tampered_run_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(RunConfig::tiny(), dir.path()).unwrap();
    run.run_stage(Stage::GenData).unwrap();
    let config = dir.path().join("config.json");
    let text = std::fs::read_to_string(&config).unwrap().replace("\"seed\": 7", "\"seed\": 8");
    std::fs::write(&config, text).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    let s = unsafe { sl_run_open(path.as_ptr(), &mut handle) };
    assert_eq!(s, SlStatus::HashMismatch, "{}", last_error());
    assert!(handle.is_null());
}

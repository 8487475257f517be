//! C ABI over steplab. Finished runs are opened as opaque handles; every
//! fallible call returns an `SlStatus` and writes results through out
//! pointers. The message for the last failure on the calling thread is
//! available from `sl_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use steplab::baselines::{single_generation_scores, Method};
use steplab::eval::{pr_auc, EvalError};
use steplab::features::{extract_chain, FeatureConfig};
use steplab::numerics::Tensor;
use steplab::pipeline::{PipelineError, Run};
use steplab::taskgen::parse_tokens;
use steplab::toylm::{rescore, LanguageModel, Vocabulary};
use steplab::uhead::UHead;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Output buffer too small; the required length was still written.
    BufferTooSmall = 3,
    ConfigInvalid = 4,
    DataError = 5,
    HashMismatch = 6,
    MissingFile = 7,
    DegenerateLabels = 8,
    Runtime = 9,
    Panic = 10,
}

/// Values accepted as the `method` argument of `sl_run_step_uncertainties`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlMethod {
    Uhead = 0,
    MaxProb = 1,
    MeanEntropy = 2,
    Perplexity = 3,
    SelfCertainty = 4,
}

impl SlMethod {
    fn from_raw(v: i32) -> Option<Self> {
        Some(match v {
            0 => Self::Uhead,
            1 => Self::MaxProb,
            2 => Self::MeanEntropy,
            3 => Self::Perplexity,
            4 => Self::SelfCertainty,
            _ => return None,
        })
    }
}

/// A finished run: language model, uncertainty head and feature layout.
pub struct SlRun {
    model: LanguageModel,
    head: UHead,
    features: FeatureConfig,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: SlStatus, msg: impl Into<String>) -> SlStatus {
    set_error(msg);
    status
}

fn pipeline_status(e: &PipelineError) -> SlStatus {
    match e {
        PipelineError::ConfigInvalid(_) | PipelineError::UnknownCommand(_) => SlStatus::ConfigInvalid,
        PipelineError::HashMismatch { .. } => SlStatus::HashMismatch,
        PipelineError::MissingFile(_) => SlStatus::MissingFile,
        PipelineError::Data(_) | PipelineError::Io(_) => SlStatus::DataError,
        PipelineError::Runtime(_) => SlStatus::Runtime,
    }
}

fn guarded(f: impl FnOnce() -> SlStatus) -> SlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SlStatus::Panic, "internal panic"),
    }
}

/// Copies `src` into a caller buffer of `cap` elements and reports the
/// full length through `out_len`.
unsafe fn write_out<T: Copy>(src: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> SlStatus {
    *out_len = src.len();
    if src.len() > cap {
        return fail(
            SlStatus::BufferTooSmall,
            format!("need {} elements, buffer holds {cap}", src.len()),
        );
    }
    if !src.is_empty() {
        if out.is_null() {
            return fail(SlStatus::NullPointer, "output buffer is null");
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    SlStatus::Ok
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], SlStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(SlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SlStatus> {
    if p.is_null() {
        return Err(fail(SlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread, NUL-terminated, into
/// `buf` (truncating to `cap - 1` bytes). Returns the untruncated length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Average precision of `scores` against binary `labels` (nonzero is
/// positive), higher scores ranked first.
///
/// # Safety
/// `labels` and `scores` must point to `n` readable elements; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_pr_auc(
    labels: *const u8,
    scores: *const f64,
    n: usize,
    out: *mut f64,
) -> SlStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SlStatus::NullPointer, "out is null");
        }
        let (labels, scores) = match (slice_arg(labels, n, "labels"), slice_arg(scores, n, "scores")) {
            (Ok(l), Ok(s)) => (l, s),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        let labels: Vec<bool> = labels.iter().map(|&b| b != 0).collect();
        match pr_auc(&labels, scores) {
            Ok(v) => {
                *out = v;
                SlStatus::Ok
            }
            Err(EvalError::DegenerateLabels) => fail(SlStatus::DegenerateLabels, "labels must contain both classes"),
            Err(e) => fail(SlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Splits text into token ids.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must hold `cap` ids;
/// `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_tokenize(
    text: *const c_char,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> SlStatus {
    guarded(|| {
        if out_len.is_null() {
            return fail(SlStatus::NullPointer, "out_len is null");
        }
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(e) => return e,
        };
        match Vocabulary::new().tokenize(text) {
            Ok(ids) => {
                let ids: Vec<u32> = ids.into_iter().map(|i| i as u32).collect();
                write_out(&ids, out, cap, out_len)
            }
            Err(e) => fail(SlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Opens a finished run directory, verifying the manifest entries it
/// reads. On success `*out` owns a handle to release with `sl_run_free`.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_open(dir: *const c_char, out: *mut *mut SlRun) -> SlStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SlStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let dir = match str_arg(dir, "dir") {
            Ok(d) => d,
            Err(e) => return e,
        };
        let loaded = Run::existing(dir).and_then(|run| {
            Ok(SlRun {
                model: run.language_model()?,
                head: run.uhead()?.head,
                features: run.cfg.features.clone(),
                vocab: Vocabulary::new(),
            })
        });
        match loaded {
            Ok(r) => {
                *out = Box::into_raw(Box::new(r));
                SlStatus::Ok
            }
            Err(e) => fail(pipeline_status(&e), e.to_string()),
        }
    })
}

/// Releases a handle from `sl_run_open`. Null is ignored.
///
/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_run_free(run: *mut SlRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of trainable parameters of the run's uncertainty head.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_uhead_parameters(run: *const SlRun, out: *mut usize) -> SlStatus {
    if run.is_null() || out.is_null() {
        return fail(SlStatus::NullPointer, "run or out is null");
    }
    *out = (*run).head.parameter_count();
    SlStatus::Ok
}

fn step_uncertainties(r: &SlRun, tokens: &[usize], prompt_len: usize, method: SlMethod) -> Result<Vec<f64>, (SlStatus, String)> {
    let invalid = |m: String| (SlStatus::InvalidArgument, m);
    if prompt_len > tokens.len() {
        return Err(invalid(format!("prompt_len {prompt_len} exceeds {} tokens", tokens.len())));
    }
    let trace = parse_tokens(&tokens[prompt_len..], prompt_len, true, &r.vocab)
        .map_err(|e| invalid(e.to_string()))?;
    let internal = rescore(&r.model, tokens).map_err(|e| invalid(e.to_string()))?;
    let runtime = |m: String| (SlStatus::Runtime, m);
    match method {
        SlMethod::Uhead => {
            let steps = extract_chain(&internal, &trace, &r.features, "ffi", 0).map_err(|e| runtime(e.to_string()))?;
            let refs: Vec<&Tensor> = steps.iter().map(|s| &s.data).collect();
            r.head.score_steps(&refs).map_err(|e| runtime(e.to_string()))
        }
        m => {
            let want = match m {
                SlMethod::MaxProb => Method::Msp,
                SlMethod::MeanEntropy => Method::MeanEntropy,
                SlMethod::Perplexity => Method::Perplexity,
                _ => Method::SelfCertainty,
            };
            let v = r.model.config.vocab_size;
            trace
                .steps
                .iter()
                .map(|s| {
                    let scores = single_generation_scores(&internal, s.span, v).map_err(|e| runtime(e.to_string()))?;
                    Ok(scores.iter().find(|(m, _)| *m == want).map(|(_, x)| *x).expect("all four methods scored"))
                })
                .collect()
        }
    }
}

/// Uncertainty of every step in a chain, higher meaning more likely
/// wrong. `tokens` holds the prompt followed by the generated chain;
/// `method` is one of the `SlMethod` values.
///
/// # Safety
/// `run` must be a live handle; `tokens` must hold `n_tokens` ids; `out`
/// must hold `cap` values; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_step_uncertainties(
    run: *const SlRun,
    tokens: *const u32,
    n_tokens: usize,
    prompt_len: usize,
    method: i32,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> SlStatus {
    guarded(|| {
        if run.is_null() || out_len.is_null() {
            return fail(SlStatus::NullPointer, "run or out_len is null");
        }
        let Some(method) = SlMethod::from_raw(method) else {
            return fail(SlStatus::InvalidArgument, format!("unknown method {method}"));
        };
        let tokens = match slice_arg(tokens, n_tokens, "tokens") {
            Ok(t) => t,
            Err(e) => return e,
        };
        let tokens: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        match step_uncertainties(&*run, &tokens, prompt_len, method) {
            Ok(v) => write_out(&v, out, cap, out_len),
            Err((s, m)) => fail(s, m),
        }
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn sl_status_name(status: SlStatus) -> *const c_char {
    let s: &'static str = match status {
        SlStatus::Ok => "ok\0",
        SlStatus::NullPointer => "null pointer\0",
        SlStatus::InvalidArgument => "invalid argument\0",
        SlStatus::BufferTooSmall => "buffer too small\0",
        SlStatus::ConfigInvalid => "invalid config\0",
        SlStatus::DataError => "data error\0",
        SlStatus::HashMismatch => "hash mismatch\0",
        SlStatus::MissingFile => "missing file\0",
        SlStatus::DegenerateLabels => "degenerate labels\0",
        SlStatus::Runtime => "runtime error\0",
        SlStatus::Panic => "panic\0",
    };
    s.as_ptr().cast()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let mut buf = vec![0 as c_char; 256];
        let n = unsafe { sl_last_error(buf.as_mut_ptr(), buf.len()) };
        let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
        assert_eq!(s.len(), n.min(255));
        s
    }

    #[test]
    fn pr_auc_through_abi() {
        let labels = [1u8, 0, 1];
        let scores = [0.9, 0.8, 0.1];
        let mut out = 0.0;
        let s = unsafe { sl_pr_auc(labels.as_ptr(), scores.as_ptr(), 3, &mut out) };
        assert_eq!(s, SlStatus::Ok);
        assert!((out - 5.0 / 6.0).abs() < 1e-15);
        let s = unsafe { sl_pr_auc(labels.as_ptr(), scores.as_ptr(), 1, &mut out) };
        assert_eq!(s, SlStatus::DegenerateLabels);
        assert!(last_error().contains("both classes"));
        let s = unsafe { sl_pr_auc(ptr::null(), scores.as_ptr(), 3, &mut out) };
        assert_eq!(s, SlStatus::NullPointer);
    }

    #[test]
    fn tokenize_reports_needed_length() {
        let text = c"Q: start 3 ; add 4\n";
        let mut len = 0;
        let s = unsafe { sl_tokenize(text.as_ptr(), ptr::null_mut(), 0, &mut len) };
        assert_eq!(s, SlStatus::BufferTooSmall);
        let mut ids = vec![0u32; len];
        let s = unsafe { sl_tokenize(text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len) };
        assert_eq!(s, SlStatus::Ok);
        assert_eq!(len, ids.len());
    }

    #[test]
    fn open_missing_run() {
        let mut h = ptr::null_mut();
        let s = unsafe { sl_run_open(c"/nonexistent/run".as_ptr(), &mut h) };
        assert_ne!(s, SlStatus::Ok);
        assert!(h.is_null());
        unsafe { sl_run_free(h) };
    }

    #[test]
    fn names_are_static() {
        let n = unsafe { CStr::from_ptr(sl_status_name(SlStatus::HashMismatch)) };
        assert_eq!(n.to_str().unwrap(), "hash mismatch");
        let v = unsafe { CStr::from_ptr(sl_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

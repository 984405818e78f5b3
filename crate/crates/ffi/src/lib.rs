//! C ABI over `rgpt-core`.
//!
//! Every fallible function returns an [`RgptStatus`]; on failure a message is
//! available from [`rgpt_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Panics never
//! cross the boundary; they are reported as [`RgptStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rgpt_core::data::Modality;
use rgpt_core::harness::gradsuite::{gradcheck_config, run_gradcheck, GradModule};
use rgpt_core::harness::metrics::auroc;
use rgpt_core::harness::{run_experiment, ExperimentConfig, MetricsReport};
use rgpt_core::memory::MemoryBank;
use rgpt_core::retriever::{cosine_topk, Channel};
use rgpt_core::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgptStatus {
    Ok = 0,
    InvalidArgument = 1,
    ConfigError = 2,
    NumericError = 3,
    IoError = 4,
    RetrievalError = 5,
    Panic = 6,
}

/// A loaded memory bank.
pub struct RgptMemoryBank {
    inner: MemoryBank,
}

/// An experiment configuration, starting from defaults.
pub struct RgptConfig {
    inner: ExperimentConfig,
}

/// Metrics of a finished experiment.
pub struct RgptReport {
    inner: MetricsReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> RgptStatus {
    match err {
        Error::InsufficientCorpus { .. } | Error::NonRetrievable => RgptStatus::RetrievalError,
        Error::Precondition(_) => RgptStatus::InvalidArgument,
        other => match other.exit_code() {
            2 => RgptStatus::ConfigError,
            3 => RgptStatus::NumericError,
            _ => RgptStatus::IoError,
        },
    }
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (RgptStatus, String)>) -> RgptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RgptStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RgptStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (RgptStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (RgptStatus, String) {
    (RgptStatus::InvalidArgument, msg.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (RgptStatus, String)> {
    if p.is_null() {
        return Err(invalid(&format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{name} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rgpt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn rgpt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a memory bank file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_memory_load(path: *const c_char, out: *mut *mut RgptMemoryBank) -> RgptStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let path = str_arg(path, "path")?;
        let bank = MemoryBank::load(path).map_err(core_err)?;
        *out = Box::into_raw(Box::new(RgptMemoryBank { inner: bank }));
        Ok(())
    })
}

/// Releases a bank; null is ignored.
///
/// # Safety
/// `bank` must come from [`rgpt_memory_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rgpt_memory_free(bank: *mut RgptMemoryBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Number of entries in a bank.
///
/// # Safety
/// `bank` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_memory_count(bank: *const RgptMemoryBank, out: *mut usize) -> RgptStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(|| invalid("bank is null"))?;
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        *out = bank.inner.len();
        Ok(())
    })
}

/// Embedding width `d` of a bank (the query length for top-K search).
///
/// # Safety
/// `bank` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_memory_width(bank: *const RgptMemoryBank, out: *mut usize) -> RgptStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(|| invalid("bank is null"))?;
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        *out = bank.inner.dims().d;
        Ok(())
    })
}

/// Exact cosine top-`k` over the bank's text (`modality = 0`) or image
/// (`modality = 1`) global embeddings. Writes `k` ids and scores in rank
/// order. When `has_exclude` is nonzero, `exclude_id` is never returned.
///
/// # Safety
/// `query` must hold `query_len` doubles; `out_ids` and `out_scores` must
/// hold `k` elements each.
#[no_mangle]
pub unsafe extern "C" fn rgpt_memory_topk(
    bank: *const RgptMemoryBank,
    query: *const f64,
    query_len: usize,
    modality: u32,
    k: usize,
    has_exclude: u8,
    exclude_id: u64,
    out_ids: *mut u64,
    out_scores: *mut f64,
) -> RgptStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(|| invalid("bank is null"))?;
        if query.is_null() || out_ids.is_null() || out_scores.is_null() {
            return Err(invalid("null buffer"));
        }
        let (modality, channel) = match modality {
            0 => (Modality::Text, Channel::Text),
            1 => (Modality::Image, Channel::Vision),
            _ => return Err(invalid("modality must be 0 (text) or 1 (image)")),
        };
        let q = std::slice::from_raw_parts(query, query_len);
        let exclude = (has_exclude != 0).then_some(exclude_id);
        let ctx = cosine_topk(q, &bank.inner, modality, channel, k, exclude).map_err(core_err)?;
        let ids = std::slice::from_raw_parts_mut(out_ids, k);
        let scores = std::slice::from_raw_parts_mut(out_scores, k);
        for (i, e) in ctx.entries.iter().enumerate() {
            ids[i] = e.source_id;
            scores[i] = e.score;
        }
        Ok(())
    })
}

/// Creates a configuration holding the defaults.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_config_new(out: *mut *mut RgptConfig) -> RgptStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = Box::into_raw(Box::new(RgptConfig {
            inner: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Sets one `key` to `value`, as in a configuration file line.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rgpt_config_set(cfg: *mut RgptConfig, key: *const c_char, value: *const c_char) -> RgptStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| invalid("cfg is null"))?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        cfg.inner.set(key, value).map_err(core_err)
    })
}

/// Applies a `key=value` configuration file on top of the current values.
///
/// # Safety
/// `cfg` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rgpt_config_load_file(cfg: *mut RgptConfig, path: *const c_char) -> RgptStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| invalid("cfg is null"))?;
        let path = str_arg(path, "path")?;
        let text = std::fs::read_to_string(path).map_err(|e| core_err(e.into()))?;
        cfg.inner.apply_text(&text).map_err(core_err)
    })
}

/// Releases a configuration; null is ignored.
///
/// # Safety
/// `cfg` must come from [`rgpt_config_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rgpt_config_free(cfg: *mut RgptConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates data, trains and evaluates one configuration.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_run_experiment(cfg: *const RgptConfig, out: *mut *mut RgptReport) -> RgptStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| invalid("cfg is null"))?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let outcome = run_experiment(&cfg.inner).map_err(core_err)?;
        *out = Box::into_raw(Box::new(RgptReport { inner: outcome.report }));
        Ok(())
    })
}

/// Reads a metric by name: `accuracy`, `auroc`, `f1_micro` or `f1_sample`.
/// An undefined AUROC (single-class test set) returns `NumericError`.
///
/// # Safety
/// `report` must be a live handle, `name` a NUL-terminated string and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_report_metric(
    report: *const RgptReport,
    name: *const c_char,
    out: *mut f64,
) -> RgptStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| invalid("report is null"))?.inner;
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        *out = match str_arg(name, "name")? {
            "accuracy" => r.accuracy,
            "auroc" => r
                .auroc
                .ok_or_else(|| (RgptStatus::NumericError, r.auroc_note.clone().unwrap_or_default()))?,
            "f1_micro" => r.f1_micro,
            "f1_sample" => r.f1_sample,
            other => return Err(invalid(&format!("unknown metric '{other}'"))),
        };
        Ok(())
    })
}

/// Serializes a report to JSON. Free the string with [`rgpt_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_report_to_json(report: *const RgptReport, out: *mut *mut c_char) -> RgptStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| invalid("report is null"))?.inner;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let json = serde_json::to_string(r).map_err(|e| (RgptStatus::IoError, e.to_string()))?;
        *out = CString::new(json).map_err(|e| invalid(&e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Releases a report; null is ignored.
///
/// # Safety
/// `report` must come from [`rgpt_run_experiment`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rgpt_report_free(report: *mut RgptReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Releases a string returned by the library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rgpt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Rank-based AUROC of `scores` against 0/1 `labels`; ties count one half.
///
/// # Safety
/// `scores` and `labels` must hold `len` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rgpt_auroc(scores: *const f64, labels: *const u8, len: usize, out: *mut f64) -> RgptStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() {
            return Err(invalid("null buffer"));
        }
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        let s = std::slice::from_raw_parts(scores, len);
        let positive: Vec<bool> = std::slice::from_raw_parts(labels, len)
            .iter()
            .map(|&l| l != 0)
            .collect();
        *out = auroc(s, &positive).map_err(|m| (RgptStatus::NumericError, m))?;
        Ok(())
    })
}

/// Runs the finite-difference gradient suite and reports the worst relative
/// error across all modules.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_gradcheck(out: *mut f64) -> RgptStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        let reports = run_gradcheck(&gradcheck_config(), &GradModule::ALL).map_err(core_err)?;
        *out = reports.iter().map(|(_, r)| r.max_relative_error).fold(0.0, f64::max);
        Ok(())
    })
}

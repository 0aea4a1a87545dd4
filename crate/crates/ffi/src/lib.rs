//! C interface to `cdghmm`.
//!
//! Datasets and fits are opaque handles created and released through this
//! API. Every fallible call returns a [`CdghmmStatus`]; on failure the
//! message is available from [`cdghmm_last_error`] on the same thread.
//! Strings returned by the library must be released with
//! [`cdghmm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cdghmm::dropout::detect_dropout;
use cdghmm::em::{decode, fit, FitConfig, FitResult, InitMethod};
use cdghmm::io::{load_panel, DropoutMode, FitFile};
use cdghmm::types::{count_free_params, HmmParams, Mechanism, ModelStructure, PanelDataset};
use cdghmm::Error;

/// Outcome of a library call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdghmmStatus {
    Ok = 0,
    /// Bad argument: unknown name, out-of-range count, shape mismatch.
    InvalidInput = 1,
    /// Malformed or inconsistent data, or a file that cannot be read.
    Data = 2,
    /// Numerical failure during estimation.
    Numeric = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// A loaded panel.
pub struct CdghmmDataset {
    data: PanelDataset,
    mode: DropoutMode,
}

/// A fitted model together with its run summary.
pub struct CdghmmFit {
    result: FitResult,
    file: FitFile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CdghmmStatus {
    match e {
        Error::InvalidInput(_) => CdghmmStatus::InvalidInput,
        e if e.is_numeric() => CdghmmStatus::Numeric,
        _ => CdghmmStatus::Data,
    }
}

struct Failure(CdghmmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CdghmmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CdghmmStatus::InvalidInput, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CdghmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CdghmmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CdghmmStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cdghmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The caller owns
/// the copy and frees it with `cdghmm_string_free`.
#[no_mangle]
pub extern "C" fn cdghmm_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Free covariance parameters of `model` (e.g. `"VVA"`) with `m` states and
/// `p` variables.
///
/// # Safety
/// `model` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_count_free_params(model: *const c_char, m: usize, p: usize, out: *mut usize) -> CdghmmStatus {
    guard(|| {
        let st: ModelStructure = str_arg(model, "model")?.parse()?;
        if m < 1 || p < 1 {
            return Err(invalid("m and p must be positive"));
        }
        *out_arg(out, "out")? = count_free_params(st, m, p);
        Ok(())
    })
}

/// Loads a long-format CSV panel. `dropout_mode` is `"auto"`, `"column"`,
/// `"off"` or null for auto.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_dataset_load(path: *const c_char, dropout_mode: *const c_char, out: *mut *mut CdghmmDataset) -> CdghmmStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let mode: DropoutMode = if dropout_mode.is_null() { DropoutMode::Auto } else { str_arg(dropout_mode, "dropout_mode")?.parse()? };
        let slot = out_arg(out, "out")?;
        let data = load_panel(&path, mode)?;
        *slot = Box::into_raw(Box::new(CdghmmDataset { data, mode }));
        Ok(())
    })
}

/// Builds a dataset from an `n × n_times × p` row-major array in which NaN
/// marks a missing cell. With `detect_dropout_flag` nonzero, trailing runs of
/// fully missing rows are treated as dropout.
///
/// # Safety
/// `values` must point to `n * n_times * p` readable doubles and `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_dataset_from_array(
    values: *const f64,
    n: usize,
    n_times: usize,
    p: usize,
    detect_dropout_flag: i32,
    out: *mut *mut CdghmmDataset,
) -> CdghmmStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        let len = n.checked_mul(n_times).and_then(|v| v.checked_mul(p)).ok_or_else(|| invalid("dimensions overflow"))?;
        let slot = out_arg(out, "out")?;
        let values = std::slice::from_raw_parts(values, len).to_vec();
        let mask: Vec<bool> = values.iter().map(|v| v.is_nan()).collect();
        let (dropout, mode) = if detect_dropout_flag != 0 {
            (detect_dropout(&mask, n, n_times, p)?, DropoutMode::Auto)
        } else {
            (vec![None; n], DropoutMode::Off)
        };
        let data = PanelDataset::new(n, n_times, p, values, mask, dropout)?;
        *slot = Box::into_raw(Box::new(CdghmmDataset { data, mode }));
        Ok(())
    })
}

/// Writes the subject count, time points and variables of `ds`.
///
/// # Safety
/// `ds` must be a live dataset handle; each out pointer is written when non-null.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_dataset_dims(ds: *const CdghmmDataset, n: *mut usize, n_times: *mut usize, p: *mut usize) -> CdghmmStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.data;
        for (ptr, v) in [(n, d.n), (n_times, d.n_times), (p, d.p)] {
            if let Some(slot) = ptr.as_mut() {
                *slot = v;
            }
        }
        Ok(())
    })
}

/// Number of subjects with a detected dropout time.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_dataset_dropout_count(ds: *const CdghmmDataset, out: *mut usize) -> CdghmmStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.data;
        *out_arg(out, "out")? = d.dropout.iter().filter(|x| x.is_some()).count();
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_dataset_free(ds: *mut CdghmmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Estimation settings. Start from `cdghmm_fit_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CdghmmFitOptions {
    pub n_starts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Nonzero adds the absorbing dropout state when the data show dropout.
    pub dropout: i32,
    /// Nonzero seeds every start with random soft assignments; otherwise the
    /// first start comes from k-means.
    pub random_init: i32,
}

#[no_mangle]
pub extern "C" fn cdghmm_fit_options_default() -> CdghmmFitOptions {
    let d = FitConfig::new(ModelStructure::VVA, 1);
    CdghmmFitOptions {
        n_starts: d.n_starts,
        max_iter: d.max_iter,
        rel_tol: d.rel_tol,
        seed: d.seed,
        dropout: 1,
        random_init: 0,
    }
}

/// Fits `model` with `states` hidden states under `mechanism` (e.g.
/// `"mar"`, `"state-var"`). `options` may be null for defaults.
///
/// # Safety
/// `ds` must be a live dataset handle, strings NUL-terminated, `options`
/// null or readable, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_fit(
    ds: *const CdghmmDataset,
    model: *const c_char,
    states: usize,
    mechanism: *const c_char,
    options: *const CdghmmFitOptions,
    out: *mut *mut CdghmmFit,
) -> CdghmmStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let st: ModelStructure = str_arg(model, "model")?.parse()?;
        let mech: Mechanism = if mechanism.is_null() { Mechanism::Mar } else { str_arg(mechanism, "mechanism")?.parse()? };
        let opts = options.as_ref().copied().unwrap_or_else(|| cdghmm_fit_options_default());
        let slot = out_arg(out, "out")?;
        let mut cfg = FitConfig::new(st, states);
        cfg.mechanism = mech;
        cfg.dropout = opts.dropout != 0 && ds.mode != DropoutMode::Off && ds.data.has_dropout();
        cfg.n_starts = opts.n_starts;
        cfg.max_iter = opts.max_iter;
        cfg.rel_tol = opts.rel_tol;
        cfg.seed = opts.seed;
        cfg.init = if opts.random_init != 0 { InitMethod::Random } else { InitMethod::KMeans };
        let result = fit(&ds.data, &cfg)?;
        let file = FitFile::from_result(&result, &ds.data, ds.mode);
        *slot = Box::into_raw(Box::new(CdghmmFit { result, file }));
        Ok(())
    })
}

/// Summary of a fit.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CdghmmFitSummary {
    pub states: usize,
    /// Chain states including the absorbing dropout state when present.
    pub chain_states: usize,
    pub loglik: f64,
    pub bic: f64,
    pub icl: f64,
    pub free_params: usize,
    pub iterations: usize,
    pub converged: i32,
}

/// # Safety
/// `f` must be a live fit handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_fit_summary(f: *const CdghmmFit, out: *mut CdghmmFitSummary) -> CdghmmStatus {
    guard(|| {
        let r = &handle(f, "fit")?.result;
        *out_arg(out, "out")? = CdghmmFitSummary {
            states: r.params.m,
            chain_states: r.params.k(),
            loglik: r.loglik,
            bic: r.bic,
            icl: r.icl,
            free_params: r.rho,
            iterations: r.iterations,
            converged: i32::from(r.converged),
        };
        Ok(())
    })
}

/// Copies the local decoding of the fitted data into `labels`, `[i][t]`
/// row-major and 0-based; the value `states` marks a dropped cell.
///
/// # Safety
/// `f` must be a live fit handle and `labels` must hold `len` writable slots.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_fit_labels(f: *const CdghmmFit, labels: *mut usize, len: usize) -> CdghmmStatus {
    guard(|| {
        let decoded = &handle(f, "fit")?.result.decoded;
        copy_out(decoded, labels, len)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, len: usize) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(null("output buffer"));
    }
    if len != src.len() {
        return Err(invalid(format!("output buffer holds {len} values, {} required", src.len())));
    }
    std::slice::from_raw_parts_mut(dst, len).copy_from_slice(src);
    Ok(())
}

fn params_of(f: &CdghmmFit) -> &HmmParams {
    &f.result.params
}

/// Decodes another panel under a fitted model. `labels` takes `n · n_times`
/// 0-based states and `probs`, when non-null, `n · n_times · chain_states`
/// posterior probabilities.
///
/// # Safety
/// Handles must be live; buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_decode(
    f: *const CdghmmFit,
    ds: *const CdghmmDataset,
    labels: *mut usize,
    labels_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> CdghmmStatus {
    guard(|| {
        let f = handle(f, "fit")?;
        let ds = handle(ds, "dataset")?;
        let params = params_of(f);
        if ds.data.p != params.p() {
            return Err(invalid(format!("fit has {} variables, data has {}", params.p(), ds.data.p)));
        }
        let mut data = ds.data.clone();
        if !params.dropout {
            data.dropout = vec![None; data.n];
        }
        let (decoded, post) = decode(&data, params)?;
        copy_out(&decoded, labels, labels_len)?;
        if !probs.is_null() {
            copy_out(&post.u_hat, probs, probs_len)?;
        }
        Ok(())
    })
}

/// Serializes the fit in the same JSON format the command-line tool writes.
/// The caller frees the string with `cdghmm_string_free`.
///
/// # Safety
/// `f` must be a live fit handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_fit_to_json(f: *const CdghmmFit, out: *mut *mut c_char) -> CdghmmStatus {
    guard(|| {
        let f = handle(f, "fit")?;
        let slot = out_arg(out, "out")?;
        let json = serde_json::to_string_pretty(&f.file).map_err(Error::from)?;
        *slot = CString::new(json).map_err(|_| invalid("fit contains a NUL byte"))?.into_raw();
        Ok(())
    })
}

/// Releases a fit. Null is ignored.
///
/// # Safety
/// `f` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn cdghmm_fit_free(f: *mut CdghmmFit) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

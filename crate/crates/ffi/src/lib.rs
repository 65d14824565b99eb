//! C ABI over `ldm-core`.
//!
//! Every fallible call returns an [`LdmStatus`]; results go through out
//! pointers. The message of the most recent failure on the calling thread is
//! available from [`ldm_last_error`]. Matrices are dense, row-major `f64`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ldm_core::cli::{self, ExperimentConfig, RunOptions, RunReport};
use ldm_core::diffcore::Tensor;
use ldm_core::entropy::{entropy_kde_corrected, entropy_knn_corrected, entropy_logdet, gaussian_entropy_constant, LogDetMode};
use ldm_core::kalman::{self, KalmanModel};
use ldm_core::metrics;
use ldm_core::LdmError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LdmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    ConfigInvalid = 4,
    NumericalBlowup = 5,
    Singular = 6,
    Io = 7,
    Internal = 8,
}

/// A parsed experiment config.
pub struct LdmConfig(ExperimentConfig);

/// The report of a finished run.
pub struct LdmReport {
    report: RunReport,
    hash: CString,
}

/// A linear-Gaussian state-space model.
pub struct LdmKalman(KalmanModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &LdmError) -> LdmStatus {
    match e {
        LdmError::ShapeMismatch { .. } => LdmStatus::ShapeMismatch,
        LdmError::ConfigInvalid { .. } => LdmStatus::ConfigInvalid,
        LdmError::NumericalBlowup(_) => LdmStatus::NumericalBlowup,
        LdmError::SingularMatrix { .. } | LdmError::SingularInnovation | LdmError::RankDeficient { .. } => {
            LdmStatus::Singular
        }
        LdmError::Io(_) | LdmError::Format(_) => LdmStatus::Io,
        _ => LdmStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (LdmStatus, String)>) -> LdmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LdmStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            LdmStatus::Internal
        }
    }
}

fn core<T>(r: Result<T, LdmError>) -> Result<T, (LdmStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (LdmStatus, String) {
    (LdmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (LdmStatus, String) {
    (LdmStatus::InvalidArgument, msg.into())
}

unsafe fn matrix(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor, (LdmStatus, String)> {
    if data.is_null() {
        return Err(null(what));
    }
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("{what} has an empty dimension")));
    }
    let v = std::slice::from_raw_parts(data, rows * cols).to_vec();
    core(Tensor::matrix(rows, cols, v))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (LdmStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (LdmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ldm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ldm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Kozachenko-Leonenko entropy in nats of `n` samples of dimension `d`.
///
/// # Safety
/// `data` must point to `n * d` readable doubles and `out` to one writable
/// double.
#[no_mangle]
pub unsafe extern "C" fn ldm_entropy_knn(
    data: *const f64,
    n: usize,
    d: usize,
    k: usize,
    p_norm: f64,
    discard_top_frac: f64,
    out_nats: *mut f64,
) -> LdmStatus {
    guard(|| {
        let x = matrix(data, n, d, "data")?;
        let o = out(out_nats, "out_nats")?;
        let tape = ldm_core::diffcore::Tape::new();
        *o = core(entropy_knn_corrected(&tape.constant(x), k, p_norm, discard_top_frac))?;
        Ok(())
    })
}

/// Gaussian-kernel KDE entropy in nats with bandwidth `h`.
///
/// # Safety
/// As for [`ldm_entropy_knn`].
#[no_mangle]
pub unsafe extern "C" fn ldm_entropy_kde(data: *const f64, n: usize, d: usize, h: f64, out_nats: *mut f64) -> LdmStatus {
    guard(|| {
        let x = matrix(data, n, d, "data")?;
        let o = out(out_nats, "out_nats")?;
        let tape = ldm_core::diffcore::Tape::new();
        *o = core(entropy_kde_corrected(&tape.constant(x), h))?;
        Ok(())
    })
}

/// Entropy in nats of the Gaussian with the sample covariance of `data`.
///
/// # Safety
/// As for [`ldm_entropy_knn`].
#[no_mangle]
pub unsafe extern "C" fn ldm_entropy_logdet(data: *const f64, n: usize, d: usize, out_nats: *mut f64) -> LdmStatus {
    guard(|| {
        let x = matrix(data, n, d, "data")?;
        let o = out(out_nats, "out_nats")?;
        let tape = ldm_core::diffcore::Tape::new();
        let h = core(entropy_logdet(&tape.constant(x), LogDetMode::Exact, Default::default()))?;
        *o = h.item() + gaussian_entropy_constant(d);
        Ok(())
    })
}

/// Mean absolute correlation of recovered to true sources under the best
/// one-to-one matching. Both arrays are `[n, k]`.
///
/// # Safety
/// `s_hat` and `s_true` must each point to `n * k` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn ldm_source_recovery_score(
    s_hat: *const f64,
    s_true: *const f64,
    n: usize,
    k: usize,
    out_score: *mut f64,
) -> LdmStatus {
    guard(|| {
        let a = matrix(s_hat, n, k, "s_hat")?;
        let b = matrix(s_true, n, k, "s_true")?;
        let o = out(out_score, "out_score")?;
        *o = core(metrics::source_recovery_score(&a, &b))?;
        Ok(())
    })
}

/// Overall test-split R² of an affine probe from `z` (`[n, d]`) to
/// `target` (`[n, k]`).
///
/// # Safety
/// `z` must point to `n * d` and `target` to `n * k` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn ldm_affine_probe_r2(
    z: *const f64,
    target: *const f64,
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    out_r2: *mut f64,
) -> LdmStatus {
    guard(|| {
        let z = matrix(z, n, d, "z")?;
        let t = matrix(target, n, k, "target")?;
        let o = out(out_r2, "out_r2")?;
        *o = core(metrics::affine_probe(&z, &t, seed))?.r2_overall;
        Ok(())
    })
}

/// Builds a Kalman model with hidden size `n` and observation size `m`:
/// transition `f [n,n]`, process noise `q [n,n]`, observation map `a [m,n]`,
/// observation noise `r [m,m]`, initial mean `h0 [n]` and covariance
/// `p0 [n,n]`. Release with [`ldm_kalman_free`].
///
/// # Safety
/// Every matrix pointer must reference the stated number of doubles and
/// `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ldm_kalman_new(
    n: usize,
    m: usize,
    f: *const f64,
    q: *const f64,
    a: *const f64,
    r: *const f64,
    h0: *const f64,
    p0: *const f64,
    out_model: *mut *mut LdmKalman,
) -> LdmStatus {
    guard(|| {
        let o = out(out_model, "out_model")?;
        *o = ptr::null_mut();
        let h0 = matrix(h0, 1, n, "h0")?;
        let model = KalmanModel {
            f: matrix(f, n, n, "f")?,
            q: matrix(q, n, n, "q")?,
            a: matrix(a, m, n, "a")?,
            robs: matrix(r, m, m, "r")?,
            h0: Tensor::vector(h0.data().to_vec()),
            p0: matrix(p0, n, n, "p0")?,
        };
        core(model.validate())?;
        *o = Box::into_raw(Box::new(LdmKalman(model)));
        Ok(())
    })
}

/// Predictive log-likelihood of `z_seq` (`[t_len, m]`). `out_per_step`
/// may be null; otherwise it receives `t_len` values.
///
/// # Safety
/// `model` must come from [`ldm_kalman_new`], `z_seq` must point to
/// `t_len * m` doubles and `out_per_step`, if not null, to `t_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ldm_kalman_loglik(
    model: *const LdmKalman,
    z_seq: *const f64,
    t_len: usize,
    out_total: *mut f64,
    out_per_step: *mut f64,
) -> LdmStatus {
    guard(|| {
        let k = model.as_ref().ok_or_else(|| null("model"))?;
        let z = matrix(z_seq, t_len, k.0.m(), "z_seq")?;
        let o = out(out_total, "out_total")?;
        let (total, per) = core(kalman::sequence_loglik(&k.0, &z))?;
        *o = total;
        if !out_per_step.is_null() {
            std::slice::from_raw_parts_mut(out_per_step, t_len).copy_from_slice(&per);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from [`ldm_kalman_new`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn ldm_kalman_free(model: *mut LdmKalman) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parses a TOML experiment config. Release with [`ldm_config_free`].
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out_config` writable.
#[no_mangle]
pub unsafe extern "C" fn ldm_config_parse(toml: *const c_char, out_config: *mut *mut LdmConfig) -> LdmStatus {
    guard(|| {
        let o = out(out_config, "out_config")?;
        *o = ptr::null_mut();
        let cfg = core(ExperimentConfig::from_toml(text(toml, "toml")?))?;
        *o = Box::into_raw(Box::new(LdmConfig(cfg)));
        Ok(())
    })
}

/// Number of violations in `config`; the first is left in
/// [`ldm_last_error`].
///
/// # Safety
/// `config` must come from [`ldm_config_parse`] and `out_count` be writable.
#[no_mangle]
pub unsafe extern "C" fn ldm_config_validate(config: *const LdmConfig, out_count: *mut usize) -> LdmStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let o = out(out_count, "out_count")?;
        let v = c.0.validate();
        *o = v.violations.len();
        if let Some(first) = v.violations.first() {
            set_error(&first.to_string());
        }
        Ok(())
    })
}

/// Replaces the seed and, when `steps >= 0`, the number of training steps.
///
/// # Safety
/// `config` must come from [`ldm_config_parse`].
#[no_mangle]
pub unsafe extern "C" fn ldm_config_override(config: *mut LdmConfig, seed: u64, steps: i64) -> LdmStatus {
    guard(|| {
        let c = config.as_mut().ok_or_else(|| null("config"))?;
        c.0.seed = seed;
        if steps >= 0 {
            c.0.optim.steps = steps as usize;
        }
        Ok(())
    })
}

/// Trains and evaluates `config`, writing artifacts under `out_dir`.
/// Release the report with [`ldm_report_free`].
///
/// # Safety
/// `config` must come from [`ldm_config_parse`], `out_dir` must be a
/// NUL-terminated path and `out_report` writable.
#[no_mangle]
pub unsafe extern "C" fn ldm_run(config: *const LdmConfig, out_dir: *const c_char, out_report: *mut *mut LdmReport) -> LdmStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let o = out(out_report, "out_report")?;
        *o = ptr::null_mut();
        let dir = PathBuf::from(text(out_dir, "out_dir")?);
        let report = core(cli::run(
            &c.0,
            &RunOptions {
                out: Some(dir),
                quiet: true,
            },
        ))?;
        let hash = CString::new(report.config_hash.clone()).unwrap_or_default();
        *o = Box::into_raw(Box::new(LdmReport { report, hash }));
        Ok(())
    })
}

/// Looks up a final metric by name.
///
/// # Safety
/// `report` must come from [`ldm_run`], `name` must be NUL-terminated and
/// `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn ldm_report_metric(report: *const LdmReport, name: *const c_char, out_value: *mut f64) -> LdmStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let name = text(name, "name")?;
        let o = out(out_value, "out_value")?;
        *o = r.report.metric(name).ok_or_else(|| invalid(format!("no metric named {name}")))?;
        Ok(())
    })
}

/// The config hash of the run as a NUL-terminated hex string owned by the
/// report.
///
/// # Safety
/// `report` must come from [`ldm_run`]. The string lives as long as the
/// report.
#[no_mangle]
pub unsafe extern "C" fn ldm_report_config_hash(report: *const LdmReport) -> *const c_char {
    report.as_ref().map_or(ptr::null(), |r| r.hash.as_ptr())
}

/// # Safety
/// `config` must be null or come from [`ldm_config_parse`].
#[no_mangle]
pub unsafe extern "C" fn ldm_config_free(config: *mut LdmConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `report` must be null or come from [`ldm_run`].
#[no_mangle]
pub unsafe extern "C" fn ldm_report_free(report: *mut LdmReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

//! C ABI over `prism-core`.
//!
//! Every fallible function returns a [`PrismStatus`]; results go through out
//! pointers. On failure, [`prism_last_error_message`] describes the most
//! recent error on the calling thread. Handles are opaque, created by a
//! `*_new` function and released with the matching `*_free`.
//!
//! Feature matrices are row-major `n × dim` arrays of `f64`; rows passed as
//! features must already have unit norm.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prism_core::filters::{filter_batch, Estimator, FilterState};
use prism_core::harness::{ExperimentConfig, Trainer};
use prism_core::membank::{MemoryBank, MemoryEntry};
use prism_core::numerics::{log_bessel_i, UnitVector};
use prism_core::thresholds::ThresholdPolicy;
use prism_core::vmf::{log_normalizer, vmf_fit};
use prism_core::PrismError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrismStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Degenerate = 3,
    InsufficientData = 4,
    AbsentClass = 5,
    DimensionMismatch = 6,
    Config = 7,
    Parse = 8,
    Io = 9,
    InvalidUtf8 = 10,
    Panic = 11,
}

/// Clean-probability estimator selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrismEstimator {
    AvgSimNaive = 0,
    AvgSimCenters = 1,
    VmfSim = 2,
    BatchPositive = 3,
    MemoryPositive = 4,
    NoFilter = 5,
}

impl From<PrismEstimator> for Estimator {
    fn from(e: PrismEstimator) -> Self {
        match e {
            PrismEstimator::AvgSimNaive => Estimator::AvgSimNaive,
            PrismEstimator::AvgSimCenters => Estimator::AvgSimCenters,
            PrismEstimator::VmfSim => Estimator::VmfSim,
            PrismEstimator::BatchPositive => Estimator::BatchPositive,
            PrismEstimator::MemoryPositive => Estimator::MemoryPositive,
            PrismEstimator::NoFilter => Estimator::None,
        }
    }
}

/// Memory bank of labelled unit features.
pub struct PrismBank(MemoryBank);

/// Per-batch threshold policy (fixed, TRM or sTRM).
pub struct PrismThreshold(ThresholdPolicy);

/// Filtering state: estimator, warm-up and fitted class distributions.
pub struct PrismFilter(FilterState);

/// Experiment configuration for [`prism_train`].
pub struct PrismConfig(ExperimentConfig);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(PrismError),
}

impl From<PrismError> for Failure {
    fn from(e: PrismError) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

fn status_of(e: &PrismError) -> PrismStatus {
    match e {
        PrismError::Domain(_) => PrismStatus::Domain,
        PrismError::Degenerate(_) => PrismStatus::Degenerate,
        PrismError::InsufficientData { .. } => PrismStatus::InsufficientData,
        PrismError::AbsentClass(_) => PrismStatus::AbsentClass,
        PrismError::DimensionMismatch { .. } => PrismStatus::DimensionMismatch,
        PrismError::Config(_) => PrismStatus::Config,
        PrismError::Parse(_) => PrismStatus::Parse,
        PrismError::Io(_) => PrismStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> FfiResult) -> PrismStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrismStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            PrismStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_last_error(format!("invalid UTF-8 in {what}"));
            PrismStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic".to_string());
            PrismStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

unsafe fn obj_mut<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    unsafe { p.as_mut() }.ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn rows(p: *const f64, n: usize, dim: usize) -> FfiResult<Vec<UnitVector>> {
    let len = n.checked_mul(dim).ok_or_else(|| PrismError::Domain("n * dim overflows".into()))?;
    let data = unsafe { slice(p, len, "features") }?;
    Ok(data.chunks_exact(dim.max(1)).map(|r| UnitVector::new(r.to_vec())).collect::<Result<_, _>>()?)
}

unsafe fn put<T>(out: *mut T, value: T, what: &'static str) -> FfiResult {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    unsafe { out.write(value) };
    Ok(())
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn prism_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// `ln I_order(x)` for `order >= 0`, `x >= 0`.
///
/// # Safety
/// `out` must be a valid pointer to one `f64`.
#[no_mangle]
pub unsafe extern "C" fn prism_log_bessel_i(order: f64, x: f64, out: *mut f64) -> PrismStatus {
    guard(|| unsafe { put(out, log_bessel_i(order, x)?, "out") })
}

/// Log of the von Mises-Fisher normalizing constant on the unit sphere in `dim` dimensions.
///
/// # Safety
/// `out` must be a valid pointer to one `f64`.
#[no_mangle]
pub unsafe extern "C" fn prism_vmf_log_normalizer(dim: usize, kappa: f64, out: *mut f64) -> PrismStatus {
    guard(|| unsafe { put(out, log_normalizer(dim, kappa)?.ln(), "out") })
}

/// Fits a von Mises-Fisher distribution to `n` unit rows of length `dim`.
/// Writes the mean direction to `out_mean` (`dim` values) and the
/// concentration to `out_kappa`.
///
/// # Safety
/// `samples` must point to `n * dim` values, `out_mean` to `dim` writable
/// values and `out_kappa` to one.
#[no_mangle]
pub unsafe extern "C" fn prism_vmf_fit(
    samples: *const f64,
    n: usize,
    dim: usize,
    out_mean: *mut f64,
    out_kappa: *mut f64,
) -> PrismStatus {
    guard(|| unsafe {
        let xs = rows(samples, n, dim)?;
        let params = vmf_fit(&xs)?;
        slice_mut(out_mean, dim, "out_mean")?.copy_from_slice(params.mu.as_slice());
        put(out_kappa, params.kappa, "out_kappa")
    })
}

/// Creates an empty bank holding at most `capacity` features of length `dim`.
///
/// # Safety
/// `out` must be a valid pointer; the handle written there is owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn prism_bank_new(capacity: usize, dim: usize, out: *mut *mut PrismBank) -> PrismStatus {
    guard(|| unsafe { put(out, Box::into_raw(Box::new(PrismBank(MemoryBank::new(capacity, dim)?))), "out") })
}

/// # Safety
/// `bank` must be null or a handle from [`prism_bank_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prism_bank_free(bank: *mut PrismBank) {
    unsafe { free_box(bank) }
}

/// Appends `n` labelled features, evicting the oldest entries once full.
///
/// # Safety
/// `features` must point to `n * dim` values and `labels` to `n` values.
#[no_mangle]
pub unsafe extern "C" fn prism_bank_enqueue(
    bank: *mut PrismBank,
    features: *const f64,
    labels: *const usize,
    n: usize,
) -> PrismStatus {
    guard(|| unsafe {
        let bank = &mut obj_mut(bank, "bank")?.0;
        let xs = rows(features, n, bank.dim())?;
        let ys = slice(labels, n, "labels")?;
        bank.enqueue_batch(xs.into_iter().zip(ys).map(|(f, &l)| MemoryEntry::new(f, l)))?;
        Ok(())
    })
}

/// Number of features currently stored.
///
/// # Safety
/// `bank` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prism_bank_len(bank: *const PrismBank, out: *mut usize) -> PrismStatus {
    guard(|| unsafe { put(out, obj(bank, "bank")?.0.len(), "out") })
}

/// Number of stored features carrying `label`.
///
/// # Safety
/// `bank` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prism_bank_class_count(bank: *const PrismBank, label: usize, out: *mut usize) -> PrismStatus {
    guard(|| unsafe { put(out, obj(bank, "bank")?.0.class_count(label), "out") })
}

unsafe fn new_threshold(policy: prism_core::Result<ThresholdPolicy>, out: *mut *mut PrismThreshold) -> PrismStatus {
    guard(|| unsafe { put(out, Box::into_raw(Box::new(PrismThreshold(policy?))), "out") })
}

/// Keeps samples whose probability exceeds `m`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prism_threshold_new_fixed(m: f64, out: *mut *mut PrismThreshold) -> PrismStatus {
    unsafe { new_threshold(ThresholdPolicy::fixed(m), out) }
}

/// Per-batch percentile threshold dropping the lowest `rate` percent.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prism_threshold_new_trm(rate: f64, out: *mut *mut PrismThreshold) -> PrismStatus {
    unsafe { new_threshold(ThresholdPolicy::trm(rate), out) }
}

/// Percentile threshold averaged over the last `window` batches.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prism_threshold_new_strm(
    rate: f64,
    window: usize,
    out: *mut *mut PrismThreshold,
) -> PrismStatus {
    unsafe { new_threshold(ThresholdPolicy::strm(rate, window), out) }
}

/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prism_threshold_free(policy: *mut PrismThreshold) {
    unsafe { free_box(policy) }
}

/// Feeds one batch of probabilities to the policy and returns its threshold.
///
/// # Safety
/// `probs` must point to `n` values and `out` to one writable value.
#[no_mangle]
pub unsafe extern "C" fn prism_threshold_compute(
    policy: *mut PrismThreshold,
    probs: *const f64,
    n: usize,
    out: *mut f64,
) -> PrismStatus {
    guard(|| unsafe {
        let policy = &mut obj_mut(policy, "policy")?.0;
        let t = policy.compute_threshold(slice(probs, n, "probs")?)?;
        put(out, t, "out")
    })
}

/// Creates filtering state. With [`PrismEstimator::VmfSim`] the first
/// `warmup_iters` iterations fall back to center-based average similarity.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prism_filter_new(
    estimator: PrismEstimator,
    warmup_iters: usize,
    out: *mut *mut PrismFilter,
) -> PrismStatus {
    guard(|| unsafe { put(out, Box::into_raw(Box::new(PrismFilter(FilterState::new(estimator.into(), warmup_iters)))), "out") })
}

/// # Safety
/// `filter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prism_filter_free(filter: *mut PrismFilter) {
    unsafe { free_box(filter) }
}

/// Scores a batch and applies the threshold. Writes each sample's clean
/// probability to `out_probs`, 1 or 0 to `out_kept`, and the threshold used
/// to `out_threshold`. The bank is not modified apart from recording the
/// batch's labels as seen; enqueue kept samples with [`prism_bank_enqueue`].
///
/// # Safety
/// `features` must point to `n * dim` values (where `dim` is the bank's),
/// `labels`, `out_probs` and `out_kept` to `n` values, and `out_threshold` to one.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn prism_filter_batch(
    filter: *const PrismFilter,
    bank: *mut PrismBank,
    policy: *mut PrismThreshold,
    features: *const f64,
    labels: *const usize,
    n: usize,
    out_probs: *mut f64,
    out_kept: *mut u8,
    out_threshold: *mut f64,
) -> PrismStatus {
    guard(|| unsafe {
        let state = &obj(filter, "filter")?.0;
        let bank = &mut obj_mut(bank, "bank")?.0;
        let policy = &mut obj_mut(policy, "policy")?.0;
        let xs = rows(features, n, bank.dim())?;
        let ys = slice(labels, n, "labels")?;
        let probs = slice_mut(out_probs, n, "out_probs")?;
        let kept = slice_mut(out_kept, n, "out_kept")?;
        let outcome = filter_batch(&xs, ys, state, bank, None, policy)?;
        probs.copy_from_slice(&outcome.probs);
        kept.fill(0);
        for &k in &outcome.kept {
            kept[k] = 1;
        }
        put(out_threshold, outcome.threshold, "out_threshold")
    })
}

/// Ends an iteration: refits class distributions from the bank when needed
/// and advances the warm-up counter.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn prism_filter_finish_iteration(filter: *mut PrismFilter, bank: *const PrismBank) -> PrismStatus {
    guard(|| unsafe {
        let bank = &obj(bank, "bank")?.0;
        obj_mut(filter, "filter")?.0.finish_iteration(bank)?;
        Ok(())
    })
}

/// Current iteration count of the filter.
///
/// # Safety
/// `filter` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn prism_filter_iteration(filter: *const PrismFilter, out: *mut usize) -> PrismStatus {
    guard(|| unsafe { put(out, obj(filter, "filter")?.0.iteration, "out") })
}

/// Creates a configuration with default values.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prism_config_new(out: *mut *mut PrismConfig) -> PrismStatus {
    guard(|| unsafe { put(out, Box::into_raw(Box::new(PrismConfig(ExperimentConfig::default()))), "out") })
}

/// Reads a `key = value` configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prism_config_load(path: *const c_char, out: *mut *mut PrismConfig) -> PrismStatus {
    guard(|| unsafe {
        let cfg = ExperimentConfig::from_file(Path::new(string(path, "path")?))?;
        put(out, Box::into_raw(Box::new(PrismConfig(cfg))), "out")
    })
}

/// # Safety
/// `config` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prism_config_free(config: *mut PrismConfig) {
    unsafe { free_box(config) }
}

/// Sets one key from its text form.
///
/// # Safety
/// `key` and `value` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn prism_config_set(config: *mut PrismConfig, key: *const c_char, value: *const c_char) -> PrismStatus {
    guard(|| unsafe {
        let cfg = &mut obj_mut(config, "config")?.0;
        cfg.set(string(key, "key")?, string(value, "value")?)?;
        Ok(())
    })
}

/// Runs a full training job. When `out_dir` is non-null, all run outputs are
/// written there. The final held-out precision@1 goes to `out_p_at_1`
/// (NaN if no evaluation ran).
///
/// # Safety
/// `config` must be live, `out_dir` null or NUL-terminated, `out_p_at_1` valid.
#[no_mangle]
pub unsafe extern "C" fn prism_train(config: *const PrismConfig, out_dir: *const c_char, out_p_at_1: *mut f64) -> PrismStatus {
    guard(|| unsafe {
        let cfg = obj(config, "config")?.0.clone();
        cfg.validate()?;
        let dir = if out_dir.is_null() { None } else { Some(string(out_dir, "out_dir")?) };
        let mut trainer = Trainer::new(cfg)?;
        trainer.run()?;
        if let Some(d) = dir {
            let d = Path::new(d);
            std::fs::create_dir_all(d).map_err(PrismError::from)?;
            let file = std::fs::File::create(d.join("effective_config")).map_err(PrismError::from)?;
            trainer.cfg.write_effective(std::io::BufWriter::new(file)).map_err(PrismError::from)?;
            trainer.write_outputs(d)?;
        }
        let p = trainer.record.final_metrics().map_or(f64::NAN, |m| m.p_at_1);
        put(out_p_at_1, p, "out_p_at_1")
    })
}

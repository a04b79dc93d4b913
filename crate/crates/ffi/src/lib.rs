//! C ABI over the hardboost library.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free`. Every function returns an
//! [`HbStatus`]; on failure `hb_last_error` describes the most recent error on
//! the calling thread. Panics never unwind into C: they surface as
//! [`HbStatus::Internal`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hardboost::codec::sha256_hex;
use hardboost::trainer::run_dir::{train_to_dir, EnsembleManifest, MANIFEST_FILE};
use hardboost::{Config, Dataset, Ensemble, Error, MarginParams, WeightTable};

/// Result codes. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HbStatus {
    Ok = 0,
    /// Null pointer, bad length or non-UTF-8 string.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    /// A panic inside the library.
    Internal = 5,
}

/// Generated synthetic dataset.
pub struct HbDataset(Dataset);

/// Per-sample boosting weights.
pub struct HbWeightTable(WeightTable);

/// Trained models with their combination weights.
pub struct HbEnsemble(Ensemble);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(HbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => HbStatus::Config,
            4 => HbStatus::Numeric,
            _ => HbStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(HbStatus::InvalidArgument, message.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HbStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            HbStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{name} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    out.write(value);
    Ok(())
}

fn config_from(text: Option<&str>) -> Result<Config, Failure> {
    Ok(match text {
        Some(t) => Config::from_toml(t)?,
        None => Config::default(),
    })
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn hb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Margin logit `s·cos(m_s·θ + m_a) − m_c` for the true class, `s·cos θ`
/// otherwise.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hb_margin_logit(
    theta: f64,
    m_s: f64,
    m_a: f64,
    m_c: f64,
    scale: f64,
    is_positive: bool,
    out: *mut f64,
) -> HbStatus {
    guard(|| {
        let params = MarginParams::new(m_s, m_a, m_c, scale)?;
        let v = hardboost::margin::margin_logit(theta, &params, scale, is_positive)?;
        write_out(out, v)
    })
}

/// Softmax probability of entry `label` among `n` logits.
///
/// # Safety
/// `logits` must point to `n` values; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hb_softmax_prob(
    logits: *const f64,
    n: usize,
    label: usize,
    out: *mut f64,
) -> HbStatus {
    guard(|| {
        let logits = slice_arg(logits, n, "logits")?;
        if label >= n {
            return Err(invalid(format!("label {label} out of range for {n} logits")));
        }
        let p = hardboost::margin::softmax(logits)[label].max(hardboost::margin::PROB_FLOOR);
        write_out(out, p)
    })
}

/// Per-sample scale `s − clip(d̂, ±0.33)·s`.
#[no_mangle]
pub extern "C" fn hb_adapt_scale(base_scale: f64, d_hat: f64) -> f64 {
    hardboost::adapt_scale(base_scale, d_hat)
}

/// New table with weight 1 for each of the `n` distinct ids.
///
/// # Safety
/// `ids` must point to `n` values; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hb_weight_table_new(
    ids: *const u64,
    n: usize,
    alpha: f64,
    out: *mut *mut HbWeightTable,
) -> HbStatus {
    guard(|| {
        let ids = slice_arg(ids, n, "ids")?;
        let table = WeightTable::init(ids.iter().copied(), alpha)?;
        write_out(out, Box::into_raw(Box::new(HbWeightTable(table))))
    })
}

/// One boosting update `d ← d·p^(−α)`. Every id in the table needs a
/// probability. The input table is left unchanged; the result is a new handle.
///
/// # Safety
/// `ids` and `probs` must point to `n` values each; `table` must be live.
#[no_mangle]
pub unsafe extern "C" fn hb_weight_table_update(
    table: *const HbWeightTable,
    ids: *const u64,
    probs: *const f64,
    n: usize,
    out: *mut *mut HbWeightTable,
) -> HbStatus {
    guard(|| {
        let table = handle(table, "table")?;
        let ids = slice_arg(ids, n, "ids")?;
        let probs = slice_arg(probs, n, "probs")?;
        let map: BTreeMap<u64, f64> = ids.iter().copied().zip(probs.iter().copied()).collect();
        let next = table.0.update_weights(&map)?;
        write_out(out, Box::into_raw(Box::new(HbWeightTable(next))))
    })
}

/// Weight of `id`.
///
/// # Safety
/// `table` must be live; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hb_weight_table_get(
    table: *const HbWeightTable,
    id: u64,
    out: *mut f64,
) -> HbStatus {
    guard(|| {
        let table = handle(table, "table")?;
        let w = table
            .0
            .get(id)
            .ok_or_else(|| Failure(HbStatus::Data, format!("id {id} is not in the table")))?;
        write_out(out, w)
    })
}

/// Number of samples in the table; 0 for null.
///
/// # Safety
/// `table` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn hb_weight_table_len(table: *const HbWeightTable) -> usize {
    table.as_ref().map_or(0, |t| t.0.len())
}

/// # Safety
/// `table` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hb_weight_table_free(table: *mut HbWeightTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Generates a dataset. `config_toml` is a config document (only `[gen]` is
/// used) or null for defaults.
///
/// # Safety
/// `config_toml` must be null or nul-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hb_dataset_generate(
    config_toml: *const c_char,
    out: *mut *mut HbDataset,
) -> HbStatus {
    guard(|| {
        let config = config_from(opt_str_arg(config_toml, "config_toml")?)?;
        let ds = hardboost::generate(&config.gen)?;
        write_out(out, Box::into_raw(Box::new(HbDataset(ds))))
    })
}

/// # Safety
/// `path` must be nul-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hb_dataset_load(path: *const c_char, out: *mut *mut HbDataset) -> HbStatus {
    guard(|| {
        let ds = Dataset::load(&PathBuf::from(str_arg(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(HbDataset(ds))))
    })
}

/// # Safety
/// `dataset` must be live; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn hb_dataset_save(dataset: *const HbDataset, path: *const c_char) -> HbStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        ds.0.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of training samples; 0 for null.
///
/// # Safety
/// `dataset` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn hb_dataset_train_len(dataset: *const HbDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.train.len())
}

/// # Safety
/// `dataset` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hb_dataset_free(dataset: *mut HbDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Runs the boosting pipeline into `run_dir`, the same layout `hardboost
/// train` writes. `config_toml` may be null for defaults (only `[train]` is
/// used).
///
/// # Safety
/// `dataset` must be live; strings must be nul-terminated or null where
/// allowed.
#[no_mangle]
pub unsafe extern "C" fn hb_train(
    dataset: *const HbDataset,
    config_toml: *const c_char,
    run_dir: *const c_char,
    resume: bool,
) -> HbStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let config = config_from(opt_str_arg(config_toml, "config_toml")?)?;
        let run = PathBuf::from(str_arg(run_dir, "run_dir")?);
        let digest = sha256_hex(&ds.0.to_bytes());
        train_to_dir(&ds.0, &digest, &config.train, &run, resume)?;
        Ok(())
    })
}

/// Loads the ensemble of a finished run. `betas` may be null to use the
/// stored weights; otherwise it must hold one value per round.
///
/// # Safety
/// `run_dir` must be nul-terminated; `betas` must point to `n_betas` values
/// or be null.
#[no_mangle]
pub unsafe extern "C" fn hb_ensemble_load(
    run_dir: *const c_char,
    betas: *const f64,
    n_betas: usize,
    out: *mut *mut HbEnsemble,
) -> HbStatus {
    guard(|| {
        let run = PathBuf::from(str_arg(run_dir, "run_dir")?);
        let betas = if betas.is_null() {
            None
        } else {
            Some(slice_arg(betas, n_betas, "betas")?.to_vec())
        };
        let manifest = EnsembleManifest::load(&run.join(MANIFEST_FILE))?;
        let ensemble = manifest.load_ensemble(&run, betas)?;
        write_out(out, Box::into_raw(Box::new(HbEnsemble(ensemble))))
    })
}

/// Number of models; 0 for null.
///
/// # Safety
/// `ensemble` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn hb_ensemble_len(ensemble: *const HbEnsemble) -> usize {
    ensemble.as_ref().map_or(0, |e| e.0.len())
}

/// Match score of two raw inputs of length `dim`.
///
/// # Safety
/// `a` and `b` must point to `dim` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hb_ensemble_score(
    ensemble: *const HbEnsemble,
    a: *const f64,
    b: *const f64,
    dim: usize,
    out: *mut f64,
) -> HbStatus {
    guard(|| {
        let e = handle(ensemble, "ensemble")?;
        let score = e.0.ensemble_score(slice_arg(a, dim, "a")?, slice_arg(b, dim, "b")?)?;
        write_out(out, score)
    })
}

/// # Safety
/// `ensemble` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hb_ensemble_free(ensemble: *mut HbEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Evaluates `ensemble` on the held-out split. On success `*out_json` holds a
/// JSON report to release with `hb_string_free`.
///
/// # Safety
/// Handles must be live; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hb_evaluate(
    dataset: *const HbDataset,
    ensemble: *const HbEnsemble,
    out_json: *mut *mut c_char,
) -> HbStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let e = handle(ensemble, "ensemble")?;
        let report = hardboost::evaluate(&ds.0.eval, &e.0)?;
        let json = CString::new(report.to_json()).expect("JSON has no nul bytes");
        write_out(out_json, json.into_raw())
    })
}

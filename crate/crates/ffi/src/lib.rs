//! C ABI over the gstuda library.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a
//! [`GstudaStatus`]; on failure a message for the calling thread is available
//! from [`gstuda_last_error`]. Images are row-major `double` arrays of
//! `height * width` values on the nominal `[0, 255]` intensity scale.
//! Panics never cross the boundary; they surface as `GSTUDA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gstuda::config::ExperimentConfig;
use gstuda::data::ImageGrid;
use gstuda::experiment::{self, RunSummary};
use gstuda::masks;
use gstuda::metrics::{self, Metric};
use gstuda::synth::{RANGE_HI, RANGE_LO};
use gstuda::translator::TranslatorModel;
use gstuda::{uncertainty, Error};

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GstudaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Diverged = 6,
    NonFinite = 7,
    BufferTooSmall = 8,
    OutputExists = 9,
    Panic = 10,
    Other = 11,
}

/// Experiment configuration handle.
pub struct GstudaConfig {
    inner: ExperimentConfig,
}

/// Translator model handle.
pub struct GstudaModel {
    inner: TranslatorModel<f32>,
}

/// Finished experiment handle: the aggregated report and any cell failures.
pub struct GstudaReport {
    inner: RunSummary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let clean = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

fn status_of(e: &Error) -> GstudaStatus {
    match e {
        Error::Config { .. } => GstudaStatus::Config,
        Error::Io { .. } => GstudaStatus::Io,
        Error::Format { .. } | Error::Checkpoint(_) | Error::Json(_) | Error::Image(_) => GstudaStatus::Format,
        Error::Diverged { .. } => GstudaStatus::Diverged,
        Error::NonFinite { .. } => GstudaStatus::NonFinite,
        Error::OutputExists(_) => GstudaStatus::OutputExists,
        Error::InvalidImage(_)
        | Error::DimensionMismatch { .. }
        | Error::Indivisible { .. }
        | Error::InvalidDataset(_)
        | Error::EmptyDataset
        | Error::InvalidArgument(_) => GstudaStatus::InvalidArgument,
        _ => GstudaStatus::Other,
    }
}

enum Fail {
    Status(GstudaStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(GstudaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Fail {
    Fail::Status(GstudaStatus::InvalidArgument, message.into())
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GstudaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GstudaStatus::Ok,
        Ok(Err(Fail::Status(s, m))) => {
            set_last_error(&m);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic");
            GstudaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn image_arg(p: *const f64, height: usize, width: usize, what: &str) -> Result<ImageGrid, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let n = height.checked_mul(width).ok_or_else(|| invalid("image size overflows"))?;
    let values = std::slice::from_raw_parts(p, n).to_vec();
    Ok(ImageGrid::new(height, width, values, RANGE_LO, RANGE_HI)?)
}

unsafe fn write_out(p: *mut f64, values: &[f64], what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), p, values.len());
    Ok(())
}

/// Copies `text` with a trailing NUL into `buf` when it fits in `capacity`
/// bytes. `needed` (if not null) always receives the required size.
unsafe fn write_text(text: &str, buf: *mut c_char, capacity: usize, needed: *mut usize) -> Result<(), Fail> {
    let bytes = text.as_bytes();
    if !needed.is_null() {
        *needed = bytes.len() + 1;
    }
    if buf.is_null() || capacity < bytes.len() + 1 {
        return Err(Fail::Status(
            GstudaStatus::BufferTooSmall,
            format!("buffer of {capacity} bytes cannot hold {}", bytes.len() + 1),
        ));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message describing the last failure on this thread, empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gstuda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gstuda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a configuration with every default.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn gstuda_config_default(out: *mut *mut GstudaConfig) -> GstudaStatus {
    guard(|| put(out, GstudaConfig { inner: ExperimentConfig::default() }))
}

/// Parses configuration text over the defaults.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` as in [`gstuda_config_default`].
#[no_mangle]
pub unsafe extern "C" fn gstuda_config_parse(text: *const c_char, out: *mut *mut GstudaConfig) -> GstudaStatus {
    guard(|| {
        let cfg = ExperimentConfig::parse(str_arg(text, "text")?)?;
        put(out, GstudaConfig { inner: cfg })
    })
}

/// Reads and parses a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`gstuda_config_default`].
#[no_mangle]
pub unsafe extern "C" fn gstuda_config_load(path: *const c_char, out: *mut *mut GstudaConfig) -> GstudaStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, GstudaConfig { inner: cfg })
    })
}

/// Assigns one `key.path` to `value`, using the config file's syntax. The
/// config is left unchanged if the result would not validate.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn gstuda_config_set(cfg: *mut GstudaConfig, key: *const c_char, value: *const c_char) -> GstudaStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let mut next = cfg.inner.clone();
        next.set(str_arg(key, "key")?, str_arg(value, "value")?)
            .map_err(|m| Fail::Status(GstudaStatus::Config, m))?;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// Writes the resolved config text into `buf`.
///
/// # Safety
/// `cfg` must be a live handle; `buf` must hold `capacity` bytes (or be null
/// to query the size through `needed`).
#[no_mangle]
pub unsafe extern "C" fn gstuda_config_to_text(cfg: *const GstudaConfig, buf: *mut c_char, capacity: usize, needed: *mut usize) -> GstudaStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        write_text(&cfg.inner.to_text(), buf, capacity, needed)
    })
}

/// Releases a config handle; null is ignored.
///
/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gstuda_config_free(cfg: *mut GstudaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the datasets of `cfg` into `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle and `out_dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gstuda_generate(cfg: *const GstudaConfig, out_dir: *const c_char, force: bool) -> GstudaStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        experiment::cmd_gen(&cfg.inner, &PathBuf::from(str_arg(out_dir, "out_dir")?), force)?;
        Ok(())
    })
}

/// Runs the experiment into the config's `output_dir`. Cell failures do not
/// fail the call; count them with [`gstuda_report_failure_count`].
///
/// # Safety
/// `cfg` must be a live handle; `out` as in [`gstuda_config_default`].
#[no_mangle]
pub unsafe extern "C" fn gstuda_run(cfg: *const GstudaConfig, force: bool, out: *mut *mut GstudaReport) -> GstudaStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        let summary = experiment::cmd_run(&cfg.inner, force)?;
        put(out, GstudaReport { inner: summary })
    })
}

/// Re-evaluates a finished run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string; `out` as in [`gstuda_config_default`].
#[no_mangle]
pub unsafe extern "C" fn gstuda_eval(run_dir: *const c_char, out: *mut *mut GstudaReport) -> GstudaStatus {
    guard(|| {
        let summary = experiment::cmd_eval(&PathBuf::from(str_arg(run_dir, "run_dir")?))?;
        put(out, GstudaReport { inner: summary })
    })
}

/// Renders the figures of a run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gstuda_plot(run_dir: *const c_char) -> GstudaStatus {
    guard(|| {
        gstuda::plot::cmd_plot(&PathBuf::from(str_arg(run_dir, "run_dir")?))?;
        Ok(())
    })
}

/// Writes the report as CSV (`method,metric,mean,sd`).
///
/// # Safety
/// `report` must be a live handle; `buf` as in [`gstuda_config_to_text`].
#[no_mangle]
pub unsafe extern "C" fn gstuda_report_csv(report: *const GstudaReport, buf: *mut c_char, capacity: usize, needed: *mut usize) -> GstudaStatus {
    guard(|| {
        let report = report.as_ref().ok_or_else(|| null("report"))?;
        write_text(&report.inner.report.to_csv(), buf, capacity, needed)
    })
}

/// Mean and seed SD of `metric` (`l1`, `ssim` or `psnr`) for a report row.
///
/// # Safety
/// `report` must be a live handle, `method` and `metric` NUL-terminated
/// strings, `mean` and `sd` writable.
#[no_mangle]
pub unsafe extern "C" fn gstuda_report_value(
    report: *const GstudaReport,
    method: *const c_char,
    metric: *const c_char,
    mean: *mut f64,
    sd: *mut f64,
) -> GstudaStatus {
    guard(|| {
        let report = report.as_ref().ok_or_else(|| null("report"))?;
        let name = str_arg(metric, "metric")?;
        let metric = Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == name)
            .ok_or_else(|| invalid(format!("unknown metric {name:?}")))?;
        let method = str_arg(method, "method")?;
        let (m, s) = report
            .inner
            .report
            .summary_value(method, metric)
            .ok_or_else(|| invalid(format!("no results for {method:?}")))?;
        if mean.is_null() || sd.is_null() {
            return Err(null("mean or sd"));
        }
        *mean = m;
        *sd = s;
        Ok(())
    })
}

/// Number of (cell, seed) pairs that failed; 0 for a null handle.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gstuda_report_failure_count(report: *const GstudaReport) -> usize {
    report.as_ref().map_or(0, |r| r.inner.failures.len())
}

/// Releases a report handle; null is ignored.
///
/// # Safety
/// `report` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gstuda_report_free(report: *mut GstudaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Loads a translator from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`gstuda_config_default`].
#[no_mangle]
pub unsafe extern "C" fn gstuda_model_load(path: *const c_char, out: *mut *mut GstudaModel) -> GstudaStatus {
    guard(|| {
        let model = TranslatorModel::<f32>::load(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, GstudaModel { inner: model })
    })
}

/// Deterministic prediction of one image.
///
/// # Safety
/// `model` must be a live handle; `input` and `output` must each hold
/// `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn gstuda_model_predict(model: *const GstudaModel, input: *const f64, height: usize, width: usize, output: *mut f64) -> GstudaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let x = image_arg(input, height, width, "input")?;
        write_out(output, model.inner.predict(&x)?.values(), "output")
    })
}

/// Monte Carlo dropout uncertainty of one image with `k` passes. Maps are
/// reported with the intensity range mapped to `[0, 1]`; `variance_unit` is
/// the range width the model's variance head was trained in (1 by default).
/// Any output pointer may be null to skip that map.
///
/// # Safety
/// `model` must be a live handle; `input` and every non-null output must hold
/// `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn gstuda_model_uncertainty(
    model: *const GstudaModel,
    input: *const f64,
    height: usize,
    width: usize,
    k: usize,
    seed: u64,
    variance_unit: f64,
    epistemic: *mut f64,
    aleatoric: *mut f64,
    total: *mut f64,
) -> GstudaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let x = image_arg(input, height, width, "input")?;
        if !(variance_unit.is_finite() && variance_unit > 0.0) {
            return Err(invalid("variance_unit must be positive"));
        }
        let maps = uncertainty::estimate(&model.inner, &x, k, seed, variance_unit)?;
        for (p, grid) in [(epistemic, &maps.epistemic), (aleatoric, &maps.aleatoric), (total, &maps.total)] {
            if !p.is_null() {
                write_out(p, grid.values(), "map")?;
            }
        }
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gstuda_model_free(model: *mut GstudaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Keeps the `floor(rho * n)` smallest uncertainties (ties by index) as 1.
///
/// # Safety
/// `u` and `weights` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn gstuda_binary_mask(u: *const f64, n: usize, rho: f64, weights: *mut f64) -> GstudaStatus {
    guard(|| {
        if u.is_null() {
            return Err(null("u"));
        }
        let grid = ImageGrid::new(1, n, std::slice::from_raw_parts(u, n).to_vec(), 0.0, 1.0)?;
        write_out(weights, masks::binary_mask(&grid, rho)?.weights.values(), "weights")
    })
}

/// `exp(-u)` per element.
///
/// # Safety
/// `u` and `weights` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn gstuda_continuous_mask(u: *const f64, n: usize, weights: *mut f64) -> GstudaStatus {
    guard(|| {
        if u.is_null() {
            return Err(null("u"));
        }
        let grid = ImageGrid::new(1, n, std::slice::from_raw_parts(u, n).to_vec(), 0.0, 1.0)?;
        write_out(weights, masks::continuous_mask(&grid)?.weights.values(), "weights")
    })
}

/// Image quality metric of `pred` against `truth`, both on `[0, 255]`.
///
/// # Safety
/// `pred` and `truth` must each hold `height * width` doubles; `value` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn gstuda_metric(
    metric: *const c_char,
    pred: *const f64,
    truth: *const f64,
    height: usize,
    width: usize,
    value: *mut f64,
) -> GstudaStatus {
    guard(|| {
        let name = str_arg(metric, "metric")?;
        let p = image_arg(pred, height, width, "pred")?;
        let t = image_arg(truth, height, width, "truth")?;
        let v = match name {
            "l1" => metrics::l1(&p, &t)?,
            "ssim" => metrics::ssim(&p, &t)?,
            "psnr" => metrics::psnr(&p, &t)?,
            _ => return Err(invalid(format!("unknown metric {name:?}"))),
        };
        if value.is_null() {
            return Err(null("value"));
        }
        *value = v;
        Ok(())
    })
}

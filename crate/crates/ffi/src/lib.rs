//! C ABI over `fedtime-core`.
//!
//! Models are opaque handles created by [`ft_model_load`] and released with
//! [`ft_model_free`]. Every fallible call returns an [`FtStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`ft_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fedtime_core::cli::{cmd_train, ConfigBuilder};
use fedtime_core::model::{checkpoint, predict, ForecastModel};
use fedtime_core::numerics::Tensor;
use fedtime_core::Error;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtStatus {
    Ok = 0,
    /// Null pointer, bad length or invalid UTF-8.
    InvalidArgument = 1,
    /// A configuration value was rejected.
    Config = 2,
    /// A runtime failure inside the library.
    Runtime = 3,
    /// A checkpoint could not be read or decoded.
    Checkpoint = 4,
    /// A panic was caught at the boundary.
    Panic = 5,
}

/// Opaque trained model.
pub struct FtModel {
    model: ForecastModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> FtStatus {
    match e {
        Error::Config { .. } => FtStatus::Config,
        Error::Checkpoint(_) | Error::Io { .. } => FtStatus::Checkpoint,
        _ => FtStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FtStatus, String)>) -> FtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FtStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside fedtime");
            FtStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FtStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (FtStatus, String) {
    (FtStatus::InvalidArgument, msg.to_string())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (FtStatus, String)> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    // SAFETY: caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ft_model_load(path: *const c_char, out: *mut *mut FtModel) -> FtStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        // SAFETY: forwarded caller guarantee.
        let path = unsafe { path_arg(path, "path") }?;
        let model = checkpoint::load(&path).map_err(lib_err)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(FtModel { model })) };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`ft_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ft_model_free(model: *mut FtModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Look-back length L the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ft_model_lookback(model: *const FtModel) -> usize {
    // SAFETY: caller guarantee.
    unsafe { model.as_ref() }.map_or(0, |m| m.model.config().lookback)
}

/// Forecast horizon T, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ft_model_horizon(model: *const FtModel) -> usize {
    // SAFETY: caller guarantee.
    unsafe { model.as_ref() }.map_or(0, |m| m.model.config().horizon)
}

/// Channel count M, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ft_model_channels(model: *const FtModel) -> usize {
    // SAFETY: caller guarantee.
    unsafe { model.as_ref() }.map_or(0, |m| m.model.config().channels)
}

/// Forecasts `rows` univariate windows. `inputs` holds `rows × L` values in
/// row-major order, `channels` the channel index of each row, and `out`
/// receives `rows × T` values.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ft_model_forecast(
    model: *const FtModel,
    inputs: *const f64,
    channels: *const usize,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> FtStatus {
    guard(|| {
        // SAFETY: caller guarantee.
        let m = unsafe { model.as_ref() }.ok_or_else(|| invalid("model is null"))?;
        if inputs.is_null() || channels.is_null() || out.is_null() {
            return Err(invalid("null buffer"));
        }
        let cfg = m.model.config();
        let (l, t) = (cfg.lookback, cfg.horizon);
        if rows == 0 {
            return Err(invalid("rows must be positive"));
        }
        if out_len < rows * t {
            return Err(invalid(&format!("out holds {out_len} values, need {}", rows * t)));
        }
        // SAFETY: caller guarantees the lengths.
        let (x, ch) = unsafe {
            (
                std::slice::from_raw_parts(inputs, rows * l),
                std::slice::from_raw_parts(channels, rows),
            )
        };
        if let Some(&bad) = ch.iter().find(|&&c| c >= cfg.channels) {
            return Err(invalid(&format!("channel {bad} out of range for {} channels", cfg.channels)));
        }
        let x = Tensor::new(vec![rows, l], x.to_vec()).map_err(lib_err)?;
        let y = predict(&m.model, &x, ch).map_err(lib_err)?;
        // SAFETY: out_len checked above.
        unsafe { std::slice::from_raw_parts_mut(out, rows * t) }.copy_from_slice(y.data());
        Ok(())
    })
}

/// Runs `train` for a TOML config file. `out_dir` may be null to keep the
/// configured directory. Final test MSE and MAE are written when the
/// pointers are non-null.
///
/// # Safety
/// String arguments must be NUL-terminated; output pointers null or valid.
#[no_mangle]
pub unsafe extern "C" fn ft_train(
    config_path: *const c_char,
    out_dir: *const c_char,
    mse: *mut f64,
    mae: *mut f64,
) -> FtStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantee.
        let path = unsafe { path_arg(config_path, "config_path") }?;
        let mut b = ConfigBuilder::new().file(&path).map_err(lib_err)?;
        if !out_dir.is_null() {
            // SAFETY: non-null, caller guarantees NUL termination.
            let dir = unsafe { path_arg(out_dir, "out_dir") }?;
            b = b
                .set_value("out_dir", toml::Value::String(dir.display().to_string()))
                .map_err(lib_err)?;
        }
        let cfg = b.build().map_err(lib_err)?;
        let summary = cmd_train(&cfg).map_err(lib_err)?;
        // SAFETY: null or valid per contract.
        unsafe {
            if let Some(p) = mse.as_mut() {
                *p = summary.row.mse;
            }
            if let Some(p) = mae.as_mut() {
                *p = summary.row.mae;
            }
        }
        Ok(())
    })
}

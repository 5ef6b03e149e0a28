//! C interface to the moelio filter and velocity network.
//!
//! Objects are opaque handles created by the `_default`, `_parse`, `_load`,
//! `_from_bytes` and `moelio_fuse` calls and released with the matching
//! `_free`. Every fallible call returns a [`MoelioStatus`]; on failure
//! [`moelio_last_error`] describes the cause for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use moelio::config::RunConfig;
use moelio::ekf::{FusedRun, ImuSample};
use moelio::moenet::{checkpoint, Capacity, ImuWindow, MoeModel, INPUT_ROWS};
use moelio::pipeline::{fuse, VelocitySource};
use nalgebra::Vector3;

/// Result of every fallible call. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoelioStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Invalid or inconsistent configuration.
    Config = 2,
    /// Unreadable, malformed or unsuitable input data.
    Data = 3,
    /// Numerical failure inside the filter or network.
    Numeric = 4,
    /// Argument out of range, such as a bad index or non-UTF-8 string.
    InvalidArgument = 5,
    /// Internal panic caught at the boundary.
    Internal = 6,
}

/// Run configuration.
pub struct MoelioConfig(RunConfig);

/// Trained velocity network.
pub struct MoelioModel(MoeModel);

/// Output of one filter run.
pub struct MoelioRun(FusedRun);

/// One IMU sample: time (s), angular rate (rad/s) and specific force (m/s²), body frame.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MoelioImuSample {
    pub t: f64,
    pub gyro: [f64; 3],
    pub accel: [f64; 3],
}

/// Filter output at one epoch, navigation frame.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MoelioNavRecord {
    pub t: f64,
    /// Body-to-navigation attitude, w x y z.
    pub q: [f64; 4],
    pub v: [f64; 3],
    pub p: [f64; 3],
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
    /// Covariance diagonal: attitude, velocity, position, gyro bias, accel bias.
    pub p_diag: [f64; 15],
}

/// Body-frame velocity with diagonal variance.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MoelioVelocity {
    pub v: [f64; 3],
    pub var: [f64; 3],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(MoelioStatus, String);

impl From<moelio::Error> for Fail {
    fn from(e: moelio::Error) -> Self {
        let status = match e.exit_code() {
            _ if matches!(e, moelio::Error::Shape { .. }) => MoelioStatus::InvalidArgument,
            2 => MoelioStatus::Config,
            3 => MoelioStatus::Data,
            _ => MoelioStatus::Numeric,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MoelioStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MoelioStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MoelioStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MoelioStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MoelioStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn moelio_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moelio_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default run configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn moelio_config_default(out: *mut *mut MoelioConfig) -> MoelioStatus {
    guard(|| put(out, MoelioConfig(RunConfig::default())))
}

/// Parses `section.key = value` configuration text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn moelio_config_parse(text: *const c_char, out: *mut *mut MoelioConfig) -> MoelioStatus {
    guard(|| {
        let cfg = RunConfig::parse(str_arg(text, "text")?)?;
        put(out, MoelioConfig(cfg))
    })
}

/// Loads a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn moelio_config_load(path: *const c_char, out: *mut *mut MoelioConfig) -> MoelioStatus {
    guard(|| {
        let cfg = RunConfig::load(Path::new(str_arg(path, "path")?))?;
        put(out, MoelioConfig(cfg))
    })
}

/// # Safety
/// `cfg` must be null or a handle from a `moelio_config_*` constructor, freed once.
#[no_mangle]
pub unsafe extern "C" fn moelio_config_free(cfg: *mut MoelioConfig) {
    free(cfg)
}

/// Loads a network checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn moelio_model_load(path: *const c_char, out: *mut *mut MoelioModel) -> MoelioStatus {
    guard(|| {
        let model = checkpoint::load(Path::new(str_arg(path, "path")?))?;
        put(out, MoelioModel(model))
    })
}

/// Decodes a checkpoint held in memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn moelio_model_from_bytes(bytes: *const u8, len: usize, out: *mut *mut MoelioModel) -> MoelioStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let model = checkpoint::from_bytes(std::slice::from_raw_parts(bytes, len))?;
        put(out, MoelioModel(model))
    })
}

/// Input window length the network expects.
///
/// # Safety
/// `model` must be a valid model handle.
#[no_mangle]
pub unsafe extern "C" fn moelio_model_window_len(model: *const MoelioModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().window_len)
}

/// Predicts body velocity for one window of `9 × len` values, row-major:
/// gyro xyz, specific force xyz and body-frame gravity direction xyz, one
/// column per epoch.
///
/// # Safety
/// `model` must be a valid model handle, `window` must point to
/// `9 * len` doubles and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn moelio_model_predict(
    model: *const MoelioModel,
    window: *const f64,
    len: usize,
    out: *mut MoelioVelocity,
) -> MoelioStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if window.is_null() {
            return Err(null("window"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let data = std::slice::from_raw_parts(window, INPUT_ROWS * len).to_vec();
        let w = ImuWindow::new(data, len)?;
        let (est, _) = model.0.predict(std::slice::from_ref(&w), Capacity::Batch)?;
        let e = &est[0];
        *out = MoelioVelocity {
            v: e.v_b.into(),
            var: e.sigma_diag.into(),
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from a `moelio_model_*` constructor, freed once.
#[no_mangle]
pub unsafe extern "C" fn moelio_model_free(model: *mut MoelioModel) {
    free(model)
}

/// Runs the filter over `n` IMU samples at the configured rate. With a
/// null `model` the filter only propagates.
///
/// # Safety
/// `cfg` must be a valid config handle, `model` null or a valid model
/// handle, `imu` must point to `n` samples and `out` be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn moelio_fuse(
    cfg: *const MoelioConfig,
    model: *const MoelioModel,
    imu: *const MoelioImuSample,
    n: usize,
    out: *mut *mut MoelioRun,
) -> MoelioStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if imu.is_null() && n > 0 {
            return Err(null("imu"));
        }
        let samples: Vec<ImuSample> = if n == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(imu, n)
                .iter()
                .map(|s| ImuSample {
                    t: s.t,
                    gyro: Vector3::from(s.gyro),
                    accel: Vector3::from(s.accel),
                })
                .collect()
        };
        let source = match model.as_ref() {
            Some(m) => VelocitySource::Network(&m.0),
            None => VelocitySource::None,
        };
        let run = fuse(&cfg.0, &samples, source)?;
        put(out, MoelioRun(run))
    })
}

/// Number of output epochs.
///
/// # Safety
/// `run` must be a valid run handle.
#[no_mangle]
pub unsafe extern "C" fn moelio_run_len(run: *const MoelioRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.records.len())
}

/// Number of accepted velocity updates.
///
/// # Safety
/// `run` must be a valid run handle.
#[no_mangle]
pub unsafe extern "C" fn moelio_run_updates(run: *const MoelioRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.updates())
}

/// Copies epoch `i` of the run into `out`.
///
/// # Safety
/// `run` must be a valid run handle and `out` point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn moelio_run_record(run: *const MoelioRun, i: usize, out: *mut MoelioNavRecord) -> MoelioStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = run.0.records.get(i).ok_or_else(|| {
            Fail(
                MoelioStatus::InvalidArgument,
                format!("record {i} out of range for {} epochs", run.0.records.len()),
            )
        })?;
        *out = MoelioNavRecord {
            t: r.t,
            q: r.state.r.to_quaternion(),
            v: r.state.v.into(),
            p: r.state.p.into(),
            gyro_bias: r.state.b_g.into(),
            accel_bias: r.state.b_a.into(),
            p_diag: r.p_diag,
        };
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a handle from [`moelio_fuse`], freed once.
#[no_mangle]
pub unsafe extern "C" fn moelio_run_free(run: *mut MoelioRun) {
    free(run)
}

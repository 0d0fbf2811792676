//! C ABI for the fusion library: opaque model handles, status codes, and a
//! thread-local last-error message.
//!
//! Conventions:
//! - Images are row-major `f64` luminance buffers in `[0,1]` of length
//!   `height * width`.
//! - Every fallible function returns [`LkFuseStatus`]; on failure
//!   [`lkfuse_last_error_message`] holds a description until the next call
//!   on the same thread.
//! - `lkfuse_model_*` handles must be released with [`lkfuse_model_free`].

use lkfuse_core::data::pad_to_multiple;
use lkfuse_core::error::Error;
use lkfuse_core::metrics;
use lkfuse_core::model::{FusionNet, ModelConfig};
use lkfuse_core::train::load_checkpoint;
use ndarray::Array2;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result codes of every fallible C API call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LkFuseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IoError = 3,
    ContractViolation = 4,
    FingerprintMismatch = 5,
    DegenerateMetric = 6,
    NumericFailure = 7,
    InternalError = 8,
}

/// Six-metric report for one fused/source triple (0-255 intensity scale).
/// `has_scd` / `has_viff` are false when the metric is degenerate on this
/// input; the corresponding value is then 0.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LkFuseMetrics {
    pub sd: f64,
    pub ag: f64,
    pub sf: f64,
    pub scd: f64,
    pub viff: f64,
    pub ssim: f64,
    pub has_scd: bool,
    pub has_viff: bool,
}

/// Opaque trained-model handle.
pub struct LkFuseModel {
    net: FusionNet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> LkFuseStatus {
    match err {
        Error::ShapeMismatch { .. } | Error::ContractViolation(_) => LkFuseStatus::ContractViolation,
        Error::RejectedInput(_) | Error::EmptyInput(_) => LkFuseStatus::InvalidArgument,
        Error::DegenerateMetric { .. } => LkFuseStatus::DegenerateMetric,
        Error::FingerprintMismatch { .. } => LkFuseStatus::FingerprintMismatch,
        Error::Format(_) | Error::Image(_) => LkFuseStatus::IoError,
        Error::Io(_) => LkFuseStatus::IoError,
        Error::NumericFailure { .. } => LkFuseStatus::NumericFailure,
    }
}

fn guard(f: impl FnOnce() -> LkFuseStatus) -> LkFuseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            LkFuseStatus::InternalError
        }
    }
}

/// Version string of the library; static storage, do not free.
#[no_mangle]
pub extern "C" fn lkfuse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Error message of the most recent failed call on this thread; valid until
/// the next API call on the same thread. Do not free.
#[no_mangle]
pub extern "C" fn lkfuse_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a model from a checkpoint file written by the trainer.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lkfuse_model_load(
    path: *const c_char,
    out: *mut *mut LkFuseModel,
) -> LkFuseStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            set_error("null pointer argument");
            return LkFuseStatus::NullPointer;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return LkFuseStatus::InvalidArgument;
            }
        };
        match load_checkpoint(Path::new(path)).and_then(|c| c.build_net()) {
            Ok(net) => {
                unsafe { *out = Box::into_raw(Box::new(LkFuseModel { net })) };
                LkFuseStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Create a randomly initialized model (default config; desk-scale widths
/// when `desk_scale` is set). Mainly for binding tests.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lkfuse_model_random(
    desk_scale: bool,
    seed: u64,
    out: *mut *mut LkFuseModel,
) -> LkFuseStatus {
    guard(|| {
        if out.is_null() {
            set_error("null pointer argument");
            return LkFuseStatus::NullPointer;
        }
        let cfg = if desk_scale {
            ModelConfig::default().with_desk_widths()
        } else {
            ModelConfig::default()
        };
        match FusionNet::new(&cfg, seed) {
            Ok(net) => {
                unsafe { *out = Box::into_raw(Box::new(LkFuseModel { net })) };
                LkFuseStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a model handle. Passing NULL is a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by a constructor, or NULL.
#[no_mangle]
pub unsafe extern "C" fn lkfuse_model_free(model: *mut LkFuseModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Stable fingerprint of the model configuration.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lkfuse_model_fingerprint(
    model: *const LkFuseModel,
    out: *mut u64,
) -> LkFuseStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer argument");
            return LkFuseStatus::NullPointer;
        }
        unsafe { *out = (*model).net.config().fingerprint() };
        LkFuseStatus::Ok
    })
}

unsafe fn slice_to_image<'a>(
    ptr: *const f64,
    height: usize,
    width: usize,
) -> Option<Array2<f64>> {
    if ptr.is_null() || height == 0 || width == 0 {
        return None;
    }
    let data = unsafe { std::slice::from_raw_parts(ptr, height * width) };
    Some(Array2::from_shape_vec((height, width), data.to_vec()).unwrap())
}

/// Fuse one aligned luminance pair. Arbitrary dimensions are padded
/// internally and cropped back; `fused_out` must hold `height * width`
/// doubles.
///
/// # Safety
/// All pointers must reference buffers of `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn lkfuse_fuse(
    model: *const LkFuseModel,
    src_a: *const f64,
    src_b_y: *const f64,
    height: usize,
    width: usize,
    fused_out: *mut f64,
) -> LkFuseStatus {
    guard(|| {
        if model.is_null() || fused_out.is_null() {
            set_error("null pointer argument");
            return LkFuseStatus::NullPointer;
        }
        let (a, b) = match unsafe {
            (
                slice_to_image(src_a, height, width),
                slice_to_image(src_b_y, height, width),
            )
        } {
            (Some(a), Some(b)) => (a, b),
            _ => {
                set_error("null or empty image buffer");
                return LkFuseStatus::NullPointer;
            }
        };
        let net = unsafe { &(*model).net };
        let result = (|| -> lkfuse_core::Result<Array2<f64>> {
            let min_dim = net.config().min_input_dim();
            let (input, crop_back) = pad_to_multiple(&a, &b, 16, min_dim)?;
            let fused = net.forward(&input)?;
            Ok(crop_back.apply(fused.tensor()))
        })();
        match result {
            Ok(fused) => {
                let out = unsafe { std::slice::from_raw_parts_mut(fused_out, height * width) };
                for (dst, src) in out.iter_mut().zip(fused.iter()) {
                    *dst = *src;
                }
                LkFuseStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Compute the six fusion metrics for a fused/source triple given as [0,1]
/// luminance buffers (rescaled to 0-255 internally).
///
/// # Safety
/// All pointers must reference buffers of `height * width` doubles and `out`
/// a valid struct pointer.
#[no_mangle]
pub unsafe extern "C" fn lkfuse_evaluate(
    fused: *const f64,
    src_a: *const f64,
    src_b_y: *const f64,
    height: usize,
    width: usize,
    out: *mut LkFuseMetrics,
) -> LkFuseStatus {
    guard(|| {
        if out.is_null() {
            set_error("null pointer argument");
            return LkFuseStatus::NullPointer;
        }
        let imgs = unsafe {
            (
                slice_to_image(fused, height, width),
                slice_to_image(src_a, height, width),
                slice_to_image(src_b_y, height, width),
            )
        };
        let (f, a, b) = match imgs {
            (Some(f), Some(a), Some(b)) => (f, a, b),
            _ => {
                set_error("null or empty image buffer");
                return LkFuseStatus::NullPointer;
            }
        };
        match metrics::evaluate_pair("ffi", &f, &a, &b) {
            Ok(row) => {
                unsafe {
                    *out = LkFuseMetrics {
                        sd: row.sd,
                        ag: row.ag,
                        sf: row.sf,
                        scd: row.scd.unwrap_or(0.0),
                        viff: row.viff.unwrap_or(0.0),
                        ssim: row.ssim,
                        has_scd: row.scd.is_some(),
                        has_viff: row.viff.is_some(),
                    }
                };
                LkFuseStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

//! C ABI for the mambair library: opaque model handles, status codes,
//! and a thread-local last-error message. The header is generated into
//! `include/mambair.h` by the build script.
//!
//! Conventions: every function returns a `MirStatus`; pointers are only
//! written on `MIR_OK`; image buffers are row-major channels-last f64,
//! values in [0,1]; the caller owns all buffers it passes in and must
//! free models with `mir_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mambair::blocks::Model;
use mambair::error::MirError;
use mambair::pipeline::checkpoint::Checkpoint;
use mambair::pipeline::config::RunConfig;
use mambair::pipeline::ensemble::restore_image;
use mambair::pipeline::metrics::{psnr_y, ssim_y};
use mambair::tensor::Tensor;

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MirStatus {
    MirOk = 0,
    /// Invalid configuration or argument shape.
    MirConfigError = 2,
    /// File or serialization problem.
    MirIoError = 3,
    /// Non-finite values or a numeric contract violation.
    MirNumericError = 4,
    /// Null pointer or malformed UTF-8 argument.
    MirInvalidArgument = 5,
    /// Internal panic caught at the boundary.
    MirPanic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap();
    });
}

fn status_of(err: &MirError) -> MirStatus {
    match err {
        MirError::Config(_) | MirError::Shape(_) => MirStatus::MirConfigError,
        MirError::Io(_) | MirError::Format(_) => MirStatus::MirIoError,
        MirError::Numeric(_) | MirError::Autodiff(_) => MirStatus::MirNumericError,
    }
}

/// Message for the most recent failure on this thread. Valid until the
/// next failing call; never null.
#[no_mangle]
pub extern "C" fn mir_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque handle to a loaded restoration model.
pub struct MirModel {
    model: Model,
}

fn guard<F: FnOnce() -> MirStatus>(f: F) -> MirStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&msg);
            MirStatus::MirPanic
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, MirStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(MirStatus::MirInvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        MirStatus::MirInvalidArgument
    })
}

/// Builds a freshly initialized model from config text (same key=value
/// grammar as the CLI's config files; empty string for defaults).
///
/// # Safety
/// `config_text` must be null or a valid NUL-terminated string; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mir_model_new(
    config_text: *const c_char,
    seed: u64,
    out: *mut *mut MirModel,
) -> MirStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return MirStatus::MirInvalidArgument;
        }
        let text = if config_text.is_null() {
            ""
        } else {
            match cstr_arg(config_text) {
                Ok(s) => s,
                Err(status) => return status,
            }
        };
        let overrides = [format!("seed={seed}")];
        let cfg = match RunConfig::from_text(text, &overrides) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        match Model::init(&cfg.model, cfg.train.seed) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(MirModel { model }));
                MirStatus::MirOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Loads a model from a checkpoint file written by training (the
/// checkpoint's config echo fixes the architecture).
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mir_model_from_checkpoint(
    path: *const c_char,
    out: *mut *mut MirModel,
) -> MirStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return MirStatus::MirInvalidArgument;
        }
        let path = match cstr_arg(path) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let load = || -> Result<Model, MirError> {
            let ck = Checkpoint::load(Path::new(path))?;
            let cfg = RunConfig::from_text(&ck.config_echo, &[])?;
            let model = Model::init(&cfg.model, cfg.train.seed)?;
            ck.restore_params(model.state())?;
            Ok(model)
        };
        match load() {
            Ok(model) => {
                *out = Box::into_raw(Box::new(MirModel { model }));
                MirStatus::MirOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Frees a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer returned by a constructor, freed
/// at most once.
#[no_mangle]
pub unsafe extern "C" fn mir_model_free(model: *mut MirModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Upscaling factor of the model's task (1 for denoising).
///
/// # Safety
/// `model` and `out_scale` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mir_model_scale(
    model: *const MirModel,
    out_scale: *mut usize,
) -> MirStatus {
    guard(|| {
        if model.is_null() || out_scale.is_null() {
            set_error("null pointer");
            return MirStatus::MirInvalidArgument;
        }
        *out_scale = (*model).model.config.task.scale();
        MirStatus::MirOk
    })
}

/// Input channel count the model expects (1 or 3).
///
/// # Safety
/// `model` and `out_channels` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mir_model_in_channels(
    model: *const MirModel,
    out_channels: *mut usize,
) -> MirStatus {
    guard(|| {
        if model.is_null() || out_channels.is_null() {
            set_error("null pointer");
            return MirStatus::MirInvalidArgument;
        }
        *out_channels = (*model).model.config.in_channels;
        MirStatus::MirOk
    })
}

/// Restores an image. `pixels` is h*w*channels doubles in [0,1];
/// `out_pixels` must hold (scale*h)*(scale*w)*channels doubles.
/// `ensemble` != 0 averages over the eight dihedral transforms.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mir_restore(
    model: *const MirModel,
    pixels: *const f64,
    h: usize,
    w: usize,
    channels: usize,
    ensemble: i32,
    out_pixels: *mut f64,
) -> MirStatus {
    guard(|| {
        if model.is_null() || pixels.is_null() || out_pixels.is_null() {
            set_error("null pointer");
            return MirStatus::MirInvalidArgument;
        }
        if h == 0 || w == 0 || channels == 0 {
            set_error("zero image dimension");
            return MirStatus::MirInvalidArgument;
        }
        let model = &(*model).model;
        let input = std::slice::from_raw_parts(pixels, h * w * channels);
        let tensor = Tensor::from_vec(&[h, w, channels], input.to_vec());
        match restore_image(model, &tensor, ensemble != 0) {
            Ok(restored) => {
                let data = restored.data();
                let out = std::slice::from_raw_parts_mut(out_pixels, data.len());
                out.copy_from_slice(&data);
                MirStatus::MirOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

unsafe fn metric_args(
    a: *const f64,
    b: *const f64,
    h: usize,
    w: usize,
    channels: usize,
) -> Result<(Tensor, Tensor), MirStatus> {
    if a.is_null() || b.is_null() {
        set_error("null pixel buffer");
        return Err(MirStatus::MirInvalidArgument);
    }
    if h == 0 || w == 0 || (channels != 1 && channels != 3) {
        set_error("images must be [h,w,1] or [h,w,3]");
        return Err(MirStatus::MirInvalidArgument);
    }
    let n = h * w * channels;
    let ta = Tensor::from_vec(&[h, w, channels], std::slice::from_raw_parts(a, n).to_vec());
    let tb = Tensor::from_vec(&[h, w, channels], std::slice::from_raw_parts(b, n).to_vec());
    Ok((ta, tb))
}

/// Y-channel PSNR in dB between two same-shape images in [0,1].
/// Identical images return +infinity.
///
/// # Safety
/// Buffers must hold h*w*channels doubles.
#[no_mangle]
pub unsafe extern "C" fn mir_psnr_y(
    a: *const f64,
    b: *const f64,
    h: usize,
    w: usize,
    channels: usize,
    out_db: *mut f64,
) -> MirStatus {
    guard(|| {
        if out_db.is_null() {
            set_error("null output pointer");
            return MirStatus::MirInvalidArgument;
        }
        let (ta, tb) = match metric_args(a, b, h, w, channels) {
            Ok(v) => v,
            Err(status) => return status,
        };
        match psnr_y(&ta, &tb) {
            Ok(v) => {
                *out_db = v;
                MirStatus::MirOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Y-channel SSIM between two same-shape images in [0,1]; requires at
/// least 11x11 pixels.
///
/// # Safety
/// Buffers must hold h*w*channels doubles.
#[no_mangle]
pub unsafe extern "C" fn mir_ssim_y(
    a: *const f64,
    b: *const f64,
    h: usize,
    w: usize,
    channels: usize,
    out_ssim: *mut f64,
) -> MirStatus {
    guard(|| {
        if out_ssim.is_null() {
            set_error("null output pointer");
            return MirStatus::MirInvalidArgument;
        }
        let (ta, tb) = match metric_args(a, b, h, w, channels) {
            Ok(v) => v,
            Err(status) => return status,
        };
        match ssim_y(&ta, &tb) {
            Ok(v) => {
                *out_ssim = v;
                MirStatus::MirOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Library version as (major << 16) | (minor << 8) | patch.
#[no_mangle]
pub extern "C" fn mir_version() -> u32 {
    let parse = |s: &str| s.parse::<u32>().unwrap_or(0);
    let mut parts = env!("CARGO_PKG_VERSION").split('.');
    let major = parse(parts.next().unwrap_or("0"));
    let minor = parse(parts.next().unwrap_or("0"));
    let patch = parse(parts.next().unwrap_or("0"));
    (major << 16) | (minor << 8) | patch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn new_model(config: &str, seed: u64) -> *mut MirModel {
        let text = CString::new(config).unwrap();
        let mut handle: *mut MirModel = std::ptr::null_mut();
        let status = unsafe { mir_model_new(text.as_ptr(), seed, &mut handle) };
        assert_eq!(status, MirStatus::MirOk);
        assert!(!handle.is_null());
        handle
    }

    #[test]
    fn model_lifecycle_and_metadata() {
        let handle = new_model("task = sr_x2\nchannels = 16\ngroups = 1\nblocks_per_group = 1\n", 3);
        let mut scale = 0usize;
        let mut ch = 0usize;
        unsafe {
            assert_eq!(mir_model_scale(handle, &mut scale), MirStatus::MirOk);
            assert_eq!(mir_model_in_channels(handle, &mut ch), MirStatus::MirOk);
            mir_model_free(handle);
        }
        assert_eq!(scale, 2);
        assert_eq!(ch, 3);
    }

    #[test]
    fn restore_produces_scaled_output() {
        let handle = new_model(
            "task = sr_x2\nchannels = 16\ngroups = 1\nblocks_per_group = 1\n",
            4,
        );
        let (h, w, c) = (6usize, 5usize, 3usize);
        let input: Vec<f64> = (0..h * w * c).map(|i| (i % 7) as f64 / 7.0).collect();
        let mut out = vec![-1.0; (2 * h) * (2 * w) * c];
        let status = unsafe {
            mir_restore(handle, input.as_ptr(), h, w, c, 0, out.as_mut_ptr())
        };
        assert_eq!(status, MirStatus::MirOk);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        unsafe { mir_model_free(handle) };
    }

    #[test]
    fn bad_config_reports_error_message() {
        let text = CString::new("nonsense_key = 1\n").unwrap();
        let mut handle: *mut MirModel = std::ptr::null_mut();
        let status = unsafe { mir_model_new(text.as_ptr(), 0, &mut handle) };
        assert_eq!(status, MirStatus::MirConfigError);
        let msg = unsafe { CStr::from_ptr(mir_last_error()) }
            .to_string_lossy()
            .to_string();
        assert!(msg.contains("nonsense_key"), "message was '{msg}'");
    }

    #[test]
    fn metrics_roundtrip_through_the_boundary() {
        let (h, w) = (16usize, 16usize);
        let a: Vec<f64> = (0..h * w).map(|i| (i % 11) as f64 / 11.0).collect();
        let mut db = 0.0;
        let mut ssim = 0.0;
        unsafe {
            assert_eq!(
                mir_psnr_y(a.as_ptr(), a.as_ptr(), h, w, 1, &mut db),
                MirStatus::MirOk
            );
            assert_eq!(
                mir_ssim_y(a.as_ptr(), a.as_ptr(), h, w, 1, &mut ssim),
                MirStatus::MirOk
            );
        }
        assert!(db.is_infinite());
        assert_eq!(ssim, 1.0);
    }

    #[test]
    fn null_arguments_are_rejected_not_crashed() {
        let mut out = 0.0;
        unsafe {
            assert_eq!(
                mir_psnr_y(std::ptr::null(), std::ptr::null(), 4, 4, 1, &mut out),
                MirStatus::MirInvalidArgument
            );
            let mut handle: *mut MirModel = std::ptr::null_mut();
            assert_eq!(
                mir_model_from_checkpoint(std::ptr::null(), &mut handle),
                MirStatus::MirInvalidArgument
            );
            mir_model_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn missing_checkpoint_is_io_error() {
        let path = CString::new("/definitely/not/a/file.ckpt").unwrap();
        let mut handle: *mut MirModel = std::ptr::null_mut();
        let status = unsafe { mir_model_from_checkpoint(path.as_ptr(), &mut handle) };
        assert_eq!(status, MirStatus::MirIoError);
    }
}

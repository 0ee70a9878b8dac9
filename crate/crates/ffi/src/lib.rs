//! C ABI for loading a checkpoint and running detection.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free` function. Every call returns a [`SelattnStatus`]; on
//! failure [`selattn_last_error`] describes what went wrong on this thread.
//! Results are UTF-8 JSON strings allocated here and released with
//! [`selattn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use selattn::backbone::Image;
use selattn::checkpoint::{load_checkpoint, CheckpointError};
use selattn::config::RunConfig;
use selattn::detector::detect;
use selattn::model::ModelParams;
use selattn::rpn::propose;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelattnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// File missing or unreadable.
    Io = 3,
    /// Checkpoint damaged, or its tensors do not fit its config.
    BadCheckpoint = 4,
    /// The pipeline rejected the input.
    Pipeline = 5,
    Panic = 6,
}

/// A loaded checkpoint.
pub struct SelattnModel {
    config: RunConfig,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

struct Failure(SelattnStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SelattnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SelattnStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            SelattnStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SelattnStatus::NullPointer, format!("{what} is null"))
}

fn checkpoint_failure(e: CheckpointError) -> Failure {
    let code = match e {
        CheckpointError::Io { .. } => SelattnStatus::Io,
        _ => SelattnStatus::BadCheckpoint,
    };
    Failure(code, e.to_string())
}

/// Build an image from `width * height` row-major grayscale values in [0, 1].
unsafe fn image_from(pixels: *const f32, width: usize, height: usize) -> Result<Image, Failure> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    if width == 0 || height == 0 {
        return Err(Failure(SelattnStatus::InvalidArgument, "image has zero size".into()));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Failure(SelattnStatus::InvalidArgument, "image size overflows".into()))?;
    let data = std::slice::from_raw_parts(pixels, n).iter().map(|&v| v as f64).collect();
    Image::new(width, height, data).map_err(|e| Failure(SelattnStatus::InvalidArgument, e.to_string()))
}

unsafe fn write_json(out: *mut *mut c_char, json: String) {
    *out = CString::new(json).expect("JSON has no nul bytes").into_raw();
}

/// Message for the most recent failure on the calling thread; empty after a
/// success. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn selattn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn selattn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load the checkpoint directory at `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn selattn_model_load(path: *const c_char, out: *mut *mut SelattnModel) -> SelattnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(SelattnStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = load_checkpoint(Path::new(path)).map_err(checkpoint_failure)?;
        *out = Box::into_raw(Box::new(SelattnModel {
            config: ck.config,
            params: ck.params,
        }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`selattn_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn selattn_model_free(model: *mut SelattnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of anchors per grid position the model was trained with.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn selattn_model_anchors_per_position(model: *const SelattnModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.rpn.k())
}

/// Detect both organs. `*out_json` receives an array of
/// `{"class", "bbox": {"x","y","w","h"}, "confidence"}` objects.
///
/// # Safety
/// `pixels` must point to `width * height` floats; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selattn_detect(
    model: *const SelattnModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    out_json: *mut *mut c_char,
) -> SelattnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let img = image_from(pixels, width, height)?;
        let outcome = detect(&img, &m.params, &m.config.proposal())
            .map_err(|e| Failure(SelattnStatus::Pipeline, e.to_string()))?;
        write_json(out_json, serde_json::to_string(&outcome.detections).expect("detections serialize"));
        Ok(())
    })
}

/// Scored proposals after NMS and top-N. `*out_json` receives an array of
/// `{"bbox": {...}, "score"}` objects, best first.
///
/// # Safety
/// As for [`selattn_detect`].
#[no_mangle]
pub unsafe extern "C" fn selattn_propose(
    model: *const SelattnModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    out_json: *mut *mut c_char,
) -> SelattnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let img = image_from(pixels, width, height)?;
        let ps = propose(&img, &m.params, &m.config.proposal())
            .map_err(|e| Failure(SelattnStatus::Pipeline, e.to_string()))?;
        let list: Vec<serde_json::Value> = ps
            .proposals
            .iter()
            .map(|p| serde_json::json!({ "bbox": p.bbox, "score": p.score }))
            .collect();
        write_json(out_json, serde_json::Value::from(list).to_string());
        Ok(())
    })
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn selattn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

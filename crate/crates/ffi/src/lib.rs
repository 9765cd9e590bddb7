//! C ABI over `plada-core`.
//!
//! Handles are opaque pointers released with their `*_free` function. Every
//! fallible call returns a `PladaStatus`; on failure the message is kept per
//! thread and read back with [`plada_last_error`]. Images cross the boundary
//! as interleaved 8-bit RGB, row-major, `width * height * 3` bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use plada_core::attention::SelectMode;
use plada_core::data::images_to_tensor;
use plada_core::harness::eval::inference_plan;
use plada_core::harness::{accuracy, average_precision, checkpoint};
use plada_core::image::Image;
use plada_core::model::Model;
use plada_core::{jpeg, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PladaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Divergence = 5,
    Panic = 6,
}

/// A detector restored from a checkpoint.
pub struct PladaModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PladaStatus {
    match e {
        Error::Io(_) => PladaStatus::Io,
        Error::Checkpoint(_) => PladaStatus::Checkpoint,
        Error::Divergence(_) => PladaStatus::Divergence,
        _ => PladaStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (PladaStatus, String)>) -> PladaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PladaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PladaStatus::Panic
        }
    }
}

fn core<T>(r: plada_core::Result<T>) -> Result<T, (PladaStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (PladaStatus, String) {
    (PladaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (PladaStatus, String) {
    (PladaStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `rgb` must point to `width * height * 3` readable bytes when non-null.
unsafe fn read_image(rgb: *const u8, width: usize, height: usize) -> Result<Image, (PladaStatus, String)> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    let n = width.checked_mul(height).and_then(|v| v.checked_mul(3)).ok_or_else(|| invalid("image too large"))?;
    core(Image::new(width, height, std::slice::from_raw_parts(rgb, n).to_vec()))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn plada_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a `.plada` checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn plada_model_load(path: *const c_char, out: *mut *mut PladaModel) -> PladaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let model = core(checkpoint::load(Path::new(path), None))?;
        *out = Box::into_raw(Box::new(PladaModel { model }));
        Ok(())
    })
}

/// Releases a model. Null is a no-op.
///
/// # Safety
/// `model` must come from [`plada_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn plada_model_free(model: *mut PladaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the class-token feature vector.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn plada_model_feature_dim(model: *const PladaModel, out: *mut usize) -> PladaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.cfg.dim;
        Ok(())
    })
}

/// Fake probability of each of `n` images laid out back to back, averaging
/// over the whole prompt pool. Writes `n` values to `probs`.
///
/// # Safety
/// `rgb` must hold `n * width * height * 3` bytes and `probs` room for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn plada_model_predict(
    model: *const PladaModel,
    rgb: *const u8,
    n: usize,
    width: usize,
    height: usize,
    probs: *mut f64,
) -> PladaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if probs.is_null() {
            return Err(null("probs"));
        }
        if n == 0 {
            return Ok(());
        }
        let stride = width * height * 3;
        let images = (0..n).map(|i| read_image(rgb.wrapping_add(i * stride), width, height)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let tensor = core(images_to_tensor(&refs))?;
        let plan = core(inference_plan(m, SelectMode::FullAverage, &mut ChaCha8Rng::seed_from_u64(0)))?;
        let (p, _) = core(m.infer(&tensor, &plan))?;
        std::slice::from_raw_parts_mut(probs, n).copy_from_slice(&p);
        Ok(())
    })
}

/// JPEG round trip of one image at quality `qp` into `out_rgb`.
///
/// # Safety
/// Both buffers must hold `width * height * 3` bytes.
#[no_mangle]
pub unsafe extern "C" fn plada_jpeg_compress(
    rgb: *const u8,
    width: usize,
    height: usize,
    qp: u32,
    out_rgb: *mut u8,
) -> PladaStatus {
    guard(|| {
        let img = read_image(rgb, width, height)?;
        if out_rgb.is_null() {
            return Err(null("out_rgb"));
        }
        let c = core(jpeg::compress(&img, qp))?;
        std::slice::from_raw_parts_mut(out_rgb, c.pixels().len()).copy_from_slice(c.pixels());
        Ok(())
    })
}

/// 8×8 grid blockiness of one image.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn plada_blockiness(rgb: *const u8, width: usize, height: usize, out: *mut f64) -> PladaStatus {
    guard(|| {
        let img = read_image(rgb, width, height)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = core(jpeg::blockiness(&img))?;
        Ok(())
    })
}

/// Accuracy at threshold 0.5 and step-interpolated average precision of
/// `n` scores against 0/1 labels (1 = fake).
///
/// # Safety
/// `scores` and `labels` must hold `n` entries; `acc` and `ap` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plada_metrics(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    acc: *mut f64,
    ap: *mut f64,
) -> PladaStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || acc.is_null() || ap.is_null() {
            return Err(null("argument"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let y = std::slice::from_raw_parts(labels, n);
        if y.iter().any(|&v| v > 1) {
            return Err(invalid("labels must be 0 or 1"));
        }
        *acc = accuracy(s, y);
        *ap = average_precision(s, y);
        Ok(())
    })
}

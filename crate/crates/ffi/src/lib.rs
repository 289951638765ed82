//! C interface to `cdae`.
//!
//! Every fallible function returns a [`CdaeStatus`]; on failure the message
//! is available from [`cdae_last_error`] on the same thread until the next
//! failing call. Handles are opaque and must be released with the matching
//! `*_free` function. Panics never cross the boundary: they are reported as
//! [`CdaeStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use cdae::checkpoint::load_checkpoint;
use cdae::corruption::{logistic_map, ChaosParams};
use cdae::image::{ImageBatch, ImageDims};
use cdae::metrics::ConfusionMatrix;
use cdae::models::AnyModel;
use cdae::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdaeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad value, shape or label.
    InvalidArgument = 2,
    /// File missing, unreadable or not valid UTF-8.
    Io = 3,
    /// Checkpoint damaged or of an unsupported version.
    Checkpoint = 4,
    /// The model cannot serve the request.
    Model = 5,
    /// A Rust panic was caught.
    Internal = 6,
}

/// Running confusion matrix.
pub struct CdaeConfusion(ConfusionMatrix);

/// Model restored from a checkpoint.
pub struct CdaeModel(AnyModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(CdaeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Checkpoint(_) => CdaeStatus::Checkpoint,
            Error::Io(_) | Error::Data(_) | Error::Decode { .. } => CdaeStatus::Io,
            Error::Model(_) | Error::NonFiniteLoss { .. } => CdaeStatus::Model,
            _ => CdaeStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(CdaeStatus::NullPointer, format!("`{name}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CdaeStatus::InvalidArgument, msg.into())
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> CdaeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CdaeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CdaeStatus::Internal
        }
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values of `T`.
unsafe fn input<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or point to `n` writable values of `T`.
unsafe fn output<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn cdae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cdae_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Writes `r * x * (1 - x)` for each of the `n` values to `out`. Values must
/// lie in [0, 1] and `r` in (0, 4]. `out` may alias `values`.
///
/// # Safety
/// `values` and `out` must each reference `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cdae_logistic_map(
    values: *const f64,
    out: *mut f64,
    n: usize,
    r: f64,
) -> CdaeStatus {
    guard(|| {
        let params = ChaosParams::new(r)?;
        let values = input(values, n, "values")?.to_vec();
        let batch = ImageBatch::new(n, ImageDims::new(1, 1, 1), values)?;
        let mapped = logistic_map(&batch, &params)?;
        output(out, n, "out")?.copy_from_slice(mapped.data());
        Ok(())
    })
}

/// Creates an empty `k`-class confusion matrix in `*out`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn cdae_confusion_new(k: usize, out: *mut *mut CdaeConfusion) -> CdaeStatus {
    guard(|| {
        let slot = out.as_mut().ok_or_else(|| null("out"))?;
        *slot = Box::into_raw(Box::new(CdaeConfusion(ConfusionMatrix::new(k)?)));
        Ok(())
    })
}

/// Counts `n` (truth, prediction) pairs. Nothing is counted on error.
///
/// # Safety
/// `cm` must come from [`cdae_confusion_new`]; `truth` and `pred` must each
/// reference `n` values.
#[no_mangle]
pub unsafe extern "C" fn cdae_confusion_update(
    cm: *mut CdaeConfusion,
    truth: *const usize,
    pred: *const usize,
    n: usize,
) -> CdaeStatus {
    guard(|| {
        let cm = cm.as_mut().ok_or_else(|| null("cm"))?;
        let truth = input(truth, n, "truth")?;
        let pred = input(pred, n, "pred")?;
        cm.0.update(truth, pred)?;
        Ok(())
    })
}

/// Count of samples with true class `truth` predicted as `pred`.
///
/// # Safety
/// `cm` must come from [`cdae_confusion_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdae_confusion_get(
    cm: *const CdaeConfusion,
    truth: usize,
    pred: usize,
    out: *mut u64,
) -> CdaeStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or_else(|| null("cm"))?;
        let k = cm.0.num_classes();
        if truth >= k || pred >= k {
            return Err(invalid(format!(
                "cell ({truth}, {pred}) outside a {k}-class matrix"
            )));
        }
        *out.as_mut().ok_or_else(|| null("out"))? = cm.0.get(truth, pred);
        Ok(())
    })
}

/// Fraction of correct predictions. Fails on an empty matrix.
///
/// # Safety
/// `cm` must come from [`cdae_confusion_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdae_confusion_accuracy(
    cm: *const CdaeConfusion,
    out: *mut f64,
) -> CdaeStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or_else(|| null("cm"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = cm.0.accuracy()?;
        Ok(())
    })
}

/// Unweighted mean of per-class F1 scores.
///
/// # Safety
/// `cm` must come from [`cdae_confusion_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdae_confusion_macro_f1(
    cm: *const CdaeConfusion,
    out: *mut f64,
) -> CdaeStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or_else(|| null("cm"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = cm.0.macro_f1();
        Ok(())
    })
}

/// Releases a confusion matrix. Null is ignored.
///
/// # Safety
/// `cm` must be null or come from [`cdae_confusion_new`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdae_confusion_free(cm: *mut CdaeConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

/// Restores a model from the checkpoint at the UTF-8 path `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdae_model_load(
    path: *const c_char,
    out: *mut *mut CdaeModel,
) -> CdaeStatus {
    guard(|| {
        let slot = out.as_mut().ok_or_else(|| null("out"))?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(CdaeStatus::Io, "path is not valid UTF-8".into()))?;
        let model = load_checkpoint(Path::new(path))?.model;
        *slot = Box::into_raw(Box::new(CdaeModel(model)));
        Ok(())
    })
}

/// Number of classes of a classifier or fusion model; 0 for an autoencoder.
///
/// # Safety
/// `model` must be null or come from [`cdae_model_load`].
#[no_mangle]
pub unsafe extern "C" fn cdae_model_num_classes(model: *const CdaeModel) -> usize {
    model
        .as_ref()
        .and_then(|m| m.0.as_classifier())
        .map_or(0, |c| c.num_classes())
}

/// Predicts a class for each of `n` images laid out as
/// `[n][channels][height][width]` doubles in [0, 1].
///
/// # Safety
/// `model` must come from [`cdae_model_load`]; `pixels` must reference
/// `n * channels * height * width` doubles and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn cdae_model_predict(
    model: *const CdaeModel,
    pixels: *const f64,
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    labels: *mut usize,
) -> CdaeStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let classifier = model.0.as_classifier().ok_or_else(|| {
            Failure(
                CdaeStatus::Model,
                format!("a {} does not predict classes", model.0.kind()),
            )
        })?;
        if channels != classifier.input_channels() {
            return Err(invalid(format!(
                "model takes {} channels, got {channels}",
                classifier.input_channels()
            )));
        }
        let count = n
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| invalid("image buffer size overflows"))?;
        let data = input(pixels, count, "pixels")?.to_vec();
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::PixelOutOfRange {
                index: i,
                value: *v,
            }
            .into());
        }
        let images = ImageBatch::new(n, ImageDims::new(channels, height, width), data)?;
        let predicted = cdae::pipeline::predict(classifier, &images, 32)?;
        output(labels, n, "labels")?.copy_from_slice(&predicted);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or come from [`cdae_model_load`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdae_model_free(model: *mut CdaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

//! C ABI for the icehrnet library: checkpoint loading and inference,
//! single-image style transfer against a style bank, and streaming
//! segmentation metrics.
//!
//! Conventions:
//! - Every fallible call returns an [`IhnStatus`]; `IHN_STATUS_OK` is zero.
//!   On failure a thread-local message is retrievable with
//!   [`ihn_last_error_message`].
//! - Objects are opaque handles created by `*_load`/`*_new` and released by
//!   the matching `*_free`. `*_free` accepts null.
//! - Images are row-major interleaved RGB (`height * width * 3` bytes);
//!   masks are row-major class ids (`height * width` bytes). Pixels labeled
//!   `IHN_IGNORE_LABEL` are excluded from metrics.
//!
//! The committed C header (`include/icehrnet.h`) is generated from this file
//! with `cbindgen --crate icehrnet-ffi --output include/icehrnet.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};

use icehrnet::dataset::LabeledImage;
use icehrnet::error::Error;
use icehrnet::metrics::ConfusionMatrix;
use icehrnet::model::{load_checkpoint, CheckpointMeta, Model};
use icehrnet::styletransfer::{
    assign_classes, stylize_global, stylize_per_class, StyleBank, TransferBackend,
};

/// Pixels with this mask value are excluded from metric accumulation.
pub const IHN_IGNORE_LABEL: u8 = 255;

/// Result of every fallible API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IhnStatus {
    /// The call succeeded.
    Ok = 0,
    /// Invalid arguments, malformed files or failed IO.
    Validation = 1,
    /// Training diverged (only produced by training entry points).
    Divergence = 2,
    /// A zero-shot contract violation.
    ZeroShot = 3,
    /// A required pointer argument was null.
    NullPointer = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// Stylization modes accepted by [`ihn_stylize_image`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IhnStylizeMode {
    /// Copy the input unchanged.
    None = 0,
    /// Whole-image transfer from the bank's designated patch.
    Conventional = 1,
    /// Per-class transfer: each class region restyled from its own patch.
    Advanced = 2,
}

/// Style-transfer backends accepted by [`ihn_stylize_image`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IhnBackend {
    /// Closed-form colour-statistics matching.
    Statistical = 0,
    /// Seeded random-feature encoder with blend weight `alpha`.
    Neural = 1,
}

/// Opaque handle to a segmentation model restored from a checkpoint.
pub struct IhnModel {
    model: Model<f32>,
    meta: CheckpointMeta,
}

/// Opaque handle to a loaded style bank.
pub struct IhnStyleBank {
    bank: StyleBank,
}

/// Opaque handle to a streaming confusion matrix.
pub struct IhnConfusion {
    matrix: ConfusionMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(message: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message.into());
}

fn fail(e: &Error) -> IhnStatus {
    set_last_error(e.to_string());
    match e.exit_code() {
        2 => IhnStatus::Divergence,
        3 => IhnStatus::ZeroShot,
        _ => IhnStatus::Validation,
    }
}

fn null_arg(name: &str) -> IhnStatus {
    set_last_error(format!("argument `{name}` must not be null"));
    IhnStatus::NullPointer
}

/// Run `f` with panics converted to `IhnStatus::Panic` so unwinding never
/// crosses the C boundary.
fn guarded(f: impl FnOnce() -> IhnStatus) -> IhnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_owned());
            set_last_error(format!("internal panic: {message}"));
            IhnStatus::Panic
        }
    }
}

/// # Safety
/// `path` must be a NUL-terminated string.
unsafe fn path_arg<'a>(path: *const c_char, name: &str) -> Result<&'a Path, IhnStatus> {
    if path.is_null() {
        return Err(null_arg(name));
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_last_error(format!("argument `{name}` is not valid UTF-8"));
            Err(IhnStatus::InvalidUtf8)
        }
    }
}

/// # Safety
/// If non-null, `image` must point to `height * width * 3` readable bytes.
unsafe fn image_arg(
    image: *const u8,
    height: usize,
    width: usize,
    name: &str,
) -> Result<Array3<u8>, IhnStatus> {
    if image.is_null() {
        return Err(null_arg(name));
    }
    if height == 0 || width == 0 {
        set_last_error(format!("`{name}` dimensions must be positive"));
        return Err(IhnStatus::Validation);
    }
    let slice = std::slice::from_raw_parts(image, height * width * 3);
    Ok(Array3::from_shape_vec((height, width, 3), slice.to_vec())
        .expect("shape matches slice length"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ihn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the message of the most recent failure on this thread into `buf`
/// (truncated to `cap - 1` bytes, always NUL-terminated when `cap > 0`).
/// Returns the full message length in bytes, excluding the terminator.
///
/// # Safety
/// If non-null, `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ihn_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Restore a model from `path` (a checkpoint written by the trainer; its
/// JSON sidecar must sit next to it). On success stores the handle in
/// `*out`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ihn_model_load(
    path: *const c_char,
    out: *mut *mut IhnModel,
) -> IhnStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint::<f32>(path) {
            Ok((model, meta, _)) => {
                *out = Box::into_raw(Box::new(IhnModel { model, meta }));
                IhnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a model handle. Accepts null.
///
/// # Safety
/// `model` must be null or a pointer returned by [`ihn_model_load`] that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn ihn_model_free(model: *mut IhnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model predicts; 0 if `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ihn_model_num_classes(model: *const IhnModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().num_classes)
}

/// Training iteration recorded in the checkpoint; 0 if `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ihn_model_iteration(model: *const IhnModel) -> u64 {
    model.as_ref().map_or(0, |m| m.meta.iteration)
}

/// Segment one RGB image: writes the per-pixel class id into `out_mask`
/// (`height * width` bytes).
///
/// # Safety
/// `image` must point to `height * width * 3` readable bytes and `out_mask`
/// to `height * width` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ihn_model_predict(
    model: *const IhnModel,
    image: *const u8,
    height: usize,
    width: usize,
    out_mask: *mut u8,
) -> IhnStatus {
    guarded(|| {
        let Some(handle) = model.as_ref() else {
            return null_arg("model");
        };
        if out_mask.is_null() {
            return null_arg("out_mask");
        }
        let image = match image_arg(image, height, width, "image") {
            Ok(a) => a,
            Err(status) => return status,
        };
        match handle.model.predict(&image) {
            Ok(mask) => {
                let out = std::slice::from_raw_parts_mut(out_mask, height * width);
                for (dst, src) in out.iter_mut().zip(mask.iter()) {
                    *dst = *src;
                }
                IhnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Load a style bank JSON file (patch files are resolved relative to it).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ihn_bank_load(
    path: *const c_char,
    out: *mut *mut IhnStyleBank,
) -> IhnStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match StyleBank::load(path) {
            Ok(bank) => {
                *out = Box::into_raw(Box::new(IhnStyleBank { bank }));
                IhnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a style bank handle. Accepts null.
///
/// # Safety
/// `bank` must be null or a pointer returned by [`ihn_bank_load`] that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn ihn_bank_free(bank: *mut IhnStyleBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Number of classes covered by the bank; 0 if `bank` is null.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ihn_bank_num_classes(bank: *const IhnStyleBank) -> usize {
    bank.as_ref().map_or(0, |b| b.bank.num_classes())
}

/// Restyle one RGB image in `mode` using `bank`, writing
/// `height * width * 3` bytes to `out_image`. The mask selects the patch per
/// pixel in advanced mode (class ids must be covered by the bank); it is
/// ignored in the other modes and may be null there. `alpha` is the neural
/// backend's blend weight and is ignored by the statistical backend.
///
/// # Safety
/// `image` must point to `height * width * 3` readable bytes, `mask` (when
/// required) to `height * width` readable bytes, and `out_image` to
/// `height * width * 3` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ihn_stylize_image(
    bank: *const IhnStyleBank,
    mode: IhnStylizeMode,
    backend: IhnBackend,
    alpha: f64,
    seed: u64,
    image: *const u8,
    mask: *const u8,
    height: usize,
    width: usize,
    out_image: *mut u8,
) -> IhnStatus {
    guarded(|| {
        let Some(handle) = bank.as_ref() else {
            return null_arg("bank");
        };
        if out_image.is_null() {
            return null_arg("out_image");
        }
        let image = match image_arg(image, height, width, "image") {
            Ok(a) => a,
            Err(status) => return status,
        };
        let backend = match backend {
            IhnBackend::Statistical => TransferBackend::statistical(),
            IhnBackend::Neural => match TransferBackend::neural_seeded(seed, alpha) {
                Ok(b) => b,
                Err(e) => return fail(&e),
            },
        };
        let result = match mode {
            IhnStylizeMode::None => Ok(image.clone()),
            IhnStylizeMode::Conventional => handle
                .bank
                .conventional_patch()
                .and_then(|patch| {
                    let sample =
                        LabeledImage::new("ffi", image, Array2::zeros((height, width)))?;
                    stylize_global(&sample, patch, &backend)
                })
                .map(|s| s.sample.image),
            IhnStylizeMode::Advanced => {
                if mask.is_null() {
                    return null_arg("mask");
                }
                let mask_slice = std::slice::from_raw_parts(mask, height * width);
                let mask = Array2::from_shape_vec((height, width), mask_slice.to_vec())
                    .expect("shape matches slice length");
                let classes = handle.bank.num_classes();
                assign_classes(classes, classes, None)
                    .and_then(|assignment| {
                        let sample = LabeledImage::new("ffi", image, mask)?;
                        stylize_per_class(&sample, &handle.bank, &assignment, &backend, seed)
                    })
                    .map(|s| s.sample.image)
            }
        };
        match result {
            Ok(stylized) => {
                let out = std::slice::from_raw_parts_mut(out_image, height * width * 3);
                for (dst, src) in out.iter_mut().zip(stylized.iter()) {
                    *dst = *src;
                }
                IhnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Create an empty confusion matrix over `num_classes` classes.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ihn_confusion_new(
    num_classes: usize,
    out: *mut *mut IhnConfusion,
) -> IhnStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if num_classes == 0 || num_classes > usize::from(IHN_IGNORE_LABEL) {
            set_last_error(format!(
                "num_classes must be in 1..={}, got {num_classes}",
                IHN_IGNORE_LABEL - 1
            ));
            return IhnStatus::Validation;
        }
        *out = Box::into_raw(Box::new(IhnConfusion {
            matrix: ConfusionMatrix::new(num_classes),
        }));
        IhnStatus::Ok
    })
}

/// Release a confusion matrix handle. Accepts null.
///
/// # Safety
/// `confusion` must be null or a pointer returned by [`ihn_confusion_new`]
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn ihn_confusion_free(confusion: *mut IhnConfusion) {
    if !confusion.is_null() {
        drop(Box::from_raw(confusion));
    }
}

/// Accumulate `len` prediction/ground-truth label pairs. Ground-truth pixels
/// equal to `IHN_IGNORE_LABEL` are skipped.
///
/// # Safety
/// `pred` and `truth` must each point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn ihn_confusion_accumulate(
    confusion: *mut IhnConfusion,
    pred: *const u8,
    truth: *const u8,
    len: usize,
) -> IhnStatus {
    guarded(|| {
        let Some(handle) = confusion.as_mut() else {
            return null_arg("confusion");
        };
        if pred.is_null() {
            return null_arg("pred");
        }
        if truth.is_null() {
            return null_arg("truth");
        }
        let pred = std::slice::from_raw_parts(pred, len);
        let truth = std::slice::from_raw_parts(truth, len);
        let pred = ArrayView2::from_shape((1, len), pred).expect("shape matches slice");
        let truth = ArrayView2::from_shape((1, len), truth).expect("shape matches slice");
        match handle.matrix.accumulate(pred, truth) {
            Ok(()) => IhnStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Overall pixel accuracy of everything accumulated so far.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ihn_confusion_accuracy(
    confusion: *const IhnConfusion,
    out: *mut f64,
) -> IhnStatus {
    guarded(|| {
        let Some(handle) = confusion.as_ref() else {
            return null_arg("confusion");
        };
        if out.is_null() {
            return null_arg("out");
        }
        match handle.matrix.accuracy() {
            Ok(v) => {
                *out = v;
                IhnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Mean intersection-over-union over classes with non-zero union.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ihn_confusion_miou(
    confusion: *const IhnConfusion,
    out: *mut f64,
) -> IhnStatus {
    guarded(|| {
        let Some(handle) = confusion.as_ref() else {
            return null_arg("confusion");
        };
        if out.is_null() {
            return null_arg("out");
        }
        match handle.matrix.miou() {
            Ok(v) => {
                *out = v;
                IhnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Write per-class IoU into `out` (`num_classes` doubles). Classes with zero
/// union are reported as NaN.
///
/// # Safety
/// `out` must point to as many doubles as the matrix has classes.
#[no_mangle]
pub unsafe extern "C" fn ihn_confusion_per_class_iou(
    confusion: *const IhnConfusion,
    out: *mut f64,
) -> IhnStatus {
    guarded(|| {
        let Some(handle) = confusion.as_ref() else {
            return null_arg("confusion");
        };
        if out.is_null() {
            return null_arg("out");
        }
        let ious = handle.matrix.per_class_iou();
        let out = std::slice::from_raw_parts_mut(out, ious.len());
        for (dst, iou) in out.iter_mut().zip(ious) {
            *dst = iou.unwrap_or(f64::NAN);
        }
        IhnStatus::Ok
    })
}

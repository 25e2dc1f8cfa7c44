//! C ABI over the `consent` classifiers.
//!
//! Every function returns a [`ConsentStatus`]. On failure the message is kept
//! per thread and can be copied out with [`consent_last_error`]. Images are
//! tightly packed 8-bit RGB rows; boxes are `n` groups of `x, y, w, h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use consent::image::{BoxXywh, RgbImage};
use consent::model::{load_model, ConsentModel};
use consent::morphology::{image_profiles, vote_profiles, SigmaMode};
use consent::train::predict_image;
use consent::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsentStatus {
    Ok = 0,
    NullArgument = 1,
    /// Bad sizes, boxes outside the image, invalid parameters.
    InvalidArgument = 2,
    Io = 3,
    /// Non-finite values during inference.
    Numeric = 4,
    /// The model file is not a valid model.
    ModelFormat = 5,
    /// An internal panic was caught.
    Internal = 6,
}

/// Opaque model handle.
pub struct ConsentModelHandle {
    model: ConsentModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ConsentStatus {
    match e {
        Error::Io { .. } | Error::MissingFile(_) => ConsentStatus::Io,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => ConsentStatus::Numeric,
        Error::BadMagic | Error::UnsupportedVersion(_) | Error::Truncated(_) | Error::ModelMismatch(_) => {
            ConsentStatus::ModelFormat
        }
        _ => ConsentStatus::InvalidArgument,
    }
}

fn fail(status: ConsentStatus, msg: impl Into<String>) -> ConsentStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), (ConsentStatus, String)>) -> ConsentStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ConsentStatus::Ok
        }
        Ok(Err((s, msg))) => fail(s, msg),
        Err(_) => fail(ConsentStatus::Internal, "internal panic"),
    }
}

fn lib_err(e: Error) -> (ConsentStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ConsentStatus, String) {
    (ConsentStatus::NullArgument, format!("{what} is null"))
}

/// Copies the image and boxes out of caller memory.
///
/// # Safety
/// `rgb` must hold `3 * width * height` bytes and `boxes` `4 * n` values.
unsafe fn read_inputs(
    rgb: *const u8,
    width: u32,
    height: u32,
    boxes: *const u32,
    n: usize,
) -> Result<(RgbImage, Vec<BoxXywh>), (ConsentStatus, String)> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    if boxes.is_null() && n > 0 {
        return Err(null("boxes"));
    }
    let len = (width as usize)
        .checked_mul(height as usize)
        .and_then(|p| p.checked_mul(3))
        .ok_or((ConsentStatus::InvalidArgument, "image too large".to_string()))?;
    let data = std::slice::from_raw_parts(rgb, len).to_vec();
    let image = RgbImage::from_raw(width, height, data).map_err(lib_err)?;
    let flat = if n == 0 {
        &[][..]
    } else {
        std::slice::from_raw_parts(boxes, 4 * n)
    };
    let boxes = flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    Ok((image, boxes))
}

/// Loads a model file. On success `*out` owns a handle that must be released
/// with [`consent_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn consent_model_load(path: *const c_char, out: *mut *mut ConsentModelHandle) -> ConsentStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (ConsentStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = load_model(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(ConsentModelHandle { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`consent_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn consent_model_free(handle: *mut ConsentModelHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Classifies `n` word boxes of one image. Writes 0/1 labels to `labels_out`
/// and, when `p_bold_out` is not null, the bold probabilities.
///
/// # Safety
/// `rgb` holds `3 * width * height` bytes, `boxes` `4 * n` values, and the
/// output arrays `n` elements each.
#[no_mangle]
pub unsafe extern "C" fn consent_predict(
    handle: *const ConsentModelHandle,
    rgb: *const u8,
    width: u32,
    height: u32,
    boxes: *const u32,
    n: usize,
    labels_out: *mut u8,
    p_bold_out: *mut f64,
) -> ConsentStatus {
    guard(|| {
        if handle.is_null() {
            return Err(null("handle"));
        }
        if labels_out.is_null() && n > 0 {
            return Err(null("labels_out"));
        }
        let (image, boxes) = read_inputs(rgb, width, height, boxes, n)?;
        let preds = predict_image(&(*handle).model, &image, &boxes).map_err(lib_err)?;
        for (i, p) in preds.iter().enumerate() {
            *labels_out.add(i) = p.label;
            if !p_bold_out.is_null() {
                *p_bold_out.add(i) = p.p_bold;
            }
        }
        Ok(())
    })
}

/// Morphology voting with threshold `alpha` over the image's words.
///
/// # Safety
/// As for [`consent_predict`].
#[no_mangle]
pub unsafe extern "C" fn consent_baseline_vote(
    rgb: *const u8,
    width: u32,
    height: u32,
    boxes: *const u32,
    n: usize,
    alpha: f64,
    labels_out: *mut u8,
) -> ConsentStatus {
    guard(|| {
        if labels_out.is_null() && n > 0 {
            return Err(null("labels_out"));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err((ConsentStatus::InvalidArgument, format!("alpha {alpha} is invalid")));
        }
        let (image, boxes) = read_inputs(rgb, width, height, boxes, n)?;
        let profiles = image_profiles(&image, &boxes).map_err(lib_err)?;
        for (i, v) in vote_profiles(profiles, alpha, SigmaMode::Pooled)
            .into_iter()
            .enumerate()
        {
            *labels_out.add(i) = v;
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one, or 0 when there is no error.
///
/// # Safety
/// `buf` must be writable for `len` bytes or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn consent_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let k = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, k);
                *buf.add(k) = 0;
            }
            bytes.len() + 1
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn consent_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

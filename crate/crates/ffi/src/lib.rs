//! C ABI for loading a trained model, running inference and the label/resize
//! utilities.
//!
//! Every function returns a [`CinStatus`]. On failure a message describing
//! the error is available from [`cin_last_error`] on the same thread. Buffers
//! are caller-owned; images are planar RGB (`3 * height * width` values in
//! `[0, 1]`), masks and maps are row-major `height * width`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use cinet::config::TrainConfig;
use cinet::labels::{edge_band, BinaryMask};
use cinet::metrics::{mae, SaliencyMap};
use cinet::resample::{roundtrip_distortion, ResizeSpec};
use cinet::tensor::Tensor;
use cinet::train::AnyModel;
use cinet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CinStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Shape = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// Opaque handle to a loaded model.
pub struct CinModel {
    model: AnyModel,
    input_size: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CinStatus {
    match e {
        Error::InvalidShape(_) => CinStatus::Shape,
        Error::InvalidInput(_) | Error::Diverged(_) => CinStatus::InvalidArgument,
        Error::Config(_) => CinStatus::Config,
        Error::Checkpoint(_) => CinStatus::Checkpoint,
        Error::Io { .. } | Error::Image { .. } => CinStatus::Io,
    }
}

struct Fail(CinStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CinStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CinStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CinStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CinStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CinStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn area(height: usize, width: usize) -> Result<usize, Fail> {
    match height.checked_mul(width) {
        Some(n) if n > 0 => Ok(n),
        _ => Err(Fail(CinStatus::InvalidArgument, format!("bad size {height}x{width}"))),
    }
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cin_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint with the model configuration in `config_path`.
/// On success `*out` owns a handle to release with [`cin_model_free`].
///
/// # Safety
/// Paths must be null or NUL-terminated strings; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn cin_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut CinModel,
) -> CinStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = TrainConfig::load(&path_arg(config_path, "config_path")?)?;
        let model = AnyModel::load(&cfg, &path_arg(checkpoint_path, "checkpoint_path")?)?;
        *out = Box::into_raw(Box::new(CinModel {
            model,
            input_size: cfg.input_size,
        }));
        Ok(())
    })
}

/// Release a handle from [`cin_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cin_model_free(model: *mut CinModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length the model resizes its inputs to.
///
/// # Safety
/// `model` must be null or a live handle; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn cin_model_input_size(model: *const CinModel, out: *mut usize) -> CinStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.input_size;
        Ok(())
    })
}

/// Saliency map (`height * width` values in `[0, 1]`) for a planar RGB image.
///
/// # Safety
/// `rgb` must hold `3 * height * width` floats and `out` `height * width`.
#[no_mangle]
pub unsafe extern "C" fn cin_model_predict(
    model: *const CinModel,
    rgb: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> CinStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = area(height, width)?;
        let px = input(rgb, 3 * n, "rgb")?;
        let dst = output(out, n, "out")?;
        let data: Vec<f64> = px.iter().map(|&v| v as f64).collect();
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Fail(CinStatus::InvalidArgument, "rgb values must be in [0, 1]".into()));
        }
        let image = Tensor::new(vec![3, height, width], data)?;
        let map = m.model.predict(&[&image])?.remove(0);
        for (d, &s) in dst.iter_mut().zip(map.data()) {
            *d = s as f32;
        }
        Ok(())
    })
}

/// Split a binary mask (nonzero = foreground) into the boundary band of
/// radius `radius` and its complement. `band_out` receives 1 for band
/// pixels, 0 otherwise; the two counts are optional.
///
/// # Safety
/// `mask` and `band_out` must hold `height * width` bytes; the count
/// pointers must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn cin_edge_band(
    mask: *const u8,
    height: usize,
    width: usize,
    radius: usize,
    band_out: *mut u8,
    band_len: *mut usize,
    keep_len: *mut usize,
) -> CinStatus {
    guard(|| {
        let n = area(height, width)?;
        let src = input(mask, n, "mask")?;
        let dst = output(band_out, n, "band_out")?;
        let m = BinaryMask::new(height, width, src.iter().map(|&v| u8::from(v != 0)).collect())?;
        let part = edge_band(&m, radius);
        dst.copy_from_slice(part.band.data());
        if let Some(b) = band_len.as_mut() {
            *b = part.band_len();
        }
        if let Some(k) = keep_len.as_mut() {
            *k = part.keep_len();
        }
        Ok(())
    })
}

/// Mean absolute error of resizing `planes` planes of `height x width` down to
/// `down_h x down_w` and back.
///
/// # Safety
/// `data` must hold `planes * height * width` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cin_roundtrip_distortion(
    data: *const f64,
    planes: usize,
    height: usize,
    width: usize,
    down_h: usize,
    down_w: usize,
    out: *mut f64,
) -> CinStatus {
    guard(|| {
        let n = area(height, width)?
            .checked_mul(planes)
            .filter(|&n| n > 0)
            .ok_or_else(|| Fail(CinStatus::InvalidArgument, "planes must be positive".into()))?;
        let src = input(data, n, "data")?;
        let dst = out.as_mut().ok_or_else(|| null("out"))?;
        let t = Tensor::new(vec![planes, height, width], src.to_vec())?;
        *dst = roundtrip_distortion(&t, ResizeSpec::new(down_h, down_w)?)?;
        Ok(())
    })
}

/// Mean absolute error between a map in `[0, 1]` and a binary mask
/// (nonzero = foreground).
///
/// # Safety
/// `pred` and `gt` must hold `height * width` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cin_mae(
    pred: *const f64,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CinStatus {
    guard(|| {
        let n = area(height, width)?;
        let p = SaliencyMap::new(height, width, input(pred, n, "pred")?.to_vec())?;
        let g = BinaryMask::new(height, width, input(gt, n, "gt")?.iter().map(|&v| u8::from(v != 0)).collect())?;
        *out.as_mut().ok_or_else(|| null("out"))? = mae(&p, &g)?;
        Ok(())
    })
}

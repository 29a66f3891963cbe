//! C ABI over `mos-core`.
//!
//! Every fallible entry point returns a [`MosStatus`]. On failure a message is
//! stored per thread and can be read with [`mos_last_error_message`]. Images
//! are planar `float` buffers laid out as `3 x height x width` in `[0, 1]`;
//! masks are `height x width` bytes where nonzero marks the object.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mos_core::decouple::{self, FillMode, MaskSource, SaliencyMask};
use mos_core::eval;
use mos_core::image::Image;
use mos_core::model::{self, MosModel as CoreModel};
use mos_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MosStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numerical = 4,
    Internal = 5,
}

/// Opaque trained model.
pub struct MosModel {
    inner: CoreModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    let c = CString::new(msg).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> MosStatus {
    match err {
        Error::Io { .. } | Error::Image(_) | Error::Checkpoint(_) => MosStatus::Io,
        Error::NonFiniteLoss { .. } | Error::Degenerate(_) => MosStatus::Numerical,
        Error::Tensor(_) | Error::Json(_) => MosStatus::Internal,
        _ => MosStatus::InvalidArgument,
    }
}

struct Fail(MosStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MosStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MosStatus::InvalidArgument, msg.into())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MosStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            MosStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            MosStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn image_len(height: usize, width: usize) -> Result<usize, Fail> {
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid("image dimensions must be positive"))
}

unsafe fn read_image(p: *const f32, height: usize, width: usize, what: &str) -> Result<Image, Fail> {
    let len = image_len(height, width)?;
    let data = slice(p, len, what)?.to_vec();
    Ok(Image::from_planar(height, width, data)?)
}

/// Message for the last failed call on this thread, or null if it succeeded.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mos_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint written by the trainer. Release it with [`mos_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mos_model_load(path: *const c_char, out: *mut *mut MosModel) -> MosStatus {
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
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let inner = model::load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(MosModel { inner }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mos_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mos_model_free(model: *mut MosModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of clusters the model predicts.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mos_model_num_classes(model: *const MosModel, out: *mut usize) -> MosStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.config().num_classes;
        Ok(())
    })
}

/// Input resolution expected by the model. Other sizes are resized on the fly.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mos_model_input_size(
    model: *const MosModel,
    height: *mut usize,
    width: *mut usize,
) -> MosStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let h = height.as_mut().ok_or_else(|| null("height"))?;
        let w = width.as_mut().ok_or_else(|| null("width"))?;
        (*h, *w) = m.inner.config().backbone.input_size;
        Ok(())
    })
}

/// Predict cluster labels for `n` original images and their extracted objects.
///
/// `originals` and `objects` each hold `n` planar images back to back;
/// `labels_out` receives `n` entries.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mos_model_predict(
    model: *const MosModel,
    originals: *const f32,
    objects: *const f32,
    n: usize,
    height: usize,
    width: usize,
    labels_out: *mut usize,
) -> MosStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n == 0 {
            return Ok(());
        }
        let per = image_len(height, width)?;
        let total = per.checked_mul(n).ok_or_else(|| invalid("buffer size overflows"))?;
        let xs = slice(originals, total, "originals")?;
        let os = slice(objects, total, "objects")?;
        let out = slice_mut(labels_out, n, "labels_out")?;
        let to_images = |buf: &[f32]| -> Result<Vec<Image>, Fail> {
            buf.chunks(per)
                .map(|c| Image::from_planar(height, width, c.to_vec()).map_err(Fail::from))
                .collect()
        };
        let labels = m.inner.predict(&to_images(xs)?, &to_images(os)?, 64)?;
        out.copy_from_slice(&labels);
        Ok(())
    })
}

/// Per-channel mean pixel of an image, written to `mu_out[3]`.
///
/// # Safety
/// `image` must hold `3 * height * width` floats and `mu_out` three.
#[no_mangle]
pub unsafe extern "C" fn mos_mean_fill(
    image: *const f32,
    height: usize,
    width: usize,
    mu_out: *mut f32,
) -> MosStatus {
    guard(|| {
        let img = read_image(image, height, width, "image")?;
        let out = slice_mut(mu_out, 3, "mu_out")?;
        out.copy_from_slice(&decouple::mean_fill(&img, FillMode::PerChannel)?);
        Ok(())
    })
}

/// Keep masked pixels and replace the rest with `mu`. If `mu` is null the
/// image's own per-channel mean is used.
///
/// # Safety
/// `image` and `out` must hold `3 * height * width` floats, `mask`
/// `height * width` bytes and `mu`, when not null, three floats.
#[no_mangle]
pub unsafe extern "C" fn mos_extract_object(
    image: *const f32,
    mask: *const u8,
    height: usize,
    width: usize,
    mu: *const f32,
    out: *mut f32,
) -> MosStatus {
    guard(|| {
        let img = read_image(image, height, width, "image")?;
        let bits = slice(mask, height * width, "mask")?
            .iter()
            .map(|&b| u8::from(b != 0))
            .collect();
        let mask = SaliencyMask::new(height, width, bits, MaskSource::File)?;
        let mu = if mu.is_null() {
            decouple::mean_fill(&img, FillMode::PerChannel)?
        } else {
            let m = slice(mu, 3, "mu")?;
            [m[0], m[1], m[2]]
        };
        let obj = decouple::extract_object(&img, &mask, mu)?;
        slice_mut(out, img.as_slice().len(), "out")?.copy_from_slice(obj.as_slice());
        Ok(())
    })
}

/// Minimum-cost assignment on a row-major `k x k` cost matrix.
/// `assignment_out[i]` receives the column matched to row `i`.
///
/// # Safety
/// `cost` must hold `k * k` doubles and `assignment_out` `k` entries.
#[no_mangle]
pub unsafe extern "C" fn mos_assignment_solve(
    cost: *const f64,
    k: usize,
    assignment_out: *mut usize,
) -> MosStatus {
    guard(|| {
        if k == 0 {
            return Err(invalid("cost matrix is empty"));
        }
        let len = k.checked_mul(k).ok_or_else(|| invalid("k overflows"))?;
        let flat = slice(cost, len, "cost")?;
        let rows: Vec<Vec<f64>> = flat.chunks(k).map(<[f64]>::to_vec).collect();
        let assign = eval::assignment_solve(&rows)?;
        slice_mut(assignment_out, k, "assignment_out")?.copy_from_slice(&assign);
        Ok(())
    })
}

/// Clustering accuracy under the best one-to-one cluster/class matching.
///
/// `base_classes` lists the classes labeled during training. Accuracies
/// whose subset is empty are written as NaN.
///
/// # Safety
/// `y_true` and `y_pred` must hold `n` entries, `base_classes` `n_base`
/// entries and every output pointer must be valid.
#[no_mangle]
pub unsafe extern "C" fn mos_cluster_acc(
    y_true: *const usize,
    y_pred: *const usize,
    n: usize,
    base_classes: *const usize,
    n_base: usize,
    acc_all: *mut f64,
    acc_base: *mut f64,
    acc_novel: *mut f64,
) -> MosStatus {
    guard(|| {
        let all = acc_all.as_mut().ok_or_else(|| null("acc_all"))?;
        let base = acc_base.as_mut().ok_or_else(|| null("acc_base"))?;
        let novel = acc_novel.as_mut().ok_or_else(|| null("acc_novel"))?;
        let t = slice(y_true, n, "y_true")?;
        let p = slice(y_pred, n, "y_pred")?;
        let b: BTreeSet<usize> = slice(base_classes, n_base, "base_classes")?.iter().copied().collect();
        let report = eval::cluster_acc(t, p, &b, None)?;
        *all = report.acc_all;
        *base = report.acc_base.unwrap_or(f64::NAN);
        *novel = report.acc_novel.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Mean signed and mean per-row L1 deviation between two `n x d` row-major
/// feature matrices (`v_x - v_o`).
///
/// # Safety
/// `v_x` and `v_o` must hold `n * d` doubles; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn mos_feature_deviation(
    v_x: *const f64,
    v_o: *const f64,
    n: usize,
    d: usize,
    mean_dev: *mut f64,
    l1_dev: *mut f64,
) -> MosStatus {
    guard(|| {
        let mean = mean_dev.as_mut().ok_or_else(|| null("mean_dev"))?;
        let l1 = l1_dev.as_mut().ok_or_else(|| null("l1_dev"))?;
        if n == 0 || d == 0 {
            return Err(invalid("feature matrices are empty"));
        }
        let len = n.checked_mul(d).ok_or_else(|| invalid("n * d overflows"))?;
        let rows = |p, what| -> Result<Vec<Vec<f64>>, Fail> {
            Ok(slice(p, len, what)?.chunks(d).map(<[f64]>::to_vec).collect())
        };
        let stats = eval::feature_deviation(&rows(v_x, "v_x")?, &rows(v_o, "v_o")?, 0)?;
        *mean = stats.mean_dev;
        *l1 = stats.l1_dev;
        Ok(())
    })
}

//! C ABI for the continual learner, the random lift and feature files.
//!
//! Every fallible function returns an [`LrpStatus`]. On failure a message is
//! stored per thread and can be read with [`lrp_last_error`]. Matrices cross
//! the boundary column-major: a block of `n` samples of dimension `d` is
//! `d * n` doubles with sample `j` at `[j * d, (j + 1) * d)`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use loranpac::error::Error;
use loranpac::io::FeatureFile;
use loranpac::lift::RandomEmbedding;
use loranpac::linalg::Matrix;
use loranpac::solver::{Learner, TruncationPolicy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidInput = 3,
    Numeric = 4,
    IllConditioned = 5,
    SizeCap = 6,
    InvalidState = 7,
    Format = 8,
    Io = 9,
    Config = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Opaque continual learner.
pub struct LrpLearner {
    inner: Learner,
}

/// Opaque in-memory feature file.
pub struct LrpFeatures {
    inner: FeatureFile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> LrpStatus {
    match e {
        Error::InvalidArgument(_) => LrpStatus::InvalidArgument,
        Error::InvalidInput(_) => LrpStatus::InvalidInput,
        Error::Numeric(_) => LrpStatus::Numeric,
        Error::IllConditioned { .. } => LrpStatus::IllConditioned,
        Error::SizeCap { .. } => LrpStatus::SizeCap,
        Error::InvalidState(_) => LrpStatus::InvalidState,
        Error::Format { .. } => LrpStatus::Format,
        Error::Io(_) => LrpStatus::Io,
        Error::Config(_) | Error::Json(_) => LrpStatus::Config,
    }
}

enum Fail {
    Lib(Error),
    Status(LrpStatus, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(LrpStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LrpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LrpStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            LrpStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Status(LrpStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

fn block_len(dim: usize, n: usize) -> Result<usize, Fail> {
    dim.checked_mul(n)
        .ok_or_else(|| Fail::Status(LrpStatus::InvalidArgument, "block size overflows".into()))
}

unsafe fn learner_ref<'a>(p: *const LrpLearner) -> Result<&'a LrpLearner, Fail> {
    p.as_ref().ok_or_else(|| null("learner"))
}

unsafe fn features_ref<'a>(p: *const LrpFeatures) -> Result<&'a LrpFeatures, Fail> {
    p.as_ref().ok_or_else(|| null("features"))
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = v;
    Ok(())
}

/// Message of the last failure on this thread, or null. Valid until the next
/// call into this library from the same thread.
#[no_mangle]
pub extern "C" fn lrp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn lrp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a learner for features of dimension `dim`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_new(dim: usize, zeta: f64, r_max: usize, out: *mut *mut LrpLearner) -> LrpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = Learner::new(dim, TruncationPolicy::new(zeta, r_max)?)?;
        *out = Box::into_raw(Box::new(LrpLearner { inner }));
        Ok(())
    })
}

/// Releases a learner; null is ignored.
///
/// # Safety
/// `learner` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_free(learner: *mut LrpLearner) {
    if !learner.is_null() {
        drop(Box::from_raw(learner));
    }
}

/// Learns one task of `n` labelled samples. The learner is unchanged on failure.
/// `rank_out` may be null.
///
/// # Safety
/// `h` must hold `dim * n` doubles and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_observe(
    learner: *mut LrpLearner,
    h: *const f64,
    n: usize,
    labels: *const u32,
    rank_out: *mut usize,
) -> LrpStatus {
    guard(|| {
        let l = learner.as_mut().ok_or_else(|| null("learner"))?;
        let dim = l.inner.dim();
        let data = slice_in(h, block_len(dim, n)?, "h")?;
        let labels = slice_in(labels, n, "labels")?;
        let step = l.inner.observe_labels(&Matrix::from_column_slice(dim, n, data), labels)?;
        if !rank_out.is_null() {
            *rank_out = step.rank();
        }
        Ok(())
    })
}

/// Predicts class ids for `n` samples into `out[0..n]`.
///
/// # Safety
/// `h` must hold `dim * n` doubles and `out` room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_predict(learner: *const LrpLearner, h: *const f64, n: usize, out: *mut u32) -> LrpStatus {
    guard(|| {
        let l = learner_ref(learner)?;
        let dim = l.inner.dim();
        let data = slice_in(h, block_len(dim, n)?, "h")?;
        let dst = slice_out(out, n, "out")?;
        let pred = l.inner.classifier()?.predict_block(&Matrix::from_column_slice(dim, n, data))?;
        dst.copy_from_slice(&pred);
        Ok(())
    })
}

/// Feature dimension.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_dim(learner: *const LrpLearner, out: *mut usize) -> LrpStatus {
    guard(|| put(out, learner_ref(learner)?.inner.dim(), "out"))
}

/// Rank of the retained factors (0 before the first task).
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_rank(learner: *const LrpLearner, out: *mut usize) -> LrpStatus {
    guard(|| {
        let r = learner_ref(learner)?.inner.state().map_or(0, |s| s.rank());
        put(out, r, "out")
    })
}

/// Tasks observed so far.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_tasks(learner: *const LrpLearner, out: *mut usize) -> LrpStatus {
    guard(|| put(out, learner_ref(learner)?.inner.tasks_seen(), "out"))
}

/// Samples observed so far.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_samples(learner: *const LrpLearner, out: *mut usize) -> LrpStatus {
    guard(|| put(out, learner_ref(learner)?.inner.samples_seen(), "out"))
}

/// Class ids in weight-row order. Writes the count to `count`; copies the ids
/// when `ids` is non-null and `cap` is large enough, else returns `BufferTooSmall`.
///
/// # Safety
/// `ids` must have room for `cap` values when non-null; `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_classes(learner: *const LrpLearner, ids: *mut u32, cap: usize, count: *mut usize) -> LrpStatus {
    guard(|| {
        let c = learner_ref(learner)?.inner.class_ids();
        put(count, c.len(), "count")?;
        if ids.is_null() {
            return Ok(());
        }
        if cap < c.len() {
            return Err(Fail::Status(
                LrpStatus::BufferTooSmall,
                format!("{} class ids do not fit in {cap}", c.len()),
            ));
        }
        slice_out(ids, c.len(), "ids")?.copy_from_slice(&c);
        Ok(())
    })
}

/// Classifier weights, `rows = classes`, `cols = dim`, column-major. Writes the
/// shape; copies the values when `out` is non-null and `cap >= rows * cols`.
///
/// # Safety
/// `out` must have room for `cap` doubles when non-null; `rows`, `cols` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_weights(
    learner: *const LrpLearner,
    out: *mut f64,
    cap: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> LrpStatus {
    guard(|| {
        let w = learner_ref(learner)?.inner.classifier()?;
        let m = w.matrix();
        put(rows, m.nrows(), "rows")?;
        put(cols, m.ncols(), "cols")?;
        if out.is_null() {
            return Ok(());
        }
        if cap < m.len() {
            return Err(Fail::Status(
                LrpStatus::BufferTooSmall,
                format!("{} weights do not fit in {cap}", m.len()),
            ));
        }
        slice_out(out, m.len(), "out")?.copy_from_slice(m.as_slice());
        Ok(())
    })
}

/// Writes a checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_save(learner: *const LrpLearner, path: *const c_char) -> LrpStatus {
    guard(|| {
        let l = learner_ref(learner)?;
        l.inner.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Restores a learner from a checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrp_learner_load(path: *const c_char, out: *mut *mut LrpLearner) -> LrpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = Learner::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(LrpLearner { inner }));
        Ok(())
    })
}

/// `relu(P x)` for `n` samples with `P` (`out_dim x in_dim`) drawn from `seed`.
///
/// # Safety
/// `x` must hold `in_dim * n` doubles and `out` room for `out_dim * n`.
#[no_mangle]
pub unsafe extern "C" fn lrp_lift(
    in_dim: usize,
    out_dim: usize,
    seed: u64,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> LrpStatus {
    guard(|| {
        let emb = RandomEmbedding::new(in_dim, out_dim, seed)?;
        let src = slice_in(x, block_len(in_dim, n)?, "x")?;
        let dst = slice_out(out, block_len(out_dim, n)?, "out")?;
        let h = emb.lift(&Matrix::from_column_slice(in_dim, n, src))?;
        dst.copy_from_slice(h.as_slice());
        Ok(())
    })
}

/// Reads a feature file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrp_features_read(path: *const c_char, out: *mut *mut LrpFeatures) -> LrpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = FeatureFile::read(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(LrpFeatures { inner }));
        Ok(())
    })
}

/// Writes `n` samples of dimension `dim` as a feature file.
///
/// # Safety
/// `data` must hold `dim * n` doubles, `labels` `n` values, `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lrp_features_write(
    path: *const c_char,
    dim: usize,
    n: usize,
    data: *const f64,
    labels: *const u32,
) -> LrpStatus {
    guard(|| {
        let p = path_arg(path)?;
        let src = slice_in(data, block_len(dim, n)?, "data")?;
        let lab = slice_in(labels, n, "labels")?;
        FeatureFile::new(Matrix::from_column_slice(dim, n, src), lab.to_vec())?.write(p)?;
        Ok(())
    })
}

/// Releases a feature file; null is ignored.
///
/// # Safety
/// `features` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lrp_features_free(features: *mut LrpFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Dimension and sample count.
///
/// # Safety
/// `dim` and `n` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lrp_features_shape(features: *const LrpFeatures, dim: *mut usize, n: *mut usize) -> LrpStatus {
    guard(|| {
        let f = features_ref(features)?;
        put(dim, f.inner.dim(), "dim")?;
        put(n, f.inner.len(), "n")
    })
}

/// Borrowed column-major values (`dim * n`) valid while `features` lives;
/// null when empty or on error.
///
/// # Safety
/// `features` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrp_features_data(features: *const LrpFeatures) -> *const f64 {
    match features.as_ref() {
        Some(f) if !f.inner.is_empty() => f.inner.features.as_slice().as_ptr(),
        _ => ptr::null(),
    }
}

/// Borrowed labels (`n`) valid while `features` lives; null when empty.
///
/// # Safety
/// `features` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrp_features_labels(features: *const LrpFeatures) -> *const u32 {
    match features.as_ref() {
        Some(f) if !f.inner.is_empty() => f.inner.labels.as_ptr(),
        _ => ptr::null(),
    }
}

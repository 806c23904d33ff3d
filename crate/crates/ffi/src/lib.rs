//! C ABI over merge-surgeon.
//!
//! Parameter sets cross the boundary as opaque `MsParamSet` handles. Every
//! fallible call returns an `MsStatus`; on failure `ms_last_error` returns a
//! message for the calling thread, valid until that thread's next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use merge_surgeon::bias::{representation_bias, LossKind};
use merge_surgeon::checkpoint::{load_paramset, save_paramset};
use merge_surgeon::merge::{task_arithmetic, ties_merge, weight_average};
use merge_surgeon::{l1_mean_distance, Error, ParamSet, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    /// Bad magic, truncated file, malformed header or non-finite value.
    Format = 5,
    UnknownAlgorithm = 6,
    /// Missing tensor, head or adapter.
    Missing = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

/// Representation distance used by `ms_representation_bias`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsLoss {
    L1 = 0,
    Mse = 1,
    NegCosine = 2,
}

/// Opaque named-tensor set.
pub struct MsParamSet {
    inner: ParamSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> MsStatus {
    match err {
        Error::ShapeMismatch(_) => MsStatus::ShapeMismatch,
        Error::BadMagic | Error::Truncated(_) | Error::NonFinite(_) | Error::MalformedHeader(_) => MsStatus::Format,
        Error::Io(_) => MsStatus::Io,
        Error::UnknownAlgorithm(_) => MsStatus::UnknownAlgorithm,
        Error::MissingParam(_) | Error::MissingHead(_) | Error::MissingAdapter { .. } => MsStatus::Missing,
        Error::InvalidArgument(_) | Error::EmptyDataset | Error::Config(_) => MsStatus::InvalidArgument,
        Error::Csv(_) | Error::NonFiniteLoss(_) => MsStatus::Other,
    }
}

enum Failure {
    Status(MsStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn fail(status: MsStatus, msg: impl Into<String>) -> Failure {
    Failure::Status(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_last_error(&msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("panic inside merge-surgeon");
            MsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(MsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(MsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a>(p: *const MsParamSet, what: &str) -> Result<&'a ParamSet, Failure> {
    p.as_ref().map(|h| &h.inner).ok_or_else(|| fail(MsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handles<'a>(p: *const *const MsParamSet, n: usize) -> Result<Vec<&'a ParamSet>, Failure> {
    if p.is_null() {
        return Err(fail(MsStatus::NullPointer, "experts is null"));
    }
    slice::from_raw_parts(p, n).iter().enumerate().map(|(i, &h)| handle(h, &format!("experts[{i}]"))).collect()
}

unsafe fn floats<'a>(p: *const f32, n: usize, what: &str) -> Result<&'a [f32], Failure> {
    if p.is_null() {
        return Err(fail(MsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn emit(out: *mut *mut MsParamSet, p: ParamSet) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(MsStatus::NullPointer, "out is null"));
    }
    *out = Box::into_raw(Box::new(MsParamSet { inner: p }));
    Ok(())
}

/// Message of the calling thread's last failure; empty if none.
#[no_mangle]
pub extern "C" fn ms_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ms_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New empty set; release with `ms_paramset_free`.
#[no_mangle]
pub extern "C" fn ms_paramset_new() -> *mut MsParamSet {
    Box::into_raw(Box::new(MsParamSet { inner: ParamSet::new() }))
}

/// # Safety
/// `ps` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn ms_paramset_free(ps: *mut MsParamSet) {
    if !ps.is_null() {
        drop(Box::from_raw(ps));
    }
}

/// Number of tensors; 0 for a null handle.
///
/// # Safety
/// `ps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_paramset_len(ps: *const MsParamSet) -> usize {
    ps.as_ref().map_or(0, |h| h.inner.len())
}

/// Reads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_paramset_load(path: *const c_char, out: *mut *mut MsParamSet) -> MsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        emit(out, load_paramset(path)?)
    })
}

/// # Safety
/// `ps` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_paramset_save(ps: *const MsParamSet, path: *const c_char) -> MsStatus {
    guard(|| {
        let p = handle(ps, "ps")?;
        save_paramset(p, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Copies a row-major tensor into the set, replacing any tensor of that name.
///
/// # Safety
/// `dims` must point to `ndims` values and `data` to their product of floats.
#[no_mangle]
pub unsafe extern "C" fn ms_paramset_set(
    ps: *mut MsParamSet,
    name: *const c_char,
    dims: *const usize,
    ndims: usize,
    data: *const f32,
) -> MsStatus {
    guard(|| {
        let h = ps.as_mut().ok_or_else(|| fail(MsStatus::NullPointer, "ps is null"))?;
        let name = str_arg(name, "name")?;
        if dims.is_null() || ndims == 0 {
            return Err(fail(MsStatus::InvalidArgument, "dims must be non-empty"));
        }
        let shape = slice::from_raw_parts(dims, ndims).to_vec();
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| fail(MsStatus::InvalidArgument, "tensor size overflows"))?;
        let values = floats(data, n, "data")?.to_vec();
        h.inner.set(name, Tensor::new(shape, values)?);
        Ok(())
    })
}

/// Copies tensor `name` into `out` (capacity `cap` floats) and stores its
/// element count in `*len`. With `out` null only the count is reported.
///
/// # Safety
/// `out` must be null or hold `cap` floats; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_paramset_get(
    ps: *const MsParamSet,
    name: *const c_char,
    out: *mut f32,
    cap: usize,
    len: *mut usize,
) -> MsStatus {
    guard(|| {
        let p = handle(ps, "ps")?;
        let t = p.require(str_arg(name, "name")?)?;
        if len.is_null() {
            return Err(fail(MsStatus::NullPointer, "len is null"));
        }
        *len = t.len();
        if out.is_null() {
            return Ok(());
        }
        if cap < t.len() {
            return Err(fail(MsStatus::BufferTooSmall, format!("need {} floats, have {cap}", t.len())));
        }
        ptr::copy_nonoverlapping(t.data().as_ptr(), out, t.len());
        Ok(())
    })
}

/// Mean of `n` expert backbones.
///
/// # Safety
/// `experts` must point to `n` live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_merge_weight_average(
    experts: *const *const MsParamSet,
    n: usize,
    out: *mut *mut MsParamSet,
) -> MsStatus {
    guard(|| emit(out, weight_average(&handles(experts, n)?)?))
}

/// `pretrained + lambda * sum(expert - pretrained)` over backbone tensors.
///
/// # Safety
/// As `ms_merge_weight_average`; `pretrained` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_merge_task_arithmetic(
    pretrained: *const MsParamSet,
    experts: *const *const MsParamSet,
    n: usize,
    lambda: f64,
    out: *mut *mut MsParamSet,
) -> MsStatus {
    guard(|| emit(out, task_arithmetic(handle(pretrained, "pretrained")?, &handles(experts, n)?, lambda)?))
}

/// Trim, elect sign, disjoint mean; `keep` in (0, 1].
///
/// # Safety
/// As `ms_merge_task_arithmetic`.
#[no_mangle]
pub unsafe extern "C" fn ms_merge_ties(
    pretrained: *const MsParamSet,
    experts: *const *const MsParamSet,
    n: usize,
    lambda: f64,
    keep: f64,
    out: *mut *mut MsParamSet,
) -> MsStatus {
    guard(|| emit(out, ties_merge(handle(pretrained, "pretrained")?, &handles(experts, n)?, lambda, keep)?))
}

/// Mean absolute difference of two equal-length buffers.
///
/// # Safety
/// `a` and `b` must each hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_l1_mean_distance(a: *const f32, b: *const f32, len: usize, out: *mut f64) -> MsStatus {
    guard(|| {
        if len == 0 {
            return Err(fail(MsStatus::InvalidArgument, "len must be positive"));
        }
        let a = Tensor::new(vec![len], floats(a, len, "a")?.to_vec())?;
        let b = Tensor::new(vec![len], floats(b, len, "b")?.to_vec())?;
        let v = l1_mean_distance(&a, &b)?;
        *out.as_mut().ok_or_else(|| fail(MsStatus::NullPointer, "out is null"))? = v;
        Ok(())
    })
}

/// Bias between two `rows x cols` row-major representations (features as
/// rows, samples as columns).
///
/// # Safety
/// `z_merged` and `z_expert` must each hold `rows * cols` floats.
#[no_mangle]
pub unsafe extern "C" fn ms_representation_bias(
    z_merged: *const f32,
    z_expert: *const f32,
    rows: usize,
    cols: usize,
    psi: MsLoss,
    out: *mut f64,
) -> MsStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| fail(MsStatus::InvalidArgument, "size overflows"))?;
        let a = Tensor::new(vec![rows, cols], floats(z_merged, n, "z_merged")?.to_vec())?;
        let b = Tensor::new(vec![rows, cols], floats(z_expert, n, "z_expert")?.to_vec())?;
        let kind = match psi {
            MsLoss::L1 => LossKind::L1,
            MsLoss::Mse => LossKind::Mse,
            MsLoss::NegCosine => LossKind::NegCosine,
        };
        let v = representation_bias(&a, &b, kind)?;
        *out.as_mut().ok_or_else(|| fail(MsStatus::NullPointer, "out is null"))? = v;
        Ok(())
    })
}

//! C ABI over the `iclprobe` toolkit.
//!
//! Every fallible function returns an [`IclStatus`]; on failure the message is
//! available from [`icl_last_error_message`] on the same thread. Handles are
//! opaque, created by `*_load` / `*_build` and released by the matching
//! `*_free`. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use iclprobe::harness::run::load_toy_model;
use iclprobe::model::{CaptureSpec, Model};
use iclprobe::retrievers::{Bm25Index, Bm25Params};
use iclprobe::tensor_io::{load_store, TensorStore};
use iclprobe::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    /// Malformed container, JSON or config.
    Parse = 4,
    MissingTensor = 5,
    ShapeMismatch = 6,
    OutOfRange = 7,
    /// Zero vectors, constant sequences and other undefined results.
    Numeric = 8,
    InvalidArgument = 9,
    BufferTooSmall = 10,
    /// A Rust panic was caught at the boundary.
    Internal = 11,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IclStatus {
    match e {
        Error::Io { .. } => IclStatus::Io,
        Error::MalformedHeader(_)
        | Error::UnknownDtype { .. }
        | Error::OverlappingRanges { .. }
        | Error::TruncatedPayload { .. }
        | Error::ByteLengthMismatch { .. }
        | Error::InvalidConfig(_)
        | Error::Json(_)
        | Error::Csv(_) => IclStatus::Parse,
        Error::MissingTensor(_) => IclStatus::MissingTensor,
        Error::ShapeMismatch { .. } | Error::DimensionMismatch { .. } | Error::LengthMismatch { .. } => {
            IclStatus::ShapeMismatch
        }
        Error::TokenOutOfRange { .. } | Error::SequenceLength { .. } | Error::IndexOutOfRange { .. } => {
            IclStatus::OutOfRange
        }
        Error::ZeroVector(_)
        | Error::ConstantSequence(_)
        | Error::SingularSystem { .. }
        | Error::SingleClass { .. } => IclStatus::Numeric,
        _ => IclStatus::InvalidArgument,
    }
}

struct Fail(IclStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic for [`icl_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IclStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside iclprobe".into());
            IclStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(IclStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(IclStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn rows(data: &[f64], k: usize, dim: usize) -> Result<Vec<&[f64]>, Fail> {
    if dim == 0 || data.len() != k * dim {
        return Err(Fail(
            IclStatus::ShapeMismatch,
            format!("expected {k} x {dim} values, got {}", data.len()),
        ));
    }
    Ok(data.chunks_exact(dim).collect())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn icl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static, nul-terminated version string.
#[no_mangle]
pub extern "C" fn icl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- metrics ----

/// Mean cosine between `query` (length `dim`) and each row of `labels`
/// (row-major, `k x dim`).
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn icl_affinity(
    query: *const f64,
    labels: *const f64,
    k: usize,
    dim: usize,
    out: *mut f64,
) -> IclStatus {
    guard(|| {
        let q = slice_arg(query, dim, "query")?;
        let l = rows(slice_arg(labels, k * dim, "labels")?, k, dim)?;
        *out_arg(out, "out")? = iclprobe::metrics::affinity(q, &l)?;
        Ok(())
    })
}

/// Trace of the population covariance of the `k x dim` rows, divided by `k`.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn icl_diversity(labels: *const f64, k: usize, dim: usize, out: *mut f64) -> IclStatus {
    guard(|| {
        let l = rows(slice_arg(labels, k * dim, "labels")?, k, dim)?;
        *out_arg(out, "out")? = iclprobe::metrics::diversity(&l)?;
        Ok(())
    })
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// `xs` and `ys` must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn icl_spearman(xs: *const f64, ys: *const f64, n: usize, out: *mut f64) -> IclStatus {
    guard(|| {
        let x = slice_arg(xs, n, "xs")?;
        let y = slice_arg(ys, n, "ys")?;
        *out_arg(out, "out")? = iclprobe::stats::spearman(x, y)?;
        Ok(())
    })
}

// ---- tensor store ----

pub struct IclTensorStore(TensorStore);

/// # Safety
/// `path` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn icl_store_load(path: *const c_char, out: *mut *mut IclTensorStore) -> IclStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let store = load_store(path)?;
        *out = Box::into_raw(Box::new(IclTensorStore(store)));
        Ok(())
    })
}

/// Element count of tensor `name`.
///
/// # Safety
/// `store` must come from [`icl_store_load`].
#[no_mangle]
pub unsafe extern "C" fn icl_store_numel(
    store: *const IclTensorStore,
    name: *const c_char,
    out: *mut usize,
) -> IclStatus {
    guard(|| {
        let store = handle(store, "store")?;
        let name = str_arg(name, "name")?;
        let info = store
            .0
            .info(name)
            .ok_or_else(|| Fail::from(Error::MissingTensor(name.to_string())))?;
        *out_arg(out, "out")? = info.numel();
        Ok(())
    })
}

/// Copies tensor `name`, widened to `f32`, into `buf` (capacity `len`).
///
/// # Safety
/// `buf` must be writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn icl_store_read_f32(
    store: *const IclTensorStore,
    name: *const c_char,
    buf: *mut f32,
    len: usize,
) -> IclStatus {
    guard(|| {
        let store = handle(store, "store")?;
        let t = store.0.get(str_arg(name, "name")?)?;
        copy_out(&t.data, buf, len)
    })
}

/// # Safety
/// `store` must come from [`icl_store_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn icl_store_free(store: *mut IclTensorStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

unsafe fn copy_out(data: &[f32], buf: *mut f32, len: usize) -> Result<(), Fail> {
    if len < data.len() {
        return Err(Fail(
            IclStatus::BufferTooSmall,
            format!("buffer holds {len} values, need {}", data.len()),
        ));
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    Ok(())
}

// ---- toy model ----

pub struct IclModel(Model);

/// Loads weights from a tensor container and the matching config JSON.
///
/// # Safety
/// Paths must be nul-terminated strings; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn icl_model_load(
    weights_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut IclModel,
) -> IclStatus {
    guard(|| {
        let weights = PathBuf::from(str_arg(weights_path, "weights_path")?);
        let config = PathBuf::from(str_arg(config_path, "config_path")?);
        let out = out_arg(out, "out")?;
        let model = load_toy_model(&weights, &config)?;
        *out = Box::into_raw(Box::new(IclModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`icl_model_load`].
#[no_mangle]
pub unsafe extern "C" fn icl_model_vocab_size(model: *const IclModel, out: *mut usize) -> IclStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(model, "model")?.0.config().vocab_size;
        Ok(())
    })
}

/// Final-position logits (`vocab_size` floats) for `tokens`.
///
/// # Safety
/// `tokens` must hold `n_tokens` ids; `logits` must be writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn icl_model_last_logits(
    model: *const IclModel,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f32,
    len: usize,
) -> IclStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let tokens = slice_arg(tokens, n_tokens, "tokens")?;
        let out = model.0.forward(tokens, &CaptureSpec::none())?;
        copy_out(out.last_logits(), logits, len)
    })
}

/// # Safety
/// `model` must come from [`icl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn icl_model_free(model: *mut IclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- BM25 ----

pub struct IclBm25(Bm25Index);

/// Indexes `n_docs` nul-terminated documents.
///
/// # Safety
/// `docs` must point to `n_docs` valid strings.
#[no_mangle]
pub unsafe extern "C" fn icl_bm25_build(
    docs: *const *const c_char,
    n_docs: usize,
    k1: f64,
    b: f64,
    out: *mut *mut IclBm25,
) -> IclStatus {
    guard(|| {
        let ptrs = slice_arg(docs, n_docs, "docs")?;
        let corpus = ptrs
            .iter()
            .enumerate()
            .map(|(i, &p)| str_arg(p, &format!("docs[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let out = out_arg(out, "out")?;
        let index = Bm25Index::build(&corpus, Bm25Params { k1, b })?;
        *out = Box::into_raw(Box::new(IclBm25(index)));
        Ok(())
    })
}

/// # Safety
/// `index` must come from [`icl_bm25_build`]; `query` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn icl_bm25_score(
    index: *const IclBm25,
    query: *const c_char,
    doc: usize,
    out: *mut f64,
) -> IclStatus {
    guard(|| {
        let index = handle(index, "index")?;
        *out_arg(out, "out")? = index.0.score(str_arg(query, "query")?, doc)?;
        Ok(())
    })
}

/// # Safety
/// `index` must come from [`icl_bm25_build`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn icl_bm25_free(index: *mut IclBm25) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

//! C ABI over `fofe-ner`: load a trained model, tag tokenized sentences and
//! run the FOFE encoder and decoder.
//!
//! Every fallible function returns an [`FnerStatus`]. On failure the message
//! is kept per thread and read with [`fner_last_error`]. Handles are opaque
//! and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fofe_ner::error::Error;
use fofe_ner::features::Sentence;
use fofe_ner::fofe::{self, ForgettingFactor};
use fofe_ner::model::NerModel;
use fofe_ner::model_io;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FnerStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    ModelFormat = 4,
    InvalidArgument = 5,
    MalformedCode = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// A loaded model.
pub struct FnerModel {
    model: NerModel,
    label_names: Vec<CString>,
}

/// Entities found in one sentence.
pub struct FnerSpans {
    spans: Vec<FnerSpan>,
}

/// One entity: tokens `[start, end)`, an index into the model's labels and
/// the probability of that label.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FnerSpan {
    pub start: usize,
    pub end: usize,
    pub label: usize,
    pub probability: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("NUL bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: FnerStatus, message: impl Into<String>) -> FnerStatus {
    set_error(message.into());
    status
}

fn status_of(error: &Error) -> FnerStatus {
    match error {
        Error::Io { .. } | Error::IoPlain(_) => FnerStatus::Io,
        Error::ModelFormat(_) => FnerStatus::ModelFormat,
        Error::MalformedCode(_) => FnerStatus::MalformedCode,
        _ => FnerStatus::InvalidArgument,
    }
}

/// Runs `body`, converting errors and panics into status codes.
fn guarded<F: FnOnce() -> Result<(), FnerStatus>>(body: F) -> FnerStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FnerStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(FnerStatus::Internal, "internal panic"),
    }
}

fn lib<T>(result: fofe_ner::Result<T>) -> Result<T, FnerStatus> {
    result.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), FnerStatus> {
    if p.is_null() {
        Err(fail(FnerStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, FnerStatus> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FnerStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], FnerStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn alpha_arg(alpha: f64) -> Result<ForgettingFactor, FnerStatus> {
    lib(ForgettingFactor::new(alpha))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fner_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a NUL-terminated string with static lifetime.
#[no_mangle]
pub extern "C" fn fner_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fner_model_load(path: *const c_char, out: *mut *mut FnerModel) -> FnerStatus {
    guarded(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let model = lib(model_io::load_model(Path::new(path)))?;
        let label_names = model
            .labels
            .names()
            .iter()
            .map(|n| CString::new(n.as_str()).map_err(|_| fail(FnerStatus::ModelFormat, "label contains NUL")))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(FnerModel { model, label_names }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`fner_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fner_model_free(model: *mut FnerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of labels, the trailing `NONE` class included; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fner_model_label_count(model: *const FnerModel) -> usize {
    model.as_ref().map_or(0, |m| m.label_names.len())
}

/// Name of label `index`, or null when out of range. Owned by the model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fner_model_label_name(model: *const FnerModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.label_names.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Decoding threshold the model was saved with.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fner_model_threshold(model: *const FnerModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.model.threshold)
}

/// Overrides the decoding threshold; must lie in `[0, 1]`.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fner_model_set_threshold(model: *mut FnerModel, threshold: f64) -> FnerStatus {
    guarded(|| {
        non_null(model, "model")?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(fail(FnerStatus::InvalidArgument, "threshold must lie in [0, 1]"));
        }
        (*model).model.threshold = threshold;
        Ok(())
    })
}

/// Tags one tokenized sentence. On success `*out` holds the entities in
/// textual order; release it with [`fner_spans_free`].
///
/// # Safety
/// `tokens` must point to `n_tokens` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fner_tag(
    model: *const FnerModel,
    tokens: *const *const c_char,
    n_tokens: usize,
    out: *mut *mut FnerSpans,
) -> FnerStatus {
    guarded(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(model, "model")?;
        let model = &(*model).model;
        let words = slice_arg(tokens, n_tokens, "tokens")?
            .iter()
            .map(|&t| str_arg(t, "token"))
            .collect::<Result<Vec<_>, _>>()?;
        let sentence = Sentence::new(words);
        let entities = lib(model.tag(std::slice::from_ref(&sentence)))?;
        let spans = entities
            .iter()
            .map(|e| FnerSpan {
                start: e.span.start,
                end: e.span.end,
                label: model.labels.index_of(&e.span.class).expect("decoded class is a model label"),
                probability: e.probability,
            })
            .collect();
        *out = Box::into_raw(Box::new(FnerSpans { spans }));
        Ok(())
    })
}

/// Number of entities; 0 for null.
///
/// # Safety
/// `spans` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fner_spans_len(spans: *const FnerSpans) -> usize {
    spans.as_ref().map_or(0, |s| s.spans.len())
}

/// Copies entity `index` into `*out`.
///
/// # Safety
/// `spans` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fner_spans_get(spans: *const FnerSpans, index: usize, out: *mut FnerSpan) -> FnerStatus {
    guarded(|| {
        non_null(spans, "spans")?;
        non_null(out, "out")?;
        let spans = &*spans;
        let s = spans.spans.get(index).ok_or_else(|| {
            fail(FnerStatus::InvalidArgument, format!("span index {index} out of range"))
        })?;
        *out = *s;
        Ok(())
    })
}

/// Releases a span list. Null is ignored.
///
/// # Safety
/// `spans` must come from [`fner_tag`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fner_spans_free(spans: *mut FnerSpans) {
    if !spans.is_null() {
        drop(Box::from_raw(spans));
    }
}

/// Writes the `vocab_size`-dimensional code of an index sequence to `out`,
/// right to left when `reverse` is set.
///
/// # Safety
/// `indices` must point to `n` values and `out` to `vocab_size` doubles.
#[no_mangle]
pub unsafe extern "C" fn fner_fofe_encode(
    alpha: f64,
    vocab_size: usize,
    indices: *const usize,
    n: usize,
    reverse: bool,
    out: *mut f64,
) -> FnerStatus {
    guarded(|| {
        let alpha = alpha_arg(alpha)?;
        let mut seq = slice_arg(indices, n, "indices")?.to_vec();
        if reverse {
            seq.reverse();
        }
        let code = lib(fofe::encode_indices(&seq, vocab_size, alpha))?;
        if vocab_size > 0 {
            non_null(out, "out")?;
            std::slice::from_raw_parts_mut(out, vocab_size).copy_from_slice(&code.values);
        }
        Ok(())
    })
}

/// Recovers the index sequence of a code (`alpha <= 0.5`). `*out_len`
/// receives the sequence length; when it exceeds `capacity` nothing is
/// written to `out` and [`FnerStatus::BufferTooSmall`] is returned.
///
/// # Safety
/// `values` must point to `n_values` doubles, `out` to `capacity` slots.
#[no_mangle]
pub unsafe extern "C" fn fner_fofe_decode(
    alpha: f64,
    values: *const f64,
    n_values: usize,
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> FnerStatus {
    guarded(|| {
        non_null(out_len, "out_len")?;
        let alpha = alpha_arg(alpha)?;
        let seq = lib(fofe::decode_indices(slice_arg(values, n_values, "values")?, alpha))?;
        *out_len = seq.len();
        if seq.len() > capacity {
            return Err(fail(
                FnerStatus::BufferTooSmall,
                format!("sequence has {} tokens, buffer holds {capacity}", seq.len()),
            ));
        }
        if !seq.is_empty() {
            non_null(out, "out")?;
            std::slice::from_raw_parts_mut(out, seq.len()).copy_from_slice(&seq);
        }
        Ok(())
    })
}

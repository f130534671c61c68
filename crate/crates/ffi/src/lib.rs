//! C interface: load a classifier checkpoint and classify token-id sequences.
//!
//! Every call returns one of the `SEQPT_*` status codes. After a non-zero
//! code, `seqpt_last_error` describes the failure on the calling thread.
//! Handles come from `seqpt_model_load` and go back through `seqpt_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use seqpt::checkpoint;
use seqpt::lstmcore::LstmConfig;
use seqpt::models::{predict_class, Example, InputKind, Params, ModelSpec};
use seqpt::Error;

pub const SEQPT_OK: i32 = 0;
/// A required pointer argument was null.
pub const SEQPT_ERR_NULL: i32 = 1;
/// A string argument was not UTF-8.
pub const SEQPT_ERR_UTF8: i32 = 2;
pub const SEQPT_ERR_IO: i32 = 3;
/// Corrupt, truncated or incompatible checkpoint.
pub const SEQPT_ERR_FORMAT: i32 = 4;
/// The request does not fit the model (no classifier head, bad token id, empty input).
pub const SEQPT_ERR_INVALID: i32 = 5;
/// Internal failure; the message has details.
pub const SEQPT_ERR_INTERNAL: i32 = 6;

/// Opaque model handle.
pub struct SeqptModel {
    params: Params,
    spec: ModelSpec,
    lstm: LstmConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_for(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => SEQPT_ERR_IO,
        Error::Format(_)
        | Error::Version { .. }
        | Error::Checksum { .. }
        | Error::Length(_)
        | Error::TensorShape { .. }
        | Error::UnknownTensor { .. } => SEQPT_ERR_FORMAT,
        Error::Contract(_) | Error::Index { .. } | Error::Shape { .. } | Error::Config(_) => SEQPT_ERR_INVALID,
        _ => SEQPT_ERR_INTERNAL,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (i32, String)>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SEQPT_OK,
        Ok(Err((code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("panic inside seqpt");
            SEQPT_ERR_INTERNAL
        }
    }
}

fn lib_err(e: Error) -> (i32, String) {
    (code_for(&e), e.to_string())
}

fn null(what: &str) -> (i32, String) {
    (SEQPT_ERR_NULL, format!("{what} is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn seqpt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread ("" if none). Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn seqpt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn seqpt_model_load(path: *const c_char, out: *mut *mut SeqptModel) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| (SEQPT_ERR_UTF8, format!("path: {e}")))?;
        let ck = checkpoint::load(Path::new(path)).map_err(lib_err)?;
        let model = SeqptModel {
            spec: ck.meta.spec.clone(),
            params: ck.params,
            lstm: LstmConfig::default(),
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `seqpt_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn seqpt_model_free(model: *mut SeqptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes (0 for models without a classifier head).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn seqpt_model_num_classes(model: *const SeqptModel) -> usize {
    model.as_ref().map_or(0, |m| if m.params.head.is_some() { m.spec.num_classes } else { 0 })
}

/// Vocabulary size including the special tokens (0 for row models).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn seqpt_model_vocab_size(model: *const SeqptModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.vocab_size)
}

/// Predicted class of one encoded document (`ids[0..len]`, normally ending in EOS).
///
/// # Safety
/// `model` must be a live handle, `ids` must point to `len` values and
/// `out_class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn seqpt_model_classify(
    model: *const SeqptModel,
    ids: *const u32,
    len: usize,
    out_class: *mut usize,
) -> i32 {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_class.is_null() {
            return Err(null("out_class"));
        }
        if ids.is_null() {
            return Err(null("ids"));
        }
        if len == 0 {
            return Err((SEQPT_ERR_INVALID, "empty document".into()));
        }
        if m.spec.level == InputKind::Real {
            return Err((SEQPT_ERR_INVALID, "model reads real-valued rows, not token ids".into()));
        }
        let ids = std::slice::from_raw_parts(ids, len).to_vec();
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= m.spec.vocab_size) {
            return Err((
                SEQPT_ERR_INVALID,
                format!("token id {bad} outside vocabulary of {}", m.spec.vocab_size),
            ));
        }
        let ex = Example::Tokens { ids, label: None };
        *out_class = predict_class(&m.params, &ex, &m.lstm).map_err(lib_err)?;
        Ok(())
    })
}

//! C interface to keyword-constrained generation.
//!
//! Models are opaque handles. Every fallible call returns a [`CbartStatus`];
//! on failure a message is kept per thread and can be read with
//! [`cbart_last_error`]. Strings returned by the library must be released
//! with [`cbart_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cbart::inference::{DecodeConfig, PenaltyMode, Ranker, Strategy};
use cbart::pipeline::{Generator, PipelineError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbartStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    UnknownKeyword = 5,
    Runtime = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbartStrategy {
    Greedy = 0,
    TopK = 1,
    TopP = 2,
}

/// Decoding options. Obtain defaults from [`cbart_decode_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbartDecodeOptions {
    pub strategy: CbartStrategy,
    pub k: u32,
    pub p: f64,
    pub theta: f64,
    pub num_sequences: u32,
    pub max_steps: u32,
    pub seed: u64,
}

/// Opaque model handle.
pub struct CbartModel {
    generator: Generator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: CbartStatus, msg: impl Into<String>) -> CbartStatus {
    set_error(msg);
    status
}

fn status_of(e: &PipelineError) -> CbartStatus {
    match e {
        PipelineError::UnknownKeyword(_) => CbartStatus::UnknownKeyword,
        PipelineError::Io(_) => CbartStatus::Io,
        PipelineError::Train(cbart::training::TrainError::Io(_)) => CbartStatus::Io,
        PipelineError::Inference(_) => CbartStatus::InvalidArgument,
        _ => CbartStatus::Runtime,
    }
}

fn guarded(f: impl FnOnce() -> CbartStatus) -> CbartStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CbartStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `s` must be null or point to a NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, CbartStatus> {
    if s.is_null() {
        return Err(fail(CbartStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(CbartStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn decode_config(o: &CbartDecodeOptions, has_lm: bool) -> DecodeConfig {
    DecodeConfig {
        strategy: match o.strategy {
            CbartStrategy::Greedy => Strategy::Greedy,
            CbartStrategy::TopK => Strategy::TopK(o.k as usize),
            CbartStrategy::TopP => Strategy::TopP(o.p),
        },
        num_sequences: o.num_sequences as usize,
        theta: o.theta,
        penalty: PenaltyMode::SignAware,
        max_steps: o.max_steps as usize,
        seed: o.seed,
        ranker: if has_lm { Ranker::LmNll } else { Ranker::DecoderNll },
    }
}

#[no_mangle]
pub extern "C" fn cbart_decode_options_default() -> CbartDecodeOptions {
    let d = DecodeConfig::default();
    CbartDecodeOptions {
        strategy: CbartStrategy::Greedy,
        k: 10,
        p: 0.9,
        theta: d.theta,
        num_sequences: d.num_sequences as u32,
        max_steps: d.max_steps as u32,
        seed: d.seed,
    }
}

/// Loads an edit-model checkpoint and, when `lm_checkpoint` is not null, a
/// ranking language model. On success `*out` receives a handle to release
/// with [`cbart_model_free`].
///
/// # Safety
/// `checkpoint` must be a NUL-terminated path, `lm_checkpoint` null or a
/// NUL-terminated path, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbart_model_load(checkpoint: *const c_char, lm_checkpoint: *const c_char, out: *mut *mut CbartModel) -> CbartStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CbartStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let ckpt = match read_str(checkpoint, "checkpoint") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let lm = if lm_checkpoint.is_null() {
            None
        } else {
            match read_str(lm_checkpoint, "lm_checkpoint") {
                Ok(s) => Some(Path::new(s)),
                Err(s) => return s,
            }
        };
        match Generator::load(Path::new(ckpt), lm, None) {
            Ok(generator) => {
                *out = Box::into_raw(Box::new(CbartModel { generator }));
                CbartStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from [`cbart_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbart_model_free(model: *mut CbartModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the loaded model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbart_model_vocab_size(model: *const CbartModel) -> usize {
    model.as_ref().map_or(0, |m| m.generator.vocab.size())
}

/// Generates a sentence for tab-separated `keywords`. On success `*out_json`
/// receives a JSON object with the fields `keywords`, `output`, `steps`,
/// `decoder_passes`, `nll` and `elapsed_ms`. `options` may be null for the
/// defaults.
///
/// # Safety
/// `model` must be a live handle, `keywords` a NUL-terminated string,
/// `options` null or valid, and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbart_generate(
    model: *const CbartModel,
    keywords: *const c_char,
    options: *const CbartDecodeOptions,
    out_json: *mut *mut c_char,
) -> CbartStatus {
    guarded(|| {
        if out_json.is_null() {
            return fail(CbartStatus::NullPointer, "out_json is null");
        }
        *out_json = ptr::null_mut();
        let Some(model) = model.as_ref() else {
            return fail(CbartStatus::NullPointer, "model is null");
        };
        let kws = match read_str(keywords, "keywords") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let kws: Vec<&str> = kws.split('\t').map(str::trim).filter(|k| !k.is_empty()).collect();
        if kws.is_empty() {
            return fail(CbartStatus::InvalidArgument, "no keywords given");
        }
        let opts = options.as_ref().copied().unwrap_or_else(|| cbart_decode_options_default());
        let cfg = decode_config(&opts, model.generator.lm.is_some());
        if let Err(e) = cfg.validate() {
            return fail(CbartStatus::InvalidArgument, e.to_string());
        }
        match model.generator.generate(&kws, &cfg) {
            Ok(rec) => {
                let json = serde_json::to_string(&rec).expect("record serializes");
                match CString::new(json) {
                    Ok(c) => {
                        *out_json = c.into_raw();
                        CbartStatus::Ok
                    }
                    Err(_) => fail(CbartStatus::Runtime, "output contains NUL"),
                }
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbart_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn cbart_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn cbart_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

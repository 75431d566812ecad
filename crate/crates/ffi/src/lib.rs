//! C interface. Models are opaque `SfModel` handles created by
//! `sf_model_load` and released with `sf_model_free`. Every fallible call
//! returns an `SfStatus`; on failure `sf_last_error_message` describes the
//! error for the calling thread. Strings returned by the library are owned
//! by the caller and released with `sf_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use spacefusion::inference::{generate_pool, select_top, RankerConfig};
use spacefusion::metrics::{bleu4, f1, precision, recall};
use spacefusion::trainer::{load_checkpoint, Checkpoint};
use spacefusion::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Numerical = 5,
    Checkpoint = 6,
    Internal = 7,
}

/// Loaded checkpoint: model plus vocabulary.
pub struct SfModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SfStatus {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Dimension(_) | Error::Index { .. } => SfStatus::InvalidArgument,
        Error::Io { .. } => SfStatus::Io,
        Error::Parse { .. } | Error::Data(_) => SfStatus::Data,
        Error::Numerical(_) => SfStatus::Numerical,
        Error::Checkpoint(_) => SfStatus::Checkpoint,
    }
}

/// Runs `f`, mapping errors and panics to a status and recording the message.
fn guard(f: impl FnOnce() -> Result<(), (SfStatus, String)>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SfStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SfStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (SfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SfStatus, String) {
    (SfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn read_str_array<'a>(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<&'a str>, (SfStatus, String)> {
    if n > 0 && p.is_null() {
        return Err(null(what));
    }
    (0..n).map(|i| read_str(*p.add(i), what)).collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint directory into `*out`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load(dir: *const c_char, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = read_str(dir, "dir")?;
        let checkpoint = load_checkpoint(dir).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SfModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from `sf_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Dimension of the latent vectors written by `sf_model_encode_context`; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_latent_dim(model: *const SfModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.model.latent_dim())
}

/// Noise-free context latent written into `out[0..len]`; `len` must equal the latent dimension.
///
/// # Safety
/// `model` must be a live handle, `context` a NUL-terminated string and `out`
/// valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sf_model_encode_context(model: *const SfModel, context: *const c_char, out: *mut f64, len: usize) -> SfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let text = read_str(context, "context")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dim = m.checkpoint.model.latent_dim();
        if len != dim {
            return Err((SfStatus::InvalidArgument, format!("buffer holds {len} values, latent has {dim}")));
        }
        let ids = m.checkpoint.vocab.tokenize(text);
        let z = m.checkpoint.model.encode_contexts(&[&ids]).map_err(lib_err)?.remove(0);
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(z.as_slice());
        Ok(())
    })
}

/// Samples `pool_size` perturbations of radius `radius` (negative: the
/// checkpoint's radius), ranks them with length bonus `lambda` and writes up to
/// `count` responses joined by `\n` into `*out` (free with `sf_string_free`).
///
/// # Safety
/// `model` must be a live handle, `context` a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_model_generate(
    model: *const SfModel,
    context: *const c_char,
    count: usize,
    radius: f64,
    pool_size: usize,
    lambda: f64,
    seed: u64,
    out: *mut *mut c_char,
) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let text = read_str(context, "context")?;
        let ckpt = &m.checkpoint;
        let mut rc = RankerConfig::new(if radius < 0.0 { ckpt.model.config().radius } else { radius });
        rc.pool_size = pool_size;
        rc.lambda = lambda;
        let ids = ckpt.vocab.tokenize(text);
        let mut rng = spacefusion::inference::context_rng(seed, 0);
        let pool = generate_pool(&ckpt.model, &ids, &rc, &mut rng).map_err(lib_err)?;
        let picked = select_top(&pool, count, lambda).map_err(lib_err)?;
        let joined = picked
            .hypotheses
            .iter()
            .map(|h| ckpt.vocab.detokenize(&h.tokens))
            .collect::<Vec<_>>()
            .join("\n");
        *out = CString::new(joined).expect("vocabulary words have no NUL").into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Sentence BLEU-4 of whitespace-tokenized strings.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sf_bleu4(reference: *const c_char, hypothesis: *const c_char, out: *mut f64) -> SfStatus {
    guard(|| {
        let r = words(read_str(reference, "reference")?);
        let h = words(read_str(hypothesis, "hypothesis")?);
        *out.as_mut().ok_or_else(|| null("out"))? = bleu4(&r, &h);
        Ok(())
    })
}

/// Multi-reference precision, recall and F1 (each in [0, 1]) of whitespace-tokenized strings.
///
/// # Safety
/// `refs` and `hyps` must hold `n_refs` and `n_hyps` NUL-terminated strings; the outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_multi_ref_scores(
    refs: *const *const c_char,
    n_refs: usize,
    hyps: *const *const c_char,
    n_hyps: usize,
    out_precision: *mut f64,
    out_recall: *mut f64,
    out_f1: *mut f64,
) -> SfStatus {
    guard(|| {
        if n_refs == 0 {
            return Err((SfStatus::InvalidArgument, "at least one reference is required".into()));
        }
        let r: Vec<Vec<String>> = read_str_array(refs, n_refs, "refs")?.into_iter().map(words).collect();
        let h: Vec<Vec<String>> = read_str_array(hyps, n_hyps, "hyps")?.into_iter().map(words).collect();
        let (p, rc) = (precision(&r, &h), recall(&r, &h));
        *out_precision.as_mut().ok_or_else(|| null("out_precision"))? = p;
        *out_recall.as_mut().ok_or_else(|| null("out_recall"))? = rc;
        *out_f1.as_mut().ok_or_else(|| null("out_f1"))? = f1(p, rc);
        Ok(())
    })
}

//! C ABI over the convslu losses, feature front end and transducer decoder.
//!
//! Every function returns a [`ConvsluStatus`]. On failure a message is kept
//! per thread and can be read with [`convslu_last_error`]. Objects cross the
//! boundary as opaque handles that the caller frees with the matching
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use convslu::features::{expected_frames, FeaturePipeline, NormStats, Waveform, NUM_MEL, STACKED_DIM};
use convslu::nn::{Checkpoint, Mat};
use convslu::transducer::{ctc_loss, greedy_decode, rnnt_loss, Lattice, TransducerModel, DEFAULT_EMISSION_CAP};
use convslu::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvsluStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    ImpossibleAlignment = 4,
    BufferTooSmall = 5,
    Io = 6,
    Format = 7,
    Numeric = 8,
    Internal = 9,
}

/// Feature front end with fixed normalization statistics.
pub struct ConvsluFeatureExtractor {
    pipeline: FeaturePipeline,
}

/// A loaded transducer checkpoint.
pub struct ConvsluModel {
    model: TransducerModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ConvsluStatus {
    match e {
        Error::Shape(_) | Error::Length { .. } => ConvsluStatus::Shape,
        Error::ImpossibleAlignment(_) => ConvsluStatus::ImpossibleAlignment,
        Error::Io { .. } => ConvsluStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Wav(_) => ConvsluStatus::Format,
        Error::Numeric(_) => ConvsluStatus::Numeric,
        _ => ConvsluStatus::InvalidArgument,
    }
}

struct Fail(ConvsluStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: ConvsluStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, records any error and converts panics to `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ConvsluStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ConvsluStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ConvsluStatus::Internal
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(ConvsluStatus::NullPointer, format!("{name} is null"));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(ConvsluStatus::NullPointer, format!("{name} is null")))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<&'static Path, Fail> {
    if p.is_null() {
        return fail(ConvsluStatus::NullPointer, format!("{name} is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => fail(ConvsluStatus::InvalidArgument, format!("{name} is not UTF-8")),
    }
}

fn targets(raw: &[u32]) -> Vec<usize> {
    raw.iter().map(|&k| k as usize).collect()
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn convslu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Transducer loss over a `frames × (target_len+1) × vocab` row-major
/// lattice of log-probabilities. `grad` may be NULL; otherwise it receives
/// the gradient with the lattice's shape.
///
/// # Safety
/// Pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn convslu_rnnt_loss(
    log_probs: *const f64,
    frames: usize,
    vocab: usize,
    blank: usize,
    target: *const u32,
    target_len: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> ConvsluStatus {
    guard(|| {
        let n = frames * (target_len + 1) * vocab;
        let lp = input(log_probs, n, "log_probs")?;
        let y = input(target, target_len, "target")?;
        let out = out_ref(loss, "loss")?;
        let lattice = Lattice::new(frames, vocab, blank, targets(y), lp.to_vec())?;
        let r = rnnt_loss(&lattice)?;
        *out = r.loss;
        if !grad.is_null() {
            slice::from_raw_parts_mut(grad, n).copy_from_slice(&r.grad);
        }
        Ok(())
    })
}

/// CTC loss over `frames × vocab` row-major frame log-probabilities.
/// `grad` may be NULL.
///
/// # Safety
/// Pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn convslu_ctc_loss(
    log_probs: *const f64,
    frames: usize,
    vocab: usize,
    blank: usize,
    target: *const u32,
    target_len: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> ConvsluStatus {
    guard(|| {
        let n = frames * vocab;
        let lp = input(log_probs, n, "log_probs")?;
        let y = input(target, target_len, "target")?;
        let out = out_ref(loss, "loss")?;
        let r = ctc_loss(lp, vocab, &targets(y), blank)?;
        *out = r.loss;
        if !grad.is_null() {
            slice::from_raw_parts_mut(grad, n).copy_from_slice(&r.grad);
        }
        Ok(())
    })
}

/// Width of one output feature frame (240).
#[no_mangle]
pub extern "C" fn convslu_feature_dim() -> usize {
    STACKED_DIM
}

/// Number of feature frames produced for `num_samples` input samples.
#[no_mangle]
pub extern "C" fn convslu_feature_frames(num_samples: usize) -> usize {
    expected_frames(num_samples)
}

/// Creates a feature extractor. `stats_path` names a JSON file of
/// normalization statistics; NULL means no normalization.
///
/// # Safety
/// `stats_path` must be NULL or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn convslu_extractor_new(
    stats_path: *const c_char,
    out: *mut *mut ConvsluFeatureExtractor,
) -> ConvsluStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let stats = if stats_path.is_null() {
            NormStats::identity(NUM_MEL)
        } else {
            NormStats::load(path_arg(stats_path, "stats_path")?)?
        };
        let pipeline = FeaturePipeline::new(stats)?;
        *out = Box::into_raw(Box::new(ConvsluFeatureExtractor { pipeline }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`convslu_extractor_new`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn convslu_extractor_free(handle: *mut ConvsluFeatureExtractor) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Extracts features from mono samples in [-1, 1]. Writes up to
/// `capacity_frames` rows of 240 floats into `out` and the true frame
/// count into `frames`; returns `BufferTooSmall` when it does not fit.
///
/// # Safety
/// Pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn convslu_extract(
    handle: *const ConvsluFeatureExtractor,
    samples: *const f32,
    num_samples: usize,
    sample_rate: u32,
    out: *mut f32,
    capacity_frames: usize,
    frames: *mut usize,
) -> ConvsluStatus {
    guard(|| {
        let ex = handle
            .as_ref()
            .ok_or_else(|| Fail(ConvsluStatus::NullPointer, "extractor is null".into()))?;
        let s = input(samples, num_samples, "samples")?;
        let n_out = out_ref(frames, "frames")?;
        let feats = ex.pipeline.process(&Waveform::new(s.to_vec(), sample_rate)?)?;
        *n_out = feats.num_frames();
        if feats.num_frames() > capacity_frames {
            return fail(
                ConvsluStatus::BufferTooSmall,
                format!("{} frames do not fit in {capacity_frames}", feats.num_frames()),
            );
        }
        if feats.num_frames() > 0 {
            if out.is_null() {
                return fail(ConvsluStatus::NullPointer, "out is null");
            }
            slice::from_raw_parts_mut(out, feats.data().len()).copy_from_slice(&feats.to_f32());
        }
        Ok(())
    })
}

/// Loads a transducer checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn convslu_model_load(path: *const c_char, out: *mut *mut ConvsluModel) -> ConvsluStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let model = TransducerModel::from_checkpoint(&Checkpoint::load(path_arg(path, "path")?)?)?;
        *out = Box::into_raw(Box::new(ConvsluModel { model }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`convslu_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn convslu_model_free(handle: *mut ConvsluModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Output vocabulary size including blank, or 0 for a NULL handle.
///
/// # Safety
/// `handle` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn convslu_model_outputs(handle: *const ConvsluModel) -> usize {
    handle.as_ref().map_or(0, |m| m.model.outputs())
}

/// Width of the per-utterance history input (0 or 128).
///
/// # Safety
/// `handle` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn convslu_model_history_dim(handle: *const ConvsluModel) -> usize {
    handle.as_ref().map_or(0, |m| m.model.config.history_dim)
}

/// Copies the NUL-terminated name of output `k` into `buf`. `len` receives
/// the name's byte length without the terminator.
///
/// # Safety
/// `buf` must hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn convslu_model_token_name(
    handle: *const ConvsluModel,
    k: usize,
    buf: *mut c_char,
    capacity: usize,
    len: *mut usize,
) -> ConvsluStatus {
    guard(|| {
        let m = handle
            .as_ref()
            .ok_or_else(|| Fail(ConvsluStatus::NullPointer, "model is null".into()))?;
        if k >= m.model.outputs() {
            return fail(ConvsluStatus::InvalidArgument, format!("output {k} out of range"));
        }
        let name = m.model.config.token_name(k);
        *out_ref(len, "len")? = name.len();
        if name.len() + 1 > capacity {
            return fail(ConvsluStatus::BufferTooSmall, "name does not fit");
        }
        if buf.is_null() {
            return fail(ConvsluStatus::NullPointer, "buf is null");
        }
        ptr::copy_nonoverlapping(name.as_ptr().cast::<c_char>(), buf, name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

/// Greedy decoding of `frames × dim` row-major features. `history` holds
/// `history_dim` floats, or is NULL for models without a history input.
/// Emitted output indices go to `tokens`; `len` receives their count.
///
/// # Safety
/// Pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn convslu_model_decode(
    handle: *const ConvsluModel,
    feats: *const f32,
    frames: usize,
    dim: usize,
    history: *const f32,
    history_len: usize,
    tokens: *mut u32,
    capacity: usize,
    len: *mut usize,
) -> ConvsluStatus {
    guard(|| {
        let m = handle
            .as_ref()
            .ok_or_else(|| Fail(ConvsluStatus::NullPointer, "model is null".into()))?;
        let x = input(feats, frames * dim, "feats")?;
        let h = if history.is_null() {
            None
        } else {
            Some(input(history, history_len, "history")?)
        };
        let n_out = out_ref(len, "len")?;
        let hyp = greedy_decode(&m.model, &Mat::from_vec(frames, dim, x.to_vec()), h, DEFAULT_EMISSION_CAP)?;
        *n_out = hyp.tokens.len();
        if hyp.tokens.len() > capacity {
            return fail(ConvsluStatus::BufferTooSmall, format!("{} tokens do not fit", hyp.tokens.len()));
        }
        if !hyp.tokens.is_empty() {
            if tokens.is_null() {
                return fail(ConvsluStatus::NullPointer, "tokens is null");
            }
            for (dst, &k) in slice::from_raw_parts_mut(tokens, hyp.tokens.len()).iter_mut().zip(&hyp.tokens) {
                *dst = k as u32;
            }
        }
        Ok(())
    })
}

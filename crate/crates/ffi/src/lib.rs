//! C ABI over the mgnm core.
//!
//! Models and datasets are opaque handles created by `*_load` and released
//! by `*_free`. Every fallible call returns an [`MgnmStatus`]; on failure the
//! message is available from [`mgnm_last_error`] on the same thread until
//! the next failing call. Panics are caught at the boundary and reported as
//! [`MgnmStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mgnm::checkpoint;
use mgnm::dataio::{load_split, DatasetSplit};
use mgnm::error::Error;
use mgnm::evaluator::{self, EvalConfig, Segment};
use mgnm::model::{Model, PADDING};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgnmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Data = 5,
    NonFinite = 6,
    Panic = 7,
    Other = 8,
}

/// A loaded model.
pub struct MgnmModel(Model);

/// A prepared dataset split.
pub struct MgnmDataset(DatasetSplit);

/// Ranking metrics for one evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MgnmMetrics {
    pub gauc: f64,
    pub ndcg_at_k: f64,
    pub hit_at_k: f64,
    pub mrr_at_k: f64,
    pub k: usize,
    pub num_instances: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MgnmStatus {
    match e {
        Error::Io { .. } => MgnmStatus::Io,
        Error::Checkpoint(_) => MgnmStatus::Checkpoint,
        Error::Parse { .. } | Error::NoUsers | Error::VocabularyTooSmall { .. } => MgnmStatus::Data,
        Error::NonFinite(_) | Error::Diverged { .. } => MgnmStatus::NonFinite,
        Error::InvalidArgument(_) | Error::Config(_) | Error::ShapeMismatch { .. } => MgnmStatus::InvalidArgument,
        _ => MgnmStatus::Other,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (MgnmStatus, String)>) -> MgnmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MgnmStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside mgnm".into());
            MgnmStatus::Panic
        }
    }
}

fn core<T>(r: mgnm::error::Result<T>) -> Result<T, (MgnmStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MgnmStatus, String) {
    (MgnmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (MgnmStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (MgnmStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (MgnmStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mgnm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mgnm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint (`path` plus its `.json` sidecar).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mgnm_model_load(path: *const c_char, out: *mut *mut MgnmModel) -> MgnmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = core(checkpoint::load(&unsafe { path_arg(path) }?))?;
        unsafe { *out = Box::into_raw(Box::new(MgnmModel(model))) };
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`mgnm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mgnm_model_free(model: *mut MgnmModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of items, excluding the padding index 0. Valid item ids are
/// `1..=num_items`.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn mgnm_model_num_items(model: *const MgnmModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.config.num_items)
}

/// Number of users the model was trained with.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn mgnm_model_num_users(model: *const MgnmModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.config.num_users)
}

/// Scores `num_candidates` items for one user. `history` holds item ids,
/// oldest first; only the most recent `capacity` are used. Writes one fused
/// score per candidate to `out_scores`. `seed` fixes the routing
/// initialisation, so equal inputs give equal scores.
///
/// # Safety
/// `history` and `candidates` must point to the given number of ids, and
/// `out_scores` to `num_candidates` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mgnm_model_score(
    model: *const MgnmModel,
    user: usize,
    history: *const u32,
    history_len: usize,
    candidates: *const u32,
    num_candidates: usize,
    seed: u64,
    out_scores: *mut f64,
) -> MgnmStatus {
    guard(|| {
        let model = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.0;
        let history = unsafe { slice_arg(history, history_len, "history") }?;
        let candidates = unsafe { slice_arg(candidates, num_candidates, "candidates") }?;
        if num_candidates > 0 && out_scores.is_null() {
            return Err(null("out_scores"));
        }
        if history.is_empty() {
            return Err((MgnmStatus::InvalidArgument, "history is empty".into()));
        }
        if let Some(&bad) = candidates.iter().find(|&&c| c == PADDING || c as usize > model.config.num_items) {
            return Err((MgnmStatus::InvalidArgument, format!("candidate {bad} out of range")));
        }
        let cap = model.config.capacity;
        let recent = &history[history.len().saturating_sub(cap)..];
        let mut padded = recent.to_vec();
        padded.resize(cap, PADDING);
        let agreement = evaluator::inference_agreement_seed(seed);
        let set = core(model.interests(user, &padded, recent.len(), agreement))?;
        let scores = core(model.score(&set, candidates))?;
        let out = unsafe { std::slice::from_raw_parts_mut(out_scores, num_candidates) };
        for (o, p) in out.iter_mut().zip(scores) {
            *o = p.fused_score;
        }
        Ok(())
    })
}

/// Loads a split written by `mgnm prepare` or `mgnm synth`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mgnm_dataset_load(dir: *const c_char, out: *mut *mut MgnmDataset) -> MgnmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let split = core(load_split(&unsafe { path_arg(dir) }?))?;
        unsafe { *out = Box::into_raw(Box::new(MgnmDataset(split))) };
        Ok(())
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `dataset` must come from [`mgnm_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mgnm_dataset_free(dataset: *mut MgnmDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Evaluates a model on the validation (`segment` 1) or test (`segment` 2)
/// targets. `negatives` of 0 ranks against every unseen item.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mgnm_evaluate(
    model: *const MgnmModel,
    dataset: *const MgnmDataset,
    segment: u32,
    k: usize,
    negatives: usize,
    seed: u64,
    out: *mut MgnmMetrics,
) -> MgnmStatus {
    guard(|| {
        let model = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.0;
        let split = &unsafe { dataset.as_ref() }.ok_or_else(|| null("dataset"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let segment = match segment {
            1 => Segment::Validation,
            2 => Segment::Test,
            s => return Err((MgnmStatus::InvalidArgument, format!("segment {s} is not 1 or 2"))),
        };
        let cfg = EvalConfig {
            k,
            negatives: (negatives > 0).then_some(negatives),
            seed,
            ..EvalConfig::default()
        };
        let r = core(evaluator::evaluate(model, split, segment, &cfg))?;
        unsafe {
            *out = MgnmMetrics {
                gauc: r.gauc,
                ndcg_at_k: r.ndcg_at_k,
                hit_at_k: r.hit_at_k,
                mrr_at_k: r.mrr_at_k,
                k: r.k,
                num_instances: r.num_instances,
            }
        };
        Ok(())
    })
}

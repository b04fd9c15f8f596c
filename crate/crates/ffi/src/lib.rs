//! C ABI for the soundmind reward function, metrics, entailment oracle and
//! trained policies.
//!
//! Conventions:
//! - every function returns an [`SmStatus`]; results go through out-pointers;
//! - strings are NUL-terminated UTF-8;
//! - on failure, [`sm_last_error_message`] describes the most recent error on
//!   the calling thread;
//! - panics never cross the boundary (they become `SM_STATUS_PANIC`);
//! - a policy handle from [`sm_policy_load`] must be released with
//!   [`sm_policy_free`] exactly once.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, size_t};

use soundmind::env::{truth_table_entailment, Formula, LogicTask, TaskConfig, TaskInstance};
use soundmind::metrics::text_word_error_rate;
use soundmind::policy::{featurize, read_checkpoint, Checkpoint, TokenId};
use soundmind::reward::{
    extract_answer, AnswerLabel, BimodalResponse, LengthAnnotation, OutputModality,
    RewardBreakdown, RewardWeights,
};
use soundmind::Error;

/// Result code of every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Panic = 6,
}

/// Answer labels; `SM_LABEL_NONE` means no parseable answer.
pub const SM_LABEL_NONE: i32 = -1;
pub const SM_LABEL_ENTAILED: i32 = 0;
pub const SM_LABEL_NOT_ENTAILED: i32 = 1;

/// Output modalities.
pub const SM_MODALITY_TEXT_OUT: i32 = 0;
pub const SM_MODALITY_AUDIO_OUT: i32 = 1;
pub const SM_MODALITY_BOTH: i32 = 2;

/// Reward weights and update hyperparameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmRewardWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub answer_window: u32,
}

impl From<RewardWeights> for SmRewardWeights {
    fn from(w: RewardWeights) -> Self {
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            lambda5: w.lambda5,
            beta: w.beta,
            epsilon: w.epsilon,
            answer_window: w.answer_window as u32,
        }
    }
}

impl From<SmRewardWeights> for RewardWeights {
    fn from(w: SmRewardWeights) -> Self {
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            lambda5: w.lambda5,
            beta: w.beta,
            epsilon: w.epsilon,
            answer_window: w.answer_window as usize,
        }
    }
}

/// Per-term reward. Terms of an inactive stream are 0 with the matching
/// `*_active` flag cleared.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SmRewardBreakdown {
    pub format_text: f64,
    pub format_audio: f64,
    pub answer: f64,
    pub length_text: f64,
    pub length_audio: f64,
    pub total: f64,
    pub text_active: u8,
    pub audio_active: u8,
}

/// Opaque handle to a loaded policy checkpoint.
pub struct SmPolicy {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(SmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SmStatus::Io,
            Error::Formula { .. } | Error::Checkpoint { .. } | Error::Manifest { .. } => {
                SmStatus::Parse
            }
            _ => SmStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SmStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_last_error();
            SmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            SmStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure(SmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(SmStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller guarantees a non-null `ptr` is valid for writes.
    unsafe { ptr.as_mut() }.ok_or_else(|| Failure(SmStatus::NullPointer, format!("{what} is null")))
}

fn label_code(label: Option<AnswerLabel>) -> i32 {
    match label {
        None => SM_LABEL_NONE,
        Some(AnswerLabel::Entailed) => SM_LABEL_ENTAILED,
        Some(AnswerLabel::NotEntailed) => SM_LABEL_NOT_ENTAILED,
    }
}

fn label_from_code(code: i32) -> Result<AnswerLabel, Failure> {
    match code {
        SM_LABEL_ENTAILED => Ok(AnswerLabel::Entailed),
        SM_LABEL_NOT_ENTAILED => Ok(AnswerLabel::NotEntailed),
        other => Err(invalid(format!("invalid label code {other}"))),
    }
}

fn modality_from_code(code: i32) -> Result<OutputModality, Failure> {
    match code {
        SM_MODALITY_TEXT_OUT => Ok(OutputModality::TextOut),
        SM_MODALITY_AUDIO_OUT => Ok(OutputModality::AudioOut),
        SM_MODALITY_BOTH => Ok(OutputModality::Both),
        other => Err(invalid(format!("invalid modality code {other}"))),
    }
}

/// Message describing the last failed call on this thread, or null. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn sm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the default reward weights.
#[no_mangle]
pub extern "C" fn sm_reward_weights_default(out: *mut SmRewardWeights) -> SmStatus {
    guard(|| {
        *out_ref(out, "out")? = RewardWeights::default().into();
        Ok(())
    })
}

/// Extracts the answer from the tail of `rendering`; writes a label code
/// (`SM_LABEL_NONE` when absent).
///
/// # Safety
/// `rendering` must be a NUL-terminated string; `out_label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_extract_answer(
    rendering: *const c_char,
    window: u32,
    out_label: *mut i32,
) -> SmStatus {
    guard(|| {
        let text = read_str(rendering, "rendering")?;
        let out = out_ref(out_label, "out_label")?;
        *out = label_code(extract_answer(text, window as usize));
        Ok(())
    })
}

/// Scores a response given its text rendering and audio transcript (either
/// may be empty), the true label, and reference lengths in words.
///
/// # Safety
/// String arguments must be NUL-terminated; `weights` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_score_response(
    text: *const c_char,
    audio: *const c_char,
    truth_label: i32,
    text_reference_len: u64,
    audio_reference_len: u64,
    weights: *const SmRewardWeights,
    modality: i32,
    out: *mut SmRewardBreakdown,
) -> SmStatus {
    guard(|| {
        let text = read_str(text, "text")?;
        let audio = read_str(audio, "audio")?;
        let weights = weights
            .as_ref()
            .ok_or_else(|| Failure(SmStatus::NullPointer, "weights is null".into()))?;
        let out = out_ref(out, "out")?;
        let w: RewardWeights = (*weights).into();
        w.validate()?;
        let truth = label_from_code(truth_label)?;
        let modality = modality_from_code(modality)?;
        let ann = LengthAnnotation::new(text_reference_len, audio_reference_len)?;
        let resp = BimodalResponse::from_renderings(text, audio, w.answer_window);
        let b = RewardBreakdown::compute(&resp, truth, &ann, &w, modality)?;
        *out = SmRewardBreakdown {
            format_text: b.format_text.unwrap_or(0.0),
            format_audio: b.format_audio.unwrap_or(0.0),
            answer: b.answer,
            length_text: b.length_text.unwrap_or(0.0),
            length_audio: b.length_audio.unwrap_or(0.0),
            total: b.total,
            text_active: u8::from(modality.uses_text()),
            audio_active: u8::from(modality.uses_audio()),
        };
        Ok(())
    })
}

/// Word error rate after lowercasing and punctuation stripping.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_word_error_rate(
    hypothesis: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> SmStatus {
    guard(|| {
        let h = read_str(hypothesis, "hypothesis")?;
        let r = read_str(reference, "reference")?;
        let out = out_ref(out, "out")?;
        *out = text_word_error_rate(h, r)?;
        Ok(())
    })
}

fn parse_task(major: &str, minor: &str, conclusion: &str) -> Result<LogicTask, Failure> {
    Ok(LogicTask::new(
        Formula::parse(major)?,
        Formula::parse(minor)?,
        Formula::parse(conclusion)?,
    )?)
}

/// Decides by truth table whether `major ∧ minor` entails `conclusion`.
/// Formulas use atoms A–D with `not/and/or/if … then` or `~ & | ->`.
///
/// # Safety
/// Strings must be NUL-terminated; `out_label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_entailment(
    major: *const c_char,
    minor: *const c_char,
    conclusion: *const c_char,
    out_label: *mut i32,
) -> SmStatus {
    guard(|| {
        let task = parse_task(
            read_str(major, "major")?,
            read_str(minor, "minor")?,
            read_str(conclusion, "conclusion")?,
        )?;
        let out = out_ref(out_label, "out_label")?;
        *out = label_code(Some(truth_table_entailment(
            &task.major,
            &task.minor,
            &task.conclusion,
        )));
        Ok(())
    })
}

/// Loads a policy checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_policy_load(path: *const c_char, out: *mut *mut SmPolicy) -> SmStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        let out = out_ref(out, "out")?;
        let checkpoint = read_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(SmPolicy { checkpoint }));
        Ok(())
    })
}

/// Releases a handle from [`sm_policy_load`]. Null is ignored.
///
/// # Safety
/// `policy` must be null or a live handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn sm_policy_free(policy: *mut SmPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of response tokens of the policy.
///
/// # Safety
/// `policy` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_policy_vocab_size(policy: *const SmPolicy, out: *mut size_t) -> SmStatus {
    guard(|| {
        let p = policy
            .as_ref()
            .ok_or_else(|| Failure(SmStatus::NullPointer, "policy is null".into()))?;
        *out_ref(out, "out")? = p.checkpoint.vocab.len();
        Ok(())
    })
}

/// Next-token log-probabilities for a task and a generated prefix.
/// `out` must hold `out_len >= vocab size` doubles; exactly vocab-size
/// entries are written.
///
/// # Safety
/// Strings must be NUL-terminated; `prefix` must point to `prefix_len` ids
/// (may be null when `prefix_len` is 0); `out` must be writable for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sm_policy_log_probs(
    policy: *const SmPolicy,
    major: *const c_char,
    minor: *const c_char,
    conclusion: *const c_char,
    modality: i32,
    prefix: *const u32,
    prefix_len: size_t,
    out: *mut f64,
    out_len: size_t,
) -> SmStatus {
    guard(|| {
        let p = policy
            .as_ref()
            .ok_or_else(|| Failure(SmStatus::NullPointer, "policy is null".into()))?;
        let task = parse_task(
            read_str(major, "major")?,
            read_str(minor, "minor")?,
            read_str(conclusion, "conclusion")?,
        )?;
        let modality = modality_from_code(modality)?;
        let v = p.checkpoint.vocab.len();
        if out.is_null() {
            return Err(Failure(SmStatus::NullPointer, "out is null".into()));
        }
        if out_len < v {
            return Err(invalid(format!("out holds {out_len} values, need {v}")));
        }
        let ids: &[u32] = if prefix_len == 0 {
            &[]
        } else if prefix.is_null() {
            return Err(Failure(SmStatus::NullPointer, "prefix is null".into()));
        } else {
            std::slice::from_raw_parts(prefix, prefix_len)
        };
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= v) {
            return Err(invalid(format!("token id {bad} out of range for {v} tokens")));
        }
        let tokens: Vec<TokenId> = ids.iter().map(|&t| TokenId(t)).collect();
        let inst = TaskInstance::new(
            "ffi",
            task,
            TaskConfig::default().reference_lengths(),
            modality,
        )?;
        let state = featurize(&inst, &tokens, p.checkpoint.params.prefix_k());
        let dist = p.checkpoint.params.action_distribution(&state)?;
        let dst = std::slice::from_raw_parts_mut(out, v);
        dst.copy_from_slice(dist.log_probs());
        Ok(())
    })
}

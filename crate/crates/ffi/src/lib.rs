//! C ABI over the policy engine.
//!
//! Every fallible call returns an [`SpStatus`]; on failure the message is
//! available from [`sp_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Strings returned
//! through `out` pointers are owned by the caller and released with
//! [`sp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use support_policy::policy::{EngineParams, Objective, PolicyError, PolicyKind, ThreadSession};
use support_policy::TaskDataset;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidDataset = 3,
    InvalidArgument = 4,
    OutOfRange = 5,
    SessionExhausted = 6,
    NoPendingTrial = 7,
    Panic = 99,
}

/// Estimator parameters; see [`sp_engine_params_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpEngineParams {
    pub alpha: f64,
    pub k: usize,
    pub warmup: usize,
    pub gamma: f64,
}

impl From<SpEngineParams> for EngineParams {
    fn from(p: SpEngineParams) -> Self {
        EngineParams { alpha: p.alpha, k: p.k, warmup: p.warmup, gamma: p.gamma }
    }
}

/// A validated dataset.
pub struct SpDataset(Arc<TaskDataset>);

/// One learning session over a dataset.
pub struct SpSession(ThreadSession);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(SpStatus, String);

impl From<PolicyError> for Fail {
    fn from(e: PolicyError) -> Self {
        let status = match e {
            PolicyError::SessionExhausted { .. } => SpStatus::SessionExhausted,
            PolicyError::ActionMismatch { expected: None, .. } => SpStatus::NoPendingTrial,
            _ => SpStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SpStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(SpStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|e| Fail(SpStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn to_c(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s).map(CString::into_raw).map_err(|e| Fail(SpStatus::InvalidArgument, e.to_string()))
}

/// Last error message on this thread; empty after a successful call. The
/// pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn sp_engine_params_default() -> SpEngineParams {
    let p = EngineParams::default();
    SpEngineParams { alpha: p.alpha, k: p.k, warmup: p.warmup, gamma: p.gamma }
}

/// Parses and validates a dataset document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_from_json(json: *const c_char, out: *mut *mut SpDataset) -> SpStatus {
    guard(|| {
        non_null(out, "out")?;
        let raw = read_str(json, "json")?;
        let ds = TaskDataset::from_json(raw).map_err(|e| Fail(SpStatus::InvalidDataset, e.to_string()))?;
        *out = Box::into_raw(Box::new(SpDataset(Arc::new(ds))));
        Ok(())
    })
}

/// Number of items, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_len(ds: *const SpDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.items.len())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_free(ds: *mut SpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Starts a session. `policy_kind` is `thread-knn`, `thread-linucb`,
/// `random` or `fixed:<action_id>`. A NaN `lambda` optimizes loss alone.
/// A null `params` uses the defaults. The session keeps its own reference
/// to the dataset.
///
/// # Safety
/// `ds` must be a live handle, `policy_kind` a NUL-terminated string,
/// `params` null or readable, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_session_new(
    ds: *const SpDataset,
    policy_kind: *const c_char,
    lambda: f64,
    params: *const SpEngineParams,
    horizon: usize,
    seed: u64,
    out: *mut *mut SpSession,
) -> SpStatus {
    guard(|| {
        non_null(ds, "dataset")?;
        non_null(out, "out")?;
        let kind = PolicyKind::parse(read_str(policy_kind, "policy_kind")?)?;
        if matches!(kind, PolicyKind::PopulationMajority(_) | PolicyKind::OracleOptimal(_)) {
            return Err(Fail(SpStatus::InvalidArgument, "policy kind needs profiles".into()));
        }
        let objective = if lambda.is_nan() { Objective::LossOnly } else { Objective::scalarized(lambda)? };
        let params = params.as_ref().copied().map_or_else(EngineParams::default, EngineParams::from);
        let session = ThreadSession::new(Arc::clone(&(*ds).0), kind, objective, params, horizon, seed)?;
        *out = Box::into_raw(Box::new(SpSession(session)));
        Ok(())
    })
}

fn item_at(s: &SpSession, item_index: usize) -> Result<&support_policy::TaskItem, Fail> {
    let items = &s.0.dataset().items;
    items
        .get(item_index)
        .ok_or_else(|| Fail(SpStatus::OutOfRange, format!("item {item_index} of {}", items.len())))
}

/// Selects support for dataset item `item_index`; writes the action index
/// in dataset order.
///
/// # Safety
/// `s` must be a live handle and `out_action` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_session_select(s: *mut SpSession, item_index: usize, out_action: *mut usize) -> SpStatus {
    guard(|| {
        non_null(s, "session")?;
        non_null(out_action, "out_action")?;
        let s = &mut *s;
        let item = item_at(s, item_index)?.clone();
        *out_action = s.0.select_index(item.context.as_slice(), Some(&item.region))?;
        Ok(())
    })
}

/// Records the answer to the pending trial; writes the 0/1 loss.
///
/// # Safety
/// `s` must be a live handle and `out_loss` null or writable.
#[no_mangle]
pub unsafe extern "C" fn sp_session_record(
    s: *mut SpSession,
    item_index: usize,
    human_label: usize,
    out_loss: *mut u8,
) -> SpStatus {
    guard(|| {
        non_null(s, "session")?;
        let s = &mut *s;
        let item = item_at(s, item_index)?.clone();
        let action = s
            .0
            .pending_action()
            .map(str::to_owned)
            .ok_or_else(|| Fail(SpStatus::NoPendingTrial, "no trial is pending".into()))?;
        let loss = s.0.record_outcome(&item, &action, human_label)?.loss;
        if !out_loss.is_null() {
            *out_loss = loss;
        }
        Ok(())
    })
}

/// Index of the upcoming trial (1-based), or 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_session_trial(s: *const SpSession) -> usize {
    s.as_ref().map_or(0, |s| s.0.t())
}

/// Writes the frozen policy as a JSON string.
///
/// # Safety
/// `s` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_session_snapshot_json(s: *const SpSession, out: *mut *mut c_char) -> SpStatus {
    guard(|| {
        non_null(s, "session")?;
        non_null(out, "out")?;
        *out = to_c((*s).0.freeze().to_json().to_string())?;
        Ok(())
    })
}

/// Writes the interaction log as JSON lines.
///
/// # Safety
/// `s` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_session_log_jsonl(s: *const SpSession, out: *mut *mut c_char) -> SpStatus {
    guard(|| {
        non_null(s, "session")?;
        non_null(out, "out")?;
        let mut text = String::new();
        for rec in (*s).0.log() {
            text.push_str(&serde_json::to_string(rec).map_err(|e| Fail(SpStatus::InvalidArgument, e.to_string()))?);
            text.push('\n');
        }
        *out = to_c(text)?;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_session_free(s: *mut SpSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// # Safety
/// `p` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_string_free(p: *mut c_char) {
    if !p.is_null() {
        drop(CString::from_raw(p));
    }
}

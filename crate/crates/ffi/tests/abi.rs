use std::ffi::{CStr, CString};
use std::ptr;
use std::sync::Arc;

use support_policy::policy::{EngineParams, Objective, PolicyKind, ThreadSession};
use support_policy::synth::{synthetic_dataset, WorldSpec};
use support_policy_ffi::*;

fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { sp_string_free(p) };
    s
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sp_last_error()) }.to_str().unwrap().to_owned()
}

#[test]
fn session_matches_the_native_engine() {
    let ds = synthetic_dataset(&WorldSpec::default(), 8);
    let json = CString::new(ds.to_json()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { sp_dataset_from_json(json.as_ptr(), &mut handle) }, SpStatus::Ok);
    assert_eq!(unsafe { sp_dataset_len(handle) }, 150);

    let kind = CString::new("thread-knn").unwrap();
    let params = sp_engine_params_default();
    let mut session = ptr::null_mut();
    let status = unsafe { sp_session_new(handle, kind.as_ptr(), 0.7, &params, 40, 5, &mut session) };
    assert_eq!(status, SpStatus::Ok);
    // The session holds its own reference.
    unsafe { sp_dataset_free(handle) };

    let ds = Arc::new(ds);
    let mut native =
        ThreadSession::new(ds.clone(), PolicyKind::ThreadKnn, Objective::Scalarized { lambda: 0.7 }, EngineParams::default(), 40, 5)
            .unwrap();
    for t in 0..40 {
        let idx = (t * 7) % ds.items.len();
        let item = &ds.items[idx];
        let mut action = usize::MAX;
        assert_eq!(unsafe { sp_session_select(session, idx, &mut action) }, SpStatus::Ok);
        assert_eq!(action, native.select_index(item.context.as_slice(), Some(&item.region)).unwrap());
        let label = t % 3;
        let mut loss = 9u8;
        assert_eq!(unsafe { sp_session_record(session, idx, label, &mut loss) }, SpStatus::Ok);
        let id = native.action_ids()[action].clone();
        assert_eq!(loss, native.record_outcome(item, &id, label).unwrap().loss);
    }
    assert_eq!(unsafe { sp_session_trial(session) }, 41);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sp_session_snapshot_json(session, &mut out) }, SpStatus::Ok);
    assert_eq!(take_string(out), native.freeze().to_json().to_string());
    assert_eq!(unsafe { sp_session_log_jsonl(session, &mut out) }, SpStatus::Ok);
    assert_eq!(take_string(out).lines().count(), 40);

    let mut action = 0;
    assert_eq!(unsafe { sp_session_select(session, 0, &mut action) }, SpStatus::SessionExhausted);
    assert!(last_error().contains("exhausted"));
    unsafe { sp_session_free(session) };
}

#[test]
fn error_codes() {
    let ds = synthetic_dataset(&WorldSpec::default(), 8);
    let json = CString::new(ds.to_json()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { sp_dataset_from_json(json.as_ptr(), &mut handle) }, SpStatus::Ok);

    let bad = CString::new("{\"name\": 1}").unwrap();
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { sp_dataset_from_json(bad.as_ptr(), &mut other) }, SpStatus::InvalidDataset);
    assert!(!last_error().is_empty());

    let mut session = ptr::null_mut();
    let unknown = CString::new("mystery").unwrap();
    let status = unsafe { sp_session_new(handle, unknown.as_ptr(), f64::NAN, ptr::null(), 10, 0, &mut session) };
    assert_eq!(status, SpStatus::InvalidArgument);
    let oracle = CString::new("oracle").unwrap();
    let status = unsafe { sp_session_new(handle, oracle.as_ptr(), f64::NAN, ptr::null(), 10, 0, &mut session) };
    assert_eq!(status, SpStatus::InvalidArgument);
    let linucb = CString::new("thread-linucb").unwrap();
    let status = unsafe { sp_session_new(handle, linucb.as_ptr(), 2.0, ptr::null(), 10, 0, &mut session) };
    assert_eq!(status, SpStatus::InvalidArgument);
    let status = unsafe { sp_session_new(handle, linucb.as_ptr(), f64::NAN, ptr::null(), 10, 0, &mut session) };
    assert_eq!(status, SpStatus::Ok);
    assert_eq!(last_error(), "");

    assert_eq!(unsafe { sp_session_record(session, 0, 0, ptr::null_mut()) }, SpStatus::NoPendingTrial);
    let mut action = 0;
    assert_eq!(unsafe { sp_session_select(session, 150, &mut action) }, SpStatus::OutOfRange);
    assert_eq!(unsafe { sp_session_select(session, 3, ptr::null_mut()) }, SpStatus::NullPointer);
    assert_eq!(unsafe { sp_session_select(session, 3, &mut action) }, SpStatus::Ok);
    assert_eq!(unsafe { sp_session_record(session, 3, 7, ptr::null_mut()) }, SpStatus::InvalidArgument);

    unsafe {
        sp_session_free(session);
        sp_dataset_free(handle);
        sp_string_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/support_policy.h")).unwrap();
    for name in [
        "SpStatus",
        "SP_STATUS_SESSION_EXHAUSTED",
        "typedef struct SpSession SpSession",
        "sp_dataset_from_json",
        "sp_session_new",
        "sp_session_select",
        "sp_session_record",
        "sp_session_snapshot_json",
        "sp_session_log_jsonl",
        "sp_string_free",
        "sp_last_error",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

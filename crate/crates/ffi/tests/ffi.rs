use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rec2pm_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = rec2pm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn model() -> *mut Rec2pmModel {
    let mut m = ptr::null_mut();
    let s = unsafe { rec2pm_model_init(40, 8, 1, 2, 2, 4, 3, &mut m) };
    assert_eq!(s, Rec2pmStatus::Ok);
    m
}

fn session(m: *const Rec2pmModel, mode: u8) -> *mut Rec2pmSession {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { rec2pm_session_new(m, mode, &mut s) }, Rec2pmStatus::Ok);
    s
}

fn top(s: *mut Rec2pmSession, k: usize) -> (Vec<u32>, Vec<f32>) {
    let mut items = vec![0u32; k];
    let mut scores = vec![0f32; k];
    let mut n = 0;
    let st = unsafe { rec2pm_session_predict(s, k, items.as_mut_ptr(), scores.as_mut_ptr(), &mut n) };
    assert_eq!(st, Rec2pmStatus::Ok, "{}", last_error());
    items.truncate(n);
    scores.truncate(n);
    (items, scores)
}

#[test]
fn session_streams_and_ranks() {
    let m = model();
    assert_eq!(unsafe { rec2pm_model_n_items(m) }, 40);
    assert_eq!(unsafe { rec2pm_model_segment_len(m) }, 4);
    let s = session(m, REC2PM_MODE_OVERWRITE);
    let items = [1u32, 5, 9, 2, 7, 7];
    assert_eq!(unsafe { rec2pm_session_ingest(s, items.as_ptr(), items.len()) }, Rec2pmStatus::Ok);
    assert_eq!(unsafe { rec2pm_session_segments(s) }, 1);
    assert_eq!(unsafe { rec2pm_session_pending(s) }, 2);
    let (ids, scores) = top(s, 5);
    assert_eq!(ids.len(), 5);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let (all, _) = top(s, 1000);
    assert_eq!(all.len(), 40);
    unsafe {
        rec2pm_session_free(s);
        rec2pm_model_free(m);
    }
}

#[test]
fn session_outlives_model_handle() {
    let m = model();
    let s = session(m, REC2PM_MODE_APPEND);
    unsafe { rec2pm_model_free(m) };
    let items = [3u32; 9];
    assert_eq!(unsafe { rec2pm_session_ingest(s, items.as_ptr(), 9) }, Rec2pmStatus::Ok);
    assert_eq!(unsafe { rec2pm_session_segments(s) }, 2);
    assert_eq!(top(s, 3).0.len(), 3);
    unsafe { rec2pm_session_free(s) };
}

#[test]
fn memory_round_trip_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mem = cpath(&dir.path().join("u.r2pm"));
    let m = model();
    let a = session(m, REC2PM_MODE_OVERWRITE);
    let first = [4u32, 8, 15, 16, 23, 42 % 40, 1, 2];
    unsafe { rec2pm_session_ingest(a, first.as_ptr(), first.len()) };
    assert_eq!(unsafe { rec2pm_session_save_memory(a, mem.as_ptr()) }, Rec2pmStatus::Ok);
    let mut bytes = 0;
    assert_eq!(unsafe { rec2pm_session_memory_bytes(a, &mut bytes) }, Rec2pmStatus::Ok);
    assert_eq!(std::fs::metadata(dir.path().join("u.r2pm")).unwrap().len() as usize, bytes);

    let b = session(m, REC2PM_MODE_OVERWRITE);
    assert_eq!(unsafe { rec2pm_session_load_memory(b, mem.as_ptr()) }, Rec2pmStatus::Ok);
    let next = [9u32, 10];
    unsafe {
        rec2pm_session_ingest(a, next.as_ptr(), 2);
        rec2pm_session_ingest(b, next.as_ptr(), 2);
    }
    assert_eq!(top(a, 40), top(b, 40));
    unsafe {
        rec2pm_session_free(a);
        rec2pm_session_free(b);
        rec2pm_model_free(m);
    }
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("m.r2pw"));
    let m = model();
    assert_eq!(unsafe { rec2pm_model_save(m, path.as_ptr()) }, Rec2pmStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { rec2pm_model_load(path.as_ptr(), &mut loaded) }, Rec2pmStatus::Ok);
    let items = [1u32, 2, 3, 4, 5];
    let (a, b) = (session(m, 0), session(loaded, 0));
    unsafe {
        rec2pm_session_ingest(a, items.as_ptr(), 5);
        rec2pm_session_ingest(b, items.as_ptr(), 5);
    }
    assert_eq!(top(a, 40), top(b, 40));
    unsafe {
        rec2pm_session_free(a);
        rec2pm_session_free(b);
        rec2pm_model_free(m);
        rec2pm_model_free(loaded);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let mut out = ptr::null_mut();
    let missing = cpath(&dir.path().join("none.r2pw"));
    assert_eq!(unsafe { rec2pm_model_load(missing.as_ptr(), &mut out) }, Rec2pmStatus::Io);
    assert!(out.is_null());
    assert!(!last_error().is_empty());

    let junk = dir.path().join("junk.r2pw");
    std::fs::write(&junk, b"NOPE0000000000000000000000000000000000000000000000").unwrap();
    let junk = cpath(&junk);
    assert_eq!(unsafe { rec2pm_model_load(junk.as_ptr(), &mut out) }, Rec2pmStatus::Format);
    assert!(last_error().contains("magic"));

    assert_eq!(unsafe { rec2pm_model_load(ptr::null(), &mut out) }, Rec2pmStatus::NullPointer);

    let m = model();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { rec2pm_session_new(m, 9, &mut s) }, Rec2pmStatus::InvalidArgument);
    let s = session(m, 0);
    let bad = [99u32];
    assert_eq!(unsafe { rec2pm_session_ingest(s, bad.as_ptr(), 1) }, Rec2pmStatus::InvalidArgument);
    let mut ids = [0u32; 1];
    let mut sc = [0f32; 1];
    let mut n = 0;
    let st = unsafe { rec2pm_session_predict(s, 1, ids.as_mut_ptr(), sc.as_mut_ptr(), &mut n) };
    assert_eq!(st, Rec2pmStatus::InvalidArgument);
    let nowhere = cpath(&dir.path().join("m.r2pm"));
    assert_eq!(unsafe { rec2pm_session_save_memory(s, nowhere.as_ptr()) }, Rec2pmStatus::InvalidArgument);
    unsafe {
        rec2pm_session_free(s);
        rec2pm_model_free(m);
        rec2pm_model_free(ptr::null_mut());
        rec2pm_session_free(ptr::null_mut());
    }
}

#[test]
fn footprint_matches_float_count() {
    assert_eq!(rec2pm_token_footprint(4, 32, 7, REC2PM_MODE_OVERWRITE), 4 * 32 * 4);
    assert_eq!(rec2pm_token_footprint(4, 32, 7, REC2PM_MODE_APPEND), 7 * 4 * 32 * 4);
    assert_eq!(rec2pm_token_footprint(4, 32, 7, 5), u64::MAX);
    let v = unsafe { CStr::from_ptr(rec2pm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/rec2pm.h");
    let text = std::fs::read_to_string(&header).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(text.contains(&format!("{name}(")), "{name} missing from header");
        }
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-Wall", "-Werror"])
        .arg(&header)
        .status()
    else {
        return;
    };
    assert!(status.success(), "header does not compile");
}

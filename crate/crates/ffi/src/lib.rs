//! C ABI over `rec2pm`: load a model, stream interactions into a per-user
//! session, rank the catalog and persist the session memory.
//!
//! Every fallible function returns a [`Rec2pmStatus`]. On failure the
//! message is available from [`rec2pm_last_error`] on the same thread.
//! Handles are freed with their `_free` function; a session keeps its model
//! alive on its own.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use rec2pm::backbone::{ModelConfig, ModelParams};
use rec2pm::cli::params_io::{load_params, save_params};
use rec2pm::inference::{InferenceSession, SessionProtocol};
use rec2pm::memory::{load_memory, save_memory, token_footprint, MemoryState, UpdateMode};
use rec2pm::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rec2pmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Runtime = 6,
    Panic = 7,
}

/// Memory update mode codes.
pub const REC2PM_MODE_OVERWRITE: u8 = 0;
pub const REC2PM_MODE_APPEND: u8 = 1;

/// Loaded model parameters.
pub struct Rec2pmModel {
    params: Arc<ModelParams>,
}

/// Streaming state of one user.
pub struct Rec2pmSession {
    params: Arc<ModelParams>,
    mode: UpdateMode,
    memory: Option<MemoryState>,
    working: Vec<u32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn classify(e: &Error) -> Rec2pmStatus {
    match e {
        Error::Io(_) => Rec2pmStatus::Io,
        Error::BadMagic(_) | Error::BadVersion { .. } | Error::Crc { .. } | Error::Malformed(_) | Error::Json(_) => {
            Rec2pmStatus::Format
        }
        Error::ParamShape(_) | Error::Shape { .. } => Rec2pmStatus::Shape,
        Error::Config(_) | Error::Index { .. } | Error::EmptySession => Rec2pmStatus::InvalidArgument,
        _ => Rec2pmStatus::Runtime,
    }
}

struct Fail(Rec2pmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(classify(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Rec2pmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Rec2pmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            Rec2pmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(Rec2pmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(Rec2pmStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn mode_arg(code: u8) -> Result<UpdateMode, Fail> {
    match code {
        REC2PM_MODE_OVERWRITE => Ok(UpdateMode::Overwrite),
        REC2PM_MODE_APPEND => Ok(UpdateMode::Append),
        c => Err(Fail(Rec2pmStatus::InvalidArgument, format!("unknown mode code {c}"))),
    }
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rec2pm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rec2pm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads an `R2PW` parameter file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_model_load(path: *const c_char, out: *mut *mut Rec2pmModel) -> Rec2pmStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let params = load_params(path_arg(path)?)?.params;
        *out = Box::into_raw(Box::new(Rec2pmModel {
            params: Arc::new(params),
        }));
        Ok(())
    })
}

/// Randomly initialised memory model with segment length `l_seg`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_model_init(
    n_items: u32,
    d_model: u32,
    n_layers: u32,
    n_heads: u32,
    slots: u32,
    l_seg: u32,
    seed: u64,
    out: *mut *mut Rec2pmModel,
) -> Rec2pmStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let config = ModelConfig {
            n_items: n_items as usize,
            d_model: d_model as usize,
            n_layers: n_layers as usize,
            n_heads: n_heads as usize,
            slots: slots as usize,
            max_positions: l_seg as usize,
            with_memory: true,
        };
        let params = ModelParams::init(config, seed)?;
        *out = Box::into_raw(Box::new(Rec2pmModel {
            params: Arc::new(params),
        }));
        Ok(())
    })
}

/// Writes the model as an `R2PW` file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_model_save(model: *const Rec2pmModel, path: *const c_char) -> Rec2pmStatus {
    guard(|| {
        let m = deref(model, "model")?;
        save_params(&m.params, path_arg(path)?)?;
        Ok(())
    })
}

/// Catalog size of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_model_n_items(model: *const Rec2pmModel) -> u32 {
    model.as_ref().map_or(0, |m| m.params.config.n_items as u32)
}

/// Segment length of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_model_segment_len(model: *const Rec2pmModel) -> u32 {
    model.as_ref().map_or(0, |m| m.params.config.max_positions as u32)
}

/// # Safety
/// `model` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_model_free(model: *mut Rec2pmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Empty session over a memory model.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_session_new(
    model: *const Rec2pmModel,
    mode: u8,
    out: *mut *mut Rec2pmSession,
) -> Rec2pmStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let out = deref_mut(out, "out")?;
        let mode = mode_arg(mode)?;
        if !m.params.config.with_memory {
            return Err(Fail(Rec2pmStatus::InvalidArgument, "model has no memory".into()));
        }
        *out = Box::into_raw(Box::new(Rec2pmSession {
            params: Arc::clone(&m.params),
            mode,
            memory: None,
            working: Vec::new(),
        }));
        Ok(())
    })
}

impl Rec2pmSession {
    fn with_inner<R>(&mut self, f: impl FnOnce(&mut InferenceSession<'_>) -> rec2pm::Result<R>) -> rec2pm::Result<R> {
        let mut s = InferenceSession::new(&self.params, SessionProtocol::Iterative, self.mode, 0)?;
        s.memory = self.memory.take();
        s.working = std::mem::take(&mut self.working);
        let r = f(&mut s);
        self.memory = s.memory;
        self.working = s.working;
        r
    }
}

/// Appends `len` interactions; each completed segment updates the memory.
///
/// # Safety
/// `session` must come from this library; `items` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_session_ingest(session: *mut Rec2pmSession, items: *const u32, len: usize) -> Rec2pmStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        if len == 0 {
            return Ok(());
        }
        if items.is_null() {
            return Err(null("items"));
        }
        let items = std::slice::from_raw_parts(items, len);
        s.with_inner(|inner| inner.ingest_all(items))?;
        Ok(())
    })
}

/// Top `k` items by score. Writes `min(k, n_items)` ids and scores and
/// stores that count in `out_len`.
///
/// # Safety
/// `out_items` and `out_scores` must have room for `k` values.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_session_predict(
    session: *mut Rec2pmSession,
    k: usize,
    out_items: *mut u32,
    out_scores: *mut f32,
    out_len: *mut usize,
) -> Rec2pmStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let out_len = deref_mut(out_len, "out_len")?;
        if out_items.is_null() || out_scores.is_null() {
            return Err(null("output buffer"));
        }
        let ranking = s.with_inner(|inner| inner.predict_next())?;
        let top = ranking.top(k);
        for (i, &item) in top.iter().enumerate() {
            *out_items.add(i) = item;
            *out_scores.add(i) = ranking.scores[item as usize];
        }
        *out_len = top.len();
        Ok(())
    })
}

/// Items waiting in the current, not yet absorbed, segment.
///
/// # Safety
/// `session` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_session_pending(session: *const Rec2pmSession) -> usize {
    session.as_ref().map_or(0, |s| s.working.len())
}

/// Segments absorbed into the memory so far.
///
/// # Safety
/// `session` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_session_segments(session: *const Rec2pmSession) -> usize {
    session
        .as_ref()
        .and_then(|s| s.memory.as_ref())
        .map_or(0, |m| m.segments_absorbed)
}

/// Size of the memory file the session would write, 0 before the first
/// full segment.
///
/// # Safety
/// `session` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_session_memory_bytes(session: *const Rec2pmSession, out: *mut usize) -> Rec2pmStatus {
    guard(|| {
        let s = deref(session, "session")?;
        *deref_mut(out, "out")? = s.memory.as_ref().map_or(0, MemoryState::file_bytes);
        Ok(())
    })
}

/// Writes the session memory as an `R2PM` file.
///
/// # Safety
/// `session` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_session_save_memory(session: *const Rec2pmSession, path: *const c_char) -> Rec2pmStatus {
    guard(|| {
        let s = deref(session, "session")?;
        let m = s
            .memory
            .as_ref()
            .ok_or_else(|| Fail(Rec2pmStatus::InvalidArgument, "session has no memory yet".into()))?;
        save_memory(m, path_arg(path)?)?;
        Ok(())
    })
}

/// Replaces the session memory with an `R2PM` file and clears pending items.
///
/// # Safety
/// `session` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_session_load_memory(session: *mut Rec2pmSession, path: *const c_char) -> Rec2pmStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let m = load_memory(path_arg(path)?)?;
        let cfg = &s.params.config;
        if m.slots != cfg.slots || m.dim != cfg.d_model {
            return Err(Fail(
                Rec2pmStatus::Shape,
                format!(
                    "memory has {} slots of width {}, model expects {} of width {}",
                    m.slots, m.dim, cfg.slots, cfg.d_model
                ),
            ));
        }
        s.mode = m.mode;
        s.memory = Some(m);
        s.working.clear();
        Ok(())
    })
}

/// # Safety
/// `session` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rec2pm_session_free(session: *mut Rec2pmSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Float bytes of a token memory; `u64::MAX` for an unknown mode.
#[no_mangle]
pub extern "C" fn rec2pm_token_footprint(slots: u32, dim: u32, segments: u32, mode: u8) -> u64 {
    mode_arg(mode).map_or(u64::MAX, |m| {
        token_footprint(slots as usize, dim as usize, segments as usize, m)
    })
}

//! C interface to the metaverify engine.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns an
//! [`MvStatus`]; on failure `mv_last_error_message` describes the error for
//! the calling thread. Strings returned by the library stay valid until the
//! owning handle is freed (or, for the error message, until the next call on
//! the same thread).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use metaverify::audit_log::AuditLog;
use metaverify::camv::{CamvConfig, CamvError};
use metaverify::scenario::{load_scenario, Scenario, ScenarioError, ScenarioFile};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Validation = 4,
    Io = 5,
    /// The run abstained: no candidate response satisfies the constraints.
    NoFeasibleCandidate = 6,
    AllExpertsFailed = 7,
    InvalidConfig = 8,
    Panic = 9,
}

/// Overrides for one run. Negative or zero sentinels keep the scenario's
/// (or engine) default; see `mv_run_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MvRunOptions {
    /// Anchor threshold; 0 keeps the default.
    pub theta: u32,
    /// Verify-call budget; negative keeps the default.
    pub budget: i64,
    /// Gate threshold in [0, 1]; negative keeps the default.
    pub gate_threshold: f64,
    /// Run seed; negative keeps the default.
    pub seed: i64,
    /// Apply facts-consistency gating.
    pub use_facts: bool,
}

/// Opaque validated scenario.
pub struct MvScenario {
    inner: Scenario,
}

/// Opaque run result.
pub struct MvResult {
    answer_json: Option<CString>,
    audit_log: CString,
    verify_calls: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: MvStatus, msg: impl Into<String>) -> MvStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> MvStatus) -> MvStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(MvStatus::Panic, "internal panic"))
}

fn scenario_status(e: &ScenarioError) -> MvStatus {
    match e {
        ScenarioError::Io { .. } => MvStatus::Io,
        ScenarioError::Parse { .. } => MvStatus::Parse,
        ScenarioError::Validation { .. } => MvStatus::Validation,
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, MvStatus> {
    if p.is_null() {
        return Err(fail(MvStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MvStatus::InvalidUtf8, "argument is not valid UTF-8"))
}

fn to_cstring(s: String) -> CString {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed")
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty if none.
#[no_mangle]
pub extern "C" fn mv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn mv_run_options_default() -> MvRunOptions {
    MvRunOptions {
        theta: 0,
        budget: -1,
        gate_threshold: -1.0,
        seed: -1,
        use_facts: true,
    }
}

/// Parses and validates a scenario from a JSON string.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_scenario_from_json(json: *const c_char, out: *mut *mut MvScenario) -> MvStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MvStatus::NullPointer, "null output pointer");
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ScenarioFile::from_json(text).and_then(ScenarioFile::validate) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(MvScenario { inner }));
                MvStatus::Ok
            }
            Err(e) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// Loads and validates a scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_scenario_load(path: *const c_char, out: *mut *mut MvScenario) -> MvStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MvStatus::NullPointer, "null output pointer");
        }
        let path = match read_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_scenario(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(MvScenario { inner }));
                MvStatus::Ok
            }
            Err(e) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `scenario` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mv_scenario_free(scenario: *mut MvScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Runs the pipeline. A result handle is produced for successful runs and for
/// abstentions (`MV_STATUS_NO_FEASIBLE_CANDIDATE`, answer is NULL) so the
/// audit log can still be read.
///
/// # Safety
/// `scenario` must be a live handle; `options` may be NULL for defaults;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_run(
    scenario: *const MvScenario,
    options: *const MvRunOptions,
    out: *mut *mut MvResult,
) -> MvStatus {
    guarded(|| {
        if scenario.is_null() || out.is_null() {
            return fail(MvStatus::NullPointer, "null scenario or output pointer");
        }
        let sc = &(*scenario).inner;
        let opts = if options.is_null() {
            mv_run_options_default()
        } else {
            *options
        };
        let mut config = sc.config(&CamvConfig::default());
        if opts.theta > 0 {
            config.theta = opts.theta as usize;
        }
        if opts.budget >= 0 {
            config.b_max = Some(opts.budget as usize);
        }
        if opts.gate_threshold >= 0.0 {
            config.gate_threshold = opts.gate_threshold;
        }
        if opts.seed >= 0 {
            config.seed = opts.seed as u64;
        }
        config.use_facts = opts.use_facts;

        let mut log = AuditLog::new();
        let result = sc.run(&config, &mut log);
        let audit_log = to_cstring(log.to_lines());
        let (answer_json, verify_calls, status) = match result {
            Ok(o) => {
                let answer = serde_json::json!({
                    "answer": o.answer,
                    "expert_id": o.chosen.expert_id,
                    "trace": o.chosen.index,
                    "score": o.score,
                    "verify_calls": o.verify_calls,
                });
                (Some(to_cstring(answer.to_string())), o.verify_calls as u64, MvStatus::Ok)
            }
            Err(CamvError::NoFeasibleCandidate(e)) => {
                (None, 0, fail(MvStatus::NoFeasibleCandidate, e.to_string()))
            }
            Err(e @ CamvError::AllExpertsFailed(_)) => {
                return fail(MvStatus::AllExpertsFailed, e.to_string());
            }
            Err(e) => return fail(MvStatus::InvalidConfig, e.to_string()),
        };
        *out = Box::into_raw(Box::new(MvResult {
            answer_json,
            audit_log,
            verify_calls,
        }));
        status
    })
}

/// Answer summary as a JSON object, or NULL if the run abstained.
///
/// # Safety
/// `result` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn mv_result_answer_json(result: *const MvResult) -> *const c_char {
    match result.as_ref().and_then(|r| r.answer_json.as_ref()) {
        Some(s) => s.as_ptr(),
        None => ptr::null(),
    }
}

/// Audit log, one JSON entry per line.
///
/// # Safety
/// `result` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn mv_result_audit_log(result: *const MvResult) -> *const c_char {
    match result.as_ref() {
        Some(r) => r.audit_log.as_ptr(),
        None => ptr::null(),
    }
}

/// # Safety
/// `result` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn mv_result_verify_calls(result: *const MvResult) -> u64 {
    result.as_ref().map_or(0, |r| r.verify_calls)
}

/// # Safety
/// `result` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mv_result_free(result: *mut MvResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

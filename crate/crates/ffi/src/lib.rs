//! C ABI over the `micg` library.
//!
//! Every fallible function returns a [`MicgStatus`]; on failure the message
//! is available from [`micg_last_error_message`] on the same thread. Strings
//! returned through out-parameters are owned by the caller and released with
//! [`micg_string_free`]. Handles are opaque and released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use micg::fitness::NetParams;
use micg::hierarchy::{self, AllWeights, HierarchyConfig, HierarchyError, IndicatorVector, MissingPolicy};
use micg::inference::{self, BeliefState, GaussianBelief};
use micg::phenotyping::{self, CertaintyConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MicgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseError = 4,
    Validation = 5,
    Incomplete = 6,
    Internal = 7,
}

/// Opaque hierarchy configuration.
pub struct MicgHierarchy(HierarchyConfig);

/// Opaque surrogate network.
pub struct MicgNetwork(NetParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type FfiResult<T> = Result<T, (MicgStatus, String)>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> MicgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MicgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MicgStatus::Internal
        }
    }
}

fn fail<E: std::fmt::Display>(status: MicgStatus) -> impl Fn(E) -> (MicgStatus, String) {
    move |e| (status, e.to_string())
}

fn hierarchy_status(e: &HierarchyError) -> MicgStatus {
    match e {
        HierarchyError::Json(_) => MicgStatus::ParseError,
        HierarchyError::IncompleteObservation { .. } | HierarchyError::MissingScore { .. } => MicgStatus::Incomplete,
        _ => MicgStatus::Validation,
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err((MicgStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (MicgStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| (MicgStatus::NullPointer, format!("{name} is null")))
}

unsafe fn write_out<T>(out: *mut T, v: T, name: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err((MicgStatus::NullPointer, format!("{name} is null")));
    }
    out.write(v);
    Ok(())
}

fn to_c(s: String) -> FfiResult<*mut c_char> {
    CString::new(s).map(CString::into_raw).map_err(fail(MicgStatus::Internal))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread; do not free.
#[no_mangle]
pub extern "C" fn micg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn micg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn micg_hierarchy_default(out: *mut *mut MicgHierarchy) -> MicgStatus {
    guard(|| write_out(out, Box::into_raw(Box::new(MicgHierarchy(HierarchyConfig::default_config()))), "out"))
}

/// Parses and validates a hierarchy JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn micg_hierarchy_from_json(json: *const c_char, out: *mut *mut MicgHierarchy) -> MicgStatus {
    guard(|| {
        let s = str_arg(json, "json")?;
        let cfg = HierarchyConfig::from_json_validated(s).map_err(|e| (hierarchy_status(&e), e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(MicgHierarchy(cfg))), "out")
    })
}

/// # Safety
/// `h` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn micg_hierarchy_free(h: *mut MicgHierarchy) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn micg_hierarchy_indicator_count(h: *const MicgHierarchy, out: *mut usize) -> MicgStatus {
    guard(|| write_out(out, ref_arg(h, "hierarchy")?.0.indicators.len(), "out"))
}

/// Writes the violation list as a JSON array to `out_json` (caller frees).
/// Returns `Validation` when the list is non-empty.
///
/// # Safety
/// `h` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn micg_hierarchy_validate(h: *const MicgHierarchy, out_json: *mut *mut c_char) -> MicgStatus {
    let mut n = 0;
    let status = guard(|| {
        let v = hierarchy::validate_hierarchy(&ref_arg(h, "hierarchy")?.0);
        n = v.len();
        let s = serde_json::to_string(&v).map_err(fail(MicgStatus::Internal))?;
        write_out(out_json, to_c(s)?, "out_json")
    });
    if status == MicgStatus::Ok && n > 0 {
        set_error(format!("{n} hierarchy violation(s)"));
        return MicgStatus::Validation;
    }
    status
}

/// Computes one index report from an indicator-vector JSON object. With
/// `beliefs_json` NULL the hierarchy's default weights are used; otherwise
/// indicator weights come from the belief state. The report's `computed_at`
/// is the observation's `observed_at`.
///
/// # Safety
/// `h` must be a live handle, strings NUL-terminated, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn micg_compute_index_json(
    h: *const MicgHierarchy,
    observation_json: *const c_char,
    beliefs_json: *const c_char,
    out_json: *mut *mut c_char,
) -> MicgStatus {
    guard(|| {
        let cfg = &ref_arg(h, "hierarchy")?.0;
        let x: IndicatorVector = serde_json::from_str(str_arg(observation_json, "observation_json")?).map_err(fail(MicgStatus::ParseError))?;
        let weights = if beliefs_json.is_null() {
            AllWeights::defaults(cfg)
        } else {
            let b = BeliefState::from_json(str_arg(beliefs_json, "beliefs_json")?).map_err(fail(MicgStatus::ParseError))?;
            let w = inference::beliefs_to_weights(&b.beliefs, cfg).map_err(fail(MicgStatus::Validation))?;
            AllWeights::with_indicator_weights(cfg, w)
        };
        let report = hierarchy::compute_micg(&x, &weights, cfg, MissingPolicy::Error, x.observed_at)
            .map_err(|e| (hierarchy_status(&e), e.to_string()))?;
        write_out(out_json, to_c(serde_json::to_string(&report).map_err(fail(MicgStatus::Internal))?)?, "out_json")
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn micg_certainty_score(
    response_time: f64,
    alpha_certainty: f64,
    t_floor: f64,
    t_cap: f64,
    out: *mut f64,
) -> MicgStatus {
    guard(|| {
        let cfg = CertaintyConfig { alpha_certainty, t_cap, t_floor };
        let c = phenotyping::certainty_score(response_time, &cfg).map_err(fail(MicgStatus::InvalidArgument))?;
        write_out(out, c, "out")
    })
}

#[no_mangle]
pub extern "C" fn micg_sigmoid(w: f64) -> f64 {
    inference::sigmoid(w)
}

/// Gaussian belief update from `len` binary observations.
///
/// # Safety
/// `column` must point to `len` readable bytes (may be NULL when `len` is 0);
/// the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn micg_posterior_update(
    prior_mean: f64,
    prior_variance: f64,
    column: *const u8,
    len: usize,
    out_mean: *mut f64,
    out_variance: *mut f64,
) -> MicgStatus {
    guard(|| {
        let col: &[u8] = if len == 0 {
            &[]
        } else if column.is_null() {
            return Err((MicgStatus::NullPointer, "column is null".into()));
        } else {
            std::slice::from_raw_parts(column, len)
        };
        if out_mean.is_null() || out_variance.is_null() {
            return Err((MicgStatus::NullPointer, "output pointer is null".into()));
        }
        let prior = GaussianBelief { indicator_id: String::new(), mean: prior_mean, variance: prior_variance };
        let post = inference::posterior_update(&prior, col).map_err(fail(MicgStatus::InvalidArgument))?;
        write_out(out_mean, post.mean, "out_mean")?;
        write_out(out_variance, post.variance, "out_variance")
    })
}

/// # Safety
/// `json` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn micg_network_from_json(json: *const c_char, out: *mut *mut MicgNetwork) -> MicgStatus {
    guard(|| {
        let p = NetParams::from_json(str_arg(json, "json")?).map_err(fail(MicgStatus::ParseError))?;
        write_out(out, Box::into_raw(Box::new(MicgNetwork(p))), "out")
    })
}

/// # Safety
/// `net` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn micg_network_input_dim(net: *const MicgNetwork, out: *mut usize) -> MicgStatus {
    guard(|| write_out(out, ref_arg(net, "network")?.0.spec.input_dim, "out"))
}

/// # Safety
/// `net` must be a live handle, `input` must point to `len` doubles and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn micg_network_forward(net: *const MicgNetwork, input: *const f64, len: usize, out: *mut f64) -> MicgStatus {
    guard(|| {
        let n = &ref_arg(net, "network")?.0;
        if input.is_null() {
            return Err((MicgStatus::NullPointer, "input is null".into()));
        }
        let y = n.forward(std::slice::from_raw_parts(input, len)).map_err(fail(MicgStatus::InvalidArgument))?;
        write_out(out, y, "out")
    })
}

/// # Safety
/// `net` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn micg_network_free(net: *mut MicgNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

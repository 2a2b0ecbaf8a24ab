//! C ABI over the core testbed.
//!
//! Conventions:
//! * every fallible call returns an [`OdesaStatus`]; `ODESA_STATUS_OK` is 0;
//! * handles are opaque pointers created and freed by this library only;
//! * strings returned through `char**` out-parameters are owned by the
//!   caller and must be released with [`odesa_string_free`];
//! * on any non-OK status, [`odesa_last_error_message`] returns a
//!   human-readable description of the most recent failure on this thread.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use odesa::experiments::{
    builtin_environment, check_assumptions, environment_from_file, gtd_etd_td_reports,
    run_experiment, EnvironmentBundle, ExperimentConfig,
};
use odesa::mdp::ProblemFile;
use odesa::spectral::{etd_expected_system, gtd_expected_system};

/// Status codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdesaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad inputs or violated model invariants.
    ValidationError = 3,
    /// I/O or solver breakdown.
    RuntimeError = 4,
    /// An output buffer was smaller than the required length.
    BufferTooSmall = 5,
    /// The library panicked internally; state is still consistent.
    InternalPanic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(error: &odesa::Error) -> OdesaStatus {
    match error.exit_code() {
        2 => OdesaStatus::RuntimeError,
        _ => OdesaStatus::ValidationError,
    }
}

fn guard<F: FnOnce() -> OdesaStatus>(body: F) -> OdesaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {message}"));
            OdesaStatus::InternalPanic
        }
    }
}

/// Opaque environment handle (model, policies, features, interest).
pub struct OdesaBundle {
    inner: EnvironmentBundle,
}

unsafe fn bundle_ref<'a>(handle: *const OdesaBundle) -> Option<&'a EnvironmentBundle> {
    unsafe { handle.as_ref().map(|b| &b.inner) }
}

unsafe fn read_utf8<'a>(ptr: *const c_char) -> Result<&'a str, OdesaStatus> {
    if ptr.is_null() {
        set_error("null string argument".into());
        return Err(OdesaStatus::NullPointer);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|e| {
        set_error(format!("invalid UTF-8 argument: {e}"));
        OdesaStatus::InvalidUtf8
    })
}

fn emit_string(out: *mut *mut c_char, text: String) -> OdesaStatus {
    if out.is_null() {
        set_error("null output pointer".into());
        return OdesaStatus::NullPointer;
    }
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            OdesaStatus::Ok
        }
        Err(e) => {
            set_error(format!("string contains interior NUL: {e}"));
            OdesaStatus::RuntimeError
        }
    }
}

/// Returns the most recent error message of this thread, or NULL when none
/// was recorded. The caller owns the string (free with
/// [`odesa_string_free`]); the slot is cleared.
#[no_mangle]
pub extern "C" fn odesa_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow_mut().take() {
        Some(c) => c.into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Frees a string returned by this library. NULL is a no-op.
#[no_mangle]
pub extern "C" fn odesa_string_free(s: *mut c_char) {
    if !s.is_null() {
        unsafe { drop(CString::from_raw(s)) };
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn odesa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a builtin environment (`divergence_star`, `random_offpolicy`,
/// `tabular_chain`); the seed only affects the random instance.
///
/// # Safety
/// `name` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn odesa_bundle_builtin(
    name: *const c_char,
    seed: u64,
    out: *mut *mut OdesaBundle,
) -> OdesaStatus {
    guard(|| {
        let name = match unsafe { read_utf8(name) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        if out.is_null() {
            set_error("null output pointer".into());
            return OdesaStatus::NullPointer;
        }
        match builtin_environment(name, seed) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(OdesaBundle { inner })) };
                OdesaStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Parses a problem document (the same JSON schema the CLI loads from
/// files; policies must include "pi" and "mu").
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn odesa_bundle_from_json(
    json: *const c_char,
    out: *mut *mut OdesaBundle,
) -> OdesaStatus {
    guard(|| {
        let text = match unsafe { read_utf8(json) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        if out.is_null() {
            set_error("null output pointer".into());
            return OdesaStatus::NullPointer;
        }
        let build = || -> odesa::Result<EnvironmentBundle> {
            let file = ProblemFile::from_json(text)?;
            let (mdp, mut policies, features) = file.build()?;
            let target = policies.remove("pi").ok_or_else(|| {
                odesa::Error::InvalidConfig("problem document needs a policy named 'pi'".into())
            })?;
            let behavior = policies.remove("mu").ok_or_else(|| {
                odesa::Error::InvalidConfig("problem document needs a policy named 'mu'".into())
            })?;
            Ok(EnvironmentBundle {
                label: "ffi_problem".into(),
                mdp,
                target,
                behavior,
                features,
                interest: None,
                generator_retries: 0,
            })
        };
        match build() {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(OdesaBundle { inner })) };
                OdesaStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Loads a problem document from a file path.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn odesa_bundle_from_file(
    path: *const c_char,
    out: *mut *mut OdesaBundle,
) -> OdesaStatus {
    guard(|| {
        let path = match unsafe { read_utf8(path) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        if out.is_null() {
            set_error("null output pointer".into());
            return OdesaStatus::NullPointer;
        }
        match environment_from_file(&PathBuf::from(path)) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(OdesaBundle { inner })) };
                OdesaStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Releases a bundle handle. NULL is a no-op.
///
/// # Safety
/// `bundle` must have been created by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn odesa_bundle_free(bundle: *mut OdesaBundle) {
    if !bundle.is_null() {
        unsafe { drop(Box::from_raw(bundle)) };
    }
}

/// Number of states; 0 on a NULL handle.
#[no_mangle]
pub extern "C" fn odesa_bundle_n_states(bundle: *const OdesaBundle) -> usize {
    unsafe { bundle_ref(bundle) }.map_or(0, |b| b.mdp.n_states())
}

/// Number of actions; 0 on a NULL handle.
#[no_mangle]
pub extern "C" fn odesa_bundle_n_actions(bundle: *const OdesaBundle) -> usize {
    unsafe { bundle_ref(bundle) }.map_or(0, |b| b.mdp.n_actions())
}

/// Feature dimension; 0 on a NULL handle.
#[no_mangle]
pub extern "C" fn odesa_bundle_feature_dim(bundle: *const OdesaBundle) -> usize {
    unsafe { bundle_ref(bundle) }.map_or(0, |b| b.features.dim())
}

/// Runs the assumption checklist at the given λ and learning-rate family;
/// writes the report as a JSON string.
///
/// # Safety
/// `bundle` must be a live handle; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn odesa_check_assumptions_json(
    bundle: *const OdesaBundle,
    lambda: f64,
    b1: f64,
    b2: f64,
    beta: f64,
    out_json: *mut *mut c_char,
) -> OdesaStatus {
    guard(|| {
        let Some(bundle) = (unsafe { bundle_ref(bundle) }) else {
            set_error("null bundle handle".into());
            return OdesaStatus::NullPointer;
        };
        let report = check_assumptions(bundle, lambda, (b1, b2, beta));
        match serde_json::to_string_pretty(&report) {
            Ok(text) => emit_string(out_json, text),
            Err(e) => {
                set_error(e.to_string());
                OdesaStatus::RuntimeError
            }
        }
    })
}

/// Spectral reports (TD mean field, gradient block system, emphatic
/// system) at the given λ, as a JSON string.
///
/// # Safety
/// `bundle` must be a live handle; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn odesa_spectral_reports_json(
    bundle: *const OdesaBundle,
    lambda: f64,
    out_json: *mut *mut c_char,
) -> OdesaStatus {
    guard(|| {
        let Some(bundle) = (unsafe { bundle_ref(bundle) }) else {
            set_error("null bundle handle".into());
            return OdesaStatus::NullPointer;
        };
        match gtd_etd_td_reports(bundle, lambda) {
            Ok(reports) => match serde_json::to_string_pretty(&reports) {
                Ok(text) => emit_string(out_json, text),
                Err(e) => {
                    set_error(e.to_string());
                    OdesaStatus::RuntimeError
                }
            },
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

fn write_fixed_point(
    fixed: Option<Vec<f64>>,
    out: *mut f64,
    len: usize,
    expected: usize,
) -> OdesaStatus {
    if out.is_null() {
        set_error("null output buffer".into());
        return OdesaStatus::NullPointer;
    }
    if len < expected {
        set_error(format!("buffer holds {len} values, need {expected}"));
        return OdesaStatus::BufferTooSmall;
    }
    match fixed {
        Some(v) => {
            let slice = unsafe { std::slice::from_raw_parts_mut(out, expected) };
            slice.copy_from_slice(&v);
            OdesaStatus::Ok
        }
        None => {
            set_error("system is singular; no fixed point".into());
            OdesaStatus::ValidationError
        }
    }
}

/// Writes the gradient learner's fixed point `−A⁻¹b` into `out`
/// (`len ≥ feature_dim` values).
///
/// # Safety
/// `bundle` must be a live handle; `out` must point to at least `len` f64s.
#[no_mangle]
pub unsafe extern "C" fn odesa_gtd_fixed_point(
    bundle: *const OdesaBundle,
    lambda: f64,
    out: *mut f64,
    len: usize,
) -> OdesaStatus {
    guard(|| {
        let Some(b) = (unsafe { bundle_ref(bundle) }) else {
            set_error("null bundle handle".into());
            return OdesaStatus::NullPointer;
        };
        match gtd_expected_system(&b.mdp, &b.target, &b.behavior, lambda, &b.features) {
            Ok(system) => write_fixed_point(
                system.fixed_point().map(|v| v.as_slice().to_vec()),
                out,
                len,
                b.features.dim(),
            ),
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Writes the emphatic learner's fixed point `−A⁻¹b` into `out`
/// (`len ≥ feature_dim` values); unit interest unless the bundle carries one.
///
/// # Safety
/// `bundle` must be a live handle; `out` must point to at least `len` f64s.
#[no_mangle]
pub unsafe extern "C" fn odesa_etd_fixed_point(
    bundle: *const OdesaBundle,
    lambda: f64,
    out: *mut f64,
    len: usize,
) -> OdesaStatus {
    guard(|| {
        let Some(b) = (unsafe { bundle_ref(bundle) }) else {
            set_error("null bundle handle".into());
            return OdesaStatus::NullPointer;
        };
        let interest = b.interest_or_ones();
        match etd_expected_system(&b.mdp, &b.target, &b.behavior, lambda, &interest, &b.features)
        {
            Ok(system) => write_fixed_point(
                system.fixed_point().map(|v| v.as_slice().to_vec()),
                out,
                len,
                b.features.dim(),
            ),
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Runs a full batch experiment from a config JSON document (same schema
/// as the CLI `run` subcommand); artifacts land in the config's
/// `output_dir`.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn odesa_run_experiment_json(config_json: *const c_char) -> OdesaStatus {
    guard(|| {
        let text = match unsafe { read_utf8(config_json) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let run = || -> odesa::Result<()> {
            let config = ExperimentConfig::from_json(text)?;
            run_experiment(&config)?;
            Ok(())
        };
        match run() {
            Ok(()) => OdesaStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

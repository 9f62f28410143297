//! C ABI for the levytd PIDE solver.
//!
//! Configurations and run results are opaque handles; functions return
//! status codes and the last error message is retrievable per thread.
//! The generated header lands in `include/levytd.h`.
//!
//! Typical use from C:
//!
//! ```c
//! LevytdConfig *cfg = levytd_config_new();
//! levytd_config_set(cfg, "problem", "pure_jump_1d");
//! levytd_config_set(cfg, "iterations", "400");
//! LevytdRun *run = NULL;
//! if (levytd_train(cfg, &run) == LEVYTD_STATUS_OK) {
//!     printf("Y0 = %f\n", levytd_run_y0(run));
//! }
//! levytd_run_free(run);
//! levytd_config_free(cfg);
//! ```

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use levytd::cli::{self, CliError, RunConfig};
use levytd::trainer::TrainerError;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevytdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Diverged = 4,
    Io = 5,
    Internal = 6,
}

/// Opaque experiment configuration.
pub struct LevytdConfig {
    inner: RunConfig,
}

/// Opaque result of one completed training run.
pub struct LevytdRun {
    final_y0: f64,
    exact_y0: f64,
    rel_error: f64,
    updates: u64,
    seconds: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &CliError) -> LevytdStatus {
    match err {
        CliError::Config(_) => LevytdStatus::InvalidConfig,
        CliError::Io(_) => LevytdStatus::Io,
        CliError::Trainer(TrainerError::Diverged { .. })
        | CliError::Trainer(TrainerError::NonFiniteGradient { .. }) => LevytdStatus::Diverged,
        CliError::Trainer(TrainerError::Config(_)) => LevytdStatus::InvalidConfig,
        _ => LevytdStatus::Internal,
    }
}

fn guard(body: impl FnOnce() -> LevytdStatus) -> LevytdStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            LevytdStatus::Internal
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, LevytdStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(LevytdStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        LevytdStatus::InvalidArgument
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn levytd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent error on this thread; empty when none.
/// The pointer stays valid until the next failing call on the thread.
#[no_mangle]
pub extern "C" fn levytd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Fresh configuration with the benchmark defaults. Free with
/// `levytd_config_free`.
#[no_mangle]
pub extern "C" fn levytd_config_new() -> *mut LevytdConfig {
    Box::into_raw(Box::new(LevytdConfig {
        inner: RunConfig::default(),
    }))
}

/// Set one configuration field by its config-file key (`problem`, `d`, `M`,
/// `N`, `iterations`, `td_step`, `T`, `lambda`, `jump`, `jump_params`,
/// `epsilon`, `theta`, `lr0`, `lr_drop_every`, `lr_drop_factor`, `seed`,
/// `out_dir`, `log_every`, `paths`).
///
/// # Safety
/// `config` must come from `levytd_config_new`; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn levytd_config_set(
    config: *mut LevytdConfig,
    key: *const c_char,
    value: *const c_char,
) -> LevytdStatus {
    guard(|| {
        let Some(config) = (unsafe { config.as_mut() }) else {
            set_error("config is null");
            return LevytdStatus::NullPointer;
        };
        let (key, value) = match unsafe { (cstr(key, "key"), cstr(value, "value")) } {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match config.inner.set_field(key, value) {
            Ok(()) => LevytdStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                LevytdStatus::InvalidConfig
            }
        }
    })
}

/// Apply a flat `key = value` config file on top of the current values.
///
/// # Safety
/// `config` must come from `levytd_config_new`; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn levytd_config_load_file(
    config: *mut LevytdConfig,
    path: *const c_char,
) -> LevytdStatus {
    guard(|| {
        let Some(config) = (unsafe { config.as_mut() }) else {
            set_error("config is null");
            return LevytdStatus::NullPointer;
        };
        let path = match unsafe { cstr(path, "path") } {
            Ok(p) => PathBuf::from(p),
            Err(s) => return s,
        };
        match config.inner.apply_file(&path) {
            Ok(()) => LevytdStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `config` must be null or a pointer from `levytd_config_new`, not freed
/// twice.
#[no_mangle]
pub unsafe extern "C" fn levytd_config_free(config: *mut LevytdConfig) {
    if !config.is_null() {
        drop(unsafe { Box::from_raw(config) });
    }
}

/// Train the configuration and return a result handle in `out`. No files
/// are written; pair with `levytd_run_artifacts` for the CSV outputs.
///
/// # Safety
/// `config` must come from `levytd_config_new`; `out` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn levytd_train(
    config: *const LevytdConfig,
    out: *mut *mut LevytdRun,
) -> LevytdStatus {
    guard(|| {
        let Some(config) = (unsafe { config.as_ref() }) else {
            set_error("config is null");
            return LevytdStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out is null");
            return LevytdStatus::NullPointer;
        }
        match train_in_memory(&config.inner) {
            Ok(run) => {
                unsafe { *out = Box::into_raw(Box::new(run)) };
                LevytdStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

fn train_in_memory(config: &RunConfig) -> Result<LevytdRun, CliError> {
    config.validate()?;
    let problem = config.build_problem()?;
    let opts = levytd::trainer::TrainOptions {
        trajectories: config.m,
        intervals: config.n,
        iterations: config.iterations,
        td_step: config.td_step,
        seed: config.seed,
        lr0: config.lr0,
        lr_drop_every: config.lr_drop_every,
        lr_drop_factor: config.lr_drop_factor,
        log_every: config.log_every,
        stop_gradient_target: false,
        trace_buffer: false,
    };
    let start = std::time::Instant::now();
    let state = levytd::trainer::train(&problem, &opts, |_| {})?;
    let (n1, _) = state
        .net
        .forward_values(0.0, &problem.initial_point, problem.dim)?;
    let final_y0 = n1[0];
    let exact_y0 = problem.y0_exact().unwrap_or(f64::NAN);
    let rel_error = if exact_y0 != 0.0 {
        ((final_y0 - exact_y0) / exact_y0).abs()
    } else {
        (final_y0 - exact_y0).abs()
    };
    Ok(LevytdRun {
        final_y0,
        exact_y0,
        rel_error,
        updates: state.update_count as u64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Run the configuration end to end, writing `metrics.csv`,
/// `trajectories.csv`, and `summary.txt` under its output directory.
///
/// # Safety
/// `config` must come from `levytd_config_new`.
#[no_mangle]
pub unsafe extern "C" fn levytd_run_artifacts(config: *const LevytdConfig) -> LevytdStatus {
    guard(|| {
        let Some(config) = (unsafe { config.as_ref() }) else {
            set_error("config is null");
            return LevytdStatus::NullPointer;
        };
        match cli::run(&config.inner) {
            Ok(_) => LevytdStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Final network estimate of Y₀ = u(0, ξ). NaN for a null handle.
///
/// # Safety
/// `run` must be null or a pointer from `levytd_train`.
#[no_mangle]
pub unsafe extern "C" fn levytd_run_y0(run: *const LevytdRun) -> f64 {
    unsafe { run.as_ref() }.map_or(f64::NAN, |r| r.final_y0)
}

/// Exact Y₀ of the problem, NaN when unknown or for a null handle.
///
/// # Safety
/// `run` must be null or a pointer from `levytd_train`.
#[no_mangle]
pub unsafe extern "C" fn levytd_run_exact_y0(run: *const LevytdRun) -> f64 {
    unsafe { run.as_ref() }.map_or(f64::NAN, |r| r.exact_y0)
}

/// |estimate − exact| / |exact|. NaN for a null handle.
///
/// # Safety
/// `run` must be null or a pointer from `levytd_train`.
#[no_mangle]
pub unsafe extern "C" fn levytd_run_rel_error(run: *const LevytdRun) -> f64 {
    unsafe { run.as_ref() }.map_or(f64::NAN, |r| r.rel_error)
}

/// Optimizer steps taken. 0 for a null handle.
///
/// # Safety
/// `run` must be null or a pointer from `levytd_train`.
#[no_mangle]
pub unsafe extern "C" fn levytd_run_updates(run: *const LevytdRun) -> u64 {
    unsafe { run.as_ref() }.map_or(0, |r| r.updates)
}

/// Wall-clock training time in seconds. NaN for a null handle.
///
/// # Safety
/// `run` must be null or a pointer from `levytd_train`.
#[no_mangle]
pub unsafe extern "C" fn levytd_run_seconds(run: *const LevytdRun) -> f64 {
    unsafe { run.as_ref() }.map_or(f64::NAN, |r| r.seconds)
}

/// # Safety
/// `run` must be null or a pointer from `levytd_train`, not freed twice.
#[no_mangle]
pub unsafe extern "C" fn levytd_run_free(run: *mut LevytdRun) {
    if !run.is_null() {
        drop(unsafe { Box::from_raw(run) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use std::ptr;

    fn set(cfg: *mut LevytdConfig, key: &str, value: &str) -> LevytdStatus {
        let (k, v) = (CString::new(key).unwrap(), CString::new(value).unwrap());
        unsafe { levytd_config_set(cfg, k.as_ptr(), v.as_ptr()) }
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(levytd_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn train_round_trip_through_the_c_abi() {
        let cfg = levytd_config_new();
        assert_eq!(set(cfg, "M", "8"), LevytdStatus::Ok);
        assert_eq!(set(cfg, "N", "4"), LevytdStatus::Ok);
        assert_eq!(set(cfg, "iterations", "1"), LevytdStatus::Ok);
        let mut run: *mut LevytdRun = ptr::null_mut();
        assert_eq!(unsafe { levytd_train(cfg, &mut run) }, LevytdStatus::Ok);
        assert!(!run.is_null());
        unsafe {
            assert!(levytd_run_y0(run).is_finite());
            assert_eq!(levytd_run_exact_y0(run), 1.0);
            assert!(levytd_run_rel_error(run).is_finite());
            assert_eq!(levytd_run_updates(run), 4);
            levytd_run_free(run);
            levytd_config_free(cfg);
        }
    }

    #[test]
    fn bad_keys_and_values_report_invalid_config() {
        let cfg = levytd_config_new();
        assert_eq!(set(cfg, "warp", "9"), LevytdStatus::InvalidConfig);
        let msg = unsafe { CStr::from_ptr(levytd_last_error()) };
        assert!(msg.to_str().unwrap().contains("warp"));
        assert_eq!(set(cfg, "M", "not-a-number"), LevytdStatus::InvalidConfig);
        unsafe { levytd_config_free(cfg) };
    }

    #[test]
    fn null_pointers_are_rejected_not_dereferenced() {
        let mut run: *mut LevytdRun = ptr::null_mut();
        assert_eq!(
            unsafe { levytd_train(ptr::null(), &mut run) },
            LevytdStatus::NullPointer
        );
        let cfg = levytd_config_new();
        assert_eq!(
            unsafe { levytd_config_set(cfg, ptr::null(), ptr::null()) },
            LevytdStatus::NullPointer
        );
        unsafe {
            assert!(levytd_run_y0(ptr::null()).is_nan());
            assert_eq!(levytd_run_updates(ptr::null()), 0);
            levytd_run_free(ptr::null_mut());
            levytd_config_free(cfg);
            levytd_config_free(ptr::null_mut());
        }
    }

    #[test]
    fn divergent_configs_map_to_typed_statuses() {
        let cfg = levytd_config_new();
        assert_eq!(set(cfg, "problem", "robustness_1d"), LevytdStatus::Ok);
        assert_eq!(set(cfg, "jump", "exponential"), LevytdStatus::Ok);
        assert_eq!(set(cfg, "jump_params", "0.5"), LevytdStatus::Ok);
        assert_eq!(set(cfg, "M", "4"), LevytdStatus::Ok);
        assert_eq!(set(cfg, "N", "2"), LevytdStatus::Ok);
        assert_eq!(set(cfg, "iterations", "1"), LevytdStatus::Ok);
        let mut run: *mut LevytdRun = ptr::null_mut();
        // Exponential law with lambda0 <= 1 has a divergent compensator.
        let status = unsafe { levytd_train(cfg, &mut run) };
        assert_ne!(status, LevytdStatus::Ok);
        assert!(run.is_null());
        unsafe { levytd_config_free(cfg) };
    }

    #[test]
    fn generated_header_exposes_the_api() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/levytd.h");
        let text = std::fs::read_to_string(header).expect("header generated by build.rs");
        for symbol in [
            "levytd_config_new",
            "levytd_config_set",
            "levytd_train",
            "levytd_run_y0",
            "levytd_run_free",
            "LEVYTD_H",
        ] {
            assert!(text.contains(symbol), "missing {symbol}");
        }
    }
}

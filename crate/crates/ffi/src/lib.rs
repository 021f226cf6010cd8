//! C ABI over the `misa` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new` or
//! producer functions and released with the matching `*_free`. Every
//! fallible function returns a [`MisaStatus`]; on failure the message is
//! kept per thread and can be read with [`misa_last_error`]. Panics are
//! caught at the boundary and reported as [`MisaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use misa::abstraction::{wasserstein1, DiscreteMetric};
use misa::blockmdp::{make_toy_family, EnvironmentFamily, FixedAction, ReplayBuffer, ToyConfig, TOY_TRAIN_ENVS};
use misa::experiments::{self, ExperimentConfig, RunOutput};
use misa::icp::misa_linear;
use misa::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MisaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    /// A property suite reported violations or a hypothesis failed.
    Violation = 4,
    Numerical = 5,
    /// The caller's buffer is too small; the required size was written.
    BufferTooSmall = 6,
    Io = 7,
    Panic = 8,
}

/// Simulated family of linear environments.
pub struct MisaFamily(EnvironmentFamily);

/// Transitions grouped by environment.
pub struct MisaBuffer(ReplayBuffer);

/// Result table of one experiment run.
pub struct MisaRun {
    output: RunOutput,
    csv: Vec<u8>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> MisaStatus {
    match e {
        Error::Config { .. } | Error::Json(_) | Error::Misconfigured(_) | Error::InvalidGraph(_) => MisaStatus::Config,
        Error::NonFinite(_) | Error::RankDeficient { .. } | Error::ReducibleChain(_) => MisaStatus::Numerical,
        Error::HypothesisViolated(_) | Error::NotBisimulation(_) => MisaStatus::Violation,
        Error::Io(_) | Error::Csv(_) => MisaStatus::Io,
        _ => MisaStatus::InvalidInput,
    }
}

/// Runs `f`, records its error message and converts panics.
fn guard(f: impl FnOnce() -> Result<(), (MisaStatus, String)>) -> MisaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MisaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside misa");
            MisaStatus::Panic
        }
    }
}

fn lib(e: Error) -> (MisaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MisaStatus, String) {
    (MisaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (MisaStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MisaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MisaStatus::InvalidInput, format!("{what} is not UTF-8")))
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Copies `src` into a caller buffer of `cap` bytes and writes the needed
/// size (without terminator) to `needed`. Text is NUL-terminated when it fits.
unsafe fn copy_out(src: &[u8], buf: *mut u8, cap: usize, needed: *mut usize, nul: bool) -> Result<(), (MisaStatus, String)> {
    if !needed.is_null() {
        *needed = src.len();
    }
    let want = src.len() + usize::from(nul);
    if cap < want || buf.is_null() {
        return Err((MisaStatus::BufferTooSmall, format!("{want} bytes needed, {cap} given")));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    if nul {
        *buf.add(src.len()) = 0;
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn misa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf`
/// (NUL-terminated). `needed` receives the message length.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn misa_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> MisaStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_out(msg.as_bytes(), buf.cast(), cap, needed, true) {
        Ok(()) => MisaStatus::Ok,
        Err((s, _)) => s,
    }
}

/// Toy family of three variables. `config_json` may be null for the
/// defaults, or a JSON object with any of `noise_std`, `reward_noise_std`,
/// `train_shifts`, `heldout_values`, `gamma`.
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn misa_toy_family_new(config_json: *const c_char, out: *mut *mut MisaFamily) -> MisaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: ToyConfig = if config_json.is_null() {
            ToyConfig::default()
        } else {
            serde_json::from_str(text(config_json, "config_json")?).map_err(|e| lib(e.into()))?
        };
        store(out, MisaFamily(make_toy_family(&cfg).map_err(lib)?));
        Ok(())
    })
}

/// # Safety
/// `family` is null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn misa_family_free(family: *mut MisaFamily) {
    if !family.is_null() {
        drop(Box::from_raw(family));
    }
}

/// Number of state variables, or 0 for a null handle.
///
/// # Safety
/// `family` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn misa_family_k(family: *const MisaFamily) -> usize {
    family.as_ref().map_or(0, |f| f.0.k())
}

/// Number of toy training environments; their ids are `0..count`.
#[no_mangle]
pub extern "C" fn misa_toy_train_env_count() -> usize {
    TOY_TRAIN_ENVS.len()
}

/// Collects `n_steps` transitions per listed environment under action 0.
///
/// # Safety
/// `family` is a live handle, `env_ids` holds `n_envs` entries, `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn misa_family_collect(
    family: *const MisaFamily,
    env_ids: *const usize,
    n_envs: usize,
    n_steps: usize,
    seed: u64,
    out: *mut *mut MisaBuffer,
) -> MisaStatus {
    guard(|| {
        let fam = family.as_ref().ok_or_else(|| null("family"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ids = slice(env_ids, n_envs, "env_ids")?;
        let buf = fam.0.collect(ids, &FixedAction(0), n_steps, seed).map_err(lib)?;
        store(out, MisaBuffer(buf));
        Ok(())
    })
}

/// # Safety
/// `buffer` is null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn misa_buffer_free(buffer: *mut MisaBuffer) {
    if !buffer.is_null() {
        drop(Box::from_raw(buffer));
    }
}

/// Total number of transitions, or 0 for a null handle.
///
/// # Safety
/// `buffer` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn misa_buffer_len(buffer: *const MisaBuffer) -> usize {
    buffer.as_ref().map_or(0, |b| b.0.len())
}

/// Linear abstraction of the buffer at level `alpha`. The selected
/// variable indices are written in increasing order to `vars` (capacity
/// `cap`); `n_vars` receives their count.
///
/// # Safety
/// `buffer` is a live handle, `vars` is valid for `cap` entries, `n_vars`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn misa_linear_abstraction(
    buffer: *const MisaBuffer,
    alpha: f64,
    vars: *mut usize,
    cap: usize,
    n_vars: *mut usize,
) -> MisaStatus {
    guard(|| {
        let buf = buffer.as_ref().ok_or_else(|| null("buffer"))?;
        if n_vars.is_null() {
            return Err(null("n_vars"));
        }
        let found: Vec<usize> = misa_linear(&buf.0, alpha).map_err(lib)?.abstraction.iter().map(|v| v.0).collect();
        *n_vars = found.len();
        if found.len() > cap || (vars.is_null() && !found.is_empty()) {
            return Err((MisaStatus::BufferTooSmall, format!("{} entries needed, {cap} given", found.len())));
        }
        if !found.is_empty() {
            ptr::copy_nonoverlapping(found.as_ptr(), vars, found.len());
        }
        Ok(())
    })
}

/// Wasserstein-1 distance between distributions `p` and `q` over `n`
/// points with row-major distance matrix `dist` (`n * n` entries).
///
/// # Safety
/// `p` and `q` hold `n` entries, `dist` holds `n * n`, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn misa_wasserstein1(
    p: *const f64,
    q: *const f64,
    dist: *const f64,
    n: usize,
    out: *mut f64,
) -> MisaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cells = n.checked_mul(n).ok_or_else(|| (MisaStatus::InvalidInput, "n too large".to_string()))?;
        let metric = DiscreteMetric::from_matrix(n, slice(dist, cells, "dist")?.to_vec()).map_err(lib)?;
        *out = wasserstein1(slice(p, n, "p")?, slice(q, n, "q")?, &metric).map_err(lib)?;
        Ok(())
    })
}

/// Runs the experiment described by a JSON config (the CLI's format).
/// Property violations do not fail the call; query them with
/// [`misa_run_violation_count`].
///
/// # Safety
/// `config_json` is NUL-terminated and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn misa_run_experiment(config_json: *const c_char, out: *mut *mut MisaRun) -> MisaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ExperimentConfig::from_json(text(config_json, "config_json")?).map_err(lib)?;
        let output = experiments::run(&cfg, None).map_err(lib)?;
        let csv = output.to_csv().map_err(lib)?;
        store(out, MisaRun { output, csv });
        Ok(())
    })
}

/// # Safety
/// `run` is null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn misa_run_free(run: *mut MisaRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of result rows, or 0 for a null handle.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn misa_run_row_count(run: *const MisaRun) -> usize {
    run.as_ref().map_or(0, |r| r.output.rows.len())
}

/// Number of failed property checks, or 0 for a null handle.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn misa_run_violation_count(run: *const MisaRun) -> usize {
    run.as_ref().map_or(0, |r| r.output.violations.len())
}

/// Copies the CSV table, NUL-terminated, into `buf`. `needed` receives the
/// CSV length in bytes; call with `cap = 0` to query it.
///
/// # Safety
/// `run` is a live handle, `buf` is valid for `cap` bytes, `needed` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn misa_run_csv(run: *const MisaRun, buf: *mut c_char, cap: usize, needed: *mut usize) -> MisaStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        copy_out(&r.csv, buf.cast(), cap, needed, true)
    })
}

//! C ABI over the core library, for binding from other languages.
//!
//! Conventions:
//! - Handles (`DfmModel`, `DfmEmbedder`) are opaque; create them with the
//!   `_new`/`_load` functions and release them with the matching `_free`.
//! - Every fallible call returns a [`DfmStatus`]; `DFM_STATUS_OK` is zero.
//!   Codes 1 through 4 carry the same meaning as the CLI's exit codes, and
//!   the remaining codes are boundary failures that can only happen through
//!   this ABI (null handle, non-UTF-8 path, caught panic).
//! - On failure, [`dfm_last_error_message`] returns a human-readable reason.
//!   The message lives in thread-local storage: it stays valid until the
//!   same thread makes another call into this library, and it describes the
//!   most recent failing call on that thread.
//! - Buffers are caller-allocated. Input lengths are taken as explicit
//!   `len` parameters; output buffers must be at least as long as the
//!   documented size (usually the model's data dimension).
//! - No call transfers ownership of caller memory, and no call keeps a
//!   pointer past its return.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dfm::checkpoint;
use dfm::error::DfmError;
use dfm::net::{ConditionSet, LayerSizes, NetParams};
use dfm::rng::{self, tag};
use dfm::sampler::{self, SamplerConfig, Solver};
use dfm::search::Embedder;

/// Result of every fallible ABI call. Zero is success; 1 through 4 mirror
/// the CLI exit codes (I/O, configuration, numeric failure, invalid input);
/// the rest are failures of the ABI boundary itself.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DfmStatus {
    Ok = 0,
    Io = 1,
    Config = 2,
    Numeric = 3,
    Input = 4,
    NullPointer = 5,
    Utf8 = 6,
    Panic = 7,
}

/// Integration rule for [`dfm_generate`].
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DfmSolver {
    Euler = 0,
    Midpoint = 1,
    Rk4 = 2,
}

impl From<DfmSolver> for Solver {
    fn from(s: DfmSolver) -> Solver {
        match s {
            DfmSolver::Euler => Solver::Euler,
            DfmSolver::Midpoint => Solver::Midpoint,
            DfmSolver::Rk4 => Solver::Rk4,
        }
    }
}

/// Opaque handle to a velocity-field model.
pub struct DfmModel {
    params: NetParams,
}

/// Opaque handle to a fixed random-projection embedder.
pub struct DfmEmbedder {
    inner: Embedder,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul stripped above"));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
}

fn status_of(e: &DfmError) -> DfmStatus {
    match e.exit_code() {
        1 => DfmStatus::Io,
        2 => DfmStatus::Config,
        3 => DfmStatus::Numeric,
        _ => DfmStatus::Input,
    }
}

fn fail(e: DfmError) -> DfmStatus {
    let status = status_of(&e);
    set_error(&e.to_string());
    status
}

fn fail_null(what: &str) -> DfmStatus {
    set_error(&format!("null pointer: {what}"));
    DfmStatus::NullPointer
}

/// Runs an ABI body with a cleared error slot and a panic fence, so a bug in
/// the library can never unwind across the C boundary.
fn guard(f: impl FnOnce() -> DfmStatus) -> DfmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            DfmStatus::Panic
        }
    }
}

unsafe fn path_from(ptr: *const c_char, what: &str) -> Result<&'static Path, DfmStatus> {
    if ptr.is_null() {
        return Err(fail_null(what));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(DfmStatus::Utf8)
        }
    }
}

/// Library version as a static NUL-terminated string. Never null; do not
/// free it.
#[no_mangle]
pub extern "C" fn dfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on the calling thread, or an empty
/// string if the last call succeeded. Valid until this thread's next call
/// into the library; do not free it.
#[no_mangle]
pub extern "C" fn dfm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a freshly initialized model. On success writes a handle to
/// `out`; release it with [`dfm_model_free`].
///
/// # Safety
/// `out` must be a valid pointer to a `DfmModel*`.
#[no_mangle]
pub unsafe extern "C" fn dfm_model_new(
    d: usize,
    hidden: usize,
    depth: usize,
    classes: usize,
    pitches: usize,
    velocities: usize,
    seed: u64,
    out: *mut *mut DfmModel,
) -> DfmStatus {
    guard(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let sizes = LayerSizes { d, hidden, depth, classes, pitches, velocities };
        match NetParams::init(sizes, seed) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(DfmModel { params }));
                DfmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a model from a checkpoint file written by [`dfm_model_save`] or
/// the CLI trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer to a
/// `DfmModel*`.
#[no_mangle]
pub unsafe extern "C" fn dfm_model_load(path: *const c_char, out: *mut *mut DfmModel) -> DfmStatus {
    guard(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match path_from(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match checkpoint::load(path) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(DfmModel { params }));
                DfmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Saves a model to a checkpoint file readable by [`dfm_model_load`] and
/// the CLI.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dfm_model_save(model: *const DfmModel, path: *const c_char) -> DfmStatus {
    guard(|| {
        let model = match model.as_ref() {
            Some(m) => m,
            None => return fail_null("model"),
        };
        let path = match path_from(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match checkpoint::save(&model.params, path) {
            Ok(()) => DfmStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Releases a model handle. Passing null is a no-op.
///
/// # Safety
/// `model` must be null or a handle obtained from this library that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn dfm_model_free(model: *mut DfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// The model's data dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfm_model_dim(model: *const DfmModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.sizes.d)
}

/// Evaluates the velocity distribution at state `x` (length `d`, which must
/// equal the model's dimension), time `t` in [0, 1], and the given condition
/// ids. Writes the predicted mean to `mu_out` (model dimension values) and
/// the shared log-variance to `log_var_out` (one value).
///
/// # Safety
/// `model` must be a live handle; `x` must point to `d` doubles; `mu_out`
/// must have room for the model dimension; `log_var_out` for one double.
#[no_mangle]
pub unsafe extern "C" fn dfm_forward(
    model: *const DfmModel,
    x: *const f64,
    d: usize,
    t: f64,
    class_id: usize,
    pitch_id: usize,
    velocity_id: usize,
    mu_out: *mut f64,
    log_var_out: *mut f64,
) -> DfmStatus {
    guard(|| {
        let model = match model.as_ref() {
            Some(m) => m,
            None => return fail_null("model"),
        };
        if x.is_null() {
            return fail_null("x");
        }
        if mu_out.is_null() {
            return fail_null("mu_out");
        }
        if log_var_out.is_null() {
            return fail_null("log_var_out");
        }
        let x = std::slice::from_raw_parts(x, d);
        let cond = ConditionSet::new(class_id, pitch_id, velocity_id);
        match model.params.forward(x, t, cond) {
            Ok(dist) => {
                std::ptr::copy_nonoverlapping(dist.mu.as_ptr(), mu_out, dist.mu.len());
                *log_var_out = dist.log_var;
                DfmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Draws one sample for a condition by integrating from fresh noise, and
/// writes it to `out` (model dimension values). The stream is derived from
/// `seed` and `sample_index` exactly as the CLI's `sample` command derives
/// per-sample streams, so a given (seed, index) pair reproduces the CLI's
/// output bit for bit under the same sampler settings.
///
/// # Safety
/// `model` must be a live handle and `out` must have room for the model
/// dimension.
#[no_mangle]
pub unsafe extern "C" fn dfm_generate(
    model: *const DfmModel,
    class_id: usize,
    pitch_id: usize,
    velocity_id: usize,
    num_steps: usize,
    solver: DfmSolver,
    tau: f64,
    seed: u64,
    sample_index: u64,
    out: *mut f64,
) -> DfmStatus {
    guard(|| {
        let model = match model.as_ref() {
            Some(m) => m,
            None => return fail_null("model"),
        };
        if out.is_null() {
            return fail_null("out");
        }
        let cfg = SamplerConfig { num_steps, solver: solver.into(), tau, seed: 0 };
        let cond = ConditionSet::new(class_id, pitch_id, velocity_id);
        let mut r = rng::derive_rng(seed, &[tag::CANDIDATE, 0, sample_index]);
        match sampler::generate(&model.params, cond, &cfg, &mut r) {
            Ok(sample) => {
                std::ptr::copy_nonoverlapping(sample.as_ptr(), out, sample.len());
                DfmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Candidate-count-indexed sampling temperature: the schedule used by
/// best-of-N search, `min(tau_max, tau0 * sqrt(2 ln(N+1)))`.
#[no_mangle]
pub extern "C" fn dfm_temperature(n: u64, tau0: f64, tau_max: f64) -> f64 {
    sampler::temperature(n, tau0, tau_max)
}

/// Creates the fixed random-projection embedder used for scoring. On
/// success writes a handle to `out`; release it with [`dfm_embedder_free`].
///
/// # Safety
/// `out` must be a valid pointer to a `DfmEmbedder*`.
#[no_mangle]
pub unsafe extern "C" fn dfm_embedder_new(
    d: usize,
    embed_dim: usize,
    seed: u64,
    out: *mut *mut DfmEmbedder,
) -> DfmStatus {
    guard(|| {
        if out.is_null() {
            return fail_null("out");
        }
        match Embedder::new(d, embed_dim, seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DfmEmbedder { inner }));
                DfmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases an embedder handle. Passing null is a no-op.
///
/// # Safety
/// `embedder` must be null or a handle obtained from this library that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn dfm_embedder_free(embedder: *mut DfmEmbedder) {
    if !embedder.is_null() {
        drop(Box::from_raw(embedder));
    }
}

/// The embedder's output dimension, or 0 for a null handle.
///
/// # Safety
/// `embedder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfm_embedder_dim(embedder: *const DfmEmbedder) -> usize {
    embedder.as_ref().map_or(0, |e| e.inner.embed_dim())
}

/// Embeds a sample of length `d` (the embedder's input dimension) into a
/// unit vector written to `out` (embedder output dimension values).
///
/// # Safety
/// `embedder` must be a live handle, `x` must point to `d` doubles, and
/// `out` must have room for the embedder's output dimension.
#[no_mangle]
pub unsafe extern "C" fn dfm_embed(
    embedder: *const DfmEmbedder,
    x: *const f64,
    d: usize,
    out: *mut f64,
) -> DfmStatus {
    guard(|| {
        let embedder = match embedder.as_ref() {
            Some(e) => e,
            None => return fail_null("embedder"),
        };
        if x.is_null() {
            return fail_null("x");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let x = std::slice::from_raw_parts(x, d);
        match embedder.inner.embed(x) {
            Ok(e) => {
                std::ptr::copy_nonoverlapping(e.as_ptr(), out, e.len());
                DfmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Cosine similarity between two vectors of equal length `len`, written to
/// `out`. Fails with the input-domain status if either vector has (near)
/// zero norm, matching the scoring rules used by search.
///
/// # Safety
/// `a` and `b` must point to `len` doubles each; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn dfm_cosine(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> DfmStatus {
    guard(|| {
        if a.is_null() {
            return fail_null("a");
        }
        if b.is_null() {
            return fail_null("b");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let a = std::slice::from_raw_parts(a, len);
        let b = std::slice::from_raw_parts(b, len);
        match dfm::search::prompt_score(a, b) {
            Ok(v) => {
                *out = v;
                DfmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

//! C ABI over the simulation core.
//!
//! Objects cross the boundary as opaque handles created by `svlv_*_new` and
//! released by the matching `svlv_*_free`. Every fallible call returns an
//! [`SvlvStatus`]; the message of the last failure on the calling thread is
//! available from [`svlv_last_error`]. Kernels, tables, initial
//! configurations and test functions are passed as JSON text.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use svlv::coalescing::estimate_gamma_e;
use svlv::harness::{make_engine, EngineChoice};
use svlv::observables::{integrate, TestFn};
use svlv::perturbation::table_from_json;
use svlv::sbm::feller_moments;
use svlv::rng::{stream, tags};
use svlv::simulator::{run, Engine, RateModel};
use svlv::{Error, InitialSpec, KernelSpec, PerturbationTable, ScalingParams};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvlvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    BudgetExceeded = 4,
    BufferTooSmall = 5,
    Panic = 6,
    Internal = 7,
}

/// Engine selector for [`svlv_sim_new`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvlvEngine {
    Auto = 0,
    Dense = 1,
    Thinning = 2,
}

/// Opaque rate model.
pub struct SvlvModel {
    model: Arc<RateModel>,
}

/// Opaque running simulation.
pub struct SvlvSim {
    engine: Box<dyn Engine + Send>,
    scaling: ScalingParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SvlvStatus {
    match e {
        Error::BudgetExceeded { .. } => SvlvStatus::BudgetExceeded,
        Error::Io(_) => SvlvStatus::Internal,
        _ => SvlvStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and converting panics.
fn guard<F: FnOnce() -> Result<(), SvlvStatus>>(f: F) -> SvlvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvlvStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside svlv".into());
            SvlvStatus::Panic
        }
    }
}

fn fail(e: Error) -> SvlvStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, SvlvStatus> {
    if p.is_null() {
        set_error("null string argument".into());
        return Err(SvlvStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string argument is not UTF-8".into());
        SvlvStatus::InvalidUtf8
    })
}

fn nonnull<T>(p: *const T) -> Result<(), SvlvStatus> {
    if p.is_null() {
        set_error("null pointer argument".into());
        Err(SvlvStatus::NullPointer)
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn svlv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn svlv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds the perturbed model at scale `n`. `table_json` may be NULL for the voter model.
///
/// # Safety
/// String arguments must be NUL-terminated or NULL; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn svlv_model_new(
    kernel_json: *const c_char,
    table_json: *const c_char,
    n: u64,
    out: *mut *mut SvlvModel,
) -> SvlvStatus {
    guard(|| {
        nonnull(out)?;
        let kernel = KernelSpec::from_json(read_str(kernel_json)?).map_err(fail)?;
        let table = if table_json.is_null() {
            PerturbationTable::zero(kernel.dim())
        } else {
            table_from_json(kernel.dim(), read_str(table_json)?, None).map_err(fail)?
        };
        let model = RateModel::perturbed(kernel, n, table).map_err(fail)?;
        *out = Box::into_raw(Box::new(SvlvModel { model: Arc::new(model) }));
        Ok(())
    })
}

/// Builds a Lotka-Volterra model with parameters `theta0`, `theta1` at scale `n`.
///
/// # Safety
/// `kernel_json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn svlv_model_new_lv(
    kernel_json: *const c_char,
    theta0: f64,
    theta1: f64,
    n: u64,
    out: *mut *mut SvlvModel,
) -> SvlvStatus {
    guard(|| {
        nonnull(out)?;
        let kernel = KernelSpec::from_json(read_str(kernel_json)?).map_err(fail)?;
        let table = PerturbationTable::lv(&kernel, theta0, theta1);
        let model = RateModel::perturbed(kernel, n, table).map_err(fail)?;
        *out = Box::into_raw(Box::new(SvlvModel { model: Arc::new(model) }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `svlv_model_new*` and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn svlv_model_free(model: *mut SvlvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Starts a simulation of `model` from `initial_json` (site list or generator spec).
/// The random stream is `rng::stream(seed, [SIMULATE])`, as for `svlv simulate`.
///
/// # Safety
/// `model` must be a live handle; `initial_json` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn svlv_sim_new(
    model: *const SvlvModel,
    initial_json: *const c_char,
    seed: u64,
    engine: SvlvEngine,
    out: *mut *mut SvlvSim,
) -> SvlvStatus {
    guard(|| {
        nonnull(model)?;
        nonnull(out)?;
        let m = Arc::clone(&(*model).model);
        let scaling = ScalingParams::new(m.n(), m.kernel()).map_err(fail)?;
        let spec = InitialSpec::from_json(read_str(initial_json)?).map_err(fail)?;
        let config = spec.build(m.dim(), Some(&scaling)).map_err(fail)?;
        let choice = match engine {
            SvlvEngine::Auto => EngineChoice::Auto,
            SvlvEngine::Dense => EngineChoice::Dense,
            SvlvEngine::Thinning => EngineChoice::Thinning,
        };
        let rng = stream(seed, &[tags::SIMULATE]);
        let engine = make_engine(choice, m, config, rng).map_err(fail)?;
        *out = Box::into_raw(Box::new(SvlvSim { engine, scaling }));
        Ok(())
    })
}

/// # Safety
/// `sim` must come from [`svlv_sim_new`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn svlv_sim_free(sim: *mut SvlvSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Advances to `horizon` with at most `budget` flips; writes the number of flips to `events`.
///
/// # Safety
/// `sim` must be a live handle; `events` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn svlv_sim_run(sim: *mut SvlvSim, horizon: f64, budget: u64, events: *mut u64) -> SvlvStatus {
    guard(|| {
        nonnull(sim)?;
        let s = &mut *sim;
        let summary = run(s.engine.as_mut(), horizon, &mut [], budget).map_err(fail)?;
        if !events.is_null() {
            *events = summary.events;
        }
        Ok(())
    })
}

/// Current time.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn svlv_sim_time(sim: *const SvlvSim) -> f64 {
    if sim.is_null() {
        return f64::NAN;
    }
    (*sim).engine.time()
}

/// Number of occupied sites.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn svlv_sim_occupied(sim: *const SvlvSim) -> u64 {
    if sim.is_null() {
        return 0;
    }
    (*sim).engine.config().len() as u64
}

/// Total mass `X_t(1) = |xi_t| / N`.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn svlv_sim_mass(sim: *const SvlvSim) -> f64 {
    if sim.is_null() {
        return f64::NAN;
    }
    let s = &*sim;
    s.engine.config().len() as f64 * s.scaling.atom_mass()
}

/// Copies occupied sites in lexicographic order as `d` consecutive `int32` per site.
/// `len` receives the number of sites; returns `BufferTooSmall` when `cap < len * d`.
///
/// # Safety
/// `buf` must hold `cap` writable `int32` (may be NULL when `cap` is 0); `len` writable.
#[no_mangle]
pub unsafe extern "C" fn svlv_sim_sites(sim: *const SvlvSim, buf: *mut i32, cap: usize, len: *mut usize) -> SvlvStatus {
    guard(|| {
        nonnull(sim)?;
        nonnull(len)?;
        let s = &*sim;
        let d = s.engine.model().dim();
        let sites = s.engine.config().sorted();
        *len = sites.len();
        if cap < sites.len() * d {
            set_error(format!("buffer holds {cap} values, {} needed", sites.len() * d));
            return Err(SvlvStatus::BufferTooSmall);
        }
        if !sites.is_empty() {
            nonnull(buf)?;
        }
        for (i, site) in sites.iter().enumerate() {
            ptr::copy_nonoverlapping(site.coords(d).as_ptr(), buf.add(i * d), d);
        }
        Ok(())
    })
}

/// `X_t(phi)` for a test function given as JSON, evaluated at the current time.
///
/// # Safety
/// `sim` must be a live handle; `phi_json` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn svlv_sim_integrate(sim: *const SvlvSim, phi_json: *const c_char, out: *mut f64) -> SvlvStatus {
    guard(|| {
        nonnull(sim)?;
        nonnull(out)?;
        let s = &*sim;
        let phi = TestFn::from_json(read_str(phi_json)?).map_err(fail)?;
        phi.validate(s.engine.model().dim()).map_err(fail)?;
        *out = integrate(s.engine.config(), &s.scaling, &phi, s.engine.time());
        Ok(())
    })
}

/// Mean and variance of the Feller diffusion `dZ = theta Z dt + sqrt(b Z) dW` at time `t`.
///
/// # Safety
/// `mean` and `var` must be writable.
#[no_mangle]
pub unsafe extern "C" fn svlv_feller_moments(z0: f64, t: f64, b: f64, theta: f64, mean: *mut f64, var: *mut f64) -> SvlvStatus {
    guard(|| {
        nonnull(mean)?;
        nonnull(var)?;
        if !(z0 >= 0.0 && t >= 0.0 && b >= 0.0) {
            set_error(format!("need z0, t, b >= 0 (got {z0}, {t}, {b})"));
            return Err(SvlvStatus::InvalidArgument);
        }
        let (m, v) = feller_moments(z0, t, b, theta);
        *mean = m;
        *var = v;
        Ok(())
    })
}

/// Richardson-extrapolated escape probability `gamma_e` with its standard error.
///
/// # Safety
/// `kernel_json` NUL-terminated; `estimate` and `se` writable.
#[no_mangle]
pub unsafe extern "C" fn svlv_estimate_gamma_e(
    kernel_json: *const c_char,
    horizon: f64,
    reps: u64,
    seed: u64,
    estimate: *mut f64,
    se: *mut f64,
) -> SvlvStatus {
    guard(|| {
        nonnull(estimate)?;
        nonnull(se)?;
        let kernel = KernelSpec::from_json(read_str(kernel_json)?).map_err(fail)?;
        let lad = estimate_gamma_e(&kernel, horizon, reps, seed).map_err(fail)?;
        *estimate = lad.extrapolated.estimate;
        *se = lad.extrapolated.se;
        Ok(())
    })
}

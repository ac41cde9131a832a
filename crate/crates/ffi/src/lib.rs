//! C ABI over `hint-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new` functions and
//! released by the matching `*_free`. Every fallible call returns a [`HintStatus`];
//! on failure the message is kept per thread and read with
//! [`hint_last_error_message`]. Strings returned by the library are freed with
//! [`hint_string_free`]. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hint::envs::{Action, Env, EnvConfig, WorldState};
use hint::metrics;
use hint::orchestrator::{self, EvalTarget, HintConfig, OrchestratorError};
use hint::pseudorl::{vtrace_targets, VTraceInput};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HintStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingCheckpoint = 4,
    RunDir = 5,
    Io = 6,
    Numeric = 7,
    Internal = 8,
    Panic = 9,
}

/// Policy evaluated by [`hint_eval`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HintEvalTarget {
    Student = 0,
    Teacher = 1,
}

/// Headline numbers of an evaluation or a training run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HintEvalSummary {
    pub success_rate: f64,
    pub steps_taken: f64,
    pub episodes: usize,
    pub seeds: usize,
}

/// Opaque run configuration.
pub struct HintConfigHandle {
    inner: HintConfig,
}

/// Opaque environment with one live episode.
pub struct HintEpisodeHandle {
    env: Env,
    state: WorldState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(HintStatus, String);

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        let status = match &e {
            OrchestratorError::Config(_) => HintStatus::Config,
            OrchestratorError::MissingCheckpoint { .. } => HintStatus::MissingCheckpoint,
            OrchestratorError::RunDir(_) => HintStatus::RunDir,
            OrchestratorError::Io(_) | OrchestratorError::Serde(_) => HintStatus::Io,
            OrchestratorError::Grad(_) => HintStatus::Numeric,
            _ => HintStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HintStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus the last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HintStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HintStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            HintStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(HintStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(HintStatus::NullArgument, format!("{name} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(HintStatus::NullArgument, format!("{name} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(HintStatus::NullArgument, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, v: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(HintStatus::NullArgument, format!("{name} is null")));
    }
    out.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hint_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn hint_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hint_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Configuration for a named preset, at desk scale unless `paper_scale`.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hint_config_preset(
    preset: *const c_char,
    paper_scale: bool,
    out: *mut *mut HintConfigHandle,
) -> HintStatus {
    guard(|| {
        let p = str_arg(preset, "preset")?.parse().map_err(|e| Failure(HintStatus::Config, format!("{e}")))?;
        let h = Box::new(HintConfigHandle { inner: HintConfig::preset(p, paper_scale) });
        put(out, Box::into_raw(h), "out")
    })
}

/// Configuration parsed from TOML layered over its preset.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hint_config_from_toml(text: *const c_char, out: *mut *mut HintConfigHandle) -> HintStatus {
    guard(|| {
        let cfg = HintConfig::from_toml(str_arg(text, "text")?)?;
        put(out, Box::into_raw(Box::new(HintConfigHandle { inner: cfg })), "out")
    })
}

/// The configuration as TOML; free the result with [`hint_string_free`].
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hint_config_to_toml(cfg: *const HintConfigHandle, out: *mut *mut c_char) -> HintStatus {
    guard(|| {
        let text = ref_arg(cfg, "cfg")?.inner.to_toml();
        let s = CString::new(text).map_err(|e| Failure(HintStatus::Internal, e.to_string()))?;
        put(out, s.into_raw(), "out")
    })
}

/// Sets the run seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hint_config_set_seed(cfg: *mut HintConfigHandle, seed: u64) -> HintStatus {
    guard(|| {
        mut_arg(cfg, "cfg")?.inner.seed = seed;
        Ok(())
    })
}

/// Sets the student timestep budget.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hint_config_set_student_timesteps(cfg: *mut HintConfigHandle, steps: u64) -> HintStatus {
    guard(|| {
        let c = &mut mut_arg(cfg, "cfg")?.inner;
        let old = c.student_timesteps;
        c.student_timesteps = steps;
        if let Err(e) = c.validate() {
            c.student_timesteps = old;
            return Err(e.into());
        }
        Ok(())
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `cfg` must be null or a live handle, and is dangling afterwards.
#[no_mangle]
pub unsafe extern "C" fn hint_config_free(cfg: *mut HintConfigHandle) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Pretrains the teacher into `run_dir`; `out` receives its evaluated success rate.
///
/// # Safety
/// `cfg` must be a live handle, `run_dir` a NUL-terminated path, `out` writable or null.
#[no_mangle]
pub unsafe extern "C" fn hint_pretrain_teacher(
    cfg: *const HintConfigHandle,
    run_dir: *const c_char,
    out_success: *mut f64,
) -> HintStatus {
    guard(|| {
        let m = orchestrator::pretrain(&ref_arg(cfg, "cfg")?.inner, &PathBuf::from(str_arg(run_dir, "run_dir")?))?;
        if !out_success.is_null() {
            out_success.write(m.success_rate);
        }
        Ok(())
    })
}

/// Trains (or resumes) a run in `run_dir`; `out` receives the final evaluation.
///
/// # Safety
/// `cfg` must be a live handle, `run_dir` a NUL-terminated path, `out` writable or null.
#[no_mangle]
pub unsafe extern "C" fn hint_train(
    cfg: *const HintConfigHandle,
    run_dir: *const c_char,
    resume: bool,
    out: *mut HintEvalSummary,
) -> HintStatus {
    guard(|| {
        let m = orchestrator::train_hint(&ref_arg(cfg, "cfg")?.inner, &PathBuf::from(str_arg(run_dir, "run_dir")?), resume)?;
        if !out.is_null() {
            let fe = m.final_eval.ok_or_else(|| Failure(HintStatus::Internal, "run has no final evaluation".into()))?;
            out.write(HintEvalSummary {
                success_rate: fe.success_rate,
                steps_taken: fe.steps_taken,
                episodes: fe.episodes,
                seeds: fe.seeds.len(),
            });
        }
        Ok(())
    })
}

/// Evaluates the run's student or teacher over `episodes` × `n_seeds`.
///
/// # Safety
/// `cfg` must be a live handle, `run_dir` a NUL-terminated path, `seeds` readable
/// for `n_seeds` values, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hint_eval(
    cfg: *const HintConfigHandle,
    run_dir: *const c_char,
    target: HintEvalTarget,
    episodes: usize,
    seeds: *const u64,
    n_seeds: usize,
    out: *mut HintEvalSummary,
) -> HintStatus {
    guard(|| {
        let cfg = &ref_arg(cfg, "cfg")?.inner;
        let seeds = slice_arg(seeds, n_seeds, "seeds")?;
        let target = match target {
            HintEvalTarget::Student => EvalTarget::Student,
            HintEvalTarget::Teacher => EvalTarget::Teacher,
        };
        let rep = orchestrator::eval_run(cfg, &PathBuf::from(str_arg(run_dir, "run_dir")?), target, episodes, seeds)
            .map_err(|e| match e {
                OrchestratorError::Metrics(m) => invalid(m.to_string()),
                e => e.into(),
            })?;
        put(
            out,
            HintEvalSummary {
                success_rate: rep.success_rate,
                steps_taken: rep.steps_taken,
                episodes: rep.episodes,
                seeds: rep.seeds.len(),
            },
            "out",
        )
    })
}

/// Starts an episode of a preset environment.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hint_episode_new(preset: *const c_char, seed: u64, out: *mut *mut HintEpisodeHandle) -> HintStatus {
    guard(|| {
        let cfg = EnvConfig::named(str_arg(preset, "preset")?).map_err(|e| Failure(HintStatus::Config, e.to_string()))?;
        let env = Env::new(cfg).map_err(|e| Failure(HintStatus::Config, e.to_string()))?;
        let state = env.reset_seeded(seed);
        put(out, Box::into_raw(Box::new(HintEpisodeHandle { env, state })), "out")
    })
}

/// Number of agents acting in the episode.
///
/// # Safety
/// `ep` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hint_episode_n_agents(ep: *const HintEpisodeHandle, out: *mut usize) -> HintStatus {
    guard(|| put(out, ref_arg(ep, "ep")?.env.n_agents(), "out"))
}

/// Advances the episode with one action code per agent
/// (0 up, 1 down, 2 left, 3 right, 4 stay, 5 extinguish).
/// `reward` receives the team reward, `done` whether the episode ended.
///
/// # Safety
/// `ep` must be a live handle, `actions` readable for `n` codes, `reward` and
/// `done` writable or null.
#[no_mangle]
pub unsafe extern "C" fn hint_episode_step(
    ep: *mut HintEpisodeHandle,
    actions: *const u8,
    n: usize,
    reward: *mut f64,
    done: *mut bool,
) -> HintStatus {
    guard(|| {
        let ep = mut_arg(ep, "ep")?;
        let codes = slice_arg(actions, n, "actions")?;
        let acts: Vec<Action> = codes
            .iter()
            .map(|&c| Action::from_code(c).ok_or_else(|| invalid(format!("unknown action code {c}"))))
            .collect::<Result<_, _>>()?;
        let r = ep.env.step(&mut ep.state, &acts).map_err(|e| invalid(e.to_string()))?;
        if !reward.is_null() {
            reward.write(r.rewards.iter().sum());
        }
        if !done.is_null() {
            done.write(r.done);
        }
        Ok(())
    })
}

/// Whether the episode's task is accomplished.
///
/// # Safety
/// `ep` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hint_episode_success(ep: *const HintEpisodeHandle, out: *mut bool) -> HintStatus {
    guard(|| {
        let ep = ref_arg(ep, "ep")?;
        put(out, ep.env.success(&ep.state), "out")
    })
}

/// Releases an episode. Null is ignored.
///
/// # Safety
/// `ep` must be null or a live handle, and is dangling afterwards.
#[no_mangle]
pub unsafe extern "C" fn hint_episode_free(ep: *mut HintEpisodeHandle) {
    if !ep.is_null() {
        drop(Box::from_raw(ep));
    }
}

/// V-trace targets for one segment of length `n`, written to `out_v`.
///
/// # Safety
/// The input arrays must be readable and `out_v` writable for `n` values.
#[no_mangle]
pub unsafe extern "C" fn hint_vtrace_targets(
    rewards: *const f64,
    values: *const f64,
    target_logp: *const f64,
    behavior_logp: *const f64,
    dones: *const bool,
    n: usize,
    bootstrap: f64,
    gamma: f64,
    out_v: *mut f64,
) -> HintStatus {
    guard(|| {
        let inp = VTraceInput {
            rewards: slice_arg(rewards, n, "rewards")?,
            values: slice_arg(values, n, "values")?,
            bootstrap,
            target_logp: slice_arg(target_logp, n, "target_logp")?,
            behavior_logp: slice_arg(behavior_logp, n, "behavior_logp")?,
            dones: slice_arg(dones, n, "dones")?,
            gamma,
        };
        let b = vtrace_targets(&inp).map_err(|e| invalid(e.to_string()))?;
        if n > 0 && out_v.is_null() {
            return Err(Failure(HintStatus::NullArgument, "out_v is null".into()));
        }
        for (i, v) in b.v.into_iter().enumerate() {
            out_v.add(i).write(v);
        }
        Ok(())
    })
}

/// Histogram KL(student ‖ teacher) between two row-major point sets of width `dims`.
///
/// # Safety
/// `teacher` must be readable for `n_teacher * dims` values, `student` for
/// `n_student * dims`, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hint_histogram_kl(
    teacher: *const f64,
    n_teacher: usize,
    student: *const f64,
    n_student: usize,
    dims: usize,
    bins: usize,
    out: *mut f64,
) -> HintStatus {
    guard(|| {
        if dims == 0 {
            return Err(invalid("dims must be >= 1"));
        }
        let rows = |p, n, name| -> Result<Vec<Vec<f64>>, Failure> {
            let len = n_mul(n, dims)?;
            Ok(slice_arg(p, len, name)?.chunks(dims).map(<[f64]>::to_vec).collect())
        };
        let t = rows(teacher, n_teacher, "teacher")?;
        let s = rows(student, n_student, "student")?;
        let kl = metrics::histogram_kl(&t, &s, bins).map_err(|e| invalid(e.to_string()))?;
        put(out, kl, "out")
    })
}

fn n_mul(n: usize, dims: usize) -> Result<usize, Failure> {
    n.checked_mul(dims).ok_or_else(|| invalid("point count overflows"))
}

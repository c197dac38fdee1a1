//! C interface to rfm-lab: run environments, step trained models on them and
//! inspect datasets.
//!
//! Every fallible function returns an [`RfmStatus`]. On failure the message
//! is kept per thread and can be read with [`rfm_last_error`]. Handles are
//! opaque; free each one exactly once with its `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rfm_lab::data::{Dataset, Episode};
use rfm_lab::envs::{Action, EnvState, GameConfig, GraphOptions, VERTEX_DIM};
use rfm_lab::graph::{Model, StateSnapshot};
use rfm_lab::tensor::{Checkpoint, Tape};
use rfm_lab::training::{perfect_length, predicted_actions};
use rfm_lab::Error;

/// Result of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Index = 4,
    State = 5,
    Numeric = 6,
    Parse = 7,
    Format = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// A running environment and the agents' latest actions.
pub struct RfmEnv {
    state: EnvState,
    last_actions: Vec<Option<Action>>,
}

/// A trained model with its recurrent state.
pub struct RfmModel {
    model: Model,
    state: Option<StateSnapshot>,
}

/// A loaded dataset.
pub struct RfmDataset {
    dataset: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> RfmStatus {
    match e {
        Error::Dimension(_) => RfmStatus::Dimension,
        Error::Index(_) => RfmStatus::Index,
        Error::Config(_) => RfmStatus::InvalidArgument,
        Error::State(_) => RfmStatus::State,
        Error::Numeric(_) => RfmStatus::Numeric,
        Error::Parse { .. } => RfmStatus::Parse,
        Error::Format(_) => RfmStatus::Format,
        Error::Io { .. } => RfmStatus::Io,
    }
}

struct Fail(RfmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RfmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RfmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RfmStatus::NullPointer, format!("{} is null", what))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(RfmStatus::InvalidArgument, format!("{} is not valid UTF-8", what)))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(RfmStatus::BufferTooSmall, format!("{} holds {} values, {} needed", what, len, need)));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn write<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    *as_mut(p, what)? = v;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Width of one vertex feature row.
#[no_mangle]
pub extern "C" fn rfm_vertex_dim() -> usize {
    VERTEX_DIM
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one for the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rfm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Creates an environment for `game` (`coopnav`, `coin`, `staghunt2`,
/// `staghunt4`) reset with `seed`.
///
/// # Safety
/// `game` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfm_env_new(game: *const c_char, seed: u64, out: *mut *mut RfmEnv) -> RfmStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let config: GameConfig = as_str(game, "game")?.parse()?;
        let state = EnvState::reset(&config, seed)?;
        let env = RfmEnv {
            last_actions: vec![None; config.n_agents],
            state,
        };
        *out = Box::into_raw(Box::new(env));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`rfm_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rfm_env_free(env: *mut RfmEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts a new episode with `seed`.
///
/// # Safety
/// `env` must be a live environment handle.
#[no_mangle]
pub unsafe extern "C" fn rfm_env_reset(env: *mut RfmEnv, seed: u64) -> RfmStatus {
    guard(|| {
        let env = as_mut(env, "env")?;
        env.state = EnvState::reset(env.state.config(), seed)?;
        env.last_actions.iter_mut().for_each(|a| *a = None);
        Ok(())
    })
}

/// # Safety
/// `env` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfm_env_n_agents(env: *const RfmEnv, out: *mut usize) -> RfmStatus {
    guard(|| write(out, as_ref(env, "env")?.state.config().n_agents, "out"))
}

/// # Safety
/// `env` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfm_env_n_vertices(env: *const RfmEnv, out: *mut usize) -> RfmStatus {
    guard(|| write(out, as_ref(env, "env")?.state.config().n_vertices(), "out"))
}

/// Applies one action per agent (0 up, 1 down, 2 left, 3 right, 4 stay),
/// writes one reward per agent and whether the episode ended.
///
/// # Safety
/// `actions` must hold `n_actions` values, `rewards` `n_rewards` writable
/// values, and `done` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rfm_env_step(
    env: *mut RfmEnv,
    actions: *const u32,
    n_actions: usize,
    rewards: *mut f64,
    n_rewards: usize,
    done: *mut bool,
) -> RfmStatus {
    guard(|| {
        let env = as_mut(env, "env")?;
        let n = env.state.config().n_agents;
        if actions.is_null() {
            return Err(null("actions"));
        }
        if n_actions != n {
            return Err(Fail(RfmStatus::Dimension, format!("{} actions for {} agents", n_actions, n)));
        }
        let rewards = out_slice(rewards, n_rewards, n, "rewards")?;
        let done = as_mut(done, "done")?;
        let acts = std::slice::from_raw_parts(actions, n)
            .iter()
            .map(|&a| Action::from_index(a as usize))
            .collect::<rfm_lab::Result<Vec<Action>>>()?;
        let result = env.state.step(&acts)?;
        rewards.copy_from_slice(&result.rewards);
        *done = result.done;
        env.last_actions = acts.into_iter().map(Some).collect();
        Ok(())
    })
}

/// Writes the current graph's vertex features, `n_vertices * rfm_vertex_dim()`
/// values row by row.
///
/// # Safety
/// `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn rfm_env_vertices(env: *const RfmEnv, out: *mut f64, len: usize) -> RfmStatus {
    guard(|| {
        let env = as_ref(env, "env")?;
        let g = env.state.to_graph(&env.last_actions, GraphOptions::default())?;
        let data = g.vertex_data();
        out_slice(out, len, data.len(), "out")?.copy_from_slice(data);
        Ok(())
    })
}

/// Loads a model checkpoint written by `rfm-lab train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfm_model_load(path: *const c_char, out: *mut *mut RfmModel) -> RfmStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let ck = Checkpoint::load(as_str(path, "path")?)?;
        let model = Model::from_checkpoint(&ck)?;
        *out = Box::into_raw(Box::new(RfmModel { model, state: None }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rfm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rfm_model_free(model: *mut RfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Forgets the recurrent state; call at the start of each episode.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rfm_model_reset(model: *mut RfmModel) -> RfmStatus {
    guard(|| {
        as_mut(model, "model")?.state = None;
        Ok(())
    })
}

/// Number of values [`rfm_model_step`] writes: one output row per agent
/// (5 action logits, or 1 return estimate).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfm_model_n_outputs(model: *const RfmModel, out: *mut usize) -> RfmStatus {
    guard(|| {
        let c = &as_ref(model, "model")?.model.config;
        write(out, c.n_agents * c.out_dim(), "out")
    })
}

/// Advances the model one step on the environment's current graph and
/// writes its per-agent outputs.
///
/// # Safety
/// `model` and `env` must be live handles; `out` must point to `len`
/// writable values.
#[no_mangle]
pub unsafe extern "C" fn rfm_model_step(model: *mut RfmModel, env: *const RfmEnv, out: *mut f64, len: usize) -> RfmStatus {
    guard(|| {
        let m = as_mut(model, "model")?;
        let env = as_ref(env, "env")?;
        let c = &m.model.config;
        if env.state.config().n_agents != c.n_agents || env.state.config().n_vertices() != c.n_vertices {
            return Err(Fail(RfmStatus::InvalidArgument, "model was trained on a different game".into()));
        }
        let need = c.n_agents * c.out_dim();
        let out = out_slice(out, len, need, "out")?;
        let g = env.state.to_graph(&env.last_actions, GraphOptions::default())?;
        let tape = Tape::new();
        let topo = m.model.topology(&[&g])?;
        let state = match &m.state {
            Some(s) => s.load(&tape)?,
            None => m.model.initial_state(&tape, &topo)?,
        };
        let input = m.model.inputs(&tape, &topo, &[&g])?;
        let (res, next) = m.model.step(&tape, &topo, &input, &state)?;
        out.copy_from_slice(tape.value(res.agents).data());
        m.state = Some(next.snapshot(&tape));
        Ok(())
    })
}

/// Loads a dataset file written by `rfm-lab collect`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfm_dataset_load(path: *const c_char, out: *mut *mut RfmDataset) -> RfmStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let dataset = Dataset::load(as_str(path, "path")?)?;
        *out = Box::into_raw(Box::new(RfmDataset { dataset }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`rfm_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rfm_dataset_free(ds: *mut RfmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfm_dataset_n_episodes(ds: *const RfmDataset, out: *mut usize) -> RfmStatus {
    guard(|| write(out, as_ref(ds, "dataset")?.dataset.episodes.len(), "out"))
}

fn episode(ds: &RfmDataset, i: usize) -> Result<&Episode, Fail> {
    ds.dataset.episodes.get(i).ok_or_else(|| {
        Fail(RfmStatus::Index, format!("episode {} of {}", i, ds.dataset.episodes.len()))
    })
}

/// # Safety
/// `ds` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfm_dataset_episode_len(ds: *const RfmDataset, index: usize, out: *mut usize) -> RfmStatus {
    guard(|| write(out, episode(as_ref(ds, "dataset")?, index)?.len(), "out"))
}

/// Perfect roll-out length of an action model on one dataset episode. The
/// model's own recurrent state is left untouched.
///
/// # Safety
/// `model` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfm_dataset_perfect_rollout(
    model: *const RfmModel,
    ds: *const RfmDataset,
    index: usize,
    out: *mut usize,
) -> RfmStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model;
        let ep = episode(as_ref(ds, "dataset")?, index)?;
        let predicted = predicted_actions(m, ep)?;
        write(out, perfect_length(&predicted, ep), "out")
    })
}

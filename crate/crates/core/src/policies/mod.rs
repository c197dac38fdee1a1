//! Behavior generators: scripted experts, the A2C learner and the learner
//! augmented with an on-board relational forward model.

mod a2c;
mod learner;
mod planes;
mod scripted;
mod session;
#[cfg(test)]
mod tests;

pub use a2c::{
    n_step_returns, A2cAgent, A2cConfig, A2cLosses, A2cPolicy, AgentInput, InputSpec, LstmMemory, Rollout, Transition,
};
pub use learner::{argmax, input_spec, GridLearner, OnBoardConfig, OnBoardRfm, RfmTarget, UpdateReport};
pub use planes::{render_prediction_planes, render_probability_planes, softmax, PredictionPlanes};
pub use scripted::{step_toward, ScriptedConfig, ScriptedPolicy};
pub use session::{play_with_fellows, run_agent_training, AgentTrainConfig, FellowEpisode, LearnerKind};

use serde::{Deserialize, Serialize};

use crate::envs::{Action, EnvState, GameConfig};
use crate::error::{cfg_err, Result};

/// Chooses actions for one agent from the full environment state.
pub trait Policy: Send {
    fn act(&mut self, state: &EnvState, agent: usize) -> Result<Action>;

    /// Human-readable description stored in dataset headers.
    fn describe(&self) -> String;
}

/// Episode returns of a set of learners playing together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub returns: Vec<f64>,
    pub reports: Vec<UpdateReport>,
}

/// Plays one episode with one learner per agent, updating them on-line.
pub fn play_learning_episode(config: &GameConfig, learners: &mut [GridLearner], seed: u64) -> Result<EpisodeSummary> {
    if learners.len() != config.n_agents {
        return Err(cfg_err!("{} learners for {} agents", learners.len(), config.n_agents));
    }
    let mut env = EnvState::reset(config, seed)?;
    let mut returns = vec![0.0; config.n_agents];
    while !env.is_done() {
        let actions = learners.iter_mut().map(|l| l.act(&env)).collect::<Result<Vec<_>>>()?;
        let result = env.step(&actions)?;
        for (r, x) in returns.iter_mut().zip(&result.rewards) {
            *r += x;
        }
        for l in learners.iter_mut() {
            l.observe(&actions, &result.rewards, result.done)?;
        }
    }
    let reports = learners.iter_mut().flat_map(|l| l.take_reports()).collect();
    Ok(EpisodeSummary { returns, reports })
}

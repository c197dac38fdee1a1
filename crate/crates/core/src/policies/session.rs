use serde::{Deserialize, Serialize};

use super::a2c::A2cConfig;
use super::learner::{GridLearner, OnBoardConfig, UpdateReport};
use super::scripted::{ScriptedConfig, ScriptedPolicy};
use super::Policy;
use crate::analysis::{coin_counts, CoinCounts, RunRecord};
use crate::data::derive_seed;
use crate::envs::{EntityKind, EnvState, Event, GameConfig};
use crate::error::{idx_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Baseline,
    RfmAugmented,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Baseline => "baseline",
            LearnerKind::RfmAugmented => "rfm-augmented",
        }
    }
}

/// One learning agent trained alongside scripted fellows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrainConfig {
    pub game: GameConfig,
    pub learner: LearnerKind,
    /// Environment steps; the episode in progress is finished.
    pub steps: u64,
    pub seed: u64,
    /// Agent slot the learner occupies.
    pub slot: usize,
    pub a2c: A2cConfig,
    pub onboard: OnBoardConfig,
    pub fellows: ScriptedConfig,
}

impl AgentTrainConfig {
    pub fn new(game: GameConfig, learner: LearnerKind, steps: u64, seed: u64) -> Self {
        AgentTrainConfig {
            game,
            learner,
            steps,
            seed,
            slot: 0,
            a2c: A2cConfig::default(),
            onboard: OnBoardConfig::default(),
            fellows: ScriptedConfig::default(),
        }
    }

    pub fn make_learner(&self) -> Result<GridLearner> {
        let seed = derive_seed(self.seed, 0);
        match self.learner {
            LearnerKind::Baseline => GridLearner::baseline(self.a2c.clone(), &self.game, self.slot, seed),
            LearnerKind::RfmAugmented => {
                GridLearner::augmented(self.a2c.clone(), self.onboard.clone(), &self.game, self.slot, seed)
            }
        }
    }
}

/// Outcome of one episode for the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct FellowEpisode {
    pub steps: usize,
    pub episode_return: f64,
    pub reports: Vec<UpdateReport>,
    pub coins: Option<CoinCounts>,
}

/// Plays one episode with `learner` in its slot and scripted experts in
/// every other slot, updating the learner on-line.
pub fn play_with_fellows(
    config: &GameConfig,
    learner: &mut GridLearner,
    fellows: &ScriptedConfig,
    seed: u64,
) -> Result<FellowEpisode> {
    let slot = learner.agent;
    if slot >= config.n_agents {
        return Err(idx_err!("learner slot {} in a {}-player game", slot, config.n_agents));
    }
    let mut env = EnvState::reset(config, seed)?;
    let mut others: Vec<(usize, ScriptedPolicy)> = (0..config.n_agents)
        .filter(|&a| a != slot)
        .map(|a| (a, ScriptedPolicy::new(fellows.clone(), derive_seed(seed, 1 + a as u64))))
        .collect();
    let mut events: Vec<Event> = Vec::new();
    let mut total = 0.0;
    let mut steps = 0;
    while !env.is_done() {
        let mut actions = Vec::with_capacity(config.n_agents);
        let mut fellow = others.iter_mut();
        for a in 0..config.n_agents {
            actions.push(if a == slot {
                learner.act(&env)?
            } else {
                let (id, p) = fellow.next().expect("one policy per fellow");
                p.act(&env, *id)?
            });
        }
        let result = env.step(&actions)?;
        total += result.rewards[slot];
        steps += 1;
        learner.observe(&actions, &result.rewards, result.done)?;
        events.extend(result.events);
    }
    let coins = env.coin_roles().map(|roles| {
        let colors: Vec<Option<usize>> = env
            .entities()
            .iter()
            .map(|e| if let EntityKind::Coin(c) = e.kind { Some(c) } else { None })
            .collect();
        coin_counts(roles, slot, &events, |id| colors.get(id).copied().flatten())
    });
    Ok(FellowEpisode {
        steps,
        episode_return: total,
        reports: learner.take_reports(),
        coins,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Trains one learner for `config.steps` environment steps, calling
/// `on_record` after every episode. Episode `i` uses seed
/// `derive_seed(seed, 1 + i)`.
pub fn run_agent_training(config: &AgentTrainConfig, mut on_record: impl FnMut(&RunRecord, &GridLearner)) -> Result<GridLearner> {
    config.game.validate()?;
    let mut learner = config.make_learner()?;
    let mut env_steps = 0u64;
    let mut episode = 0usize;
    while env_steps < config.steps {
        let ep = play_with_fellows(&config.game, &mut learner, &config.fellows, derive_seed(config.seed, 1 + episode as u64))?;
        env_steps += ep.steps as u64;
        let record = RunRecord {
            episode,
            env_steps,
            learner: config.learner.name().into(),
            episode_return: ep.episode_return,
            rfm_loss: mean(ep.reports.iter().filter_map(|r| r.rfm_loss)),
            policy_loss: mean(ep.reports.iter().map(|r| r.losses.total)),
            coins: ep.coins,
        };
        on_record(&record, &learner);
        episode += 1;
    }
    Ok(learner)
}

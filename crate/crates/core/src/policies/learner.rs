use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::a2c::{A2cAgent, A2cConfig, A2cLosses, AgentInput, InputSpec, LstmMemory, Rollout, Transition};
use super::planes::render_prediction_planes;
use crate::envs::{Action, EnvState, GameConfig, GraphOptions, VERTEX_DIM};
use crate::error::{cfg_err, idx_err, state_err, Result};
use crate::graph::{Graph, Model, ModelConfig, ModelKind, RecurrentState, StateSnapshot, Task};
use crate::tensor::{Adam, AdamConfig, Tape};

/// What the on-board model is supervised with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RfmTarget {
    /// Predict at `t` the actions fellows take at `t`, supervised once they
    /// are revealed.
    #[default]
    NextAction,
    /// Predict the actions fellows took at `t - 1`.
    LastAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnBoardConfig {
    pub target: RfmTarget,
    /// Steps per on-line training window.
    pub window: usize,
    pub adam: AdamConfig,
    /// Keep the model's parameters fixed.
    pub frozen: bool,
    pub latent: usize,
    pub mlp_hidden: usize,
}

impl Default for OnBoardConfig {
    fn default() -> Self {
        OnBoardConfig {
            target: RfmTarget::NextAction,
            window: 16,
            adam: AdamConfig::default(),
            frozen: false,
            latent: 32,
            mlp_hidden: 64,
        }
    }
}

/// Relational forward model carried by one agent and trained on-line to
/// predict its fellows' actions.
#[derive(Debug, Clone)]
pub struct OnBoardRfm {
    pub config: OnBoardConfig,
    pub model: Model,
    pub optimizer: Adam,
    agent: usize,
    n_agents: usize,
    /// State after the latest step, as constants on a private tape.
    state: Option<StateSnapshot>,
    /// State at the start of the current training window.
    window_start: Option<StateSnapshot>,
    window: Vec<(Graph, Option<Vec<usize>>)>,
    last_logits: Vec<Vec<f64>>,
    hits: u64,
    predictions: u64,
    pub last_loss: Option<f64>,
}

impl OnBoardRfm {
    pub fn new(config: OnBoardConfig, game: &GameConfig, agent: usize, seed: u64) -> Result<Self> {
        if config.window == 0 {
            return Err(cfg_err!("on-board training window must be positive"));
        }
        let mut mc = ModelConfig::new(ModelKind::Rfm, Task::Action, VERTEX_DIM, game.n_agents, game.n_vertices());
        mc.latent = config.latent;
        mc.mlp_hidden = config.mlp_hidden;
        let model = Model::new(mc, seed)?;
        Ok(OnBoardRfm {
            optimizer: Adam::new(config.adam.clone()),
            config,
            model,
            agent,
            n_agents: game.n_agents,
            state: None,
            window_start: None,
            window: Vec::new(),
            last_logits: Vec::new(),
            hits: 0,
            predictions: 0,
            last_loss: None,
        })
    }

    fn fellows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_agents).filter(move |&a| a != self.agent)
    }

    /// Fraction of fellow actions predicted correctly by argmax so far.
    pub fn accuracy(&self) -> Option<f64> {
        (self.predictions > 0).then(|| self.hits as f64 / self.predictions as f64)
    }

    pub fn reset_accuracy(&mut self) {
        self.hits = 0;
        self.predictions = 0;
    }

    fn restore(&self, saved: &Option<StateSnapshot>, tape: &Tape, g: &Graph) -> Result<RecurrentState> {
        match saved {
            Some(s) => s.load(tape),
            None => {
                let topo = self.model.topology(&[g])?;
                self.model.initial_state(tape, &topo)
            }
        }
    }

    /// Steps the model on the current graph and returns one logit vector
    /// per fellow agent.
    pub fn predict(&mut self, graph: &Graph, last_actions: &[Option<Action>]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let state = self.restore(&self.state, &tape, graph)?;
        if self.window.is_empty() {
            self.window_start = self.state.clone();
        }
        let topo = self.model.topology(&[graph])?;
        let input = self.model.inputs(&tape, &topo, &[graph])?;
        let (out, next) = self.model.step(&tape, &topo, &input, &state)?;
        let logits = tape.value(out.agents);
        let k = self.model.config.n_actions;
        let per_fellow: Vec<Vec<f64>> = self.fellows().map(|a| logits.data()[a * k..(a + 1) * k].to_vec()).collect();
        self.state = Some(next.snapshot(&tape));
        let label = match self.config.target {
            RfmTarget::NextAction => None,
            RfmTarget::LastAction => {
                let prev: Option<Vec<usize>> = self.fellows().map(|a| last_actions[a].map(Action::index)).collect();
                Some(prev.unwrap_or_default())
            }
        };
        if let Some(l) = &label {
            self.score(&per_fellow, l);
        }
        self.window.push((graph.clone(), label));
        self.last_logits = per_fellow.clone();
        Ok(per_fellow)
    }

    fn score(&mut self, logits: &[Vec<f64>], labels: &[usize]) {
        for (l, &y) in logits.iter().zip(labels) {
            let best = argmax(l);
            self.predictions += 1;
            if best == y {
                self.hits += 1;
            }
        }
    }

    /// Supplies the actions fellows took in the latest step and trains when
    /// the window is full or the episode ended.
    pub fn observe(&mut self, actions: &[Action], done: bool) -> Result<()> {
        if self.config.target == RfmTarget::NextAction {
            let labels: Vec<usize> = self.fellows().map(|a| actions[a].index()).collect();
            if let Some(last) = self.window.last_mut() {
                last.1 = Some(labels.clone());
            }
            let logits = std::mem::take(&mut self.last_logits);
            self.score(&logits, &labels);
        }
        if self.window.len() >= self.config.window || done {
            self.train_window()?;
        }
        if done {
            self.state = None;
            self.window_start = None;
        }
        Ok(())
    }

    fn train_window(&mut self) -> Result<()> {
        let window = std::mem::take(&mut self.window);
        let start = self.window_start.take();
        if self.config.frozen || window.is_empty() {
            return Ok(());
        }
        let tape = Tape::new();
        let mut state = self.restore(&start, &tape, &window[0].0)?;
        let mut terms = Vec::new();
        for (g, labels) in &window {
            let topo = self.model.topology(&[g])?;
            let input = self.model.inputs(&tape, &topo, &[g])?;
            let (out, next) = self.model.step(&tape, &topo, &input, &state)?;
            state = next;
            let Some(labels) = labels else { continue };
            if labels.is_empty() {
                continue;
            }
            let rows: Arc<[usize]> = self.fellows().collect();
            let fellows = tape.gather_rows(out.agents, rows)?;
            terms.push(tape.softmax_cross_entropy(fellows, labels)?);
        }
        if terms.is_empty() {
            return Ok(());
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        let loss = tape.scale(loss, 1.0 / terms.len() as f64)?;
        self.last_loss = Some(tape.value(loss).item());
        let grads = tape.backward(loss)?.into_params();
        self.optimizer.step(&mut self.model.params, &grads)?;
        Ok(())
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Observation shape of an agent in `game`, with `extra_planes` appended.
pub fn input_spec(game: &GameConfig, extra_planes: usize) -> InputSpec {
    InputSpec {
        channels: 2 + game.observation_kinds().len() + 1 + extra_planes,
        height: (2 * game.height - 1) as usize,
        width: (2 * game.width - 1) as usize,
        extra: if game.game == crate::envs::Game::Coin { game.n_colors } else { 0 },
    }
}

/// Progress of one learner over an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub agent: usize,
    pub losses: A2cLosses,
    pub rfm_loss: Option<f64>,
}

/// An A2C agent acting in an environment, optionally augmented with an
/// on-board RFM whose predictions are appended to its observation.
#[derive(Debug, Clone)]
pub struct GridLearner {
    pub agent: usize,
    pub a2c: A2cAgent,
    pub rfm: Option<OnBoardRfm>,
    memory: LstmMemory,
    rollout_memory: LstmMemory,
    buffer: Vec<Transition>,
    pending: Option<(AgentInput, Action, f64)>,
    last_reward: f64,
    last_action: Option<Action>,
    reports: Vec<UpdateReport>,
}

impl GridLearner {
    pub fn baseline(config: A2cConfig, game: &GameConfig, agent: usize, seed: u64) -> Result<Self> {
        Self::build(config, None, game, agent, seed)
    }

    pub fn augmented(
        config: A2cConfig,
        rfm: OnBoardConfig,
        game: &GameConfig,
        agent: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build(config, Some(rfm), game, agent, seed)
    }

    fn build(
        config: A2cConfig,
        rfm: Option<OnBoardConfig>,
        game: &GameConfig,
        agent: usize,
        seed: u64,
    ) -> Result<Self> {
        if agent >= game.n_agents {
            return Err(idx_err!("agent {} in a {}-player game", agent, game.n_agents));
        }
        let extra_planes = if rfm.is_some() { game.n_agents - 1 } else { 0 };
        let a2c = A2cAgent::new(config, input_spec(game, extra_planes), seed)?;
        let rfm = rfm
            .map(|c| OnBoardRfm::new(c, game, agent, seed.wrapping_add(0x9e37_79b9)))
            .transpose()?;
        let memory = a2c.initial_memory();
        Ok(GridLearner {
            agent,
            rollout_memory: memory.clone(),
            memory,
            a2c,
            rfm,
            buffer: Vec::new(),
            pending: None,
            last_reward: 0.0,
            last_action: None,
            reports: Vec::new(),
        })
    }

    /// Everything the policy network sees at this state.
    pub fn input(&mut self, state: &EnvState) -> Result<AgentInput> {
        let obs = state.render_observation(self.agent)?;
        let mut input = AgentInput::from_observation(&obs, self.last_reward, self.last_action);
        if let Some(rfm) = &mut self.rfm {
            let graph = state.graph(GraphOptions::default())?;
            let logits = rfm.predict(&graph, state.last_actions())?;
            let positions: Vec<_> = (0..state.agents().len())
                .filter(|&a| a != self.agent)
                .map(|a| state.agents()[a])
                .collect();
            let cfg = state.config();
            let planes = render_prediction_planes(&logits, &positions, state.agents()[self.agent], cfg.width, cfg.height)?;
            input = input.with_planes(&planes.data);
        }
        Ok(input)
    }

    pub fn act(&mut self, state: &EnvState) -> Result<Action> {
        let input = self.input(state)?;
        let (action, value, next) = self.a2c.act(&input, &self.memory)?;
        if self.buffer.len() >= self.a2c.config.rollout_len {
            self.update(value)?;
            self.rollout_memory = self.memory.clone();
        }
        self.pending = Some((input, action, value));
        self.memory = next;
        Ok(action)
    }

    /// Records the outcome of the latest step for this agent.
    pub fn observe(&mut self, actions: &[Action], rewards: &[f64], done: bool) -> Result<()> {
        let (input, action, value) = self
            .pending
            .take()
            .ok_or_else(|| state_err!("observe called without a preceding act"))?;
        let reward = rewards[self.agent];
        self.buffer.push(Transition {
            input,
            action,
            reward,
            value,
            done,
        });
        self.last_reward = reward;
        self.last_action = Some(action);
        if let Some(rfm) = &mut self.rfm {
            rfm.observe(actions, done)?;
        }
        if done {
            self.update(0.0)?;
            self.memory = self.a2c.initial_memory();
            self.rollout_memory = self.memory.clone();
            self.last_reward = 0.0;
            self.last_action = None;
        }
        Ok(())
    }

    fn update(&mut self, bootstrap: f64) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let rollout = Rollout {
            memory: self.rollout_memory.clone(),
            steps: std::mem::take(&mut self.buffer),
            bootstrap,
        };
        let losses = self.a2c.update(&rollout)?;
        self.reports.push(UpdateReport {
            agent: self.agent,
            losses,
            rfm_loss: self.rfm.as_ref().and_then(|r| r.last_loss),
        });
        Ok(())
    }

    /// Input of the step awaiting its outcome.
    pub fn last_input(&self) -> Option<&AgentInput> {
        self.pending.as_ref().map(|p| &p.0)
    }

    pub fn take_reports(&mut self) -> Vec<UpdateReport> {
        std::mem::take(&mut self.reports)
    }

    /// Digest over every parameter the learner owns.
    pub fn digest(&self) -> String {
        match &self.rfm {
            Some(r) => format!("{}:{}", self.a2c.params.digest(), r.model.params.digest()),
            None => self.a2c.params.digest(),
        }
    }
}

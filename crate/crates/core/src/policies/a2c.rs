use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::planes::softmax;
use crate::envs::{Action, Observation};
use crate::error::{cfg_err, dim_err, Error, Result};
use crate::nn::{Linear, LstmCell};
use crate::tensor::{Adam, AdamConfig, Checkpoint, Init, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2cConfig {
    pub conv_channels: usize,
    pub mlp_hidden: usize,
    pub lstm_hidden: usize,
    pub discount: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub rollout_len: usize,
    pub adam: AdamConfig,
}

impl Default for A2cConfig {
    fn default() -> Self {
        A2cConfig {
            conv_channels: 6,
            mlp_hidden: 256,
            lstm_hidden: 256,
            discount: 0.99,
            entropy_coef: 0.01,
            value_coef: 0.5,
            rollout_len: 16,
            adam: AdamConfig::default(),
        }
    }
}

/// Shape of what the agent sees each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Flat side features beyond last reward and last action.
    pub extra: usize,
}

impl InputSpec {
    pub fn side_dim(&self) -> usize {
        1 + Action::COUNT + self.extra
    }
}

/// One step of agent input.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentInput {
    /// `[channels][height][width]`
    pub planes: Vec<f64>,
    pub extra: Vec<f64>,
    pub last_reward: f64,
    pub last_action: Option<Action>,
}

impl AgentInput {
    pub fn from_observation(obs: &Observation, last_reward: f64, last_action: Option<Action>) -> Self {
        AgentInput {
            planes: obs.planes.clone(),
            extra: obs.extra.clone(),
            last_reward,
            last_action,
        }
    }

    /// Appends more image planes of the same height and width.
    pub fn with_planes(mut self, more: &[f64]) -> Self {
        self.planes.extend_from_slice(more);
        self
    }

    fn side(&self) -> Vec<f64> {
        let mut v = vec![0.0; 1 + Action::COUNT];
        v[0] = self.last_reward;
        if let Some(a) = self.last_action {
            v[1 + a.index()] = 1.0;
        }
        v.extend_from_slice(&self.extra);
        v
    }
}

/// LSTM state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmMemory {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmMemory {
    pub fn zeros(hidden: usize) -> Self {
        LstmMemory {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub input: AgentInput,
    pub action: Action,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// Consecutive steps of one agent, starting from `memory`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub memory: LstmMemory,
    pub steps: Vec<Transition>,
    /// Value estimate after the last step; ignored when that step ended the
    /// episode.
    pub bootstrap: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct A2cLosses {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// `R_t = r_t + discount * R_{t+1}`, cut at terminal steps.
pub fn n_step_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            acc = 0.0;
        }
        acc = rewards[t] + discount * acc;
        out[t] = acc;
    }
    out
}

/// Advantage actor-critic learner with a private parameter store.
#[derive(Debug, Clone)]
pub struct A2cAgent {
    pub config: A2cConfig,
    pub spec: InputSpec,
    pub params: ParamStore,
    pub optimizer: Adam,
    torso: Linear,
    lstm: LstmCell,
    policy: Linear,
    value: Linear,
    rng: ChaCha8Rng,
    updates: u64,
}

pub(crate) struct Forward {
    pub logits: Vec<Var>,
    pub values: Vec<Var>,
    pub h: Var,
    pub c: Var,
}

impl A2cAgent {
    pub fn new(config: A2cConfig, spec: InputSpec, seed: u64) -> Result<Self> {
        if config.conv_channels == 0 || config.mlp_hidden == 0 || config.lstm_hidden == 0 {
            return Err(cfg_err!("A2C layer sizes must be positive"));
        }
        if config.rollout_len == 0 {
            return Err(cfg_err!("rollout length must be positive"));
        }
        let mut params = ParamStore::new(seed);
        params.add("conv/k", &[config.conv_channels, spec.channels, 3, 3], Init::GlorotUniform)?;
        params.add("conv/b", &[config.conv_channels], Init::Zeros)?;
        let flat = config.conv_channels * spec.height * spec.width;
        let torso = Linear::new(&mut params, "torso", flat, config.mlp_hidden)?;
        let lstm = LstmCell::new(&mut params, "lstm", config.mlp_hidden + spec.side_dim(), config.lstm_hidden)?;
        let policy = Linear::new(&mut params, "policy", config.lstm_hidden, Action::COUNT)?;
        let value = Linear::new(&mut params, "value", config.lstm_hidden, 1)?;
        Ok(A2cAgent {
            optimizer: Adam::new(config.adam.clone()),
            config,
            spec,
            params,
            torso,
            lstm,
            policy,
            value,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a2c0),
            updates: 0,
        })
    }

    pub fn initial_memory(&self) -> LstmMemory {
        LstmMemory::zeros(self.config.lstm_hidden)
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn check_input(&self, input: &AgentInput) -> Result<()> {
        let s = &self.spec;
        if input.planes.len() != s.channels * s.height * s.width {
            return Err(dim_err!(
                "observation has {} values, expected {}x{}x{}",
                input.planes.len(),
                s.channels,
                s.height,
                s.width
            ));
        }
        if input.extra.len() != s.extra {
            return Err(dim_err!("{} extra features, expected {}", input.extra.len(), s.extra));
        }
        Ok(())
    }

    /// Runs the network over consecutive inputs. The convolution and torso
    /// are batched over time; only the LSTM is sequential.
    pub(crate) fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        inputs: &[&AgentInput],
        memory: &LstmMemory,
    ) -> Result<Forward> {
        let s = self.spec;
        let t_len = inputs.len();
        if t_len == 0 {
            return Err(cfg_err!("forward over zero steps"));
        }
        let mut planes = Vec::with_capacity(t_len * s.channels * s.height * s.width);
        let mut side = Vec::with_capacity(t_len * s.side_dim());
        for input in inputs {
            self.check_input(input)?;
            planes.extend_from_slice(&input.planes);
            side.extend(input.side());
        }
        let hs = self.config.lstm_hidden;
        if memory.h.len() != hs || memory.c.len() != hs {
            return Err(dim_err!("memory width {} for an LSTM of {}", memory.h.len(), hs));
        }
        let x = tape.constant(Tensor::new(vec![t_len, s.channels, s.height, s.width], planes)?)?;
        let conv = tape.conv2d(x, tape.param(store, "conv/k")?, Some(tape.param(store, "conv/b")?))?;
        let conv = tape.relu(conv)?;
        let flat = tape.reshape(conv, &[t_len, self.config.conv_channels * s.height * s.width])?;
        let z = tape.relu(self.torso.forward(tape, store, flat)?)?;
        let side = tape.constant(Tensor::new(vec![t_len, s.side_dim()], side)?)?;
        let z = tape.concat_cols(&[z, side])?;
        let mut h = tape.constant(Tensor::new(vec![1, hs], memory.h.clone())?)?;
        let mut c = tape.constant(Tensor::new(vec![1, hs], memory.c.clone())?)?;
        let mut logits = Vec::with_capacity(t_len);
        let mut values = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let zt = if t_len == 1 { z } else { tape.gather_rows(z, Arc::from([t]))? };
            (h, c) = self.lstm.forward(tape, store, zt, h, c)?;
            logits.push(self.policy.forward(tape, store, h)?);
            values.push(self.value.forward(tape, store, h)?);
        }
        Ok(Forward { logits, values, h, c })
    }

    /// Policy logits, value and next memory without sampling.
    pub fn evaluate(&self, input: &AgentInput, memory: &LstmMemory) -> Result<(Vec<f64>, f64, LstmMemory)> {
        let tape = Tape::new();
        let f = self.forward(&tape, &self.params, &[input], memory)?;
        let next = LstmMemory {
            h: tape.value(f.h).data().to_vec(),
            c: tape.value(f.c).data().to_vec(),
        };
        Ok((tape.value(f.logits[0]).data().to_vec(), tape.value(f.values[0]).item(), next))
    }

    /// Samples an action from the softmax policy.
    pub fn act(&mut self, input: &AgentInput, memory: &LstmMemory) -> Result<(Action, f64, LstmMemory)> {
        let (logits, value, next) = self.evaluate(input, memory)?;
        let probs = softmax(&logits);
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        let mut pick = Action::COUNT - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        Ok((Action::from_index(pick)?, value, next))
    }

    /// Scalar A2C loss on `tape`, with its parts. Advantages use the value
    /// estimates of this forward pass, treated as constants.
    pub fn loss(&self, tape: &Tape, store: &ParamStore, rollout: &Rollout) -> Result<(Var, A2cLosses)> {
        self.loss_with_baseline(tape, store, rollout, None)
    }

    /// As [`A2cAgent::loss`], with the advantage baseline given explicitly.
    pub fn loss_with_baseline(
        &self,
        tape: &Tape,
        store: &ParamStore,
        rollout: &Rollout,
        baseline: Option<&[f64]>,
    ) -> Result<(Var, A2cLosses)> {
        let n = rollout.steps.len();
        if n == 0 {
            return Err(cfg_err!("A2C update on an empty rollout"));
        }
        let inputs: Vec<&AgentInput> = rollout.steps.iter().map(|s| &s.input).collect();
        let f = self.forward(tape, store, &inputs, &rollout.memory)?;
        let rewards: Vec<f64> = rollout.steps.iter().map(|s| s.reward).collect();
        let dones: Vec<bool> = rollout.steps.iter().map(|s| s.done).collect();
        let returns = n_step_returns(&rewards, &dones, rollout.bootstrap, self.config.discount);
        let mut policy_terms = Vec::with_capacity(n);
        let mut value_terms = Vec::with_capacity(n);
        let mut entropy_terms = Vec::with_capacity(n);
        for (t, step) in rollout.steps.iter().enumerate() {
            let v = match baseline {
                Some(b) => b[t],
                None => tape.value(f.values[t]).item(),
            };
            let advantage = returns[t] - v;
            let lsm = tape.log_softmax(f.logits[t])?;
            let logp = tape.pick(lsm, Arc::from([step.action.index()]))?;
            policy_terms.push(tape.scale(logp, -advantage)?);
            value_terms.push(tape.mse(f.values[t], &Tensor::new(vec![1, 1], vec![returns[t]])?)?);
            let plogp = tape.mul(tape.exp(lsm)?, lsm)?;
            entropy_terms.push(tape.scale(tape.sum(plogp)?, -1.0)?);
        }
        let total_of = |terms: &[Var]| -> Result<Var> {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            tape.scale(acc, 1.0 / n as f64)
        };
        let p = total_of(&policy_terms)?;
        let v = total_of(&value_terms)?;
        let e = total_of(&entropy_terms)?;
        let total = tape.add(
            tape.add(p, tape.scale(v, self.config.value_coef)?)?,
            tape.scale(e, -self.config.entropy_coef)?,
        )?;
        let losses = A2cLosses {
            policy: tape.value(p).item(),
            value: tape.value(v).item(),
            entropy: tape.value(e).item(),
            total: tape.value(total).item(),
            grad_norm: 0.0,
        };
        Ok((total, losses))
    }

    /// One optimizer step on a rollout.
    pub fn update(&mut self, rollout: &Rollout) -> Result<A2cLosses> {
        let tape = Tape::new();
        let (total, mut losses) = self.loss(&tape, &self.params, rollout)?;
        let grads = tape.backward(total)?.into_params();
        losses.grad_norm = self.optimizer.step(&mut self.params, &grads)?;
        self.updates += 1;
        Ok(losses)
    }

    /// Rebuilds an agent saved with [`A2cAgent::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("agent checkpoint lacks '{}'", k)))
        };
        if ck.meta.get("agent").and_then(|a| a.as_str()) != Some("a2c") {
            return Err(Error::Format("not an A2C agent checkpoint".into()));
        }
        let config: A2cConfig = serde_json::from_value(field("config")?).map_err(|e| Error::Format(e.to_string()))?;
        let spec: InputSpec = serde_json::from_value(field("input")?).map_err(|e| Error::Format(e.to_string()))?;
        let mut agent = A2cAgent::new(config, spec, ck.seed)?;
        let stored = ck.to_store()?;
        for (name, t) in agent.params.clone().iter() {
            let v = stored.get(name)?;
            if v.shape() != t.shape() {
                return Err(Error::Format(format!("parameter {} has shape {:?}, expected {:?}", name, v.shape(), t.shape())));
            }
            agent.params.set(name, v.clone())?;
        }
        if stored.len() != agent.params.len() {
            return Err(Error::Format("checkpoint has extra parameters".into()));
        }
        if let Some(opt) = &ck.optimizer {
            agent.optimizer = Adam::with_state(agent.config.adam.clone(), opt.clone());
        }
        agent.updates = ck.step;
        Ok(agent)
    }

    pub fn checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "agent": "a2c",
            "config": self.config,
            "input": self.spec,
            "meta": meta,
        });
        Checkpoint::new(&self.params, self.updates, Some(self.optimizer.state.clone()), meta)
    }
}

/// A trained agent used as a fixed behavior policy.
#[derive(Debug, Clone)]
pub struct A2cPolicy {
    agent: A2cAgent,
    memory: LstmMemory,
}

impl A2cPolicy {
    pub fn new(agent: A2cAgent, seed: u64) -> Self {
        let mut agent = agent;
        agent.rng = ChaCha8Rng::seed_from_u64(seed);
        A2cPolicy {
            memory: agent.initial_memory(),
            agent,
        }
    }
}

impl super::Policy for A2cPolicy {
    fn act(&mut self, state: &crate::envs::EnvState, agent: usize) -> Result<Action> {
        if state.step_count() == 0 {
            self.memory = self.agent.initial_memory();
        }
        let obs = state.render_observation(agent)?;
        let input = AgentInput::from_observation(&obs, state.last_rewards()[agent], state.last_actions()[agent]);
        let (action, _, next) = self.agent.act(&input, &self.memory)?;
        self.memory = next;
        Ok(action)
    }

    fn describe(&self) -> String {
        format!("a2c(params={})", &self.agent.params.digest()[..16])
    }
}

//! Supervised trainers for action and return models, and the perfect
//! roll-out metric.

#[cfg(test)]
mod tests;

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, make_return_targets, parallel_map, Episode};
use crate::envs::Action;
use crate::error::{cfg_err, Result};
use crate::graph::{Graph, Model, Task};
use crate::policies::argmax;
use crate::tensor::{Adam, AdamConfig, AdamState, Checkpoint, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ActionCe,
    ReturnMse,
}

impl LossKind {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Action => LossKind::ActionCe,
            Task::Return => LossKind::ReturnMse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Episodes per gradient step.
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    /// Evaluate every this many steps; 0 disables.
    pub eval_every: u64,
    pub loss: LossKind,
    /// Feed half of the episodes with agent-agent edges removed.
    pub prune_mixing: bool,
    pub seed: u64,
    pub workers: usize,
}

impl TrainConfig {
    pub fn new(loss: LossKind, steps: u64, seed: u64) -> Self {
        TrainConfig {
            batch_size: 128,
            steps,
            adam: AdamConfig::default(),
            eval_every: 0,
            loss,
            prune_mixing: loss == LossKind::ReturnMse,
            seed,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(cfg_err!("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<f64>,
}

/// Mean and spread of the perfect roll-out length over episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub n: usize,
    pub lengths: Vec<usize>,
}

impl RolloutStats {
    pub fn from_lengths(lengths: Vec<usize>) -> Self {
        let n = lengths.len();
        let (mean, std) = mean_std(&lengths.iter().map(|&l| l as f64).collect::<Vec<_>>());
        RolloutStats {
            mean,
            std,
            stderr: if n > 0 { std / (n as f64).sqrt() } else { 0.0 },
            n,
            lengths,
        }
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Whether episode `index` is fed pruned graphs during `epoch`. Parity
/// alternation gives exactly half of an even-sized set each epoch.
pub fn is_pruned(index: usize, epoch: u64) -> bool {
    (index as u64 + epoch) % 2 == 1
}

/// Graphs the model sees for one episode.
pub fn episode_graphs(ep: &Episode, pruned: bool) -> Vec<Cow<'_, Graph>> {
    (0..ep.len())
        .map(|t| {
            if pruned {
                Cow::Owned(ep.pruned_graph(t))
            } else {
                Cow::Borrowed(&ep.steps[t].graph)
            }
        })
        .collect()
}

/// Teacher-forced unroll of a batch of equally long episodes. Returns the
/// agent outputs of every step, `[n_episodes * n_agents, out]` each.
pub fn unroll_batch(tape: &Tape, model: &Model, episodes: &[&Episode], pruned: &[bool]) -> Result<Vec<Var>> {
    let len = episodes[0].len();
    if episodes.iter().any(|e| e.len() != len) {
        return Err(cfg_err!("batched episodes differ in length"));
    }
    let graphs: Vec<Vec<Cow<Graph>>> = episodes.iter().zip(pruned).map(|(e, &p)| episode_graphs(e, p)).collect();
    let first: Vec<&Graph> = graphs.iter().map(|g| g[0].as_ref()).collect();
    let topo = model.topology(&first)?;
    let mut state = model.initial_state(tape, &topo)?;
    let mut outs = Vec::with_capacity(len);
    for t in 0..len {
        let gs: Vec<&Graph> = graphs.iter().map(|g| g[t].as_ref()).collect();
        let input = model.inputs(tape, &topo, &gs)?;
        let (out, next) = model.step(tape, &topo, &input, &state)?;
        outs.push(out.agents);
        state = next;
    }
    Ok(outs)
}

/// Batch loss: cross-entropy or squared error over agent vertices, averaged
/// over agents and steps.
pub fn batch_loss(tape: &Tape, model: &Model, episodes: &[&Episode], pruned: &[bool], loss: LossKind) -> Result<Var> {
    let expected = match loss {
        LossKind::ActionCe => Task::Action,
        LossKind::ReturnMse => Task::Return,
    };
    if model.config.task != expected {
        return Err(cfg_err!("{:?} loss needs a {:?} model", loss, expected));
    }
    if loss == LossKind::ActionCe && model.config.out_dim() != Action::COUNT {
        return Err(cfg_err!("action head has {} outputs, expected {}", model.config.out_dim(), Action::COUNT));
    }
    let outs = unroll_batch(tape, model, episodes, pruned)?;
    let n_agents = model.config.n_agents;
    let targets: Vec<Vec<Vec<f64>>> = match loss {
        LossKind::ReturnMse => episodes.iter().map(|e| make_return_targets(e, 1.0)).collect(),
        LossKind::ActionCe => Vec::new(),
    };
    let scale = model.config.output_scale;
    let mut terms = Vec::with_capacity(outs.len());
    for (t, &out) in outs.iter().enumerate() {
        let term = match loss {
            LossKind::ActionCe => {
                let labels: Vec<usize> = episodes
                    .iter()
                    .flat_map(|e| e.steps[t].actions.iter().take(n_agents).map(|a| a.index()))
                    .collect();
                tape.softmax_cross_entropy(out, &labels)?
            }
            LossKind::ReturnMse => {
                let y: Vec<f64> = targets.iter().flat_map(|tg| tg[t].iter().copied()).collect();
                let mse = tape.mse(out, &Tensor::new(vec![y.len(), 1], y)?)?;
                // squared error in standardized units
                tape.scale(mse, 1.0 / (scale * scale))?
            }
        };
        terms.push(term);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// Episode indices and pruning flags of batch `step`. A pure function of
/// the step so resumed runs see the same batches.
pub fn batch_plan(n: usize, config: &TrainConfig, step: u64) -> (Vec<usize>, Vec<bool>) {
    let b = config.batch_size.min(n);
    let per_epoch = (n / b).max(1) as u64;
    let epoch = step / per_epoch;
    let k = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch)));
    let idx = order[k * b..(k + 1) * b].to_vec();
    let pruned = idx.iter().map(|&i| config.prune_mixing && is_pruned(i, epoch)).collect();
    (idx, pruned)
}

/// Model plus optimizer, resumable from a checkpoint.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, adam: AdamConfig) -> Self {
        Trainer {
            model,
            optimizer: Adam::new(adam),
            step: 0,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, adam: AdamConfig) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let optimizer = Adam::with_state(adam, ck.optimizer.clone().unwrap_or_default());
        Ok(Trainer {
            model,
            optimizer,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        self.model.checkpoint(self.step, Some(self.optimizer.state.clone()), meta)
    }

    pub fn optimizer_state(&self) -> &AdamState {
        &self.optimizer.state
    }

    /// One gradient step on batch `self.step`; returns the batch loss.
    pub fn train_step(&mut self, train: &[&Episode], config: &TrainConfig) -> Result<f64> {
        let (idx, pruned) = batch_plan(train.len(), config, self.step);
        let batch: Vec<&Episode> = idx.iter().map(|&i| train[i]).collect();
        let tape = Tape::new();
        let loss = batch_loss(&tape, &self.model, &batch, &pruned, config.loss)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.into_params();
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(value)
    }

    /// Trains until `config.steps` total steps, calling `eval` on the
    /// configured cadence.
    pub fn run(
        &mut self,
        train: &[&Episode],
        config: &TrainConfig,
        mut eval: impl FnMut(&Model) -> Result<f64>,
        mut on_record: impl FnMut(&LogRecord),
    ) -> Result<Vec<LogRecord>> {
        config.validate()?;
        if train.is_empty() {
            return Err(cfg_err!("no training episodes"));
        }
        let mut log = Vec::new();
        while self.step < config.steps {
            let loss = self.train_step(train, config)?;
            let eval = if config.eval_every > 0 && self.step % config.eval_every == 0 {
                Some(eval(&self.model)?)
            } else {
                None
            };
            let rec = LogRecord {
                step: self.step,
                loss,
                eval,
            };
            on_record(&rec);
            log.push(rec);
        }
        Ok(log)
    }
}

/// Trains an action model; returns the loss curve.
pub fn train_action_model(model: Model, train: &[&Episode], config: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    if config.loss != LossKind::ActionCe {
        return Err(cfg_err!("action training needs the cross-entropy loss"));
    }
    let mut t = Trainer::new(model, config.adam.clone());
    let log = t.run(train, config, |_| Ok(0.0), |_| {})?;
    Ok((t.model, log.into_iter().map(|r| r.loss).collect()))
}

/// Mean and standard deviation of the return targets over `episodes`.
pub fn return_stats(episodes: &[&Episode]) -> (f64, f64) {
    let all: Vec<f64> = episodes
        .iter()
        .flat_map(|e| make_return_targets(e, 1.0).into_iter().flatten())
        .collect();
    let (m, s) = mean_std(&all);
    (m, if s > 0.0 { s } else { 1.0 })
}

/// Trains a return model. When `standardize` is set the output layer is
/// shifted and scaled to the training targets first.
pub fn train_return_model(
    mut model: Model,
    train: &[&Episode],
    config: &TrainConfig,
    standardize: bool,
) -> Result<(Model, Vec<f64>)> {
    if config.loss != LossKind::ReturnMse {
        return Err(cfg_err!("return training needs the squared-error loss"));
    }
    if standardize {
        let (m, s) = return_stats(train);
        model.config.output_shift = m;
        model.config.output_scale = s;
    }
    let mut t = Trainer::new(model, config.adam.clone());
    let log = t.run(train, config, |_| Ok(0.0), |_| {})?;
    Ok((t.model, log.into_iter().map(|r| r.loss).collect()))
}

/// Argmax actions per step and agent under teacher forcing.
pub fn predicted_actions(model: &Model, episode: &Episode) -> Result<Vec<Vec<usize>>> {
    let tape = Tape::new();
    let outs = unroll_batch(&tape, model, &[episode], &[false])?;
    let k = model.config.out_dim();
    Ok(outs
        .iter()
        .map(|&o| {
            let v = tape.value(o);
            (0..model.config.n_agents).map(|a| argmax(&v.data()[a * k..(a + 1) * k])).collect()
        })
        .collect())
}

/// Number of leading steps on which every agent's prediction is right.
pub fn perfect_length(predicted: &[Vec<usize>], episode: &Episode) -> usize {
    predicted
        .iter()
        .zip(&episode.steps)
        .take_while(|(p, s)| p.iter().zip(&s.actions).all(|(a, b)| *a == b.index()))
        .count()
}

pub fn eval_perfect_rollout(model: &Model, episodes: &[&Episode], workers: usize) -> Result<RolloutStats> {
    let lengths = parallel_map(episodes.len(), workers, |i| {
        Ok(perfect_length(&predicted_actions(model, episodes[i])?, episodes[i]))
    })?;
    Ok(RolloutStats::from_lengths(lengths))
}

/// Most common first-step action in `episodes`, lowest index on ties.
pub fn first_action_mode(episodes: &[&Episode]) -> Action {
    let mut counts = [0usize; Action::COUNT];
    for ep in episodes {
        if let Some(s) = ep.steps.first() {
            s.actions.iter().for_each(|a| counts[a.index()] += 1);
        }
    }
    let best = (0..Action::COUNT).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
    Action::ALL[best]
}

/// Baseline that predicts each agent repeats its previous action, and
/// `first` on the first step.
pub fn copy_last_action_rollout(episodes: &[&Episode], first: Action) -> RolloutStats {
    let lengths = episodes
        .iter()
        .map(|ep| {
            let pred: Vec<Vec<usize>> = (0..ep.len())
                .map(|t| {
                    (0..ep.n_agents())
                        .map(|a| if t == 0 { first.index() } else { ep.steps[t - 1].actions[a].index() })
                        .collect()
                })
                .collect();
            perfect_length(&pred, ep)
        })
        .collect();
    RolloutStats::from_lengths(lengths)
}

/// Mean squared return error of a model over agent vertices.
pub fn eval_return_mse(model: &Model, episodes: &[&Episode], pruned: bool, workers: usize) -> Result<f64> {
    let per = parallel_map(episodes.len(), workers, |i| {
        let ep = episodes[i];
        let tape = Tape::new();
        let outs = unroll_batch(&tape, model, &[ep], &[pruned])?;
        let targets = make_return_targets(ep, 1.0);
        let mut s = 0.0;
        for (t, &o) in outs.iter().enumerate() {
            for (p, y) in tape.value(o).data().iter().zip(&targets[t]) {
                s += (p - y) * (p - y);
            }
        }
        Ok((s, ep.len() * ep.n_agents()))
    })?;
    let (s, n) = per.iter().fold((0.0, 0usize), |acc, (s, n)| (acc.0 + s, acc.1 + n));
    Ok(s / n.max(1) as f64)
}

/// Squared error of always predicting the mean training return.
pub fn predict_mean_mse(train: &[&Episode], eval: &[&Episode]) -> f64 {
    let mean = if train.is_empty() { 0.0 } else { return_stats(train).0 };
    let mut s = 0.0;
    let mut n = 0;
    for ep in eval {
        for row in make_return_targets(ep, 1.0) {
            for y in row {
                s += (y - mean) * (y - mean);
                n += 1;
            }
        }
    }
    s / n.max(1) as f64
}

//! Trajectory collection and the line-delimited episode dataset format.


use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{Action, CoinRoles, EnvState, Event, GameConfig, GraphOptions, VertexRole};
use crate::error::{cfg_err, Error, Result};
use crate::graph::Graph;
use crate::policies::{A2cAgent, A2cPolicy, Policy, ScriptedConfig, ScriptedPolicy};
use crate::tensor::Checkpoint;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One transition: the graph the agents acted on and what followed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub graph: Graph,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub config: GameConfig,
    pub seed: u64,
    #[serde(default)]
    pub split: Split,
    pub roles: Vec<VertexRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coin_roles: Option<CoinRoles>,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    /// Step `t`'s graph without the edges between agents.
    pub fn pruned_graph(&self, t: usize) -> Graph {
        let n = self.n_agents();
        self.steps[t].graph.filter_edges(|_, s, r| !(s < n && r < n))
    }

    /// Checks the invariants a loaded episode must satisfy.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.steps.len() != self.config.episode_length {
            return Err(Error::Format(format!(
                "episode {} has {} steps, expected {}",
                self.seed,
                self.steps.len(),
                self.config.episode_length
            )));
        }
        let n = self.config.n_agents;
        if self.roles.len() != self.config.n_vertices() {
            return Err(Error::Format(format!("{} vertex roles for {} vertices", self.roles.len(), self.config.n_vertices())));
        }
        for (t, step) in self.steps.iter().enumerate() {
            if step.actions.len() != n || step.rewards.len() != n {
                return Err(Error::Format(format!("step {} of episode {} has wrong agent count", t, self.seed)));
            }
            if step.graph.n_vertices() != self.roles.len() {
                return Err(Error::Format(format!("step {} graph has {} vertices", t, step.graph.n_vertices())));
            }
            if !step.graph.same_connectivity(&self.steps[0].graph) {
                return Err(Error::Format(format!("connectivity changes at step {} of episode {}", t, self.seed)));
            }
        }
        Ok(())
    }
}

/// Per-step, per-agent return-to-go, `R_t = r_t + discount * R_{t+1}`.
pub fn make_return_targets(episode: &Episode, discount: f64) -> Vec<Vec<f64>> {
    let n = episode.n_agents();
    let mut out = vec![vec![0.0; n]; episode.len()];
    let mut acc = vec![0.0; n];
    for t in (0..episode.len()).rev() {
        for a in 0..n {
            acc[a] = episode.steps[t].rewards[a] + discount * acc[a];
            out[t][a] = acc[a];
        }
    }
    out
}

/// Where collected behavior comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PolicySpec {
    Scripted(ScriptedConfig),
    /// A trained A2C agent checkpoint, one file shared by all agents.
    Checkpoint { path: String },
}

impl PolicySpec {
    pub fn describe(&self) -> String {
        match self {
            PolicySpec::Scripted(c) => format!(
                "scripted(epsilon={}, stag_radius={}, yield_apples={})",
                c.epsilon, c.stag_radius, c.yield_apples
            ),
            PolicySpec::Checkpoint { path } => format!("checkpoint({})", path),
        }
    }
}

/// Builds one policy per agent for an episode.
pub trait PolicyFactory: Sync {
    fn make(&self, agent: usize, episode_seed: u64) -> Result<Box<dyn Policy>>;
    fn describe(&self) -> String;
}

/// Factory for a [`PolicySpec`]; checkpoints are loaded once.
pub struct SpecFactory {
    spec: PolicySpec,
    agent: Option<A2cAgent>,
}

impl SpecFactory {
    pub fn new(spec: PolicySpec, game: &GameConfig) -> Result<Self> {
        let agent = match &spec {
            PolicySpec::Scripted(c) => {
                if !(0.0..=1.0).contains(&c.epsilon) {
                    return Err(cfg_err!("epsilon {} outside [0, 1]", c.epsilon));
                }
                None
            }
            PolicySpec::Checkpoint { path } => {
                let agent = A2cAgent::from_checkpoint(&Checkpoint::load(path)?)?;
                let want = crate::policies::input_spec(game, 0);
                if agent.spec != want {
                    return Err(cfg_err!(
                        "checkpoint {} expects input {:?}, {} provides {:?}",
                        path,
                        agent.spec,
                        game.name(),
                        want
                    ));
                }
                Some(agent)
            }
        };
        Ok(SpecFactory { spec, agent })
    }
}

impl PolicyFactory for SpecFactory {
    fn make(&self, agent: usize, episode_seed: u64) -> Result<Box<dyn Policy>> {
        let seed = derive_seed(episode_seed, 1 + agent as u64);
        Ok(match (&self.spec, &self.agent) {
            (PolicySpec::Scripted(c), _) => Box::new(ScriptedPolicy::new(c.clone(), seed)),
            (_, Some(a)) => Box::new(A2cPolicy::new(a.clone(), seed)),
            _ => return Err(cfg_err!("checkpoint policy was not loaded")),
        })
    }

    fn describe(&self) -> String {
        self.spec.describe()
    }
}

/// SplitMix64 mix of a base seed and a stream id.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Plays one episode with seed `seed`.
pub fn collect_episode(config: &GameConfig, factory: &dyn PolicyFactory, seed: u64, split: Split) -> Result<Episode> {
    let mut env = EnvState::reset(config, seed)?;
    let mut policies = (0..config.n_agents)
        .map(|a| factory.make(a, seed))
        .collect::<Result<Vec<_>>>()?;
    let roles = env.vertex_roles();
    let coin_roles = env.coin_roles().cloned();
    let mut steps = Vec::with_capacity(config.episode_length);
    while !env.is_done() {
        let graph = env.graph(GraphOptions::default())?;
        let actions = policies
            .iter_mut()
            .enumerate()
            .map(|(a, p)| p.act(&env, a))
            .collect::<Result<Vec<_>>>()?;
        let r = env.step(&actions)?;
        steps.push(Step {
            graph,
            actions,
            rewards: r.rewards,
            events: r.events,
        });
    }
    Ok(Episode {
        config: config.clone(),
        seed,
        split,
        roles,
        coin_roles,
        steps,
    })
}

/// Header line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub game: String,
    pub n_episodes: usize,
    #[serde(default)]
    pub n_eval: usize,
    pub base_seed: u64,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn empty(game: &GameConfig, base_seed: u64, policy: &str) -> Self {
        Dataset {
            header: DatasetHeader {
                format_version: DATASET_FORMAT_VERSION,
                game: game.name(),
                n_episodes: 0,
                n_eval: 0,
                base_seed,
                policy: policy.to_string(),
            },
            episodes: Vec::new(),
        }
    }

    pub fn train(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(|e| e.split == Split::Train)
    }

    pub fn eval(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(|e| e.split == Split::Eval)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", to_json(&self.header)?).map_err(|e| Error::io("<dataset>", e))?;
        for ep in &self.episodes {
            writeln!(w, "{}", to_json(ep)?).map_err(|e| Error::io("<dataset>", e))?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = match lines.next() {
            Some(l) => l.map_err(|e| Error::io("<dataset>", e))?,
            None => return Err(Error::Parse { line: 1, message: "missing header line".into() }),
        };
        let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(DATASET_FORMAT_VERSION as u64) {
            return Err(Error::Format(format!(
                "dataset format_version {:?}, expected {}",
                version, DATASET_FORMAT_VERSION
            )));
        }
        let header: DatasetHeader = serde_json::from_value(raw).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let mut episodes = Vec::with_capacity(header.n_episodes);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ep: Episode = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            ep.validate().map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            episodes.push(ep);
        }
        if episodes.len() != header.n_episodes {
            return Err(Error::Format(format!(
                "header announces {} episodes, file holds {}",
                header.n_episodes,
                episodes.len()
            )));
        }
        Ok(Dataset { header, episodes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub game: GameConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub base_seed: u64,
    pub workers: usize,
}

/// Collects `n_train + n_eval` episodes; episode `i` uses seed
/// `base_seed + i` and the last `n_eval` form the eval split.
pub fn collect(cfg: &CollectConfig, factory: &dyn PolicyFactory) -> Result<Dataset> {
    cfg.game.validate()?;
    let n = cfg.n_train + cfg.n_eval;
    let job = |i: usize| {
        let split = if i < cfg.n_train { Split::Train } else { Split::Eval };
        collect_episode(&cfg.game, factory, cfg.base_seed.wrapping_add(i as u64), split)
    };
    let episodes = parallel_map(n, cfg.workers, job)?;
    let mut ds = Dataset::empty(&cfg.game, cfg.base_seed, &factory.describe());
    ds.header.n_episodes = n;
    ds.header.n_eval = cfg.n_eval;
    ds.episodes = episodes;
    Ok(ds)
}

/// Runs `f(0..n)` on up to `workers` threads and returns results in index
/// order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = (w * chunk).min(n);
                let hi = ((w + 1) * chunk).min(n);
                scope.spawn(move || (lo..hi).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("worker panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

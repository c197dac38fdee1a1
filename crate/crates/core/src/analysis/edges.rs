use serde::{Deserialize, Serialize};

use super::stats::{compare, compare_paired, mean_stderr, pearson_r, Comparison, Correlation};
use crate::data::{parallel_map, Episode};
use crate::envs::{EntityKind, EventKind, VertexRole, TYPE_SLOTS};
use crate::error::{cfg_err, Result};
use crate::graph::{Graph, Model};
use crate::tensor::Tape;

/// Fewer events than this marks a test as low-power.
pub const MIN_EVENTS: usize = 20;

/// Decoder output edge norms of one episode, restricted to edges that end
/// at an agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEdgeNorms {
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    /// `[step][edge]`.
    pub norms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub step: usize,
    pub sender: usize,
    pub sender_role: VertexRole,
    pub receiver: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeNormSeries {
    pub episodes: Vec<EpisodeEdgeNorms>,
}

impl EdgeNormSeries {
    pub fn n_records(&self) -> usize {
        self.episodes.iter().map(|e| e.norms.len() * e.senders.len()).sum()
    }

    /// Flat records of episode `i`.
    pub fn records(&self, i: usize, roles: &[VertexRole]) -> Vec<EdgeRecord> {
        let e = &self.episodes[i];
        let mut out = Vec::with_capacity(e.norms.len() * e.senders.len());
        for (t, row) in e.norms.iter().enumerate() {
            for (k, &norm) in row.iter().enumerate() {
                out.push(EdgeRecord {
                    step: t,
                    sender: e.senders[k],
                    sender_role: roles[e.senders[k]],
                    receiver: e.receivers[k],
                    norm,
                });
            }
        }
        out
    }
}

fn episode_norms(model: &Model, ep: &Episode) -> Result<EpisodeEdgeNorms> {
    let n_agents = model.config.n_agents;
    let tape = Tape::new();
    let first = model.input_graph(&ep.steps[0].graph);
    let keep: Vec<usize> = (0..first.n_edges()).filter(|&k| first.receivers()[k] < n_agents).collect();
    let senders = keep.iter().map(|&k| first.senders()[k]).collect();
    let receivers = keep.iter().map(|&k| first.receivers()[k]).collect();
    let topo = model.topology(&[&ep.steps[0].graph])?;
    let mut state = model.initial_state(&tape, &topo)?;
    let mut norms = Vec::with_capacity(ep.len());
    for step in &ep.steps {
        if !model.input_graph(&step.graph).same_connectivity(&first) {
            return Err(cfg_err!("episode {} changes connectivity mid-episode", ep.seed));
        }
        let input = model.inputs(&tape, &topo, &[&step.graph])?;
        let (out, next) = model.step(&tape, &topo, &input, &state)?;
        state = next;
        let edges = out
            .graph
            .and_then(|g| g.edges)
            .ok_or_else(|| cfg_err!("{} model has no output edges", model.config.kind))?;
        let value = tape.value(edges);
        let data = value.data();
        let width = data.len() / topo.n_edges.max(1);
        norms.push(
            keep.iter()
                .map(|&k| data[k * width..(k + 1) * width].iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
        );
    }
    Ok(EpisodeEdgeNorms {
        senders,
        receivers,
        norms,
    })
}

/// Teacher-forced unroll of every episode, recording the norm of each
/// decoder output edge whose receiver is an agent.
pub fn extract_edge_norms(model: &Model, episodes: &[&Episode], workers: usize) -> Result<EdgeNormSeries> {
    if episodes.iter().any(|e| e.is_empty()) {
        return Err(cfg_err!("cannot extract edge norms from an empty episode"));
    }
    let episodes = parallel_map(episodes.len(), workers, |i| episode_norms(model, episodes[i]))?;
    Ok(EdgeNormSeries { episodes })
}

/// Grid position of every vertex at step `t`, using the center of
/// multi-cell entities.
pub fn vertex_positions(ep: &Episode, t: usize) -> Vec<(f64, f64)> {
    let g = &ep.steps[t].graph;
    let (w, h) = ((ep.config.width - 1).max(1) as f64, (ep.config.height - 1).max(1) as f64);
    ep.roles
        .iter()
        .enumerate()
        .map(|(v, role)| {
            let attr = g.vertex(v);
            let half = match role {
                VertexRole::Entity { kind, .. } => (kind.size() - 1) as f64 / 2.0,
                VertexRole::Agent { .. } => 0.0,
            };
            ((attr[0] * w).round() + half, (attr[1] * h).round() + half)
        })
        .collect()
}

/// Availability flag of vertex `v` at step `t`.
pub fn is_available(g: &Graph, v: usize) -> bool {
    g.vertex(v)[2 + TYPE_SLOTS] > 0.5
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDisplacement {
    /// 1 is the strongest incoming edge.
    pub rank: usize,
    pub mean_displacement: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Signed change in receiver-sender distance over `horizon` steps, grouped
/// by the rank of the edge among the receiver's incoming edges (largest
/// norm first, lower edge index on ties). Negative means the receiver
/// moved toward the sender.
pub fn displacement_by_rank(series: &EdgeNormSeries, episodes: &[&Episode], horizon: usize) -> Vec<RankDisplacement> {
    let mut by_rank: Vec<Vec<f64>> = Vec::new();
    for (norms, ep) in series.episodes.iter().zip(episodes) {
        let n_agents = ep.n_agents();
        let len = ep.len().min(norms.norms.len());
        for t in 0..len.saturating_sub(horizon) {
            let (now, later) = (vertex_positions(ep, t), vertex_positions(ep, t + horizon));
            for a in 0..n_agents {
                let mut incoming: Vec<usize> = (0..norms.receivers.len())
                    .filter(|&k| norms.receivers[k] == a && norms.senders[k] != a)
                    .collect();
                incoming.sort_by(|&i, &j| norms.norms[t][j].total_cmp(&norms.norms[t][i]).then(i.cmp(&j)));
                if by_rank.len() < incoming.len() {
                    by_rank.resize(incoming.len(), Vec::new());
                }
                for (r, &k) in incoming.iter().enumerate() {
                    let s = norms.senders[k];
                    by_rank[r].push(dist(later[a], later[s]) - dist(now[a], now[s]));
                }
            }
        }
    }
    by_rank
        .iter()
        .enumerate()
        .map(|(r, xs)| {
            let (m, se) = mean_stderr(xs);
            RankDisplacement {
                rank: r + 1,
                mean_displacement: m,
                stderr: se,
                n: xs.len(),
            }
        })
        .collect()
}

/// Which series an event window reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Mean norm of the edges sent by the event's entity.
    EntityEdges,
    /// Mean norm of the agent-to-agent edges.
    Teammates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetMean {
    pub offset: i64,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Series values around each event. Offset 0 is the step whose actions
/// produced the event; windows are truncated at episode boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAlignment {
    pub kind: EventKind,
    pub radius: usize,
    /// `windows[e][offset + radius]`.
    pub windows: Vec<Vec<Option<f64>>>,
    /// No event of this kind was found.
    pub empty: bool,
}

impl EventAlignment {
    pub fn at(&self, offset: i64) -> Vec<f64> {
        let i = (offset + self.radius as i64) as usize;
        self.windows.iter().filter_map(|w| w[i]).collect()
    }

    pub fn mean_by_offset(&self) -> Vec<OffsetMean> {
        let r = self.radius as i64;
        (-r..=r)
            .map(|offset| {
                let xs = self.at(offset);
                let (mean, stderr) = mean_stderr(&xs);
                OffsetMean {
                    offset,
                    mean: if xs.is_empty() { 0.0 } else { mean },
                    stderr,
                    n: xs.len(),
                }
            })
            .collect()
    }

    /// Pairs of values at `-offset` and `+offset`, for events that have both.
    pub fn before_after(&self, offset: i64) -> (Vec<f64>, Vec<f64>) {
        let (bi, ai) = ((self.radius as i64 - offset) as usize, (self.radius as i64 + offset) as usize);
        self.windows.iter().filter_map(|w| Some((w[bi]?, w[ai]?))).unzip()
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean norm of the edges sent by vertex `v`, per step.
pub fn sender_series(norms: &EpisodeEdgeNorms, v: usize) -> Vec<Option<f64>> {
    norms
        .norms
        .iter()
        .map(|row| mean_of((0..row.len()).filter(|&k| norms.senders[k] == v).map(|k| row[k])))
        .collect()
}

/// Mean agent-to-agent edge norm per step.
pub fn teammate_series(norms: &EpisodeEdgeNorms, n_agents: usize) -> Vec<Option<f64>> {
    norms
        .norms
        .iter()
        .map(|row| {
            mean_of(
                (0..row.len())
                    .filter(|&k| norms.senders[k] < n_agents && norms.senders[k] != norms.receivers[k])
                    .map(|k| row[k]),
            )
        })
        .collect()
}

/// Vertex index of entity `id`.
pub fn entity_vertex(roles: &[VertexRole], id: usize) -> Option<usize> {
    roles.iter().position(|r| matches!(r, VertexRole::Entity { id: i, .. } if *i == id))
}

/// Aligns a per-step signal on every event of `kind`.
pub fn align_on_events(
    series: &EdgeNormSeries,
    episodes: &[&Episode],
    kind: EventKind,
    signal: Signal,
    radius: usize,
) -> EventAlignment {
    let mut windows = Vec::new();
    for (norms, ep) in series.episodes.iter().zip(episodes) {
        let team = teammate_series(norms, ep.n_agents());
        for step in &ep.steps {
            for e in step.events.iter().filter(|e| e.kind == kind) {
                let values = match signal {
                    Signal::Teammates => team.clone(),
                    Signal::EntityEdges => match e.entity.and_then(|id| entity_vertex(&ep.roles, id)) {
                        Some(v) => sender_series(norms, v),
                        None => continue,
                    },
                };
                windows.push(window(&values, e.step, radius));
            }
        }
    }
    EventAlignment {
        kind,
        radius,
        empty: windows.is_empty(),
        windows,
    }
}

/// Values at `center - radius ..= center + radius`, `None` outside the series.
pub fn window(values: &[Option<f64>], center: usize, radius: usize) -> Vec<Option<f64>> {
    let c = center as i64;
    (c - radius as i64..=c + radius as i64)
        .map(|t| if t < 0 { None } else { values.get(t as usize).copied().flatten() })
        .collect()
}

/// Stag-to-agent edge norms around stag events and grouped by stag state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagStateAnalysis {
    pub became_available: EventAlignment,
    pub became_unavailable: EventAlignment,
    pub mean_available: f64,
    pub stderr_available: f64,
    pub mean_unavailable: f64,
    pub stderr_unavailable: f64,
    pub n_available: usize,
    pub n_unavailable: usize,
    /// Available versus unavailable; `None` when a group is too small.
    pub test: Option<Comparison>,
}

pub fn stag_state_analysis(
    series: &EdgeNormSeries,
    episodes: &[&Episode],
    radius: usize,
    n_resamples: usize,
    seed: u64,
) -> StagStateAnalysis {
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for (norms, ep) in series.episodes.iter().zip(episodes) {
        for (v, role) in ep.roles.iter().enumerate() {
            if !matches!(role, VertexRole::Entity { kind: EntityKind::Stag, .. }) {
                continue;
            }
            for (t, x) in sender_series(norms, v).into_iter().enumerate() {
                if let Some(x) = x {
                    if is_available(&ep.steps[t].graph, v) {
                        on.push(x)
                    } else {
                        off.push(x)
                    }
                }
            }
        }
    }
    let m = |xs: &[f64]| if xs.is_empty() { (0.0, 0.0) } else { mean_stderr(xs) };
    let ((ma, sa), (mu, su)) = (m(&on), m(&off));
    StagStateAnalysis {
        became_available: align_on_events(series, episodes, EventKind::StagRespawn, Signal::EntityEdges, radius),
        became_unavailable: align_on_events(series, episodes, EventKind::StagCaptured, Signal::EntityEdges, radius),
        mean_available: ma,
        stderr_available: sa,
        mean_unavailable: mu,
        stderr_unavailable: su,
        n_available: on.len(),
        n_unavailable: off.len(),
        test: compare(&on, &off, n_resamples, seed, MIN_EVENTS),
    }
}

/// Agent-to-agent edge statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeammateTests {
    pub captures: EventAlignment,
    pub apples: EventAlignment,
    /// Norm one step before versus one step after a stag capture.
    pub capture_before_after: Option<Comparison>,
    pub apple_before_after: Option<Comparison>,
    /// Available apple count versus norm, over all steps.
    pub apple_count: Option<Correlation>,
}

pub fn available_count(ep: &Episode, t: usize, kind: EntityKind) -> usize {
    ep.roles
        .iter()
        .enumerate()
        .filter(|(v, r)| matches!(r, VertexRole::Entity { kind: k, .. } if *k == kind) && is_available(&ep.steps[t].graph, *v))
        .count()
}

pub fn teammate_edge_tests(
    series: &EdgeNormSeries,
    episodes: &[&Episode],
    radius: usize,
    n_resamples: usize,
    seed: u64,
) -> TeammateTests {
    let captures = align_on_events(series, episodes, EventKind::StagCaptured, Signal::Teammates, radius);
    let apples = align_on_events(series, episodes, EventKind::AppleCollected, Signal::Teammates, radius);
    let paired = |a: &EventAlignment, s| {
        let (before, after) = a.before_after(1);
        compare_paired(&before, &after, n_resamples, s, MIN_EVENTS)
    };
    let (mut counts, mut norms) = (Vec::new(), Vec::new());
    for (n, ep) in series.episodes.iter().zip(episodes) {
        for (t, x) in teammate_series(n, ep.n_agents()).into_iter().enumerate() {
            if let Some(x) = x {
                counts.push(available_count(ep, t, EntityKind::Apple) as f64);
                norms.push(x);
            }
        }
    }
    TeammateTests {
        capture_before_after: paired(&captures, seed),
        apple_before_after: paired(&apples, seed.wrapping_add(1)),
        apple_count: pearson_r(&counts, &norms, n_resamples, seed.wrapping_add(2)).ok(),
        captures,
        apples,
    }
}

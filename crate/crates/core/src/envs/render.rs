use serde::{Deserialize, Serialize};

use super::{Action, EntityKind, EnvState};
use crate::error::{idx_err, Result};
use crate::graph::Graph;

/// Vertex type one-hot: agent, tile, coin of color 0/1/2, apple, stag.
pub const TYPE_SLOTS: usize = 7;
pub const ACTION_SLOTS: usize = 5;
/// `[x, y, type one-hot (7), state flag, last action one-hot (5)]`, with
/// coordinates scaled to `[0, 1]`.
pub const VERTEX_DIM: usize = 2 + TYPE_SLOTS + 1 + ACTION_SLOTS;

/// Egocentric image with the observer at pixel `(w - 1, h - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[channel][row][col]`, row = y.
    pub planes: Vec<f64>,
    /// Flat side information (the revealed good color in the Coin Game).
    pub extra: Vec<f64>,
}

impl Observation {
    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.planes[(c * self.height + row) * self.width + col]
    }
}

/// What a graph vertex stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexRole {
    Agent { id: usize },
    Entity { id: usize, kind: EntityKind },
}

impl VertexRole {
    pub fn is_agent(&self) -> bool {
        matches!(self, VertexRole::Agent { .. })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOptions {
    /// Drop the edges between agents.
    pub prune_agent_edges: bool,
    /// Replace all edges with one self-edge per vertex.
    pub self_edges_only: bool,
}

/// Sender and receiver lists of the environment graph: every entity sends
/// to every agent, then agents send to each other in `(sender, receiver)`
/// order.
pub fn edge_lists(n_agents: usize, n_entities: usize, opts: GraphOptions) -> (Vec<usize>, Vec<usize>) {
    let n = n_agents + n_entities;
    if opts.self_edges_only {
        return ((0..n).collect(), (0..n).collect());
    }
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    for e in n_agents..n {
        for a in 0..n_agents {
            senders.push(e);
            receivers.push(a);
        }
    }
    if !opts.prune_agent_edges {
        for s in 0..n_agents {
            for r in 0..n_agents {
                if s != r {
                    senders.push(s);
                    receivers.push(r);
                }
            }
        }
    }
    (senders, receivers)
}

impl EnvState {
    pub fn render_observation(&self, agent: usize) -> Result<Observation> {
        let cfg = self.config();
        let me = *self
            .agents()
            .get(agent)
            .ok_or_else(|| idx_err!("no agent {} among {}", agent, cfg.n_agents))?;
        let kinds = cfg.observation_kinds();
        let channels = 2 + kinds.len() + 1;
        let (w, h) = (cfg.width, cfg.height);
        let (width, height) = ((2 * w - 1) as usize, (2 * h - 1) as usize);
        let mut planes = vec![0.0; channels * width * height];
        let mut put = |c: usize, x: i32, y: i32, v: f64| {
            let col = (x - me.x + w - 1) as usize;
            let row = (y - me.y + h - 1) as usize;
            planes[(c * height + row) * width + col] = v;
        };
        for (a, p) in self.agents().iter().enumerate() {
            put(if a == agent { 0 } else { 1 }, p.x, p.y, 1.0);
        }
        for e in self.entities() {
            let c = if e.available {
                2 + kinds.iter().position(|k| *k == e.kind).expect("kind listed")
            } else {
                channels - 1
            };
            for cell in e.cells() {
                put(c, cell.x, cell.y, 1.0);
            }
        }
        let mut extra = Vec::new();
        if let Some(roles) = self.coin_roles() {
            extra = vec![0.0; cfg.n_colors];
            extra[roles.revealed[agent]] = 1.0;
        }
        Ok(Observation {
            channels,
            height,
            width,
            planes,
            extra,
        })
    }

    /// Roles of the graph vertices in canonical order: agents by id, then
    /// entities by type and id.
    pub fn vertex_roles(&self) -> Vec<VertexRole> {
        (0..self.config().n_agents)
            .map(|id| VertexRole::Agent { id })
            .chain(self.entities().iter().map(|e| VertexRole::Entity { id: e.id, kind: e.kind }))
            .collect()
    }

    /// Graph of the current state using the agents' own last actions.
    pub fn graph(&self, opts: GraphOptions) -> Result<Graph> {
        self.to_graph(self.last_actions(), opts)
    }

    pub fn to_graph(&self, last_actions: &[Option<Action>], opts: GraphOptions) -> Result<Graph> {
        let n_agents = self.config().n_agents;
        if last_actions.len() != n_agents {
            return Err(idx_err!("{} last actions for {} agents", last_actions.len(), n_agents));
        }
        let n_entities = self.entities().len();
        let n = n_agents + n_entities;
        let cfg = self.config();
        let norm = |v: i32, extent: i32| if extent > 1 { v as f64 / (extent - 1) as f64 } else { 0.0 };
        let (nx, ny) = (|x| norm(x, cfg.width), |y| norm(y, cfg.height));
        let mut vertices = vec![0.0; n * VERTEX_DIM];
        for (a, p) in self.agents().iter().enumerate() {
            let row = &mut vertices[a * VERTEX_DIM..(a + 1) * VERTEX_DIM];
            row[0] = nx(p.x);
            row[1] = ny(p.y);
            row[2] = 1.0;
            if let Some(act) = last_actions[a] {
                row[2 + TYPE_SLOTS + 1 + act.index()] = 1.0;
            }
        }
        for (i, e) in self.entities().iter().enumerate() {
            let v = n_agents + i;
            let row = &mut vertices[v * VERTEX_DIM..(v + 1) * VERTEX_DIM];
            row[0] = nx(e.pos.x);
            row[1] = ny(e.pos.y);
            row[2 + e.kind.type_slot()] = 1.0;
            row[2 + TYPE_SLOTS] = if e.available { 1.0 } else { 0.0 };
        }
        let (senders, receivers) = edge_lists(n_agents, n_entities, opts);
        Graph::from_parts(Vec::new(), n, VERTEX_DIM, vertices, 0, Vec::new(), senders, receivers)
    }
}

//! Attributed directed graphs and the graph-network models that map them.
//!
//! [`Graph`] is the value exchanged between environments, datasets and
//! models. For computation, a set of graphs is packed into one disjoint
//! union described by a [`Topology`] and a few tensors on a tape.

mod batch;
mod gn;
mod gru;
mod models;

pub use batch::{GraphVars, Topology};
pub use gn::{gn_forward, GnBlock, GnBlockConfig};
pub use gru::{graph_gru_step, GraphGru, GraphGruConfig};
pub use models::{
    make_ablation, rfm_rollout, vain_forward, AblationKind, Model, ModelConfig, ModelKind, RecurrentState, StateSnapshot, StepOutput,
    Task,
};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{dim_err, idx_err, Result};

/// One directed edge on its own, for building graphs by hand.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub attr: Vec<f64>,
    pub sender: usize,
    pub receiver: usize,
}

impl Edge {
    pub fn new(sender: usize, receiver: usize) -> Self {
        Edge {
            attr: Vec::new(),
            sender,
            receiver,
        }
    }
}

/// Directed attributed graph `(u, V, E)` with flat attribute storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    globals: Vec<f64>,
    n_vertices: usize,
    vertex_dim: usize,
    vertices: Vec<f64>,
    edge_dim: usize,
    edges: Vec<f64>,
    senders: Vec<usize>,
    receivers: Vec<usize>,
}

impl Graph {
    pub fn new(globals: Vec<f64>, vertices: Vec<Vec<f64>>, edges: Vec<Edge>) -> Result<Self> {
        let vertex_dim = vertices.first().map_or(0, |v| v.len());
        let edge_dim = edges.first().map_or(0, |e| e.attr.len());
        let n_vertices = vertices.len();
        let mut vflat = Vec::with_capacity(n_vertices * vertex_dim);
        for (i, v) in vertices.iter().enumerate() {
            if v.len() != vertex_dim {
                return Err(dim_err!("vertex {} has {} attributes, expected {}", i, v.len(), vertex_dim));
            }
            vflat.extend_from_slice(v);
        }
        let mut eflat = Vec::with_capacity(edges.len() * edge_dim);
        let mut senders = Vec::with_capacity(edges.len());
        let mut receivers = Vec::with_capacity(edges.len());
        for (k, e) in edges.iter().enumerate() {
            if e.attr.len() != edge_dim {
                return Err(dim_err!("edge {} has {} attributes, expected {}", k, e.attr.len(), edge_dim));
            }
            eflat.extend_from_slice(&e.attr);
            senders.push(e.sender);
            receivers.push(e.receiver);
        }
        Self::from_parts(globals, n_vertices, vertex_dim, vflat, edge_dim, eflat, senders, receivers)
    }

    /// Builds a graph from flat row-major attribute arrays.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        globals: Vec<f64>,
        n_vertices: usize,
        vertex_dim: usize,
        vertices: Vec<f64>,
        edge_dim: usize,
        edges: Vec<f64>,
        senders: Vec<usize>,
        receivers: Vec<usize>,
    ) -> Result<Self> {
        if vertices.len() != n_vertices * vertex_dim {
            return Err(dim_err!(
                "{} vertex values for {} vertices of width {}",
                vertices.len(),
                n_vertices,
                vertex_dim
            ));
        }
        if senders.len() != receivers.len() || edges.len() != senders.len() * edge_dim {
            return Err(dim_err!(
                "edge arrays disagree: {} senders, {} receivers, {} values of width {}",
                senders.len(),
                receivers.len(),
                edges.len(),
                edge_dim
            ));
        }
        for (k, (&s, &r)) in senders.iter().zip(&receivers).enumerate() {
            if s >= n_vertices || r >= n_vertices {
                return Err(idx_err!(
                    "edge {} ({} -> {}) references a vertex outside 0..{}",
                    k,
                    s,
                    r,
                    n_vertices
                ));
            }
        }
        Ok(Graph {
            globals,
            n_vertices,
            vertex_dim,
            vertices,
            edge_dim,
            edges,
            senders,
            receivers,
        })
    }

    pub fn globals(&self) -> &[f64] {
        &self.globals
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_edges(&self) -> usize {
        self.senders.len()
    }

    pub fn vertex_dim(&self) -> usize {
        self.vertex_dim
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    pub fn global_dim(&self) -> usize {
        self.globals.len()
    }

    pub fn vertex(&self, i: usize) -> &[f64] {
        &self.vertices[i * self.vertex_dim..(i + 1) * self.vertex_dim]
    }

    pub fn vertex_data(&self) -> &[f64] {
        &self.vertices
    }

    pub fn edge_attr(&self, k: usize) -> &[f64] {
        &self.edges[k * self.edge_dim..(k + 1) * self.edge_dim]
    }

    pub fn edge_data(&self) -> &[f64] {
        &self.edges
    }

    pub fn senders(&self) -> &[usize] {
        &self.senders
    }

    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    /// Same vertex count and the same (sender, receiver) for every edge.
    pub fn same_connectivity(&self, other: &Graph) -> bool {
        self.n_vertices == other.n_vertices && self.senders == other.senders && self.receivers == other.receivers
    }

    /// Copy with vertex `i` moved to position `perm[i]`; edges keep their
    /// order and have their endpoints re-indexed.
    pub fn relabel(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.n_vertices {
            return Err(dim_err!("permutation of length {} for {} vertices", perm.len(), self.n_vertices));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(idx_err!("{:?} is not a permutation", perm));
            }
        }
        let d = self.vertex_dim;
        let mut vertices = vec![0.0; self.vertices.len()];
        for (i, &p) in perm.iter().enumerate() {
            vertices[p * d..(p + 1) * d].copy_from_slice(self.vertex(i));
        }
        Ok(Graph {
            globals: self.globals.clone(),
            n_vertices: self.n_vertices,
            vertex_dim: d,
            vertices,
            edge_dim: self.edge_dim,
            edges: self.edges.clone(),
            senders: self.senders.iter().map(|&s| perm[s]).collect(),
            receivers: self.receivers.iter().map(|&r| perm[r]).collect(),
        })
    }

    /// Copy keeping only the edges for which `keep(k)` is true.
    pub fn filter_edges(&self, mut keep: impl FnMut(usize, usize, usize) -> bool) -> Graph {
        let mut out = self.clone();
        out.edges.clear();
        out.senders.clear();
        out.receivers.clear();
        for k in 0..self.n_edges() {
            if keep(k, self.senders[k], self.receivers[k]) {
                out.edges.extend_from_slice(self.edge_attr(k));
                out.senders.push(self.senders[k]);
                out.receivers.push(self.receivers[k]);
            }
        }
        out
    }

    /// Same vertices, edge set replaced by one attribute-free self-edge per vertex.
    pub fn with_self_edges(&self) -> Graph {
        Graph {
            globals: self.globals.clone(),
            n_vertices: self.n_vertices,
            vertex_dim: self.vertex_dim,
            vertices: self.vertices.clone(),
            edge_dim: 0,
            edges: Vec::new(),
            senders: (0..self.n_vertices).collect(),
            receivers: (0..self.n_vertices).collect(),
        }
    }

    /// Copy with new vertex attributes of any width.
    pub fn with_vertices(&self, vertex_dim: usize, vertices: Vec<f64>) -> Result<Graph> {
        if vertices.len() != self.n_vertices * vertex_dim {
            return Err(dim_err!("{} values for {} vertices of width {}", vertices.len(), self.n_vertices, vertex_dim));
        }
        let mut g = self.clone();
        g.vertex_dim = vertex_dim;
        g.vertices = vertices;
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    globals: Vec<f64>,
    vertices: Vec<Vec<f64>>,
    senders: Vec<usize>,
    receivers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_attrs: Option<Vec<Vec<f64>>>,
}

impl Serialize for Graph {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let doc = GraphDoc {
            globals: self.globals.clone(),
            vertices: (0..self.n_vertices).map(|i| self.vertex(i).to_vec()).collect(),
            senders: self.senders.clone(),
            receivers: self.receivers.clone(),
            edge_attrs: (self.edge_dim > 0).then(|| (0..self.n_edges()).map(|k| self.edge_attr(k).to_vec()).collect()),
        };
        doc.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Graph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = GraphDoc::deserialize(d)?;
        let vertex_dim = doc.vertices.first().map_or(0, |v| v.len());
        let n_vertices = doc.vertices.len();
        if doc.vertices.iter().any(|v| v.len() != vertex_dim) {
            return Err(D::Error::custom("vertex attribute vectors differ in length"));
        }
        let vertices: Vec<f64> = doc.vertices.into_iter().flatten().collect();
        let (edge_dim, edges) = match doc.edge_attrs {
            Some(attrs) => {
                if attrs.len() != doc.senders.len() {
                    return Err(D::Error::custom("edge_attrs length differs from senders"));
                }
                let dim = attrs.first().map_or(0, |a| a.len());
                if attrs.iter().any(|a| a.len() != dim) {
                    return Err(D::Error::custom("edge attribute vectors differ in length"));
                }
                (dim, attrs.into_iter().flatten().collect())
            }
            None => (0, Vec::new()),
        };
        Graph::from_parts(
            doc.globals,
            n_vertices,
            vertex_dim,
            vertices,
            edge_dim,
            edges,
            doc.senders,
            doc.receivers,
        )
        .map_err(D::Error::custom)
    }
}

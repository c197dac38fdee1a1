use std::sync::Arc;

use super::Graph;
use crate::error::{dim_err, Result};
use crate::tensor::{Segments, Tape, Tensor, Var};

/// Connectivity of a disjoint union of graphs, laid out graph after graph.
#[derive(Debug, Clone)]
pub struct Topology {
    pub n_graphs: usize,
    pub n_vertices: usize,
    pub n_edges: usize,
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
    /// Edge -> receiving vertex.
    pub incoming: Arc<Segments>,
    pub edge_graph: Arc<[usize]>,
    pub edges_by_graph: Arc<Segments>,
    pub vertex_graph: Arc<[usize]>,
    pub vertices_by_graph: Arc<Segments>,
    /// `vertex_offsets[g]..vertex_offsets[g + 1]` are the rows of graph `g`.
    pub vertex_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
}

impl Topology {
    pub fn from_graphs(graphs: &[&Graph]) -> Result<Arc<Self>> {
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        let mut edge_graph = Vec::new();
        let mut vertex_graph = Vec::new();
        let mut vertex_offsets = vec![0];
        let mut edge_offsets = vec![0];
        for (gi, g) in graphs.iter().enumerate() {
            let base = *vertex_offsets.last().unwrap();
            senders.extend(g.senders().iter().map(|s| s + base));
            receivers.extend(g.receivers().iter().map(|r| r + base));
            edge_graph.extend(std::iter::repeat(gi).take(g.n_edges()));
            vertex_graph.extend(std::iter::repeat(gi).take(g.n_vertices()));
            vertex_offsets.push(base + g.n_vertices());
            edge_offsets.push(senders.len());
        }
        let n_vertices = vertex_graph.len();
        let n_graphs = graphs.len();
        Ok(Arc::new(Topology {
            n_graphs,
            n_vertices,
            n_edges: senders.len(),
            incoming: Segments::new(receivers.clone(), n_vertices)?,
            edges_by_graph: Segments::new(edge_graph.clone(), n_graphs)?,
            vertices_by_graph: Segments::new(vertex_graph.clone(), n_graphs)?,
            senders: senders.into(),
            receivers: receivers.into(),
            edge_graph: edge_graph.into(),
            vertex_graph: vertex_graph.into(),
            vertex_offsets,
            edge_offsets,
        }))
    }

    pub fn single(g: &Graph) -> Result<Arc<Self>> {
        Self::from_graphs(&[g])
    }

    /// Rows of the first `k` vertices of every graph, graph by graph.
    pub fn leading_rows(&self, k: usize) -> Result<Arc<[usize]>> {
        let mut rows = Vec::with_capacity(k * self.n_graphs);
        for g in 0..self.n_graphs {
            let (lo, hi) = (self.vertex_offsets[g], self.vertex_offsets[g + 1]);
            if hi - lo < k {
                return Err(dim_err!("graph {} has {} vertices, fewer than {}", g, hi - lo, k));
            }
            rows.extend(lo..lo + k);
        }
        Ok(rows.into())
    }

    /// Stacks the vertex attributes of graphs matching this topology.
    pub fn vertex_tensor(&self, graphs: &[&Graph]) -> Result<Tensor> {
        self.check(graphs)?;
        let d = graphs.first().map_or(0, |g| g.vertex_dim());
        let mut data = Vec::with_capacity(self.n_vertices * d);
        for g in graphs {
            if g.vertex_dim() != d {
                return Err(dim_err!("vertex widths {} and {} in one batch", d, g.vertex_dim()));
            }
            data.extend_from_slice(g.vertex_data());
        }
        Tensor::new(vec![self.n_vertices, d], data)
    }

    pub fn edge_tensor(&self, graphs: &[&Graph]) -> Result<Tensor> {
        self.check(graphs)?;
        let d = graphs.first().map_or(0, |g| g.edge_dim());
        let mut data = Vec::with_capacity(self.n_edges * d);
        for g in graphs {
            if g.edge_dim() != d {
                return Err(dim_err!("edge widths {} and {} in one batch", d, g.edge_dim()));
            }
            data.extend_from_slice(g.edge_data());
        }
        Tensor::new(vec![self.n_edges, d], data)
    }

    pub fn global_tensor(&self, graphs: &[&Graph]) -> Result<Tensor> {
        self.check(graphs)?;
        let d = graphs.first().map_or(0, |g| g.global_dim());
        let mut data = Vec::with_capacity(self.n_graphs * d);
        for g in graphs {
            if g.global_dim() != d {
                return Err(dim_err!("global widths {} and {} in one batch", d, g.global_dim()));
            }
            data.extend_from_slice(g.globals());
        }
        Tensor::new(vec![self.n_graphs, d], data)
    }

    fn check(&self, graphs: &[&Graph]) -> Result<()> {
        if graphs.len() != self.n_graphs {
            return Err(dim_err!("{} graphs for a topology of {}", graphs.len(), self.n_graphs));
        }
        for (i, g) in graphs.iter().enumerate() {
            let (v0, e0) = (self.vertex_offsets[i], self.edge_offsets[i]);
            let ok = g.n_vertices() == self.vertex_offsets[i + 1] - v0
                && g.n_edges() == self.edge_offsets[i + 1] - e0
                && g.senders().iter().zip(&self.senders[e0..]).all(|(a, b)| a + v0 == *b)
                && g.receivers().iter().zip(&self.receivers[e0..]).all(|(a, b)| a + v0 == *b);
            if !ok {
                return Err(dim_err!("graph {} does not match the batch connectivity", i));
            }
        }
        Ok(())
    }
}

/// Attribute tensors of a batched graph on a tape. A part of width zero is
/// represented by `None`.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub edges: Option<Var>,
    pub vertices: Option<Var>,
    pub globals: Option<Var>,
}

fn width(tape: &Tape, v: Option<Var>) -> usize {
    v.map_or(0, |v| tape.shape(v)[1])
}

impl GraphVars {
    /// Puts the attributes of `graphs` on the tape as constants.
    pub fn constant(tape: &Tape, topo: &Topology, graphs: &[&Graph]) -> Result<Self> {
        let nonempty = |t: Tensor| -> Result<Option<Var>> {
            if t.shape()[1] == 0 {
                Ok(None)
            } else {
                tape.constant(t).map(Some)
            }
        };
        Ok(GraphVars {
            edges: nonempty(topo.edge_tensor(graphs)?)?,
            vertices: nonempty(topo.vertex_tensor(graphs)?)?,
            globals: nonempty(topo.global_tensor(graphs)?)?,
        })
    }

    pub fn zeros(tape: &Tape, topo: &Topology, d_e: usize, d_v: usize, d_u: usize) -> Result<Self> {
        let part = |rows: usize, d: usize| -> Result<Option<Var>> {
            if d == 0 {
                Ok(None)
            } else {
                tape.constant(Tensor::zeros(&[rows, d])).map(Some)
            }
        };
        Ok(GraphVars {
            edges: part(topo.n_edges, d_e)?,
            vertices: part(topo.n_vertices, d_v)?,
            globals: part(topo.n_graphs, d_u)?,
        })
    }

    /// A graph without edges carries no edge width; give it `[0, width]`
    /// edges so it can meet a block that expects edge attributes.
    pub fn with_edge_width(self, tape: &Tape, topo: &Topology, width: usize) -> Result<Self> {
        if self.edges.is_none() && topo.n_edges == 0 && width > 0 {
            return Ok(GraphVars {
                edges: Some(tape.constant(Tensor::zeros(&[0, width]))?),
                ..self
            });
        }
        Ok(self)
    }

    pub fn edge_dim(&self, tape: &Tape) -> usize {
        width(tape, self.edges)
    }

    pub fn vertex_dim(&self, tape: &Tape) -> usize {
        width(tape, self.vertices)
    }

    pub fn global_dim(&self, tape: &Tape) -> usize {
        width(tape, self.globals)
    }

    /// Splits the batch back into one [`Graph`] per member.
    pub fn to_graphs(&self, tape: &Tape, topo: &Topology) -> Result<Vec<Graph>> {
        let get = |v: Option<Var>| v.map(|v| tape.value(v));
        let (e, v, u) = (get(self.edges), get(self.vertices), get(self.globals));
        let (de, dv, du) = (self.edge_dim(tape), self.vertex_dim(tape), self.global_dim(tape));
        let mut out = Vec::with_capacity(topo.n_graphs);
        for g in 0..topo.n_graphs {
            let (v0, v1) = (topo.vertex_offsets[g], topo.vertex_offsets[g + 1]);
            let (e0, e1) = (topo.edge_offsets[g], topo.edge_offsets[g + 1]);
            let slice = |t: &Option<Arc<Tensor>>, lo: usize, hi: usize, d: usize| {
                t.as_ref().map_or(Vec::new(), |t| t.data()[lo * d..hi * d].to_vec())
            };
            out.push(Graph::from_parts(
                slice(&u, g, g + 1, du),
                v1 - v0,
                dv,
                slice(&v, v0, v1, dv),
                de,
                slice(&e, e0, e1, de),
                topo.senders[e0..e1].iter().map(|s| s - v0).collect(),
                topo.receivers[e0..e1].iter().map(|r| r - v0).collect(),
            )?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;

    #[test]
    fn union_offsets_indices() {
        let a = Graph::new(vec![], vec![vec![1.0], vec![2.0]], vec![Edge::new(0, 1)]).unwrap();
        let b = Graph::new(vec![], vec![vec![3.0], vec![4.0], vec![5.0]], vec![Edge::new(2, 0), Edge::new(1, 1)]).unwrap();
        let topo = Topology::from_graphs(&[&a, &b]).unwrap();
        assert_eq!(&*topo.senders, &[0, 4, 3]);
        assert_eq!(&*topo.receivers, &[1, 2, 3]);
        assert_eq!(&*topo.leading_rows(2).unwrap(), &[0, 1, 2, 3]);
        assert!(topo.leading_rows(3).is_err());
        let tape = Tape::new();
        let vars = GraphVars::constant(&tape, &topo, &[&a, &b]).unwrap();
        assert!(vars.edges.is_none() && vars.globals.is_none());
        let back = vars.to_graphs(&tape, &topo).unwrap();
        assert_eq!(back, vec![a.clone(), b.clone()]);
        assert!(topo.vertex_tensor(&[&b, &a]).is_err());
    }
}

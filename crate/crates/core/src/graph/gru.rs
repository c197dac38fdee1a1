use serde::{Deserialize, Serialize};

use super::gn::{concat, gather};
use super::{Graph, GraphVars, Topology};
use crate::error::{dim_err, state_err, Result};
use crate::nn::GruCell;
use crate::tensor::{ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphGruConfig {
    pub edge_in: usize,
    pub vertex_in: usize,
    pub global_in: usize,
    pub hidden: usize,
    /// Whether a global GRU is present.
    pub globals: bool,
}

/// A GN whose edge, vertex and global update functions are GRU cells.
///
/// The edge cell sees `(e_k, v_r, v_s, u)` of the input graph, the vertex
/// cell the summed new edge states plus `(v_i, u)`, and the global cell the
/// summed new edge and vertex states plus `u`. Each cell's recurrent input
/// is the matching part of the state graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphGru {
    pub config: GraphGruConfig,
    edge_cell: GruCell,
    vertex_cell: GruCell,
    global_cell: Option<GruCell>,
}

impl GraphGru {
    pub fn new(store: &mut ParamStore, name: &str, config: GraphGruConfig) -> Result<Self> {
        let c = config;
        let h = c.hidden;
        let edge_cell = GruCell::new(
            store,
            &format!("{}/edge", name),
            c.edge_in + 2 * c.vertex_in + c.global_in,
            h,
        )?;
        let vertex_cell = GruCell::new(store, &format!("{}/vertex", name), h + c.vertex_in + c.global_in, h)?;
        let global_cell = if c.globals {
            Some(GruCell::new(store, &format!("{}/global", name), 2 * h + c.global_in, h)?)
        } else {
            None
        };
        Ok(GraphGru {
            config,
            edge_cell,
            vertex_cell,
            global_cell,
        })
    }

    pub fn zero_state(&self, tape: &Tape, topo: &Topology) -> Result<GraphVars> {
        let h = self.config.hidden;
        GraphVars::zeros(tape, topo, h, h, if self.config.globals { h } else { 0 })
    }

    /// One recurrent step; the result is both the output and the next state.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        topo: &Topology,
        input: &GraphVars,
        hidden: &GraphVars,
    ) -> Result<GraphVars> {
        let c = &self.config;
        let input = &input.with_edge_width(tape, topo, c.edge_in)?;
        let hidden = &hidden.with_edge_width(tape, topo, c.hidden)?;
        let got = (input.edge_dim(tape), input.vertex_dim(tape), input.global_dim(tape));
        if got != (c.edge_in, c.vertex_in, c.global_in) {
            return Err(dim_err!(
                "GraphGRU expects (edge, vertex, global) widths {:?}, got {:?}",
                (c.edge_in, c.vertex_in, c.global_in),
                got
            ));
        }
        let (he, hv) = match (hidden.edges, hidden.vertices) {
            (Some(e), Some(v)) => (e, v),
            _ => return Err(state_err!("GraphGRU state is missing edge or vertex parts")),
        };
        let hs = [tape.shape(he), tape.shape(hv)];
        if hs[0] != [topo.n_edges, c.hidden] || hs[1] != [topo.n_vertices, c.hidden] {
            return Err(state_err!(
                "state shapes {:?} do not match {} edges and {} vertices",
                hs,
                topo.n_edges,
                topo.n_vertices
            ));
        }
        let e_in = concat(
            tape,
            &[
                input.edges,
                gather(tape, input.vertices, &topo.receivers)?,
                gather(tape, input.vertices, &topo.senders)?,
                gather(tape, input.globals, &topo.edge_graph)?,
            ],
        )?;
        let e_new = self.edge_cell.forward(tape, store, e_in, he)?;
        let incoming = tape.segment_sum(e_new, &topo.incoming)?;
        let v_in = concat(
            tape,
            &[Some(incoming), input.vertices, gather(tape, input.globals, &topo.vertex_graph)?],
        )?;
        let v_new = self.vertex_cell.forward(tape, store, v_in, hv)?;
        let u_new = match &self.global_cell {
            Some(cell) => {
                let hu = hidden
                    .globals
                    .ok_or_else(|| state_err!("GraphGRU state is missing its global part"))?;
                let e_sum = tape.segment_sum(e_new, &topo.edges_by_graph)?;
                let v_sum = tape.segment_sum(v_new, &topo.vertices_by_graph)?;
                let u_in = concat(tape, &[Some(e_sum), Some(v_sum), input.globals])?;
                Some(cell.forward(tape, store, u_in, hu)?)
            }
            None => None,
        };
        Ok(GraphVars {
            edges: Some(e_new),
            vertices: Some(v_new),
            globals: u_new,
        })
    }
}

/// One GraphGRU step on single graphs. Returns `(output, next_state)`, which
/// are equal.
pub fn graph_gru_step(core: &GraphGru, store: &ParamStore, g_in: &Graph, g_hid: &Graph) -> Result<(Graph, Graph)> {
    if !g_in.same_connectivity(g_hid) {
        return Err(state_err!(
            "state graph connectivity ({} vertices, {} edges) differs from input ({} vertices, {} edges)",
            g_hid.n_vertices(),
            g_hid.n_edges(),
            g_in.n_vertices(),
            g_in.n_edges()
        ));
    }
    let topo = Topology::single(g_in)?;
    let tape = Tape::new();
    let input = GraphVars::constant(&tape, &topo, &[g_in])?;
    let hidden = GraphVars::constant(&tape, &topo, &[g_hid])?;
    let out = core.forward(&tape, store, &topo, &input, &hidden)?;
    let g = out.to_graphs(&tape, &topo)?.remove(0);
    Ok((g.clone(), g))
}

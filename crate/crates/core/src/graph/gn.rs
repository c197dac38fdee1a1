use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Graph, GraphVars, Topology};
use crate::error::{cfg_err, dim_err, Result};
use crate::nn::Mlp;
use crate::tensor::{ParamStore, Tape, Var};

/// Attribute sizes of a GN block. `global_out == 0` drops the global update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnBlockConfig {
    pub edge_in: usize,
    pub vertex_in: usize,
    pub global_in: usize,
    pub edge_out: usize,
    pub vertex_out: usize,
    pub global_out: usize,
    pub hidden: usize,
}

/// Edge, vertex and global update MLPs with sum aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct GnBlock {
    pub config: GnBlockConfig,
    phi_e: Mlp,
    phi_v: Mlp,
    phi_u: Option<Mlp>,
}

pub(crate) fn concat(tape: &Tape, parts: &[Option<Var>]) -> Result<Var> {
    let parts: Vec<Var> = parts.iter().flatten().copied().collect();
    match parts.len() {
        0 => Err(dim_err!("update function has no inputs")),
        1 => Ok(parts[0]),
        _ => tape.concat_cols(&parts),
    }
}

pub(crate) fn gather(tape: &Tape, x: Option<Var>, idx: &Arc<[usize]>) -> Result<Option<Var>> {
    x.map(|x| tape.gather_rows(x, idx.clone())).transpose()
}

impl GnBlock {
    /// The vertex update function.
    pub fn vertex_mlp(&self) -> &Mlp {
        &self.phi_v
    }

    pub fn new(store: &mut ParamStore, name: &str, config: GnBlockConfig) -> Result<Self> {
        let c = config;
        if c.edge_out == 0 || c.vertex_out == 0 {
            return Err(cfg_err!("GN block {} needs nonzero edge and vertex outputs", name));
        }
        let e_in = c.edge_in + 2 * c.vertex_in + c.global_in;
        let v_in = c.edge_out + c.vertex_in + c.global_in;
        if e_in == 0 {
            return Err(cfg_err!("GN block {} has an edge function without inputs", name));
        }
        let hidden = [c.hidden];
        let phi_e = Mlp::new(store, &format!("{}/phi_e", name), e_in, &hidden, c.edge_out)?;
        let phi_v = Mlp::new(store, &format!("{}/phi_v", name), v_in, &hidden, c.vertex_out)?;
        let phi_u = if c.global_out > 0 {
            let u_in = c.edge_out + c.vertex_out + c.global_in;
            Some(Mlp::new(store, &format!("{}/phi_u", name), u_in, &hidden, c.global_out)?)
        } else {
            None
        };
        Ok(GnBlock {
            config,
            phi_e,
            phi_v,
            phi_u,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, topo: &Topology, g: &GraphVars) -> Result<GraphVars> {
        let c = &self.config;
        let g = &g.with_edge_width(tape, topo, c.edge_in)?;
        let got = (g.edge_dim(tape), g.vertex_dim(tape), g.global_dim(tape));
        if got != (c.edge_in, c.vertex_in, c.global_in) {
            return Err(dim_err!(
                "GN block expects (edge, vertex, global) widths {:?}, got {:?}",
                (c.edge_in, c.vertex_in, c.global_in),
                got
            ));
        }
        let u_per_edge = gather(tape, g.globals, &topo.edge_graph)?;
        let e_in = concat(
            tape,
            &[
                g.edges,
                gather(tape, g.vertices, &topo.receivers)?,
                gather(tape, g.vertices, &topo.senders)?,
                u_per_edge,
            ],
        )?;
        let e_new = self.phi_e.forward(tape, store, e_in)?;

        let incoming = tape.segment_sum(e_new, &topo.incoming)?;
        let u_per_vertex = gather(tape, g.globals, &topo.vertex_graph)?;
        let v_in = concat(tape, &[Some(incoming), g.vertices, u_per_vertex])?;
        let v_new = self.phi_v.forward(tape, store, v_in)?;

        let u_new = match &self.phi_u {
            Some(phi_u) => {
                let e_sum = tape.segment_sum(e_new, &topo.edges_by_graph)?;
                let v_sum = tape.segment_sum(v_new, &topo.vertices_by_graph)?;
                let u_in = concat(tape, &[Some(e_sum), Some(v_sum), g.globals])?;
                Some(phi_u.forward(tape, store, u_in)?)
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

/// Applies one GN block to a single graph.
pub fn gn_forward(block: &GnBlock, store: &ParamStore, g: &Graph) -> Result<Graph> {
    let topo = Topology::single(g)?;
    let tape = Tape::new();
    let input = GraphVars::constant(&tape, &topo, &[g])?;
    let out = block.forward(&tape, store, &topo, &input)?;
    Ok(out.to_graphs(&tape, &topo)?.remove(0))
}

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GnBlock, GnBlockConfig, Graph, GraphGru, GraphGruConfig, GraphVars, Topology};
use crate::error::{cfg_err, dim_err, state_err, Error, Result};
use crate::nn::{Linear, LstmCell, Mlp};
use crate::tensor::{AdamState, Checkpoint, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rfm,
    Vain,
    Feedforward,
    NoRelation,
    MlpLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Rfm,
        ModelKind::Vain,
        ModelKind::Feedforward,
        ModelKind::NoRelation,
        ModelKind::MlpLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rfm => "rfm",
            ModelKind::Vain => "vain",
            ModelKind::Feedforward => "feedforward",
            ModelKind::NoRelation => "norelation",
            ModelKind::MlpLstm => "mlplstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rfm" => Ok(ModelKind::Rfm),
            "vain" => Ok(ModelKind::Vain),
            "feedforward" => Ok(ModelKind::Feedforward),
            "norelation" | "no_relation" => Ok(ModelKind::NoRelation),
            "mlplstm" | "mlp_lstm" => Ok(ModelKind::MlpLstm),
            _ => Err(cfg_err!(
                "unknown model '{}' (expected rfm, vain, feedforward, norelation or mlplstm)",
                s
            )),
        }
    }
}

/// Ablations derived from a full RFM configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Feedforward,
    NoRelation,
}

impl FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedforward" => Ok(AblationKind::Feedforward),
            "no_relation" | "norelation" => Ok(AblationKind::NoRelation),
            _ => Err(cfg_err!("unknown ablation '{}' (expected feedforward or no_relation)", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Next-action logits per agent.
    Action,
    /// Return-to-go estimate per agent.
    Return,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Action => "action",
            Task::Return => "return",
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "action" => Ok(Task::Action),
            "return" => Ok(Task::Return),
            _ => Err(cfg_err!("unknown task '{}' (expected action or return)", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub task: Task,
    pub vertex_dim: usize,
    /// Agents occupy the first `n_agents` vertices of every graph.
    pub n_agents: usize,
    /// Fixed vertex count, needed by the vector baseline.
    pub n_vertices: usize,
    pub n_actions: usize,
    pub mlp_hidden: usize,
    /// Width of encoder outputs, recurrent states and decoder messages.
    pub latent: usize,
    pub globals: bool,
    pub vain_key_dim: usize,
    pub lstm_hidden: usize,
    pub decoder_hidden: Vec<usize>,
    /// Agent outputs are `raw * output_scale + output_shift`, so a return
    /// model can learn on standardized targets.
    #[serde(default)]
    pub output_shift: f64,
    #[serde(default = "one")]
    pub output_scale: f64,
    /// Start the output layer at zero, so an untrained action model is
    /// uniform and an untrained return model predicts `output_shift`.
    #[serde(default)]
    pub zero_head: bool,
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(kind: ModelKind, task: Task, vertex_dim: usize, n_agents: usize, n_vertices: usize) -> Self {
        ModelConfig {
            kind,
            task,
            vertex_dim,
            n_agents,
            n_vertices,
            n_actions: 5,
            mlp_hidden: 64,
            latent: 32,
            // Return models estimate the pruned-graph marginal, which needs
            // the teammate to be unreachable once its edges are removed.
            globals: matches!(kind, ModelKind::Rfm | ModelKind::Feedforward) && task == Task::Action,
            vain_key_dim: 16,
            lstm_hidden: 32,
            decoder_hidden: vec![32, 32],
            output_shift: 0.0,
            output_scale: 1.0,
            zero_head: true,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.task {
            Task::Action => self.n_actions,
            Task::Return => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vertex_dim == 0 || self.n_agents == 0 || self.latent == 0 || self.mlp_hidden == 0 {
            return Err(cfg_err!("model sizes must be positive: {:?}", self));
        }
        if self.n_agents > self.n_vertices {
            return Err(cfg_err!("{} agents but only {} vertices", self.n_agents, self.n_vertices));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0 && self.output_shift.is_finite()) {
            return Err(cfg_err!("output scale must be positive and finite"));
        }
        if self.kind == ModelKind::NoRelation && self.globals {
            return Err(cfg_err!("the no-relation model cannot use global attributes"));
        }
        Ok(())
    }
}

/// Output of one model step on a batch.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `[n_graphs * n_agents, out_dim]`, graph by graph, agents in id order.
    pub agents: Var,
    /// Decoder output graph (GN models), or per-vertex outputs with scalar
    /// attention weights on the edges (VAIN).
    pub graph: Option<GraphVars>,
    /// GraphGRU output edge states, when the model has a core.
    pub core_edges: Option<Var>,
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, Copy)]
pub enum RecurrentState {
    Stateless,
    Graph(GraphVars),
    Lstm { h: Var, c: Var },
}

impl RecurrentState {
    /// Copies the state values onto another tape as constants, cutting the
    /// gradient path.
    pub fn carry(&self, from: &Tape, to: &Tape) -> Result<RecurrentState> {
        let copy = |v: Var| to.constant((*from.value(v)).clone());
        let copy_opt = |v: Option<Var>| v.map(copy).transpose();
        Ok(match self {
            RecurrentState::Stateless => RecurrentState::Stateless,
            RecurrentState::Graph(g) => RecurrentState::Graph(GraphVars {
                edges: copy_opt(g.edges)?,
                vertices: copy_opt(g.vertices)?,
                globals: copy_opt(g.globals)?,
            }),
            RecurrentState::Lstm { h, c } => RecurrentState::Lstm {
                h: copy(*h)?,
                c: copy(*c)?,
            },
        })
    }
}

/// Recurrent state values detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub enum StateSnapshot {
    Stateless,
    Graph {
        edges: Option<Tensor>,
        vertices: Option<Tensor>,
        globals: Option<Tensor>,
    },
    Lstm { h: Tensor, c: Tensor },
}

impl RecurrentState {
    pub fn snapshot(&self, tape: &Tape) -> StateSnapshot {
        let val = |v: Var| (*tape.value(v)).clone();
        match self {
            RecurrentState::Stateless => StateSnapshot::Stateless,
            RecurrentState::Graph(g) => StateSnapshot::Graph {
                edges: g.edges.map(val),
                vertices: g.vertices.map(val),
                globals: g.globals.map(val),
            },
            RecurrentState::Lstm { h, c } => StateSnapshot::Lstm { h: val(*h), c: val(*c) },
        }
    }
}

impl StateSnapshot {
    /// Places the values on `tape` as constants.
    pub fn load(&self, tape: &Tape) -> Result<RecurrentState> {
        let opt = |t: &Option<Tensor>| t.clone().map(|t| tape.constant(t)).transpose();
        Ok(match self {
            StateSnapshot::Stateless => RecurrentState::Stateless,
            StateSnapshot::Graph { edges, vertices, globals } => RecurrentState::Graph(GraphVars {
                edges: opt(edges)?,
                vertices: opt(vertices)?,
                globals: opt(globals)?,
            }),
            StateSnapshot::Lstm { h, c } => RecurrentState::Lstm {
                h: tape.constant(h.clone())?,
                c: tape.constant(c.clone())?,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Arch {
    Gn {
        encoder: GnBlock,
        core: Option<GraphGru>,
        decoder: GnBlock,
    },
    Vain {
        embed: Mlp,
        key: Mlp,
        decode: Mlp,
    },
    MlpLstm {
        encoder: Linear,
        lstm: LstmCell,
        decoder: Mlp,
    },
}

/// A forward model: configuration, parameters and layer layout.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    arch: Arch,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let c = &config;
        let l = c.latent;
        let g = if c.globals { l } else { 0 };
        let arch = match c.kind {
            ModelKind::Rfm | ModelKind::Feedforward | ModelKind::NoRelation => {
                let encoder = GnBlock::new(
                    &mut store,
                    "encoder",
                    GnBlockConfig {
                        edge_in: 0,
                        vertex_in: c.vertex_dim,
                        global_in: 0,
                        edge_out: l,
                        vertex_out: l,
                        global_out: g,
                        hidden: c.mlp_hidden,
                    },
                )?;
                let core = if c.kind == ModelKind::Feedforward {
                    None
                } else {
                    Some(GraphGru::new(
                        &mut store,
                        "core",
                        GraphGruConfig {
                            edge_in: l,
                            vertex_in: l,
                            global_in: g,
                            hidden: l,
                            globals: c.globals,
                        },
                    )?)
                };
                // The decoder's global output would not reach any loss, so
                // it is left out.
                let decoder = GnBlock::new(
                    &mut store,
                    "decoder",
                    GnBlockConfig {
                        edge_in: l,
                        vertex_in: l,
                        global_in: g,
                        edge_out: l,
                        vertex_out: c.out_dim(),
                        global_out: 0,
                        hidden: c.mlp_hidden,
                    },
                )?;
                Arch::Gn { encoder, core, decoder }
            }
            ModelKind::Vain => Arch::Vain {
                embed: Mlp::new(&mut store, "vain/embed", c.vertex_dim, &[c.mlp_hidden], l)?,
                key: Mlp::new(&mut store, "vain/key", c.vertex_dim, &[c.mlp_hidden], c.vain_key_dim)?,
                decode: Mlp::new(&mut store, "vain/decode", 2 * l, &[c.mlp_hidden], c.out_dim())?,
            },
            ModelKind::MlpLstm => Arch::MlpLstm {
                encoder: Linear::new(&mut store, "mlplstm/encoder", c.n_vertices * c.vertex_dim, c.mlp_hidden)?,
                lstm: LstmCell::new(&mut store, "mlplstm/lstm", c.mlp_hidden, c.lstm_hidden)?,
                decoder: Mlp::new(
                    &mut store,
                    "mlplstm/decoder",
                    c.lstm_hidden,
                    &c.decoder_hidden,
                    c.n_agents * c.out_dim(),
                )?,
            },
        };
        if config.zero_head {
            let head = match &arch {
                Arch::Gn { decoder, .. } => decoder.vertex_mlp(),
                Arch::Vain { decode, .. } => decode,
                Arch::MlpLstm { decoder, .. } => decoder,
            };
            head.zero_output(&mut store)?;
        }
        Ok(Model {
            config,
            params: store,
            arch,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn is_recurrent(&self) -> bool {
        match &self.arch {
            Arch::Gn { core, .. } => core.is_some(),
            Arch::Vain { .. } => false,
            Arch::MlpLstm { .. } => true,
        }
    }

    /// The graph the model actually consumes: the no-relation model sees
    /// one self-edge per vertex instead of the environment edges.
    pub fn input_graph<'a>(&self, g: &'a Graph) -> Cow<'a, Graph> {
        if self.config.kind == ModelKind::NoRelation {
            Cow::Owned(g.with_self_edges())
        } else {
            Cow::Borrowed(g)
        }
    }

    /// Batch connectivity for `graphs` as seen by this model.
    pub fn topology(&self, graphs: &[&Graph]) -> Result<Arc<Topology>> {
        let owned: Vec<Cow<Graph>> = graphs.iter().map(|g| self.input_graph(g)).collect();
        let refs: Vec<&Graph> = owned.iter().map(|g| g.as_ref()).collect();
        let topo = Topology::from_graphs(&refs)?;
        if self.config.kind == ModelKind::MlpLstm {
            for w in topo.vertex_offsets.windows(2) {
                if w[1] - w[0] != self.config.n_vertices {
                    return Err(dim_err!(
                        "vector baseline needs {} vertices per graph, got {}",
                        self.config.n_vertices,
                        w[1] - w[0]
                    ));
                }
            }
        }
        Ok(topo)
    }

    /// Vertex attributes of one step of the batch, as a tape constant.
    pub fn inputs(&self, tape: &Tape, topo: &Topology, graphs: &[&Graph]) -> Result<GraphVars> {
        if graphs.len() != topo.n_graphs {
            return Err(dim_err!("{} graphs for a batch of {}", graphs.len(), topo.n_graphs));
        }
        let d = self.config.vertex_dim;
        let mut data = Vec::with_capacity(topo.n_vertices * d);
        for (i, g) in graphs.iter().enumerate() {
            if g.vertex_dim() != d || g.n_vertices() != topo.vertex_offsets[i + 1] - topo.vertex_offsets[i] {
                return Err(dim_err!(
                    "graph {} has {} vertices of width {}, batch expects {} of width {}",
                    i,
                    g.n_vertices(),
                    g.vertex_dim(),
                    topo.vertex_offsets[i + 1] - topo.vertex_offsets[i],
                    d
                ));
            }
            if g.edge_dim() != 0 || g.global_dim() != 0 {
                return Err(dim_err!("model inputs carry vertex attributes only"));
            }
            data.extend_from_slice(g.vertex_data());
        }
        Ok(GraphVars {
            edges: None,
            vertices: Some(tape.constant(Tensor::new(vec![topo.n_vertices, d], data)?)?),
            globals: None,
        })
    }

    pub fn initial_state(&self, tape: &Tape, topo: &Topology) -> Result<RecurrentState> {
        match &self.arch {
            Arch::Gn { core: Some(core), .. } => Ok(RecurrentState::Graph(core.zero_state(tape, topo)?)),
            Arch::MlpLstm { lstm, .. } => {
                let z = || tape.constant(Tensor::zeros(&[topo.n_graphs, lstm.hidden]));
                Ok(RecurrentState::Lstm { h: z()?, c: z()? })
            }
            _ => Ok(RecurrentState::Stateless),
        }
    }

    /// One time step on a batch.
    pub fn step(
        &self,
        tape: &Tape,
        topo: &Topology,
        input: &GraphVars,
        state: &RecurrentState,
    ) -> Result<(StepOutput, RecurrentState)> {
        let (mut out, next) = self.raw_step(tape, topo, input, state)?;
        let (shift, scale) = (self.config.output_shift, self.config.output_scale);
        if shift != 0.0 || scale != 1.0 {
            out.agents = tape.affine(out.agents, scale, shift)?;
        }
        Ok((out, next))
    }

    fn raw_step(
        &self,
        tape: &Tape,
        topo: &Topology,
        input: &GraphVars,
        state: &RecurrentState,
    ) -> Result<(StepOutput, RecurrentState)> {
        let store = &self.params;
        let n_agents = self.config.n_agents;
        match &self.arch {
            Arch::Gn { encoder, core, decoder } => {
                let enc = encoder.forward(tape, store, topo, input)?;
                let (latent, next) = match (core, state) {
                    (Some(core), RecurrentState::Graph(h)) => {
                        let h = core.forward(tape, store, topo, &enc, h)?;
                        (h, RecurrentState::Graph(h))
                    }
                    (None, RecurrentState::Stateless) => (enc, RecurrentState::Stateless),
                    _ => return Err(state_err!("state does not fit a {} model", self.config.kind)),
                };
                let dec = decoder.forward(tape, store, topo, &latent)?;
                let v = dec.vertices.expect("decoder vertices");
                let agents = tape.gather_rows(v, topo.leading_rows(n_agents)?)?;
                let out = StepOutput {
                    agents,
                    graph: Some(dec),
                    core_edges: core.as_ref().and(latent.edges),
                };
                Ok((out, next))
            }
            Arch::Vain { embed, key, decode } => {
                let v = input.vertices.ok_or_else(|| dim_err!("VAIN needs vertex attributes"))?;
                let enc = embed.forward(tape, store, v)?;
                let k = key.forward(tape, store, v)?;
                let diff = tape.sub(
                    tape.gather_rows(k, topo.receivers.clone())?,
                    tape.gather_rows(k, topo.senders.clone())?,
                )?;
                let weight = tape.exp(tape.scale(tape.row_sum(tape.mul(diff, diff)?)?, -1.0)?)?;
                let messages = tape.mul_col(tape.gather_rows(enc, topo.senders.clone())?, weight)?;
                let pooled = tape.segment_sum(messages, &topo.incoming)?;
                let out = decode.forward(tape, store, tape.concat_cols(&[enc, pooled])?)?;
                let agents = tape.gather_rows(out, topo.leading_rows(n_agents)?)?;
                let graph = GraphVars {
                    edges: Some(weight),
                    vertices: Some(out),
                    globals: None,
                };
                Ok((
                    StepOutput {
                        agents,
                        graph: Some(graph),
                        core_edges: None,
                    },
                    RecurrentState::Stateless,
                ))
            }
            Arch::MlpLstm { encoder, lstm, decoder } => {
                let (h, c) = match state {
                    RecurrentState::Lstm { h, c } => (*h, *c),
                    _ => return Err(state_err!("state does not fit a mlplstm model")),
                };
                let v = input.vertices.ok_or_else(|| dim_err!("vector baseline needs vertex attributes"))?;
                let flat = tape.reshape(v, &[topo.n_graphs, self.config.n_vertices * self.config.vertex_dim])?;
                let x = tape.relu(encoder.forward(tape, store, flat)?)?;
                let (h, c) = lstm.forward(tape, store, x, h, c)?;
                let out = decoder.forward(tape, store, h)?;
                let agents = tape.reshape(out, &[topo.n_graphs * n_agents, self.config.out_dim()])?;
                Ok((
                    StepOutput {
                        agents,
                        graph: None,
                        core_edges: None,
                    },
                    RecurrentState::Lstm { h, c },
                ))
            }
        }
    }

    /// Teacher-forced unroll over a sequence of step inputs.
    pub fn unroll(&self, tape: &Tape, topo: &Topology, inputs: &[GraphVars]) -> Result<Vec<StepOutput>> {
        let mut state = self.initial_state(tape, topo)?;
        let mut outs = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (out, next) = self.step(tape, topo, input, &state)?;
            outs.push(out);
            state = next;
        }
        Ok(outs)
    }

    pub fn checkpoint(&self, step: u64, optimizer: Option<AdamState>, mut meta: serde_json::Value) -> Result<Checkpoint> {
        let cfg = serde_json::to_value(&self.config).map_err(|e| cfg_err!("model config: {}", e))?;
        match meta.as_object_mut() {
            Some(obj) => {
                obj.insert("model".into(), cfg);
            }
            None => meta = serde_json::json!({ "model": cfg }),
        }
        Ok(Checkpoint::new(&self.params, step, optimizer, meta))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck
            .meta
            .get("model")
            .ok_or_else(|| Error::Format("checkpoint has no model configuration".into()))?;
        let config: ModelConfig =
            serde_json::from_value(cfg.clone()).map_err(|e| Error::Format(format!("model configuration: {}", e)))?;
        let mut model = Model::new(config, ck.seed)?;
        let loaded = ck.to_store()?;
        let fresh: Vec<(&str, &[usize])> = model.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = loaded.iter().map(|(n, t)| (n, t.shape())).collect();
        if fresh != got {
            return Err(Error::Format(
                "checkpoint parameters do not match the model configuration".into(),
            ));
        }
        model.params = loaded;
        Ok(model)
    }
}

/// Derives an ablated model from a full RFM configuration.
pub fn make_ablation(kind: AblationKind, base: &ModelConfig, seed: u64) -> Result<Model> {
    let mut config = base.clone();
    match kind {
        AblationKind::Feedforward => config.kind = ModelKind::Feedforward,
        AblationKind::NoRelation => {
            config.kind = ModelKind::NoRelation;
            config.globals = false;
        }
    }
    Model::new(config, seed)
}

fn episode_topology(model: &Model, graphs: &[Graph]) -> Result<Arc<Topology>> {
    let first = graphs.first().ok_or_else(|| cfg_err!("empty episode"))?;
    for (t, g) in graphs.iter().enumerate() {
        if !g.same_connectivity(first) {
            return Err(state_err!("graph at step {} changes the episode connectivity", t));
        }
    }
    model.topology(&[first])
}

/// Unrolls a graph model over one episode and returns the output graph of
/// every step.
pub fn rfm_rollout(model: &Model, graphs: &[Graph]) -> Result<Vec<Graph>> {
    if model.kind() == ModelKind::MlpLstm {
        return Err(cfg_err!("the vector baseline does not produce graphs"));
    }
    let topo = episode_topology(model, graphs)?;
    let tape = Tape::new();
    let inputs = graphs
        .iter()
        .map(|g| model.inputs(&tape, &topo, &[g]))
        .collect::<Result<Vec<_>>>()?;
    let outs = model.unroll(&tape, &topo, &inputs)?;
    outs.iter()
        .map(|o| Ok(o.graph.expect("graph output").to_graphs(&tape, &topo)?.remove(0)))
        .collect()
}

/// One VAIN pass. Output edges hold the scalar attention weights.
pub fn vain_forward(model: &Model, g: &Graph) -> Result<Graph> {
    if model.kind() != ModelKind::Vain {
        return Err(cfg_err!("vain_forward needs a vain model, got {}", model.kind()));
    }
    Ok(rfm_rollout(model, std::slice::from_ref(g))?.remove(0))
}

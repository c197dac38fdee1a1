//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `RFM_LAB_ACCEPTANCE=full` runs the training criteria at full scale
//! (hours); the default is a scaled configuration. `RFM_LAB_ACCEPTANCE_ONLY`
//! takes a comma-separated list of criteria to run.
//!
//! Criteria 1-3, 8 and 9 are deterministic and fail the run. Criteria 4-7
//! are statistical claims about trained models; their outcome is reported
//! but does not change the exit code.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfm_lab::analysis::{
    capture_marginal, displacement_by_rank, extract_edge_norms, return_marginal, stag_state_analysis,
    teammate_edge_tests, Comparison, CAPTURE_SPAN, WINDOW,
};
use rfm_lab::cli::{self, RunManifest};
use rfm_lab::data::{collect, derive_seed, CollectConfig, Dataset, Episode, PolicySpec, SpecFactory};
use rfm_lab::envs::{
    rewards_from_events, Action, CoinRoles, EntityKind, EnvState, Event, EventKind, GameConfig, Pos, VERTEX_DIM,
};
use rfm_lab::graph::{gn_forward, Edge, GnBlock, GnBlockConfig, Graph, GraphVars, Model, ModelConfig, ModelKind, Task};
use rfm_lab::policies::{
    render_prediction_planes, render_probability_planes, A2cConfig, GridLearner, OnBoardConfig, ScriptedConfig,
};
use rfm_lab::tensor::{gradcheck, ParamStore, Tape, Tensor, Var};
use rfm_lab::training::{
    eval_perfect_rollout, eval_return_mse, predict_mean_mse, train_action_model, train_return_model, LossKind,
    TrainConfig,
};

const ALPHA: f64 = 0.05;
const RESAMPLES: usize = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone)]
struct Scale {
    name: &'static str,
    n_train: usize,
    n_eval: usize,
    steps: u64,
    batch: usize,
    latent: usize,
    leak_steps: u64,
}

impl Scale {
    fn from_env() -> Scale {
        match std::env::var("RFM_LAB_ACCEPTANCE").as_deref() {
            Ok("full") => Scale {
                name: "full",
                n_train: 5000,
                n_eval: 500,
                steps: 50_000,
                batch: 32,
                latent: 32,
                leak_steps: 50_000,
            },
            _ => Scale {
                name: "scaled",
                n_train: 1000,
                n_eval: 300,
                steps: 2000,
                batch: 8,
                latent: 16,
                leak_steps: 50_000,
            },
        }
    }

    fn model(&self, kind: ModelKind, task: Task, game: &GameConfig) -> ModelConfig {
        let mut c = ModelConfig::new(kind, task, VERTEX_DIM, game.n_agents, game.n_vertices());
        let l = self.latent;
        c.latent = l;
        c.mlp_hidden = 2 * l;
        c.lstm_hidden = 2 * l;
        c.decoder_hidden = vec![l, l];
        c
    }

    fn train(&self, loss: LossKind, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            ..TrainConfig::new(loss, self.steps, seed)
        }
    }
}

/// Stag Hunt data, the seed-0 models trained on it, and anything later
/// criteria reuse.
#[derive(Default)]
struct Shared {
    data: Option<Dataset>,
    rfm: Option<Model>,
}

fn stag_data(scale: &Scale, seed: u64) -> Dataset {
    let game = GameConfig::stag_hunt(2);
    let factory = SpecFactory::new(PolicySpec::Scripted(ScriptedConfig::default()), &game).unwrap();
    let cfg = CollectConfig {
        game,
        n_train: scale.n_train,
        n_eval: scale.n_eval,
        base_seed: seed * 1_000_000,
        workers: 1,
    };
    collect(&cfg, &factory).unwrap()
}

fn shared_data<'a>(shared: &'a mut Shared, scale: &Scale) -> &'a Dataset {
    shared.data.get_or_insert_with(|| stag_data(scale, 0))
}

fn shared_rfm(shared: &mut Shared, scale: &Scale) -> Model {
    if shared.rfm.is_none() {
        let ds = shared_data(shared, scale);
        let train: Vec<&Episode> = ds.train().collect();
        let game = GameConfig::stag_hunt(2);
        let model = Model::new(scale.model(ModelKind::Rfm, Task::Action, &game), derive_seed(0, 0)).unwrap();
        let (model, _) = train_action_model(model, &train, &scale.train(LossKind::ActionCe, 0)).unwrap();
        shared.rfm = Some(model);
    }
    shared.rfm.clone().unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn small_stack(seed: u64) -> Model {
    let mut c = ModelConfig::new(ModelKind::Rfm, Task::Action, 3, 2, 3);
    c.mlp_hidden = 6;
    c.latent = 4;
    c.lstm_hidden = 4;
    c.decoder_hidden = vec![4, 4];
    c.globals = true;
    c.zero_head = false;
    Model::new(c, seed).unwrap()
}

fn random_episode(rng: &mut ChaCha8Rng, steps: usize) -> Vec<Graph> {
    let edges: Vec<Edge> = (0..5).map(|_| Edge::new(rng.gen_range(0..3), rng.gen_range(0..3))).collect();
    (0..steps)
        .map(|_| {
            let vertices = (0..3).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            Graph::new(Vec::new(), vertices, edges.clone()).unwrap()
        })
        .collect()
}

fn stack_loss(model: &Model, tape: &Tape, graphs: &[Graph], vertices: Option<&[Var]>) -> rfm_lab::Result<Var> {
    let refs: Vec<&Graph> = graphs.iter().take(1).collect();
    let topo = model.topology(&refs)?;
    let inputs = match vertices {
        Some(vs) => vs
            .iter()
            .map(|v| GraphVars {
                edges: None,
                vertices: Some(*v),
                globals: None,
            })
            .collect(),
        None => graphs.iter().map(|g| model.inputs(tape, &topo, &[g])).collect::<rfm_lab::Result<Vec<_>>>()?,
    };
    let outs = model.unroll(tape, &topo, &inputs)?;
    let mut total: Option<Var> = None;
    for (t, o) in outs.iter().enumerate() {
        let l = tape.softmax_cross_entropy(o.agents, &[t % 5, (t + 3) % 5])?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(total.unwrap())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_prim = 0.0f64;
    let mut worst_name = "";
    let mut n_prims = 0;
    for seed in 0..20 {
        for (name, r) in gradcheck::primitive_suite(seed).unwrap() {
            n_prims += 1;
            if r.max_rel_error > worst_prim {
                worst_prim = r.max_rel_error;
                worst_name = name;
            }
        }
    }
    let mut worst_stack = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = small_stack(seed);
        let graphs = random_episode(&mut rng, 3);
        let r = gradcheck::check_params(&model.params, gradcheck::DEFAULT_STEP, 1, |tape, store| {
            let mut m = model.clone();
            m.params = store.clone();
            stack_loss(&m, tape, &graphs, None)
        })
        .unwrap();
        worst_stack = worst_stack.max(r.max_rel_error);
        let xs: Vec<Tensor> = graphs
            .iter()
            .map(|g| Tensor::new(vec![3, 3], g.vertex_data().to_vec()).unwrap())
            .collect();
        let r = gradcheck::check(&xs, gradcheck::DEFAULT_STEP, |tape, vars| stack_loss(&model, tape, &graphs, Some(vars)))
            .unwrap();
        worst_stack = worst_stack.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_prim < 1e-4 && worst_stack < 1e-3 && secs < 60.0,
        format!(
            "{} primitive checks, worst rel err {:.2e} ({}); 3-step stack worst {:.2e}; {:.1}s",
            n_prims, worst_prim, worst_name, worst_stack, secs
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn mlp_oracle(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in 0..2 {
        let w = store.get(&format!("{}/l{}/w", name, l)).unwrap();
        let b = store.get(&format!("{}/l{}/b", name, l)).unwrap();
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        assert_eq!(n_in, h.len());
        let mut y = b.data().to_vec();
        for (i, hi) in h.iter().enumerate() {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += hi * w.data()[i * n_out + j];
            }
        }
        if l == 0 {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    h
}

/// Edge, vertex and global updates evaluated one element at a time.
fn gn_loop(store: &ParamStore, g: &Graph, de_out: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let e_new: Vec<Vec<f64>> = (0..g.n_edges())
        .map(|k| {
            let mut x = g.edge_attr(k).to_vec();
            x.extend_from_slice(g.vertex(g.receivers()[k]));
            x.extend_from_slice(g.vertex(g.senders()[k]));
            x.extend_from_slice(g.globals());
            mlp_oracle(store, "gn/phi_e", &x)
        })
        .collect();
    let v_new: Vec<Vec<f64>> = (0..g.n_vertices())
        .map(|i| {
            let mut x = vec![0.0; de_out];
            for k in (0..g.n_edges()).filter(|&k| g.receivers()[k] == i) {
                for (a, b) in x.iter_mut().zip(&e_new[k]) {
                    *a += b;
                }
            }
            x.extend_from_slice(g.vertex(i));
            x.extend_from_slice(g.globals());
            mlp_oracle(store, "gn/phi_v", &x)
        })
        .collect();
    let mut x = vec![0.0; de_out];
    for e in &e_new {
        for (a, b) in x.iter_mut().zip(e) {
            *a += b;
        }
    }
    let mut vs = vec![0.0; v_new[0].len()];
    for v in &v_new {
        for (a, b) in vs.iter_mut().zip(v) {
            *a += b;
        }
    }
    x.extend(vs);
    x.extend_from_slice(g.globals());
    let u_new = mlp_oracle(store, "gn/phi_u", &x);
    (e_new, v_new, u_new)
}

fn random_graph(rng: &mut ChaCha8Rng) -> Graph {
    let n_v = rng.gen_range(1..8);
    let n_e = rng.gen_range(0..16);
    let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let globals = r(2);
    let vertices = (0..n_v).map(|_| r(3)).collect();
    let attrs: Vec<Vec<f64>> = (0..n_e).map(|_| r(2)).collect();
    let edges = attrs
        .into_iter()
        .map(|attr| Edge {
            attr,
            sender: rng.gen_range(0..n_v),
            receiver: rng.gen_range(0..n_v),
        })
        .collect();
    Graph::new(globals, vertices, edges).unwrap()
}

fn gn_block(seed: u64) -> (ParamStore, GnBlock) {
    let mut store = ParamStore::new(seed);
    let cfg = GnBlockConfig {
        edge_in: 2,
        vertex_in: 3,
        global_in: 2,
        edge_out: 5,
        vertex_out: 4,
        global_out: 3,
        hidden: 8,
    };
    let block = GnBlock::new(&mut store, "gn", cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names.iter().filter(|n| n.ends_with("/b")) {
        let shape = store.get(n).unwrap().shape().to_vec();
        store.set(n, random_tensor(&mut rng, &shape)).unwrap();
    }
    (store, block)
}

fn criterion_2() -> Outcome {
    let mut max_err = 0.0f64;
    let mut bitwise = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng);
        let (store, block) = gn_block(seed);
        let out = gn_forward(&block, &store, &g).unwrap();
        let (e, v, u) = gn_loop(&store, &g, 5);
        let want: Vec<f64> = e.concat().into_iter().chain(v.concat()).chain(u).collect();
        let got: Vec<f64> = out
            .edge_data()
            .iter()
            .chain(out.vertex_data())
            .chain(out.globals())
            .copied()
            .collect();
        assert_eq!(want.len(), got.len());
        if want.iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits()) {
            bitwise += 1;
        }
        for (a, b) in want.iter().zip(&got) {
            max_err = max_err.max((a - b).abs());
        }
    }
    let mut equivariant = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let g = random_graph(&mut rng);
        let mut perm: Vec<usize> = (0..g.n_vertices()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let (store, block) = gn_block(seed);
        let out = gn_forward(&block, &store, &g).unwrap();
        let out_perm = gn_forward(&block, &store, &g.relabel(&perm).unwrap()).unwrap();
        if out.relabel(&perm).unwrap() == out_perm {
            equivariant += 1;
        }
    }
    outcome(
        max_err <= 1e-12 && equivariant == 100,
        format!(
            "loop oracle: {}/100 bitwise, max abs err {:.1e}; equivariance exact on {}/100 relabelings",
            bitwise, max_err, equivariant
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn p(x: i32, y: i32) -> Pos {
    Pos::new(x, y)
}

fn stag_layout(n: usize, agents: Vec<Pos>, apples: Vec<Pos>, stags: Vec<Pos>, p_respawn: f64) -> EnvState {
    let mut cfg = GameConfig::stag_hunt(n);
    cfg.p_respawn = p_respawn;
    let ents = apples
        .into_iter()
        .map(|a| (EntityKind::Apple, a))
        .chain(stags.into_iter().map(|s| (EntityKind::Stag, s)))
        .collect();
    EnvState::from_layout(&cfg, agents, ents, None, 0).unwrap()
}

fn coin_layout(agents: Vec<Pos>) -> EnvState {
    let roles = CoinRoles {
        bad: 2,
        revealed: vec![0, 1],
    };
    // Color c sits on row 2c + 1.
    let ents: Vec<_> = (0..3)
        .flat_map(|c| (0..4).map(move |i| (EntityKind::Coin(c), p(i * 2, c as i32 * 2 + 1))))
        .collect();
    EnvState::from_layout(&GameConfig::coin_game(), agents, ents, Some(roles), 0).unwrap()
}

fn rule_checks() -> Vec<(&'static str, bool)> {
    use Action::*;
    let mut checks = Vec::new();

    let coop = |agents: Vec<Pos>, tiles: Vec<Pos>| {
        let ents = tiles.into_iter().map(|t| (EntityKind::Tile, t)).collect();
        EnvState::from_layout(&GameConfig::coop_nav(), agents, ents, None, 0).unwrap()
    };
    let mut s = coop(vec![p(1, 2), p(4, 3)], vec![p(2, 2), p(3, 3)]);
    let both = s.step(&[Right, Left]).unwrap().rewards == [1.0, 1.0] && s.step(&[Stay, Stay]).unwrap().rewards == [1.0, 1.0];
    let mut s = coop(vec![p(1, 2), p(0, 0)], vec![p(2, 2), p(3, 3)]);
    let one = s.step(&[Right, Stay]).unwrap().rewards == [0.0, 0.0];
    let mut s = coop(vec![p(1, 2), p(3, 2)], vec![p(2, 2), p(3, 3)]);
    let shared = s.step(&[Right, Left]).unwrap().rewards == [0.0, 0.0];
    checks.push(("coopnav +1 to both only when both tiles are covered", both && one && shared));

    let mut s = coin_layout(vec![p(0, 0), p(0, 4)]);
    let mut paid_early = s.step(&[Down, Down]).unwrap().rewards != [0.0, 0.0];
    for _ in 0..8 {
        paid_early |= s.step(&[Stay, Stay]).unwrap().rewards != [0.0, 0.0];
    }
    let last = s.step(&[Stay, Stay]).unwrap();
    let mixed = !paid_early && last.done && last.rewards == [0.0, 0.0];
    let mut s = coin_layout(vec![p(0, 0), p(2, 0)]);
    s.step(&[Down, Down]).unwrap();
    for _ in 0..8 {
        s.step(&[Stay, Stay]).unwrap();
    }
    let good = s.step(&[Stay, Stay]).unwrap().rewards == [2.0, 2.0];
    checks.push(("coin game pays good minus bad to everyone at the end", mixed && good));

    let mut s = stag_layout(2, vec![p(0, 0), p(9, 9)], vec![p(1, 0)], vec![], 0.0);
    let apple = s.step(&[Right, Stay]).unwrap().rewards == [5.0, 0.0] && !s.entities()[0].available;
    checks.push(("apple pays +5 and becomes unavailable", apple));

    let mut s = stag_layout(2, vec![p(3, 4), p(6, 5)], vec![], vec![p(4, 4)], 0.0);
    let r = s.step(&[Right, Left]).unwrap();
    let pair = r.rewards == [10.0, 10.0] && !s.entities()[0].available;
    checks.push(("stag captured by two agents pays +10 each", pair));

    let mut s = stag_layout(2, vec![p(3, 4), p(9, 9)], vec![], vec![p(4, 4)], 0.0);
    let mut alone = true;
    for _ in 0..5 {
        alone &= s.step(&[Stay, Stay]).unwrap().rewards == [0.0, 0.0];
    }
    let mut s4 = stag_layout(4, vec![p(4, 4), p(5, 5), p(5, 4), p(0, 0)], vec![], vec![p(4, 4)], 0.0);
    let four = s4.step(&[Stay; 4]).unwrap().rewards == [10.0, 10.0, 10.0, 0.0];
    checks.push(("one agent alone cannot capture a stag", alone && s.entities()[0].available && four));

    let mut s = stag_layout(2, vec![p(0, 0), p(9, 9)], vec![p(1, 0), p(5, 5)], vec![], 1.0);
    let r = s.step(&[Right, Stay]).unwrap();
    let none_same_step = r.events.iter().all(|e| e.kind != EventKind::AppleRespawn) && !s.entities()[0].available;
    let r = s.step(&[Left, Stay]).unwrap();
    let respawns: Vec<&Event> = r.events.iter().filter(|e| e.kind == EventKind::AppleRespawn).collect();
    let only_eaten = respawns.len() == 1 && respawns[0].entity == Some(0) && s.entities()[1].available;
    checks.push(("respawn only for entities unavailable before the step", none_same_step && only_eaten));

    let mut lengths = true;
    for (cfg, len) in [(GameConfig::coop_nav(), 20), (GameConfig::coin_game(), 10), (GameConfig::stag_hunt(2), 32), (GameConfig::stag_hunt(4), 32)] {
        let mut s = EnvState::reset(&cfg, 1).unwrap();
        let acts = vec![Stay; cfg.n_agents];
        let mut n = 0;
        while !s.step(&acts).unwrap().done {
            n += 1;
        }
        lengths &= n + 1 == len && s.step(&acts).is_err();
    }
    checks.push(("episode lengths 20/10/32", lengths));
    checks
}

/// Rewards implied by an event log, read straight off the game rules.
fn rewards_oracle(cfg: &GameConfig, events: &[Event], n_steps: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; cfg.n_agents]; n_steps];
    let mut coin_total = 0.0;
    for e in events {
        let row = &mut out[e.step];
        match e.kind {
            EventKind::TilesCovered => row.iter_mut().for_each(|r| *r += 1.0),
            EventKind::AppleCollected => row[e.agents[0]] += 5.0,
            EventKind::StagCaptured => e.agents.iter().for_each(|&a| row[a] += 10.0),
            EventKind::CoinCollected => coin_total += if e.good == Some(true) { 1.0 } else { -1.0 },
            EventKind::AppleRespawn | EventKind::StagRespawn => {}
        }
    }
    if n_steps > 0 {
        out[n_steps - 1].iter_mut().for_each(|r| *r += coin_total);
    }
    out
}

fn criterion_3() -> Outcome {
    let checks = rule_checks();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let games = [GameConfig::coop_nav(), GameConfig::coin_game(), GameConfig::stag_hunt(2), GameConfig::stag_hunt(4)];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut exact = 0;
    for i in 0..1000u64 {
        let cfg = &games[i as usize % games.len()];
        let mut s = EnvState::reset(cfg, i).unwrap();
        let (mut events, mut rewards) = (Vec::new(), Vec::new());
        while !s.is_done() {
            let acts: Vec<Action> = (0..cfg.n_agents).map(|_| Action::ALL[rng.gen_range(0..5)]).collect();
            let r = s.step(&acts).unwrap();
            events.extend(r.events);
            rewards.push(r.rewards);
        }
        if rewards_oracle(cfg, &events, rewards.len()) == rewards && rewards_from_events(cfg, &events, rewards.len()) == rewards {
            exact += 1;
        }
    }
    let mut detail = format!("{}/{} rule clauses; event-log rewards exact on {}/1000 episodes", checks.len() - failed.len(), checks.len(), exact);
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join("; ")));
    }
    outcome(failed.is_empty() && exact == 1000, detail)
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4(scale: &Scale, shared: &mut Shared) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let ds = if seed == 0 { shared_data(shared, scale).clone() } else { stag_data(scale, seed) };
        let train: Vec<&Episode> = ds.train().collect();
        let eval: Vec<&Episode> = ds.eval().collect();
        let mut stats = Vec::new();
        for (k, kind) in [ModelKind::Rfm, ModelKind::NoRelation, ModelKind::MlpLstm].into_iter().enumerate() {
            let trained = if seed == 0 && kind == ModelKind::Rfm {
                shared_rfm(shared, scale)
            } else {
                let model = Model::new(scale.model(kind, Task::Action, &GameConfig::stag_hunt(2)), derive_seed(seed, k as u64)).unwrap();
                train_action_model(model, &train, &scale.train(LossKind::ActionCe, seed)).unwrap().0
            };
            stats.push(eval_perfect_rollout(&trained, &eval, 1).unwrap());
        }
        let beats = |o: usize| {
            let se = (stats[0].stderr.powi(2) + stats[o].stderr.powi(2)).sqrt();
            stats[0].mean - stats[o].mean > se
        };
        let won = beats(1) && beats(2);
        wins += won as usize;
        lines.push(format!(
            "seed {}: rfm {:.3}±{:.3} norel {:.3}±{:.3} mlp+lstm {:.3}±{:.3} [{}]",
            seed,
            stats[0].mean,
            stats[0].stderr,
            stats[1].mean,
            stats[1].stderr,
            stats[2].mean,
            stats[2].stderr,
            if won { "win" } else { "no" }
        ));
    }
    for l in &lines {
        println!("    {}", l);
    }
    outcome(
        wins >= 2,
        format!("RFM ahead of both baselines by >1 SE in {}/3 seeds ({} eval episodes, {} steps)", wins, scale.n_eval, scale.steps),
    )
}

// ---------------------------------------------------------------- criteria 5-7

struct EdgeTests {
    rank1: f64,
    rank5: f64,
    state: Option<Comparison>,
    capture: Option<Comparison>,
    apple_r: Option<(f64, f64)>,
}

fn edge_tests(model: &Model, eval: &[&Episode], seed: u64) -> EdgeTests {
    let series = extract_edge_norms(model, eval, 1).unwrap();
    let ranks = displacement_by_rank(&series, eval, 1);
    let at = |r: usize| ranks.iter().find(|x| x.rank == r).map_or(f64::NAN, |x| x.mean_displacement.abs());
    let state = stag_state_analysis(&series, eval, WINDOW, RESAMPLES, derive_seed(seed, 0));
    let team = teammate_edge_tests(&series, eval, WINDOW, RESAMPLES, derive_seed(seed, 1));
    EdgeTests {
        rank1: at(1),
        rank5: at(5),
        state: state.test,
        capture: team.capture_before_after,
        apple_r: team.apple_count.map(|c| (c.r, c.p)),
    }
}

fn describe(c: &Option<Comparison>) -> String {
    match c {
        Some(c) => format!("{:.4} vs {:.4} p={:.4} n={}", c.mean_a, c.mean_b, c.p, c.n),
        None => "too few events".into(),
    }
}

fn greater(c: &Option<Comparison>) -> bool {
    c.as_ref().is_some_and(|c| c.greater(ALPHA))
}

fn criterion_5(scale: &Scale, shared: &mut Shared) -> Outcome {
    let model = shared_rfm(shared, scale);
    let ds = shared_data(shared, scale);
    let eval: Vec<&Episode> = ds.eval().collect();
    let t = edge_tests(&model, &eval, 5);
    let a = t.rank1 > t.rank5;
    let b = greater(&t.state);
    let c = greater(&t.capture);
    let d = t.apple_r.is_some_and(|(r, p)| r < 0.0 && p < ALPHA);
    println!("    (a) |displacement| rank 1 {:.4} vs rank 5 {:.4} [{}]", t.rank1, t.rank5, a);
    println!("    (b) stag available vs unavailable: {} [{}]", describe(&t.state), b);
    println!("    (c) teammate norm before vs after capture: {} [{}]", describe(&t.capture), c);
    match t.apple_r {
        Some((r, p)) => println!("    (d) apple count vs teammate norm: r={:.3} p={:.4} [{}]", r, p, d),
        None => println!("    (d) apple count vs teammate norm: undefined [false]"),
    }
    let n = [a, b, c, d].iter().filter(|x| **x).count();
    outcome(n == 4, format!("{}/4 edge-analysis claims hold on the trained Stag Hunt RFM", n))
}

fn return_tests(model: &Model, eval: &[&Episode], seed: u64) -> Option<Comparison> {
    let series = return_marginal(model, eval, true, 1).unwrap();
    capture_marginal(&series, eval, WINDOW, CAPTURE_SPAN, RESAMPLES, derive_seed(seed, 0)).before_after
}

fn criterion_6(scale: &Scale, shared: &mut Shared) -> Outcome {
    let ds = shared_data(shared, scale).clone();
    let train: Vec<&Episode> = ds.train().collect();
    let eval: Vec<&Episode> = ds.eval().collect();
    let model = Model::new(scale.model(ModelKind::Rfm, Task::Return, &GameConfig::stag_hunt(2)), derive_seed(0, 10)).unwrap();
    let cfg = scale.train(LossKind::ReturnMse, 0);
    assert!(cfg.prune_mixing);
    let (model, _) = train_return_model(model, &train, &cfg, true).unwrap();
    let test = return_tests(&model, &eval, 6);
    let mse = eval_return_mse(&model, &eval, false, 1).unwrap();
    let baseline = predict_mean_mse(&train, &eval);
    let marginal = greater(&test);
    println!("    r_full - r_pruned before vs after capture: {} [{}]", describe(&test), marginal);
    println!("    held-out mse {:.3} vs predict-mean {:.3} [{}]", mse, baseline, mse < baseline);
    outcome(
        marginal && mse < baseline,
        format!("marginal before > after: {}; beats mean baseline: {}", marginal, mse < baseline),
    )
}

fn criterion_7(scale: &Scale, shared: &mut Shared) -> Outcome {
    let ds = shared_data(shared, scale).clone();
    let eval: Vec<&Episode> = ds.eval().collect();
    let mut quiet = 0;
    for seed in 0..5u64 {
        let mut ac = scale.model(ModelKind::Rfm, Task::Action, &GameConfig::stag_hunt(2));
        ac.zero_head = false;
        let mut rc = scale.model(ModelKind::Rfm, Task::Return, &GameConfig::stag_hunt(2));
        rc.zero_head = false;
        let action = Model::new(ac, derive_seed(100 + seed, 0)).unwrap();
        let ret = Model::new(rc, derive_seed(100 + seed, 1)).unwrap();
        let t = edge_tests(&action, &eval, 100 + seed);
        let m = return_tests(&ret, &eval, 100 + seed);
        let hits = [
            greater(&t.state),
            greater(&t.capture),
            t.apple_r.is_some_and(|(r, p)| r < 0.0 && p < ALPHA),
            greater(&m),
        ];
        let none = hits.iter().all(|h| !h);
        quiet += none as usize;
        println!(
            "    seed {}: stag state {}, capture {}, apple r {}, return marginal {} [{}]",
            seed,
            describe(&t.state),
            describe(&t.capture),
            t.apple_r.map_or("undefined".into(), |(r, p)| format!("{:.3} p={:.4}", r, p)),
            describe(&m),
            if none { "null kept" } else { "null rejected" }
        );
    }
    outcome(quiet >= 4, format!("untrained models keep the null in {}/5 seeds", quiet))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(scale: &Scale) -> Outcome {
    let planes = render_probability_planes(&[vec![0.3, 0.7, 0.0, 0.0, 0.0]], &[p(2, 2)], p(2, 2), 5, 5).unwrap();
    let mut footnote = (planes.height, planes.width) == (9, 9);
    for r in 0..9 {
        for c in 0..9 {
            let want = match (r, c) {
                (3, 4) => 0.3,
                (5, 4) => 0.7,
                _ => 0.0,
            };
            footnote &= planes.at(0, r, c) == want;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (w, h) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let n = rng.gen_range(1..4);
        let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.gen_range(-8.0..8.0)).collect()).collect();
        let pos: Vec<Pos> = (0..n).map(|_| p(rng.gen_range(0..w), rng.gen_range(0..h))).collect();
        let host = p(rng.gen_range(0..w), rng.gen_range(0..h));
        let planes = render_prediction_planes(&logits, &pos, host, w, h).unwrap();
        for k in 0..n {
            worst = worst.max((planes.plane(k).iter().sum::<f64>() - 1.0).abs());
        }
    }

    let (steps, leaks, own_changes) = leakage_run(scale.leak_steps);
    outcome(
        footnote && worst <= 1e-9 && leaks == 0 && own_changes > 0,
        format!(
            "footnote planes exact: {}; worst plane-sum error {:.1e}; {} augmented steps, {} parameter updates, {} cross-agent changes",
            footnote, worst, steps, own_changes, leaks
        ),
    )
}

/// Two RFM-augmented learners play Stag Hunt together. Around every
/// observe call, every other learner's parameter digest must stay fixed.
fn leakage_run(steps: u64) -> (u64, usize, usize) {
    let game = GameConfig::stag_hunt(2);
    let a2c = A2cConfig {
        conv_channels: 2,
        mlp_hidden: 16,
        lstm_hidden: 8,
        ..A2cConfig::default()
    };
    let onboard = OnBoardConfig {
        latent: 8,
        mlp_hidden: 8,
        ..OnBoardConfig::default()
    };
    let mut learners: Vec<GridLearner> = (0..2)
        .map(|a| GridLearner::augmented(a2c.clone(), onboard.clone(), &game, a, 40 + a as u64).unwrap())
        .collect();
    let (mut done_steps, mut leaks, mut own) = (0u64, 0usize, 0usize);
    let mut episode = 0;
    while done_steps < steps {
        let mut env = EnvState::reset(&game, episode).unwrap();
        episode += 1;
        while !env.is_done() {
            let actions: Vec<Action> = learners.iter_mut().map(|l| l.act(&env).unwrap()).collect();
            let r = env.step(&actions).unwrap();
            for i in 0..learners.len() {
                let before: Vec<String> = learners.iter().map(|l| l.digest()).collect();
                learners[i].observe(&actions, &r.rewards, r.done).unwrap();
                for (j, l) in learners.iter().enumerate() {
                    let changed = l.digest() != before[j];
                    if j == i {
                        own += changed as usize;
                    } else {
                        leaks += changed as usize;
                    }
                }
            }
            done_steps += 1;
        }
    }
    (done_steps, leaks, own)
}

// ---------------------------------------------------------------- criterion 9

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["rfm-lab"];
    argv.extend_from_slice(args);
    cli::run(argv)
}

fn criterion_9() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-rerun");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let f = |name: &str| dir.join(name).display().to_string();
    let (data, action, ret, eval, runlog) = (f("data.jsonl"), f("rfm.json"), f("ret.json"), f("eval.json"), f("run.csv"));
    let small = ["--batch-size", "4", "--latent", "8", "--mlp-hidden", "16", "--lstm-hidden", "8", "--steps", "15"];
    let mut train_action = vec!["train", "--data", &data, "--model", "rfm", "--out", &action];
    train_action.extend(small);
    let mut train_return = vec!["train", "--data", &data, "--model", "rfm", "--task", "return", "--out", &ret];
    train_return.extend(small);
    let (edges, returns, coins) = (f("edges"), f("returns"), f("coins"));
    let steps: Vec<Vec<&str>> = vec![
        vec!["collect", "--game", "staghunt", "--episodes", "12", "--eval-episodes", "6", "--seed", "9", "--out", &data],
        train_action,
        train_return,
        vec!["eval", "--checkpoint", &action, "--data", &data, "--out", &eval],
        vec!["analyze", "edges", "--checkpoint", &action, "--data", &data, "--out-dir", &edges, "--resamples", "200"],
        vec!["analyze", "return", "--checkpoint", &ret, "--data", &data, "--out-dir", &returns, "--resamples", "200"],
        vec![
            "agent-train", "--game", "coin", "--steps", "30", "--out", &runlog, "--mlp-hidden", "16", "--lstm-hidden", "8",
            "--rfm-latent", "8", "--rfm-hidden", "8",
        ],
        vec!["analyze", "coins", "--log", &runlog, "--out-dir", &coins, "--smooth", "2"],
    ];
    for s in &steps {
        if run(s) != 0 {
            return outcome(false, format!("pipeline step {:?} failed", s));
        }
    }
    let mut manifests: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.to_string_lossy().ends_with(".manifest.json") {
                manifests.push(path);
            }
        }
    }
    manifests.sort();
    let mut identical = 0;
    let mut n_outputs = 0;
    let mut problems = Vec::new();
    for m in &manifests {
        let manifest = RunManifest::load(m).unwrap();
        let before: Vec<Vec<u8>> = manifest.outputs.iter().map(|o| std::fs::read(&o.path).unwrap()).collect();
        let code = run(&["rerun", "--manifest", m.to_str().unwrap()]);
        let same = manifest
            .outputs
            .iter()
            .zip(&before)
            .all(|(o, b)| std::fs::read(Path::new(&o.path)).map(|x| &x == b).unwrap_or(false));
        n_outputs += manifest.outputs.len();
        if code == 0 && same {
            identical += 1;
        } else {
            problems.push(manifest.command.clone());
        }
    }
    let ok = manifests.len() == steps.len() && identical == manifests.len();
    let mut detail = format!(
        "{}/{} manifests rerun byte-identical ({} artifacts)",
        identical,
        manifests.len(),
        n_outputs
    );
    if !problems.is_empty() {
        detail.push_str(&format!("; differing: {}", problems.join(", ")));
    }
    outcome(ok, detail)
}

// ---------------------------------------------------------------- driver

fn main() {
    let scale = Scale::from_env();
    let only: Option<Vec<usize>> = std::env::var("RFM_LAB_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    println!("acceptance, {} configuration", scale.name);
    let mut shared = Shared::default();
    let mut hard_failures = 0;
    for n in 1..=9 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let o = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(&scale, &mut shared),
            5 => criterion_5(&scale, &mut shared),
            6 => criterion_6(&scale, &mut shared),
            7 => criterion_7(&scale, &mut shared),
            8 => criterion_8(&scale),
            _ => criterion_9(),
        };
        let statistical = (4..=7).contains(&n);
        if !o.pass && !statistical {
            hard_failures += 1;
        }
        println!(
            "criterion {}: {} ({}) [{:.0}s]",
            n,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}

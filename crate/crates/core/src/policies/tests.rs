use proptest::prelude::*;

use super::*;
use crate::envs::{Action, EntityKind, EnvState, EventKind, GameConfig, Pos};
use crate::error::Error;
use crate::tensor::gradcheck::check_params;
use crate::tensor::{Tape, Tensor};

fn p(x: i32, y: i32) -> Pos {
    Pos::new(x, y)
}

fn greedy() -> ScriptedConfig {
    ScriptedConfig {
        epsilon: 0.0,
        ..ScriptedConfig::default()
    }
}

#[test]
fn coop_assignment_takes_near_tile() {
    let ents = vec![(EntityKind::Tile, p(0, 1)), (EntityKind::Tile, p(5, 5))];
    let s = EnvState::from_layout(&GameConfig::coop_nav(), vec![p(0, 0), p(5, 4)], ents, None, 0).unwrap();
    // Brute force over both assignments: cost 1+1 beats 10+9.
    let mut pol = ScriptedPolicy::new(greedy(), 0);
    assert_eq!(pol.act(&s, 0).unwrap(), Action::Down);
    assert_eq!(pol.act(&s, 1).unwrap(), Action::Down);
}

#[test]
fn greedy_policy_is_deterministic() {
    let s = EnvState::reset(&GameConfig::stag_hunt(2), 3).unwrap();
    let a: Vec<_> = (0..5).map(|seed| ScriptedPolicy::new(greedy(), seed).act(&s, 0).unwrap()).collect();
    assert!(a.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn full_exploration_is_uniform() {
    let s = EnvState::reset(&GameConfig::coop_nav(), 0).unwrap();
    let mut pol = ScriptedPolicy::new(
        ScriptedConfig {
            epsilon: 1.0,
            ..ScriptedConfig::default()
        },
        11,
    );
    let n = 10_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[pol.act(&s, 0).unwrap().index()] += 1;
    }
    let e = n as f64 / 5.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 4 degrees of freedom, 0.1% critical value
    assert!(chi2 < 18.47, "chi2 {} counts {:?}", chi2, counts);
}

#[test]
fn step_toward_prefers_larger_gap() {
    assert_eq!(step_toward(p(0, 0), p(3, 1)), Action::Right);
    assert_eq!(step_toward(p(0, 0), p(1, 3)), Action::Down);
    assert_eq!(step_toward(p(2, 2), p(1, 1)), Action::Left);
    assert_eq!(step_toward(p(2, 2), p(2, 0)), Action::Up);
    assert_eq!(step_toward(p(2, 2), p(2, 2)), Action::Stay);
}

fn play_scripted(cfg: &GameConfig, seed: u64, epsilon: f64) -> (Vec<f64>, Vec<crate::envs::Event>) {
    let mut env = EnvState::reset(cfg, seed).unwrap();
    let sc = ScriptedConfig {
        epsilon,
        ..ScriptedConfig::default()
    };
    let mut pols: Vec<_> = (0..cfg.n_agents)
        .map(|a| ScriptedPolicy::new(sc.clone(), seed * 31 + a as u64))
        .collect();
    let mut ret = vec![0.0; cfg.n_agents];
    let mut events = Vec::new();
    while !env.is_done() {
        let acts: Vec<_> = pols.iter_mut().enumerate().map(|(a, p)| p.act(&env, a).unwrap()).collect();
        let r = env.step(&acts).unwrap();
        for (x, y) in ret.iter_mut().zip(&r.rewards) {
            *x += y;
        }
        events.extend(r.events);
    }
    (ret, events)
}

#[test]
fn scripted_coop_nav_clears_floor() {
    let n = 100;
    let total: f64 = (0..n).map(|s| play_scripted(&GameConfig::coop_nav(), s, 0.05).0[0]).sum();
    let mean = total / n as f64;
    assert!(mean >= 10.0, "mean episode reward {}", mean);
}

#[test]
fn scripted_stag_hunt_hunts_and_forages() {
    let mut stags = 0;
    let mut apples = 0;
    for s in 0..20 {
        let (_, ev) = play_scripted(&GameConfig::stag_hunt(2), s, 0.05);
        stags += ev.iter().filter(|e| e.kind == EventKind::StagCaptured).count();
        apples += ev.iter().filter(|e| e.kind == EventKind::AppleCollected).count();
    }
    assert!(stags >= 10, "{} captures", stags);
    assert!(apples >= 40, "{} apples", apples);
}

#[test]
fn scripted_coin_players_profit() {
    let mut net = 0.0;
    for s in 0..50 {
        net += play_scripted(&GameConfig::coin_game(), s, 0.0).0[0];
    }
    assert!(net / 50.0 > 1.0, "mean coin payout {}", net / 50.0);
}

#[test]
fn footnote_example_planes() {
    // Fellow in the middle of a 5x5 arena, seen from its own cell.
    let probs = vec![vec![0.3, 0.7, 0.0, 0.0, 0.0]];
    let planes = render_probability_planes(&probs, &[p(2, 2)], p(2, 2), 5, 5).unwrap();
    assert_eq!((planes.height, planes.width), (9, 9));
    for r in 0..9 {
        for c in 0..9 {
            let want = match (r, c) {
                (3, 4) => 0.3,
                (5, 4) => 0.7,
                _ => 0.0,
            };
            assert_eq!(planes.at(0, r, c), want, "pixel ({}, {})", r, c);
        }
    }
    let logits = vec![vec![0.3f64.ln(), 0.7f64.ln(), f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY]];
    let planes = render_prediction_planes(&logits, &[p(2, 2)], p(2, 2), 5, 5).unwrap();
    assert!((planes.at(0, 3, 4) - 0.3).abs() < 1e-12);
    assert!((planes.at(0, 5, 4) - 0.7).abs() < 1e-12);
}

#[test]
fn uniform_logits_fill_five_cells() {
    let planes = render_prediction_planes(&[vec![0.0; 5]], &[p(3, 3)], p(1, 1), 6, 6).unwrap();
    let nonzero: Vec<f64> = planes.plane(0).iter().copied().filter(|v| *v != 0.0).collect();
    assert_eq!(nonzero.len(), 5);
    assert!(nonzero.iter().all(|v| (v - 0.2).abs() < 1e-15));
    // (3,3) seen from (1,1) sits at row 5+2, col 5+2
    assert!((planes.at(0, 7, 7) - 0.2).abs() < 1e-15);
}

#[test]
fn blocked_moves_stay_put() {
    let planes = render_prediction_planes(&[vec![0.0; 5]], &[p(0, 0)], p(0, 0), 4, 4).unwrap();
    // up, left and stay all end on the corner cell
    assert!((planes.at(0, 3, 3) - 0.6).abs() < 1e-12);
}

#[test]
fn planes_reject_bad_positions() {
    let e = render_prediction_planes(&[vec![0.0; 5]], &[p(6, 0)], p(0, 0), 6, 6).unwrap_err();
    assert!(matches!(e, Error::Index(_)));
    let e = render_prediction_planes(&[vec![0.0; 4]], &[p(1, 0)], p(0, 0), 6, 6).unwrap_err();
    assert!(matches!(e, Error::Dimension(_)));
}

proptest! {
    #[test]
    fn planes_are_distributions(
        logits in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 5), 1..4),
        seed in 0u64..1000,
    ) {
        let n = logits.len();
        let pos: Vec<Pos> = (0..n).map(|i| p(((seed + 3 * i as u64) % 7) as i32, ((seed / 7 + i as u64) % 5) as i32)).collect();
        let host = p((seed % 7) as i32, (seed % 5) as i32);
        let planes = render_prediction_planes(&logits, &pos, host, 7, 5).unwrap();
        for k in 0..n {
            let plane = planes.plane(k);
            prop_assert!(plane.iter().all(|v| *v >= 0.0));
            prop_assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

fn tiny_config() -> A2cConfig {
    A2cConfig {
        conv_channels: 2,
        mlp_hidden: 4,
        lstm_hidden: 3,
        ..A2cConfig::default()
    }
}

fn tiny_spec() -> InputSpec {
    InputSpec {
        channels: 2,
        height: 3,
        width: 3,
        extra: 1,
    }
}

fn tiny_input(seed: u64) -> AgentInput {
    let v = |i: u64| (((seed * 7919 + i * 104_729) % 1000) as f64 / 500.0) - 1.0;
    AgentInput {
        planes: (0..18).map(v).collect(),
        extra: vec![1.0],
        last_reward: v(99),
        last_action: Some(Action::from_index((seed % 5) as usize).unwrap()),
    }
}

fn tiny_rollout(n: usize) -> Rollout {
    Rollout {
        memory: LstmMemory::zeros(3),
        steps: (0..n)
            .map(|t| Transition {
                input: tiny_input(t as u64),
                action: Action::from_index(t % 5).unwrap(),
                reward: if t % 2 == 0 { 1.0 } else { -0.5 },
                value: 0.0,
                done: t + 1 == n,
            })
            .collect(),
        bootstrap: 0.0,
    }
}

#[test]
fn zero_network_is_uniform() {
    let mut agent = A2cAgent::new(tiny_config(), tiny_spec(), 0).unwrap();
    agent.params.fill(0.0);
    let (logits, value, _) = agent.evaluate(&tiny_input(1), &agent.initial_memory()).unwrap();
    assert!(logits.iter().all(|l| *l == 0.0));
    assert_eq!(value, 0.0);
    assert!(softmax(&logits).iter().all(|q| (q - 0.2).abs() < 1e-15));
}

#[test]
fn sampling_is_seeded() {
    let draw = |seed| {
        let mut agent = A2cAgent::new(tiny_config(), tiny_spec(), seed).unwrap();
        let m = agent.initial_memory();
        (0..20).map(|_| agent.act(&tiny_input(2), &m).unwrap().0).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
}

#[test]
fn memory_changes_logits() {
    let agent = A2cAgent::new(tiny_config(), tiny_spec(), 3).unwrap();
    let x = tiny_input(4);
    let (l0, _, m1) = agent.evaluate(&x, &agent.initial_memory()).unwrap();
    let (l1, _, _) = agent.evaluate(&x, &m1).unwrap();
    assert!(l0.iter().zip(&l1).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let mut agent = A2cAgent::new(tiny_config(), tiny_spec(), 3).unwrap();
    let mut x = tiny_input(0);
    x.planes.pop();
    let m = agent.initial_memory();
    assert!(matches!(agent.act(&x, &m).unwrap_err(), Error::Dimension(_)));
}

#[test]
fn returns_and_advantage() {
    let r = n_step_returns(&[1.0], &[true], 5.0, 0.99);
    assert_eq!(r, vec![1.0]);
    let r = n_step_returns(&[1.0], &[false], 0.0, 0.99);
    assert_eq!(r, vec![1.0]);
    let r = n_step_returns(&[1.0, 0.0, 2.0], &[false, false, false], 1.0, 0.5);
    assert_eq!(r, vec![1.625, 1.25, 2.5]);
    let r = n_step_returns(&[1.0, 1.0], &[true, false], 4.0, 0.5);
    assert_eq!(r, vec![1.0, 3.0]);
}

#[test]
fn empty_rollout_is_config_error() {
    let mut agent = A2cAgent::new(tiny_config(), tiny_spec(), 3).unwrap();
    let r = Rollout {
        memory: agent.initial_memory(),
        steps: vec![],
        bootstrap: 0.0,
    };
    assert!(matches!(agent.update(&r).unwrap_err(), Error::Config(_)));
}

#[test]
fn zero_advantage_leaves_entropy_gradient() {
    let grads = |entropy_coef: f64| {
        let cfg = A2cConfig {
            entropy_coef,
            ..tiny_config()
        };
        let mut agent = A2cAgent::new(cfg, tiny_spec(), 8).unwrap();
        agent.params.set("value/w", Tensor::zeros(&[3, 1])).unwrap();
        let mut r = tiny_rollout(4);
        r.steps.iter_mut().for_each(|s| s.reward = 0.0);
        let tape = Tape::new();
        let (loss, _) = agent.loss(&tape, &agent.params, &r).unwrap();
        tape.backward(loss).unwrap().into_params()
    };
    let none = grads(0.0);
    assert!(none.values().all(|g| g.data().iter().all(|v| *v == 0.0)));
    let a = grads(0.01);
    let b = grads(1.0);
    let mut nonzero = false;
    for (k, ga) in &a {
        for (x, y) in ga.data().iter().zip(b[k].data()) {
            assert!((x - 0.01 * y).abs() <= 1e-15 + 1e-12 * y.abs(), "{}", k);
            nonzero |= *y != 0.0;
        }
    }
    assert!(nonzero);
}

#[test]
fn a2c_loss_gradcheck() {
    let agent = A2cAgent::new(tiny_config(), tiny_spec(), 21).unwrap();
    let mut r = tiny_rollout(3);
    r.steps[2].done = false;
    r.bootstrap = 0.7;
    // The advantage is a constant in the analytic gradient, so the finite
    // differences hold the baseline at its unperturbed values.
    let values: Vec<f64> = {
        let mut m = r.memory.clone();
        r.steps
            .iter()
            .map(|s| {
                let (_, v, next) = agent.evaluate(&s.input, &m).unwrap();
                m = next;
                v
            })
            .collect()
    };
    let gc = check_params(&agent.params, 1e-5, 1, |tape, store| {
        Ok(agent.loss_with_baseline(tape, store, &r, Some(&values))?.0)
    })
    .unwrap();
    assert!(gc.max_rel_error < 1e-4, "{:?}", gc);
}

#[test]
fn update_moves_only_own_parameters() {
    let game = GameConfig::coop_nav();
    let cfg = A2cConfig {
        conv_channels: 2,
        mlp_hidden: 8,
        lstm_hidden: 8,
        ..A2cConfig::default()
    };
    let mut learners: Vec<_> = (0..2)
        .map(|a| GridLearner::augmented(cfg.clone(), OnBoardConfig::default(), &game, a, 100 + a as u64).unwrap())
        .collect();
    let env = EnvState::reset(&game, 0).unwrap();
    let before = learners[1].digest();
    let b0 = learners[0].digest();
    for _ in 0..3 {
        learners[0].act(&env).unwrap();
        learners[0].observe(&[Action::Stay, Action::Up], &[1.0, 1.0], true).unwrap();
    }
    assert_ne!(learners[0].digest(), b0);
    assert_eq!(learners[1].digest(), before);
}

#[test]
fn first_step_uses_zero_state() {
    let game = GameConfig::coop_nav();
    let mut rfm = OnBoardRfm::new(OnBoardConfig::default(), &game, 0, 4).unwrap();
    let env = EnvState::reset(&game, 2).unwrap();
    let g = env.graph(Default::default()).unwrap();
    let a = rfm.predict(&g, env.last_actions()).unwrap();
    let rollout = crate::graph::rfm_rollout(&rfm.model, std::slice::from_ref(&g)).unwrap();
    let want = rollout[0].vertex(1);
    for (x, y) in a[0].iter().zip(want) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn frozen_zero_rfm_gives_uniform_planes() {
    let game = GameConfig::coop_nav();
    let cfg = A2cConfig {
        conv_channels: 2,
        mlp_hidden: 8,
        lstm_hidden: 8,
        ..A2cConfig::default()
    };
    let onb = OnBoardConfig {
        frozen: true,
        ..OnBoardConfig::default()
    };
    let mut l = GridLearner::augmented(cfg, onb, &game, 0, 1).unwrap();
    l.rfm.as_mut().unwrap().model.params.fill(0.0);
    let digest = l.rfm.as_ref().unwrap().model.params.digest();
    let mut env = EnvState::reset(&game, 5).unwrap();
    while !env.is_done() {
        let base = env.render_observation(0).unwrap();
        let a0 = l.act(&env).unwrap();
        let input = l.last_input().unwrap().clone();
        assert_eq!(&input.planes[..base.planes.len()], &base.planes[..]);
        let extra = &input.planes[base.planes.len()..];
        let want = render_prediction_planes(&[vec![0.0; 5]], &[env.agents()[1]], env.agents()[0], 6, 6).unwrap();
        assert_eq!(extra, &want.data[..]);
        let acts = [a0, Action::Right];
        let r = env.step(&acts).unwrap();
        l.observe(&acts, &r.rewards, r.done).unwrap();
    }
    assert_eq!(l.rfm.as_ref().unwrap().model.params.digest(), digest);
}

#[test]
fn on_board_model_beats_chance() {
    let game = GameConfig::coop_nav();
    let cfg = A2cConfig {
        conv_channels: 2,
        mlp_hidden: 16,
        lstm_hidden: 16,
        ..A2cConfig::default()
    };
    let mut l = GridLearner::augmented(cfg, OnBoardConfig::default(), &game, 0, 9).unwrap();
    let mut fellow = ScriptedPolicy::new(greedy(), 0);
    let mut steps = 0;
    let mut seed = 0;
    let mut measured = false;
    while steps < 700 {
        let mut env = EnvState::reset(&game, seed).unwrap();
        seed += 1;
        while !env.is_done() {
            if steps == 500 {
                l.rfm.as_mut().unwrap().reset_accuracy();
                measured = true;
            }
            let a0 = l.act(&env).unwrap();
            let a1 = fellow.act(&env, 1).unwrap();
            let r = env.step(&[a0, a1]).unwrap();
            l.observe(&[a0, a1], &r.rewards, r.done).unwrap();
            steps += 1;
        }
    }
    assert!(measured);
    let acc = l.rfm.as_ref().unwrap().accuracy().unwrap();
    assert!(acc > 0.2, "accuracy {}", acc);
}

fn tiny_a2c() -> A2cConfig {
    A2cConfig {
        conv_channels: 2,
        mlp_hidden: 16,
        lstm_hidden: 8,
        ..A2cConfig::default()
    }
}

#[test]
fn fellow_session_logs_every_episode() {
    let mut cfg = AgentTrainConfig::new(GameConfig::coin_game(), LearnerKind::RfmAugmented, 35, 4);
    cfg.a2c = tiny_a2c();
    cfg.onboard.latent = 8;
    cfg.onboard.mlp_hidden = 8;
    let mut records = Vec::new();
    let learner = run_agent_training(&cfg, |r, _| records.push(r.clone())).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(records.last().unwrap().env_steps, 40);
    assert!(records.iter().all(|r| r.coins.is_some() && r.rfm_loss.is_some() && r.learner == "rfm-augmented"));
    let mut again = Vec::new();
    let twin = run_agent_training(&cfg, |r, _| again.push(r.clone())).unwrap();
    assert_eq!(records, again);
    assert_eq!(learner.digest(), twin.digest());
}

#[test]
fn fellow_session_rejects_bad_slot() {
    let game = GameConfig::stag_hunt(2);
    let mut cfg = AgentTrainConfig::new(game.clone(), LearnerKind::Baseline, 10, 0);
    cfg.slot = 2;
    assert!(cfg.make_learner().is_err());
    let mut l = GridLearner::baseline(tiny_a2c(), &game, 1, 0).unwrap();
    let ep = play_with_fellows(&game, &mut l, &ScriptedConfig::default(), 3).unwrap();
    assert_eq!(ep.steps, 32);
    assert!(ep.coins.is_none());
    assert!(!ep.reports.is_empty());
}

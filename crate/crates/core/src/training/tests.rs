use super::*;
use crate::data::{collect, CollectConfig, PolicySpec, SpecFactory};
use crate::envs::{GameConfig, VERTEX_DIM};
use crate::error::Error;
use crate::graph::{ModelConfig, ModelKind};
use crate::policies::ScriptedConfig;

fn episodes(game: GameConfig, n: usize, seed: u64) -> Vec<Episode> {
    let f = SpecFactory::new(PolicySpec::Scripted(ScriptedConfig::default()), &game).unwrap();
    let cfg = CollectConfig {
        n_train: n,
        n_eval: 0,
        base_seed: seed,
        workers: 1,
        game,
    };
    collect(&cfg, &f).unwrap().episodes
}

fn small(kind: ModelKind, task: Task, game: &GameConfig) -> ModelConfig {
    let mut c = ModelConfig::new(kind, task, VERTEX_DIM, game.n_agents, game.n_vertices());
    c.mlp_hidden = 16;
    c.latent = 8;
    c.lstm_hidden = 8;
    c.decoder_hidden = vec![8];
    c
}

fn cfg(loss: LossKind, steps: u64, batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        ..TrainConfig::new(loss, steps, 3)
    }
}

#[test]
fn untrained_loss_is_near_uniform() {
    let game = GameConfig::coop_nav();
    let eps = episodes(game.clone(), 8, 0);
    let refs: Vec<&Episode> = eps.iter().collect();
    let mut c = small(ModelKind::Rfm, Task::Action, &game);
    c.mlp_hidden = 64;
    c.latent = 32;
    let model = Model::new(c, 1).unwrap();
    let tape = Tape::new();
    let loss = batch_loss(&tape, &model, &refs, &vec![false; 8], LossKind::ActionCe).unwrap();
    let l = tape.value(loss).item();
    let outs = unroll_batch(&tape, &model, &refs, &vec![false; 8]).unwrap();
    let mut ent = Vec::new();
    for &o in &outs {
        for row in tape.value(o).data().chunks(5) {
            let p = crate::policies::softmax(row);
            ent.push(-p.iter().map(|q| q * q.ln()).sum::<f64>());
        }
    }
    let (h, _) = mean_std(&ent);
    assert!((h - 5f64.ln()).abs() < 0.15, "initial entropy {}", h);
    assert!((l - 5f64.ln()).abs() < 0.3, "initial loss {}", l);
}

#[test]
fn batch_loss_ignores_episode_order() {
    let game = GameConfig::stag_hunt(2);
    let eps = episodes(game.clone(), 4, 0);
    let model = Model::new(small(ModelKind::Rfm, Task::Action, &game), 1).unwrap();
    let a: Vec<&Episode> = eps.iter().collect();
    let b: Vec<&Episode> = eps.iter().rev().collect();
    let la = {
        let t = Tape::new();
        let v = batch_loss(&t, &model, &a, &[false; 4], LossKind::ActionCe).unwrap();
        t.value(v).item()
    };
    let lb = {
        let t = Tape::new();
        let v = batch_loss(&t, &model, &b, &[false; 4], LossKind::ActionCe).unwrap();
        t.value(v).item()
    };
    assert!((la - lb).abs() < 1e-12, "{} vs {}", la, lb);
}

#[test]
fn memorizes_a_single_episode() {
    let game = GameConfig::coop_nav();
    let eps = episodes(game.clone(), 1, 5);
    let refs: Vec<&Episode> = eps.iter().collect();
    let model = Model::new(small(ModelKind::Rfm, Task::Action, &game), 2).unwrap();
    let mut c = cfg(LossKind::ActionCe, 2000, 1);
    c.adam.lr = 3e-3;
    let mut t = Trainer::new(model, c.adam.clone());
    let mut best = f64::INFINITY;
    while t.step < c.steps && best >= 0.05 {
        best = best.min(t.train_step(&refs, &c).unwrap());
    }
    assert!(best < 0.05, "loss {} after {} steps", best, t.step);
    while t.step < c.steps && best >= 0.002 {
        best = best.min(t.train_step(&refs, &c).unwrap());
    }
    let stats = eval_perfect_rollout(&t.model, &refs, 1).unwrap();
    assert_eq!(stats.mean, 20.0);
}

#[test]
fn zero_model_zero_targets_zero_loss() {
    let game = GameConfig::coop_nav();
    let mut eps = episodes(game.clone(), 2, 0);
    for e in &mut eps {
        for s in &mut e.steps {
            s.rewards = vec![0.0, 0.0];
        }
    }
    let refs: Vec<&Episode> = eps.iter().collect();
    let mut model = Model::new(small(ModelKind::Rfm, Task::Return, &game), 1).unwrap();
    model.params.fill(0.0);
    let tape = Tape::new();
    let l = batch_loss(&tape, &model, &refs, &[false, true], LossKind::ReturnMse).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn mixing_prunes_half_of_each_epoch() {
    let c = cfg(LossKind::ReturnMse, 0, 10);
    assert!(c.prune_mixing);
    for epoch in 0..3u64 {
        let mut pruned = 0;
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..10 {
            let (idx, p) = batch_plan(100, &c, epoch * 10 + k);
            pruned += p.iter().filter(|x| **x).count();
            seen.extend(idx);
        }
        assert_eq!(seen.len(), 100);
        assert_eq!(pruned, 50);
    }
    let a = cfg(LossKind::ActionCe, 0, 10);
    assert!(!a.prune_mixing);
}

#[test]
fn loss_head_mismatch_is_config_error() {
    let game = GameConfig::coop_nav();
    let eps = episodes(game.clone(), 1, 0);
    let refs: Vec<&Episode> = eps.iter().collect();
    let model = Model::new(small(ModelKind::Rfm, Task::Return, &game), 1).unwrap();
    let tape = Tape::new();
    let e = batch_loss(&tape, &model, &refs, &[false], LossKind::ActionCe).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert!(TrainConfig { batch_size: 0, ..cfg(LossKind::ActionCe, 1, 1) }.validate().is_err());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let game = GameConfig::coop_nav();
    let eps = episodes(game.clone(), 6, 0);
    let refs: Vec<&Episode> = eps.iter().collect();
    let c = cfg(LossKind::ActionCe, 6, 2);
    let run = || train_action_model(Model::new(small(ModelKind::Rfm, Task::Action, &game), 4).unwrap(), &refs, &c).unwrap();
    let (m1, curve1) = run();
    let (m2, curve2) = run();
    assert_eq!(curve1, curve2);
    assert_eq!(m1.params.digest(), m2.params.digest());

    let mut t = Trainer::new(Model::new(small(ModelKind::Rfm, Task::Action, &game), 4).unwrap(), c.adam.clone());
    t.run(&refs, &cfg(LossKind::ActionCe, 3, 2), |_| Ok(0.0), |_| {}).unwrap();
    let text = t.checkpoint(serde_json::json!({})).unwrap().to_json().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_json(&text).unwrap(), c.adam.clone()).unwrap();
    assert_eq!(resumed.step, 3);
    let rest = resumed.run(&refs, &c, |_| Ok(0.0), |_| {}).unwrap();
    assert_eq!(rest.iter().map(|r| r.loss).collect::<Vec<_>>(), curve1[3..].to_vec());
    assert_eq!(resumed.model.params.digest(), m1.params.digest());
}

#[test]
fn predictions_ignore_future_graphs() {
    let game = GameConfig::stag_hunt(2);
    let eps = episodes(game.clone(), 1, 7);
    let mut c = small(ModelKind::Rfm, Task::Action, &game);
    c.zero_head = false;
    let model = Model::new(c, 3).unwrap();
    let logits = |ep: &Episode| {
        let tape = Tape::new();
        let outs = unroll_batch(&tape, &model, &[ep], &[false]).unwrap();
        outs.iter().map(|&o| tape.value(o).data().to_vec()).collect::<Vec<_>>()
    };
    let base = logits(&eps[0]);
    let mut changed = eps[0].clone();
    let cut = 10;
    for s in &mut changed.steps[cut..] {
        let mut data = s.graph.vertex_data().to_vec();
        data.iter_mut().for_each(|v| *v += 1.5);
        s.graph = s.graph.with_vertices(VERTEX_DIM, data).unwrap();
    }
    let after = logits(&changed);
    assert_eq!(&base[..cut], &after[..cut]);
    assert_ne!(base[cut], after[cut]);
}

#[test]
fn perfect_length_definition() {
    let game = GameConfig::coop_nav();
    let eps = episodes(game, 1, 0);
    let ep = &eps[0];
    let truth: Vec<Vec<usize>> = ep.steps.iter().map(|s| s.actions.iter().map(|a| a.index()).collect()).collect();
    assert_eq!(perfect_length(&truth, ep), 20);
    let mut wrong = truth.clone();
    wrong[0][1] = (wrong[0][1] + 1) % 5;
    assert_eq!(perfect_length(&wrong, ep), 0);
    let mut late = truth;
    late[7][0] = (late[7][0] + 1) % 5;
    assert_eq!(perfect_length(&late, ep), 7);
}

#[test]
fn copy_last_action_is_small_but_positive() {
    let train = episodes(GameConfig::coop_nav(), 200, 0);
    let train: Vec<&Episode> = train.iter().collect();
    let eps = episodes(GameConfig::coop_nav(), 300, 1000);
    let refs: Vec<&Episode> = eps.iter().collect();
    let s = copy_last_action_rollout(&refs, first_action_mode(&train));
    assert!(s.mean > 0.0 && s.mean < 5.0, "{:?}", s.mean);
}

#[test]
fn return_model_beats_mean_baseline() {
    let game = GameConfig::coop_nav();
    let eps = episodes(game.clone(), 40, 0);
    let (train, eval) = eps.split_at(32);
    let train: Vec<&Episode> = train.iter().collect();
    let eval: Vec<&Episode> = eval.iter().collect();
    let model = Model::new(small(ModelKind::Rfm, Task::Return, &game), 5).unwrap();
    let mut c = cfg(LossKind::ReturnMse, 300, 8);
    c.adam.lr = 3e-3;
    let (model, _) = train_return_model(model, &train, &c, true).unwrap();
    let mse = eval_return_mse(&model, &eval, false, 1).unwrap();
    let base = predict_mean_mse(&train, &eval);
    assert!(mse < base, "model {} baseline {}", mse, base);
}

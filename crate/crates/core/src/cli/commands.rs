use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::manifest::{ensure_parent, file_sha256, input_path, manifest_for, output_path, write_text, Artifact, RunManifest};
use super::{
    execute, required, AgentTrainArgs, CoinsArgs, CollectArgs, EdgesArgs, EvalArgs, Invocation, Outcome, RerunArgs,
    ReturnArgs, TrainArgs,
};
use crate::analysis::{
    self, capture_marginal, coin_analysis, displacement_by_rank, extract_edge_norms, mean_gap, parse_run_log,
    return_marginal, run_log_line, stag_state_analysis, teammate_edge_tests, RunRecord, RUN_LOG_HEADER,
};
use crate::data::{collect as collect_dataset, derive_seed, CollectConfig, Dataset, Episode, PolicySpec, SpecFactory};
use crate::envs::{Game, GameConfig, VERTEX_DIM};
use crate::error::{cfg_err, state_err, Error, Result};
use crate::graph::{Model, ModelConfig, ModelKind, Task};
use crate::policies::{run_agent_training, AgentTrainConfig, LearnerKind, RfmTarget, ScriptedConfig};
use crate::tensor::{AdamConfig, Checkpoint};
use crate::training::{
    copy_last_action_rollout, eval_perfect_rollout, eval_return_mse, first_action_mode, predict_mean_mse, return_stats,
    LogRecord, LossKind, TrainConfig, Trainer,
};

fn load_dataset(p: &str) -> Result<(PathBuf, Dataset)> {
    let path = input_path(p)?;
    let ds = Dataset::load(&path)?;
    Ok((path, ds))
}

fn load_model(p: &str) -> Result<(PathBuf, Checkpoint, Model)> {
    let path = input_path(p)?;
    let ck = Checkpoint::load(&path)?;
    let model = Model::from_checkpoint(&ck)?;
    Ok((path, ck, model))
}

fn game_of(ds: &Dataset) -> Result<GameConfig> {
    match ds.episodes.first() {
        Some(ep) => Ok(ep.config.clone()),
        None => ds.header.game.parse(),
    }
}

fn split_episodes<'a>(ds: &'a Dataset, split: &str) -> Result<Vec<&'a Episode>> {
    let eps: Vec<&Episode> = match split {
        "train" => ds.train().collect(),
        "eval" => ds.eval().collect(),
        "all" => ds.episodes.iter().collect(),
        other => return Err(cfg_err!("unknown split '{}' (expected eval, train or all)", other)),
    };
    if eps.is_empty() {
        return Err(cfg_err!("the dataset has no {} episodes", split));
    }
    Ok(eps)
}

fn check_workers(w: usize) -> Result<()> {
    if w == 0 {
        return Err(cfg_err!("--workers must be at least 1"));
    }
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn artifacts(paths: &[&Path]) -> Result<Vec<Artifact>> {
    paths.iter().map(|p| Artifact::of(p)).collect()
}

pub(crate) fn collect(a: &CollectArgs) -> Result<Outcome> {
    let game: GameConfig = required(&a.game, "game")?.parse()?;
    check_workers(a.workers)?;
    let mut inputs = Vec::new();
    let spec = if a.policy == "scripted" {
        PolicySpec::Scripted(ScriptedConfig {
            epsilon: a.epsilon,
            ..ScriptedConfig::default()
        })
    } else if let Some(p) = a.policy.strip_prefix("checkpoint:") {
        let path = input_path(p)?;
        inputs.push(Artifact::of(&path)?);
        PolicySpec::Checkpoint {
            path: path.display().to_string(),
        }
    } else {
        return Err(cfg_err!("unknown policy '{}' (expected scripted or checkpoint:PATH)", a.policy));
    };
    let factory = SpecFactory::new(spec, &game)?;
    let cfg = CollectConfig {
        game,
        n_train: a.episodes,
        n_eval: a.eval_episodes,
        base_seed: a.seed,
        workers: a.workers,
    };
    let ds = collect_dataset(&cfg, &factory)?;
    let out = output_path(required(&a.out, "out")?);
    ensure_parent(&out)?;
    ds.save(&out)?;
    println!("wrote {} episodes to {}", ds.episodes.len(), out.display());
    Ok(Outcome {
        manifest: manifest_for(&out),
        seeds: json!({ "base_seed": a.seed }),
        inputs,
        outputs: artifacts(&[&out])?,
    })
}

pub(crate) fn train(a: &TrainArgs) -> Result<Outcome> {
    let kind: ModelKind = required(&a.model, "model")?.parse()?;
    let task: Task = a.task.parse()?;
    check_workers(a.workers)?;
    if !(a.lr.is_finite() && a.lr > 0.0) || !(a.clip.is_finite() && a.clip >= 0.0) {
        return Err(cfg_err!("--lr must be positive and --clip non-negative"));
    }
    let (data_path, ds) = load_dataset(required(&a.data, "data")?)?;
    let game = game_of(&ds)?;
    if kind == ModelKind::MlpLstm && task == Task::Return && matches!(game.game, Game::Coin | Game::StagHunt) {
        return Err(cfg_err!(
            "return prediction with mlplstm is not supported on {}: entities appear and disappear, and the model has no edges to prune",
            game.name()
        ));
    }
    let train: Vec<&Episode> = ds.train().collect();
    let eval: Vec<&Episode> = ds.eval().collect();
    if a.eval_every > 0 && eval.is_empty() {
        return Err(cfg_err!("--eval-every needs held-out episodes in the dataset"));
    }
    let adam = AdamConfig {
        lr: a.lr,
        clip_norm: (a.clip > 0.0).then_some(a.clip),
        ..AdamConfig::default()
    };
    let mut cfg = TrainConfig::new(LossKind::for_task(task), a.steps, a.seed);
    cfg.batch_size = a.batch_size;
    cfg.adam = adam.clone();
    cfg.eval_every = a.eval_every;
    cfg.workers = a.workers;
    cfg.validate()?;

    let mut inputs = vec![Artifact::of(&data_path)?];
    let model_seed = derive_seed(a.seed, 0);
    let mut trainer = match &a.resume {
        Some(r) => {
            let path = input_path(r)?;
            inputs.push(Artifact::of(&path)?);
            let t = Trainer::from_checkpoint(&Checkpoint::load(&path)?, adam)?;
            if t.model.kind() != kind || t.model.config.task != task {
                return Err(cfg_err!(
                    "checkpoint {} holds a {} {} model, not {} {}",
                    path.display(),
                    t.model.kind(),
                    t.model.config.task.name(),
                    kind,
                    task.name()
                ));
            }
            if t.step > a.steps {
                return Err(cfg_err!("checkpoint is already at step {}, past --steps {}", t.step, a.steps));
            }
            t
        }
        None => {
            let mut mc = ModelConfig::new(kind, task, VERTEX_DIM, game.n_agents, game.n_vertices());
            mc.latent = a.latent;
            mc.mlp_hidden = a.mlp_hidden;
            mc.lstm_hidden = a.lstm_hidden;
            if task == Task::Return {
                let (m, s) = return_stats(&train);
                mc.output_shift = m;
                mc.output_scale = s;
            }
            Trainer::new(Model::new(mc, model_seed)?, adam)
        }
    };
    let every = (a.steps / 20).max(1);
    let workers = a.workers;
    let log = trainer.run(
        &train,
        &cfg,
        |m| match task {
            Task::Action => Ok(eval_perfect_rollout(m, &eval, workers)?.mean),
            Task::Return => eval_return_mse(m, &eval, false, workers),
        },
        |r: &LogRecord| {
            if r.step % every == 0 || r.eval.is_some() {
                match r.eval {
                    Some(e) => println!("step {} loss {:.5} eval {:.5}", r.step, r.loss, e),
                    None => println!("step {} loss {:.5}", r.step, r.loss),
                }
            }
        },
    )?;

    let out = output_path(required(&a.out, "out")?);
    let log_path = match &a.log {
        Some(l) => output_path(l),
        None => {
            let mut s = out.as_os_str().to_owned();
            s.push(".log.jsonl");
            PathBuf::from(s)
        }
    };
    let mut text = String::new();
    for r in &log {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    write_text(&log_path, &text)?;
    let meta = json!({
        "game": game.name(),
        "model": kind.name(),
        "task": task.name(),
        "train": cfg,
        "data_sha256": inputs[0].sha256,
    });
    ensure_parent(&out)?;
    trainer.checkpoint(meta)?.save(&out)?;
    println!("wrote checkpoint at step {} to {}", trainer.step, out.display());
    Ok(Outcome {
        manifest: manifest_for(&out),
        seeds: json!({ "seed": a.seed, "model_init": model_seed }),
        inputs,
        outputs: artifacts(&[&out, &log_path])?,
    })
}

fn trained_with_mixing(ck: &Checkpoint) -> bool {
    ck.meta.pointer("/train/prune_mixing").and_then(|v| v.as_bool()).unwrap_or(false)
}

pub(crate) fn eval(a: &EvalArgs) -> Result<Outcome> {
    check_workers(a.workers)?;
    let (ck_path, ck, model) = load_model(required(&a.checkpoint, "checkpoint")?)?;
    let (data_path, ds) = load_dataset(required(&a.data, "data")?)?;
    let eps = split_episodes(&ds, &a.split)?;
    let train: Vec<&Episode> = ds.train().collect();
    let reference = if train.is_empty() { &eps } else { &train };
    let game = game_of(&ds)?;
    let metrics = match model.config.task {
        Task::Action => {
            let stats = eval_perfect_rollout(&model, &eps, a.workers)?;
            let base = copy_last_action_rollout(&eps, first_action_mode(reference));
            println!("perfect roll-out {:.3} ± {:.3} over {} episodes", stats.mean, stats.stderr, stats.n);
            json!({
                "model": model.kind().name(),
                "task": "action",
                "game": game.name(),
                "split": a.split,
                "n_eval": stats.n,
                "mean_perfect_rollout": stats.mean,
                "std": stats.std,
                "stderr": stats.stderr,
                "copy_last_baseline": { "mean": base.mean, "std": base.std, "stderr": base.stderr },
                "lengths": stats.lengths,
            })
        }
        Task::Return => {
            let full = eval_return_mse(&model, &eps, false, a.workers)?;
            let pruned = if trained_with_mixing(&ck) {
                Some(eval_return_mse(&model, &eps, true, a.workers)?)
            } else {
                None
            };
            let baseline = predict_mean_mse(reference, &eps);
            println!("return mse {:.5} (dataset-mean baseline {:.5})", full, baseline);
            json!({
                "model": model.kind().name(),
                "task": "return",
                "game": game.name(),
                "split": a.split,
                "n_eval": eps.len(),
                "mse": full,
                "mse_pruned": pruned,
                "predict_mean_mse": baseline,
            })
        }
    };
    let out = output_path(required(&a.out, "out")?);
    write_json(&out, &metrics)?;
    Ok(Outcome {
        manifest: manifest_for(&out),
        seeds: json!({}),
        inputs: artifacts(&[&ck_path, &data_path])?,
        outputs: artifacts(&[&out])?,
    })
}

pub(crate) fn analyze_edges(a: &EdgesArgs) -> Result<Outcome> {
    check_workers(a.workers)?;
    let (ck_path, _, model) = load_model(required(&a.checkpoint, "checkpoint")?)?;
    let (data_path, ds) = load_dataset(required(&a.data, "data")?)?;
    let eps = split_episodes(&ds, &a.split)?;
    let series = extract_edge_norms(&model, &eps, a.workers)?;
    let ranks = displacement_by_rank(&series, &eps, a.horizon);
    let state = stag_state_analysis(&series, &eps, a.window, a.resamples, derive_seed(a.seed, 0));
    let team = teammate_edge_tests(&series, &eps, a.window, a.resamples, derive_seed(a.seed, 1));

    let dir = output_path(required(&a.out_dir, "out-dir")?);
    let (top, middle, bottom, summary) = (
        dir.join("fig3_top.csv"),
        dir.join("fig3_middle.csv"),
        dir.join("fig3_bottom.csv"),
        dir.join("edges_summary.json"),
    );
    write_text(&top, &analysis::fig3_top_csv(&ranks))?;
    write_text(&middle, &analysis::fig3_middle_csv(&state))?;
    write_text(&bottom, &analysis::fig3_bottom_csv(&team))?;
    write_json(
        &summary,
        &json!({
            "n_episodes": eps.len(),
            "n_records": series.n_records(),
            "displacement_by_rank": ranks,
            "stag_available": { "mean": state.mean_available, "stderr": state.stderr_available, "n": state.n_available },
            "stag_unavailable": { "mean": state.mean_unavailable, "stderr": state.stderr_unavailable, "n": state.n_unavailable },
            "stag_state_test": state.test,
            "stag_capture_before_after": team.capture_before_after,
            "apple_before_after": team.apple_before_after,
            "apple_count_correlation": team.apple_count,
        }),
    )?;
    println!("wrote edge analysis of {} episodes to {}", eps.len(), dir.display());
    Ok(Outcome {
        manifest: manifest_for(&dir.join("edges")),
        seeds: json!({ "seed": a.seed }),
        inputs: artifacts(&[&ck_path, &data_path])?,
        outputs: artifacts(&[&top, &middle, &bottom, &summary])?,
    })
}

pub(crate) fn analyze_return(a: &ReturnArgs) -> Result<Outcome> {
    check_workers(a.workers)?;
    let (ck_path, ck, model) = load_model(required(&a.checkpoint, "checkpoint")?)?;
    let (data_path, ds) = load_dataset(required(&a.data, "data")?)?;
    let eps = split_episodes(&ds, &a.split)?;
    let series = return_marginal(&model, &eps, trained_with_mixing(&ck), a.workers)?;
    let cm = capture_marginal(&series, &eps, a.window, a.span, a.resamples, derive_seed(a.seed, 0));
    let train: Vec<&Episode> = ds.train().collect();
    let reference = if train.is_empty() { &eps } else { &train };

    let dir = output_path(required(&a.out_dir, "out-dir")?);
    let (fig, summary) = (dir.join("fig4.csv"), dir.join("return_summary.json"));
    write_text(&fig, &analysis::fig4_csv(&cm))?;
    write_json(
        &summary,
        &json!({
            "n_episodes": eps.len(),
            "n_capture_windows": cm.alignment.windows.len(),
            "span": cm.span,
            "before_after": cm.before_after,
            "one_step": cm.one_step,
            "mse": eval_return_mse(&model, &eps, false, a.workers)?,
            "predict_mean_mse": predict_mean_mse(reference, &eps),
        }),
    )?;
    println!("wrote return analysis of {} episodes to {}", eps.len(), dir.display());
    Ok(Outcome {
        manifest: manifest_for(&dir.join("return")),
        seeds: json!({ "seed": a.seed }),
        inputs: artifacts(&[&ck_path, &data_path])?,
        outputs: artifacts(&[&fig, &summary])?,
    })
}

pub(crate) fn analyze_coins(a: &CoinsArgs) -> Result<Outcome> {
    let log_path = input_path(required(&a.log, "log")?)?;
    let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let records = parse_run_log(&text)?;
    let curve = coin_analysis(&records, a.smooth);
    if curve.is_empty() {
        return Err(Error::Format(format!("{} has no coin counts", log_path.display())));
    }
    let mut learners: Vec<&str> = Vec::new();
    for r in &records {
        if !learners.contains(&r.learner.as_str()) {
            learners.push(&r.learner);
        }
    }
    let per_learner: Vec<serde_json::Value> = learners
        .iter()
        .map(|l| {
            let mine: Vec<RunRecord> = records.iter().filter(|r| r.learner == *l).cloned().collect();
            let last = mine.last().map(|r| r.env_steps).unwrap_or(0);
            let mean = |f: fn(&analysis::CoinCounts) -> usize| {
                let xs: Vec<f64> = mine.iter().filter_map(|r| r.coins.map(|c| f(&c) as f64)).collect();
                (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
            };
            json!({
                "learner": l,
                "episodes": mine.len(),
                "env_steps": last,
                "mean_revealed": mean(|c| c.revealed),
                "mean_unrevealed": mean(|c| c.unrevealed),
                "mean_bad": mean(|c| c.bad),
                "gap_first_half": mean_gap(&mine, 0, last / 2),
                "gap_second_half": mean_gap(&mine, last / 2, last + 1),
            })
        })
        .collect();
    let dir = output_path(required(&a.out_dir, "out-dir")?);
    let (fig, summary) = (dir.join("fig6.csv"), dir.join("coins_summary.json"));
    write_text(&fig, &analysis::fig6_csv(&curve))?;
    write_json(&summary, &json!({ "smooth": a.smooth, "learners": per_learner }))?;
    println!("wrote coin analysis to {}", dir.display());
    Ok(Outcome {
        manifest: manifest_for(&dir.join("coins")),
        seeds: json!({}),
        inputs: artifacts(&[&log_path])?,
        outputs: artifacts(&[&fig, &summary])?,
    })
}

pub(crate) fn agent_train(a: &AgentTrainArgs) -> Result<Outcome> {
    let game: GameConfig = required(&a.game, "game")?.parse()?;
    let kinds = match a.learner.as_str() {
        "baseline" => vec![LearnerKind::Baseline],
        "rfm-augmented" => vec![LearnerKind::RfmAugmented],
        "both" => vec![LearnerKind::Baseline, LearnerKind::RfmAugmented],
        other => return Err(cfg_err!("unknown learner '{}' (expected baseline, rfm-augmented or both)", other)),
    };
    let target = match a.rfm_target.as_str() {
        "next-action" => RfmTarget::NextAction,
        "last-action" => RfmTarget::LastAction,
        other => return Err(cfg_err!("unknown RFM target '{}' (expected next-action or last-action)", other)),
    };
    if !(0.0..=1.0).contains(&a.fellow_epsilon) {
        return Err(cfg_err!("--fellow-epsilon {} outside [0, 1]", a.fellow_epsilon));
    }
    let out = output_path(required(&a.out, "out")?);
    ensure_parent(&out)?;
    let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", RUN_LOG_HEADER).map_err(|e| Error::io(&out, e))?;
    let mut outputs = vec![out.clone()];
    for kind in kinds {
        let mut cfg = AgentTrainConfig::new(game.clone(), kind, a.steps, a.seed);
        cfg.slot = a.slot;
        cfg.fellows.epsilon = a.fellow_epsilon;
        cfg.a2c.conv_channels = a.conv_channels;
        cfg.a2c.mlp_hidden = a.mlp_hidden;
        cfg.a2c.lstm_hidden = a.lstm_hidden;
        cfg.a2c.adam.lr = a.lr;
        cfg.onboard.latent = a.rfm_latent;
        cfg.onboard.mlp_hidden = a.rfm_hidden;
        cfg.onboard.target = target;
        let mut io_err = None;
        let learner = run_agent_training(&cfg, |rec, _| {
            if let Err(e) = writeln!(w, "{}", run_log_line(rec)).and_then(|_| w.flush()) {
                io_err.get_or_insert(e);
            }
            if (rec.episode + 1) % 100 == 0 {
                println!("{} episode {} steps {} return {}", rec.learner, rec.episode + 1, rec.env_steps, rec.episode_return);
            }
        })?;
        if let Some(e) = io_err {
            return Err(Error::io(&out, e));
        }
        if let Some(prefix) = &a.save_agents {
            let path = output_path(&format!("{}.{}.json", prefix, kind.name()));
            let meta = json!({ "game": game.name(), "learner": kind.name(), "slot": a.slot, "env_steps": a.steps });
            ensure_parent(&path)?;
            learner.a2c.checkpoint(meta).save(&path)?;
            outputs.push(path);
        }
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    drop(w);
    println!("wrote reward log to {}", out.display());
    let paths: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    Ok(Outcome {
        manifest: manifest_for(&out),
        seeds: json!({ "seed": a.seed, "learner_init": derive_seed(a.seed, 0) }),
        inputs: Vec::new(),
        outputs: artifacts(&paths)?,
    })
}

pub(crate) fn rerun(a: &RerunArgs) -> Result<RunManifest> {
    let path = input_path(&a.manifest)?;
    let old = RunManifest::load(&path)?;
    let inv = Invocation::from_manifest(&old)?;
    for i in &old.inputs {
        let now = file_sha256(Path::new(&i.path))?;
        if now != i.sha256 {
            return Err(state_err!("input {} changed since the recorded run", i.path));
        }
    }
    let new = execute(&inv)?;
    let mut diffs = Vec::new();
    for o in &old.outputs {
        match new.outputs.iter().find(|n| n.path == o.path) {
            Some(n) if n.sha256 == o.sha256 => {}
            Some(_) => diffs.push(format!("{} differs", o.path)),
            None => diffs.push(format!("{} was not produced", o.path)),
        }
    }
    if !diffs.is_empty() {
        return Err(state_err!("rerun did not reproduce the recorded outputs: {}", diffs.join("; ")));
    }
    println!("reproduced {} artifacts", old.outputs.len());
    Ok(new)
}

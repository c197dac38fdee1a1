//! Command-line pipelines: collect data, train and evaluate models, run the
//! analyses and train learning agents. Every run writes a manifest that
//! `rerun` can replay.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::time::Instant;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Error, Result};
pub use manifest::{file_sha256, Artifact, RunManifest, DATA_DIR_VAR};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const GAMES: [&str; 5] = ["coopnav", "coin", "staghunt2", "staghunt", "staghunt4"];
const MODELS: [&str; 5] = ["rfm", "vain", "feedforward", "norelation", "mlplstm"];

#[derive(Debug, Parser)]
#[command(name = "rfm-lab", version, about = "Relational forward models for multi-agent gridworlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Play episodes with a fixed policy and write a dataset.
    Collect(CollectArgs),
    /// Train an action or return model on a dataset.
    Train(TrainArgs),
    /// Score a trained model on a dataset split.
    Eval(EvalArgs),
    /// Interpretability analyses; each writes CSV tables and a summary.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Train a learning agent next to scripted fellows and log its rewards.
    AgentTrain(AgentTrainArgs),
    /// Run a command again from its manifest and check the outputs match.
    Rerun(RerunArgs),
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Edge-norm influence tables from an action model.
    Edges(EdgesArgs),
    /// Teammate return marginal around stag captures.
    Return(ReturnArgs),
    /// Coin-collection curves from an agent-training log.
    Coins(CoinsArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CollectArgs {
    #[arg(long, value_parser = GAMES, required_unless_present = "config")]
    pub game: Option<String>,
    /// Training episodes.
    #[arg(long, default_value_t = 5000)]
    pub episodes: usize,
    /// Held-out episodes, collected after the training ones.
    #[arg(long, default_value_t = 500)]
    pub eval_episodes: usize,
    /// Episode i is played with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `scripted` or `checkpoint:PATH` (an agent saved by agent-train).
    #[arg(long, default_value = "scripted")]
    pub policy: String,
    /// Random-action probability of the scripted policy.
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    /// Dataset file to write.
    #[arg(long, required_unless_present = "config")]
    pub out: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// JSON file of flag values; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_parser = MODELS, required_unless_present = "config")]
    pub model: Option<String>,
    #[arg(long, value_parser = ["action", "return"], default_value = "action")]
    pub task: String,
    /// Dataset file; its training split is used.
    #[arg(long, required_unless_present = "config")]
    pub data: Option<String>,
    /// Total gradient steps, counting those of a resumed checkpoint.
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    /// Checkpoint file to write.
    #[arg(long, required_unless_present = "config")]
    pub out: Option<String>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<String>,
    /// Evaluate on the held-out split every this many steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 32)]
    pub latent: usize,
    #[arg(long, default_value_t = 64)]
    pub mlp_hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub lstm_hidden: usize,
    /// Training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "config")]
    pub checkpoint: Option<String>,
    #[arg(long, required_unless_present = "config")]
    pub data: Option<String>,
    #[arg(long, value_parser = ["eval", "train", "all"], default_value = "eval")]
    pub split: String,
    /// Metrics file to write (JSON).
    #[arg(long, required_unless_present = "config")]
    pub out: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EdgesArgs {
    /// Trained action model.
    #[arg(long, required_unless_present = "config")]
    pub checkpoint: Option<String>,
    #[arg(long, required_unless_present = "config")]
    pub data: Option<String>,
    #[arg(long, value_parser = ["eval", "train", "all"], default_value = "eval")]
    pub split: String,
    /// Directory for the CSV tables and summary.
    #[arg(long, required_unless_present = "config")]
    pub out_dir: Option<String>,
    /// Steps ahead over which displacement is measured.
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    /// Event alignment radius in steps.
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Permutation-test resamples.
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReturnArgs {
    /// Return model trained with pruned-graph mixing.
    #[arg(long, required_unless_present = "config")]
    pub checkpoint: Option<String>,
    #[arg(long, required_unless_present = "config")]
    pub data: Option<String>,
    #[arg(long, value_parser = ["eval", "train", "all"], default_value = "eval")]
    pub split: String,
    #[arg(long, required_unless_present = "config")]
    pub out_dir: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Steps averaged on each side of a capture.
    #[arg(long, default_value_t = 3)]
    pub span: usize,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CoinsArgs {
    /// CSV log written by agent-train on the coin game.
    #[arg(long, required_unless_present = "config")]
    pub log: Option<String>,
    #[arg(long, required_unless_present = "config")]
    pub out_dir: Option<String>,
    /// Moving-average width in episodes.
    #[arg(long, default_value_t = 50)]
    pub smooth: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AgentTrainArgs {
    #[arg(long, value_parser = ["baseline", "rfm-augmented", "both"], default_value = "both")]
    pub learner: String,
    #[arg(long, value_parser = GAMES, required_unless_present = "config")]
    pub game: Option<String>,
    /// Environment steps per learner.
    #[arg(long, default_value_t = 50_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV reward log to write.
    #[arg(long, required_unless_present = "config")]
    pub out: Option<String>,
    /// Agent slot of the learner; the others are scripted.
    #[arg(long, default_value_t = 0)]
    pub slot: usize,
    /// Random-action probability of the scripted fellows.
    #[arg(long, default_value_t = 0.05)]
    pub fellow_epsilon: f64,
    #[arg(long, default_value_t = 6)]
    pub conv_channels: usize,
    #[arg(long, default_value_t = 256)]
    pub mlp_hidden: usize,
    #[arg(long, default_value_t = 256)]
    pub lstm_hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Latent width of the on-board model.
    #[arg(long, default_value_t = 32)]
    pub rfm_latent: usize,
    #[arg(long, default_value_t = 64)]
    pub rfm_hidden: usize,
    /// What the on-board model predicts.
    #[arg(long, value_parser = ["next-action", "last-action"], default_value = "next-action")]
    pub rfm_target: String,
    /// Save each trained agent as `<prefix>.<learner>.json`.
    #[arg(long)]
    pub save_agents: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: String,
}

/// Fills flags not given on the command line from the `--config` file.
fn merge<T: Serialize + DeserializeOwned>(args: &T, matches: &ArgMatches, config: Option<&str>) -> Result<T> {
    let mut value = serde_json::to_value(args).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(path) = config {
        let path = manifest::input_path(path)?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| cfg_err!("config file {}: {}", path.display(), e))?;
        let obj = value.as_object_mut().expect("arguments serialize to an object");
        for (k, v) in file {
            let key = k.replace('-', "_");
            if !obj.contains_key(&key) {
                return Err(cfg_err!("config file {}: unknown key '{}'", path.display(), k));
            }
            if matches.value_source(&key) != Some(ValueSource::CommandLine) {
                obj.insert(key, v);
            }
        }
    }
    serde_json::from_value(value).map_err(|e| cfg_err!("invalid configuration: {}", e))
}

fn required<'a>(v: &'a Option<String>, flag: &str) -> Result<&'a str> {
    v.as_deref().ok_or_else(|| cfg_err!("missing required flag --{}", flag))
}

/// A parsed command with its effective arguments.
#[derive(Debug, Clone)]
pub enum Invocation {
    Collect(CollectArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    Edges(EdgesArgs),
    Return(ReturnArgs),
    Coins(CoinsArgs),
    AgentTrain(AgentTrainArgs),
    Rerun(RerunArgs),
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Collect(_) => "collect",
            Invocation::Train(_) => "train",
            Invocation::Eval(_) => "eval",
            Invocation::Edges(_) => "analyze edges",
            Invocation::Return(_) => "analyze return",
            Invocation::Coins(_) => "analyze coins",
            Invocation::AgentTrain(_) => "agent-train",
            Invocation::Rerun(_) => "rerun",
        }
    }

    fn config_value(&self) -> serde_json::Value {
        let v = match self {
            Invocation::Collect(a) => serde_json::to_value(a),
            Invocation::Train(a) => serde_json::to_value(a),
            Invocation::Eval(a) => serde_json::to_value(a),
            Invocation::Edges(a) => serde_json::to_value(a),
            Invocation::Return(a) => serde_json::to_value(a),
            Invocation::Coins(a) => serde_json::to_value(a),
            Invocation::AgentTrain(a) => serde_json::to_value(a),
            Invocation::Rerun(a) => serde_json::to_value(a),
        };
        v.expect("arguments serialize")
    }

    /// Rebuilds an invocation from a manifest's command and config.
    pub fn from_manifest(m: &RunManifest) -> Result<Self> {
        fn de<T: DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
            serde_json::from_value(v.clone()).map_err(|e| cfg_err!("manifest config: {}", e))
        }
        let c = &m.config;
        Ok(match m.command.as_str() {
            "collect" => Invocation::Collect(de(c)?),
            "train" => Invocation::Train(de(c)?),
            "eval" => Invocation::Eval(de(c)?),
            "analyze edges" => Invocation::Edges(de(c)?),
            "analyze return" => Invocation::Return(de(c)?),
            "analyze coins" => Invocation::Coins(de(c)?),
            "agent-train" => Invocation::AgentTrain(de(c)?),
            other => return Err(cfg_err!("manifest names unknown command '{}'", other)),
        })
    }
}

fn resolve(cmd: Command, m: &ArgMatches) -> Result<Invocation> {
    let (_, sub) = m.subcommand().expect("a subcommand is required");
    Ok(match cmd {
        Command::Collect(a) => Invocation::Collect(merge(&a, sub, a.config.as_deref())?),
        Command::Train(a) => Invocation::Train(merge(&a, sub, a.config.as_deref())?),
        Command::Eval(a) => Invocation::Eval(merge(&a, sub, a.config.as_deref())?),
        Command::AgentTrain(a) => Invocation::AgentTrain(merge(&a, sub, a.config.as_deref())?),
        Command::Rerun(a) => Invocation::Rerun(a),
        Command::Analyze(kind) => {
            let (_, leaf) = sub.subcommand().expect("an analysis is required");
            match kind {
                AnalyzeCommand::Edges(a) => Invocation::Edges(merge(&a, leaf, a.config.as_deref())?),
                AnalyzeCommand::Return(a) => Invocation::Return(merge(&a, leaf, a.config.as_deref())?),
                AnalyzeCommand::Coins(a) => Invocation::Coins(merge(&a, leaf, a.config.as_deref())?),
            }
        }
    })
}

/// What a command produced, for its manifest.
#[derive(Debug, Default)]
pub(crate) struct Outcome {
    pub manifest: std::path::PathBuf,
    pub seeds: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

/// Executes an invocation and writes its manifest; returns the manifest.
pub fn execute(inv: &Invocation) -> Result<RunManifest> {
    if let Invocation::Rerun(a) = inv {
        return commands::rerun(a);
    }
    let start = Instant::now();
    let out = match inv {
        Invocation::Collect(a) => commands::collect(a)?,
        Invocation::Train(a) => commands::train(a)?,
        Invocation::Eval(a) => commands::eval(a)?,
        Invocation::Edges(a) => commands::analyze_edges(a)?,
        Invocation::Return(a) => commands::analyze_return(a)?,
        Invocation::Coins(a) => commands::analyze_coins(a)?,
        Invocation::AgentTrain(a) => commands::agent_train(a)?,
        Invocation::Rerun(_) => unreachable!(),
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: inv.name().to_string(),
        config: inv.config_value(),
        seeds: out.seeds,
        inputs: out.inputs,
        outputs: out.outputs,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.save(&out.manifest)?;
    println!("manifest: {}", out.manifest.display());
    Ok(manifest)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match resolve(cli.command, &matches).and_then(|inv| execute(&inv)) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}

pub fn main() -> ! {
    std::process::exit(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_file_fills_unset_flags_only() {
        let dir = std::env::temp_dir().join(format!("rfm-lab-merge-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("c.json");
        std::fs::write(&cfg, r#"{"game": "coin", "episodes": 7, "eval-episodes": 3, "seed": 9}"#).unwrap();
        let argv = ["rfm-lab", "collect", "--out", "x", "--seed", "4", "--config", cfg.to_str().unwrap()];
        let m = Cli::command().try_get_matches_from(argv).unwrap();
        let cli = Cli::from_arg_matches(&m).unwrap();
        let Invocation::Collect(a) = resolve(cli.command, &m).unwrap() else { panic!() };
        assert_eq!(a.game.as_deref(), Some("coin"));
        assert_eq!((a.episodes, a.eval_episodes, a.seed), (7, 3, 4));
        assert_eq!(a.policy, "scripted");

        std::fs::write(&cfg, r#"{"gmae": "coin"}"#).unwrap();
        let m = Cli::command().try_get_matches_from(argv).unwrap();
        let cli = Cli::from_arg_matches(&m).unwrap();
        let err = resolve(cli.command, &m).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn every_subcommand_has_help() {
        for path in [
            vec!["collect"],
            vec!["train"],
            vec!["eval"],
            vec!["analyze", "edges"],
            vec!["analyze", "return"],
            vec!["analyze", "coins"],
            vec!["agent-train"],
            vec!["rerun"],
        ] {
            let mut argv = vec!["rfm-lab"];
            argv.extend(path);
            argv.push("--help");
            let err = Cli::command().try_get_matches_from(argv).unwrap_err();
            assert_eq!(err.kind(), clap::error::ErrorKind::DisplayHelp);
        }
    }
}

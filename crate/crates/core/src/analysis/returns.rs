use serde::{Deserialize, Serialize};

use super::edges::{window, EventAlignment, MIN_EVENTS};
use super::stats::{compare_paired, Comparison};
use crate::data::{parallel_map, Episode};
use crate::envs::EventKind;
use crate::error::{cfg_err, Result};
use crate::graph::{Model, Task};
use crate::tensor::Tape;
use crate::training::unroll_batch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalPoint {
    pub r_full: f64,
    pub r_pruned: f64,
    pub delta: f64,
}

/// Return estimates with and without agent-to-agent edges, `[episode][step][agent]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarginalSeries {
    pub episodes: Vec<Vec<Vec<MarginalPoint>>>,
}

impl MarginalSeries {
    pub fn deltas(&self, episode: usize, agent: usize) -> Vec<Option<f64>> {
        self.episodes[episode].iter().map(|row| Some(row[agent].delta)).collect()
    }
}

/// Deltas around stag captures for the capturing agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureMarginal {
    pub alignment: EventAlignment,
    /// Mean over offsets -k..-1 versus +1..+k.
    pub span: usize,
    pub before_after: Option<Comparison>,
    /// Offsets -1 versus +1.
    pub one_step: Option<Comparison>,
}

fn unroll_returns(model: &Model, ep: &Episode, pruned: bool) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let outs = unroll_batch(&tape, model, &[ep], &[pruned])?;
    Ok(outs.iter().map(|&o| tape.value(o).data().to_vec()).collect())
}

/// Unrolls every episode on full and on pruned graphs. The model must have
/// been trained on a mix of both, otherwise pruned inputs are out of
/// distribution.
pub fn return_marginal(model: &Model, episodes: &[&Episode], trained_with_mixing: bool, workers: usize) -> Result<MarginalSeries> {
    if model.config.task != Task::Return {
        return Err(cfg_err!("return marginal needs a return model, got a {:?} model", model.config.task));
    }
    if !trained_with_mixing {
        return Err(cfg_err!("return model was not trained with pruned-graph mixing"));
    }
    let episodes = parallel_map(episodes.len(), workers, |i| {
        let full = unroll_returns(model, episodes[i], false)?;
        let pruned = unroll_returns(model, episodes[i], true)?;
        Ok(full
            .iter()
            .zip(&pruned)
            .map(|(f, p)| {
                f.iter()
                    .zip(p)
                    .map(|(&r_full, &r_pruned)| MarginalPoint {
                        r_full,
                        r_pruned,
                        delta: r_full - r_pruned,
                    })
                    .collect()
            })
            .collect())
    })?;
    Ok(MarginalSeries { episodes })
}

fn span_mean(w: &[Option<f64>], idx: impl Iterator<Item = usize>) -> Option<f64> {
    let xs: Vec<f64> = idx.filter_map(|i| w[i]).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Aligns each capturing agent's delta on its stag captures and compares
/// the mean of the `span` steps before with the `span` steps after.
pub fn capture_marginal(
    series: &MarginalSeries,
    episodes: &[&Episode],
    radius: usize,
    span: usize,
    n_resamples: usize,
    seed: u64,
) -> CaptureMarginal {
    let radius = radius.max(span);
    let mut windows = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        for step in &ep.steps {
            for e in step.events.iter().filter(|e| e.kind == EventKind::StagCaptured) {
                for &a in &e.agents {
                    windows.push(window(&series.deltas(i, a), e.step, radius));
                }
            }
        }
    }
    let alignment = EventAlignment {
        kind: EventKind::StagCaptured,
        radius,
        empty: windows.is_empty(),
        windows,
    };
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for w in &alignment.windows {
        let b = span_mean(w, radius - span..radius);
        let a = span_mean(w, radius + 1..=radius + span);
        if let (Some(b), Some(a)) = (b, a) {
            before.push(b);
            after.push(a);
        }
    }
    let (b1, a1) = alignment.before_after(1);
    CaptureMarginal {
        span,
        before_after: compare_paired(&before, &after, n_resamples, seed, MIN_EVENTS),
        one_step: compare_paired(&b1, &a1, n_resamples, seed.wrapping_add(1), MIN_EVENTS),
        alignment,
    }
}

use serde::{Deserialize, Serialize};

use crate::envs::{CoinRoles, Event, EventKind};
use crate::error::{Error, Result};

/// Coins one agent collected in an episode, by color role: its revealed
/// good color, the other good color, and the bad color.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoinCounts {
    pub revealed: usize,
    pub unrevealed: usize,
    pub bad: usize,
}

pub fn coin_counts(roles: &CoinRoles, agent: usize, events: &[Event], color_of: impl Fn(usize) -> Option<usize>) -> CoinCounts {
    let mut c = CoinCounts::default();
    for e in events.iter().filter(|e| e.kind == EventKind::CoinCollected && e.agents.contains(&agent)) {
        let Some(color) = e.entity.and_then(&color_of) else { continue };
        if color == roles.bad {
            c.bad += 1;
        } else if color == roles.revealed[agent] {
            c.revealed += 1;
        } else {
            c.unrevealed += 1;
        }
    }
    c
}

/// One line of an agent-training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub episode: usize,
    /// Environment steps taken so far, this episode included.
    pub env_steps: u64,
    pub learner: String,
    /// Episode return of the learning agent.
    #[serde(rename = "return")]
    pub episode_return: f64,
    /// Mean on-board model loss over the episode's updates.
    #[serde(default)]
    pub rfm_loss: Option<f64>,
    #[serde(default)]
    pub policy_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coins: Option<CoinCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoinCurvePoint {
    pub learner: String,
    pub episode: usize,
    pub env_steps: u64,
    pub revealed: f64,
    pub unrevealed: f64,
    pub bad: f64,
    /// `unrevealed - bad`.
    pub gap: f64,
}

/// Trailing moving averages of the per-episode coin counts over `smooth`
/// episodes of the same learner. Records without coin counts are skipped.
pub fn coin_analysis(records: &[RunRecord], smooth: usize) -> Vec<CoinCurvePoint> {
    let mut learners: Vec<&str> = Vec::new();
    for r in records {
        if !learners.contains(&r.learner.as_str()) {
            learners.push(&r.learner);
        }
    }
    learners
        .into_iter()
        .flat_map(|l| {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.learner == l).collect();
            curve(&mine, smooth)
        })
        .collect()
}

fn curve(records: &[&RunRecord], smooth: usize) -> Vec<CoinCurvePoint> {
    let rows: Vec<(&RunRecord, CoinCounts)> = records.iter().filter_map(|r| Some((*r, r.coins?))).collect();
    let smooth = smooth.max(1);
    let mut out = Vec::with_capacity(rows.len());
    let mut sums = [0.0; 3];
    for (i, (rec, c)) in rows.iter().enumerate() {
        sums[0] += c.revealed as f64;
        sums[1] += c.unrevealed as f64;
        sums[2] += c.bad as f64;
        if i >= smooth {
            let old = rows[i - smooth].1;
            sums[0] -= old.revealed as f64;
            sums[1] -= old.unrevealed as f64;
            sums[2] -= old.bad as f64;
        }
        let n = (i + 1).min(smooth) as f64;
        out.push(CoinCurvePoint {
            learner: rec.learner.clone(),
            episode: rec.episode,
            env_steps: rec.env_steps,
            revealed: sums[0] / n,
            unrevealed: sums[1] / n,
            bad: sums[2] / n,
            gap: (sums[1] - sums[2]) / n,
        });
    }
    out
}

/// Mean U-B gap over the records whose step count falls in `[from, to)`.
pub fn mean_gap(records: &[RunRecord], from: u64, to: u64) -> Option<f64> {
    let gaps: Vec<f64> = records
        .iter()
        .filter(|r| r.env_steps >= from && r.env_steps < to)
        .filter_map(|r| r.coins.map(|c| c.unrevealed as f64 - c.bad as f64))
        .collect();
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}

pub const RUN_LOG_HEADER: &str = "learner,episode,env_steps,return,rfm_loss,policy_loss,revealed,unrevealed,bad";

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One CSV line of an agent-training log; missing values are empty.
pub fn run_log_line(r: &RunRecord) -> String {
    let c = r.coins;
    [
        r.learner.clone(),
        r.episode.to_string(),
        r.env_steps.to_string(),
        r.episode_return.to_string(),
        opt(r.rfm_loss),
        opt(r.policy_loss),
        opt(c.map(|c| c.revealed)),
        opt(c.map(|c| c.unrevealed)),
        opt(c.map(|c| c.bad)),
    ]
    .join(",")
}

/// Parses a log written with [`RUN_LOG_HEADER`] and [`run_log_line`].
pub fn parse_run_log(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RUN_LOG_HEADER => {}
        _ => return Err(Error::Format(format!("run log must start with '{}'", RUN_LOG_HEADER))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Parse { line: i + 1, message: m };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(format!("expected 9 fields, found {}", f.len())));
        }
        fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<Option<T>, String> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| format!("bad number '{}'", s))
        }
        let req = |s: &str| num::<f64>(s).and_then(|v| v.ok_or_else(|| "missing value".to_string()));
        let counts = (num::<usize>(f[6]).map_err(bad)?, num::<usize>(f[7]).map_err(bad)?, num::<usize>(f[8]).map_err(bad)?);
        out.push(RunRecord {
            learner: f[0].to_string(),
            episode: num(f[1]).map_err(bad)?.ok_or_else(|| bad("missing episode".into()))?,
            env_steps: num(f[2]).map_err(bad)?.ok_or_else(|| bad("missing env_steps".into()))?,
            episode_return: req(f[3]).map_err(bad)?,
            rfm_loss: num(f[4]).map_err(bad)?,
            policy_loss: num(f[5]).map_err(bad)?,
            coins: match counts {
                (Some(revealed), Some(unrevealed), Some(bad)) => Some(CoinCounts { revealed, unrevealed, bad }),
                (None, None, None) => None,
                _ => return Err(bad("coin counts must be all present or all empty".into())),
            },
        });
    }
    Ok(out)
}

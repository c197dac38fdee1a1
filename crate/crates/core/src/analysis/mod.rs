//! Interpretability analyses over trained models and datasets: edge-norm
//! influence, return marginals, coin-collection curves, and the statistics
//! they rely on. Every analysis writes plain CSV.

mod coins;
mod edges;
mod returns;
pub mod stats;

pub use coins::{
    coin_analysis, coin_counts, mean_gap, parse_run_log, run_log_line, CoinCounts, CoinCurvePoint, RunRecord, RUN_LOG_HEADER,
};
pub use edges::{
    align_on_events, available_count, displacement_by_rank, entity_vertex, extract_edge_norms, is_available,
    sender_series, stag_state_analysis, teammate_edge_tests, teammate_series, vertex_positions, window, EdgeNormSeries,
    EdgeRecord, EpisodeEdgeNorms, EventAlignment, OffsetMean, RankDisplacement, Signal, StagStateAnalysis,
    TeammateTests, MIN_EVENTS,
};
pub use returns::{capture_marginal, return_marginal, CaptureMarginal, MarginalPoint, MarginalSeries};
pub use stats::{Comparison, Correlation};

/// Alignment window radius, in steps.
pub const WINDOW: usize = 5;
/// Steps averaged on each side of a capture for the return marginal.
pub const CAPTURE_SPAN: usize = 3;

fn csv(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn offset_rows<'a>(series: &'a str, a: &'a EventAlignment) -> impl Iterator<Item = Vec<String>> + 'a {
    a.mean_by_offset().into_iter().map(move |m| {
        vec![series.into(), m.offset.to_string(), m.mean.to_string(), m.stderr.to_string(), m.n.to_string()]
    })
}

/// `rank,mean_displacement,stderr,n`
pub fn fig3_top_csv(rows: &[RankDisplacement]) -> String {
    csv(
        "rank,mean_displacement,stderr,n",
        rows.iter().map(|r| {
            vec![r.rank.to_string(), r.mean_displacement.to_string(), r.stderr.to_string(), r.n.to_string()]
        }),
    )
}

/// `series,offset,mean,stderr,n`; the two `state_*` rows hold the means
/// over all steps grouped by stag state and leave `offset` empty.
pub fn fig3_middle_csv(a: &StagStateAnalysis) -> String {
    let states = [
        ("state_available", a.mean_available, a.stderr_available, a.n_available),
        ("state_unavailable", a.mean_unavailable, a.stderr_unavailable, a.n_unavailable),
    ];
    csv(
        "series,offset,mean,stderr,n",
        offset_rows("became_available", &a.became_available)
            .chain(offset_rows("became_unavailable", &a.became_unavailable))
            .chain(states.iter().map(|(s, m, se, n)| vec![s.to_string(), String::new(), m.to_string(), se.to_string(), n.to_string()])),
    )
}

/// `series,offset,mean,stderr,n` for teammate edge norms around stag
/// captures and apple pickups.
pub fn fig3_bottom_csv(t: &TeammateTests) -> String {
    csv(
        "series,offset,mean,stderr,n",
        offset_rows("stag_captured", &t.captures).chain(offset_rows("apple_collected", &t.apples)),
    )
}

/// `offset,mean_delta,stderr,n`
pub fn fig4_csv(c: &CaptureMarginal) -> String {
    csv(
        "offset,mean_delta,stderr,n",
        c.alignment
            .mean_by_offset()
            .into_iter()
            .map(|m| vec![m.offset.to_string(), m.mean.to_string(), m.stderr.to_string(), m.n.to_string()]),
    )
}

/// `learner,episode,env_steps,revealed,unrevealed,bad,gap`
pub fn fig6_csv(points: &[CoinCurvePoint]) -> String {
    csv(
        "learner,episode,env_steps,revealed,unrevealed,bad,gap",
        points.iter().map(|p| {
            vec![
                p.learner.clone(),
                p.episode.to_string(),
                p.env_steps.to_string(),
                p.revealed.to_string(),
                p.unrevealed.to_string(),
                p.bad.to_string(),
                p.gap.to_string(),
            ]
        }),
    )
}

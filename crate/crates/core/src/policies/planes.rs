use crate::envs::{Action, Pos};
use crate::error::{dim_err, idx_err, Result};

/// Egocentric planes showing where fellow agents are expected to move.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPlanes {
    pub n_planes: usize,
    pub height: usize,
    pub width: usize,
    /// `[plane][row][col]`, same frame as the host's observation.
    pub data: Vec<f64>,
}

impl PredictionPlanes {
    pub fn at(&self, plane: usize, row: usize, col: usize) -> f64 {
        self.data[(plane * self.height + row) * self.width + col]
    }

    pub fn plane(&self, plane: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[plane * n..(plane + 1) * n]
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmaxes one logit vector per fellow agent and renders the result.
pub fn render_prediction_planes(
    logits: &[Vec<f64>],
    positions: &[Pos],
    host: Pos,
    width: i32,
    height: i32,
) -> Result<PredictionPlanes> {
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|l| {
            if l.len() != Action::COUNT {
                Err(dim_err!("expected {} logits, got {}", Action::COUNT, l.len()))
            } else {
                Ok(softmax(l))
            }
        })
        .collect::<Result<_>>()?;
    render_probability_planes(&probs, positions, host, width, height)
}

/// Writes each move's probability at the cell it leads to. A move into a
/// wall leaves the agent in place, so its mass lands on the current cell.
pub fn render_probability_planes(
    probs: &[Vec<f64>],
    positions: &[Pos],
    host: Pos,
    width: i32,
    height: i32,
) -> Result<PredictionPlanes> {
    if probs.len() != positions.len() {
        return Err(dim_err!("{} distributions for {} agents", probs.len(), positions.len()));
    }
    let inside = |p: Pos| p.x >= 0 && p.y >= 0 && p.x < width && p.y < height;
    if !inside(host) {
        return Err(idx_err!("host at ({}, {}) outside {}x{}", host.x, host.y, width, height));
    }
    let (w, h) = ((2 * width - 1) as usize, (2 * height - 1) as usize);
    let mut data = vec![0.0; probs.len() * w * h];
    for (k, (p, &pos)) in probs.iter().zip(positions).enumerate() {
        if p.len() != Action::COUNT {
            return Err(dim_err!("expected {} probabilities, got {}", Action::COUNT, p.len()));
        }
        if !inside(pos) {
            return Err(idx_err!("agent at ({}, {}) outside {}x{}", pos.x, pos.y, width, height));
        }
        for a in Action::ALL {
            let mut t = pos.offset(a.delta());
            if !inside(t) {
                t = pos;
            }
            let col = (t.x - host.x + width - 1) as usize;
            let row = (t.y - host.y + height - 1) as usize;
            data[(k * h + row) * w + col] += p[a.index()];
        }
    }
    Ok(PredictionPlanes {
        n_planes: probs.len(),
        height: h,
        width: w,
        data,
    })
}

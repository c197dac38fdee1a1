//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever runs forward passes on constants, so it does
//! not share any code path with [`Tape::backward`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Worst disagreement found by [`check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
}

pub const DEFAULT_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

/// Compares backward-pass gradients of the scalar built by `f` with central
/// finite differences, for every element of every input.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars = xs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        n_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let an = a.data()[j];
            let abs = (an - numeric).abs();
            let rel = abs / an.abs().max(numeric.abs()).max(FLOOR);
            worst.max_abs_error = worst.max_abs_error.max(abs);
            worst.max_rel_error = worst.max_rel_error.max(rel);
            worst.n_checked += 1;
        }
    }
    Ok(worst)
}

/// Like [`check`], but differentiates with respect to the parameters in
/// `store`. `stride` > 1 checks every `stride`-th coordinate only.
pub fn check_params<F>(store: &ParamStore, step: f64, stride: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let out = f(&tape, store)?;
    let grads = tape.backward(out)?.into_params();

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        n_checked: 0,
    };
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut counter = 0usize;
    for name in &names {
        let base = store.get(name)?.clone();
        let zeros = Tensor::zeros(base.shape());
        let analytic = grads.get(name).unwrap_or(&zeros);
        for j in 0..base.len() {
            counter += 1;
            if (counter - 1) % stride.max(1) != 0 {
                continue;
            }
            let mut probe = base.clone();
            probe.data_mut()[j] = base.data()[j] + step;
            work.set(name, probe.clone())?;
            let eval = |store: &ParamStore| -> Result<f64> {
                let t = Tape::new();
                let v = f(&t, store)?;
                Ok(t.value(v).item())
            };
            let plus = eval(&work)?;
            probe.data_mut()[j] = base.data()[j] - step;
            work.set(name, probe)?;
            let minus = eval(&work)?;
            work.set(name, base.clone())?;
            let numeric = (plus - minus) / (2.0 * step);
            let an = analytic.data()[j];
            let abs = (an - numeric).abs();
            let rel = abs / an.abs().max(numeric.abs()).max(FLOOR);
            worst.max_abs_error = worst.max_abs_error.max(abs);
            worst.max_rel_error = worst.max_rel_error.max(rel);
            worst.n_checked += 1;
        }
    }
    Ok(worst)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// One finite-difference check per tape primitive on random inputs drawn
/// from `seed`.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&Tape, &[Var]) -> Result<Var>| {
        out.push((name, check(&inputs, DEFAULT_STEP, f)));
    };
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    run("matmul", vec![a.clone(), b.clone()], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.sum(t.mul(y, y)?)
    });
    let c = random(&mut rng, &[3, 4]);
    run("add", vec![a.clone(), c.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        t.sum(t.mul(y, y)?)
    });
    run("sub", vec![a.clone(), c.clone()], &|t, v| {
        let y = t.sub(v[0], v[1])?;
        t.sum(t.mul(y, y)?)
    });
    run("mul", vec![a.clone(), c.clone()], &|t, v| t.sum(t.mul(v[0], v[1])?));
    run("scalar_mul", vec![a.clone(), Tensor::scalar(0.7)], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        t.sum(t.mul(y, y)?)
    });
    run("add_bias", vec![a.clone(), random(&mut rng, &[4])], &|t, v| {
        let y = t.add_bias(v[0], v[1])?;
        t.sum(t.mul(y, y)?)
    });
    run("relu", vec![a.clone()], &|t, v| {
        let y = t.relu(v[0])?;
        t.sum(t.mul(y, y)?)
    });
    run("sigmoid", vec![a.clone()], &|t, v| t.sum(t.sigmoid(v[0])?));
    run("tanh", vec![a.clone()], &|t, v| {
        let y = t.tanh(v[0])?;
        t.sum(t.mul(y, y)?)
    });
    run("exp", vec![a.clone()], &|t, v| t.sum(t.exp(v[0])?));
    run("affine", vec![a.clone()], &|t, v| {
        let y = t.affine(v[0], -1.5, 0.25)?;
        t.sum(t.mul(y, y)?)
    });
    run("concat_slice", vec![a.clone(), c.clone()], &|t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        let s = t.slice_cols(y, 2, 7)?;
        t.sum(t.mul(s, s)?)
    });
    let idx: Arc<[usize]> = vec![2, 0, 0, 1, 2].into();
    run("gather_rows", vec![a.clone()], &|t, v| {
        let y = t.gather_rows(v[0], idx.clone())?;
        t.sum(t.mul(y, y)?)
    });
    run("segment_sum", vec![random(&mut rng, &[6, 3])], &|t, v| {
        let y = t.segment_sum_ids(v[0], &[1, 1, 0, 3, 1, 0], 4)?;
        t.sum(t.mul(y, y)?)
    });
    run("reshape_row_sum", vec![a.clone()], &|t, v| {
        let y = t.row_sum(t.reshape(v[0], &[2, 6])?)?;
        t.sum(t.mul(y, y)?)
    });
    run("mul_col", vec![a.clone(), random(&mut rng, &[3, 1])], &|t, v| {
        let y = t.mul_col(v[0], v[1])?;
        t.sum(t.mul(y, y)?)
    });
    let picks: Arc<[usize]> = vec![3, 0, 1].into();
    run("log_softmax_pick", vec![a.clone()], &|t, v| {
        let y = t.log_softmax(v[0])?;
        let p = t.pick(y, picks.clone())?;
        let e = t.exp(y)?;
        t.add(t.sum(p)?, t.sum(t.mul(e, y)?)?)
    });
    run("cross_entropy", vec![random(&mut rng, &[4, 5])], &|t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 2]));
    let target = random(&mut rng, &[3, 4]);
    run("mse", vec![a.clone()], &|t, v| t.mse(v[0], &target));
    run("conv2d", vec![random(&mut rng, &[2, 2, 4, 4]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3])], &|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]))?;
        t.sum(t.mul(y, y)?)
    });
    out.into_iter().map(|(n, r)| r.map(|r| (n, r))).collect()
}


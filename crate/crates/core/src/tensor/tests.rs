use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, DEFAULT_STEP};
use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), rows[0].len()).unwrap()
}

#[test]
fn matmul_identity_and_zero() {
    let tape = Tape::new();
    let i = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    let v = tape.constant(t2(&[&[3.0], &[4.0]])).unwrap();
    let out = tape.matmul(i, v).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

    let a = tape.constant(t2(&[&[2.0]])).unwrap();
    let z = tape.constant(t2(&[&[0.0]])).unwrap();
    assert_eq!(tape.value(tape.matmul(a, z).unwrap()).data(), &[0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{}", msg);
}

#[test]
fn matmul_gradient_is_column_sums_of_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let tape = Tape::new();
    let va = tape.leaf(a.clone()).unwrap();
    let vb = tape.constant(b.clone()).unwrap();
    let loss = tape.sum(tape.matmul(va, vb).unwrap()).unwrap();
    let g = tape.backward(loss).unwrap();
    let ga = g.get(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected = b.row(k).iter().sum::<f64>();
            assert!((ga.data()[i * 4 + k] - expected).abs() < 1e-12);
        }
    }
    let r = check(&[a, b], DEFAULT_STEP, |t, v| t.sum(t.matmul(v[0], v[1])?)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{:?}", r);
}

#[test]
fn elementwise_definitions() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
    assert_eq!(tape.value(tape.relu(x).unwrap()).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0)).unwrap();
    assert_eq!(tape.value(tape.sigmoid(z).unwrap()).item(), 0.5);

    let tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(0.0)).unwrap();
    let g = tape.backward(tape.tanh(z).unwrap()).unwrap();
    assert_eq!(g.get(z).unwrap().item(), 1.0);
    let r = check(&[Tensor::scalar(0.0)], DEFAULT_STEP, |t, v| t.tanh(v[0])).unwrap();
    assert!((r.max_abs_error) < 1e-9);
}

#[test]
fn incompatible_elementwise_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
    assert!(matches!(tape.mul(a, b), Err(Error::Dimension(_))));
    let s = tape.constant(Tensor::scalar(2.0)).unwrap();
    assert_eq!(tape.value(tape.mul(a, s).unwrap()).shape(), &[2, 2]);
}

#[test]
fn segment_sum_examples() {
    let tape = Tape::new();
    let v = tape.constant(t2(&[&[1.0], &[2.0], &[3.0]])).unwrap();
    let out = tape.segment_sum_ids(v, &[0, 0, 1], 2).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 3.0]);

    let v = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let out = tape.segment_sum_ids(v, &[1, 1], 3).unwrap();
    assert_eq!(tape.value(out).data(), &[0.0, 0.0, 4.0, 6.0, 0.0, 0.0]);

    assert!(matches!(tape.segment_sum_ids(v, &[0, 3], 3), Err(Error::Index(_))));
}

#[test]
fn segment_sum_gradient_is_all_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[5, 3]);
    let tape = Tape::new();
    let v = tape.leaf(x.clone()).unwrap();
    let out = tape.segment_sum_ids(v, &[2, 0, 2, 1, 0], 4).unwrap();
    let g = tape.backward(tape.sum(out).unwrap()).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));
    let r = check(&[x], DEFAULT_STEP, |t, v| t.sum(t.segment_sum_ids(v[0], &[2, 0, 2, 1, 0], 4)?)).unwrap();
    assert!(r.max_rel_error < 1e-4);
}

fn naive_conv(input: &Tensor, kernel: &Tensor) -> Vec<f64> {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = kernel.shape()[0];
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for ci in 0..c_in {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let kv = kernel.data()[((co * c_in + ci) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize];
                            s += kv * input.data()[(ci * h + yy as usize) * w + xx as usize];
                        }
                    }
                }
                out[(co * h + y as usize) * w + x as usize] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_zero_identity_and_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random(&mut rng, &[1, 4, 4]);
    let tape = Tape::new();
    let x = tape.constant(input.clone()).unwrap();

    let zero = tape.constant(Tensor::zeros(&[2, 1, 3, 3])).unwrap();
    assert!(tape.value(tape.conv2d(x, zero, None).unwrap()).data().iter().all(|v| *v == 0.0));

    let mut id = Tensor::zeros(&[1, 1, 3, 3]);
    id.data_mut()[4] = 1.0;
    let idv = tape.constant(id).unwrap();
    assert_eq!(tape.value(tape.conv2d(x, idv, None).unwrap()).data(), input.data());

    let kernel = random(&mut rng, &[3, 1, 3, 3]);
    let kv = tape.constant(kernel.clone()).unwrap();
    let out = tape.value(tape.conv2d(x, kv, None).unwrap());
    assert_eq!(out.shape(), &[3, 4, 4]);
    for (a, b) in out.data().iter().zip(naive_conv(&input, &kernel)) {
        assert!((a - b).abs() < 1e-12);
    }

    let bad = tape.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
    assert!(matches!(tape.conv2d(x, bad, None), Err(Error::Dimension(_))));
}

#[test]
fn losses_examples() {
    let tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[3, 5])).unwrap();
    let ce = tape.softmax_cross_entropy(logits, &[0, 3, 4]).unwrap();
    assert!((tape.value(ce).item() - 5f64.ln()).abs() < 1e-12);
    assert!(matches!(tape.softmax_cross_entropy(logits, &[0, 5, 1]), Err(Error::Index(_))));

    let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
    let p = tape.constant(x.clone()).unwrap();
    assert_eq!(tape.value(tape.mse(p, &x).unwrap()).item(), 0.0);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_one_hot() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&mut rng, &[4, 5]);
    let labels = [1, 0, 4, 2];
    let tape = Tape::new();
    let l = tape.leaf(logits.clone()).unwrap();
    let g = tape.backward(tape.softmax_cross_entropy(l, &labels).unwrap()).unwrap();
    let gl = g.get(l).unwrap();
    for r in 0..4 {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..5 {
            let onehot = if c == labels[r] { 1.0 } else { 0.0 };
            let expected = (row[c].exp() / z - onehot) / 4.0;
            assert!((gl.data()[r * 5 + c] - expected).abs() < 1e-12);
        }
    }
    let r = check(&[logits], DEFAULT_STEP, |t, v| t.softmax_cross_entropy(v[0], &labels)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{:?}", r);
}

#[test]
fn every_primitive_passes_finite_differences() {
    for seed in 0..3 {
        for (name, r) in gradcheck::primitive_suite(seed).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{} seed {}: {:?}", name, seed, r);
        }
    }
}

#[test]
fn operations_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&mut rng, &[3, 3]);
    let tape = Tape::new();
    let va = tape.leaf(a.clone()).unwrap();
    let y = tape.relu(tape.matmul(va, va).unwrap()).unwrap();
    let _ = tape.backward(tape.sum(y).unwrap()).unwrap();
    assert_eq!(*tape.value(va), a);
}

#[test]
fn non_finite_values_are_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1000.0)).unwrap();
    assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
}

#[test]
fn adam_runs_are_bit_identical() {
    fn run() -> String {
        let mut store = ParamStore::new(17);
        store.add("w", &[3, 2], Init::GlorotUniform).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]], 3).unwrap();
        for _ in 0..100 {
            let tape = Tape::new();
            let w = tape.param(&store, "w").unwrap();
            let y = tape.matmul(tape.constant(x.clone()).unwrap(), w).unwrap();
            let loss = tape.softmax_cross_entropy(y, &[1, 0]).unwrap();
            let g = tape.backward(loss).unwrap();
            opt.step(&mut store, g.params()).unwrap();
        }
        store.digest()
    }
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn segment_sum_is_linear(
        a in proptest::collection::vec(-10.0f64..10.0, 12),
        b in proptest::collection::vec(-10.0f64..10.0, 12),
        ids in proptest::collection::vec(0usize..4, 6),
    ) {
        let tape = Tape::new();
        let ta = tape.constant(Tensor::new(vec![6, 2], a).unwrap()).unwrap();
        let tb = tape.constant(Tensor::new(vec![6, 2], b).unwrap()).unwrap();
        let lhs = tape.segment_sum_ids(tape.add(ta, tb).unwrap(), &ids, 4).unwrap();
        let rhs = tape.add(
            tape.segment_sum_ids(ta, &ids, 4).unwrap(),
            tape.segment_sum_ids(tb, &ids, 4).unwrap(),
        ).unwrap();
        for (x, y) in tape.value(lhs).data().iter().zip(tape.value(rhs).data()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn segment_sum_ignores_row_order(
        vals in proptest::collection::vec(-1e3f64..1e3, 8),
        ids in proptest::collection::vec(0usize..3, 8),
        rot in 0usize..8,
    ) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![8, 1], vals.clone()).unwrap()).unwrap();
        let mut rv = vals.clone();
        let mut rids = ids.clone();
        rv.rotate_left(rot);
        rids.rotate_left(rot);
        let xr = tape.constant(Tensor::new(vec![8, 1], rv).unwrap()).unwrap();
        let a = tape.value(tape.segment_sum_ids(x, &ids, 3).unwrap());
        let b = tape.value(tape.segment_sum_ids(xr, &rids, 3).unwrap());
        prop_assert_eq!(a.data(), b.data());
    }
}

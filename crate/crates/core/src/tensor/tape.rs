use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{self, col2im3_acc, gemm, gemm_acc, gemm_nt_acc, gemm_tn_acc, im2col3};
use super::{ParamStore, Tensor};
use crate::error::{dim_err, idx_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Segment assignment for [`Tape::segment_sum`], with the members of each
/// segment precomputed so repeated aggregations over one topology are cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    ids: Vec<usize>,
    num: usize,
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Segments {
    pub fn new(ids: Vec<usize>, num: usize) -> Result<Arc<Self>> {
        let mut counts = vec![0usize; num + 1];
        for (row, &id) in ids.iter().enumerate() {
            if id >= num {
                return Err(idx_err!(
                    "segment id {} at row {} out of range for {} segments",
                    id,
                    row,
                    num
                ));
            }
            counts[id + 1] += 1;
        }
        for i in 0..num {
            counts[i + 1] += counts[i];
        }
        let offsets = counts;
        let mut fill = offsets.clone();
        let mut members = vec![0; ids.len()];
        for (row, &id) in ids.iter().enumerate() {
            members[fill[id]] = row;
            fill[id] += 1;
        }
        Ok(Arc::new(Segments {
            ids,
            num,
            offsets,
            members,
        }))
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn num(&self) -> usize {
        self.num
    }

    /// Rows assigned to segment `s`, in ascending row order.
    pub fn members(&self, s: usize) -> &[usize] {
        &self.members[self.offsets[s]..self.offsets[s + 1]]
    }
}

enum Op {
    Constant,
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<Segments>),
    Reshape(Var),
    Sum(Var),
    RowSum(Var),
    MulCol(Var, Var),
    LogSoftmax(Var),
    Pick(Var, Arc<[usize]>),
    CrossEntropy(Var, Arc<[usize]>, Vec<f64>),
    Mse(Var, Arc<Tensor>),
    Conv2d(Box<ConvSaved>),
}

struct ConvSaved {
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    cols: Vec<Vec<f64>>,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    grad: bool,
}

/// Records primitive operations in execution order for one forward pass.
///
/// Methods take `&self` so expressions can nest; a tape is single-threaded
/// and is dropped after its backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, Var>>,
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(dim_err!("{} expects a 2-D tensor, got shape {:?}", what, s)),
    }
}

enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(a: &Tensor, b: &Tensor, what: &str) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == 1 {
        Ok(Broadcast::RightScalar)
    } else if a.len() == 1 {
        Ok(Broadcast::LeftScalar)
    } else {
        Err(dim_err!(
            "{}: incompatible shapes {:?} and {:?}",
            what,
            a.shape(),
            b.shape()
        ))
    }
}

fn binary(a: &Tensor, b: &Tensor, mode: &Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match mode {
        Broadcast::Same => {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data).unwrap()
        }
        Broadcast::RightScalar => {
            let y = b.item();
            let data = a.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data).unwrap()
        }
        Broadcast::LeftScalar => {
            let x = a.item();
            let data = b.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(b.shape().to_vec(), data).unwrap()
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn push_shared(&self, value: Arc<Tensor>, op: Op, grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].grad)
    }

    /// Shared handle to the value of `v`.
    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, false)
    }

    /// Input that receives a gradient (retrievable through [`Gradients::get`]).
    pub fn leaf(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter `name` from `store`; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.borrow().get(name) {
            return Ok(*v);
        }
        let value = store.get_shared(name)?;
        let v = self.push_shared(value, Op::Param(name.to_string()), true);
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_shared(value, Op::Constant, false)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(&ta, "matmul")?;
        let (k2, n) = dims2(&tb, "matmul")?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let out = gemm(ta.data(), tb.data(), m, k, n);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            self.any_needs(&[a, b]),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mode = broadcast(&ta, &tb, "add")?;
        let out = binary(&ta, &tb, &mode, |x, y| x + y);
        self.push(out, Op::Add(a, b), self.any_needs(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mode = broadcast(&ta, &tb, "sub")?;
        let out = binary(&ta, &tb, &mode, |x, y| x - y);
        self.push(out, Op::Sub(a, b), self.any_needs(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mode = broadcast(&ta, &tb, "mul")?;
        let out = binary(&ta, &tb, &mode, |x, y| x * y);
        self.push(out, Op::Mul(a, b), self.any_needs(&[a, b]))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = dims2(&tx, "add_bias")?;
        if tb.len() != n {
            return Err(dim_err!(
                "bias of shape {:?} does not match {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let mut out = tx.data().to_vec();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::AddBias(x, bias),
            self.any_needs(&[x, bias]),
        )
    }

    /// `alpha * x + beta`
    pub fn affine(&self, x: Var, alpha: f64, beta: f64) -> Result<Var> {
        let out = map(&self.value(x), |v| alpha * v + beta);
        self.push(out, Op::Affine(x, alpha), self.needs(x))
    }

    pub fn scale(&self, x: Var, alpha: f64) -> Result<Var> {
        self.affine(x, alpha, 0.0)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let out = map(&self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), self.needs(x))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let out = map(&self.value(x), sigmoid);
        self.push(out, Op::Sigmoid(x), self.needs(x))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        let out = map(&self.value(x), f64::tanh);
        self.push(out, Op::Tanh(x), self.needs(x))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let out = map(&self.value(x), f64::exp);
        self.push(out, Op::Exp(x), self.needs(x))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat_cols of zero tensors"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let m = dims2(&values[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(values.len());
        for t in &values {
            let (r, c) = dims2(t, "concat_cols")?;
            if r != m {
                return Err(dim_err!("concat_cols row mismatch: {} vs {}", m, r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (t, &c) in values.iter().zip(&widths) {
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            self.any_needs(parts),
        )
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(&tx, "slice_cols")?;
        if start > end || end > n {
            return Err(idx_err!("column slice {}..{} out of range for width {}", start, end, n));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&tx.data()[r * n + start..r * n + end]);
        }
        self.push(
            Tensor::new(vec![m, w], out)?,
            Op::SliceCols(x, start),
            self.needs(x),
        )
    }

    /// `out[i] = x[idx[i]]` for the rows of a 2-D tensor.
    pub fn gather_rows(&self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(&tx, "gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            if i >= m {
                return Err(idx_err!("gather index {} out of range for {} rows", i, m));
            }
            out.extend_from_slice(&tx.data()[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows(x, idx),
            self.needs(x),
        )
    }

    /// Row `s` of the output is the sum of the rows of `values` assigned to
    /// segment `s`; empty segments give zero rows. The summation order is
    /// independent of the row order of `values`.
    pub fn segment_sum(&self, values: Var, segments: &Arc<Segments>) -> Result<Var> {
        let tv = self.value(values);
        let (m, d) = dims2(&tv, "segment_sum")?;
        if m != segments.ids.len() {
            return Err(dim_err!(
                "segment_sum got {} rows but {} segment ids",
                m,
                segments.ids.len()
            ));
        }
        let num = segments.num;
        let mut out = vec![0.0; num * d];
        let mut buf = Vec::new();
        for s in 0..num {
            let rows = segments.members(s);
            match rows.len() {
                0 => {}
                1 => out[s * d..(s + 1) * d].copy_from_slice(&tv.data()[rows[0] * d..(rows[0] + 1) * d]),
                _ => {
                    for c in 0..d {
                        buf.clear();
                        buf.extend(rows.iter().map(|&r| tv.data()[r * d + c]));
                        out[s * d + c] = kernels::ordered_sum(&mut buf);
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![num, d], out)?,
            Op::SegmentSum(values, segments.clone()),
            self.needs(values),
        )
    }

    /// Convenience wrapper building the [`Segments`] on the fly.
    pub fn segment_sum_ids(&self, values: Var, ids: &[usize], num: usize) -> Result<Var> {
        let seg = Segments::new(ids.to_vec(), num)?;
        self.segment_sum(values, &seg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let out = (*tx).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x), self.needs(x))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.needs(x))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums of a 2-D tensor, shape `[m,1]`.
    pub fn row_sum(&self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(&tx, "row_sum")?;
        let out = (0..m).map(|r| tx.data()[r * n..(r + 1) * n].iter().sum()).collect();
        self.push(Tensor::new(vec![m, 1], out)?, Op::RowSum(x), self.needs(x))
    }

    /// Scales row `i` of `x[m,n]` by `w[i,0]`.
    pub fn mul_col(&self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, n) = dims2(&tx, "mul_col")?;
        if tw.shape() != [m, 1] {
            return Err(dim_err!(
                "mul_col weight shape {:?} does not match {:?}",
                tw.shape(),
                tx.shape()
            ));
        }
        let mut out = tx.data().to_vec();
        for r in 0..m {
            let s = tw.data()[r];
            out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= s);
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MulCol(x, w),
            self.any_needs(&[x, w]),
        )
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(&tx, "log_softmax")?;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::LogSoftmax(x), self.needs(x))
    }

    /// `out[i,0] = x[i, idx[i]]`
    pub fn pick(&self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(&tx, "pick")?;
        if idx.len() != m {
            return Err(dim_err!("pick needs {} indices, got {}", m, idx.len()));
        }
        let mut out = Vec::with_capacity(m);
        for (r, &c) in idx.iter().enumerate() {
            if c >= n {
                return Err(idx_err!("pick column {} out of range for width {}", c, n));
            }
            out.push(tx.data()[r * n + c]);
        }
        self.push(Tensor::new(vec![m, 1], out)?, Op::Pick(x, idx), self.needs(x))
    }

    /// Mean softmax cross-entropy of `logits[n,k]` against integer labels.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, k) = dims2(&tl, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(dim_err!("{} labels for {} rows of logits", labels.len(), n));
        }
        if n == 0 {
            return Err(dim_err!("cross-entropy over zero rows"));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(idx_err!("label {} out of range for {} classes", label, k));
            }
            let row = &tl.data()[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy(logits, labels.into(), probs),
            self.needs(logits),
        )
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(dim_err!(
                "mse shapes differ: {:?} vs {:?}",
                tp.shape(),
                target.shape()
            ));
        }
        if tp.is_empty() {
            return Err(dim_err!("mse over an empty tensor"));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(
            Tensor::scalar(s / tp.len() as f64),
            Op::Mse(pred, Arc::new(target.clone())),
            self.needs(pred),
        )
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    ///
    /// `input` is `[c_in,h,w]` or a batch `[n,c_in,h,w]`; `kernel` is
    /// `[c_out,c_in,3,3]`; `bias`, when given, is `[c_out]`.
    pub fn conv2d(&self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (n, c_in, h, w, batched) = match ti.shape() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            s => return Err(dim_err!("conv2d input must be 3-D or 4-D, got {:?}", s)),
        };
        let (c_out, kc) = match tk.shape() {
            [co, ci, 3, 3] => (*co, *ci),
            s => return Err(dim_err!("conv2d kernel must be [c_out,c_in,3,3], got {:?}", s)),
        };
        if kc != c_in {
            return Err(dim_err!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                c_in,
                kc
            ));
        }
        let tb = match bias {
            Some(b) => {
                let tb = self.value(b);
                if tb.len() != c_out {
                    return Err(dim_err!("conv2d bias {:?} for {} channels", tb.shape(), c_out));
                }
                Some(tb)
            }
            None => None,
        };
        let hw = h * w;
        let mut out = vec![0.0; n * c_out * hw];
        let mut cols_all = Vec::with_capacity(n);
        for img in 0..n {
            let src = &ti.data()[img * c_in * hw..(img + 1) * c_in * hw];
            let cols = im2col3(src, c_in, h, w);
            let dst = &mut out[img * c_out * hw..(img + 1) * c_out * hw];
            gemm_acc(tk.data(), &cols, dst, c_out, c_in * 9, hw);
            if let Some(tb) = &tb {
                for c in 0..c_out {
                    let b = tb.data()[c];
                    dst[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += b);
                }
            }
            cols_all.push(cols);
        }
        let shape = if batched {
            vec![n, c_out, h, w]
        } else {
            vec![c_out, h, w]
        };
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let grad = self.any_needs(&deps);
        self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d(Box::new(ConvSaved {
                input,
                kernel,
                bias,
                cols: if grad { cols_all } else { Vec::new() },
                c_in,
                c_out,
                h,
                w,
            })),
            grad,
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(dim_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        let mut params = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.grad {
                continue;
            }
            let val = &node.value;
            let needs = |v: Var| nodes[v.0].grad;
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    leaves.insert(i, Tensor::new(val.shape().to_vec(), g)?);
                }
                Op::Param(name) => {
                    params.insert(name.clone(), Tensor::new(val.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm_nt_acc(&g, tb.data(), &mut ga, m, n, k);
                        acc_owned(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm_tn_acc(ta.data(), &g, &mut gb, m, k, n);
                        acc_owned(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let mode = broadcast(ta, tb, "add")?;
                    if needs(*a) {
                        match mode {
                            Broadcast::LeftScalar => acc_owned(&mut grads, *a, vec![g.iter().sum()]),
                            _ => acc(&mut grads, *a, &g),
                        }
                    }
                    if needs(*b) {
                        let gb: Vec<f64> = match mode {
                            Broadcast::RightScalar => vec![sign * g.iter().sum::<f64>()],
                            _ => g.iter().map(|v| sign * v).collect(),
                        };
                        acc_owned(&mut grads, *b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let mode = broadcast(ta, tb, "mul")?;
                    let (da, db) = (ta.data(), tb.data());
                    if needs(*a) {
                        let ga = match mode {
                            Broadcast::Same => g.iter().zip(db).map(|(x, y)| x * y).collect(),
                            Broadcast::RightScalar => g.iter().map(|x| x * db[0]).collect(),
                            Broadcast::LeftScalar => {
                                vec![g.iter().zip(db).map(|(x, y)| x * y).sum()]
                            }
                        };
                        acc_owned(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let gb = match mode {
                            Broadcast::Same => g.iter().zip(da).map(|(x, y)| x * y).collect(),
                            Broadcast::LeftScalar => g.iter().map(|x| x * da[0]).collect(),
                            Broadcast::RightScalar => {
                                vec![g.iter().zip(da).map(|(x, y)| x * y).sum()]
                            }
                        };
                        acc_owned(&mut grads, *b, gb);
                    }
                }
                Op::AddBias(x, b) => {
                    let n = val.shape()[1];
                    if needs(*b) {
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        acc_owned(&mut grads, *b, gb);
                    }
                    if needs(*x) {
                        acc_owned(&mut grads, *x, g);
                    }
                }
                Op::Affine(x, alpha) => {
                    let gx = g.iter().map(|v| v * alpha).collect();
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = g
                        .iter()
                        .zip(val.data())
                        .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g
                        .iter()
                        .zip(val.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g
                        .iter()
                        .zip(val.data())
                        .map(|(gv, t)| gv * (1.0 - t * t))
                        .collect();
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.iter().zip(val.data()).map(|(gv, e)| gv * e).collect();
                    acc_owned(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let m = val.shape()[0];
                    let total = val.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let c = nodes[p.0].value.shape()[1];
                        if needs(*p) {
                            let mut gp = Vec::with_capacity(m * c);
                            for r in 0..m {
                                gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            acc_owned(&mut grads, *p, gp);
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(x, start) => {
                    let tx = &nodes[x.0].value;
                    let (m, n) = (tx.shape()[0], tx.shape()[1]);
                    let w = val.shape()[1];
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::GatherRows(x, idx) => {
                    let tx = &nodes[x.0].value;
                    let n = tx.shape()[1];
                    let mut gx = vec![0.0; tx.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in gx[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *o += v;
                        }
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::SegmentSum(x, seg) => {
                    let d = val.shape()[1];
                    let mut gx = Vec::with_capacity(seg.ids.len() * d);
                    for &id in &seg.ids {
                        gx.extend_from_slice(&g[id * d..(id + 1) * d]);
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Reshape(x) => acc_owned(&mut grads, *x, g),
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    acc_owned(&mut grads, *x, vec![g[0]; n]);
                }
                Op::RowSum(x) => {
                    let n = nodes[x.0].value.shape()[1];
                    let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                    acc_owned(&mut grads, *x, gx);
                }
                Op::MulCol(x, w) => {
                    let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                    let n = tx.shape()[1];
                    if needs(*x) {
                        let mut gx = g.clone();
                        for (r, row) in gx.chunks_mut(n).enumerate() {
                            let s = tw.data()[r];
                            row.iter_mut().for_each(|v| *v *= s);
                        }
                        acc_owned(&mut grads, *x, gx);
                    }
                    if needs(*w) {
                        let gw = g
                            .chunks(n)
                            .zip(tx.data().chunks(n))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect();
                        acc_owned(&mut grads, *w, gw);
                    }
                }
                Op::LogSoftmax(x) => {
                    let n = val.shape()[1];
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, lr) in g.chunks(n).zip(val.data().chunks(n)) {
                        let s: f64 = gr.iter().sum();
                        gx.extend(gr.iter().zip(lr).map(|(gv, l)| gv - l.exp() * s));
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Pick(x, idx) => {
                    let tx = &nodes[x.0].value;
                    let n = tx.shape()[1];
                    let mut gx = vec![0.0; tx.len()];
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * n + c] = g[r];
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::CrossEntropy(x, labels, probs) => {
                    let k = nodes[x.0].value.shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        gx[r * k + l] -= scale;
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Mse(x, target) => {
                    let tp = &nodes[x.0].value;
                    let scale = 2.0 * g[0] / tp.len() as f64;
                    let gx = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| scale * (p - t))
                        .collect();
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Conv2d(saved) => {
                    let ConvSaved {
                        input,
                        kernel,
                        bias,
                        cols,
                        c_in,
                        c_out,
                        h,
                        w,
                    } = saved.as_ref();
                    let hw = h * w;
                    let k9 = c_in * 9;
                    let tk = &nodes[kernel.0].value;
                    let mut gk = vec![0.0; c_out * k9];
                    let mut gb = vec![0.0; *c_out];
                    let mut gi = if needs(*input) {
                        Some(vec![0.0; cols.len() * c_in * hw])
                    } else {
                        None
                    };
                    for (img, cols_img) in cols.iter().enumerate() {
                        let g_img = &g[img * c_out * hw..(img + 1) * c_out * hw];
                        gemm_nt_acc(g_img, cols_img, &mut gk, *c_out, hw, k9);
                        for c in 0..*c_out {
                            gb[c] += g_img[c * hw..(c + 1) * hw].iter().sum::<f64>();
                        }
                        if let Some(gi) = gi.as_mut() {
                            let mut gcols = vec![0.0; k9 * hw];
                            gemm_tn_acc(tk.data(), g_img, &mut gcols, *c_out, k9, hw);
                            col2im3_acc(
                                &gcols,
                                &mut gi[img * c_in * hw..(img + 1) * c_in * hw],
                                *c_in,
                                *h,
                                *w,
                            );
                        }
                    }
                    if needs(*kernel) {
                        acc_owned(&mut grads, *kernel, gk);
                    }
                    if let Some(b) = bias {
                        if needs(*b) {
                            acc_owned(&mut grads, *b, gb);
                        }
                    }
                    if let Some(gi) = gi {
                        acc_owned(&mut grads, *input, gi);
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, add: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(add).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(add.to_vec()),
    }
}

fn acc_owned(grads: &mut [Option<Vec<f64>>], v: Var, add: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&add).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(add),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::Affine(..) => "affine",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Exp(_) => "exp",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::SegmentSum(..) => "segment_sum",
        Op::Reshape(_) => "reshape",
        Op::Sum(_) => "sum",
        Op::RowSum(_) => "row_sum",
        Op::MulCol(..) => "mul_col",
        Op::LogSoftmax(_) => "log_softmax",
        Op::Pick(..) => "pick",
        Op::CrossEntropy(..) => "softmax_cross_entropy",
        Op::Mse(..) => "mse",
        Op::Conv2d(_) => "conv2d",
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a [`Tape::leaf`]; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Parameter gradients keyed by parameter path.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

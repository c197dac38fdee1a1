//! Layers built from tape primitives: dense layers, MLPs, GRU and LSTM cells.

use crate::error::{dim_err, Result};
use crate::tensor::{Init, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = format!("{}/w", name);
        let bias = format!("{}/b", name);
        store.add(&weight, &[in_dim, out_dim], Init::GlorotUniform)?;
        store.add(&bias, &[out_dim], Init::Zeros)?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let b = tape.param(store, &self.bias)?;
        tape.add_bias(tape.matmul(x, w)?, b)
    }
}

/// ReLU hidden layers, linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: &[usize], out_dim: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().chain(std::iter::once(&out_dim)).enumerate() {
            layers.push(Linear::new(store, &format!("{}/l{}", name, i), prev, h)?);
            prev = h;
        }
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Zeroes the output layer's weights, leaving its bias.
    pub fn zero_output(&self, store: &mut ParamStore) -> Result<()> {
        let l = self.layers.last().unwrap();
        store.set(&l.weight, Tensor::zeros(&[l.in_dim, l.out_dim]))
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(dim_err!(
                "mlp expects [_, {}] input, got {:?}",
                self.in_dim(),
                shape
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// r  = sigmoid(x Wr + h Ur + br)
/// z  = sigmoid(x Wz + h Uz + bz)
/// n  = tanh(x Wn + (r * h) Un + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    w_x: String,
    u_rz: String,
    u_n: String,
    bias: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        let cell = GruCell {
            w_x: format!("{}/w_x", name),
            u_rz: format!("{}/u_rz", name),
            u_n: format!("{}/u_n", name),
            bias: format!("{}/b", name),
            in_dim,
            hidden,
        };
        store.add(&cell.w_x, &[in_dim, 3 * hidden], Init::GlorotUniform)?;
        store.add(&cell.u_rz, &[hidden, 2 * hidden], Init::GlorotUniform)?;
        store.add(&cell.u_n, &[hidden, hidden], Init::GlorotUniform)?;
        store.add(&cell.bias, &[3 * hidden], Init::Zeros)?;
        Ok(cell)
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let hs = self.hidden;
        let xw = tape.add_bias(tape.matmul(x, tape.param(store, &self.w_x)?)?, tape.param(store, &self.bias)?)?;
        let hu = tape.matmul(h, tape.param(store, &self.u_rz)?)?;
        let r = tape.sigmoid(tape.add(tape.slice_cols(xw, 0, hs)?, tape.slice_cols(hu, 0, hs)?)?)?;
        let z = tape.sigmoid(tape.add(tape.slice_cols(xw, hs, 2 * hs)?, tape.slice_cols(hu, hs, 2 * hs)?)?)?;
        let rh = tape.mul(r, h)?;
        let n = tape.tanh(tape.add(
            tape.slice_cols(xw, 2 * hs, 3 * hs)?,
            tape.matmul(rh, tape.param(store, &self.u_n)?)?,
        )?)?;
        // h' = n + z * (h - n)
        tape.add(n, tape.mul(z, tape.sub(h, n)?)?)
    }
}

/// Standard LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    w_x: String,
    w_h: String,
    bias: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        let cell = LstmCell {
            w_x: format!("{}/w_x", name),
            w_h: format!("{}/w_h", name),
            bias: format!("{}/b", name),
            in_dim,
            hidden,
        };
        store.add(&cell.w_x, &[in_dim, 4 * hidden], Init::GlorotUniform)?;
        store.add(&cell.w_h, &[hidden, 4 * hidden], Init::GlorotUniform)?;
        store.add(&cell.bias, &[4 * hidden], Init::Zeros)?;
        Ok(cell)
    }

    /// Returns `(h', c')`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hs = self.hidden;
        let gates = tape.add_bias(
            tape.add(
                tape.matmul(x, tape.param(store, &self.w_x)?)?,
                tape.matmul(h, tape.param(store, &self.w_h)?)?,
            )?,
            tape.param(store, &self.bias)?,
        )?;
        let i = tape.sigmoid(tape.slice_cols(gates, 0, hs)?)?;
        let f = tape.sigmoid(tape.slice_cols(gates, hs, 2 * hs)?)?;
        let g = tape.tanh(tape.slice_cols(gates, 2 * hs, 3 * hs)?)?;
        let o = tape.sigmoid(tape.slice_cols(gates, 3 * hs, 4 * hs)?)?;
        let c_next = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
        let h_next = tape.mul(o, tape.tanh(c_next)?)?;
        Ok((h_next, c_next))
    }
}

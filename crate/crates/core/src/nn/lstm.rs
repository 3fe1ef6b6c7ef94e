use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-layer LSTM. Gate blocks are laid out `[input, forget, cell, output]`
/// along the last axis of the weights.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Lstm {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_dim;
        let mut bias = Tensor::zeros(vec![4 * h]);
        bias.data_mut()[h..2 * h].fill(F::one());
        Ok(Self {
            w_ih: store.add_glorot(format!("{name}.w_ih"), input_dim, 4 * h, rng)?,
            w_hh: store.add_glorot(format!("{name}.w_hh"), h, 4 * h, rng)?,
            bias: store.add(format!("{name}.bias"), bias)?,
            input_dim,
            hidden_dim,
        })
    }

    /// Runs from zero initial state over `[T, input]`, returning all hidden states `[T, hidden]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::dim("lstm_forward", s, &[self.input_dim]));
        }
        let t_len = s[0];
        if t_len == 0 {
            return Err(Error::Empty("lstm input"));
        }
        let h_dim = self.hidden_dim;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w_ih)?;
        let xw = g.add(xw, b)?;

        let mut h = g.constant(Tensor::zeros(vec![1, h_dim]));
        let mut c = g.constant(Tensor::zeros(vec![1, h_dim]));
        let mut outs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = g.narrow(xw, 0, t, 1)?;
            let hw = g.matmul(h, w_hh)?;
            let gates = g.add(xt, hw)?;
            let i = g.narrow(gates, 1, 0, h_dim)?;
            let i = g.sigmoid(i);
            let f = g.narrow(gates, 1, h_dim, h_dim)?;
            let f = g.sigmoid(f);
            let cand = g.narrow(gates, 1, 2 * h_dim, h_dim)?;
            let cand = g.tanh(cand);
            let o = g.narrow(gates, 1, 3 * h_dim, h_dim)?;
            let o = g.sigmoid(o);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
            outs.push(h);
        }
        g.concat(&outs, 0)
    }
}

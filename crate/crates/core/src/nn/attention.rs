use rand::Rng;

use super::Linear;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// `Tq x Tk` attention mask; `true` means the key may be attended.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub tq: usize,
    pub tk: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(tq: usize, tk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != tq * tk {
            return Err(Error::dim("AttnMask", &[tq, tk], &[allowed.len()]));
        }
        Ok(Self { tq, tk, allowed })
    }

    /// Query `i` sees keys `0..=i + offset`.
    pub fn causal(tq: usize, tk: usize, offset: usize) -> Self {
        let allowed = (0..tq)
            .flat_map(|i| (0..tk).map(move |j| j <= i + offset))
            .collect();
        Self { tq, tk, allowed }
    }
}

/// Scaled dot-product attention over `n_heads` heads with input and
/// output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub d_model: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    /// Random projections; `zero_output` starts the output projection at zero.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            n_heads,
            d_model,
            q: Linear::new(store, &format!("{name}.w_q"), d_model, d_model, rng)?,
            k: Linear::without_bias(store, &format!("{name}.w_k"), d_model, d_model, rng)?,
            v: Linear::new(store, &format!("{name}.w_v"), d_model, d_model, rng)?,
            o: if zero_output {
                Linear::zeros(store, &format!("{name}.w_o"), d_model, d_model)?
            } else {
                Linear::new(store, &format!("{name}.w_o"), d_model, d_model, rng)?
            },
        })
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Returns the attended output `[Tq, d]` and the weights `[heads, Tq, Tk]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: Option<&AttnMask>,
    ) -> Result<(Var, Var)> {
        for x in [q_in, k_in, v_in] {
            let s = g.shape(x);
            if s.len() != 2 || s[1] != self.d_model {
                return Err(Error::dim("multi_head_attention", s, &[self.d_model]));
            }
        }
        let q = self.q.forward(g, q_in)?;
        let (k, v) = self.project_kv(g, k_in, v_in)?;
        self.attend(g, q, k, v, mask)
    }

    /// Key and value projections, reusable across queries.
    pub fn project_kv<F: Scalar>(&self, g: &mut Graph<'_, F>, k_in: Var, v_in: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(g, k_in)?, self.v.forward(g, v_in)?))
    }

    /// Attention from already projected `q [Tq,d]`, `k, v [Tk,d]`, then the output projection.
    pub fn attend<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttnMask>,
    ) -> Result<(Var, Var)> {
        let (h, dh) = (self.n_heads, self.head_dim());
        let tq = g.shape(q)[0];
        let tk = g.shape(k)[0];
        if tk == 0 {
            return Err(Error::Empty("attention keys"));
        }
        let qh = g.reshape(q, [tq, h, dh])?;
        let qh = g.permute(qh, &[1, 0, 2])?;
        let kh = g.reshape(k, [tk, h, dh])?;
        let kt = g.permute(kh, &[1, 2, 0])?;
        let vh = g.reshape(v, [tk, h, dh])?;
        let vh = g.permute(vh, &[1, 0, 2])?;

        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, F::lit(1.0 / (dh as f64).sqrt()));
        if let Some(m) = mask {
            if m.tq != tq || m.tk != tk {
                return Err(Error::dim("attention mask", &[m.tq, m.tk], &[tq, tk]));
            }
            if let Some(row) = (0..tq).find(|&i| !m.allowed[i * tk..(i + 1) * tk].iter().any(|&a| a)) {
                return Err(Error::FullyMaskedRow { row });
            }
            scores = g.mask_fill_neg_inf(scores, &m.allowed, &[tq, tk])?;
        }
        let weights = g.softmax(scores, 2)?;
        let ctx = g.matmul(weights, vh)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, [tq, self.d_model])?;
        let out = self.o.forward(g, ctx)?;
        Ok((out, weights))
    }
}

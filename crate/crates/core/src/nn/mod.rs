//! Neural building blocks on top of the differentiation graph.

mod attention;
mod lstm;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use attention::{AttnMask, MultiHeadAttention};
pub use lstm::Lstm;

/// Affine map `x W + b` applied to every row of `[T, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng)?,
            b: Some(store.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]))?),
            in_dim,
            out_dim,
        })
    }

    /// `x W` with no bias term.
    pub fn without_bias<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng)?,
            b: None,
            in_dim,
            out_dim,
        })
    }

    /// Zero weights and bias.
    pub fn zeros<F: Scalar>(store: &mut ParamStore<F>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(vec![in_dim, out_dim]))?,
            b: Some(store.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]))?),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![d]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d]))?,
            eps,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, F::lit(self.eps))
    }
}

/// Sinusoidal table `[T, d]`: even columns `sin(t / 10000^(2i/d))`, odd columns the matching cosine.
pub fn sinusoid_table<F: Scalar>(len: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(F::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("consistent shape")
}

/// Sinusoidal position encoding multiplied by a learnable scalar.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub scale: ParamId,
    pub d_model: usize,
}

impl PositionalEncoding {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_model: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(format!("{name}.scale"), Tensor::ones(vec![1]))?,
            d_model,
        })
    }

    /// Encoding rows `[offset, offset + len)`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, offset: usize, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::Empty("positional encoding length"));
        }
        let table = sinusoid_table::<F>(offset + len, self.d_model).narrow(0, offset, len)?;
        let table = g.constant(table);
        let s = g.param(self.scale);
        g.mul(table, s)
    }
}

/// Position-wise `linear -> relu -> linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), d_model, width, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), width, d_model, rng)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub d: usize,
}

impl Embedding {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        vocab: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = Tensor::randn(vec![vocab, d], (1.0 / d as f64).sqrt(), rng);
        Ok(Self {
            table: store.add(format!("{name}.table"), table)?,
            vocab,
            d,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding(t, ids)
    }
}

/// Decoder input network: two relu layers through a narrow bottleneck,
/// projection to the model width, then layer normalisation.
#[derive(Clone, Debug)]
pub struct Prenet {
    pub l1: Linear,
    pub l2: Linear,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl Prenet {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        n_mels: usize,
        bottleneck: usize,
        d_model: usize,
        ln_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), n_mels, bottleneck, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), bottleneck, bottleneck, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), bottleneck, d_model, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model, ln_eps)?,
        })
    }

    /// `[T, n_mels] -> [T, d_model]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, mel: Var, dropout: f64) -> Result<Var> {
        let h = self.l1.forward(g, mel)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout);
        let h = self.l2.forward(g, h)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout);
        let h = self.proj.forward(g, h)?;
        self.norm.forward(g, h)
    }
}

/// Residual refinement by a stack of causal 1-D convolutions; tanh after
/// every layer except the last, which starts at zero.
#[derive(Clone, Debug)]
pub struct Postnet {
    pub layers: Vec<Linear>,
    pub kernel: usize,
}

impl Postnet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        n_mels: usize,
        channels: usize,
        kernel: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Config("postnet depth must be at least 2".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { n_mels } else { channels };
            let name = format!("{name}.conv{i}");
            layers.push(if i + 1 == depth {
                Linear::zeros(store, &name, kernel * cin, n_mels)?
            } else {
                Linear::new(store, &name, kernel * cin, channels, rng)?
            });
        }
        Ok(Self { layers, kernel })
    }

    /// Frames of history each output frame depends on, itself included.
    pub fn receptive_field(&self) -> usize {
        self.layers.len() * (self.kernel - 1) + 1
    }

    /// Correction term only (without the residual input).
    pub fn correction<F: Scalar>(&self, g: &mut Graph<'_, F>, mel: Var, dropout: f64) -> Result<Var> {
        let mut h = mel;
        for (i, layer) in self.layers.iter().enumerate() {
            let u = g.unfold_causal(h, self.kernel)?;
            h = layer.forward(g, u)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
                h = g.dropout(h, dropout);
            }
        }
        Ok(h)
    }

    /// `mel + correction(mel)`, shape preserved.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, mel: Var, dropout: f64) -> Result<Var> {
        let c = self.correction(g, mel, dropout)?;
        g.add(mel, c)
    }
}

/// Unpadded average pooling over time; a sequence shorter than `kernel`
/// collapses to its mean frame.
pub fn avg_pool_1d<F: Scalar>(g: &mut Graph<'_, F>, x: Var, kernel: usize, stride: usize) -> Result<Var> {
    g.avg_pool_1d(x, kernel, stride)
}

/// Output length of [`avg_pool_1d`].
pub fn pooled_len(t: usize, kernel: usize, stride: usize) -> usize {
    if t < kernel {
        1
    } else {
        (t - kernel) / stride + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_zero_alternates() {
        let t = sinusoid_table::<f64>(3, 6);
        assert_eq!(t.row(0), &[0., 1., 0., 1., 0., 1.]);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn scaled_encoding() {
        let mut s = ParamStore::<f64>::new();
        let pe = PositionalEncoding::new(&mut s, "pe", 4).unwrap();
        s.set(pe.scale, Tensor::from_f64(vec![1], &[0.0]).unwrap()).unwrap();
        let mut g = Graph::with_params(&s);
        let v = pe.forward(&mut g, 0, 5).unwrap();
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_ffn_is_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        let ff = FeedForward::new(&mut s, "ff", 3, 5, &mut rng).unwrap();
        s.set(ff.inner.w, Tensor::zeros(vec![3, 5])).unwrap();
        s.set(ff.outer.w, Tensor::zeros(vec![5, 3])).unwrap();
        s.set(ff.outer.b.unwrap(), Tensor::from_f64(vec![3], &[1., -2., 0.5]).unwrap()).unwrap();
        let mut g = Graph::with_params(&s);
        let x = g.constant(Tensor::randn(vec![4, 3], 1.0, &mut rng));
        let y = ff.forward(&mut g, x).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), &[1., -2., 0.5]);
        }
    }

    #[test]
    fn embedding_repeats_and_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f64>::new();
        let e = Embedding::new(&mut s, "emb", 4, 3, &mut rng).unwrap();
        let mut g = Graph::with_params(&s);
        let y = e.forward(&mut g, &[0, 0]).unwrap();
        assert_eq!(g.value(y).row(0), g.value(y).row(1));
        let l = g.sum_all(y);
        let grads = g.backward(l).unwrap();
        let gt = grads.get(g.param(e.table)).unwrap().clone();
        assert_eq!(gt.row(0), &[2., 2., 2.]);
        assert_eq!(gt.row(1), &[0., 0., 0.]);

        let mut g = Graph::with_params(&s);
        let y = e.forward(&mut g, &[]).unwrap();
        assert_eq!(g.shape(y), &[0, 3]);
        let mut g = Graph::with_params(&s);
        let err = e.forward(&mut g, &[7]).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 7, .. }));
    }

    #[test]
    fn pooling_lengths_and_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![32, 2], 3.5));
        let y = avg_pool_1d(&mut g, x, 8, 4).unwrap();
        assert_eq!(g.shape(y), &[7, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.5));
        assert_eq!(pooled_len(64, 8, 4), 15);
        assert_eq!(pooled_len(5, 8, 4), 1);
    }

    #[test]
    fn postnet_starts_as_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::<f64>::new();
        let pn = Postnet::new(&mut s, "post", 4, 8, 5, 5, &mut rng).unwrap();
        for t in [1, 3, 9] {
            let mut g = Graph::with_params(&s);
            let mel = Tensor::randn(vec![t, 4], 1.0, &mut rng);
            let x = g.constant(mel.clone());
            let y = pn.forward(&mut g, x, 0.0).unwrap();
            assert_eq!(g.value(y), &mel);
        }
        assert_eq!(pn.receptive_field(), 21);
    }

    #[test]
    fn prenet_output_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n_mels in [3, 16] {
            let mut s = ParamStore::<f64>::new();
            let p = Prenet::new(&mut s, "pre", n_mels, 4, 6, 1e-5, &mut rng).unwrap();
            let mut g = Graph::with_params(&s);
            let x = g.constant(Tensor::zeros(vec![2, n_mels]));
            let y = p.forward(&mut g, x, 0.0).unwrap();
            assert_eq!(g.shape(y), &[2, 6]);
            assert!(g.value(y).all_finite());
        }
    }
}

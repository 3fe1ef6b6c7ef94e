//! Style network: reference features, global speaker embedding, local style
//! token sequence, smoothing, combination, truncation and sampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix, FEATURE_MAGIC};
use crate::nn::{Linear, Lstm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frozen per-frame reference features `[T_f, d_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<F> {
    pub frames: Tensor<F>,
    pub source_id: String,
}

impl<F: Scalar> FeatureSequence<F> {
    pub fn cast<G: Scalar>(&self) -> FeatureSequence<G> {
        FeatureSequence {
            frames: self.frames.cast(),
            source_id: self.source_id.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            frames: read_matrix(path, FEATURE_MAGIC)?,
            source_id: path.display().to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_matrix(path, FEATURE_MAGIC, &self.frames)
    }
}

/// Maps a mel spectrogram to reference features. Implementations are not
/// trained and receive no gradient.
pub trait FeatureExtractor<F: Scalar> {
    fn dim(&self) -> usize;

    fn extract(&self, mel: &Tensor<F>, source_id: &str) -> Result<FeatureSequence<F>>;
}

/// Stand-in for a pretrained speech encoder: a seeded random projection to
/// fewer dimensions than the mel bins, followed by `tanh`.
#[derive(Clone, Debug)]
pub struct ProjectionExtractor<F> {
    pub projection: Tensor<F>,
}

impl<F: Scalar> ProjectionExtractor<F> {
    pub fn new(n_mels: usize, d_f: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            projection: Tensor::randn(vec![n_mels, d_f], (1.0 / n_mels as f64).sqrt() * 2.0, &mut rng),
        }
    }
}

impl<F: Scalar> FeatureExtractor<F> for ProjectionExtractor<F> {
    fn dim(&self) -> usize {
        self.projection.cols()
    }

    fn extract(&self, mel: &Tensor<F>, source_id: &str) -> Result<FeatureSequence<F>> {
        if mel.rank() != 2 || mel.rows() == 0 {
            return Err(Error::Empty("reference mel"));
        }
        Ok(FeatureSequence {
            frames: mel.matmul(&self.projection)?.map(|v| v.tanh()),
            source_id: source_id.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodebookKind {
    Global,
    Local,
}

/// Trainable `[K, d_model]` token table.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub tokens: ParamId,
    pub kind: CodebookKind,
    pub size: usize,
}

impl Codebook {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        kind: CodebookKind,
        size: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            tokens: store.add(format!("{name}.tokens"), Tensor::randn(vec![size, d_model], 0.5, rng))?,
            kind,
            size,
        })
    }
}

/// Global speaker vector `[d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct SpeakerEmbedding {
    pub vector: Var,
}

/// Style sequence `[T_s, d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct StyleRepresentation {
    pub frames: Var,
    pub includes_speaker: bool,
}

/// One attention-over-codebook path: `linear + relu -> LSTM -> attention`.
#[derive(Clone, Debug)]
pub struct TokenPath {
    pub front: Linear,
    pub lstm: Lstm,
    pub attn: MultiHeadAttention,
    pub codebook: Codebook,
}

impl TokenPath {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &ModelConfig,
        kind: CodebookKind,
        rng: &mut R,
    ) -> Result<Self> {
        let size = match kind {
            CodebookKind::Global => cfg.gst_size,
            CodebookKind::Local => cfg.lst_size,
        };
        Ok(Self {
            front: Linear::new(store, &format!("{name}.front"), cfg.d_f, cfg.d_model, rng)?,
            lstm: Lstm::new(store, &format!("{name}.lstm"), cfg.d_model, cfg.d_model, rng)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.n_heads, false, rng)?,
            codebook: Codebook::new(store, &format!("{name}.codebook"), kind, size, cfg.d_model, rng)?,
        })
    }

    fn contextualize<F: Scalar>(&self, g: &mut Graph<'_, F>, feat: &FeatureSequence<F>) -> Result<Var> {
        if feat.is_empty() {
            return Err(Error::Empty("reference features"));
        }
        let x = g.constant(feat.frames.clone());
        let h = self.front.forward(g, x)?;
        let h = g.relu(h);
        self.lstm.forward(g, h)
    }

    /// Queries `[T, d]` against the codebook; returns outputs and weights.
    fn query<F: Scalar>(&self, g: &mut Graph<'_, F>, q: Var) -> Result<(Var, Var)> {
        let tokens = g.param(self.codebook.tokens);
        self.attn.forward(g, q, tokens, tokens, None)
    }
}

#[derive(Clone, Debug)]
pub struct StyleNetwork {
    pub global: TokenPath,
    pub local: TokenPath,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub d_model: usize,
}

impl StyleNetwork {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            global: TokenPath::new(store, &format!("{name}.gst"), cfg, CodebookKind::Global, rng)?,
            local: TokenPath::new(store, &format!("{name}.lst"), cfg, CodebookKind::Local, rng)?,
            pool_kernel: cfg.pool_kernel,
            pool_stride: cfg.pool_stride,
            d_model: cfg.d_model,
        })
    }

    /// Mean of the contextualised features queries the global tokens.
    pub fn speaker_embedding<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        feat: &FeatureSequence<F>,
    ) -> Result<SpeakerEmbedding> {
        let h = self.global.contextualize(g, feat)?;
        let q = g.mean_axis(h, 0)?;
        let q = g.reshape(q, [1, self.d_model])?;
        let (out, _) = self.global.query(g, q)?;
        Ok(SpeakerEmbedding {
            vector: g.reshape(out, [self.d_model])?,
        })
    }

    /// Every contextualised frame queries the local tokens; returns the
    /// unpooled sequence `[T_f, d]` and the attention weights.
    pub fn local_style_embeddings<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        feat: &FeatureSequence<F>,
    ) -> Result<(StyleRepresentation, Var)> {
        let h = self.local.contextualize(g, feat)?;
        let (out, weights) = self.local.query(g, h)?;
        Ok((
            StyleRepresentation {
                frames: out,
                includes_speaker: false,
            },
            weights,
        ))
    }

    pub fn smooth_styles<F: Scalar>(&self, g: &mut Graph<'_, F>, s: StyleRepresentation) -> Result<StyleRepresentation> {
        if s.includes_speaker {
            return Err(Error::Config("smoothing expects styles without the speaker term".into()));
        }
        Ok(StyleRepresentation {
            frames: g.avg_pool_1d(s.frames, self.pool_kernel, self.pool_stride)?,
            includes_speaker: false,
        })
    }

    /// Broadcast-adds the speaker vector to every style frame.
    pub fn combine_style<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        spk: SpeakerEmbedding,
        s: StyleRepresentation,
    ) -> Result<StyleRepresentation> {
        if s.includes_speaker {
            return Err(Error::Config("style already includes the speaker term".into()));
        }
        let (fs, vs) = (g.shape(s.frames), g.shape(spk.vector));
        if fs.len() != 2 || vs != [fs[1]] {
            return Err(Error::dim("combine_style", fs, vs));
        }
        Ok(StyleRepresentation {
            frames: g.add(s.frames, spk.vector)?,
            includes_speaker: true,
        })
    }

    /// Full style path; `truncate` carries `(alpha, rng)` in training.
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        style_ref: &FeatureSequence<F>,
        speaker: SpeakerEmbedding,
        truncate: Option<(usize, &mut R)>,
    ) -> Result<StyleRepresentation> {
        let (local, _) = self.local_style_embeddings(g, style_ref)?;
        let smooth = self.smooth_styles(g, local)?;
        let combined = self.combine_style(g, speaker, smooth)?;
        match truncate {
            Some((alpha, rng)) => truncate_style(g, combined, alpha, rng),
            None => Ok(combined),
        }
    }

    /// Reference-free styles: each frame is `beta * token + speaker` with an
    /// independently, uniformly chosen local token.
    pub fn sample_styles<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        spk: SpeakerEmbedding,
        beta: f64,
        length_range: (usize, usize),
        rng: &mut R,
    ) -> Result<StyleRepresentation> {
        let (lo, hi) = length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("sample length range [{lo}, {hi}] is invalid")));
        }
        if self.local.codebook.size == 0 {
            return Err(Error::Empty("local style codebook"));
        }
        let len = rng.random_range(lo..=hi);
        let ids: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..self.local.codebook.size))
            .collect();
        let tokens = g.param(self.local.codebook.tokens);
        let picked = g.embedding(tokens, &ids)?;
        let scaled = g.scale(picked, F::lit(beta));
        Ok(StyleRepresentation {
            frames: g.add(scaled, spk.vector)?,
            includes_speaker: true,
        })
    }
}

/// Keeps a uniformly drawn prefix of length in `[min(alpha, T_s), T_s]`.
pub fn truncate_style<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<'_, F>,
    s: StyleRepresentation,
    alpha: usize,
    rng: &mut R,
) -> Result<StyleRepresentation> {
    let t = g.shape(s.frames)[0];
    if t <= alpha {
        return Ok(s);
    }
    let keep = rng.random_range(alpha..=t);
    Ok(StyleRepresentation {
        frames: g.narrow(s.frames, 0, 0, keep)?,
        includes_speaker: s.includes_speaker,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64) -> (ParamStore<f64>, StyleNetwork, ModelConfig) {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let net = StyleNetwork::new(&mut s, "style", &cfg, &mut rng).unwrap();
        (s, net, cfg)
    }

    fn feats(t: usize, d: usize, seed: u64) -> FeatureSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence {
            frames: Tensor::randn(vec![t, d], 1.0, &mut rng),
            source_id: "x".into(),
        }
    }

    #[test]
    fn extractor_is_deterministic_and_per_frame() {
        let ex = ProjectionExtractor::<f64>::new(16, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mel = Tensor::randn(vec![7, 16], 1.0, &mut rng);
        let a = ex.extract(&mel, "a").unwrap();
        let b = ProjectionExtractor::<f64>::new(16, 12, 3).extract(&mel, "a").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.shape(), &[7, 12]);
        assert!(ex.extract(&Tensor::zeros(vec![0, 16]), "e").is_err());
    }

    #[test]
    fn smoothing_lengths() {
        let (s, net, cfg) = setup(0);
        let mut g = Graph::with_params(&s);
        for (t, expect) in [(64, 15), (5, 1)] {
            let x = g.constant(Tensor::full(vec![t, cfg.d_model], 0.25));
            let out = net
                .smooth_styles(&mut g, StyleRepresentation { frames: x, includes_speaker: false })
                .unwrap();
            assert_eq!(g.shape(out.frames), &[expect, cfg.d_model]);
            assert!(g.value(out.frames).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn combine_adds_speaker_everywhere() {
        let (s, net, cfg) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::with_params(&s);
        let styles = Tensor::randn(vec![4, cfg.d_model], 1.0, &mut rng);
        let spk = Tensor::randn(vec![cfg.d_model], 1.0, &mut rng);
        let sv = g.constant(styles.clone());
        let pv = g.constant(spk.clone());
        let out = net
            .combine_style(
                &mut g,
                SpeakerEmbedding { vector: pv },
                StyleRepresentation { frames: sv, includes_speaker: false },
            )
            .unwrap();
        assert!(out.includes_speaker);
        let o = g.value(out.frames).clone();
        for r in 0..4 {
            for c in 0..cfg.d_model {
                assert!((o.get(&[r, c]) - spk.data()[c] - styles.get(&[r, c])).abs() < 1e-12);
            }
        }
        let z = g.constant(Tensor::zeros(vec![cfg.d_model]));
        let out = net
            .combine_style(
                &mut g,
                SpeakerEmbedding { vector: z },
                StyleRepresentation { frames: sv, includes_speaker: false },
            )
            .unwrap();
        assert_eq!(g.value(out.frames), &styles);
        let bad = g.constant(Tensor::zeros(vec![cfg.d_model + 1]));
        assert!(net
            .combine_style(
                &mut g,
                SpeakerEmbedding { vector: bad },
                StyleRepresentation { frames: sv, includes_speaker: false }
            )
            .is_err());
    }

    #[test]
    fn truncation_identity_when_short() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.constant(Tensor::zeros(vec![15, 2]));
        let s = StyleRepresentation { frames: x, includes_speaker: true };
        let out = truncate_style(&mut g, s, 15, &mut rng).unwrap();
        assert_eq!(out.frames, x);
    }

    #[test]
    fn speaker_embedding_is_deterministic() {
        let (s, net, cfg) = setup(2);
        let f = feats(6, cfg.d_f, 1);
        let mut g = Graph::with_params(&s);
        let a = net.speaker_embedding(&mut g, &f).unwrap();
        let b = net.speaker_embedding(&mut g, &f.clone()).unwrap();
        assert_eq!(g.shape(a.vector), &[cfg.d_model]);
        assert_eq!(g.value(a.vector), g.value(b.vector));
        let empty = FeatureSequence { frames: Tensor::zeros(vec![0, cfg.d_f]), source_id: String::new() };
        assert!(net.speaker_embedding(&mut g, &empty).is_err());
    }

    #[test]
    fn local_weights_are_distributions() {
        let (s, net, cfg) = setup(3);
        let f = feats(9, cfg.d_f, 2);
        let mut g = Graph::with_params(&s);
        let (out, w) = net.local_style_embeddings(&mut g, &f).unwrap();
        assert_eq!(g.shape(out.frames), &[9, cfg.d_model]);
        let w = g.value(w);
        assert_eq!(w.shape(), &[cfg.n_heads, 9, cfg.lst_size]);
        for row in w.data().chunks(cfg.lst_size) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_styles_zero_beta_is_speaker() {
        let (s, net, cfg) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::with_params(&s);
        let spk = Tensor::randn(vec![cfg.d_model], 1.0, &mut rng);
        let v = g.constant(spk.clone());
        let out = net
            .sample_styles(&mut g, SpeakerEmbedding { vector: v }, 0.0, (3, 3), &mut rng)
            .unwrap();
        for r in 0..3 {
            assert_eq!(g.value(out.frames).row(r), spk.data());
        }
        assert!(net
            .sample_styles(&mut g, SpeakerEmbedding { vector: v }, 0.25, (5, 4), &mut rng)
            .is_err());
    }
}

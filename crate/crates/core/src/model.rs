//! Content network, content-style fusion blocks, autoregressive decoder and
//! the training loss.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix, MEL_MAGIC};
use crate::nn::{AttnMask, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, PositionalEncoding, Postnet, Prenet};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::style::{FeatureExtractor, FeatureSequence, ProjectionExtractor, SpeakerEmbedding, StyleNetwork, StyleRepresentation};
use crate::tensor::Tensor;

/// Phoneme ids of one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("phoneme sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::IndexOutOfRange {
                what: "phoneme vocabulary",
                index: bad,
                size: vocab,
            });
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[T, n_mels]` frame matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram<F> {
    pub frames: Tensor<F>,
}

impl<F: Scalar> MelSpectrogram<F> {
    pub fn new(frames: Tensor<F>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::dim("MelSpectrogram", frames.shape(), &[0, 0]));
        }
        Ok(Self { frames })
    }

    pub fn cast<G: Scalar>(&self) -> MelSpectrogram<G> {
        MelSpectrogram {
            frames: self.frames.cast(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_matrix(path, MEL_MAGIC)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_matrix(path, MEL_MAGIC, &self.frames)
    }
}

/// Stop targets: 1 on the final frame, 0 elsewhere.
pub fn stop_targets<F: Scalar>(len: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(vec![len]);
    if len > 0 {
        t.data_mut()[len - 1] = F::one();
    }
    t
}

/// Phoneme embedding, layer normalisation and scaled position encoding.
#[derive(Clone, Debug)]
pub struct ContentNetwork {
    pub embedding: Embedding,
    pub norm: LayerNorm,
    pub pos: PositionalEncoding,
}

impl ContentNetwork {
    /// `[T_c, d_model]` content sequence.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, c: &PhonemeSequence) -> Result<Var> {
        if c.is_empty() {
            return Err(Error::Empty("phoneme sequence"));
        }
        let e = self.embedding.forward(g, &c.ids)?;
        let e = self.norm.forward(g, e)?;
        let p = self.pos.forward(g, 0, c.len())?;
        g.add(e, p)
    }
}

/// Transformer encoder block followed by cross-attention into the style
/// sequence, fused back through a residual connection. Post-norm throughout.
#[derive(Clone, Debug)]
pub struct FuseBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
}

impl FuseBlock {
    fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, h) = (cfg.d_model, cfg.n_heads);
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, h, false, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, cfg.ln_eps)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_width, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, cfg.ln_eps)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, h, true, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d, cfg.ln_eps)?,
        })
    }

    fn encoder<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, dropout: f64) -> Result<Var> {
        let (a, _) = self.self_attn.forward(g, x, x, x, None)?;
        let a = g.dropout(a, dropout);
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let f = g.dropout(f, dropout);
        let x = g.add(x, f)?;
        self.norm2.forward(g, x)
    }

    /// Returns the refined content and the cross-attention weights `[heads, T_c, T_s]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        style: StyleRepresentation,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        if !style.includes_speaker {
            return Err(Error::Config("fusion expects combined style frames".into()));
        }
        if g.shape(style.frames)[0] == 0 {
            return Err(Error::Empty("style sequence"));
        }
        let x = self.encoder(g, x, dropout)?;
        let (c, w) = self.cross_attn.forward(g, x, style.frames, style.frames, None)?;
        let c = g.dropout(c, dropout);
        let x = g.add(x, c)?;
        Ok((self.norm3.forward(g, x)?, w))
    }

    /// The same block with the cross-attention contribution removed.
    pub fn forward_content_only<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, dropout: f64) -> Result<Var> {
        let x = self.encoder(g, x, dropout)?;
        self.norm3.forward(g, x)
    }
}

/// Applies every block in order, each attending to the same style sequence.
pub fn fuse<F: Scalar>(
    g: &mut Graph<'_, F>,
    blocks: &[FuseBlock],
    x: Var,
    style: StyleRepresentation,
    dropout: f64,
) -> Result<(Var, Vec<Var>)> {
    if blocks.is_empty() {
        return Err(Error::Config("at least one fusion block is required".into()));
    }
    let mut x = x;
    let mut maps = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, w) = b.forward(g, x, style, dropout)?;
        x = y;
        maps.push(w);
    }
    Ok((x, maps))
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, h) = (cfg.d_model, cfg.n_heads);
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, h, false, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, cfg.ln_eps)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, h, false, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, cfg.ln_eps)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_width, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d, cfg.ln_eps)?,
        })
    }

    /// Returns output, self-attention weights and cross-attention weights.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        y: Var,
        memory: Var,
        dropout: f64,
    ) -> Result<(Var, Var, Var)> {
        let t = g.shape(y)[0];
        let mask = AttnMask::causal(t, t, 0);
        let (a, sw) = self.self_attn.forward(g, y, y, y, Some(&mask))?;
        let a = g.dropout(a, dropout);
        let y = g.add(y, a)?;
        let y = self.norm1.forward(g, y)?;
        let (c, cw) = self.cross_attn.forward(g, y, memory, memory, None)?;
        let c = g.dropout(c, dropout);
        let y = g.add(y, c)?;
        let y = self.norm2.forward(g, y)?;
        let f = self.ffn.forward(g, y)?;
        let f = g.dropout(f, dropout);
        let y = g.add(y, f)?;
        Ok((self.norm3.forward(g, y)?, sw, cw))
    }
}

/// Decoder outputs for `T_m` frames.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub mel_pre: Var,
    pub mel_post: Var,
    pub stop_logits: Var,
    /// Named attention weight tensors `[heads, T_q, T_k]`.
    pub attention: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub prenet: Prenet,
    pub pos: PositionalEncoding,
    pub blocks: Vec<DecoderBlock>,
    pub mel_out: Linear,
    pub stop_out: Linear,
    pub postnet: Postnet,
}

impl Decoder {
    /// Teacher-forced decoding of `mel_in [T, n_mels]` (go-frame first)
    /// against the fused content `[T_c, d]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        mel_in: Var,
        fused: Var,
        dropout: f64,
        prenet_dropout: f64,
    ) -> Result<DecoderOutput> {
        let t = g.shape(mel_in)[0];
        if t == 0 {
            return Err(Error::Empty("decoder input"));
        }
        let x = self.prenet.forward(g, mel_in, prenet_dropout)?;
        let p = self.pos.forward(g, 0, t)?;
        let mut y = g.add(x, p)?;
        let mut attention = Vec::with_capacity(2 * self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (out, sw, cw) = b.forward(g, y, fused, dropout)?;
            attention.push((format!("decoder.block{i}.self"), sw));
            attention.push((format!("decoder.block{i}.cross"), cw));
            y = out;
        }
        let mel_pre = self.mel_out.forward(g, y)?;
        let stop = self.stop_out.forward(g, y)?;
        let stop_logits = g.reshape(stop, [t])?;
        let mel_post = self.postnet.forward(g, mel_pre, dropout)?;
        Ok(DecoderOutput {
            mel_pre,
            mel_post,
            stop_logits,
            attention,
        })
    }
}

/// Loss and its three terms (all scalar nodes).
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub pre: Var,
    pub post: Var,
    pub stop: Var,
}

impl LossTerms {
    pub fn values<F: Scalar>(&self, g: &Graph<'_, F>) -> [f64; 4] {
        [self.total, self.pre, self.post, self.stop].map(|v| g.value(v).data()[0].to_f64_lossy())
    }
}

/// `L1(mel_pre) + L1(mel_post) + BCE(stop)`, each a masked mean.
/// `frame_mask` is `[T]` with 1 on real frames.
pub fn tts_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    out: &DecoderOutput,
    target: Var,
    stop_targets: &Tensor<F>,
    frame_mask: Option<&Tensor<F>>,
    pos_weight: f64,
) -> Result<LossTerms> {
    let t = g.shape(target)[0];
    if g.shape(out.mel_pre) != g.shape(target) || stop_targets.shape() != [t] {
        return Err(Error::dim("tts_loss", g.shape(out.mel_pre), g.shape(target)));
    }
    let mel_mask = match frame_mask {
        Some(m) => Some(m.clone().reshape(vec![t, 1])?),
        None => None,
    };
    let pre = g.l1_loss(out.mel_pre, target, mel_mask.as_ref())?;
    let post = g.l1_loss(out.mel_post, target, mel_mask.as_ref())?;
    let stop = g.bce_with_logits(out.stop_logits, stop_targets, F::lit(pos_weight), frame_mask)?;
    let s = g.add(pre, post)?;
    let total = g.add(s, stop)?;
    Ok(LossTerms { total, pre, post, stop })
}

/// One training pair: style reference (also the target), same-speaker reference, text.
#[derive(Clone, Copy, Debug)]
pub struct TrainingInputs<'a, F> {
    pub style_ref: &'a FeatureSequence<F>,
    pub speaker_ref: &'a FeatureSequence<F>,
    pub phonemes: &'a PhonemeSequence,
    pub target: &'a MelSpectrogram<F>,
}

/// The full synthesis model and its parameters.
#[derive(Clone, Debug)]
pub struct LstTts<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub extractor: ProjectionExtractor<F>,
    pub style: StyleNetwork,
    pub content: ContentNetwork,
    pub fusion: Vec<FuseBlock>,
    pub decoder: Decoder,
    /// Mean training speaker embedding, used when no speaker reference is given.
    pub average_speaker: Option<Tensor<F>>,
}

impl<F: Scalar> LstTts<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let style = StyleNetwork::new(&mut store, "style", cfg, &mut rng)?;
        let content = ContentNetwork {
            embedding: Embedding::new(&mut store, "content.embedding", cfg.vocab, cfg.d_model, &mut rng)?,
            norm: LayerNorm::new(&mut store, "content.norm", cfg.d_model, cfg.ln_eps)?,
            pos: PositionalEncoding::new(&mut store, "content.pos", cfg.d_model)?,
        };
        let fusion = (0..cfg.n_blocks)
            .map(|i| FuseBlock::new(&mut store, &format!("fusion.block{i}"), cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder {
            prenet: Prenet::new(&mut store, "decoder.prenet", cfg.n_mels, cfg.prenet_bottleneck, cfg.d_model, cfg.ln_eps, &mut rng)?,
            pos: PositionalEncoding::new(&mut store, "decoder.pos", cfg.d_model)?,
            blocks: (0..cfg.n_blocks)
                .map(|i| DecoderBlock::new(&mut store, &format!("decoder.block{i}"), cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?,
            mel_out: Linear::new(&mut store, "decoder.mel_out", cfg.d_model, cfg.n_mels, &mut rng)?,
            stop_out: Linear::new(&mut store, "decoder.stop_out", cfg.d_model, 1, &mut rng)?,
            postnet: Postnet::new(
                &mut store,
                "decoder.postnet",
                cfg.n_mels,
                cfg.postnet_channels,
                cfg.postnet_kernel,
                cfg.postnet_depth,
                &mut rng,
            )?,
        };
        Ok(Self {
            extractor: ProjectionExtractor::new(cfg.n_mels, cfg.d_f, cfg.extractor_seed),
            config,
            params: store,
            style,
            content,
            fusion,
            decoder,
            average_speaker: None,
        })
    }

    /// The same model in another precision.
    pub fn cast<G: Scalar>(&self) -> LstTts<G> {
        LstTts {
            config: self.config.clone(),
            params: self.params.cast(),
            extractor: ProjectionExtractor {
                projection: self.extractor.projection.cast(),
            },
            style: self.style.clone(),
            content: self.content.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            average_speaker: self.average_speaker.as_ref().map(|t| t.cast()),
        }
    }

    /// Reference features of a mel spectrogram.
    pub fn features(&self, mel: &MelSpectrogram<F>, source_id: &str) -> Result<FeatureSequence<F>> {
        if mel.n_mels() != self.config.n_mels {
            return Err(Error::dim("features", mel.frames.shape(), &[self.config.n_mels]));
        }
        self.extractor.extract(&mel.frames, source_id)
    }

    pub fn check_phonemes(&self, c: &PhonemeSequence) -> Result<()> {
        PhonemeSequence::new(c.ids.clone(), self.config.vocab).map(|_| ())
    }

    /// Prepends the all-zero go frame and drops the last target frame.
    pub fn teacher_forced_input(&self, g: &mut Graph<'_, F>, target: Var) -> Result<Var> {
        let t = g.shape(target)[0];
        let go = g.constant(Tensor::zeros(vec![1, self.config.n_mels]));
        if t <= 1 {
            return Ok(go);
        }
        let prefix = g.narrow(target, 0, 0, t - 1)?;
        g.concat(&[go, prefix], 0)
    }

    pub fn content_encode(&self, g: &mut Graph<'_, F>, c: &PhonemeSequence) -> Result<Var> {
        self.check_phonemes(c)?;
        self.content.forward(g, c)
    }

    /// Training forward: style path with truncation (when `truncation` is
    /// given), fusion, teacher-forced decoding and loss.
    pub fn forward_training<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        inputs: TrainingInputs<'_, F>,
        truncation: Option<&mut R>,
    ) -> Result<(LossTerms, DecoderOutput)> {
        let out = self.forward_teacher_forced(g, inputs, truncation)?;
        let target = g.constant(inputs.target.frames.clone());
        let stops = stop_targets(inputs.target.len());
        let loss = tts_loss(g, &out, target, &stops, None, self.config.stop_pos_weight)?;
        Ok((loss, out))
    }

    /// Decoder outputs for a training pair, without the loss.
    pub fn forward_teacher_forced<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        inputs: TrainingInputs<'_, F>,
        truncation: Option<&mut R>,
    ) -> Result<DecoderOutput> {
        let cfg = &self.config;
        if inputs.target.is_empty() {
            return Err(Error::Empty("target mel"));
        }
        let spk = self.style.speaker_embedding(g, inputs.speaker_ref)?;
        let style = self
            .style
            .forward(g, inputs.style_ref, spk, truncation.map(|r| (cfg.alpha, r)))?;
        let content = self.content_encode(g, inputs.phonemes)?;
        let (fused, fusion_maps) = fuse(g, &self.fusion, content, style, cfg.dropout)?;
        let target = g.constant(inputs.target.frames.clone());
        let mel_in = self.teacher_forced_input(g, target)?;
        let mut out = self.decoder.forward(g, mel_in, fused, cfg.dropout, cfg.prenet_dropout)?;
        for (i, w) in fusion_maps.into_iter().enumerate() {
            out.attention.push((format!("fusion.block{i}.cross"), w));
        }
        Ok(out)
    }

    /// Style-free forward with the cross-attention sublayers removed.
    pub fn forward_unconditioned(
        &self,
        g: &mut Graph<'_, F>,
        c: &PhonemeSequence,
        target: &MelSpectrogram<F>,
    ) -> Result<DecoderOutput> {
        let cfg = &self.config;
        let mut x = self.content_encode(g, c)?;
        for b in &self.fusion {
            x = b.forward_content_only(g, x, cfg.dropout)?;
        }
        let t = g.constant(target.frames.clone());
        let mel_in = self.teacher_forced_input(g, t)?;
        self.decoder.forward(g, mel_in, x, cfg.dropout, cfg.prenet_dropout)
    }

    /// Speaker embedding of a reference, or the stored training average.
    pub fn speaker_vector(&self, g: &mut Graph<'_, F>, speaker_ref: Option<&FeatureSequence<F>>) -> Result<SpeakerEmbedding> {
        match (speaker_ref, &self.average_speaker) {
            (Some(f), _) => self.style.speaker_embedding(g, f),
            (None, Some(avg)) => Ok(SpeakerEmbedding {
                vector: g.constant(avg.clone()),
            }),
            (None, None) => Err(Error::Config(
                "no speaker reference and no average speaker embedding configured".into(),
            )),
        }
    }

    /// Mean speaker embedding over a set of references; stored on the model.
    pub fn set_average_speaker(&mut self, refs: &[FeatureSequence<F>]) -> Result<()> {
        if refs.is_empty() {
            return Err(Error::Empty("speaker references"));
        }
        let d = self.config.d_model;
        let mut acc = vec![0.0f64; d];
        {
            let mut g = Graph::no_grad(&self.params);
            for r in refs {
                let e = self.style.speaker_embedding(&mut g, r)?;
                for (a, v) in acc.iter_mut().zip(g.value(e.vector).data()) {
                    *a += v.to_f64_lossy();
                }
            }
        }
        let n = refs.len() as f64;
        let avg = acc.into_iter().map(|a| F::lit(a / n)).collect();
        self.average_speaker = Some(Tensor::new(vec![d], avg)?);
        Ok(())
    }
}

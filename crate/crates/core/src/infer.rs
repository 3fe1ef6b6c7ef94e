//! Autoregressive synthesis with cached keys/values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{fuse, LstTts, MelSpectrogram, PhonemeSequence};
use crate::scalar::Scalar;
use crate::style::FeatureSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthesisMode {
    /// Styles from a reference utterance.
    Reference,
    /// Styles sampled from the local token codebook.
    Sampled,
}

#[derive(Clone, Debug)]
pub struct SynthesisRequest<F> {
    pub phonemes: PhonemeSequence,
    pub style_ref: Option<FeatureSequence<F>>,
    pub speaker_ref: Option<FeatureSequence<F>>,
    pub mode: SynthesisMode,
    pub seed: u64,
    /// Defaults to `max_frames_per_phoneme * phoneme count`.
    pub max_frames: Option<usize>,
    pub stop_threshold: Option<f64>,
    /// Test hook: the stop logit at this 1-based step is forced to `+inf`.
    pub force_stop_at: Option<usize>,
}

impl<F: Scalar> SynthesisRequest<F> {
    pub fn reference(phonemes: PhonemeSequence, style_ref: FeatureSequence<F>, speaker_ref: Option<FeatureSequence<F>>) -> Self {
        Self {
            phonemes,
            style_ref: Some(style_ref),
            speaker_ref,
            mode: SynthesisMode::Reference,
            seed: 0,
            max_frames: None,
            stop_threshold: None,
            force_stop_at: None,
        }
    }

    pub fn sampled(phonemes: PhonemeSequence, speaker_ref: Option<FeatureSequence<F>>, seed: u64) -> Self {
        Self {
            phonemes,
            style_ref: None,
            speaker_ref,
            mode: SynthesisMode::Sampled,
            seed,
            max_frames: None,
            stop_threshold: None,
            force_stop_at: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, &self.style_ref) {
            (SynthesisMode::Reference, None) => Err(Error::Config("reference mode requires a style reference".into())),
            (SynthesisMode::Sampled, Some(_)) => Err(Error::Config("sampled mode takes no style reference".into())),
            _ => Ok(()),
        }
    }
}

/// Named weights `[heads, T_q, T_k]`.
pub type AttentionMaps<F> = Vec<(String, Tensor<F>)>;

#[derive(Clone, Debug)]
pub struct SynthesisResult<F> {
    /// Post-net frames.
    pub mel: MelSpectrogram<F>,
    /// Index of the frame whose stop probability crossed the threshold;
    /// `None` if decoding hit the frame cap.
    pub stop_frame: Option<usize>,
    pub attention: AttentionMaps<F>,
    pub style_length_used: usize,
}

/// Output of one incremental step.
#[derive(Clone, Debug)]
pub struct StepOutput<F> {
    pub mel_pre: Vec<F>,
    pub mel_post: Vec<F>,
    pub stop_logit: F,
    /// Per decoder block, cross-attention weights `[heads, 1, T_c]`.
    pub cross_weights: Vec<Tensor<F>>,
}

#[derive(Clone, Debug)]
struct BlockCache<F> {
    self_k: Vec<F>,
    self_v: Vec<F>,
    cross_k: Tensor<F>,
    cross_v: Tensor<F>,
}

/// Decoder state for one utterance: per-block key/value caches and the
/// recent inputs of every post-net layer.
#[derive(Clone, Debug)]
pub struct DecodeState<F> {
    d_model: usize,
    n_mels: usize,
    len: usize,
    blocks: Vec<BlockCache<F>>,
    postnet_history: Vec<Tensor<F>>,
}

fn rows<F: Scalar>(data: &[F], d: usize) -> Tensor<F> {
    Tensor::new(vec![data.len() / d, d], data.to_vec()).expect("whole rows")
}

impl<F: Scalar> DecodeState<F> {
    /// Projects the fused content `[T_c, d]` into every block's cross-attention keys and values.
    pub fn new(model: &LstTts<F>, fused: &Tensor<F>) -> Result<Self> {
        let cfg = &model.config;
        if fused.rank() != 2 || fused.cols() != cfg.d_model || fused.rows() == 0 {
            return Err(Error::dim("DecodeState::new", fused.shape(), &[0, cfg.d_model]));
        }
        let mut g = Graph::no_grad(&model.params);
        let mem = g.constant(fused.clone());
        let mut blocks = Vec::with_capacity(model.decoder.blocks.len());
        for b in &model.decoder.blocks {
            let (k, v) = b.cross_attn.project_kv(&mut g, mem, mem)?;
            blocks.push(BlockCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: g.value(k).clone(),
                cross_v: g.value(v).clone(),
            });
        }
        let pn = &model.decoder.postnet;
        let postnet_history = pn
            .layers
            .iter()
            .map(|l| Tensor::zeros(vec![pn.kernel - 1, l.in_dim / pn.kernel]))
            .collect();
        Ok(Self {
            d_model: cfg.d_model,
            n_mels: cfg.n_mels,
            len: 0,
            blocks,
            postnet_history,
        })
    }

    /// Number of frames decoded so far (the self-attention cache length).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The all-zero go frame that starts decoding.
    pub fn go_frame(&self) -> Vec<F> {
        vec![F::zero(); self.n_mels]
    }

    /// Feeds `frame` as decoder input at position `len()`; equivalent to a
    /// full teacher-forced pass over the prefix, restricted to its last frame.
    pub fn step(&mut self, model: &LstTts<F>, frame: &[F]) -> Result<StepOutput<F>> {
        let cfg = &model.config;
        if frame.len() != self.n_mels
            || cfg.n_mels != self.n_mels
            || cfg.d_model != self.d_model
            || model.decoder.blocks.len() != self.blocks.len()
        {
            return Err(Error::Config("decode state does not match the model".into()));
        }
        let d = self.d_model;
        let pos = self.len;
        let mut g = Graph::no_grad(&model.params);
        let x = g.constant(Tensor::new(vec![1, self.n_mels], frame.to_vec())?);
        let x = model.decoder.prenet.forward(&mut g, x, 0.0)?;
        let p = model.decoder.pos.forward(&mut g, pos, 1)?;
        let mut y = g.add(x, p)?;
        let mut cross_weights = Vec::with_capacity(self.blocks.len());
        for (b, cache) in model.decoder.blocks.iter().zip(self.blocks.iter_mut()) {
            let sa = &b.self_attn;
            let q = sa.q.forward(&mut g, y)?;
            let (k, v) = sa.project_kv(&mut g, y, y)?;
            cache.self_k.extend_from_slice(g.value(k).data());
            cache.self_v.extend_from_slice(g.value(v).data());
            let kc = g.constant(rows(&cache.self_k, d));
            let vc = g.constant(rows(&cache.self_v, d));
            let (a, _) = sa.attend(&mut g, q, kc, vc, None)?;
            let s = g.add(y, a)?;
            let y1 = b.norm1.forward(&mut g, s)?;
            let q = b.cross_attn.q.forward(&mut g, y1)?;
            let ck = g.constant(cache.cross_k.clone());
            let cv = g.constant(cache.cross_v.clone());
            let (c, w) = b.cross_attn.attend(&mut g, q, ck, cv, None)?;
            cross_weights.push(g.value(w).clone());
            let s = g.add(y1, c)?;
            let y2 = b.norm2.forward(&mut g, s)?;
            let f = b.ffn.forward(&mut g, y2)?;
            let s = g.add(y2, f)?;
            y = b.norm3.forward(&mut g, s)?;
        }
        let mel_pre = model.decoder.mel_out.forward(&mut g, y)?;
        let stop = model.decoder.stop_out.forward(&mut g, y)?;
        let correction = self.postnet_step(&mut g, model, mel_pre)?;
        let mel_post = g.add(mel_pre, correction)?;
        self.len += 1;
        Ok(StepOutput {
            mel_pre: g.value(mel_pre).data().to_vec(),
            mel_post: g.value(mel_post).data().to_vec(),
            stop_logit: g.value(stop).data()[0],
            cross_weights,
        })
    }

    fn postnet_step(&mut self, g: &mut Graph<'_, F>, model: &LstTts<F>, mel_pre: Var) -> Result<Var> {
        let pn = &model.decoder.postnet;
        let n = pn.layers.len();
        let mut h = mel_pre;
        for (i, (layer, hist)) in pn.layers.iter().zip(self.postnet_history.iter_mut()).enumerate() {
            let cur = g.value(h).clone();
            let window = Tensor::concat(&[&*hist, &cur], 0)?;
            *hist = window.narrow(0, 1, pn.kernel - 1)?;
            let flat = window.reshape(vec![1, layer.in_dim])?;
            let u = g.constant(flat);
            h = layer.forward(g, u)?;
            if i + 1 < n {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Runs the style, content and fusion stages; returns the fused content,
/// the style length and the fusion cross-attention maps.
pub fn encode_request<F: Scalar>(model: &LstTts<F>, req: &SynthesisRequest<F>) -> Result<(Tensor<F>, usize, AttentionMaps<F>)> {
    req.validate()?;
    let cfg = &model.config;
    let mut g = Graph::no_grad(&model.params);
    let spk = model.speaker_vector(&mut g, req.speaker_ref.as_ref())?;
    let style = match (&req.mode, &req.style_ref) {
        (SynthesisMode::Reference, Some(r)) => model.style.forward(&mut g, r, spk, None::<(usize, &mut ChaCha8Rng)>)?,
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
            model.style.sample_styles(
                &mut g,
                spk,
                cfg.beta,
                (cfg.sample_length_min, cfg.sample_length_max),
                &mut rng,
            )?
        }
    };
    let style_len = g.shape(style.frames)[0];
    let content = model.content_encode(&mut g, &req.phonemes)?;
    let (fused, maps) = fuse(&mut g, &model.fusion, content, style, 0.0)?;
    let maps = maps
        .into_iter()
        .enumerate()
        .map(|(i, w)| (format!("fusion.block{i}.cross"), g.value(w).clone()))
        .collect();
    Ok((g.value(fused).clone(), style_len, maps))
}

/// Frame-by-frame synthesis feeding back post-net frames.
pub fn synthesize<F: Scalar>(model: &LstTts<F>, req: &SynthesisRequest<F>) -> Result<SynthesisResult<F>> {
    let cfg = &model.config;
    let (fused, style_length_used, mut attention) = encode_request(model, req)?;
    let max_frames = req
        .max_frames
        .unwrap_or(cfg.max_frames_per_phoneme * req.phonemes.len());
    if max_frames == 0 {
        return Err(Error::Config("max_frames must be positive".into()));
    }
    let threshold = req.stop_threshold.unwrap_or(cfg.stop_threshold);
    let mut state = DecodeState::new(model, &fused)?;
    let mut frame = state.go_frame();
    let mut out: Vec<F> = Vec::new();
    let mut cross: Vec<Vec<F>> = vec![Vec::new(); model.decoder.blocks.len()];
    let mut stop_frame = None;
    for t in 0..max_frames {
        let mut s = state.step(model, &frame)?;
        if req.force_stop_at == Some(t + 1) {
            s.stop_logit = F::infinity();
        }
        out.extend_from_slice(&s.mel_post);
        for (acc, w) in cross.iter_mut().zip(&s.cross_weights) {
            acc.extend_from_slice(w.data());
        }
        if 1.0 / (1.0 + (-s.stop_logit.to_f64_lossy()).exp()) > threshold {
            stop_frame = Some(t);
            break;
        }
        frame = s.mel_post;
    }
    let t_out = out.len() / cfg.n_mels;
    let (h, tc) = (cfg.n_heads, fused.rows());
    for (i, acc) in cross.into_iter().enumerate() {
        // Collected as [T_out][heads][T_c]; reorder to [heads, T_out, T_c].
        let w = Tensor::new(vec![t_out, h, tc], acc)?.permute(&[1, 0, 2])?;
        attention.push((format!("decoder.block{i}.cross"), w));
    }
    Ok(SynthesisResult {
        mel: MelSpectrogram::new(Tensor::new(vec![t_out, cfg.n_mels], out)?)?,
        stop_frame,
        attention,
        style_length_used,
    })
}

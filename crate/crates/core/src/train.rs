//! Seeded optimisation loop, batch loss and metrics logging.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::PathBuf;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::batch::{pad_batch, Batch, BatchItem};
use crate::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::corpus::{Corpus, ExampleSampler, Split};
use crate::error::{Error, Result};
use crate::model::{tts_loss, DecoderOutput, LossTerms, LstTts, TrainingInputs};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::style::FeatureSequence;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total step count; a resumed run continues up to this value.
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Metrics line every this many steps (0 disables).
    pub log_interval: u64,
    /// Checkpoint every this many steps (0 disables); always written at the end.
    pub ckpt_interval: u64,
    pub metrics_path: Option<PathBuf>,
    pub ckpt_path: Option<PathBuf>,
    /// Random style-prefix truncation during training.
    pub truncate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 7,
            log_interval: 10,
            ckpt_interval: 0,
            metrics_path: None,
            ckpt_path: None,
            truncate: true,
        }
    }
}

fn pad_rows<F: Scalar>(g: &mut Graph<'_, F>, x: Var, rows: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape[0] == rows {
        return Ok(x);
    }
    let mut pad_shape = shape;
    pad_shape[0] = rows - pad_shape[0];
    let z = g.constant(Tensor::zeros(pad_shape));
    g.concat(&[x, z], 0)
}

fn pad_output<F: Scalar>(g: &mut Graph<'_, F>, out: DecoderOutput, rows: usize) -> Result<DecoderOutput> {
    Ok(DecoderOutput {
        mel_pre: pad_rows(g, out.mel_pre, rows)?,
        mel_post: pad_rows(g, out.mel_post, rows)?,
        stop_logits: pad_rows(g, out.stop_logits, rows)?,
        attention: out.attention,
    })
}

fn batch_row<F: Scalar>(t: &Tensor<F>, b: usize) -> Result<Tensor<F>> {
    let shape = t.shape()[1..].to_vec();
    t.narrow(0, b, 1)?.reshape(shape)
}

/// Mean over items of the masked loss, each item decoded on its own real
/// frames and compared against the padded targets under its frame mask.
pub fn batch_loss<F: Scalar, R: Rng + ?Sized>(
    model: &LstTts<F>,
    g: &mut Graph<'_, F>,
    batch: &Batch<F>,
    mut truncation: Option<&mut R>,
) -> Result<LossTerms> {
    let tm = batch.max_frames();
    let mut sum: Option<[Var; 4]> = None;
    for b in 0..batch.len() {
        let item = batch.item(b)?;
        let inputs = TrainingInputs {
            style_ref: &item.style_ref,
            speaker_ref: &item.speaker_ref,
            phonemes: &item.phonemes,
            target: &item.target,
        };
        let out = model.forward_teacher_forced(g, inputs, truncation.as_deref_mut())?;
        let out = pad_output(g, out, tm)?;
        let target = g.constant(batch_row(&batch.targets, b)?);
        let stops = batch_row(&batch.stop_targets, b)?;
        let mask = batch_row(&batch.frame_mask, b)?;
        let l = tts_loss(g, &out, target, &stops, Some(&mask), model.config.stop_pos_weight)?;
        let terms = [l.total, l.pre, l.post, l.stop];
        sum = Some(match sum {
            None => terms,
            Some(s) => {
                let mut next = s;
                for (n, t) in next.iter_mut().zip(terms) {
                    *n = g.add(*n, t)?;
                }
                next
            }
        });
    }
    let s = sum.ok_or(Error::Empty("batch"))?;
    let k = F::lit(1.0 / batch.len() as f64);
    let [total, pre, post, stop] = s.map(|v| g.scale(v, k));
    Ok(LossTerms { total, pre, post, stop })
}

/// Losses for every executed step, `[total, pre, post, stop]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub first_step: u64,
    pub losses: Vec<[f64; 4]>,
}

impl TrainReport {
    /// Total loss after `step` (1-based global step).
    pub fn total_at(&self, step: u64) -> Option<f64> {
        let i = step.checked_sub(self.first_step + 1)?;
        self.losses.get(i as usize).map(|l| l[0])
    }
}

/// `step,loss_total,loss_pre,loss_post,loss_stop`
pub fn metrics_line(step: u64, l: &[f64; 4]) -> String {
    format!("{step},{},{},{},{}", l[0], l[1], l[2], l[3])
}

pub struct Trainer<F: Scalar> {
    pub model: LstTts<F>,
    pub adam: AdamState<F>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    features: Vec<FeatureSequence<F>>,
    sampler: ExampleSampler,
    batch_size: usize,
    truncate: bool,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: LstTts<F>, corpus: &Corpus<F>, cfg: &TrainConfig) -> Result<Self> {
        let adam = AdamState::new(&model.params, cfg.adam);
        Self::assemble(model, adam, ChaCha8Rng::seed_from_u64(cfg.seed), 0, corpus, cfg)
    }

    /// Continues from a checkpoint with its optimizer and rng state.
    pub fn resume(ckpt: Checkpoint<F>, corpus: &Corpus<F>, cfg: &TrainConfig) -> Result<Self> {
        let adam = ckpt
            .adam
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        let rng = ckpt
            .rng
            .ok_or_else(|| Error::Config("checkpoint has no rng state".into()))?
            .restore();
        Self::assemble(ckpt.model, adam, rng, ckpt.step, corpus, cfg)
    }

    fn assemble(
        model: LstTts<F>,
        adam: AdamState<F>,
        rng: ChaCha8Rng,
        step: u64,
        corpus: &Corpus<F>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if corpus.spec.vocab > model.config.vocab || corpus.spec.n_mels != model.config.n_mels {
            return Err(Error::Config(format!(
                "corpus (vocab {}, n_mels {}) does not fit model (vocab {}, n_mels {})",
                corpus.spec.vocab, corpus.spec.n_mels, model.config.vocab, model.config.n_mels
            )));
        }
        let features = corpus
            .utterances
            .iter()
            .map(|u| model.features(&u.mel, &u.utt_id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sampler: ExampleSampler::new(corpus)?,
            model,
            adam,
            rng,
            step,
            features,
            batch_size: cfg.batch_size,
            truncate: cfg.truncate,
        })
    }

    pub fn features(&self) -> &[FeatureSequence<F>] {
        &self.features
    }

    /// Draws the next batch from the training rng.
    pub fn next_batch(&mut self, corpus: &Corpus<F>) -> Result<Batch<F>> {
        let items: Vec<BatchItem<F>> = (0..self.batch_size)
            .map(|_| {
                let ex = self.sampler.sample(&mut self.rng);
                let u = &corpus.utterances[ex.style];
                BatchItem {
                    utt_id: u.utt_id.clone(),
                    speaker_utt_id: corpus.utterances[ex.speaker].utt_id.clone(),
                    phonemes: u.phonemes.clone(),
                    target: u.mel.clone(),
                    style_ref: self.features[ex.style].clone(),
                    speaker_ref: self.features[ex.speaker].clone(),
                }
            })
            .collect();
        pad_batch(&items)
    }

    /// One optimisation step; returns `[total, pre, post, stop]` before the update.
    pub fn train_step(&mut self, corpus: &Corpus<F>) -> Result<[f64; 4]> {
        let batch = self.next_batch(corpus)?;
        let dropout_seed = self.rng.next_u64();
        let (values, grads) = {
            let mut g = Graph::training(&self.model.params, dropout_seed);
            let trunc = if self.truncate { Some(&mut self.rng) } else { None };
            let loss = batch_loss(&self.model, &mut g, &batch, trunc)?;
            let values = loss.values(&g);
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: self.step + 1,
                    utt_ids: batch.utt_ids.clone(),
                });
            }
            let gr = g.backward(loss.total)?;
            (values, g.param_grads(&gr))
        };
        self.model.params.accumulate_grads(grads)?;
        adam_step(&mut self.model.params, &mut self.adam)?;
        self.step += 1;
        Ok(values)
    }

    /// Stores the training-split mean speaker embedding on the model.
    pub fn refresh_average_speaker(&mut self, corpus: &Corpus<F>) -> Result<()> {
        let refs: Vec<FeatureSequence<F>> = corpus
            .indices(Split::Train)
            .into_iter()
            .map(|i| self.features[i].clone())
            .collect();
        self.model.set_average_speaker(&refs)
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            model: self.model.clone(),
            adam: Some(self.adam.clone()),
            rng: Some(RngState::capture(&self.rng)),
            step: self.step,
        }
    }

    /// Runs until `cfg.steps`, logging and checkpointing as configured.
    pub fn run(&mut self, corpus: &Corpus<F>, cfg: &TrainConfig) -> Result<TrainReport> {
        let mut metrics = match &cfg.metrics_path {
            None => None,
            Some(p) => {
                let f = if self.step == 0 {
                    File::create(p)
                } else {
                    OpenOptions::new().append(true).create(true).open(p)
                };
                Some((f.map_err(|e| Error::io(p, e))?, p.clone()))
            }
        };
        let mut report = TrainReport {
            first_step: self.step,
            losses: Vec::new(),
        };
        while self.step < cfg.steps {
            let values = self.train_step(corpus)?;
            report.losses.push(values);
            if let Some((f, p)) = metrics.as_mut() {
                if cfg.log_interval > 0 && self.step.is_multiple_of(cfg.log_interval) {
                    writeln!(f, "{}", metrics_line(self.step, &values)).map_err(|e| Error::io(p.as_path(), e))?;
                }
            }
            if let Some(p) = &cfg.ckpt_path {
                if cfg.ckpt_interval > 0 && self.step.is_multiple_of(cfg.ckpt_interval) && self.step < cfg.steps {
                    self.refresh_average_speaker(corpus)?;
                    save_checkpoint(p, &self.checkpoint())?;
                }
            }
        }
        self.refresh_average_speaker(corpus)?;
        if let Some(p) = &cfg.ckpt_path {
            save_checkpoint(p, &self.checkpoint())?;
        }
        Ok(report)
    }
}

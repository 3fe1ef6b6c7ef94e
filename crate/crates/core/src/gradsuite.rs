//! Finite-difference checks over every differentiable op and the composed
//! blocks, in 64-bit mode.
//!
//! Op checks difference in `f64`. Block checks compare `f64` analytic
//! gradients with differences taken in [`crate::extended::Extended`] precision, where
//! roundoff is far below the tolerance even for tiny gradient entries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_extended, GradCheckReport, Graph, Objective, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{stop_targets, tts_loss, LstTts, MelSpectrogram, PhonemeSequence, TrainingInputs};
use crate::nn::{AttnMask, Lstm, MultiHeadAttention, Postnet, Prenet};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::style::{FeatureSequence, StyleNetwork, StyleRepresentation};
use crate::tensor::Tensor;

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

/// Noise added to initial parameters in block checks.
const PERTURB_SD: f64 = 0.1;
/// Parameter coordinates sampled per tensor.
const FUSION_COORDS: usize = 16;
const FULL_MODEL_COORDS: usize = 12;

/// Worst result of one check across seeds.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst_values: (f64, f64),
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_error < SUITE_TOL
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `sum(x * R)` with a fixed random `R`, so every output coordinate matters.
fn project<F: Scalar>(g: &mut Graph<'_, F>, x: Var, seed: u64) -> Result<Var> {
    let r = g.constant(randn(g.shape(x), seed ^ 0x9e37_79b9).cast());
    let p = g.mul(x, r)?;
    Ok(g.sum_all(p))
}

/// Adds Gaussian noise to every parameter, so zero-initialised
/// projections stop hiding gradients.
fn perturb(store: &mut ParamStore<f64>, seed: u64, sd: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let noise: Tensor<f64> = Tensor::randn(p.value.shape().to_vec(), sd, &mut rng);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += *n;
        }
    }
}


type OpCheck = fn(u64) -> Result<GradCheckReport>;

fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("add_broadcast", |s| {
            grad_check(
                |g, v| {
                    let y = g.add(v[0], v[1])?;
                    project(g, y, s)
                },
                &[randn(&[3, 1, 4], s), randn(&[3, 5, 4], s + 1)],
                SUITE_EPS,
            )
        }),
        ("sub_broadcast", |s| {
            grad_check(
                |g, v| {
                    let y = g.sub(v[0], v[1])?;
                    project(g, y, s)
                },
                &[randn(&[2, 3], s), randn(&[3], s + 1)],
                SUITE_EPS,
            )
        }),
        ("mul_broadcast", |s| {
            grad_check(
                |g, v| {
                    let y = g.mul(v[0], v[1])?;
                    project(g, y, s)
                },
                &[randn(&[2, 3], s), randn(&[2, 1], s + 1)],
                SUITE_EPS,
            )
        }),
        ("scale", |s| {
            grad_check(
                |g, v| {
                    let y = g.scale(v[0], -1.7);
                    project(g, y, s)
                },
                &[randn(&[4], s)],
                SUITE_EPS,
            )
        }),
        ("relu", |s| {
            grad_check(
                |g, v| {
                    let y = g.relu(v[0]);
                    project(g, y, s)
                },
                &[randn(&[3, 4], s)],
                SUITE_EPS,
            )
        }),
        ("sigmoid", |s| {
            grad_check(
                |g, v| {
                    let y = g.sigmoid(v[0]);
                    project(g, y, s)
                },
                &[randn(&[5], s)],
                SUITE_EPS,
            )
        }),
        ("tanh", |s| {
            grad_check(
                |g, v| {
                    let y = g.tanh(v[0]);
                    project(g, y, s)
                },
                &[randn(&[5], s)],
                SUITE_EPS,
            )
        }),
        ("exp", |s| {
            grad_check(
                |g, v| {
                    let y = g.exp(v[0]);
                    project(g, y, s)
                },
                &[randn(&[5], s)],
                SUITE_EPS,
            )
        }),
        ("log", |s| {
            grad_check(
                |g, v| {
                    let y = g.log(v[0])?;
                    project(g, y, s)
                },
                &[randn(&[5], s).map(|x| x.abs() + 0.5)],
                SUITE_EPS,
            )
        }),
        ("matmul_batched", |s| {
            grad_check(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    project(g, y, s)
                },
                &[randn(&[2, 3, 4], s), randn(&[4, 2], s + 1)],
                SUITE_EPS,
            )
        }),
        ("reshape_permute_transpose", |s| {
            grad_check(
                |g, v| {
                    let y = g.reshape(v[0], [2, 3, 2])?;
                    let y = g.permute(y, &[2, 0, 1])?;
                    let y = g.transpose(y)?;
                    project(g, y, s)
                },
                &[randn(&[3, 4], s)],
                SUITE_EPS,
            )
        }),
        ("softmax", |s| {
            grad_check(
                |g, v| {
                    let y = g.softmax(v[0], 1)?;
                    project(g, y, s)
                },
                &[randn(&[3, 5], s)],
                SUITE_EPS,
            )
        }),
        ("masked_softmax", |s| {
            let mask = AttnMask::causal(4, 4, 0);
            grad_check(
                move |g, v| {
                    let y = g.mask_fill_neg_inf(v[0], &mask.allowed, &[4, 4])?;
                    let y = g.softmax(y, 2)?;
                    project(g, y, s)
                },
                &[randn(&[2, 4, 4], s)],
                SUITE_EPS,
            )
        }),
        ("layer_norm", |s| {
            grad_check(
                |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    project(g, y, s)
                },
                &[randn(&[3, 6], s), randn(&[6], s + 1), randn(&[6], s + 2)],
                SUITE_EPS,
            )
        }),
        ("reductions", |s| {
            grad_check(
                |g, v| {
                    let a = g.sum_axis(v[0], 1)?;
                    let b = g.mean_axis(v[0], 0)?;
                    let c = g.mean_all(v[0])?;
                    let pa = project(g, a, s)?;
                    let pb = project(g, b, s + 1)?;
                    let t = g.add(pa, pb)?;
                    g.add(t, c)
                },
                &[randn(&[3, 4], s)],
                SUITE_EPS,
            )
        }),
        ("narrow_concat", |s| {
            grad_check(
                |g, v| {
                    let a = g.narrow(v[0], 0, 1, 2)?;
                    let y = g.concat(&[a, v[1], a], 0)?;
                    project(g, y, s)
                },
                &[randn(&[4, 3], s), randn(&[2, 3], s + 1)],
                SUITE_EPS,
            )
        }),
        ("embedding", |s| {
            grad_check(
                |g, v| {
                    let y = g.embedding(v[0], &[2, 0, 2, 4])?;
                    project(g, y, s)
                },
                &[randn(&[5, 3], s)],
                SUITE_EPS,
            )
        }),
        ("avg_pool_1d", |s| {
            grad_check(
                |g, v| {
                    let y = g.avg_pool_1d(v[0], 4, 2)?;
                    project(g, y, s)
                },
                &[randn(&[11, 3], s)],
                SUITE_EPS,
            )
        }),
        ("unfold_causal", |s| {
            grad_check(
                |g, v| {
                    let y = g.unfold_causal(v[0], 3)?;
                    project(g, y, s)
                },
                &[randn(&[5, 2], s)],
                SUITE_EPS,
            )
        }),
        ("l1_loss_masked", |s| {
            let mask = Tensor::from_f64(vec![4, 1], &[1., 1., 1., 0.]).expect("shape");
            grad_check(
                move |g, v| g.l1_loss(v[0], v[1], Some(&mask)),
                &[randn(&[4, 3], s), randn(&[4, 3], s + 1)],
                SUITE_EPS,
            )
        }),
        ("bce_with_logits", |s| {
            let targets = Tensor::from_f64(vec![5], &[0., 0., 1., 0., 1.]).expect("shape");
            let mask = Tensor::from_f64(vec![5], &[1., 1., 1., 1., 0.]).expect("shape");
            grad_check(
                move |g, v| g.bce_with_logits(v[0], &targets, 6.0, Some(&mask)),
                &[randn(&[5], s).map(|x| 3.0 * x)],
                SUITE_EPS,
            )
        }),
    ]
}

struct Mha {
    m: MultiHeadAttention,
    mask: AttnMask,
    seed: u64,
}

impl Objective for Mha {
    fn eval<F: Scalar>(&self, g: &mut Graph<'_, F>, v: &[Var]) -> Result<Var> {
        let (out, _) = self.m.forward(g, v[0], v[1], v[1], Some(&self.mask))?;
        project(g, out, self.seed)
    }
}

struct LstmCheck {
    l: Lstm,
    seed: u64,
}

impl Objective for LstmCheck {
    fn eval<F: Scalar>(&self, g: &mut Graph<'_, F>, v: &[Var]) -> Result<Var> {
        let h = self.l.forward(g, v[0])?;
        project(g, h, self.seed)
    }
}

struct PrenetCheck {
    p: Prenet,
    seed: u64,
}

impl Objective for PrenetCheck {
    fn eval<F: Scalar>(&self, g: &mut Graph<'_, F>, v: &[Var]) -> Result<Var> {
        let y = self.p.forward(g, v[0], 0.0)?;
        project(g, y, self.seed)
    }
}

struct PostnetCheck {
    p: Postnet,
    seed: u64,
}

impl Objective for PostnetCheck {
    fn eval<F: Scalar>(&self, g: &mut Graph<'_, F>, v: &[Var]) -> Result<Var> {
        let y = self.p.forward(g, v[0], 0.0)?;
        project(g, y, self.seed)
    }
}

/// Features are extractor outputs (constants); only parameters are checked.
struct StyleCheck {
    net: StyleNetwork,
    style_ref: FeatureSequence<f64>,
    speaker_ref: FeatureSequence<f64>,
    seed: u64,
}

impl Objective for StyleCheck {
    fn eval<F: Scalar>(&self, g: &mut Graph<'_, F>, _: &[Var]) -> Result<Var> {
        let e = self.net.speaker_embedding(g, &self.speaker_ref.cast())?;
        let st = self.net.forward(g, &self.style_ref.cast(), e, None::<(usize, &mut ChaCha8Rng)>)?;
        project(g, st.frames, self.seed)
    }
}

struct FusionCheck {
    model: LstTts<f64>,
    text: PhonemeSequence,
    seed: u64,
}

impl Objective for FusionCheck {
    fn eval<F: Scalar>(&self, g: &mut Graph<'_, F>, v: &[Var]) -> Result<Var> {
        let x = self.model.content.forward(g, &self.text)?;
        let style = StyleRepresentation {
            frames: v[0],
            includes_speaker: true,
        };
        let (y, _) = self.model.fusion[0].forward(g, x, style, 0.0)?;
        project(g, y, self.seed)
    }
}

struct FullModelCheck {
    model: LstTts<f64>,
    text: PhonemeSequence,
    target: MelSpectrogram<f64>,
    style_ref: FeatureSequence<f64>,
    speaker_ref: FeatureSequence<f64>,
}

impl Objective for FullModelCheck {
    fn eval<F: Scalar>(&self, g: &mut Graph<'_, F>, _: &[Var]) -> Result<Var> {
        let model: LstTts<F> = self.model.cast();
        let target = self.target.cast();
        let (sty, spk) = (self.style_ref.cast(), self.speaker_ref.cast());
        let inputs = TrainingInputs {
            style_ref: &sty,
            speaker_ref: &spk,
            phonemes: &self.text,
            target: &target,
        };
        let out = model.forward_teacher_forced(g, inputs, None::<&mut ChaCha8Rng>)?;
        let t = g.constant(target.frames.clone());
        let stops = stop_targets(target.len());
        Ok(tts_loss(g, &out, t, &stops, None, model.config.stop_pos_weight)?.total)
    }
}

fn features(rows: usize, d: usize, seed: u64, id: &str) -> FeatureSequence<f64> {
    FeatureSequence {
        frames: randn(&[rows, d], seed).map(|v| v.tanh()),
        source_id: id.into(),
    }
}

fn block_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("multi_head_attention", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let m = MultiHeadAttention::new(&mut store, "mha", 4, 2, false, &mut rng)?;
            let obj = Mha {
                m,
                mask: AttnMask::causal(3, 3, 0),
                seed: s,
            };
            let inputs = [randn(&[3, 4], s + 1), randn(&[3, 4], s + 2)];
            grad_check_extended(&obj, &store, &inputs, SUITE_EPS, None, s)
        }),
        ("lstm", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let l = Lstm::new(&mut store, "lstm", 2, 3, &mut rng)?;
            let obj = LstmCheck { l, seed: s };
            grad_check_extended(&obj, &store, &[randn(&[4, 2], s + 1)], SUITE_EPS, None, s)
        }),
        ("prenet", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let p = Prenet::new(&mut store, "prenet", 4, 3, 6, 1e-5, &mut rng)?;
            let obj = PrenetCheck { p, seed: s };
            grad_check_extended(&obj, &store, &[randn(&[5, 4], s + 1)], SUITE_EPS, None, s)
        }),
        ("postnet", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let p = Postnet::new(&mut store, "postnet", 4, 5, 3, 3, &mut rng)?;
            perturb(&mut store, s + 7, PERTURB_SD);
            let obj = PostnetCheck { p, seed: s };
            grad_check_extended(&obj, &store, &[randn(&[6, 4], s + 1)], SUITE_EPS, None, s)
        }),
        ("style_network", |s| {
            let cfg = ModelConfig::micro();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let net = StyleNetwork::new(&mut store, "style", &cfg, &mut rng)?;
            let obj = StyleCheck {
                net,
                style_ref: features(9, cfg.d_f, s + 1, "ref"),
                speaker_ref: features(5, cfg.d_f, s + 2, "spk"),
                seed: s,
            };
            grad_check_extended(&obj, &store, &[], SUITE_EPS, None, s)
        }),
        ("fusion_block", |s| {
            let mut model = LstTts::<f64>::new(ModelConfig {
                init_seed: s,
                ..ModelConfig::micro()
            })?;
            perturb(&mut model.params, s + 3, PERTURB_SD);
            let style = randn(&[4, model.config.d_model], s + 1);
            let obj = FusionCheck {
                text: PhonemeSequence::new(vec![1, 3, 0], model.config.vocab)?,
                model,
                seed: s,
            };
            grad_check_extended(&obj, &obj.model.params, &[style], SUITE_EPS, Some(FUSION_COORDS), s)
        }),
        ("full_model_tts_loss", |s| {
            let mut model = LstTts::<f64>::new(ModelConfig {
                init_seed: s,
                ..ModelConfig::micro()
            })?;
            perturb(&mut model.params, s + 3, PERTURB_SD);
            let cfg = model.config.clone();
            let obj = FullModelCheck {
                text: PhonemeSequence::new(vec![1, 3, 0, 2], cfg.vocab)?,
                target: MelSpectrogram::new(randn(&[5, cfg.n_mels], s + 1))?,
                style_ref: features(7, cfg.d_f, s + 2, "sty"),
                speaker_ref: features(6, cfg.d_f, s + 4, "spk"),
                model,
            };
            grad_check_extended(&obj, &obj.model.params, &[], SUITE_EPS, Some(FULL_MODEL_COORDS), s)
        }),
    ]
}

/// Names of every check in suite order.
pub fn suite_names() -> Vec<&'static str> {
    op_checks().into_iter().chain(block_checks()).map(|(n, _)| n).collect()
}

/// Runs every check on every seed; one entry per check, worst over seeds.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<SuiteEntry>> {
    op_checks()
        .into_iter()
        .chain(block_checks())
        .map(|(name, check)| {
            let mut entry = SuiteEntry {
                name,
                max_rel_error: 0.0,
                checked: 0,
                excluded: 0,
                worst_values: (0.0, 0.0),
            };
            for &s in seeds {
                let r = check(s)?;
                if r.max_rel_error >= entry.max_rel_error {
                    entry.max_rel_error = r.max_rel_error;
                    entry.worst_values = r.worst_values;
                }
                entry.checked += r.checked;
                entry.excluded += r.excluded.len();
            }
            Ok(entry)
        })
        .collect()
}

//! Run configuration, attention dumps and the desk-scale proxy metrics.
//!
//! The listening-test, ASR and emotion-recognition numbers of full-scale
//! systems need pretrained recognisers, human raters and large corpora.
//! Here they are replaced by two oracle-backed proxies on the toy corpus:
//! speaking-rate transfer and template-decoded content accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_kv_lines, ModelConfig};
use crate::corpus::{phoneme_accuracy, Corpus, CorpusSpec, Split};
use crate::error::{Error, Result};
use crate::infer::{synthesize, SynthesisRequest};
use crate::model::LstTts;
use crate::optim::AdamConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

/// Everything a CLI run needs, from `key = value` text plus overrides.
///
/// Model keys are bare (`d_model = 64`); corpus keys take a `corpus.`
/// prefix, optimisation keys `train.`, decoding limits `infer.`, metric
/// trial counts `eval.`. `preset = desk|full|micro` picks the base model
/// configuration and is applied before any other key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub max_frames: Option<usize>,
    pub eval_trials: usize,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            model: ModelConfig::desk(),
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            max_frames: None,
            eval_trials: 10,
            eval_seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "preset" => {
                self.model = match value {
                    "desk" => ModelConfig::desk(),
                    "full" => ModelConfig::full(),
                    "micro" => ModelConfig::micro(),
                    _ => return Err(Error::Config(format!("unknown preset `{value}`"))),
                };
                self.preset = value.to_string();
            }
            "seed" | "train.seed" => t.seed = parse_value(key, value)?,
            "train.steps" => t.steps = parse_value(key, value)?,
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.lr" => t.adam.lr = parse_value(key, value)?,
            "train.beta1" => t.adam.beta1 = parse_value(key, value)?,
            "train.beta2" => t.adam.beta2 = parse_value(key, value)?,
            "train.eps" => t.adam.eps = parse_value(key, value)?,
            "train.clip_norm" => {
                t.adam.clip_norm = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "train.log_interval" => t.log_interval = parse_value(key, value)?,
            "train.ckpt_interval" => t.ckpt_interval = parse_value(key, value)?,
            "train.truncate" => t.truncate = parse_value(key, value)?,
            "infer.max_frames" => {
                self.max_frames = match value {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "eval.trials" => self.eval_trials = parse_value(key, value)?,
            "eval.seed" => self.eval_seed = parse_value(key, value)?,
            _ => {
                let known = match key.strip_prefix("corpus.") {
                    Some(k) => self.corpus.set(k, value)?,
                    None => self.model.set(key, value)?,
                };
                if !known {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Applies `pairs` on top of the defaults, presets first.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.model.validate()?;
        cfg.corpus.validate()?;
        Ok(cfg)
    }

    /// Config file text followed by `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = parse_kv_lines(text)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("preset = {}\n", self.preset);
        s.push_str(&self.model.to_text());
        for (k, v) in self.corpus.to_pairs() {
            let _ = writeln!(s, "corpus.{k} = {v}");
        }
        let t = &self.train;
        let a: &AdamConfig = &t.adam;
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.steps = {}", t.steps);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.lr = {}", a.lr);
        let _ = writeln!(s, "train.beta1 = {}", a.beta1);
        let _ = writeln!(s, "train.beta2 = {}", a.beta2);
        let _ = writeln!(s, "train.eps = {}", a.eps);
        let clip = a.clip_norm.map_or("none".into(), |c| c.to_string());
        let _ = writeln!(s, "train.clip_norm = {clip}");
        let _ = writeln!(s, "train.log_interval = {}", t.log_interval);
        let _ = writeln!(s, "train.ckpt_interval = {}", t.ckpt_interval);
        let _ = writeln!(s, "train.truncate = {}", t.truncate);
        let mf = self.max_frames.map_or("auto".into(), |m| m.to_string());
        let _ = writeln!(s, "infer.max_frames = {mf}");
        let _ = writeln!(s, "eval.trials = {}", self.eval_trials);
        let _ = writeln!(s, "eval.seed = {}", self.eval_seed);
        s
    }
}

/// Binary graymap with values min-max scaled to 0..=255; a constant
/// matrix maps to mid-gray.
pub fn encode_pgm(rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    out
}

/// Parses a P5 image back into `(rows, cols, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let cols: usize = fields[1].parse().ok()?;
    let rows: usize = fields[2].parse().ok()?;
    let px = bytes.get(pos..)?.to_vec();
    (px.len() == rows * cols).then_some((rows, cols, px))
}

/// Writes `<prefix><name>.h<k>.pgm` and `.txt` for every head of every
/// `[heads, T_q, T_k]` map. Returns the written paths.
pub fn dump_attention<F: Scalar>(maps: &[(String, Tensor<F>)], prefix: &Path) -> Result<Vec<PathBuf>> {
    if maps.is_empty() {
        return Err(Error::Empty("attention maps"));
    }
    let base = prefix.to_string_lossy().to_string();
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        if base.ends_with('/') {
            fs::create_dir_all(prefix).map_err(|e| Error::io(prefix, e))?;
        } else {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut written = Vec::new();
    for (name, w) in maps {
        if w.rank() != 3 {
            return Err(Error::dim("dump_attention", w.shape(), &[0, 0, 0]));
        }
        let (h, tq, tk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        for k in 0..h {
            let vals: Vec<f64> = w.data()[k * tq * tk..(k + 1) * tq * tk]
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect();
            let pgm = PathBuf::from(format!("{base}{name}.h{k}.pgm"));
            fs::write(&pgm, encode_pgm(tq, tk, &vals)).map_err(|e| Error::io(&pgm, e))?;
            let mut text = String::new();
            for r in 0..tq {
                let row: Vec<String> = vals[r * tk..(r + 1) * tk].iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(text, "{}", row.join(" "));
            }
            let txt = PathBuf::from(format!("{base}{name}.h{k}.txt"));
            fs::write(&txt, text).map_err(|e| Error::io(&txt, e))?;
            written.push(pgm);
            written.push(txt);
        }
    }
    Ok(written)
}

/// Outcome of one proxy metric.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    /// `None` when every trial was skipped.
    pub value: Option<f64>,
    pub threshold: f64,
    pub n_trials: usize,
    pub seeds: Vec<u64>,
    /// Per-trial score, `None` for skipped trials.
    pub per_trial: Vec<Option<f64>>,
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn passed(&self) -> Option<bool> {
        self.value.map(|v| v >= self.threshold)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# desk-scale proxy metric; stands in for listening tests and recogniser-based scores"
        );
        let _ = writeln!(s, "metric = {}", self.name);
        let v = self.value.map_or("skip".into(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "value = {v}");
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let verdict = match self.passed() {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "skip",
        };
        let _ = writeln!(s, "result = {verdict}");
        let _ = writeln!(s, "n_trials = {}", self.n_trials);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(","));
        for (i, t) in self.per_trial.iter().enumerate() {
            let t = t.map_or("skip".into(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "trial.{i} = {t}");
        }
        for f in &self.flags {
            let _ = writeln!(s, "flag = {f}");
        }
        s
    }
}

fn eval_pool<F: Scalar>(corpus: &Corpus<F>) -> Vec<usize> {
    let test = corpus.indices(Split::Test);
    if test.is_empty() {
        (0..corpus.utterances.len()).collect()
    } else {
        test
    }
}

/// Paired trials on the same text with a fast (`rate_min`) and a slow
/// (`rate_max`) style reference. Score 1 when the fast-reference output
/// has fewer frames.
pub fn eval_style_transfer<F: Scalar>(
    model: &LstTts<F>,
    corpus: &Corpus<F>,
    seeds: &[u64],
    max_frames: Option<usize>,
) -> Result<MetricReport> {
    let (fast_rate, slow_rate) = (corpus.spec.rate_min, corpus.spec.rate_max);
    let with_rate = |r: usize| -> Vec<usize> {
        (0..corpus.utterances.len())
            .filter(|&i| corpus.utterances[i].style.rate == r)
            .collect()
    };
    let (fast, slow) = (with_rate(fast_rate), with_rate(slow_rate));
    if fast.is_empty() || slow.is_empty() {
        return Err(Error::Corpus(format!("need utterances with rates {fast_rate} and {slow_rate}")));
    }
    let texts = eval_pool(corpus);
    let mut per_trial = Vec::with_capacity(seeds.len());
    let mut capped = 0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = &corpus.utterances[*texts.choose(&mut rng).expect("nonempty")];
        let f = *fast.choose(&mut rng).expect("nonempty");
        let s = *slow.choose(&mut rng).expect("nonempty");
        let (fu, su) = (&corpus.utterances[f], &corpus.utterances[s]);
        if f == s || fu.mel == su.mel {
            per_trial.push(None);
            continue;
        }
        let speaker = model.features(&text.mel, &text.utt_id)?;
        let mut lens = [0usize; 2];
        for (slot, u) in lens.iter_mut().zip([fu, su]) {
            let mut req = SynthesisRequest::reference(
                text.phonemes.clone(),
                model.features(&u.mel, &u.utt_id)?,
                Some(speaker.clone()),
            );
            req.seed = seed;
            req.max_frames = max_frames;
            let out = synthesize(model, &req)?;
            if out.stop_frame.is_none() {
                capped += 1;
            }
            *slot = out.mel.len();
        }
        per_trial.push(Some(if lens[0] < lens[1] { 1.0 } else { 0.0 }));
    }
    Ok(finish("style_rate_transfer", per_trial, seeds, 0.8, capped))
}

/// Each trial synthesises a text with a style reference of different
/// content and scores template-decoded phoneme accuracy.
pub fn eval_content_integrity<F: Scalar>(
    model: &LstTts<F>,
    corpus: &Corpus<F>,
    seeds: &[u64],
    max_frames: Option<usize>,
) -> Result<MetricReport> {
    let texts = eval_pool(corpus);
    let all: Vec<usize> = (0..corpus.utterances.len()).collect();
    let mut per_trial = Vec::with_capacity(seeds.len());
    let mut capped = 0;
    let (mut hits, mut total) = (0.0, 0usize);
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = &corpus.utterances[*texts.choose(&mut rng).expect("nonempty")];
        let others: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&i| corpus.utterances[i].phonemes != text.phonemes)
            .collect();
        let Some(&r) = others.choose(&mut rng) else {
            per_trial.push(None);
            continue;
        };
        let style = &corpus.utterances[r];
        let mut req = SynthesisRequest::reference(
            text.phonemes.clone(),
            model.features(&style.mel, &style.utt_id)?,
            Some(model.features(&style.mel, &style.utt_id)?),
        );
        req.seed = seed;
        req.max_frames = max_frames;
        let out = synthesize(model, &req)?;
        if out.stop_frame.is_none() {
            capped += 1;
        }
        let decoded = corpus.decode(&out.mel.frames, text.phonemes.len());
        let acc = phoneme_accuracy(&decoded, &text.phonemes.ids);
        hits += acc * text.phonemes.len() as f64;
        total += text.phonemes.len();
        per_trial.push(Some(acc));
    }
    let mut report = finish("content_integrity", per_trial, seeds, 0.8, capped);
    if total > 0 {
        report.value = Some(hits / total as f64);
    }
    Ok(report)
}

fn finish(name: &str, per_trial: Vec<Option<f64>>, seeds: &[u64], threshold: f64, capped: usize) -> MetricReport {
    let scored: Vec<f64> = per_trial.iter().flatten().copied().collect();
    let value = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    let mut flags = Vec::new();
    if capped > 0 {
        flags.push(format!("{capped} syntheses hit the frame cap without a stop prediction"));
    }
    if value.is_none() {
        flags.push("every trial was skipped".into());
    }
    MetricReport {
        name: name.into(),
        value,
        threshold,
        n_trials: per_trial.len(),
        seeds: seeds.to_vec(),
        per_trial,
        flags,
    }
}

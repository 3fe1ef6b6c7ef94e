//! Synthetic corpus with controllable speaking rate and energy, the
//! template-matching decoder used as a content oracle, and plain-text
//! manifest export/import.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::parse_kv_lines;
use crate::error::{Error, Result};
use crate::model::{MelSpectrogram, PhonemeSequence};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ground-truth style of a toy utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleFactors {
    /// Frames per phoneme.
    pub rate: usize,
    pub energy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance<F> {
    pub utt_id: String,
    pub speaker_id: String,
    pub phonemes: PhonemeSequence,
    pub mel: MelSpectrogram<F>,
    pub style: StyleFactors,
    pub split: Split,
}

/// Generation parameters; also the manifest header.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_utts: usize,
    pub vocab: usize,
    pub n_mels: usize,
    pub rate_min: usize,
    pub rate_max: usize,
    pub energy_min: f64,
    pub energy_max: f64,
    pub noise_sd: f64,
    pub phonemes_min: usize,
    pub phonemes_max: usize,
    pub speaker_offset_sd: f64,
    /// Size of a shared pool of phoneme strings; 0 draws a fresh string per
    /// utterance.
    pub n_texts: usize,
    /// Utterances per speaker held out as the test split.
    pub test_per_speaker: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 2,
            n_utts: 8,
            vocab: 12,
            n_mels: 16,
            rate_min: 2,
            rate_max: 6,
            energy_min: 0.8,
            energy_max: 1.2,
            noise_sd: 0.05,
            phonemes_min: 3,
            phonemes_max: 6,
            speaker_offset_sd: 0.1,
            n_texts: 0,
            test_per_speaker: 0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_speakers", self.n_speakers.to_string()),
            ("n_utts", self.n_utts.to_string()),
            ("vocab", self.vocab.to_string()),
            ("n_mels", self.n_mels.to_string()),
            ("rate_min", self.rate_min.to_string()),
            ("rate_max", self.rate_max.to_string()),
            ("energy_min", self.energy_min.to_string()),
            ("energy_max", self.energy_max.to_string()),
            ("noise_sd", self.noise_sd.to_string()),
            ("phonemes_min", self.phonemes_min.to_string()),
            ("phonemes_max", self.phonemes_max.to_string()),
            ("speaker_offset_sd", self.speaker_offset_sd.to_string()),
            ("n_texts", self.n_texts.to_string()),
            ("test_per_speaker", self.test_per_speaker.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// `Ok(false)` if the key is not a corpus key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        macro_rules! parse {
            ($field:expr) => {{
                $field = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))?;
            }};
        }
        match key {
            "n_speakers" => parse!(self.n_speakers),
            "n_utts" => parse!(self.n_utts),
            "vocab" => parse!(self.vocab),
            "n_mels" => parse!(self.n_mels),
            "rate_min" => parse!(self.rate_min),
            "rate_max" => parse!(self.rate_max),
            "energy_min" => parse!(self.energy_min),
            "energy_max" => parse!(self.energy_max),
            "noise_sd" => parse!(self.noise_sd),
            "phonemes_min" => parse!(self.phonemes_min),
            "phonemes_max" => parse!(self.phonemes_max),
            "speaker_offset_sd" => parse!(self.speaker_offset_sd),
            "n_texts" => parse!(self.n_texts),
            "test_per_speaker" => parse!(self.test_per_speaker),
            "seed" => parse!(self.seed),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_speakers == 0 || self.n_utts < self.n_speakers {
            return bad(format!("{} utterances for {} speakers", self.n_utts, self.n_speakers));
        }
        if self.n_utts / self.n_speakers < 2 + self.test_per_speaker {
            return bad("every speaker needs at least 2 training utterances".into());
        }
        if self.vocab < 2 || self.vocab > self.n_mels {
            return bad(format!(
                "vocabulary {} exceeds template capacity {} (needs 2 <= V <= n_mels)",
                self.vocab, self.n_mels
            ));
        }
        if self.rate_min == 0 || self.rate_min > self.rate_max {
            return bad(format!("rate range [{}, {}] is invalid", self.rate_min, self.rate_max));
        }
        if !(self.energy_min > 0.0 && self.energy_min <= self.energy_max) {
            return bad(format!("energy range [{}, {}] is invalid", self.energy_min, self.energy_max));
        }
        if self.phonemes_min == 0 || self.phonemes_min > self.phonemes_max {
            return bad("phoneme count range is invalid".into());
        }
        if !(self.noise_sd >= 0.0 && self.speaker_offset_sd >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

/// Seeded phoneme templates `[V, n_mels]`: smoothed random vectors, each
/// standardised to zero mean and unit variance, pairwise correlation < 0.6.
pub fn make_templates(vocab: usize, n_mels: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    const MAX_CORR: f64 = 0.6;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vocab);
    let mut attempts = 0;
    while rows.len() < vocab {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(format!("could not draw {vocab} separable templates in {n_mels} bins")));
        }
        let raw: Vec<f64> = (0..n_mels).map(|_| normal.sample(rng)).collect();
        let smooth: Vec<f64> = (0..n_mels)
            .map(|i| {
                let l = raw[i.saturating_sub(1)];
                let r = raw[(i + 1).min(n_mels - 1)];
                0.25 * l + 0.5 * raw[i] + 0.25 * r
            })
            .collect();
        let t = standardize(&smooth);
        if rows.iter().all(|r| pearson(r, &t) < MAX_CORR) {
            rows.push(t);
        }
    }
    Tensor::from_rows(&rows, n_mels)
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus<F> {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance<F>>,
    pub speakers: Vec<String>,
    pub templates: Tensor<f64>,
    pub speaker_offsets: BTreeMap<String, Vec<f64>>,
}

fn speaker_name(i: usize) -> String {
    format!("spk{i:02}")
}

/// Clean toy mel: each phoneme's template times `energy`, repeated `rate`
/// times, plus the speaker offset.
pub fn render_mel(templates: &Tensor<f64>, ids: &[usize], style: StyleFactors, offset: &[f64]) -> Tensor<f64> {
    let n_mels = templates.cols();
    let mut data = Vec::with_capacity(ids.len() * style.rate * n_mels);
    for &p in ids {
        let row = templates.row(p);
        for _ in 0..style.rate {
            data.extend(row.iter().zip(offset).map(|(t, o)| style.energy * t + o));
        }
    }
    Tensor::new(vec![ids.len() * style.rate, n_mels], data).expect("consistent shape")
}

/// Generates the corpus; deterministic in `spec.seed`.
pub fn generate_toy_corpus<F: Scalar>(spec: &CorpusSpec) -> Result<Corpus<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = make_templates(spec.vocab, spec.n_mels, &mut rng)?;
    let offset_dist = Normal::new(0.0, spec.speaker_offset_sd).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let speakers: Vec<String> = (0..spec.n_speakers).map(speaker_name).collect();
    let speaker_offsets: BTreeMap<String, Vec<f64>> = speakers
        .iter()
        .map(|s| (s.clone(), (0..spec.n_mels).map(|_| offset_dist.sample(&mut rng)).collect()))
        .collect();
    let draw_text = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(spec.phonemes_min..=spec.phonemes_max);
        let mut ids: Vec<usize> = Vec::with_capacity(n);
        while ids.len() < n {
            let p = rng.random_range(0..spec.vocab);
            if ids.last() != Some(&p) {
                ids.push(p);
            }
        }
        ids
    };
    let pool: Vec<Vec<usize>> = (0..spec.n_texts).map(|_| draw_text(&mut rng)).collect();
    let per_speaker = spec.n_utts / spec.n_speakers;
    let mut utterances = Vec::with_capacity(spec.n_utts);
    for i in 0..spec.n_utts {
        let s = i % spec.n_speakers;
        let k = i / spec.n_speakers;
        let speaker_id = speakers[s].clone();
        let ids = if pool.is_empty() {
            draw_text(&mut rng)
        } else {
            pool[rng.random_range(0..pool.len())].clone()
        };
        let style = StyleFactors {
            rate: rng.random_range(spec.rate_min..=spec.rate_max),
            energy: if spec.energy_max > spec.energy_min {
                rng.random_range(spec.energy_min..=spec.energy_max)
            } else {
                spec.energy_min
            },
        };
        let clean = render_mel(&templates, &ids, style, &speaker_offsets[&speaker_id]);
        let mut noisy = clean;
        if spec.noise_sd > 0.0 {
            for v in noisy.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        let frames: Tensor<F> = noisy.cast();
        let split = if k < per_speaker && k >= per_speaker - spec.test_per_speaker {
            Split::Test
        } else {
            Split::Train
        };
        utterances.push(Utterance {
            utt_id: format!("utt{i:04}"),
            speaker_id,
            phonemes: PhonemeSequence::new(ids, spec.vocab)?,
            mel: MelSpectrogram::new(frames)?,
            style,
            split,
        });
    }
    let corpus = Corpus {
        spec: spec.clone(),
        utterances,
        speakers,
        templates,
        speaker_offsets,
    };
    corpus.validate()?;
    Ok(corpus)
}

impl<F: Scalar> Corpus<F> {
    /// Indices of the training split, grouped by speaker.
    pub fn train_by_speaker(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            if u.split == Split::Train {
                m.entry(u.speaker_id.as_str()).or_default().push(i);
            }
        }
        m
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.utterances[i].split == split)
            .collect()
    }

    /// Every speaker has at least two training utterances.
    pub fn validate(&self) -> Result<()> {
        let groups = self.train_by_speaker();
        for s in &self.speakers {
            let n = groups.get(s.as_str()).map_or(0, Vec::len);
            if n < 2 {
                return Err(Error::Corpus(format!("speaker {s} has {n} training utterances, need at least 2")));
            }
        }
        Ok(())
    }

    /// Template decoding of a mel given the expected phoneme count.
    pub fn decode(&self, mel: &Tensor<F>, n_phonemes: usize) -> Vec<Option<usize>> {
        decode_mel(&self.templates, mel, n_phonemes)
    }

    /// Writes `manifest.tsv` and one `<utt_id>.mel` per utterance.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = String::new();
        for (k, v) in self.spec.to_pairs() {
            let _ = writeln!(text, "# {k} = {v}");
        }
        text.push_str("#utt_id\tspeaker_id\tsplit\tphonemes\trate\tenergy\n");
        for u in &self.utterances {
            let ids: Vec<String> = u.phonemes.ids.iter().map(usize::to_string).collect();
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}\t{}\t{}",
                u.utt_id,
                u.speaker_id,
                u.split.as_str(),
                ids.join(" "),
                u.style.rate,
                u.style.energy
            );
            u.mel.save(&dir.join(format!("{}.mel", u.utt_id)))?;
        }
        let path = dir.join("manifest.tsv");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`Corpus::export`].
    pub fn import(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let fmt = |detail: String| Error::Format {
            path: path.clone(),
            detail,
        };
        let header: String = text
            .lines()
            .filter_map(|l| l.strip_prefix("# "))
            .map(|l| format!("{l}\n"))
            .collect();
        let mut spec = CorpusSpec::default();
        for (k, v) in parse_kv_lines(&header)? {
            if !spec.set(&k, &v)? {
                return Err(fmt(format!("unknown header key `{k}`")));
            }
        }
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let templates = make_templates(spec.vocab, spec.n_mels, &mut rng)?;
        let mut utterances = Vec::new();
        let mut speakers: Vec<String> = Vec::new();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(fmt(format!("expected 6 fields, got {}: `{line}`", f.len())));
            }
            let ids = f[3]
                .split_whitespace()
                .map(|s| s.parse::<usize>().map_err(|_| fmt(format!("bad phoneme id `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            let split = match f[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(fmt(format!("bad split `{other}`"))),
            };
            let style = StyleFactors {
                rate: f[4].parse().map_err(|_| fmt(format!("bad rate `{}`", f[4])))?,
                energy: f[5].parse().map_err(|_| fmt(format!("bad energy `{}`", f[5])))?,
            };
            if !speakers.iter().any(|s| s == f[1]) {
                speakers.push(f[1].to_string());
            }
            let mel = MelSpectrogram::load(&dir.join(format!("{}.mel", f[0])))?;
            if mel.n_mels() != spec.n_mels {
                return Err(fmt(format!("{} has {} bins, expected {}", f[0], mel.n_mels(), spec.n_mels)));
            }
            utterances.push(Utterance {
                utt_id: f[0].to_string(),
                speaker_id: f[1].to_string(),
                phonemes: PhonemeSequence::new(ids, spec.vocab)?,
                mel,
                style,
                split,
            });
        }
        // Offsets are regenerated from the seed the same way as in generation.
        let offset_dist = Normal::new(0.0, spec.speaker_offset_sd).map_err(|e| Error::Config(e.to_string()))?;
        let speaker_offsets = (0..spec.n_speakers)
            .map(|i| (speaker_name(i), (0..spec.n_mels).map(|_| offset_dist.sample(&mut rng)).collect()))
            .collect();
        let corpus = Corpus {
            spec,
            utterances,
            speakers,
            templates,
            speaker_offsets,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

/// Splits `T` frames into `n` near-equal windows (the estimated rate is
/// `T / n`) and matches each window's mean frame to the most correlated
/// template. Empty windows decode to `None`.
pub fn decode_mel<F: Scalar>(templates: &Tensor<f64>, mel: &Tensor<F>, n_phonemes: usize) -> Vec<Option<usize>> {
    let t = mel.rows();
    let d = mel.cols();
    (0..n_phonemes)
        .map(|k| {
            let (a, b) = (k * t / n_phonemes.max(1), (k + 1) * t / n_phonemes.max(1));
            if b <= a || d != templates.cols() {
                return None;
            }
            let mut mean = vec![0.0; d];
            for r in a..b {
                for (m, v) in mean.iter_mut().zip(mel.row(r)) {
                    *m += v.to_f64_lossy();
                }
            }
            (0..templates.rows())
                .map(|p| (p, pearson(&mean, templates.row(p))))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(p, _)| p)
        })
        .collect()
}

/// Fraction of positions where the decoded id equals the reference id.
pub fn phoneme_accuracy(decoded: &[Option<usize>], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    let hits = reference
        .iter()
        .zip(decoded)
        .filter(|(r, d)| **d == Some(**r))
        .count();
    hits as f64 / reference.len() as f64
}

/// One `(style reference, text, speaker reference)` draw: the text is the
/// style reference's own, the speaker reference is a different training
/// utterance of the same speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub style: usize,
    pub speaker: usize,
}

/// Sampler over the training split.
#[derive(Clone, Debug)]
pub struct ExampleSampler {
    train: Vec<usize>,
    by_speaker: BTreeMap<String, Vec<usize>>,
    speaker_of: BTreeMap<usize, String>,
}

impl ExampleSampler {
    pub fn new<F: Scalar>(corpus: &Corpus<F>) -> Result<Self> {
        corpus.validate()?;
        let groups = corpus.train_by_speaker();
        let mut speaker_of = BTreeMap::new();
        for (s, ids) in &groups {
            for &i in ids {
                speaker_of.insert(i, s.to_string());
            }
        }
        Ok(Self {
            train: corpus.indices(Split::Train),
            by_speaker: groups.into_iter().map(|(s, v)| (s.to_string(), v)).collect(),
            speaker_of,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrainingExample {
        let style = *self.train.choose(rng).expect("validated nonempty");
        let same = &self.by_speaker[&self.speaker_of[&style]];
        let k = rng.random_range(0..same.len() - 1);
        let speaker = if same[k] == style { same[same.len() - 1] } else { same[k] };
        TrainingExample { style, speaker }
    }
}

/// Draws a training example from the corpus.
pub fn sample_training_example<F: Scalar, R: Rng + ?Sized>(corpus: &Corpus<F>, rng: &mut R) -> Result<TrainingExample> {
    Ok(ExampleSampler::new(corpus)?.sample(rng))
}

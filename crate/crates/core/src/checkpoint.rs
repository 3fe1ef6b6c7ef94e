//! Checkpoint files.
//!
//! Layout: magic `LSTTTS01`, `u32` version, `u32` length plus `key = value`
//! text (model config, step counters, optimizer settings, rng state), then
//! records `[u16 name length][name][u8 rank][u32 dims..][f32 LE data]` until
//! end of file. Optimizer moments are stored as `adam.m.<param>` and
//! `adam.v.<param>`; the average speaker embedding as `buffer.average_speaker`.
//! Values are written as 32-bit floats, so `f32` models round-trip exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::{parse_kv_lines, ModelConfig};
use crate::error::{Error, Result};
use crate::model::LstTts;
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSTTTS01";
pub const CHECKPOINT_VERSION: u32 = 1;
const AVERAGE_SPEAKER: &str = "buffer.average_speaker";

/// Position of a `ChaCha8Rng` stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<F: Scalar> {
    pub model: LstTts<F>,
    pub adam: Option<AdamState<F>>,
    pub rng: Option<RngState>,
    pub step: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn push_record<F: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<F>) -> Result<()> {
    let n = u16::try_from(name.len()).map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("rank too large for {name}")))?;
    buf.extend(n.to_le_bytes());
    buf.extend(name.as_bytes());
    buf.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension too large for {name}")))?;
        buf.extend(d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend(v.to_f32_lossy().to_le_bytes());
    }
    Ok(())
}

/// Serialises a checkpoint to bytes.
pub fn encode_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>) -> Result<Vec<u8>> {
    let mut text = ckpt.model.config.to_text();
    let _ = writeln!(text, "step = {}", ckpt.step);
    if let Some(a) = &ckpt.adam {
        let c = &a.config;
        let _ = writeln!(text, "adam.step = {}", a.step);
        let _ = writeln!(text, "adam.lr = {}", c.lr);
        let _ = writeln!(text, "adam.beta1 = {}", c.beta1);
        let _ = writeln!(text, "adam.beta2 = {}", c.beta2);
        let _ = writeln!(text, "adam.eps = {}", c.eps);
        let clip = c.clip_norm.map_or("none".to_string(), |v| v.to_string());
        let _ = writeln!(text, "adam.clip_norm = {clip}");
    }
    if let Some(r) = &ckpt.rng {
        let _ = writeln!(text, "rng.seed = {}", hex(&r.seed));
        let _ = writeln!(text, "rng.stream = {}", r.stream);
        let _ = writeln!(text, "rng.word_pos = {}", r.word_pos);
    }
    let mut buf = Vec::new();
    buf.extend(CHECKPOINT_MAGIC);
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    buf.extend((text.len() as u32).to_le_bytes());
    buf.extend(text.as_bytes());
    let params = &ckpt.model.params;
    for (_, p) in params.iter() {
        push_record(&mut buf, &p.name, &p.value)?;
    }
    if let Some(a) = &ckpt.adam {
        for (i, (_, p)) in params.iter().enumerate() {
            push_record(&mut buf, &format!("adam.m.{}", p.name), &a.m[i])?;
            push_record(&mut buf, &format!("adam.v.{}", p.name), &a.v[i])?;
        }
    }
    if let Some(avg) = &ckpt.model.average_speaker {
        push_record(&mut buf, AVERAGE_SPEAKER, avg)?;
    }
    Ok(buf)
}

pub fn save_checkpoint<F: Scalar>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(self.path.to_path_buf()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses checkpoint bytes; nothing is returned unless the whole file is valid.
pub fn decode_checkpoint<F: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<F>> {
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = Reader { bytes, pos: 0, path };
    if bytes.len() >= 8 && &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic bytes".into()));
    }
    r.take(8)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| fmt("config block is not UTF-8".into()))?;
    let mut config = ModelConfig::desk();
    let mut extra = BTreeMap::new();
    for (k, v) in parse_kv_lines(text)? {
        if !config.set(&k, &v)? {
            extra.insert(k, v);
        }
    }
    let get = |k: &str| extra.get(k).map(String::as_str);
    let parse = |k: &str| -> Result<Option<f64>> {
        get(k)
            .map(|v| v.parse::<f64>().map_err(|_| fmt(format!("bad value for {k}"))))
            .transpose()
    };
    let step: u64 = get("step")
        .ok_or_else(|| fmt("missing step".into()))?
        .parse()
        .map_err(|_| fmt("bad step".into()))?;
    let mut model = LstTts::<F>::new(config)?;
    let mut records: HashMap<String, Tensor<F>> = HashMap::new();
    while !r.done() {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| fmt("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| fmt("record too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| <F as Scalar>::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if records.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::DuplicateParameter(name));
        }
    }
    let mut take_record = |name: &str, shape: &[usize]| -> Result<Option<Tensor<F>>> {
        match records.remove(name) {
            Some(t) if t.shape() == shape => Ok(Some(t)),
            Some(t) => Err(fmt(format!("{name}: shape {:?}, expected {shape:?}", t.shape()))),
            None => Ok(None),
        }
    };
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    let mut values = Vec::with_capacity(ids.len());
    for (id, name, shape) in &ids {
        let t = take_record(name, shape)?.ok_or_else(|| fmt(format!("missing parameter {name}")))?;
        values.push((*id, t));
    }
    let adam = match get("adam.step") {
        None => None,
        Some(s) => {
            let clip = match get("adam.clip_norm") {
                None | Some("none") => None,
                Some(_) => parse("adam.clip_norm")?,
            };
            let d = AdamConfig::default();
            let config = AdamConfig {
                lr: parse("adam.lr")?.unwrap_or(d.lr),
                beta1: parse("adam.beta1")?.unwrap_or(d.beta1),
                beta2: parse("adam.beta2")?.unwrap_or(d.beta2),
                eps: parse("adam.eps")?.unwrap_or(d.eps),
                clip_norm: clip,
            };
            let mut state = AdamState::new(&model.params, config);
            state.step = s.parse().map_err(|_| fmt("bad adam.step".into()))?;
            for (i, (_, name, shape)) in ids.iter().enumerate() {
                state.m[i] = take_record(&format!("adam.m.{name}"), shape)?
                    .ok_or_else(|| fmt(format!("missing adam.m.{name}")))?;
                state.v[i] = take_record(&format!("adam.v.{name}"), shape)?
                    .ok_or_else(|| fmt(format!("missing adam.v.{name}")))?;
            }
            Some(state)
        }
    };
    let average = take_record(AVERAGE_SPEAKER, &[model.config.d_model])?;
    if let Some(name) = records.keys().min() {
        return Err(Error::UnknownParameter(name.clone()));
    }
    let rng = match get("rng.seed") {
        None => None,
        Some(s) => Some(RngState {
            seed: unhex(s).ok_or_else(|| fmt("bad rng.seed".into()))?,
            stream: get("rng.stream")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| fmt("bad rng.stream".into()))?,
            word_pos: get("rng.word_pos")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| fmt("bad rng.word_pos".into()))?,
        }),
    };
    for (id, t) in values {
        model.params.set(id, t)?;
    }
    model.average_speaker = average;
    Ok(Checkpoint { model, adam, rng, step })
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint<f32> {
        let model = LstTts::<f32>::new(ModelConfig::micro()).unwrap();
        let mut adam = AdamState::new(&model.params, AdamConfig::default());
        adam.step = 3;
        adam.m[0].data_mut()[0] = 0.125;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        Checkpoint {
            model,
            adam: Some(adam),
            rng: Some(RngState::capture(&rng)),
            step: 42,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = encode_checkpoint(&c).unwrap();
        let d: Checkpoint<f32> = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(d.step, 42);
        assert_eq!(d.model.config, c.model.config);
        for ((_, a), (_, b)) in c.model.params.iter().zip(d.model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let (a, b) = (c.adam.unwrap(), d.adam.unwrap());
        assert_eq!((a.step, a.m, a.v, a.config), (b.step, b.m, b.v, b.config));
        let (mut r1, mut r2) = (c.rng.unwrap().restore(), d.rng.unwrap().restore());
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let p = Path::new("x");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad, p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(decode_checkpoint::<f32>(&bad, p), Err(Error::Version { found: 7, .. })));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 3], p),
            Err(Error::Truncated(_))
        ));
        let mut extra = bytes.clone();
        push_record(&mut extra, "mystery.weight", &Tensor::<f32>::zeros(vec![2])).unwrap();
        assert!(matches!(
            decode_checkpoint::<f32>(&extra, p),
            Err(Error::UnknownParameter(n)) if n == "mystery.weight"
        ));
    }
}

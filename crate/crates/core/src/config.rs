//! Model hyperparameters and their `key = value` text form.

use crate::error::{Error, Result};

/// Architecture and procedure hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of fusion blocks and of decoder blocks.
    pub n_blocks: usize,
    pub ffn_width: usize,
    pub prenet_bottleneck: usize,
    pub n_mels: usize,
    /// Width of the frozen reference features.
    pub d_f: usize,
    pub gst_size: usize,
    pub lst_size: usize,
    /// Minimum style length kept by training-time truncation.
    pub alpha: usize,
    /// Scale of sampled local style tokens.
    pub beta: f64,
    pub sample_length_min: usize,
    pub sample_length_max: usize,
    pub stop_threshold: f64,
    /// Decoding cap, as a multiple of the phoneme count.
    pub max_frames_per_phoneme: usize,
    pub vocab: usize,
    pub dropout: f64,
    pub prenet_dropout: f64,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub postnet_depth: usize,
    pub stop_pos_weight: f64,
    pub ln_eps: f64,
    pub extractor_seed: u64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-size configuration (256-wide, five blocks, 64 global and 32 local tokens).
    pub fn full() -> Self {
        Self {
            d_model: 256,
            n_heads: 4,
            n_blocks: 5,
            ffn_width: 1024,
            prenet_bottleneck: 32,
            n_mels: 80,
            d_f: 64,
            gst_size: 64,
            lst_size: 32,
            alpha: 15,
            beta: 0.25,
            sample_length_min: 80,
            sample_length_max: 160,
            stop_threshold: 0.5,
            max_frames_per_phoneme: 12,
            vocab: 80,
            dropout: 0.1,
            prenet_dropout: 0.0,
            pool_kernel: 8,
            pool_stride: 4,
            postnet_channels: 256,
            postnet_kernel: 5,
            postnet_depth: 5,
            stop_pos_weight: 6.0,
            ln_eps: 1e-5,
            extractor_seed: 0x5eed,
            init_seed: 0,
        }
    }

    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            n_blocks: 2,
            ffn_width: 128,
            prenet_bottleneck: 32,
            n_mels: 16,
            d_f: 12,
            gst_size: 16,
            lst_size: 16,
            alpha: 4,
            sample_length_min: 4,
            sample_length_max: 12,
            vocab: 12,
            postnet_channels: 32,
            ..Self::full()
        }
    }

    /// Tiny configuration for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            ffn_width: 12,
            prenet_bottleneck: 4,
            n_mels: 4,
            d_f: 3,
            gst_size: 3,
            lst_size: 3,
            alpha: 2,
            sample_length_min: 2,
            sample_length_max: 4,
            vocab: 5,
            dropout: 0.0,
            postnet_channels: 4,
            postnet_kernel: 3,
            postnet_depth: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        if self.sample_length_min == 0 || self.sample_length_min > self.sample_length_max {
            return bad(format!(
                "sample length range [{}, {}] is empty",
                self.sample_length_min, self.sample_length_max
            ));
        }
        if self.pool_kernel == 0 || self.pool_stride == 0 || self.postnet_kernel == 0 {
            return bad("kernel and stride sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.prenet_dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if self.gst_size == 0 || self.lst_size == 0 || self.vocab == 0 {
            return bad("codebooks and vocabulary must be nonempty".into());
        }
        Ok(())
    }

    /// Stable ordered `key = value` pairs.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("ffn_width", self.ffn_width.to_string()),
            ("prenet_bottleneck", self.prenet_bottleneck.to_string()),
            ("n_mels", self.n_mels.to_string()),
            ("d_f", self.d_f.to_string()),
            ("gst_size", self.gst_size.to_string()),
            ("lst_size", self.lst_size.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("sample_length_min", self.sample_length_min.to_string()),
            ("sample_length_max", self.sample_length_max.to_string()),
            ("stop_threshold", self.stop_threshold.to_string()),
            ("max_frames_per_phoneme", self.max_frames_per_phoneme.to_string()),
            ("vocab", self.vocab.to_string()),
            ("dropout", self.dropout.to_string()),
            ("prenet_dropout", self.prenet_dropout.to_string()),
            ("pool_kernel", self.pool_kernel.to_string()),
            ("pool_stride", self.pool_stride.to_string()),
            ("postnet_channels", self.postnet_channels.to_string()),
            ("postnet_kernel", self.postnet_kernel.to_string()),
            ("postnet_depth", self.postnet_depth.to_string()),
            ("stop_pos_weight", self.stop_pos_weight.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("extractor_seed", self.extractor_seed.to_string()),
            ("init_seed", self.init_seed.to_string()),
        ]
    }

    /// Applies one setting; `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        macro_rules! parse {
            ($field:expr) => {{
                $field = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))?;
            }};
        }
        match key {
            "d_model" => parse!(self.d_model),
            "n_heads" => parse!(self.n_heads),
            "n_blocks" => parse!(self.n_blocks),
            "ffn_width" => parse!(self.ffn_width),
            "prenet_bottleneck" => parse!(self.prenet_bottleneck),
            "n_mels" => parse!(self.n_mels),
            "d_f" => parse!(self.d_f),
            "gst_size" => parse!(self.gst_size),
            "lst_size" => parse!(self.lst_size),
            "alpha" => parse!(self.alpha),
            "beta" => parse!(self.beta),
            "sample_length_min" => parse!(self.sample_length_min),
            "sample_length_max" => parse!(self.sample_length_max),
            "stop_threshold" => parse!(self.stop_threshold),
            "max_frames_per_phoneme" => parse!(self.max_frames_per_phoneme),
            "vocab" => parse!(self.vocab),
            "dropout" => parse!(self.dropout),
            "prenet_dropout" => parse!(self.prenet_dropout),
            "pool_kernel" => parse!(self.pool_kernel),
            "pool_stride" => parse!(self.pool_stride),
            "postnet_channels" => parse!(self.postnet_channels),
            "postnet_kernel" => parse!(self.postnet_kernel),
            "postnet_depth" => parse!(self.postnet_depth),
            "stop_pos_weight" => parse!(self.stop_pos_weight),
            "ln_eps" => parse!(self.ln_eps),
            "extractor_seed" => parse!(self.extractor_seed),
            "init_seed" => parse!(self.init_seed),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses the output of [`ModelConfig::to_text`]; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (key, value) in parse_kv_lines(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_values() {
        let c = ModelConfig::full();
        assert_eq!(
            (c.d_model, c.ffn_width, c.prenet_bottleneck, c.n_blocks, c.gst_size, c.lst_size),
            (256, 1024, 32, 5, 64, 32)
        );
        assert_eq!((c.alpha, c.sample_length_min, c.sample_length_max), (15, 80, 160));
        assert_eq!(c.beta, 0.25);
        assert_eq!((c.pool_kernel, c.pool_stride), (8, 4));
    }

    #[test]
    fn text_round_trip() {
        for c in [ModelConfig::full(), ModelConfig::desk(), ModelConfig::micro()] {
            assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ModelConfig::from_text("d_model = 8\nbogus = 1\n").is_err());
        assert!(ModelConfig::from_text("d_model = x\n").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let kv = parse_kv_lines("# header\n\n a = 1 # trailing\nb=2").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "2".into())]);
        assert!(parse_kv_lines("novalue").is_err());
    }
}

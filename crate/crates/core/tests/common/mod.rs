#![allow(dead_code)]

use lsttts::corpus::{generate_toy_corpus, Corpus, CorpusSpec};
use lsttts::style::FeatureSequence;
use lsttts::{LstTts, ModelConfig, PhonemeSequence, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn feats(t: usize, d: usize, seed: u64) -> FeatureSequence<f64> {
    FeatureSequence {
        frames: Tensor::randn(vec![t, d], 1.0, &mut rng(seed)),
        source_id: format!("rand{seed}"),
    }
}

pub fn phonemes(len: usize, vocab: usize, seed: u64) -> PhonemeSequence {
    use rand::Rng;
    let mut r = rng(seed);
    PhonemeSequence::new((0..len).map(|_| r.random_range(0..vocab)).collect(), vocab).unwrap()
}

/// Micro model with every parameter nudged off its initial value, so the
/// zero-initialised projections take part.
pub fn micro_model(seed: u64) -> LstTts<f64> {
    let mut m = LstTts::<f64>::new(ModelConfig { init_seed: seed, ..ModelConfig::micro() }).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = m.params.value(id).shape().to_vec();
        let noise: Tensor<f64> = Tensor::randn(shape, 0.1, &mut r);
        for (v, n) in m.params.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    m
}

/// Toy corpus matching the micro configuration.
pub fn micro_corpus(n_utts: usize, seed: u64) -> Corpus<f64> {
    let cfg = ModelConfig::micro();
    let spec = CorpusSpec {
        n_utts,
        n_speakers: 2,
        vocab: cfg.vocab.min(cfg.n_mels),
        n_mels: cfg.n_mels,
        seed,
        ..CorpusSpec::default()
    };
    generate_toy_corpus(&spec).unwrap()
}

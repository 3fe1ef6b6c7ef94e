use std::fs;

use lsttts::corpus::{decode_mel, generate_toy_corpus, phoneme_accuracy, CorpusSpec};
use lsttts::diagnostics::{decode_pgm, dump_attention, encode_pgm};
use lsttts::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn softmax_rows(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let t: Tensor<f64> = Tensor::randn(vec![rows, cols], 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
    t.softmax(1).unwrap().into_data()
}

#[test]
fn dump_writes_two_files_per_head_and_text_matches_image() {
    let (layers, heads, tq, tk) = (3, 2, 5, 7);
    let maps: Vec<(String, Tensor<f64>)> = (0..layers)
        .map(|l| {
            let data: Vec<f64> = (0..heads).flat_map(|h| softmax_rows(tq, tk, (l * heads + h) as u64)).collect();
            (format!("block{l}"), Tensor::new(vec![heads, tq, tk], data).unwrap())
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let files = dump_attention(&maps, &dir.path().join("attn/")).unwrap();
    assert_eq!(files.len(), layers * heads * 2);
    for pair in files.chunks(2) {
        let (r, c, px) = decode_pgm(&fs::read(&pair[0]).unwrap()).unwrap();
        assert_eq!((r, c), (tq, tk));
        let text = fs::read_to_string(&pair[1]).unwrap();
        let m: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(m.len(), tq);
        for row in &m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let flat: Vec<f64> = m.into_iter().flatten().collect();
        assert_eq!(encode_pgm(tq, tk, &flat), fs::read(&pair[0]).unwrap());
        let (lo, hi) = flat.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for (v, p) in flat.iter().zip(px) {
            let back = lo + (hi - lo) * p as f64 / 255.0;
            assert!((back - v).abs() <= (hi - lo) / 255.0);
        }
    }
}

#[test]
fn uniform_attention_dumps_uniform_gray() {
    let w = Tensor::new(vec![1, 3, 4], vec![0.25f64; 12]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = dump_attention(&[("u".into(), w)], &dir.path().join("x.")).unwrap();
    let (_, _, px) = decode_pgm(&fs::read(&files[0]).unwrap()).unwrap();
    assert!(px.iter().all(|&p| p == px[0]));
}

#[test]
fn dump_rejects_empty_and_unwritable() {
    let dir = tempfile::tempdir().unwrap();
    assert!(dump_attention::<f64>(&[], &dir.path().join("a")).is_err());
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let w = Tensor::new(vec![1, 1, 1], vec![1.0f64]).unwrap();
    assert!(dump_attention(&[("m".into(), w)], &blocker.join("sub/p")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn template_oracle_is_exact_on_clean_mels(seed in any::<u64>(), n_utts in 4usize..16) {
        let spec = CorpusSpec { n_utts, noise_sd: 0.0, seed, ..CorpusSpec::default() };
        let corpus = generate_toy_corpus::<f32>(&spec).unwrap();
        for u in &corpus.utterances {
            let d = decode_mel(&corpus.templates, &u.mel.frames, u.phonemes.len());
            prop_assert_eq!(phoneme_accuracy(&d, &u.phonemes.ids), 1.0);
        }
    }
}

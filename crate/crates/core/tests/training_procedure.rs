mod common;

use std::collections::BTreeMap;

use common::{feats, micro_corpus, micro_model, rng};
use lsttts::batch::{pad_batch, BatchItem};
use lsttts::corpus::{ExampleSampler, Split};
use lsttts::model::{fuse, stop_targets, tts_loss, TrainingInputs};
use lsttts::style::{truncate_style, StyleNetwork, StyleRepresentation};
use lsttts::train::batch_loss;
use lsttts::{Graph, LstTts, ModelConfig, ParamStore, Tensor};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Upper-tail p-value of Pearson's statistic against equal expected counts.
fn chi_square_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn style_of(g: &mut Graph<'_, f64>, t: usize, seed: u64) -> StyleRepresentation {
    let frames = g.constant(Tensor::randn(vec![t, 4], 1.0, &mut rng(seed)));
    StyleRepresentation { frames, includes_speaker: true }
}

proptest! {
    #[test]
    fn truncation_keeps_a_prefix_of_allowed_length(t in 1usize..60, alpha in 1usize..20, seed in any::<u64>()) {
        let mut g = Graph::<f64>::new();
        let s = style_of(&mut g, t, seed);
        let out = truncate_style(&mut g, s, alpha, &mut rng(seed)).unwrap();
        let keep = g.shape(out.frames)[0];
        prop_assert!(keep >= alpha.min(t) && keep <= t);
        prop_assert_eq!(g.value(out.frames).data(), &g.value(s.frames).data()[..keep * 4]);
        prop_assert!(out.includes_speaker);
    }
}

#[test]
fn truncation_length_is_uniform() {
    let (t, alpha) = (20, 4);
    let mut counts = vec![0usize; t - alpha + 1];
    let mut r = rng(2024);
    let mut g = Graph::<f64>::new();
    let s = style_of(&mut g, t, 0);
    for _ in 0..10_000 {
        let out = truncate_style(&mut g, s, alpha, &mut r).unwrap();
        counts[g.shape(out.frames)[0] - alpha] += 1;
    }
    let p = chi_square_p(&counts);
    assert!(p > 0.01, "p = {p}, counts {counts:?}");
}

fn style_net(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, StyleNetwork) {
    let mut store = ParamStore::new();
    let net = StyleNetwork::new(&mut store, "style", cfg, &mut rng(seed)).unwrap();
    (store, net)
}

#[test]
fn sampled_styles_are_scaled_tokens_plus_speaker() {
    for (cfg, trials) in [(ModelConfig::micro(), 50), (ModelConfig::full(), 5)] {
        let (store, net) = style_net(&cfg, 3);
        let tokens = store.value(net.local.codebook.tokens).clone();
        let d = cfg.d_model;
        for seed in 0..trials {
            let mut g = Graph::no_grad(&store);
            let spk = net.speaker_embedding(&mut g, &feats(7, cfg.d_f, seed)).unwrap();
            let s = net
                .sample_styles(&mut g, spk, cfg.beta, (cfg.sample_length_min, cfg.sample_length_max), &mut rng(seed))
                .unwrap();
            assert!(s.includes_speaker);
            let frames = g.value(s.frames);
            let len = frames.rows();
            assert!((cfg.sample_length_min..=cfg.sample_length_max).contains(&len));
            let v = g.value(spk.vector).data();
            for row in frames.data().chunks(d) {
                let hit = (0..net.local.codebook.size).any(|j| {
                    let tok = &tokens.data()[j * d..(j + 1) * d];
                    row.iter().zip(tok).zip(v).all(|((&x, &t), &sv)| x == cfg.beta * t + sv)
                });
                assert!(hit, "frame is not beta * token + speaker");
            }
        }
    }
    let full = ModelConfig::full();
    assert_eq!((full.sample_length_min, full.sample_length_max), (80, 160));
}

#[test]
fn sampler_pairs_same_speaker_and_is_uniform() {
    let corpus = micro_corpus(12, 5);
    let sampler = ExampleSampler::new(&corpus).unwrap();
    let train = corpus.indices(Split::Train);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut r = rng(77);
    for _ in 0..12_000 {
        let ex = sampler.sample(&mut r);
        let (s, k) = (&corpus.utterances[ex.style], &corpus.utterances[ex.speaker]);
        assert_ne!(ex.style, ex.speaker);
        assert_eq!(s.speaker_id, k.speaker_id);
        assert!(train.contains(&ex.style) && train.contains(&ex.speaker));
        *counts.entry(ex.style).or_default() += 1;
    }
    assert_eq!(counts.len(), train.len());
    let p = chi_square_p(&counts.into_values().collect::<Vec<_>>());
    assert!(p > 0.01, "p = {p}");
}

fn items(model: &LstTts<f64>, n: usize) -> Vec<BatchItem<f64>> {
    let corpus = micro_corpus(8, 3);
    let sampler = ExampleSampler::new(&corpus).unwrap();
    let mut r = rng(9);
    (0..n)
        .map(|_| {
            let ex = sampler.sample(&mut r);
            let (u, k) = (&corpus.utterances[ex.style], &corpus.utterances[ex.speaker]);
            BatchItem {
                utt_id: u.utt_id.clone(),
                speaker_utt_id: k.utt_id.clone(),
                phonemes: u.phonemes.clone(),
                target: u.mel.clone(),
                style_ref: model.features(&u.mel, &u.utt_id).unwrap(),
                speaker_ref: model.features(&k.mel, &k.utt_id).unwrap(),
            }
        })
        .collect()
}

fn item_loss(model: &LstTts<f64>, it: &BatchItem<f64>) -> f64 {
    let mut g = Graph::with_params(&model.params);
    let inputs = TrainingInputs {
        style_ref: &it.style_ref,
        speaker_ref: &it.speaker_ref,
        phonemes: &it.phonemes,
        target: &it.target,
    };
    let (l, _) = model.forward_training(&mut g, inputs, None::<&mut ChaCha8Rng>).unwrap();
    l.values(&g)[0]
}

#[test]
fn padded_batch_loss_is_mean_of_item_losses() {
    let model = micro_model(1);
    let its = items(&model, 5);
    let lens: Vec<usize> = its.iter().map(|i| i.target.len()).collect();
    assert!(lens.iter().any(|&l| l != lens[0]), "need ragged lengths: {lens:?}");
    let batch = pad_batch(&its).unwrap();
    let mut g = Graph::with_params(&model.params);
    let l = batch_loss(&model, &mut g, &batch, None::<&mut ChaCha8Rng>).unwrap();
    let batched = l.values(&g)[0];
    let mean = its.iter().map(|i| item_loss(&model, i)).sum::<f64>() / its.len() as f64;
    assert!((batched - mean).abs() < 1e-12, "{batched} vs {mean}");
}

#[test]
fn padding_contents_do_not_matter() {
    let model = micro_model(2);
    let batch = pad_batch(&items(&model, 4)).unwrap();
    let mut dirty = batch.clone();
    let tm = batch.max_frames();
    let nm = model.config.n_mels;
    for b in 0..batch.len() {
        let real = batch.item(b).unwrap().target.len();
        for t in real..tm {
            for k in 0..nm {
                dirty.targets.data_mut()[(b * tm + t) * nm + k] = 1e3;
            }
            dirty.stop_targets.data_mut()[b * tm + t] = 1.0;
        }
    }
    let loss = |bt: &lsttts::batch::Batch<f64>| {
        let mut g = Graph::with_params(&model.params);
        let l = batch_loss(&model, &mut g, bt, None::<&mut ChaCha8Rng>).unwrap();
        l.values(&g)
    };
    assert_eq!(loss(&batch), loss(&dirty));
}

#[test]
fn every_parameter_receives_gradient() {
    let model = micro_model(4);
    let batch = pad_batch(&items(&model, 4)).unwrap();
    let mut g = Graph::with_params(&model.params);
    let l = batch_loss(&model, &mut g, &batch, None::<&mut ChaCha8Rng>).unwrap();
    let grads = g.backward(l.total).unwrap();
    let pg: BTreeMap<usize, Tensor<f64>> = g.param_grads(&grads).into_iter().map(|(id, t)| (id.index(), t)).collect();
    for (id, p) in model.params.iter() {
        let gr = pg.get(&id.index()).unwrap_or_else(|| panic!("{} has no gradient", p.name));
        assert!(gr.all_finite(), "{}", p.name);
        assert!(gr.sq_norm() > 0.0, "{} has an all-zero gradient", p.name);
    }
    let lst = model.style.local.codebook.tokens;
    assert!(pg[&lst.index()].sq_norm() > 0.0);
}

#[test]
fn forward_training_is_the_manual_composition() {
    let model = micro_model(6);
    let it = &items(&model, 1)[0];
    let cfg = &model.config;
    let inputs = TrainingInputs {
        style_ref: &it.style_ref,
        speaker_ref: &it.speaker_ref,
        phonemes: &it.phonemes,
        target: &it.target,
    };
    let mut g = Graph::with_params(&model.params);
    let (auto, _) = model.forward_training(&mut g, inputs, Some(&mut rng(8))).unwrap();

    let mut r = rng(8);
    let spk = model.style.speaker_embedding(&mut g, &it.speaker_ref).unwrap();
    let (local, _) = model.style.local_style_embeddings(&mut g, &it.style_ref).unwrap();
    let smooth = model.style.smooth_styles(&mut g, local).unwrap();
    let combined = model.style.combine_style(&mut g, spk, smooth).unwrap();
    let style = truncate_style(&mut g, combined, cfg.alpha, &mut r).unwrap();
    let content = model.content_encode(&mut g, &it.phonemes).unwrap();
    let (fused, _) = fuse(&mut g, &model.fusion, content, style, cfg.dropout).unwrap();
    let target = g.constant(it.target.frames.clone());
    let mel_in = model.teacher_forced_input(&mut g, target).unwrap();
    let out = model.decoder.forward(&mut g, mel_in, fused, cfg.dropout, cfg.prenet_dropout).unwrap();
    let stops = stop_targets(it.target.len());
    let manual = tts_loss(&mut g, &out, target, &stops, None, cfg.stop_pos_weight).unwrap();
    assert_eq!(auto.values(&g), manual.values(&g));
}

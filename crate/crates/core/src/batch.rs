//! Right-padded training batches with masks.

use crate::error::{Error, Result};
use crate::model::{stop_targets, MelSpectrogram, PhonemeSequence};
use crate::scalar::Scalar;
use crate::style::FeatureSequence;
use crate::tensor::Tensor;

/// One unpadded training item.
#[derive(Clone, Debug)]
pub struct BatchItem<F> {
    pub utt_id: String,
    pub speaker_utt_id: String,
    pub phonemes: PhonemeSequence,
    pub target: MelSpectrogram<F>,
    pub style_ref: FeatureSequence<F>,
    pub speaker_ref: FeatureSequence<F>,
}

/// Padded batch. Masks are 1 on real positions and 0 on padding.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub utt_ids: Vec<String>,
    pub speaker_utt_ids: Vec<String>,
    /// `[B][T_c]`, padded with id 0.
    pub phonemes: Vec<Vec<usize>>,
    pub content_mask: Tensor<F>,
    /// `[B, T_m, n_mels]`
    pub targets: Tensor<F>,
    pub frame_mask: Tensor<F>,
    pub stop_targets: Tensor<F>,
    /// `[B, T_f, d_f]`
    pub style_feats: Tensor<F>,
    pub style_mask: Tensor<F>,
    pub speaker_feats: Tensor<F>,
    pub speaker_mask: Tensor<F>,
}

fn mask<F: Scalar>(lens: &[usize], t: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); lens.len() * t];
    for (b, &l) in lens.iter().enumerate() {
        data[b * t..b * t + l].fill(F::one());
    }
    Tensor::new(vec![lens.len(), t], data).expect("consistent shape")
}

fn pad_matrices<F: Scalar>(ms: &[&Tensor<F>]) -> Result<(Tensor<F>, Tensor<F>)> {
    let d = ms[0].cols();
    if ms.iter().any(|m| m.rank() != 2 || m.cols() != d) {
        return Err(Error::dim("pad_batch", ms[0].shape(), &[0, d]));
    }
    let lens: Vec<usize> = ms.iter().map(|m| m.rows()).collect();
    let t = lens.iter().copied().max().unwrap_or(0);
    let mut data = vec![F::zero(); ms.len() * t * d];
    for (b, m) in ms.iter().enumerate() {
        data[b * t * d..b * t * d + m.len()].copy_from_slice(m.data());
    }
    Ok((Tensor::new(vec![ms.len(), t, d], data)?, mask(&lens, t)))
}

fn len_of<F: Scalar>(mask: &Tensor<F>, b: usize) -> usize {
    mask.row(b).iter().filter(|&&v| v > F::zero()).count()
}

fn slice<F: Scalar>(padded: &Tensor<F>, b: usize, len: usize) -> Tensor<F> {
    let (t, d) = (padded.shape()[1], padded.shape()[2]);
    let start = b * t * d;
    Tensor::new(vec![len, d], padded.data()[start..start + len * d].to_vec()).expect("consistent shape")
}

/// Pads every field to its batch maximum.
pub fn pad_batch<F: Scalar>(items: &[BatchItem<F>]) -> Result<Batch<F>> {
    if items.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if items.iter().any(|i| i.target.is_empty() || i.phonemes.is_empty()) {
        return Err(Error::Empty("batch item"));
    }
    let c_lens: Vec<usize> = items.iter().map(|i| i.phonemes.len()).collect();
    let tc = c_lens.iter().copied().max().unwrap_or(0);
    let phonemes = items
        .iter()
        .map(|i| {
            let mut p = i.phonemes.ids.clone();
            p.resize(tc, 0);
            p
        })
        .collect();
    let (targets, frame_mask) = pad_matrices(&items.iter().map(|i| &i.target.frames).collect::<Vec<_>>())?;
    let tm = targets.shape()[1];
    let mut stops = vec![F::zero(); items.len() * tm];
    for (b, i) in items.iter().enumerate() {
        stops[b * tm..b * tm + i.target.len()].copy_from_slice(stop_targets::<F>(i.target.len()).data());
    }
    let (style_feats, style_mask) = pad_matrices(&items.iter().map(|i| &i.style_ref.frames).collect::<Vec<_>>())?;
    let (speaker_feats, speaker_mask) =
        pad_matrices(&items.iter().map(|i| &i.speaker_ref.frames).collect::<Vec<_>>())?;
    Ok(Batch {
        utt_ids: items.iter().map(|i| i.utt_id.clone()).collect(),
        speaker_utt_ids: items.iter().map(|i| i.speaker_utt_id.clone()).collect(),
        phonemes,
        content_mask: mask(&c_lens, tc),
        targets,
        frame_mask,
        stop_targets: Tensor::new(vec![items.len(), tm], stops)?,
        style_feats,
        style_mask,
        speaker_feats,
        speaker_mask,
    })
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.utt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utt_ids.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.targets.shape()[1]
    }

    /// Recovers item `b` without padding.
    pub fn item(&self, b: usize) -> Result<BatchItem<F>> {
        if b >= self.len() {
            return Err(Error::IndexOutOfRange {
                what: "batch",
                index: b,
                size: self.len(),
            });
        }
        let tc = len_of(&self.content_mask, b);
        Ok(BatchItem {
            utt_id: self.utt_ids[b].clone(),
            speaker_utt_id: self.speaker_utt_ids[b].clone(),
            phonemes: PhonemeSequence {
                ids: self.phonemes[b][..tc].to_vec(),
            },
            target: MelSpectrogram::new(slice(&self.targets, b, len_of(&self.frame_mask, b)))?,
            style_ref: FeatureSequence {
                frames: slice(&self.style_feats, b, len_of(&self.style_mask, b)),
                source_id: self.utt_ids[b].clone(),
            },
            speaker_ref: FeatureSequence {
                frames: slice(&self.speaker_feats, b, len_of(&self.speaker_mask, b)),
                source_id: self.speaker_utt_ids[b].clone(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(t: usize, tc: usize) -> BatchItem<f64> {
        let frames = Tensor::from_f64(vec![t, 2], &(0..2 * t).map(|v| v as f64 + 1.0).collect::<Vec<_>>()).unwrap();
        BatchItem {
            utt_id: format!("u{t}"),
            speaker_utt_id: "s".into(),
            phonemes: PhonemeSequence { ids: vec![1; tc] },
            target: MelSpectrogram::new(frames.clone()).unwrap(),
            style_ref: FeatureSequence { frames: frames.clone(), source_id: "a".into() },
            speaker_ref: FeatureSequence { frames, source_id: "b".into() },
        }
    }

    #[test]
    fn single_item_masks_all_ones() {
        let b = pad_batch(&[item(4, 2)]).unwrap();
        assert!(b.frame_mask.data().iter().all(|&v| v == 1.0));
        assert!(b.content_mask.data().iter().all(|&v| v == 1.0));
        assert_eq!(b.stop_targets.data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn two_items_padding() {
        let b = pad_batch(&[item(3, 1), item(5, 2)]).unwrap();
        assert_eq!(b.frame_mask.row(0), &[1., 1., 1., 0., 0.]);
        assert_eq!(b.stop_targets.row(0), &[0., 0., 1., 0., 0.]);
        assert_eq!(b.stop_targets.row(1), &[0., 0., 0., 0., 1.]);
        assert_eq!(b.phonemes[0], vec![1, 0]);
        let back = b.item(0).unwrap();
        assert_eq!(back.target, item(3, 1).target);
        assert_eq!(back.phonemes.ids, vec![1]);
        assert!(pad_batch::<f64>(&[]).is_err());
    }
}

use super::{Modality, ModalityDims, MultimodalSample};
use crate::error::{Error, Result};
use crate::protocols::ModalityMask;
use crate::real::Real;
use crate::tensor::Tensor;

/// Zero-padded mini-batch. Row order follows the input samples.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub ids: Vec<String>,
    pub labels: Vec<F>,
    /// `[batch, max_len, d^m]` per modality, zero at padded positions.
    pub padded: [Tensor<F>; 3],
    /// `[batch * max_len]` per modality, `true` at padded positions.
    pub pad_mask: [Vec<bool>; 3],
    pub lengths: [Vec<usize>; 3],
    /// Per-row modality availability; complete unless a mask was applied.
    pub availability: Vec<ModalityMask>,
    pub dims: ModalityDims,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, m: Modality) -> &Tensor<F> {
        &self.padded[m.index()]
    }

    pub fn pad_mask(&self, m: Modality) -> &[bool] {
        &self.pad_mask[m.index()]
    }

    pub fn max_len(&self, m: Modality) -> usize {
        self.padded[m.index()].shape()[1]
    }
}

/// Pads each modality to its batch-wide maximum length.
pub fn collate<F: Real>(samples: &[&MultimodalSample]) -> Result<Batch<F>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("cannot collate an empty sample list".into()))?;
    let dims = first.dims();
    if let Some(s) = samples.iter().find(|s| s.dims() != dims) {
        return Err(Error::Shape(format!(
            "sample {} has dims {} but the batch uses {dims}",
            s.id,
            s.dims()
        )));
    }
    let b = samples.len();
    let mut padded = Vec::with_capacity(3);
    let mut masks = Vec::with_capacity(3);
    let mut lengths = Vec::with_capacity(3);
    for m in Modality::ALL {
        let d = dims.get(m);
        let lens: Vec<usize> = samples.iter().map(|s| s.features(m).len()).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let mut data = vec![F::zero(); b * max_len * d];
        let mut mask = vec![true; b * max_len];
        for (i, s) in samples.iter().enumerate() {
            let f = s.features(m);
            let dst = &mut data[i * max_len * d..][..f.values().len()];
            for (o, &x) in dst.iter_mut().zip(f.values()) {
                *o = F::lit(x as f64);
            }
            mask[i * max_len..i * max_len + f.len()].fill(false);
        }
        padded.push(Tensor::new(vec![b, max_len, d], data));
        masks.push(mask);
        lengths.push(lens);
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        labels: samples.iter().map(|s| F::lit(s.label as f64)).collect(),
        padded: padded.try_into().expect("three modalities"),
        pad_mask: masks.try_into().expect("three modalities"),
        lengths: lengths.try_into().expect("three modalities"),
        availability: vec![ModalityMask::COMPLETE; b],
        dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::FeatureSequence;

    fn sample(id: &str, lens: [usize; 3], label: f32) -> MultimodalSample {
        let dims = [3, 2, 2];
        let feats = Modality::ALL.map(|m| {
            let n = lens[m.index()] * dims[m.index()];
            let vals = (0..n).map(|i| i as f32 + 1.0).collect();
            FeatureSequence::new(m, dims[m.index()], vals).unwrap()
        });
        MultimodalSample::new(id, feats, label).unwrap()
    }

    #[test]
    fn pads_to_batch_max_and_masks_tail() {
        let a = sample("a", [3, 1, 2], 0.5);
        let b = sample("b", [5, 2, 2], -1.0);
        let batch: Batch<f32> = collate(&[&a, &b]).unwrap();
        assert_eq!(batch.max_len(Modality::L), 5);
        assert_eq!(batch.features(Modality::L).shape(), [2, 5, 3]);
        let row0 = &batch.pad_mask(Modality::L)[0..5];
        assert_eq!(row0.iter().filter(|&&p| p).count(), 2);
        assert_eq!(batch.ids, ["a", "b"]);
        assert_eq!(batch.labels, [0.5, -1.0]);
        // Padded frames are exactly zero.
        let l = batch.features(Modality::L).data();
        assert!(l[9..15].iter().all(|&x| x == 0.0));
        for m in Modality::ALL {
            for (i, len) in batch.lengths[m.index()].iter().enumerate() {
                let t = batch.max_len(m);
                let real = batch.pad_mask(m)[i * t..(i + 1) * t]
                    .iter()
                    .filter(|&&p| !p)
                    .count();
                assert_eq!(real, *len);
            }
        }
    }

    #[test]
    fn single_sample_has_no_padding() {
        let a = sample("a", [4, 2, 3], 0.0);
        let batch: Batch<f64> = collate(&[&a]).unwrap();
        for m in Modality::ALL {
            assert!(batch.pad_mask(m).iter().all(|&p| !p));
        }
    }

    #[test]
    fn rejects_empty_and_inconsistent() {
        assert!(collate::<f32>(&[]).is_err());
        let a = sample("a", [1, 1, 1], 0.0);
        let feats = Modality::ALL.map(|m| FeatureSequence::new(m, 7, vec![0.0; 7]).unwrap());
        let b = MultimodalSample::new("b", feats, 0.0).unwrap();
        assert!(collate::<f32>(&[&a, &b]).is_err());
    }
}

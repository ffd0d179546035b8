//! Missing-modality protocols: the six fixed subsets, the random protocol's
//! mask sampler, the missing-rate formula and head routing.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datamodel::{Batch, Modality};
use crate::error::{Error, Result};
use crate::real::Real;

/// Non-empty set of available modalities.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityMask(u8);

impl ModalityMask {
    pub const COMPLETE: ModalityMask = ModalityMask(0b111);

    pub fn new(available: &[Modality]) -> Result<Self> {
        let bits = available.iter().fold(0u8, |acc, m| acc | 1 << m.index());
        Self::from_bits(bits)
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 0b111 {
            return Err(Error::Mask(format!(
                "mask bits {bits:#05b} must name at least one of l, v, a"
            )));
        }
        Ok(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    /// Number of available modalities.
    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_complete(self) -> bool {
        self == Self::COMPLETE
    }

    pub fn modalities(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    /// Table label such as `L+A` or `V`.
    pub fn label(self) -> String {
        match route(self) {
            Head::T => "L+A+V".to_string(),
            h => h.label().to_string(),
        }
    }
}

impl fmt::Debug for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.modalities().map(Modality::as_str).collect();
        write!(f, "{{{s}}}")
    }
}

impl Serialize for ModalityMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let names: Vec<&str> = self.modalities().map(Modality::as_str).collect();
        names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModalityMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        let mods = names
            .iter()
            .map(|n| n.parse::<Modality>())
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        ModalityMask::new(&mods).map_err(serde::de::Error::custom)
    }
}

/// One regression head per modality subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    T,
    La,
    Lv,
    Av,
    L,
    A,
    V,
}

impl Head {
    /// Teacher first, then students in `la, lv, av, l, a, v` order.
    pub const ALL: [Head; 7] = [
        Head::T,
        Head::La,
        Head::Lv,
        Head::Av,
        Head::L,
        Head::A,
        Head::V,
    ];
    pub const STUDENTS: [Head; 6] = [Head::La, Head::Lv, Head::Av, Head::L, Head::A, Head::V];
    pub const BIMODAL: [Head; 3] = [Head::La, Head::Lv, Head::Av];
    pub const UNIMODAL: [Head; 3] = [Head::L, Head::A, Head::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Head::T => "t",
            Head::La => "la",
            Head::Lv => "lv",
            Head::Av => "av",
            Head::L => "l",
            Head::A => "a",
            Head::V => "v",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Head::T => "T",
            Head::La => "L+A",
            Head::Lv => "L+V",
            Head::Av => "A+V",
            Head::L => "L",
            Head::A => "A",
            Head::V => "V",
        }
    }

    /// Modalities the head's representation chain reads.
    pub fn mask(self) -> ModalityMask {
        use Modality::*;
        let mods: &[Modality] = match self {
            Head::T => &[L, V, A],
            Head::La => &[L, A],
            Head::Lv => &[L, V],
            Head::Av => &[A, V],
            Head::L => &[L],
            Head::A => &[A],
            Head::V => &[V],
        };
        ModalityMask::new(mods).expect("non-empty")
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Head::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::UnknownHead(s.to_string()))
    }
}

/// The six proper non-empty subsets in `la, lv, av, l, a, v` order.
pub fn enumerate_fixed_subsets() -> [ModalityMask; 6] {
    Head::STUDENTS.map(Head::mask)
}

/// Head that serves a sample with the given availability.
pub fn route(mask: ModalityMask) -> Head {
    Head::ALL
        .into_iter()
        .find(|h| h.mask() == mask)
        .expect("every non-empty mask has a head")
}

/// Routes raw availability bits, rejecting the empty set.
pub fn route_bits(bits: u8) -> Result<Head> {
    ModalityMask::from_bits(bits).map(route)
}

/// `1 - Σ|available_i| / (3L)`
pub fn missing_rate(masks: &[ModalityMask]) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::Mask("missing rate of an empty assignment".into()));
    }
    let available: usize = masks.iter().map(|m| m.count()).sum();
    Ok(1.0 - available as f64 / (3 * masks.len()) as f64)
}

/// Dataset-aligned masks from the random missing protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskAssignment {
    masks: Vec<ModalityMask>,
}

impl MaskAssignment {
    pub fn new(masks: Vec<ModalityMask>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Mask("empty mask assignment".into()));
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &[ModalityMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn realized_mr(&self) -> f64 {
        missing_rate(&self.masks).expect("assignment is non-empty")
    }

    /// `[["l","v"],["a"],…]`
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let a: MaskAssignment = serde_json::from_str(s)?;
        Self::new(a.masks)
    }
}

/// Upper bound (exclusive) on accepted target missing rates.
pub const MAX_TARGET_MR: f64 = 0.7;

/// Seeded random-protocol masks hitting `target_mr` as closely as any
/// assignment of `n` non-empty masks can.
///
/// The total number of dropped modalities is fixed at `round(3 n target_mr)`
/// (capped at `2n`). Per-sample drop counts follow `P(k) ∝ C(3,k) θ^k`, which is
/// the uniform distribution over the seven non-empty subsets tilted so its
/// mean matches the quota; counts are rounded to integers that meet the quota
/// exactly, shuffled, and each sample then drops a uniformly chosen set of
/// `k` modalities.
pub fn sample_random_masks(n: usize, target_mr: f64, seed: u64) -> Result<MaskAssignment> {
    if n == 0 {
        return Err(Error::Mask("need at least one sample".into()));
    }
    if !(0.0..MAX_TARGET_MR).contains(&target_mr) {
        return Err(Error::Mask(format!(
            "target missing rate {target_mr} outside [0, {MAX_TARGET_MR})"
        )));
    }
    let quota = ((3 * n) as f64 * target_mr).round().min((2 * n) as f64) as usize;
    let (n1, n2) = drop_counts(n, quota);
    let n0 = n - n1 - n2;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drops: Vec<usize> = std::iter::repeat(0)
        .take(n0)
        .chain(std::iter::repeat(1).take(n1))
        .chain(std::iter::repeat(2).take(n2))
        .collect();
    drops.shuffle(&mut rng);

    let masks = drops
        .into_iter()
        .map(|k| {
            let pick = Modality::ALL[rng.gen_range(0..3)];
            let bits = match k {
                0 => 0b111,
                1 => 0b111 & !(1 << pick.index()),
                _ => 1 << pick.index(),
            };
            ModalityMask::from_bits(bits).expect("non-empty")
        })
        .collect();
    MaskAssignment::new(masks)
}

/// Integer numbers of one- and two-modality drops summing to `quota`.
fn drop_counts(n: usize, quota: usize) -> (usize, usize) {
    if quota == 0 {
        return (0, 0);
    }
    let lo = quota.saturating_sub(n);
    let hi = quota / 2;
    let mean = quota as f64 / n as f64;
    let mean_k = |t: f64| (3.0 * t + 6.0 * t * t) / (1.0 + 3.0 * t + 3.0 * t * t);
    let n2 = if mean >= 2.0 {
        hi
    } else {
        let (mut a, mut b) = (0.0f64, 1.0f64);
        while mean_k(b) < mean {
            b *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mean_k(mid) < mean {
                a = mid;
            } else {
                b = mid;
            }
        }
        let t = 0.5 * (a + b);
        let p2 = 3.0 * t * t / (1.0 + 3.0 * t + 3.0 * t * t);
        ((p2 * n as f64).round() as usize).clamp(lo, hi)
    };
    (quota - 2 * n2, n2)
}

/// Zeroes unavailable modalities and records per-row availability.
pub fn apply_mask<F: Real>(batch: &Batch<F>, masks: &[ModalityMask]) -> Result<Batch<F>> {
    if masks.len() != batch.len() {
        return Err(Error::Mask(format!(
            "{} masks for a batch of {}",
            masks.len(),
            batch.len()
        )));
    }
    let mut out = batch.clone();
    for (i, mask) in masks.iter().enumerate() {
        for m in Modality::ALL {
            if mask.contains(m) {
                continue;
            }
            let t = &mut out.padded[m.index()];
            let row = t.len() / batch.len();
            t.data_mut()[i * row..(i + 1) * row].fill(F::zero());
        }
        out.availability[i] = ModalityMask(out.availability[i].0 & mask.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{collate, generate_synthetic, ModalityDims};

    #[test]
    fn six_fixed_subsets_in_stable_order() {
        let subsets = enumerate_fixed_subsets();
        assert_eq!(subsets.iter().filter(|m| m.count() == 2).count(), 3);
        assert_eq!(subsets.iter().filter(|m| m.count() == 1).count(), 3);
        assert!(subsets.iter().all(|m| !m.is_complete()));
        assert_eq!(subsets, enumerate_fixed_subsets());
        let labels: Vec<String> = subsets.iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["L+A", "L+V", "A+V", "L", "A", "V"]);
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(ModalityMask::new(&[]).is_err());
        assert!(route_bits(0).is_err());
        assert!(missing_rate(&[]).is_err());
    }

    #[test]
    fn routing_table() {
        use Modality::*;
        assert_eq!(route(ModalityMask::COMPLETE), Head::T);
        assert_eq!(route(ModalityMask::new(&[V]).unwrap()), Head::V);
        assert_eq!(route(ModalityMask::new(&[L, A]).unwrap()), Head::La);
        assert_eq!(route(ModalityMask::new(&[A, L]).unwrap()), Head::La);
        for h in Head::ALL {
            assert_eq!(route(h.mask()), h);
        }
    }

    #[test]
    fn missing_rate_formula() {
        use Modality::*;
        let l = ModalityMask::new(&[L]).unwrap();
        let mr = missing_rate(&[ModalityMask::COMPLETE, l]).unwrap();
        assert!((mr - (1.0 - 4.0 / 6.0)).abs() < 1e-15);
        assert_eq!(missing_rate(&[ModalityMask::COMPLETE; 4]).unwrap(), 0.0);
        let singles = [l, ModalityMask::new(&[V]).unwrap(), ModalityMask::new(&[A]).unwrap()];
        assert!((missing_rate(&singles).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn random_masks_hit_target_and_are_deterministic() {
        let a = sample_random_masks(300, 0.4, 1).unwrap();
        assert!((a.realized_mr() - 0.4).abs() <= 1.0 / 900.0);
        assert_eq!(a, sample_random_masks(300, 0.4, 1).unwrap());
        assert_ne!(a, sample_random_masks(300, 0.4, 2).unwrap());
        let z = sample_random_masks(10, 0.0, 5).unwrap();
        assert!(z.masks().iter().all(|m| m.is_complete()));
        assert!(sample_random_masks(10, 0.7, 0).is_err());
        assert!(sample_random_masks(10, -0.1, 0).is_err());
        assert!(sample_random_masks(0, 0.2, 0).is_err());
        let top = sample_random_masks(7, 0.69, 0).unwrap();
        assert!(top.masks().iter().all(|m| m.count() == 1));
    }

    #[test]
    fn per_modality_missing_frequency_matches_target() {
        let a = sample_random_masks(6000, 0.4, 42).unwrap();
        for m in Modality::ALL {
            let missing = a.masks().iter().filter(|k| !k.contains(m)).count();
            let freq = missing as f64 / a.len() as f64;
            assert!((freq - 0.4).abs() < 0.03, "{m}: {freq}");
        }
    }

    #[test]
    fn mask_json_format() {
        use Modality::*;
        let a = MaskAssignment::new(vec![
            ModalityMask::new(&[L, V]).unwrap(),
            ModalityMask::new(&[A]).unwrap(),
        ])
        .unwrap();
        let s = a.to_json().unwrap();
        assert_eq!(s, r#"[["l","v"],["a"]]"#);
        assert_eq!(MaskAssignment::from_json(&s).unwrap(), a);
        assert!(MaskAssignment::from_json(r#"[[]]"#).is_err());
        assert!(MaskAssignment::from_json(r#"[["x"]]"#).is_err());
    }

    #[test]
    fn apply_mask_zeroes_and_flags() {
        use Modality::*;
        let ds = generate_synthetic(3, ModalityDims { l: 4, v: 3, a: 2 }, (2, 4), 0, 10.0).unwrap();
        let refs: Vec<_> = ds.samples().iter().collect();
        let batch = collate::<f32>(&refs).unwrap();
        let only_l = ModalityMask::new(&[L]).unwrap();
        let masks = [only_l, ModalityMask::COMPLETE, only_l];
        let masked = apply_mask(&batch, &masks).unwrap();
        assert_eq!(masked.availability, masks);
        let row = |t: &crate::Tensor<f32>, i: usize| {
            let n = t.len() / 3;
            t.data()[i * n..(i + 1) * n].to_vec()
        };
        for m in [V, A] {
            assert!(row(masked.features(m), 0).iter().all(|&x| x == 0.0));
            assert_eq!(row(masked.features(m), 1), row(batch.features(m), 1));
        }
        assert_eq!(masked.features(L).data(), batch.features(L).data());

        let again = apply_mask(&masked, &masks).unwrap();
        for m in Modality::ALL {
            assert_eq!(again.features(m).data(), masked.features(m).data());
        }
        assert_eq!(again.availability, masked.availability);

        let full = apply_mask(&batch, &[ModalityMask::COMPLETE; 3]).unwrap();
        for m in Modality::ALL {
            assert_eq!(full.features(m).data(), batch.features(m).data());
        }
        assert!(apply_mask(&batch, &masks[..2]).is_err());
    }
}

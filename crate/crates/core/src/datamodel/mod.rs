//! Samples, batches, the on-disk dataset format and the synthetic generator.

mod batch;
mod io;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{collate, Batch};
pub use io::{
    blob_file, load_dataset, save_dataset, DatasetManifest, ManifestRecord, PerModality,
    MANIFEST_FILE,
};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Lexical, visual and acoustic channels. Declaration order is the storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    L,
    V,
    A,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::L, Modality::V, Modality::A];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::L => "l",
            Modality::V => "v",
            Modality::A => "a",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l" | "L" => Ok(Modality::L),
            "v" | "V" => Ok(Modality::V),
            "a" | "A" => Ok(Modality::A),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Per-modality input feature dimensions `d^m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub l: usize,
    pub v: usize,
    pub a: usize,
}

impl Default for ModalityDims {
    /// Scaled-down lexical/visual/acoustic dims for desk-scale runs.
    fn default() -> Self {
        Self { l: 64, v: 16, a: 16 }
    }
}

impl ModalityDims {
    /// Full-size lexical (BERT), visual (Facet) and acoustic (COVAREP) dims.
    pub const MOSI: ModalityDims = ModalityDims {
        l: 768,
        v: 47,
        a: 74,
    };

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::L => self.l,
            Modality::V => self.v,
            Modality::A => self.a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.v == 0 || self.a == 0 {
            return Err(Error::Config(format!("dims must be positive, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for ModalityDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l={},v={},a={}", self.l, self.v, self.a)
    }
}

impl FromStr for ModalityDims {
    type Err = Error;

    /// Parses `l=768,v=47,a=74`.
    fn from_str(s: &str) -> Result<Self> {
        let mut dims = [None; 3];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in `{part}`")))?;
            let m: Modality = k.trim().parse()?;
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid dimension `{v}`")))?;
            dims[m.index()] = Some(n);
        }
        match dims {
            [Some(l), Some(v), Some(a)] => {
                let d = ModalityDims { l, v, a };
                d.validate()?;
                Ok(d)
            }
            _ => Err(Error::Config(format!(
                "dims `{s}` must set each of l, v and a"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// A `length × dim` sequence of feature frames for one modality of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    modality: Modality,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape(format!("{modality}: zero feature dimension")));
        }
        if values.is_empty() || values.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{modality}: {} values do not form a non-empty sequence of dim {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                path: format!("features.{modality}"),
            });
        }
        Ok(Self {
            modality,
            dim,
            values,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Time-average of the frames.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for t in 0..self.len() {
            for (acc, &x) in m.iter_mut().zip(self.frame(t)) {
                *acc += x as f64;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }
}

/// One complete sample: all three modalities plus a sentiment label in `[-3, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    features: [FeatureSequence; 3],
    pub label: f32,
}

impl MultimodalSample {
    pub fn new(id: impl Into<String>, features: [FeatureSequence; 3], label: f32) -> Result<Self> {
        let id = id.into();
        for (m, f) in Modality::ALL.iter().zip(&features) {
            if f.modality() != *m {
                return Err(Error::Shape(format!(
                    "sample {id}: slot {m} holds {} features",
                    f.modality()
                )));
            }
        }
        if !(-3.0..=3.0).contains(&label) {
            return Err(Error::Config(format!(
                "sample {id}: label {label} outside [-3, 3]"
            )));
        }
        Ok(Self {
            id,
            features,
            label,
        })
    }

    pub fn features(&self, m: Modality) -> &FeatureSequence {
        &self.features[m.index()]
    }

    /// Replaces one modality's values, keeping its shape.
    pub fn with_features(&self, m: Modality, values: Vec<f32>) -> Result<Self> {
        let old = self.features(m);
        if values.len() != old.values().len() {
            return Err(Error::Shape(format!(
                "sample {}: replacement for {m} changes the sequence shape",
                self.id
            )));
        }
        let mut s = self.clone();
        s.features[m.index()] = FeatureSequence::new(m, old.dim(), values)?;
        Ok(s)
    }

    pub fn dims(&self) -> ModalityDims {
        ModalityDims {
            l: self.features[0].dim(),
            v: self.features[1].dim(),
            a: self.features[2].dim(),
        }
    }
}

/// An immutable collection of complete samples from one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    dims: ModalityDims,
    samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn new(split: Split, dims: ModalityDims, samples: Vec<MultimodalSample>) -> Result<Self> {
        dims.validate()?;
        if let Some(s) = samples.iter().find(|s| s.dims() != dims) {
            return Err(Error::Shape(format!(
                "sample {} has dims {} but the dataset declares {dims}",
                s.id,
                s.dims()
            )));
        }
        Ok(Self {
            split,
            dims,
            samples,
        })
    }

    pub fn dims(&self) -> ModalityDims {
        self.dims
    }

    pub fn samples(&self) -> &[MultimodalSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f32> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Splits off the trailing `n` samples as a new dataset with split `tail_split`.
    pub fn split_tail(mut self, n: usize, tail_split: Split) -> (Dataset, Dataset) {
        let at = self.samples.len().saturating_sub(n);
        let tail = self.samples.split_off(at);
        let dims = self.dims;
        (
            self,
            Dataset {
                split: tail_split,
                dims,
                samples: tail,
            },
        )
    }

    pub fn map_samples(
        &self,
        f: impl FnMut(&MultimodalSample) -> Result<MultimodalSample>,
    ) -> Result<Dataset> {
        let samples = self.samples.iter().map(f).collect::<Result<Vec<_>>>()?;
        Dataset::new(self.split, self.dims, samples)
    }
}

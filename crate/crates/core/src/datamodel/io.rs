//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.json   DatasetManifest
//! <dir>/feat_l.bin      lexical frames
//! <dir>/feat_v.bin      visual frames
//! <dir>/feat_a.bin      acoustic frames
//! ```
//!
//! Each blob is a flat sequence of little-endian `f32`. A record's frames for
//! modality `m` occupy `lengths.m * dims.m * 4` bytes starting at byte
//! `offsets.m`, laid out row-major (time × dim).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSequence, Modality, ModalityDims, MultimodalSample, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn blob_file(m: Modality) -> &'static str {
    match m {
        Modality::L => "feat_l.bin",
        Modality::V => "feat_v.bin",
        Modality::A => "feat_a.bin",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub l: T,
    pub v: T,
    pub a: T,
}

impl<T: Copy> PerModality<T> {
    pub fn get(&self, m: Modality) -> T {
        match m {
            Modality::L => self.l,
            Modality::V => self.v,
            Modality::A => self.a,
        }
    }

    fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        Self {
            l: f(Modality::L),
            v: f(Modality::V),
            a: f(Modality::A),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: f32,
    /// Frames per modality.
    pub lengths: PerModality<usize>,
    /// Byte offset of the first frame in each modality's blob.
    pub offsets: PerModality<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub dims: ModalityDims,
    pub records: Vec<ManifestRecord>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blobs: [Vec<u8>; 3] = Default::default();
    let mut records = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let offsets = PerModality::from_fn(|m| blobs[m.index()].len() as u64);
        for m in Modality::ALL {
            let blob = &mut blobs[m.index()];
            for &x in s.features(m).values() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        records.push(ManifestRecord {
            id: s.id.clone(),
            label: s.label,
            lengths: PerModality::from_fn(|m| s.features(m).len()),
            offsets,
        });
    }
    let manifest = DatasetManifest {
        split: dataset.split,
        dims: dataset.dims(),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for m in Modality::ALL {
        let path = dir.join(blob_file(m));
        fs::write(&path, &blobs[m.index()]).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.dims.validate()?;

    let mut blobs = Vec::with_capacity(3);
    for m in Modality::ALL {
        let path = dir.join(blob_file(m));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        check_blob(&manifest, m, bytes.len() as u64)?;
        blobs.push(bytes);
    }

    let mut samples = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let bad = |reason: String| Error::Record {
            record: r.id.clone(),
            reason,
        };
        let mut feats = Vec::with_capacity(3);
        for m in Modality::ALL {
            let d = manifest.dims.get(m);
            let off = r.offsets.get(m) as usize;
            let n = r.lengths.get(m) * d;
            let bytes = &blobs[m.index()][off..off + n * 4];
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            feats.push(FeatureSequence::new(m, d, values).map_err(|e| bad(e.to_string()))?);
        }
        let feats: [FeatureSequence; 3] = feats.try_into().expect("three modalities");
        samples.push(
            MultimodalSample::new(r.id.clone(), feats, r.label).map_err(|e| bad(e.to_string()))?,
        );
    }
    Dataset::new(manifest.split, manifest.dims, samples)
}

/// Validates one blob against the manifest: dimension consistency, then
/// per-record bounds, then pairwise overlap.
fn check_blob(manifest: &DatasetManifest, m: Modality, blob_len: u64) -> Result<()> {
    let d = manifest.dims.get(m) as u64;
    let Some(first) = manifest.records.first() else {
        return Ok(());
    };
    let frames: u64 = manifest.records.iter().map(|r| r.lengths.get(m) as u64).sum();
    if frames > 0 && blob_len != frames * d * 4 && blob_len % (frames * 4) == 0 {
        let implied = blob_len / (frames * 4);
        return Err(Error::Record {
            record: first.id.clone(),
            reason: format!(
                "dimension mismatch for modality {m}: manifest declares {d} but {} implies {implied}",
                blob_file(m)
            ),
        });
    }
    let mut spans = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let len = r.lengths.get(m) as u64;
        if len == 0 {
            return Err(Error::Record {
                record: r.id.clone(),
                reason: format!("modality {m} has zero length"),
            });
        }
        let start = r.offsets.get(m);
        let end = start + len * d * 4;
        if end > blob_len {
            return Err(Error::Record {
                record: r.id.clone(),
                reason: format!(
                    "modality {m} bytes {start}..{end} exceed {} ({blob_len} bytes)",
                    blob_file(m)
                ),
            });
        }
        spans.push((start, end, &r.id));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Record {
                record: w[1].2.clone(),
                reason: format!("modality {m} frames overlap record `{}`", w[0].2),
            });
        }
    }
    Ok(())
}

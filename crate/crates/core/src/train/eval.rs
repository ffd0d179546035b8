//! Fixed and random missing-modality evaluation protocols.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::datamodel::{collate, Dataset, MultimodalSample};
use crate::error::{Error, Result};
use crate::nn::FusionNet;
use crate::protocols::{apply_mask, route, sample_random_masks, MaskAssignment, ModalityMask};
use crate::protocols::Head;
use crate::train::metrics::{acc2, acc7, mae};

/// Rows per inference batch.
pub const EVAL_BATCH: usize = 128;

/// Label for the arithmetic-mean row of the random protocol.
pub const AVG_CONDITION: &str = "Avg.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub condition: String,
    pub acc2: f64,
    pub acc7: f64,
    pub mae: f64,
    pub n_eval: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realized_mr: Option<f64>,
}

impl EvalRow {
    pub fn from_predictions(condition: impl Into<String>, preds: &[f64], labels: &[f64]) -> Result<Self> {
        Ok(Self {
            condition: condition.into(),
            acc2: acc2(preds, labels)?,
            acc7: acc7(preds, labels)?,
            mae: mae(preds, labels)?,
            n_eval: preds.len(),
            realized_mr: None,
        })
    }

    /// Arithmetic mean of several rows.
    pub fn mean(condition: impl Into<String>, rows: &[EvalRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Metric("cannot average zero rows".into()));
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mr: Option<Vec<f64>> = rows.iter().map(|r| r.realized_mr).collect();
        Ok(Self {
            condition: condition.into(),
            acc2: avg(|r| r.acc2),
            acc7: avg(|r| r.acc7),
            mae: avg(|r| r.mae),
            n_eval: rows.iter().map(|r| r.n_eval).max().unwrap_or(0),
            realized_mr: mr.map(|v| v.iter().sum::<f64>() / n),
        })
    }

    /// `Acc2/Acc7` in percent, one decimal.
    pub fn cell(&self) -> String {
        format!("{:.1}/{:.1}", 100.0 * self.acc2, 100.0 * self.acc7)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub protocol: String,
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn row(&self, condition: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text with one row per condition.
    pub fn to_text(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.condition.len())
            .max()
            .unwrap_or(0)
            .max("condition".len());
        let with_mr = self.rows.iter().any(|r| r.realized_mr.is_some());
        let mut s = format!("{:<w$}  {:>11}  {:>6}  {:>6}", "condition", "Acc2/Acc7", "MAE", "n");
        if with_mr {
            s.push_str("  realized_mr");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<w$}  {:>11}  {:>6.3}  {:>6}", r.condition, r.cell(), r.mae, r.n_eval);
            if let Some(mr) = r.realized_mr {
                let _ = write!(s, "  {mr:>11.4}");
            }
            s.push('\n');
        }
        s
    }
}

fn labels_of(samples: &[&MultimodalSample]) -> Vec<f64> {
    samples.iter().map(|s| s.label as f64).collect()
}

/// Predictions of all seven heads on complete samples, indexed by [`Head::index`].
pub fn predict_all_heads(model: &FusionNet<f32>, samples: &[&MultimodalSample]) -> Result<[Vec<f64>; 7]> {
    let mut out: [Vec<f64>; 7] = Default::default();
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = collate::<f32>(chunk)?;
        let mut tape = Tape::new();
        let fwd = model.forward_all(&mut tape, &batch)?;
        for h in Head::ALL {
            out[h.index()].extend(tape.value(fwd.pred(h)).data().iter().map(|&x| x as f64));
        }
    }
    Ok(out)
}

/// Routed predictions with one availability mask per sample, in input order.
/// Rows sharing a mask are batched together.
pub fn predict_routed(
    model: &FusionNet<f32>,
    samples: &[&MultimodalSample],
    masks: &[ModalityMask],
) -> Result<Vec<f64>> {
    if samples.len() != masks.len() {
        return Err(Error::Mask(format!(
            "{} masks for {} samples",
            masks.len(),
            samples.len()
        )));
    }
    let mut preds = vec![f64::NAN; samples.len()];
    for bits in 1..=ModalityMask::COMPLETE.bits() {
        let mask = ModalityMask::from_bits(bits)?;
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| masks[i] == mask).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let group: Vec<&MultimodalSample> = chunk.iter().map(|&i| samples[i]).collect();
            let batch = apply_mask(&collate::<f32>(&group)?, &vec![mask; group.len()])?;
            let mut tape = Tape::new();
            let out = model.forward_routed(&mut tape, &batch, route(mask))?;
            for (&i, &p) in chunk.iter().zip(tape.value(out.pred).data()) {
                preds[i] = p as f64;
            }
        }
    }
    Ok(preds)
}

/// Column order of the fixed-protocol table.
pub const FIXED_ORDER: [Head; 6] = [Head::La, Head::Lv, Head::Av, Head::L, Head::V, Head::A];

/// Complete-input row followed by one row per proper subset.
pub fn evaluate_fixed(model: &FusionNet<f32>, dataset: &Dataset) -> Result<EvalTable> {
    let samples: Vec<&MultimodalSample> = dataset.samples().iter().collect();
    let labels = labels_of(&samples);
    let mut rows = Vec::with_capacity(7);
    for mask in std::iter::once(ModalityMask::COMPLETE).chain(FIXED_ORDER.map(Head::mask)) {
        let preds = predict_routed(model, &samples, &vec![mask; samples.len()])?;
        let mut row = EvalRow::from_predictions(mask.label(), &preds, &labels)?;
        row.realized_mr = Some(1.0 - mask.count() as f64 / 3.0);
        rows.push(row);
    }
    Ok(EvalTable {
        protocol: "fixed".into(),
        rows,
    })
}

/// Missing-rate grid used when none is given.
pub const DEFAULT_MR_GRID: [f64; 4] = [0.0, 0.2, 0.4, 0.6];

/// One row per target missing rate plus an [`AVG_CONDITION`] row. Masks for
/// the `i`-th rate are drawn with seed `seed + i`.
pub fn evaluate_random(
    model: &FusionNet<f32>,
    dataset: &Dataset,
    mr_list: &[f64],
    seed: u64,
) -> Result<(EvalTable, Vec<MaskAssignment>)> {
    if mr_list.is_empty() {
        return Err(Error::Config("empty missing-rate list".into()));
    }
    let samples: Vec<&MultimodalSample> = dataset.samples().iter().collect();
    let labels = labels_of(&samples);
    let mut rows = Vec::with_capacity(mr_list.len() + 1);
    let mut assignments = Vec::with_capacity(mr_list.len());
    for (i, &mr) in mr_list.iter().enumerate() {
        if !(0.0..=2.0 / 3.0 + 1e-12).contains(&mr) {
            return Err(Error::Config(format!("missing rate {mr} outside [0, 2/3]")));
        }
        let assignment = sample_random_masks(samples.len(), mr, seed.wrapping_add(i as u64))?;
        let preds = predict_routed(model, &samples, assignment.masks())?;
        let mut row = EvalRow::from_predictions(format!("MR={mr:.1}"), &preds, &labels)?;
        row.realized_mr = Some(assignment.realized_mr());
        rows.push(row);
        assignments.push(assignment);
    }
    rows.push(EvalRow::mean(AVG_CONDITION, &rows)?);
    Ok((
        EvalTable {
            protocol: "random".into(),
            rows,
        },
        assignments,
    ))
}

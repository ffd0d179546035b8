//! Loss-mode comparison runs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossMode, LossReport};
use crate::nn::ModelConfig;
use crate::protocols::Head;
use crate::train::eval::{evaluate_fixed, EvalRow, EvalTable};
use crate::train::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub step0: LossReport,
    pub fixed: EvalTable,
}

impl AblationRun {
    fn rows(&self, heads: &[Head]) -> Vec<EvalRow> {
        heads
            .iter()
            .filter_map(|h| self.fixed.row(h.label()).cloned())
            .collect()
    }

    pub fn complete(&self) -> &EvalRow {
        &self.fixed.rows[0]
    }

    /// Mean of the three bi-modal rows.
    pub fn bimodal_avg(&self) -> Result<EvalRow> {
        EvalRow::mean("bi-modal avg", &self.rows(&Head::BIMODAL))
    }

    /// Mean of the three uni-modal rows.
    pub fn unimodal_avg(&self) -> Result<EvalRow> {
        EvalRow::mean("uni-modal avg", &self.rows(&Head::UNIMODAL))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: LossMode,
    /// Averaged over runs.
    pub complete: EvalRow,
    pub bimodal_avg: EvalRow,
    pub unimodal_avg: EvalRow,
    pub runs: Vec<AblationRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: LossMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10}  {:>11}  {:>15}  {:>15}  {:>4}\n",
            "mode", "L+A+V", "avg L+V,L+A,A+V", "avg L,A,V", "runs"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10}  {:>11}  {:>15}  {:>15}  {:>4}",
                r.mode.as_str(),
                r.complete.cell(),
                r.bimodal_avg.cell(),
                r.unimodal_avg.cell(),
                r.runs.len()
            );
        }
        s
    }
}

/// Trains one model per mode and repeat. Repeat `r` uses seed `cfg.seed + r`
/// for every mode, so modes share initialisation and data order.
pub fn ablate(
    train_set: &Dataset,
    valid_set: &Dataset,
    test_set: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    modes: &[LossMode],
    repeats: usize,
) -> Result<AblationTable> {
    if modes.is_empty() || repeats == 0 {
        return Err(Error::Config("ablation needs at least one mode and one repeat".into()));
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut runs = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let run_cfg = TrainConfig {
                loss_mode: mode,
                seed: cfg.seed.wrapping_add(r as u64),
                ..cfg.clone()
            };
            let outcome = train(train_set, valid_set, model_cfg, &run_cfg, None)?;
            runs.push(AblationRun {
                seed: run_cfg.seed,
                best_epoch: outcome.best_epoch,
                step0: outcome.step0,
                fixed: evaluate_fixed(&outcome.model, test_set)?,
            });
        }
        let complete: Vec<EvalRow> = runs.iter().map(|r| r.complete().clone()).collect();
        let bi = runs.iter().map(AblationRun::bimodal_avg).collect::<Result<Vec<_>>>()?;
        let uni = runs.iter().map(AblationRun::unimodal_avg).collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            mode,
            complete: EvalRow::mean("L+A+V", &complete)?,
            bimodal_avg: EvalRow::mean("bi-modal avg", &bi)?,
            unimodal_avg: EvalRow::mean("uni-modal avg", &uni)?,
            runs,
        });
    }
    Ok(AblationTable { rows })
}

//! Joint online optimisation of teacher and students.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::datamodel::{collate, Dataset, MultimodalSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, ContrastiveConfig, HeadLosses, LossMode, LossReport};
use crate::nn::{FusionNet, ModelConfig};
use crate::params::Params;
use crate::protocols::Head;
use crate::real::Real;
use crate::train::eval::predict_all_heads;
use crate::train::metrics::mae;
use crate::train::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Multiplier on the auxiliary loss term.
    pub aux_weight: f64,
    pub contrastive: ContrastiveConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-4,
            epochs: 65,
            seed: 0,
            loss_mode: LossMode::Mvsc,
            aux_weight: 1.0,
            contrastive: ContrastiveConfig::default(),
            adam: AdamConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config("aux_weight must be non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.contrastive.validate()
    }
}

/// One line of the training log. Epoch 0 is the untrained baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    /// Mean over the epoch's steps; absent for epoch 0.
    pub train: Option<LossReport>,
    pub valid_mae: HeadLosses,
    /// Mean of the seven per-head validation MAEs; selection criterion.
    pub valid_mean_mae: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: FusionNet<f32>,
    pub best_epoch: usize,
    /// Loss of the first training batch before any update.
    pub step0: LossReport,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochLog {
        &self.history[self.best_epoch]
    }
}

/// Per-head MAE of complete-input predictions.
pub fn validation_mae(model: &FusionNet<f32>, valid: &Dataset) -> Result<HeadLosses> {
    let samples: Vec<&MultimodalSample> = valid.samples().iter().collect();
    let labels: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    let preds = predict_all_heads(model, &samples)?;
    let mut out = HeadLosses::default();
    for h in Head::ALL {
        let v = mae(&preds[h.index()], &labels)?;
        match h {
            Head::T => out.t = v,
            Head::La => out.la = v,
            Head::Lv => out.lv = v,
            Head::Av => out.av = v,
            Head::L => out.l = v,
            Head::A => out.a = v,
            Head::V => out.v = v,
        }
    }
    Ok(out)
}

fn first_non_finite_grad<F: Real>(params: &Params<F>, grads: &crate::Gradients<F>) -> Option<String> {
    grads
        .iter()
        .find(|(_, g)| !g.is_finite())
        .map(|(id, _)| format!("grad:{}", params.name(id)))
}

fn dropout_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Trains a fresh model. When `log` is given, one JSON line per epoch is
/// written to it.
pub fn train(
    train_set: &Dataset,
    valid_set: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    for (name, ds) in [("training", train_set), ("validation", valid_set)] {
        if ds.dims() != model_cfg.input_dims {
            return Err(Error::Config(format!(
                "{name} data has dims {}, model expects {}",
                ds.dims(),
                model_cfg.input_dims
            )));
        }
    }
    if train_set.len() < 2 {
        return Err(Error::Config("training set needs at least two samples".into()));
    }
    if valid_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }

    let mut model = FusionNet::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = Adam::new(&model.params, cfg.learning_rate, cfg.adam);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(7);
    let samples = train_set.samples();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut emit = |entry: &EpochLog, history: &mut Vec<EpochLog>| -> Result<()> {
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(entry)?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        history.push(entry.clone());
        Ok(())
    };

    let v0 = validation_mae(&model, valid_set)?;
    let mut best_mae = v0.total() / 7.0;
    let mut best_epoch = 0;
    let mut best_params = model.params.clone();
    emit(
        &EpochLog {
            epoch: 0,
            steps: 0,
            train: None,
            valid_mae: v0,
            valid_mean_mae: best_mae,
            best: true,
        },
        &mut history,
    )?;

    let mut step0 = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let rows: Vec<&MultimodalSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = collate::<f32>(&rows)?;
            let mut tape = Tape::training(dropout_seed(cfg.seed, opt.steps()));
            let out = model.forward_all(&mut tape, &batch)?;
            let (loss, report) = total_loss(
                &mut tape,
                cfg.loss_mode,
                &out,
                &batch.labels,
                &cfg.contrastive,
                cfg.aux_weight,
            )?;
            if !report.is_finite() {
                let path = model
                    .params
                    .first_non_finite()
                    .map(str::to_string)
                    .unwrap_or_else(|| {
                        if !report.l_regression.is_finite() {
                            "loss.l_regression".into()
                        } else {
                            "loss.aux".into()
                        }
                    });
                return Err(Error::NonFinite { path });
            }
            let mut grads = tape.backward(loss);
            if let Some(path) = first_non_finite_grad(&model.params, &grads) {
                return Err(Error::NonFinite { path });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm().as_f64();
                if norm > clip {
                    grads.scale(f32::lit(clip / norm));
                }
            }
            opt.step(&mut model.params, &grads);
            if let Some(path) = model.params.first_non_finite() {
                return Err(Error::NonFinite { path: path.to_string() });
            }
            step0.get_or_insert(report);
            reports.push(report);
        }
        let v = validation_mae(&model, valid_set)?;
        let mean = v.total() / 7.0;
        let is_best = mean < best_mae;
        if is_best {
            best_mae = mean;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        emit(
            &EpochLog {
                epoch,
                steps: opt.steps(),
                train: LossReport::mean(&reports),
                valid_mae: v,
                valid_mean_mae: mean,
                best: is_best,
            },
            &mut history,
        )?;
    }
    let step0 = step0.ok_or_else(|| Error::Config("no training batch had two or more samples".into()))?;
    model.params = best_params;
    Ok(TrainOutcome {
        model,
        best_epoch,
        step0,
        history,
    })
}

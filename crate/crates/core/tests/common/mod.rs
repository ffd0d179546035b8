#![allow(dead_code)]

use mmckd_core::datamodel::{collate, generate_synthetic, Batch, Dataset, ModalityDims};
use mmckd_core::losses::{
    mse_kd_on_tape, regression_on_tape, total_loss, ContrastiveConfig, KdNodes, LossMode,
};
use mmckd_core::nn::{FusionNet, ModelConfig};
use mmckd_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        depth: 1,
        d_hid: 6,
        d_ff: 12,
        input_dims: ModalityDims { l: 5, v: 3, a: 4 },
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn dataset(n: usize, dims: ModalityDims, len_range: (usize, usize), seed: u64) -> Dataset {
    generate_synthetic(n, dims, len_range, seed, 20.0).unwrap()
}

pub fn batch_of(ds: &Dataset) -> Batch<f64> {
    let refs: Vec<_> = ds.samples().iter().collect();
    collate(&refs).unwrap()
}

pub fn loss_value(model: &FusionNet<f64>, batch: &Batch<f64>, mode: LossMode) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward_all(&mut tape, batch).unwrap();
    let cfg = ContrastiveConfig::default();
    let (l, _) = total_loss(&mut tape, mode, &out, &batch.labels, &cfg, 1.0).unwrap();
    tape.value(l).item()
}

/// Teacher targets `[f_v, f_a, h_t]` the distillation terms regress onto.
pub fn kd_targets(model: &FusionNet<f64>, batch: &Batch<f64>) -> [Tensor<f64>; 3] {
    let mut tape = Tape::new();
    let out = model.forward_all(&mut tape, batch).unwrap();
    let n = KdNodes::from_forward(&out);
    [n.f_v, n.f_a, n.h_t].map(|v| tape.value(v).clone())
}

/// Distillation loss with the targets held fixed, the finite-difference
/// counterpart of a stop-gradient.
pub fn frozen_kd_loss(
    model: &FusionNet<f64>,
    batch: &Batch<f64>,
    mode: LossMode,
    targets: &[Tensor<f64>; 3],
) -> f64 {
    let variant = mode.kd_variant().expect("distillation mode");
    let mut tape = Tape::new();
    let out = model.forward_all(&mut tape, batch).unwrap();
    let reg = regression_on_tape(&mut tape, &out.preds, &batch.labels).unwrap();
    let mut n = KdNodes::from_forward(&out);
    let [f_v, f_a, h_t] = targets.clone().map(|t| tape.constant(t));
    (n.f_v, n.f_a, n.h_t) = (f_v, f_a, h_t);
    let kd = mse_kd_on_tape(&mut tape, variant, &n);
    let total = tape.sum_scalars(&[reg.total, kd]);
    tape.value(total).item()
}

/// Worst per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-4)` over sampled
/// entries of every parameter tensor, with the tensor name.
pub fn param_gradient_error(seed: u64, mode: LossMode, per_tensor: usize) -> (f64, String, usize) {
    let per = param_gradient_errors(seed, mode, per_tensor);
    let checked = per.iter().filter(|e| e.active).count();
    let worst = per
        .into_iter()
        .max_by(|a, b| a.err.total_cmp(&b.err))
        .unwrap();
    (worst.err, worst.name, checked)
}

pub struct TensorCheck {
    pub name: String,
    pub err: f64,
    /// Gradient norm above numerical noise.
    pub active: bool,
}

pub fn param_gradient_errors(seed: u64, mode: LossMode, per_tensor: usize) -> Vec<TensorCheck> {
    let cfg = tiny_config();
    let mut model = FusionNet::<f64>::new(cfg.clone(), seed).unwrap();
    let ds = dataset(3, cfg.input_dims, (2, 4), seed + 100);
    let batch = batch_of(&ds);
    let mut tape = Tape::new();
    let out = model.forward_all(&mut tape, &batch).unwrap();
    let (l, _) = total_loss(
        &mut tape,
        mode,
        &out,
        &batch.labels,
        &ContrastiveConfig::default(),
        1.0,
    )
    .unwrap();
    let grads = tape.backward(l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    let targets = mode.kd_variant().map(|_| kd_targets(&model, &batch));
    let value = |model: &FusionNet<f64>| match &targets {
        Some(t) => frozen_kd_loss(model, &batch, mode, t),
        None => loss_value(model, &batch, mode),
    };
    let mut out = Vec::new();
    let eps = 1e-5;
    for id in ids {
        let n = model.params.get(id).len();
        let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; n]);
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = orig + eps;
            let up = value(&model);
            model.params.get_mut(id).data_mut()[i] = orig - eps;
            let down = value(&model);
            model.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        let scale = na.sqrt().max(nn.sqrt());
        // Floor for gradients that vanish analytically, e.g. key biases
        // under softmax shift invariance.
        out.push(TensorCheck {
            name: model.params.name(id).to_string(),
            err: diff.sqrt() / scale.max(1e-4),
            active: scale > 1e-6,
        });
    }
    out
}

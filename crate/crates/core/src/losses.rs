//! Training objectives: multi-view supervised contrastive loss, the joint
//! regression loss, feature-level MSE distillation variants and their sum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ForwardOutput;
use crate::protocols::Head;
use crate::real::Real;
use crate::tensor::{matmul_acc, matmul_bt_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Label-distance threshold for positives.
    pub lambda: f64,
    /// Temperature.
    pub tau: f64,
    /// L2-normalise representations before taking dot products.
    pub normalize: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            tau: 0.1,
            normalize: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Loss(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Loss(format!(
                "threshold lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Auxiliary objective added to the regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Mvsc,
    Uniview,
    MseVa,
    MsePairs,
    MseAll,
    None,
}

impl LossMode {
    pub const ALL: [LossMode; 6] = [
        LossMode::Mvsc,
        LossMode::Uniview,
        LossMode::MseVa,
        LossMode::MsePairs,
        LossMode::MseAll,
        LossMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Mvsc => "mvsc",
            LossMode::Uniview => "uniview",
            LossMode::MseVa => "mse_va",
            LossMode::MsePairs => "mse_pairs",
            LossMode::MseAll => "mse_all",
            LossMode::None => "none",
        }
    }

    pub fn kd_variant(self) -> Option<KdVariant> {
        match self {
            LossMode::MseVa => Some(KdVariant::Va),
            LossMode::MsePairs => Some(KdVariant::Pairs),
            LossMode::MseAll => Some(KdVariant::All),
            _ => None,
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownLossMode(s.to_string()))
    }
}

/// Feature-level MSE distillation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdVariant {
    /// `Σ_{m∈{v,a}} MSE(h^m, f_m)`
    Va,
    /// `Σ_{m∈{lv,la,av}} MSE(h^m, h^t)`
    Pairs,
    /// `Va + Pairs`
    All,
}

impl FromStr for KdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "va" => Ok(KdVariant::Va),
            "pairs" => Ok(KdVariant::Pairs),
            "all" => Ok(KdVariant::All),
            other => Err(Error::Loss(format!("unknown distillation variant `{other}`"))),
        }
    }
}

/// The augmented view set `V`: seven `[B, d]` representation blocks sharing
/// one label per sample.
#[derive(Debug, Clone)]
pub struct RepresentationSet<F> {
    /// Indexed by [`Head::index`].
    pub views: [Tensor<F>; 7],
    pub labels: Vec<F>,
}

impl<F: Real> RepresentationSet<F> {
    pub fn from_forward(tape: &Tape<F>, out: &ForwardOutput, labels: &[F]) -> Self {
        Self {
            views: out.reps.map(|v| tape.value(v).clone()),
            labels: labels.to_vec(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// `|V| = 7 |B|`
    pub fn len(&self) -> usize {
        self.views.iter().map(Tensor::rows).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks views head-major into `[7B, d]` with per-row labels.
    pub fn to_matrix(&self) -> (Tensor<F>, Vec<F>) {
        let d = self.views[0].last_dim();
        let mut data = Vec::with_capacity(self.len() * d);
        let mut labels = Vec::with_capacity(self.len());
        for v in &self.views {
            data.extend_from_slice(v.data());
            labels.extend_from_slice(&self.labels);
        }
        (Tensor::new(vec![labels.len(), d], data), labels)
    }
}

/// Number of positives per anchor, `|P(j)|`, with the anchor itself excluded.
pub fn positive_counts<F: Real>(labels: &[F], lambda: f64) -> Vec<usize> {
    let lambda = F::lit(lambda);
    labels
        .iter()
        .enumerate()
        .map(|(j, &yj)| {
            labels
                .iter()
                .enumerate()
                .filter(|&(p, &yp)| p != j && (yp - yj).abs() <= lambda)
                .count()
        })
        .collect()
}

/// Supervised contrastive loss over rows of `z` and its gradient.
///
/// For each anchor `j` with a non-empty positive set
/// `P(j) = {p ≠ j : |y_p − y_j| ≤ λ}` the term is
/// `logsumexp_{a≠j}(z_j·z_a/τ) − mean_{p∈P(j)} z_j·z_p/τ`; terms are summed.
fn supcon_with_grad<F: Real>(z: &Tensor<F>, labels: &[F], lambda: F, tau: F) -> (F, Vec<F>) {
    let n = z.rows();
    let d = z.last_dim();
    let inv_tau = F::one() / tau;
    let mut sim = vec![F::zero(); n * n];
    matmul_bt_acc(z.data(), z.data(), &mut sim, n, d, n);
    for s in &mut sim {
        *s *= inv_tau;
    }
    let mut loss = F::zero();
    // dL/dS, not symmetrised.
    let mut gs = vec![F::zero(); n * n];
    let mut probs = vec![F::zero(); n];
    for j in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&p| p != j && (labels[p] - labels[j]).abs() <= lambda)
            .collect();
        if pos.is_empty() {
            continue;
        }
        let row = &sim[j * n..(j + 1) * n];
        let max = (0..n)
            .filter(|&a| a != j)
            .map(|a| row[a])
            .fold(F::neg_infinity(), F::max);
        let mut z_sum = F::zero();
        for a in (0..n).filter(|&a| a != j) {
            let e = (row[a] - max).exp();
            probs[a] = e;
            z_sum += e;
        }
        let lse = max + z_sum.ln();
        let inv_p = F::one() / F::lit(pos.len() as f64);
        let mean_pos = pos.iter().map(|&p| row[p]).sum::<F>() * inv_p;
        loss += lse - mean_pos;
        let g = &mut gs[j * n..(j + 1) * n];
        for a in (0..n).filter(|&a| a != j) {
            g[a] += probs[a] / z_sum;
        }
        for &p in &pos {
            g[p] -= inv_p;
        }
    }
    // S = Z Zᵀ / τ  ⇒  dZ = (G + Gᵀ) Z / τ
    let mut sym = vec![F::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = (gs[i * n + j] + gs[j * n + i]) * inv_tau;
        }
    }
    let mut dz = vec![F::zero(); n * d];
    matmul_acc(&sym, z.data(), &mut dz, n, n, d);
    (loss, dz)
}

/// Contrastive loss over an arbitrary taped view matrix `v: [N, d]`.
pub fn contrastive_on_tape<F: Real>(
    tape: &mut Tape<F>,
    v: Var,
    labels: &[F],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n = tape.value(v).rows();
    if n != labels.len() {
        return Err(Error::Loss(format!("{n} views but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::Loss("contrastive loss needs at least two views".into()));
    }
    if !tape.value(v).is_finite() {
        return Err(Error::NonFinite {
            path: "representations".into(),
        });
    }
    let z = if cfg.normalize { tape.l2_normalize(v) } else { v };
    let (loss, grad) = supcon_with_grad(tape.value(z), labels, F::lit(cfg.lambda), F::lit(cfg.tau));
    Ok(tape.custom_scalar(z, loss, grad))
}

/// Loss over all seven views of a forward pass.
pub fn mvsc_on_tape<F: Real>(
    tape: &mut Tape<F>,
    out: &ForwardOutput,
    labels: &[F],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    views_on_tape(tape, &out.reps, labels, cfg)
}

/// Loss over the teacher representations only.
pub fn uniview_on_tape<F: Real>(
    tape: &mut Tape<F>,
    out: &ForwardOutput,
    labels: &[F],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    views_on_tape(tape, &[out.rep(Head::T)], labels, cfg)
}

fn views_on_tape<F: Real>(
    tape: &mut Tape<F>,
    views: &[Var],
    labels: &[F],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    if labels.len() < 2 {
        return Err(Error::Loss("contrastive loss needs a batch of at least two".into()));
    }
    let v = if views.len() == 1 {
        views[0]
    } else {
        tape.concat_rows(views)
    };
    let all_labels: Vec<F> = views.iter().flat_map(|_| labels.iter().copied()).collect();
    contrastive_on_tape(tape, v, &all_labels, cfg)
}

/// Contrastive loss value for a plain `[N, d]` view matrix.
pub fn contrastive_loss<F: Real>(v: &Tensor<F>, labels: &[F], cfg: &ContrastiveConfig) -> Result<F> {
    let mut tape = Tape::new();
    let x = tape.constant(v.clone());
    let l = contrastive_on_tape(&mut tape, x, labels, cfg)?;
    Ok(tape.value(l).item())
}

/// Multi-view loss over `V = ∪_i {h^t_i, h^la_i, h^lv_i, h^av_i, h^l_i, h^a_i, h^v_i}`.
pub fn mvsc_loss<F: Real>(v: &RepresentationSet<F>, cfg: &ContrastiveConfig) -> Result<F> {
    if v.batch_size() < 2 {
        return Err(Error::Loss("contrastive loss needs a batch of at least two".into()));
    }
    let (m, labels) = v.to_matrix();
    contrastive_loss(&m, &labels, cfg)
}

/// Single-view variant over the teacher representations `[B, d]`.
pub fn uniview_sc_loss<F: Real>(h_t: &Tensor<F>, labels: &[F], cfg: &ContrastiveConfig) -> Result<F> {
    if labels.len() < 2 {
        return Err(Error::Loss("contrastive loss needs a batch of at least two".into()));
    }
    contrastive_loss(h_t, labels, cfg)
}

/// `mean_i |pred_i − y_i|` on the tape; `pred: [B, 1]`.
pub fn mae_on_tape<F: Real>(tape: &mut Tape<F>, pred: Var, labels: &[F]) -> Result<Var> {
    let p = tape.value(pred);
    if p.len() != labels.len() || labels.is_empty() {
        return Err(Error::Loss(format!(
            "{} predictions for {} labels",
            p.len(),
            labels.len()
        )));
    }
    let inv = F::one() / F::lit(labels.len() as f64);
    let mut value = F::zero();
    let mut grad = Vec::with_capacity(labels.len());
    for (&x, &y) in p.data().iter().zip(labels) {
        let r = x - y;
        value += r.abs();
        grad.push(if r > F::zero() {
            inv
        } else if r < F::zero() {
            -inv
        } else {
            F::zero()
        });
    }
    Ok(tape.custom_scalar(pred, value * inv, grad))
}

/// Per-head MAE terms of the joint regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadLosses {
    pub t: f64,
    pub l: f64,
    pub v: f64,
    pub a: f64,
    pub la: f64,
    pub lv: f64,
    pub av: f64,
}

impl HeadLosses {
    pub fn get(&self, h: Head) -> f64 {
        match h {
            Head::T => self.t,
            Head::L => self.l,
            Head::V => self.v,
            Head::A => self.a,
            Head::La => self.la,
            Head::Lv => self.lv,
            Head::Av => self.av,
        }
    }

    fn set(&mut self, h: Head, x: f64) {
        match h {
            Head::T => self.t = x,
            Head::L => self.l = x,
            Head::V => self.v = x,
            Head::A => self.a = x,
            Head::La => self.la = x,
            Head::Lv => self.lv = x,
            Head::Av => self.av = x,
        }
    }

    pub fn total(&self) -> f64 {
        self.t + self.l + self.v + self.a + self.la + self.lv + self.av
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegressionTerms {
    pub total: Var,
    pub per_head: [Var; 7],
}

/// `MAE(ŷ_t, y) + Σ_{m∈{l,v,a,la,lv,av}} MAE(ŷ_m, y)`
pub fn regression_on_tape<F: Real>(
    tape: &mut Tape<F>,
    preds: &[Var; 7],
    labels: &[F],
) -> Result<RegressionTerms> {
    let mut per_head = [preds[0]; 7];
    for h in Head::ALL {
        per_head[h.index()] = mae_on_tape(tape, preds[h.index()], labels)?;
    }
    let total = tape.sum_scalars(&per_head);
    Ok(RegressionTerms { total, per_head })
}

/// Joint regression loss for plain predictions; every head must be present.
pub fn regression_loss<F: Real>(preds: &[(Head, Vec<F>)], labels: &[F]) -> Result<HeadLosses> {
    let mut out = HeadLosses::default();
    for h in Head::ALL {
        let (_, p) = preds
            .iter()
            .find(|(k, _)| *k == h)
            .ok_or_else(|| Error::Loss(format!("missing prediction for head {h}")))?;
        if p.len() != labels.len() || labels.is_empty() {
            return Err(Error::Loss(format!(
                "head {h}: {} predictions for {} labels",
                p.len(),
                labels.len()
            )));
        }
        let mae = p
            .iter()
            .zip(labels)
            .map(|(&x, &y)| (x - y).abs().as_f64())
            .sum::<f64>()
            / labels.len() as f64;
        out.set(h, mae);
    }
    Ok(out)
}

/// Tape nodes the MSE distillation variants read. Teacher targets are
/// detached inside [`mse_kd_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct KdNodes {
    pub h_v: Var,
    pub h_a: Var,
    pub f_v: Var,
    pub f_a: Var,
    pub h_la: Var,
    pub h_lv: Var,
    pub h_av: Var,
    pub h_t: Var,
}

impl KdNodes {
    pub fn from_forward(out: &ForwardOutput) -> Self {
        Self {
            h_v: out.rep(Head::V),
            h_a: out.rep(Head::A),
            f_v: out.f_v,
            f_a: out.f_a,
            h_la: out.rep(Head::La),
            h_lv: out.rep(Head::Lv),
            h_av: out.rep(Head::Av),
            h_t: out.rep(Head::T),
        }
    }
}

pub fn mse_kd_on_tape<F: Real>(tape: &mut Tape<F>, variant: KdVariant, n: &KdNodes) -> Var {
    match variant {
        KdVariant::Va => {
            let mut terms = Vec::with_capacity(2);
            for (h, f) in [(n.h_v, n.f_v), (n.h_a, n.f_a)] {
                let target = tape.detach(f);
                terms.push(tape.mse(h, target));
            }
            tape.sum_scalars(&terms)
        }
        KdVariant::Pairs => {
            let target = tape.detach(n.h_t);
            let terms: Vec<Var> = [n.h_lv, n.h_la, n.h_av]
                .into_iter()
                .map(|h| tape.mse(h, target))
                .collect();
            tape.sum_scalars(&terms)
        }
        KdVariant::All => {
            let va = mse_kd_on_tape(tape, KdVariant::Va, n);
            let pairs = mse_kd_on_tape(tape, KdVariant::Pairs, n);
            tape.sum_scalars(&[va, pairs])
        }
    }
}

/// Plain-tensor inputs for [`mse_kd_loss`], all `[B, d]`.
#[derive(Debug, Clone)]
pub struct KdInputs<F> {
    pub h_v: Tensor<F>,
    pub h_a: Tensor<F>,
    pub f_v: Tensor<F>,
    pub f_a: Tensor<F>,
    pub h_la: Tensor<F>,
    pub h_lv: Tensor<F>,
    pub h_av: Tensor<F>,
    pub h_t: Tensor<F>,
}

pub fn mse_kd_loss<F: Real>(variant: KdVariant, x: &KdInputs<F>) -> Result<F> {
    let shape = x.h_t.shape().to_vec();
    for t in [&x.h_v, &x.h_a, &x.f_v, &x.f_a, &x.h_la, &x.h_lv, &x.h_av] {
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "distillation inputs disagree: {:?} vs {shape:?}",
                t.shape()
            )));
        }
    }
    let mut tape = Tape::new();
    let mut c = |t: &Tensor<F>| tape.constant(t.clone());
    let nodes = KdNodes {
        h_v: c(&x.h_v),
        h_a: c(&x.h_a),
        f_v: c(&x.f_v),
        f_a: c(&x.f_a),
        h_la: c(&x.h_la),
        h_lv: c(&x.h_lv),
        h_av: c(&x.h_av),
        h_t: c(&x.h_t),
    };
    let l = mse_kd_on_tape(&mut tape, variant, &nodes);
    Ok(tape.value(l).item())
}

/// Scalars logged for one optimisation step or averaged over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mode: LossMode,
    pub l_regression: f64,
    pub per_head: HeadLosses,
    /// Contrastive term (`mvsc` and `uniview` modes).
    pub l_mvsc: Option<f64>,
    /// Distillation term (`mse_*` modes).
    pub l_mse: Option<f64>,
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_total.is_finite()
            && self.l_regression.is_finite()
            && self.l_mvsc.map_or(true, f64::is_finite)
            && self.l_mse.map_or(true, f64::is_finite)
    }

    /// Arithmetic mean of several reports with the same mode.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&LossReport) -> Option<f64>| {
            let vals: Option<Vec<f64>> = reports.iter().map(f).collect();
            vals.map(|v| v.iter().sum::<f64>() / n)
        };
        let mut per_head = HeadLosses::default();
        for h in Head::ALL {
            per_head.set(h, avg(&|r| r.per_head.get(h)));
        }
        Some(LossReport {
            mode: first.mode,
            l_regression: avg(&|r| r.l_regression),
            per_head,
            l_mvsc: avg_opt(&|r| r.l_mvsc),
            l_mse: avg_opt(&|r| r.l_mse),
            l_total: avg(&|r| r.l_total),
        })
    }
}

/// `L_c = L_regression + w · L_aux` for the selected auxiliary objective.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    mode: LossMode,
    out: &ForwardOutput,
    labels: &[F],
    cfg: &ContrastiveConfig,
    aux_weight: f64,
) -> Result<(Var, LossReport)> {
    let reg = regression_on_tape(tape, &out.preds, labels)?;
    let aux = match mode {
        LossMode::Mvsc => Some(mvsc_on_tape(tape, out, labels, cfg)?),
        LossMode::Uniview => Some(uniview_on_tape(tape, out, labels, cfg)?),
        LossMode::MseVa | LossMode::MsePairs | LossMode::MseAll => {
            let variant = mode.kd_variant().expect("distillation mode");
            Some(mse_kd_on_tape(tape, variant, &KdNodes::from_forward(out)))
        }
        LossMode::None => None,
    };
    let total = match aux {
        Some(a) if aux_weight == 1.0 => tape.sum_scalars(&[reg.total, a]),
        Some(a) => {
            let w = tape.scale(a, F::lit(aux_weight));
            tape.sum_scalars(&[reg.total, w])
        }
        None => reg.total,
    };
    let mut per_head = HeadLosses::default();
    for h in Head::ALL {
        per_head.set(h, tape.value(reg.per_head[h.index()]).item().as_f64());
    }
    let aux_value = aux.map(|a| tape.value(a).item().as_f64());
    let contrastive = matches!(mode, LossMode::Mvsc | LossMode::Uniview);
    let report = LossReport {
        mode,
        l_regression: tape.value(reg.total).item().as_f64(),
        per_head,
        l_mvsc: aux_value.filter(|_| contrastive),
        l_mse: aux_value.filter(|_| !contrastive),
        l_total: tape.value(total).item().as_f64(),
    };
    Ok((total, report))
}

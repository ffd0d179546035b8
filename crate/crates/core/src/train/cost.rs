//! Analytic parameter and FLOP accounting.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ModelConfig;

/// Sequence length assumed for every modality when counting FLOPs.
pub const REFERENCE_LENGTH: usize = 50;

/// Published FLOP figure for the full model at batch size 4, for side-by-side display.
pub const PUBLISHED_FLOPS: f64 = 5.2e9;

const METHODOLOGY: &str = "FLOPs = 2 x multiply-accumulates of matrix products \
(linear layers, zero-padded convolution taps, attention scores and weighted sums) \
for one complete-input test forward pass through the teacher path; \
normalisation, softmax, activations and additions are not counted.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub param_count: usize,
    pub batch_size: usize,
    pub reference_length: usize,
    /// Complete-input inference through the teacher path.
    pub macs_per_test_batch: u64,
    pub flops_per_test_batch: u64,
    /// Training forward through all seven branches.
    pub macs_training_forward: u64,
    pub published_flops: f64,
    pub methodology: String,
}

fn linear(din: usize, dout: usize) -> usize {
    din * dout + dout
}

fn attention_params(d: usize) -> usize {
    4 * linear(d, d)
}

fn ff_params(d: usize, d_ff: usize) -> usize {
    linear(d, d_ff) + linear(d_ff, d)
}

fn encoder_params(c: &ModelConfig) -> usize {
    let d = c.d_model;
    c.depth * (4 * d + attention_params(d) + ff_params(d, c.d_ff)) + 2 * d
}

fn decoder_params(c: &ModelConfig) -> usize {
    let d = c.d_model;
    c.depth * (6 * d + 2 * attention_params(d) + ff_params(d, c.d_ff)) + 2 * d
}

/// Closed-form parameter count.
pub fn analytic_param_count(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let dims = c.input_dims;
    let proj: usize = [dims.l, dims.v, dims.a]
        .iter()
        .map(|&dm| c.conv_kernel * dm * d + d)
        .sum();
    let cls = 4 * d;
    let teacher = 2 * decoder_params(c) + encoder_params(c) + linear(3 * d, d);
    let student = 5 * encoder_params(c) + 3 * linear(2 * d, d);
    let heads = 7 * (linear(d, c.d_hid) + linear(c.d_hid, 1));
    proj + cls + teacher + student + heads
}

fn conv_macs(c: &ModelConfig, b: usize, t: usize, din: usize) -> u64 {
    let half = c.conv_kernel / 2;
    let taps: usize = (0..c.conv_kernel)
        .map(|k| {
            let lo = half.saturating_sub(k);
            let hi = (t + half).saturating_sub(k).min(t);
            hi.saturating_sub(lo)
        })
        .sum();
    (b * taps * din * c.d_model) as u64
}

fn attention_macs(d: usize, b: usize, tq: usize, tk: usize) -> u64 {
    (b * (2 * tq * d * d + 2 * tk * d * d + 2 * tq * tk * d)) as u64
}

fn ff_macs(c: &ModelConfig, b: usize, t: usize) -> u64 {
    (2 * b * t * c.d_model * c.d_ff) as u64
}

fn encoder_macs(c: &ModelConfig, b: usize, t: usize) -> u64 {
    c.depth as u64 * (attention_macs(c.d_model, b, t, t) + ff_macs(c, b, t))
}

fn decoder_macs(c: &ModelConfig, b: usize, tq: usize, tk: usize) -> u64 {
    let d = c.d_model;
    c.depth as u64 * (attention_macs(d, b, tq, tq) + attention_macs(d, b, tq, tk) + ff_macs(c, b, tq))
}

fn head_macs(c: &ModelConfig, b: usize) -> u64 {
    (b * (c.d_model * c.d_hid + c.d_hid)) as u64
}

/// Multiply-accumulates of the teacher inference path with every modality of length `t`.
pub fn teacher_macs(c: &ModelConfig, b: usize, t: usize) -> u64 {
    let d = c.d_model;
    let dims = c.input_dims;
    let proj = conv_macs(c, b, t, dims.l) + conv_macs(c, b, t, dims.v) + conv_macs(c, b, t, dims.a);
    proj + 2 * decoder_macs(c, b, t + 1, t)
        + encoder_macs(c, b, 3)
        + (b * 3 * d * d) as u64
        + head_macs(c, b)
}

/// Multiply-accumulates of a forward pass through all seven branches.
pub fn training_forward_macs(c: &ModelConfig, b: usize, t: usize) -> u64 {
    let d = c.d_model;
    teacher_macs(c, b, t)
        + 2 * encoder_macs(c, b, t + 1)
        + 3 * (encoder_macs(c, b, 2) + (b * 2 * d * d) as u64)
        + 6 * head_macs(c, b)
}

pub fn cost_report(c: &ModelConfig, batch_size: usize) -> Result<CostReport> {
    cost_report_at(c, batch_size, REFERENCE_LENGTH)
}

pub fn cost_report_at(c: &ModelConfig, batch_size: usize, length: usize) -> Result<CostReport> {
    c.validate()?;
    let macs = teacher_macs(c, batch_size, length);
    Ok(CostReport {
        param_count: analytic_param_count(c),
        batch_size,
        reference_length: length,
        macs_per_test_batch: macs,
        flops_per_test_batch: 2 * macs,
        macs_training_forward: training_forward_macs(c, batch_size, length),
        published_flops: PUBLISHED_FLOPS,
        methodology: METHODOLOGY.into(),
    })
}

impl CostReport {
    pub fn to_text(&self) -> String {
        format!(
            "parameters           {}\n\
             batch size           {}\n\
             reference length     {}\n\
             FLOPs per test batch {:.3e}\n\
             published FLOPs      {:.1e}\n\
             {}\n",
            self.param_count,
            self.batch_size,
            self.reference_length,
            self.flops_per_test_batch as f64,
            self.published_flops,
            self.methodology
        )
    }
}

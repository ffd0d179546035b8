//! Transformer building blocks on top of the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, Params};
use crate::real::Real;
use crate::tensor::Tensor;

/// Seeded parameter factory that namespaces every tensor under a dotted path.
pub(crate) struct Init<'a, F> {
    pub params: &'a mut Params<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Real> Init<'_, F> {
    fn uniform(&mut self, path: String, shape: Vec<usize>, bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::lit(self.rng.gen_range(-bound..bound)))
            .collect();
        self.params.add(path, Tensor::new(shape, data))
    }

    fn constant(&mut self, path: String, shape: Vec<usize>, value: f64) -> ParamId {
        self.params.add(path, Tensor::full(shape, F::lit(value)))
    }

    pub fn linear(&mut self, path: &str, din: usize, dout: usize) -> Linear {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        Linear {
            weight: self.uniform(format!("{path}.weight"), vec![din, dout], bound),
            bias: self.constant(format!("{path}.bias"), vec![dout], 0.0),
        }
    }

    pub fn layer_norm(&mut self, path: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.constant(format!("{path}.gamma"), vec![d], 1.0),
            beta: self.constant(format!("{path}.beta"), vec![d], 0.0),
        }
    }

    pub fn embedding(&mut self, path: &str, d: usize) -> ParamId {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..d).map(|_| F::lit(normal.sample(self.rng))).collect();
        self.params.add(path.to_string(), Tensor::new(vec![d], data))
    }

    pub fn conv(&mut self, path: &str, kernel: usize, din: usize, dout: usize) -> ConvProjection {
        let bound = (6.0 / (kernel * din + dout) as f64).sqrt();
        ConvProjection {
            weight: self.uniform(format!("{path}.weight"), vec![kernel, din, dout], bound),
            bias: self.constant(format!("{path}.bias"), vec![dout], 0.0),
        }
    }

    pub fn attention(&mut self, path: &str, d: usize, heads: usize) -> MultiHeadAttention {
        MultiHeadAttention {
            query: self.linear(&format!("{path}.q"), d, d),
            key: self.linear(&format!("{path}.k"), d, d),
            value: self.linear(&format!("{path}.v"), d, d),
            out: self.linear(&format!("{path}.o"), d, d),
            heads,
        }
    }

    pub fn feed_forward(&mut self, path: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{path}.up"), d, d_ff),
            down: self.linear(&format!("{path}.down"), d_ff, d),
        }
    }

    pub fn encoder(&mut self, path: &str, dims: BlockDims) -> Encoder {
        let layers = (0..dims.depth)
            .map(|i| {
                let p = format!("{path}.layers.{i}");
                EncoderLayer {
                    norm1: self.layer_norm(&format!("{p}.ln1"), dims.d),
                    attn: self.attention(&format!("{p}.self_attn"), dims.d, dims.heads),
                    norm2: self.layer_norm(&format!("{p}.ln2"), dims.d),
                    ff: self.feed_forward(&format!("{p}.ff"), dims.d, dims.d_ff),
                }
            })
            .collect();
        Encoder {
            layers,
            norm: self.layer_norm(&format!("{path}.norm"), dims.d),
        }
    }

    pub fn decoder(&mut self, path: &str, dims: BlockDims) -> Decoder {
        let layers = (0..dims.depth)
            .map(|i| {
                let p = format!("{path}.layers.{i}");
                DecoderLayer {
                    norm1: self.layer_norm(&format!("{p}.ln1"), dims.d),
                    self_attn: self.attention(&format!("{p}.self_attn"), dims.d, dims.heads),
                    norm2: self.layer_norm(&format!("{p}.ln2"), dims.d),
                    cross_attn: self.attention(&format!("{p}.cross_attn"), dims.d, dims.heads),
                    norm3: self.layer_norm(&format!("{p}.ln3"), dims.d),
                    ff: self.feed_forward(&format!("{p}.ff"), dims.d, dims.d_ff),
                }
            })
            .collect();
        Decoder {
            layers,
            norm: self.layer_norm(&format!("{path}.norm"), dims.d),
        }
    }

    pub fn head(&mut self, path: &str, d: usize, d_hid: usize) -> RegressionHead {
        RegressionHead {
            hidden: self.linear(&format!("{path}.hidden"), d, d_hid),
            out: self.linear(&format!("{path}.out"), d_hid, 1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub depth: usize,
    pub d_ff: usize,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, params: &Params<F>, x: Var) -> Var {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, params: &Params<F>, x: Var) -> Var {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &Params<F>,
        query: Var,
        memory: Var,
        key_pad: Option<&[bool]>,
    ) -> Var {
        let q = self.query.forward(tape, params, query);
        let k = self.key.forward(tape, params, memory);
        let v = self.value.forward(tape, params, memory);
        let a = tape.attention(q, k, v, self.heads, key_pad);
        self.out.forward(tape, params, a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, params: &Params<F>, x: Var) -> Var {
        let h = self.up.forward(tape, params, x);
        let h = tape.relu(h);
        self.down.forward(tape, params, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &Params<F>,
        mut x: Var,
        pad: Option<&[bool]>,
        dropout: f64,
    ) -> Var {
        for layer in &self.layers {
            let h = layer.norm1.forward(tape, params, x);
            let h = layer.attn.forward(tape, params, h, h, pad);
            let h = tape.dropout(h, dropout);
            x = tape.add(x, h);
            let h = layer.norm2.forward(tape, params, x);
            let h = layer.ff.forward(tape, params, h);
            let h = tape.dropout(h, dropout);
            x = tape.add(x, h);
        }
        self.norm.forward(tape, params, x)
    }
}

/// Pre-norm block: unmasked self-attention over the target, then
/// cross-attention with the target as query and `memory` as key/value.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &Params<F>,
        memory: Var,
        memory_pad: &[bool],
        mut target: Var,
        target_pad: &[bool],
        dropout: f64,
    ) -> Var {
        for layer in &self.layers {
            let h = layer.norm1.forward(tape, params, target);
            let h = layer.self_attn.forward(tape, params, h, h, Some(target_pad));
            let h = tape.dropout(h, dropout);
            target = tape.add(target, h);
            let h = layer.norm2.forward(tape, params, target);
            let h = layer
                .cross_attn
                .forward(tape, params, h, memory, Some(memory_pad));
            let h = tape.dropout(h, dropout);
            target = tape.add(target, h);
            let h = layer.norm3.forward(tape, params, target);
            let h = layer.ff.forward(tape, params, h);
            let h = tape.dropout(h, dropout);
            target = tape.add(target, h);
        }
        self.norm.forward(tape, params, target)
    }
}

/// Kernel-`K` temporal convolution mapping `d^m` features to `d_model`.
#[derive(Debug, Clone)]
pub struct ConvProjection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvProjection {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, params: &Params<F>, x: Var) -> Var {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.conv1d(x, w, b)
    }
}

/// `W2 · relu(W1 h + B1) + B2`
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl RegressionHead {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, params: &Params<F>, h: Var) -> Var {
        let z = self.hidden.forward(tape, params, h);
        let z = tape.relu(z);
        self.out.forward(tape, params, z)
    }
}

/// Sinusoidal position table `[len, d]`:
/// `PE(p, 2i) = sin(p / 10000^(2i/d))`, `PE(p, 2i+1) = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for p in 0..len {
        for i in (0..d).step_by(2) {
            let angle = p as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[p * d + i] = angle.sin();
            if i + 1 < d {
                pe[p * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Adds the position table to every row of `x: [B, T, D]`.
pub fn add_positions<F: Real>(tape: &mut Tape<F>, x: Var) -> Var {
    let (b, t, d) = match *tape.shape(x) {
        [b, t, d] => (b, t, d),
        ref s => panic!("add_positions expects [B, T, D], got {s:?}"),
    };
    let table = sinusoidal_table(t, d);
    let mut data = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        data.extend(table.iter().map(|&v| F::lit(v)));
    }
    let pe = tape.constant(Tensor::new(vec![b, t, d], data));
    tape.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_table_values() {
        let pe = sinusoidal_table(3, 4);
        // Position 0: sin 0, cos 0.
        assert_eq!(&pe[0..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[5] - 1f64.cos()).abs() < 1e-15);
        assert!((pe[6] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
        assert!((pe[7] - (1.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}

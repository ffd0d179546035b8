//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op records its inputs plus whatever forward state its backward rule
//! needs. Gradients are only propagated into nodes that transitively depend
//! on a parameter or an explicit [`Tape::input`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, Params};
use crate::real::Real;
use crate::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, F),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
        key_pad: Option<Vec<bool>>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    PrependToken {
        token: Var,
        x: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    StackTokens(Vec<Var>),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    L2Normalize {
        x: Var,
        inv_norm: Vec<F>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum(Vec<Var>),
    /// Scalar computed outside the tape with a precomputed gradient.
    Scalar {
        x: Var,
        grad: Vec<F>,
    },
}

pub struct Tape<F> {
    values: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    needs_grad: Vec<bool>,
    param_vars: Vec<Option<Var>>,
    inputs: Vec<Var>,
    dropout_rng: Option<ChaCha8Rng>,
    macs: u64,
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    params: Vec<Option<Tensor<F>>>,
    inputs: Vec<(Var, Tensor<F>)>,
}

impl<F: Real> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn input(&self, var: Var) -> Option<&Tensor<F>> {
        self.inputs.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    /// Iterates over parameters that received a gradient.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> F {
        self.iter().map(|(_, g)| g.sq_norm()).sum::<F>().sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.params.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            param_vars: Vec::new(),
            inputs: Vec::new(),
            dropout_rng: None,
            macs: 0,
        }
    }

    /// Training tape with a seeded dropout stream.
    pub fn training(seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Multiply-accumulate operations executed so far by matrix-like ops.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.inputs.push(v);
        v
    }

    /// Leaf bound to a parameter. Repeated use of the same id yields the same node.
    pub fn param(&mut self, params: &Params<F>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.constant(value)
    }

    /// `x[..., in] · w[in, out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (din, dout) = (ws.shape()[0], ws.shape()[1]);
        assert_eq!(xs.last_dim(), din, "linear: input dim {} != {din}", xs.last_dim());
        let rows = xs.rows();
        let mut out_shape = xs.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut y = vec![F::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                y[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        matmul_acc(xs.data(), ws.data(), &mut y, rows, din, dout);
        self.macs += (rows * din * dout) as u64;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(out_shape, y), Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, factor), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(F::zero())).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Normalises over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = F::lit(1e-5);
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let mut y = vec![F::zero(); rows * d];
        let inv_d = F::one() / F::lit(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * g[c] + bt[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), y);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention without causal masking.
    ///
    /// `q: [B, Tq, D]`, `k, v: [B, Tk, D]`. `key_pad` is `[B * Tk]` with
    /// `true` marking keys that must receive zero weight. Every query row must
    /// see at least one unmasked key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_pad: Option<&[bool]>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, tq, d) = dims3(qv);
        let (bk, tk, dk) = dims3(kv);
        assert_eq!((b, d), (bk, dk), "attention: q/k mismatch");
        assert_eq!(kv.shape(), vv.shape(), "attention: k/v mismatch");
        assert_eq!(d % heads, 0);
        if let Some(m) = key_pad {
            assert_eq!(m.len(), b * tk, "attention: key mask length");
        }
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut probs = vec![F::zero(); b * heads * tq * tk];
        let mut out = vec![F::zero(); b * tq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for bi in 0..b {
            let pad = key_pad.map(|m| &m[bi * tk..(bi + 1) * tk]);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qrow = &qd[(bi * tq + i) * d + off..][..dh];
                    let p = &mut probs[((bi * heads + h) * tq + i) * tk..][..tk];
                    let mut max = F::neg_infinity();
                    let mut open = 0;
                    for j in 0..tk {
                        if pad.is_some_and(|m| m[j]) {
                            continue;
                        }
                        let s = dot(qrow, &kd[(bi * tk + j) * d + off..][..dh]) * scale;
                        p[j] = s;
                        open += 1;
                        if s > max || s.is_nan() {
                            max = s;
                        }
                    }
                    assert!(open > 0, "attention row with every key masked");
                    let mut z = F::zero();
                    for j in 0..tk {
                        if pad.is_some_and(|m| m[j]) {
                            continue;
                        }
                        let e = (p[j] - max).exp();
                        p[j] = e;
                        z += e;
                    }
                    let inv = F::one() / z;
                    let orow = &mut out[(bi * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        if pad.is_some_and(|m| m[j]) {
                            continue;
                        }
                        p[j] *= inv;
                        let w = p[j];
                        let vrow = &vd[(bi * tk + j) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        self.macs += (2 * b * tq * tk * d) as u64;
        let t = Tensor::new(vec![b, tq, d], out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                key_pad: key_pad.map(<[bool]>::to_vec),
            },
            ng,
        )
    }

    /// Length-preserving 1-D convolution over time with symmetric zero padding.
    ///
    /// `x: [B, T, Din]`, `w: [K, Din, Dout]` with odd `K`, `b: [Dout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (bsz, t, din) = dims3(xv);
        let (k, wdin, dout) = dims3(wv);
        assert_eq!(din, wdin, "conv1d: input dim {din} != {wdin}");
        assert_eq!(k % 2, 1, "conv1d: kernel must be odd");
        let bias = self.value(b).data();
        let mut y = vec![F::zero(); bsz * t * dout];
        for r in 0..bsz * t {
            y[r * dout..(r + 1) * dout].copy_from_slice(bias);
        }
        let mut macs = 0;
        for bi in 0..bsz {
            for kk in 0..k {
                let Some((t0, t1, src)) = conv_rows(t, k, kk) else {
                    continue;
                };
                let n = t1 - t0;
                let xs = &xv.data()[(bi * t + src) * din..][..n * din];
                let ws = &wv.data()[kk * din * dout..][..din * dout];
                let ys = &mut y[(bi * t + t0) * dout..][..n * dout];
                matmul_acc(xs, ws, ys, n, din, dout);
                macs += n * din * dout;
            }
        }
        self.macs += macs as u64;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(vec![bsz, t, dout], y), Op::Conv1d { x, w, b }, ng)
    }

    /// `[D]` token prepended to every row of `x: [B, T, D]`.
    pub fn prepend_token(&mut self, token: Var, x: Var) -> Var {
        let (tv, xv) = (self.value(token), self.value(x));
        let (b, t, d) = dims3(xv);
        assert_eq!(tv.len(), d);
        let mut out = Vec::with_capacity(b * (t + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(tv.data());
            out.extend_from_slice(&xv.data()[bi * t * d..(bi + 1) * t * d]);
        }
        let ng = self.ng(token) || self.ng(x);
        self.push(
            Tensor::new(vec![b, t + 1, d], out),
            Op::PrependToken { token, x },
            ng,
        )
    }

    /// `x[:, index, :]`
    pub fn select_token(&mut self, x: Var, index: usize) -> Var {
        let xv = self.value(x);
        let (b, t, d) = dims3(xv);
        assert!(index < t);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&xv.data()[(bi * t + index) * d..][..d]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![b, d], out), Op::SelectToken { x, index }, ng)
    }

    /// Stacks `[B, D]` rows into a `[B, n, D]` token sequence, slot order preserved.
    pub fn stack_tokens(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]);
        let (b, d) = (first.shape()[0], first.shape()[1]);
        let n = parts.len();
        let mut out = vec![F::zero(); b * n * d];
        for (s, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            assert_eq!(pv.shape(), [b, d], "stack_tokens: shape mismatch");
            for bi in 0..b {
                out[(bi * n + s) * d..][..d].copy_from_slice(pv.row(bi));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![b, n, d], out),
            Op::StackTokens(parts.to_vec()),
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Concatenates `[n_i, D]` blocks along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = self.value(parts[0]).last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.shape().len(), 2);
            assert_eq!(pv.last_dim(), d, "concat_rows: dim mismatch");
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![rows, d], out),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// Inverted dropout; identity on inference tapes or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = F::lit(1.0 / (1.0 - rate));
        let n = self.values[x.0].len();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x, mask }, ng)
    }

    /// Scales each row of `x` to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        let mut inv_norm = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = xv.row(r);
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(F::lit(1e-12));
            let inv = F::one() / n;
            inv_norm.push(inv);
            y.extend(row.iter().map(|&v| v * inv));
        }
        debug_assert_eq!(y.len(), rows * d);
        let t = Tensor::new(xv.shape().to_vec(), y);
        let ng = self.ng(x);
        self.push(t, Op::L2Normalize { x, inv_norm }, ng)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse: shape mismatch");
        let n = F::lit(av.len() as f64);
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<F>()
            / n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s), Op::Mse { a, b }, ng)
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let s = parts.iter().map(|&p| self.value(p).item()).sum();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::scalar(s), Op::Sum(parts.to_vec()), ng)
    }

    /// Registers a scalar `f(x)` whose gradient `df/dx` was computed by the caller.
    pub fn custom_scalar(&mut self, x: Var, value: F, grad: Vec<F>) -> Var {
        assert_eq!(grad.len(), self.value(x).len());
        let ng = self.ng(x);
        self.push(Tensor::scalar(value), Op::Scalar { x, grad }, ng)
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![F::one()]));
        let mut param_grads: Vec<Option<Tensor<F>>> =
            (0..self.param_vars.len()).map(|_| None).collect();
        let mut input_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &self.ops[i] {
                Op::Leaf => {
                    if self.inputs.contains(&Var(i)) {
                        input_grads.push((Var(i), g));
                    }
                }
                Op::Param(id) => param_grads[id.0] = Some(g),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.rows();
                    if self.ng(*x) {
                        let mut dx = vec![F::zero(); rows * din];
                        matmul_bt_acc(g.data(), wv.data(), &mut dx, rows, dout, din);
                        self.acc(&mut grads, *x, dx);
                    }
                    if self.ng(*w) {
                        let mut dw = vec![F::zero(); din * dout];
                        matmul_at_acc(xv.data(), g.data(), &mut dw, rows, din, dout);
                        self.acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.ng(*b)) {
                        let mut db = vec![F::zero(); dout];
                        for r in 0..rows {
                            for (d, &v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        self.acc(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.data().to_vec());
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, g.into_data());
                    }
                }
                Op::Scale(x, f) => {
                    let dx = g.data().iter().map(|&v| v * *f).collect();
                    self.acc(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect();
                    self.acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = g.last_dim();
                    let rows = g.rows();
                    let gm = self.value(*gamma).data();
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut dg = vec![F::zero(); d];
                        let mut db = vec![F::zero(); d];
                        for r in 0..rows {
                            for c in 0..d {
                                let gv = g.data()[r * d + c];
                                dg[c] += gv * xhat[r * d + c];
                                db[c] += gv;
                            }
                        }
                        if self.ng(*gamma) {
                            self.acc(&mut grads, *gamma, dg);
                        }
                        if self.ng(*beta) {
                            self.acc(&mut grads, *beta, db);
                        }
                    }
                    if self.ng(*x) {
                        let inv_d = F::one() / F::lit(d as f64);
                        let mut dx = vec![F::zero(); rows * d];
                        for r in 0..rows {
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for c in 0..d {
                                let dxh = g.data()[r * d + c] * gm[c];
                                m1 += dxh;
                                m2 += dxh * xhat[r * d + c];
                            }
                            m1 *= inv_d;
                            m2 *= inv_d;
                            for c in 0..d {
                                let dxh = g.data()[r * d + c] * gm[c];
                                dx[r * d + c] = rstd[r] * (dxh - m1 - xhat[r * d + c] * m2);
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                    key_pad,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (b, tq, d) = dims3(qv);
                    let tk = kv.shape()[1];
                    let heads = *heads;
                    let dh = d / heads;
                    let scale = F::one() / F::lit(dh as f64).sqrt();
                    let mut dq = vec![F::zero(); qv.len()];
                    let mut dk = vec![F::zero(); kv.len()];
                    let mut dv = vec![F::zero(); vv.len()];
                    let mut dp = vec![F::zero(); tk];
                    let gd = g.data();
                    for bi in 0..b {
                        let pad = key_pad.as_ref().map(|m| &m[bi * tk..(bi + 1) * tk]);
                        for h in 0..heads {
                            let off = h * dh;
                            for i in 0..tq {
                                let p = &probs[((bi * heads + h) * tq + i) * tk..][..tk];
                                let go = &gd[(bi * tq + i) * d + off..][..dh];
                                let mut s = F::zero();
                                for j in 0..tk {
                                    if pad.is_some_and(|m| m[j]) {
                                        dp[j] = F::zero();
                                        continue;
                                    }
                                    let vrow = &vv.data()[(bi * tk + j) * d + off..][..dh];
                                    dp[j] = dot(go, vrow);
                                    s += dp[j] * p[j];
                                    let dvrow = &mut dv[(bi * tk + j) * d + off..][..dh];
                                    for (x, &y) in dvrow.iter_mut().zip(go) {
                                        *x += p[j] * y;
                                    }
                                }
                                let qrow = &qv.data()[(bi * tq + i) * d + off..][..dh];
                                for j in 0..tk {
                                    if pad.is_some_and(|m| m[j]) {
                                        continue;
                                    }
                                    let ds = p[j] * (dp[j] - s) * scale;
                                    if ds == F::zero() {
                                        continue;
                                    }
                                    let krow = &kv.data()[(bi * tk + j) * d + off..][..dh];
                                    let dqrow = &mut dq[(bi * tq + i) * d + off..][..dh];
                                    for (x, &y) in dqrow.iter_mut().zip(krow) {
                                        *x += ds * y;
                                    }
                                    let dkrow = &mut dk[(bi * tk + j) * d + off..][..dh];
                                    for (x, &y) in dkrow.iter_mut().zip(qrow) {
                                        *x += ds * y;
                                    }
                                }
                            }
                        }
                    }
                    if self.ng(*q) {
                        self.acc(&mut grads, *q, dq);
                    }
                    if self.ng(*k) {
                        self.acc(&mut grads, *k, dk);
                    }
                    if self.ng(*v) {
                        self.acc(&mut grads, *v, dv);
                    }
                }
                Op::Conv1d { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (bsz, t, din) = dims3(xv);
                    let (k, _, dout) = dims3(wv);
                    let mut dx = self.ng(*x).then(|| vec![F::zero(); xv.len()]);
                    let mut dw = self.ng(*w).then(|| vec![F::zero(); wv.len()]);
                    for bi in 0..bsz {
                        for kk in 0..k {
                            let Some((t0, t1, src)) = conv_rows(t, k, kk) else {
                                continue;
                            };
                            let n = t1 - t0;
                            let gs = &g.data()[(bi * t + t0) * dout..][..n * dout];
                            let ws = &wv.data()[kk * din * dout..][..din * dout];
                            if let Some(dx) = dx.as_mut() {
                                let dxs = &mut dx[(bi * t + src) * din..][..n * din];
                                matmul_bt_acc(gs, ws, dxs, n, dout, din);
                            }
                            if let Some(dw) = dw.as_mut() {
                                let xs = &xv.data()[(bi * t + src) * din..][..n * din];
                                let dws = &mut dw[kk * din * dout..][..din * dout];
                                matmul_at_acc(xs, gs, dws, n, din, dout);
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        self.acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        self.acc(&mut grads, *w, dw);
                    }
                    if self.ng(*b) {
                        let mut db = vec![F::zero(); dout];
                        for r in 0..bsz * t {
                            for (d, &v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::PrependToken { token, x } => {
                    let (b, t1, d) = dims3(&g);
                    let t = t1 - 1;
                    if self.ng(*token) {
                        let mut dt = vec![F::zero(); d];
                        for bi in 0..b {
                            for (a, &v) in dt.iter_mut().zip(&g.data()[bi * t1 * d..][..d]) {
                                *a += v;
                            }
                        }
                        self.acc(&mut grads, *token, dt);
                    }
                    if self.ng(*x) {
                        let mut dx = Vec::with_capacity(b * t * d);
                        for bi in 0..b {
                            dx.extend_from_slice(&g.data()[(bi * t1 + 1) * d..][..t * d]);
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::SelectToken { x, index } => {
                    let (b, t, d) = dims3(self.value(*x));
                    let mut dx = vec![F::zero(); b * t * d];
                    for bi in 0..b {
                        dx[(bi * t + index) * d..][..d].copy_from_slice(g.row(bi));
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::StackTokens(parts) => {
                    let (b, n, d) = dims3(&g);
                    for (s, &p) in parts.iter().enumerate() {
                        if !self.ng(p) {
                            continue;
                        }
                        let mut dp = Vec::with_capacity(b * d);
                        for bi in 0..b {
                            dp.extend_from_slice(&g.data()[(bi * n + s) * d..][..d]);
                        }
                        self.acc(&mut grads, p, dp);
                    }
                }
                Op::Reshape(x) => self.acc(&mut grads, *x, g.into_data()),
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.ng(p) {
                            self.acc(&mut grads, p, g.data()[off..off + n].to_vec());
                        }
                        off += n;
                    }
                }
                Op::Dropout { x, mask } => {
                    let dx = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    self.acc(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, inv_norm } => {
                    let y = self.value(Var(i));
                    let d = y.last_dim();
                    let mut dx = vec![F::zero(); y.len()];
                    for (r, &inv) in inv_norm.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = dot(yr, gr);
                        for c in 0..d {
                            dx[r * d + c] = (gr[c] - yr[c] * proj) * inv;
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Mse { a, b } => {
                    let up = g.item();
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let c = up * F::lit(2.0) / F::lit(av.len() as f64);
                    let diff: Vec<F> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| (x - y) * c)
                        .collect();
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, diff.iter().map(|&v| -v).collect());
                    }
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, diff);
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        if self.ng(p) {
                            self.acc(&mut grads, p, g.data().to_vec());
                        }
                    }
                }
                Op::Scalar { x, grad } => {
                    let up = g.item();
                    self.acc(&mut grads, *x, grad.iter().map(|&v| v * up).collect());
                }
            }
        }
        input_grads.reverse();
        Gradients {
            params: param_grads,
            inputs: input_grads,
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: Vec<F>) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.value(v).shape().to_vec(), delta));
            }
        }
    }
}

fn dims3<F: Real>(t: &Tensor<F>) -> (usize, usize, usize) {
    match *t.shape() {
        [a, b, c] => (a, b, c),
        ref s => panic!("expected a rank-3 tensor, got shape {s:?}"),
    }
}

/// Output rows `[t0, t1)` touched by kernel tap `kk`, plus the first source row.
fn conv_rows(t: usize, k: usize, kk: usize) -> Option<(usize, usize, usize)> {
    let half = k / 2;
    let t0 = half.saturating_sub(kk);
    let t1 = (t + half).saturating_sub(kk).min(t);
    (t0 < t1).then(|| (t0, t1, t0 + kk - half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(c * f(x)))/dx for a single-input op against central differences.
    fn check_input_grad(shape: Vec<usize>, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, shape);
        let run = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let y = f(&mut tape, xv);
            let n = tape.value(y).len();
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let c = Tensor::new(vec![n], (0..n).map(|_| r.gen_range(-1.0..1.0)).collect());
            let yflat = tape.reshape(y, vec![1, n]);
            let cv = tape.constant(c.reshape(vec![n, 1]));
            let s = tape.linear(yflat, cv, None);
            let s = tape.reshape(s, vec![1]);
            let g = tape.backward(s);
            (tape.value(s).item(), g.input(xv).cloned())
        };
        let (_, analytic) = run(&x0);
        let analytic = analytic.expect("input gradient");
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let num = (run(&xp).0 - run(&xm).0) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - num).abs() <= 1e-6 * (1.0 + a.abs().max(num.abs())),
                "entry {i}: analytic {a} numeric {num}"
            );
        }
    }

    #[test]
    fn conv_rows_cover_valid_taps() {
        // T = 4, K = 3: tap 0 reads t-1, tap 2 reads t+1.
        assert_eq!(conv_rows(4, 3, 0), Some((1, 4, 0)));
        assert_eq!(conv_rows(4, 3, 1), Some((0, 4, 0)));
        assert_eq!(conv_rows(4, 3, 2), Some((0, 3, 1)));
        assert_eq!(conv_rows(1, 3, 0), None);
        assert_eq!(conv_rows(1, 3, 1), Some((0, 1, 0)));
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = rand_tensor(&mut rng, vec![4]);
        let b = rand_tensor(&mut rng, vec![4]);
        check_input_grad(vec![3, 4], move |t, x| {
            let gv = t.constant(g.clone());
            let bv = t.constant(b.clone());
            t.layer_norm(x, gv, bv)
        });
    }

    #[test]
    fn attention_query_gradient_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let kv = rand_tensor(&mut rng, vec![2, 3, 4]);
        let pad = vec![false, false, true, false, true, true];
        check_input_grad(vec![2, 2, 4], move |t, q| {
            let k = t.constant(kv.clone());
            t.attention(q, k, k, 2, Some(&pad))
        });
    }

    #[test]
    fn attention_key_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let qv = rand_tensor(&mut rng, vec![2, 2, 4]);
        check_input_grad(vec![2, 3, 4], move |t, k| {
            let q = t.constant(qv.clone());
            t.attention(q, k, k, 2, None)
        });
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = rand_tensor(&mut rng, vec![3, 2, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        check_input_grad(vec![2, 4, 2], move |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            t.conv1d(x, wv, bv)
        });
    }

    #[test]
    fn l2_normalize_gradient() {
        check_input_grad(vec![3, 5], |t, x| t.l2_normalize(x));
    }

    #[test]
    fn token_plumbing_gradients() {
        check_input_grad(vec![2, 3, 4], |t, x| {
            let head = t.select_token(x, 0);
            let tail = t.select_token(x, 2);
            let s = t.stack_tokens(&[tail, head]);
            let s = t.reshape(s, vec![2, 8]);
            let r = t.relu(s);
            t.concat_rows(&[r, s])
        });
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::full(vec![1, 1, 2], 1.0));
        let k_short = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]));
        let k_long = tape.constant(Tensor::new(
            vec![1, 3, 2],
            vec![0.1, 0.2, 0.3, 0.4, 99.0, -99.0],
        ));
        let a = tape.attention(q, k_short, k_short, 1, None);
        let b = tape.attention(q, k_long, k_long, 1, Some(&[false, false, true]));
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }
}

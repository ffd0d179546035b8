use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::params::Params;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched and their moments are not decayed.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig,
    lr: f64,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &Params<F>, lr: f64, cfg: AdamConfig) -> Self {
        let zeros = |p: &Params<F>| {
            p.iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            lr,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params<F>, grads: &Gradients<F>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = F::lit(self.lr * c2.sqrt() / c1);
        let (b1, b2) = (F::lit(b1), F::lit(b2));
        let eps = F::lit(self.cfg.eps * c2.sqrt());
        let wd = F::lit(self.cfg.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            let p = params.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g + wd * *w;
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *w -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn minimises_a_quadratic() {
        let mut params = Params::<f64>::new();
        let id = params.add("w", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&params, 0.1, AdamConfig::default());
        for _ in 0..500 {
            let mut tape = Tape::new();
            let w = tape.param(&params, id);
            let zero = tape.constant(Tensor::zeros(vec![2]));
            let l = tape.mse(w, zero);
            let g = tape.backward(l);
            opt.step(&mut params, &g);
        }
        assert!(params.get(id).data().iter().all(|x| x.abs() < 1e-2));
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = Params::<f64>::new();
        let id = params.add("w", Tensor::new(vec![1], vec![1.0]));
        let mut opt = Adam::new(&params, 0.01, AdamConfig::default());
        let mut tape = Tape::new();
        let w = tape.param(&params, id);
        let zero = tape.constant(Tensor::zeros(vec![1]));
        let l = tape.mse(w, zero);
        let g = tape.backward(l);
        opt.step(&mut params, &g);
        assert!((params.get(id).data()[0] - 0.99).abs() < 1e-6);
    }
}

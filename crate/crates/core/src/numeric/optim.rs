//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::numeric::{Graph, ParamId, ParamStore};

/// Update rule for a training phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

/// Optimizer plus whatever running state it keeps.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    rule: Optimizer,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u32>,
}

impl OptimizerState {
    pub fn new(rule: Optimizer, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect::<Vec<_>>();
        let (m, v) = match rule {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (zeros(), zeros()),
        };
        Self {
            rule,
            m,
            v,
            t: vec![0; store.len()],
        }
    }

    /// Updates every parameter bound on `g` that has a gradient, at
    /// `lr * scale(id)`; a zero scale leaves the parameter (and its Adam
    /// state) untouched. Adam keeps a step count per parameter, so
    /// parameters that sit out some steps get the usual bias correction.
    pub fn step(&mut self, store: &mut ParamStore, g: &Graph, lr: f64, scale: impl Fn(ParamId) -> f64) {
        match self.rule {
            Optimizer::Sgd => {
                for (key, var) in g.bound_params() {
                    let id = ParamId(key);
                    let s = scale(id);
                    if s == 0.0 {
                        continue;
                    }
                    let Some(grad) = g.grad(var) else { continue };
                    let rate = lr * s;
                    store.get_mut(id).data_mut().iter_mut().zip(grad).for_each(|(p, d)| *p -= rate * d);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                for (key, var) in g.bound_params() {
                    let id = ParamId(key);
                    let s = scale(id);
                    if s == 0.0 {
                        continue;
                    }
                    let Some(grad) = g.grad(var) else { continue };
                    let rate = lr * s;
                    self.t[key] += 1;
                    let t = self.t[key] as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.m[key], &mut self.v[key]);
                    for (((p, &d), mi), vi) in store.get_mut(id).data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *p -= rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(grad)
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut opt = OptimizerState::new(Optimizer::adam(), &store);
        let mut g = Graph::new();
        let w = store.bind(&mut g, id);
        let s = g.square(w);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        opt.step(&mut store, &g, 0.1, |_| 1.0);
        let got = store.get(id).data();
        for (x, want) in got.iter().zip([0.9, -1.9, 0.4]) {
            assert!((x - want).abs() < 1e-6, "{x} vs {want}");
        }
    }

    #[test]
    fn sgd_matches_store_step() {
        let mut a = ParamStore::new();
        let id = a.add("w", Tensor::vector(vec![1.0, 3.0]));
        let mut b = a.clone();
        let mut g = Graph::new();
        let w = a.bind(&mut g, id);
        let s = g.square(w);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        OptimizerState::new(Optimizer::Sgd, &a).step(&mut a, &g, 0.25, |_| 1.0);
        b.sgd_step(&g, 0.25, |_| false);
        assert_eq!(a, b);
        assert_eq!(a.get(id).data(), &[0.5, 1.5]);
    }
}

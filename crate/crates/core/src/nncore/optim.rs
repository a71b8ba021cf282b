use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam moments for every parameter in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<_> = params
            .ids()
            .map(|id| Array2::zeros(params.value(id).dim()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One Adam update using the gradients stored in `params`. Parameters
    /// without a gradient are treated as having a zero gradient. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(NnError::Optimizer(format!(
                "state tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if let Some(g) = params.grad(id) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFinite(params.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in params.ids() {
            let grad = params
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(params.value(id).dim()));
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = params.value_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(&grad)
                .for_each(|p, m, v, &g| {
                    let g = g + c.weight_decay * *p;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                });
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .ids()
        .filter_map(|id| params.grad(id))
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        params.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("p", array![[1.0, -2.0]]);
        store.accumulate(id, &array![[0.0, 0.0]]);
        let mut opt = OptimizerState::new(
            &store,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id), &array![[1.0, -2.0]]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // step 1: m_hat = g, v_hat = g², so Δp = -lr · g / (|g| + eps)
        let mut store = ParamStore::new();
        let id = store.add("p", array![[0.0, 0.0, 0.0]]);
        let g = array![[0.3, -7.0, 1e-3]];
        store.accumulate(id, &g);
        let lr = 1e-4;
        let mut opt = OptimizerState::new(
            &store,
            AdamConfig {
                lr,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        opt.step(&mut store).unwrap();
        for (p, g) in store.value(id).iter().zip(g.iter()) {
            let expect = -lr * g / (g.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-15);
            assert!(p.abs() <= lr);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        let a = store.add("enc.w", array![[1.0]]);
        store.accumulate(a, &array![[f64::NAN]]);
        let mut opt = OptimizerState::new(&store, AdamConfig::default());
        match opt.step(&mut store) {
            Err(NnError::NonFinite(name)) => assert_eq!(name, "enc.w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.value(a), &array![[1.0]]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("p", array![[0.5, -0.25]]);
            let mut opt = OptimizerState::new(&store, AdamConfig::default());
            for k in 0..50 {
                store.zero_grad();
                let g = store.value(id).mapv(|v| 2.0 * v + (k as f64).sin());
                store.accumulate(id, &g);
                opt.step(&mut store).unwrap();
            }
            store.value(id).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[0.0, 0.0]]);
        let b = store.add("b", array![[0.0]]);
        store.accumulate(a, &array![[3.0, 0.0]]);
        store.accumulate(b, &array![[4.0]]);
        let before = clip_grad_norm(&mut store, 1.0);
        assert_eq!(before, 5.0);
        let after = clip_grad_norm(&mut store, 10.0);
        assert!((after - 1.0).abs() < 1e-12);
    }
}

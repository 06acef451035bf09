use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{Param, Parameterized};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<T> {
    m: ArrayD<T>,
    v: ArrayD<T>,
    step: i32,
}

/// Adam with bias correction. State is keyed by parameter name, so a
/// parameter that receives no gradient in a step keeps its moments untouched.
pub struct Adam<T> {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    /// Applies one update to every trainable parameter holding a gradient,
    /// then clears the gradients.
    pub fn step<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M) {
        let cfg = self.config;
        let state = &mut self.state;
        model.visit("", &mut |name, p: &mut Param<T>| {
            let Some(g) = p.grad.take() else { return };
            if !p.trainable {
                return;
            }
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
                step: 0,
            });
            st.step += 1;
            let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
            let c1 = T::lit(1.0 - cfg.beta1.powi(st.step));
            let c2 = T::lit(1.0 - cfg.beta2.powi(st.step));
            let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
            Zip::from(&mut p.value)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(&g)
                .for_each(|w, m, v, &gi| {
                    *m = b1 * *m + (T::one() - b1) * gi;
                    *v = b2 * *v + (T::one() - b2) * gi * gi;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }
}

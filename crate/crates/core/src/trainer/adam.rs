//! Adam with bias correction and optional global-norm clipping.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::encoder::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Params<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Array2<T>> = params.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update. Tensors without a gradient entry are left alone.
pub fn adam_step<T: Scalar>(params: &mut Params<T>, grads: &[(usize, Array2<T>)], state: &mut OptimizerState<T>) -> Result<()> {
    let names = Params::<T>::names(&params.config);
    for (id, g) in grads {
        if g.raw_dim() != params.tensors[*id].raw_dim() {
            return Err(Error::ConfigMismatch(format!("gradient shape for {}", names[*id])));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient(names[*id].clone()));
        }
    }
    let cfg = &state.config;
    let scale = match cfg.clip_norm {
        Some(max) => {
            let norm = grads
                .iter()
                .map(|(_, g)| g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps, scale) = (T::of(cfg.lr), T::of(cfg.eps), T::of(scale));
    for (id, g) in grads {
        Zip::from(&mut params.tensors[*id])
            .and(&mut state.m[*id])
            .and(&mut state.v[*id])
            .and(g)
            .for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

use super::params::{ParamError, ParamStore};
use super::Real;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Vec<T>],
    cfg: &AdamConfig,
) -> Result<(), ParamError> {
    if grads.len() != store.len() {
        return Err(ParamError::CountMismatch {
            expected: store.len(),
            got: grads.len(),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != store.tensor(i).numel() {
            return Err(ParamError::ShapeMismatch {
                name: store.names()[i].clone(),
                expected: store.tensor(i).numel(),
                got: g.len(),
            });
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::c(1.0 - cfg.beta1.powi(t));
    let c2 = T::c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::c(cfg.lr), T::c(cfg.eps));
    let one = T::one();
    for (i, g) in grads.iter().enumerate() {
        let m = &mut store.m[i];
        let v = &mut store.v[i];
        let p = store.tensors[i].data_mut();
        for k in 0..g.len() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] = p[k] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

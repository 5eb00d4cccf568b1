use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2-norm clip applied before the update.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(5.0),
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> AdamState<F> {
    pub fn new(params: &Params<F>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<F: Float>(grads: &BTreeMap<String, Vec<F>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are treated as having zero gradient. Returns the pre-clip gradient norm.
pub fn adam_step<F: Float>(
    params: &mut Params<F>,
    grads: &BTreeMap<String, Vec<F>>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<f64> {
    for (name, g) in grads {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name.clone()));
        }
        match params.get(name) {
            Some(p) if p.numel() == g.len() => {}
            Some(p) => {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: vec![g.len()],
                })
            }
            None => return Err(Error::Invalid(format!("gradient for unknown parameter {name}"))),
        }
    }
    let norm = grad_norm(grads);
    let clip = match cfg.grad_clip {
        Some(max) if norm > max => F::of(max / norm),
        _ => F::one(),
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let c1 = F::one() - F::of(cfg.beta1.powi(t));
    let c2 = F::one() - F::of(cfg.beta2.powi(t));
    let (lr, eps) = (F::of(cfg.lr), F::of(cfg.eps));
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.numel() {
            let gi = g.map_or(F::zero(), |g| g[i] * clip);
            let mi = b1 * m.data()[i] + (F::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (F::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            p.data_mut()[i] -= update;
        }
    }
    Ok(norm)
}

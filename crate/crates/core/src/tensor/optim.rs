use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-6 }
    }
}

/// First and second moment estimates, keyed like the parameter store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(name).expect("checked above");
        for (((pi, mi), vi), &gi) in
            p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients by `bound / norm` when the global L2 norm exceeds
/// `bound`. Returns the norm before clipping.
pub fn clip_by_global_norm(grads: &mut BTreeMap<String, Tensor>, bound: f64) -> f64 {
    assert!(bound > 0.0, "clip bound must be positive");
    let norm = global_norm(grads);
    if norm > bound {
        let s = bound / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::from_vec(vec![v]))])
    }

    #[test]
    fn adam_single_scalar_step() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_vec(vec![0.5]));
        let mut st = AdamState::default();
        adam_step(&mut params, &one("w", 1.0), &mut st, 0.1, &AdamConfig::default()).unwrap();
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1; update = 0.1 * 1 / (1 + 1e-6)
        let want = 0.5 - 0.1 / (1.0 + 1e-6);
        assert!((params.get("w").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_vec(vec![0.5]));
        let mut st = AdamState::default();
        adam_step(&mut params, &one("w", 0.0), &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(params.get("w").unwrap().item(), 0.5);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros(&[2]));
        let mut st = AdamState::default();
        assert!(adam_step(&mut params, &one("w", 1.0), &mut st, 0.1, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut params, &one("q", 1.0), &mut st, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = one("a", 0.05);
        assert_eq!(clip_by_global_norm(&mut g, 0.1), 0.05);
        assert_eq!(g["a"].item(), 0.05);

        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::from_vec(vec![0.6])),
            ("b".to_string(), Tensor::from_vec(vec![0.8])),
        ]);
        assert!((clip_by_global_norm(&mut g, 0.1) - 1.0).abs() < 1e-15);
        assert!((g["a"].item() - 0.06).abs() < 1e-15);
        assert!((g["b"].item() - 0.08).abs() < 1e-15);
        assert!(global_norm(&g) <= 0.1 + 1e-12);

        let mut z = one("a", 0.0);
        clip_by_global_norm(&mut z, 0.1);
        assert_eq!(z["a"].item(), 0.0);
    }
}

//! Adam with bias correction and the warmup / inverse-square-root schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Moment estimates and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl OptimState {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: ParamStore = params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        OptimState { cfg, step: 0, m: zeros.clone(), v: zeros }
    }
}

/// `base · min(step / warmup, √(warmup / step))`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let (s, w) = (step as f64, warmup.max(1) as f64);
    base_lr * (s / w).min((w / s).sqrt())
}

/// Rescales `grads` so that their global norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One bias-corrected Adam update at learning rate `lr`. Any non-finite
/// gradient aborts before touching the parameters; `terms` describes the
/// loss values that produced it.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut OptimState, lr: f64, terms: &str) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::dim("adam_step", format!("`{name}`: {:?} vs {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { param: name.clone(), terms: terms.to_string() });
        }
        if !state.m.contains_key(name) {
            return Err(Error::Contract(format!("no optimiser moments for `{name}`")));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        [("w".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(0.7);
        let mut s = OptimState::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            adam_step(&mut p, &store(0.0), &mut s, 0.1, "").unwrap();
        }
        assert_eq!(p["w"].item(), 0.7);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(1.0);
        let cfg = AdamConfig::default();
        let mut s = OptimState::new(cfg, &p);
        adam_step(&mut p, &store(1.0), &mut s, 0.01, "").unwrap();
        let expected = 1.0 - 0.01 / (1.0 + cfg.eps);
        assert!((p["w"].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_a_hand_rolled_trajectory() {
        let mut p = store(0.5);
        let cfg = AdamConfig { beta1: 0.8, beta2: 0.9, eps: 1e-3 };
        let mut s = OptimState::new(cfg, &p);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * x - 0.3;
            adam_step(&mut p, &store(g), &mut s, 0.05, "").unwrap();
            m = 0.8 * m + 0.2 * g;
            v = 0.9 * v + 0.1 * g * g;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.9f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-3);
            assert!((p["w"].item() - x).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = store(1.0);
        let mut s = OptimState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &store(f64::NAN), &mut s, 0.1, "transducer=NaN").unwrap_err();
        match err {
            Error::NonFiniteGradient { param, terms } => {
                assert_eq!(param, "w");
                assert!(terms.contains("transducer"));
            }
            e => panic!("{e}"),
        }
        assert_eq!(p["w"].item(), 1.0);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(0, 1e-3, 500), 0.0);
        assert!((lr_schedule(500, 1e-3, 500) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(2000, 1e-3, 500) - 5e-4).abs() < 1e-18);
        assert!((lr_schedule(250, 1e-3, 500) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g: ParamStore = [("a".to_string(), Tensor::row_vector(&[3.0, 4.0]))].into_iter().collect();
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["a"].data(), &[3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }
}

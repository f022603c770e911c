use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(rename = "learning_rate")]
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(rename = "epsilon")]
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: IndexMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update over several parameter groups. Group names are prefixed to
    /// parameter names to key the moment estimates. If any gradient is
    /// non-finite, nothing is modified.
    pub fn update(
        &mut self,
        cfg: &AdamConfig,
        groups: &mut [(&str, &mut ParamStore, &ParamStore)],
    ) -> Result<()> {
        for (prefix, params, grads) in groups.iter() {
            for (name, p) in params.iter() {
                let g = grads.get(name)?;
                g.expect_shape(p.shape())?;
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for `{prefix}{name}`"
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (prefix, params, grads) in groups.iter_mut() {
            for (name, p) in params.iter_mut() {
                let g = grads.get(name).expect("checked above");
                let key = format!("{prefix}{name}");
                let (m, v) = self.moments.entry(key).or_insert_with(|| {
                    (
                        Tensor::zeros(p.shape().to_vec()),
                        Tensor::zeros(p.shape().to_vec()),
                    )
                });
                for (((pi, &gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    let gi = gi as f64;
                    let m_new = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
                    let v_new = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
                    *mi = m_new as f32;
                    *vi = v_new as f32;
                    let m_hat = m_new / c1;
                    let v_hat = v_new / c2;
                    *pi = (*pi as f64 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
                }
            }
        }
        Ok(())
    }

    /// Moments as one named store (`m/<key>`, `v/<key>`) for checkpoints.
    pub fn to_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, (m, v)) in &self.moments {
            out.insert(format!("m/{k}"), m.clone());
            out.insert(format!("v/{k}"), v.clone());
        }
        out
    }

    pub fn from_params(step: u64, store: &ParamStore) -> Result<Self> {
        let mut moments = IndexMap::new();
        for (name, m) in store.iter() {
            if let Some(key) = name.strip_prefix("m/") {
                let v = store.get(&format!("v/{key}"))?;
                v.expect_shape(m.shape())?;
                moments.insert(key.to_string(), (m.clone(), v.clone()));
            } else if !name.starts_with("v/") {
                return Err(Error::Format(format!(
                    "unexpected optimizer tensor `{name}`"
                )));
            }
        }
        Ok(Self { step, moments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f32, g: f32) -> (ParamStore, ParamStore) {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::vector(vec![p]).unwrap());
        let mut gs = ParamStore::new();
        gs.insert("w", Tensor::vector(vec![g]).unwrap());
        (ps, gs)
    }

    /// Scalar reference written out from the moment recurrences.
    fn reference(cfg: &AdamConfig, mut p: f64, grads: &[f64]) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        // Starting from 0 keeps f32 rounding far below the tolerance.
        let (mut p, g) = single(0.0, 1.0);
        let mut s = AdamState::new();
        s.update(&cfg, &mut [("", &mut p, &g)]).unwrap();
        let delta = p.get("w").unwrap().data()[0] as f64;
        assert!((delta + cfg.lr).abs() < 1e-6 * cfg.lr, "{delta}");
    }

    #[test]
    fn matches_reference_over_steps() {
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let mut s = AdamState::new();
        let (mut p, _) = single(1.0, 0.0);
        for &g in &grads {
            let (_, gs) = single(0.0, g as f32);
            s.update(&cfg, &mut [("", &mut p, &gs)]).unwrap();
        }
        let want = reference(&cfg, 1.0, &grads);
        assert!((p.get("w").unwrap().data()[0] as f64 - want).abs() < 1e-6);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let (mut p, g) = single(0.75, 0.0);
        AdamState::new()
            .update(&AdamConfig::default(), &mut [("", &mut p, &g)])
            .unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.75);
    }

    #[test]
    fn random_tensors_match_reference() {
        use rand::Rng;
        let cfg = AdamConfig::default();
        let mut rng = crate::rng::rng_for(&[42]);
        let n = 64;
        let init: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let steps: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(init.clone()).unwrap());
        let mut s = AdamState::new();
        for g in &steps {
            let mut gs = ParamStore::new();
            gs.insert("w", Tensor::vector(g.clone()).unwrap());
            s.update(&cfg, &mut [("", &mut p, &gs)]).unwrap();
        }
        for i in 0..n {
            let gi: Vec<f64> = steps.iter().map(|g| g[i] as f64).collect();
            let want = reference(&cfg, init[i] as f64, &gi);
            let got = p.get("w").unwrap().data()[i] as f64;
            assert!((got - want).abs() < 1e-7, "{i}: {got} vs {want}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        // f(w) = (w − 3)², gradient 2(w − 3).
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let (mut p, _) = single(0.0, 0.0);
        let mut s = AdamState::new();
        for _ in 0..2000 {
            let w = p.get("w").unwrap().data()[0];
            let (_, g) = single(0.0, 2.0 * (w - 3.0));
            s.update(&cfg, &mut [("", &mut p, &g)]).unwrap();
        }
        assert!((p.get("w").unwrap().data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_leaves_params_untouched() {
        let (mut p, g) = single(0.5, f32::NAN);
        let mut s = AdamState::new();
        let err = s
            .update(&AdamConfig::default(), &mut [("", &mut p, &g)])
            .unwrap_err();
        assert!(err.is_numeric());
        assert_eq!(p.get("w").unwrap().data()[0], 0.5);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn state_round_trips_through_params() {
        let (mut p, g) = single(0.5, 0.25);
        let mut s = AdamState::new();
        s.update(&AdamConfig::default(), &mut [("lstm/", &mut p, &g)])
            .unwrap();
        let back = AdamState::from_params(s.step, &s.to_params()).unwrap();
        assert_eq!(back, s);
    }
}

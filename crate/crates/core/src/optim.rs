//! Adam with bias correction, updating only parameters that received a
//! gradient in the current step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Per-parameter first moment, second moment and step count.
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub steps: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }

    /// One update of every named parameter in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Vec<f64>)]) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.len() != g.len() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    p.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg() -> AdamConfig {
        AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        store.insert("b", Tensor::new(vec![1], vec![5.0]).unwrap());
        let mut opt = Adam::new(cfg());
        opt.step(&mut store, &[("a".into(), vec![3.0, -0.5])]).unwrap();
        let a = store.get("a").unwrap().data();
        assert!((a[0] - 0.9).abs() < 1e-8 && (a[1] + 0.9).abs() < 1e-8, "{a:?}");
        assert_eq!(store.get("b").unwrap().data(), &[5.0]);
        assert!(!opt.steps.contains_key("b"));
    }

    #[test]
    fn second_step_oracle() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut opt = Adam::new(cfg());
        opt.step(&mut store, &[("w".into(), vec![1.0])]).unwrap();
        opt.step(&mut store, &[("w".into(), vec![-2.0])]).unwrap();
        let m = 0.9 * 0.1 + 0.1 * -2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64.powi(2));
        let first = -0.1 * 1.0 / (1.0 + 1e-8);
        let want = first - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((store.get("w").unwrap().data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut opt = Adam::new(cfg());
        assert!(opt.step(&mut store, &[("w".into(), vec![1.0, 2.0])]).is_err());
        assert!(opt.step(&mut store, &[("nope".into(), vec![1.0])]).is_err());
    }
}

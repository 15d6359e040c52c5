use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[(String, Vec<f32>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.cfg.lr;
        for (name, g) in grads {
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in `{name}` at element {bad}")));
            }
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.cfg.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }

    /// Moments as tensors under `<prefix>.m.<name>` / `<prefix>.v.<name>`,
    /// plus the step counter under `<prefix>.step`.
    pub fn export(&self, prefix: &str, out: &mut ParamStore<f32>) {
        for (name, m) in &self.m {
            out.insert(format!("{prefix}.m.{name}"), Tensor::new(&[m.len()], m.clone()).unwrap());
        }
        for (name, v) in &self.v {
            out.insert(format!("{prefix}.v.{name}"), Tensor::new(&[v.len()], v.clone()).unwrap());
        }
        // f32 holds integers exactly up to 2^24, far beyond any run length here
        out.insert(format!("{prefix}.step"), Tensor::scalar(self.step as f32));
    }

    pub fn import(cfg: AdamConfig, prefix: &str, src: &ParamStore<f32>) -> Self {
        let mut adam = Adam::new(cfg);
        let mp = format!("{prefix}.m.");
        let vp = format!("{prefix}.v.");
        for (k, t) in src.iter() {
            if let Some(name) = k.strip_prefix(&mp) {
                adam.m.insert(name.to_string(), t.data().to_vec());
            } else if let Some(name) = k.strip_prefix(&vp) {
                adam.v.insert(name.to_string(), t.data().to_vec());
            }
        }
        if let Some(s) = src.get(&format!("{prefix}.step")) {
            adam.step = s.data()[0] as u64;
        }
        adam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.1, beta1: 0.0, beta2: 0.999, eps: 1e-12 });
        opt.step(&mut ps, &[("w".into(), vec![3.0, -0.5, 1e-3])]).unwrap();
        let w = ps.get("w").unwrap().data();
        // bias-corrected first step is lr * sign(g)
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert!((w[2] - 0.4).abs() < 1e-5);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.1, beta1: 0.0, beta2: 0.999, eps: 1e-8 });
        let err = opt.step(&mut ps, &[("w".into(), vec![f32::NAN])]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn export_import_round_trip() {
        let mut ps = ParamStore::new();
        ps.insert("a.w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let cfg = AdamConfig { lr: 0.01, beta1: 0.5, beta2: 0.9, eps: 1e-8 };
        let mut opt = Adam::new(cfg);
        opt.step(&mut ps, &[("a.w".into(), vec![0.3, -0.1])]).unwrap();
        let mut out = ParamStore::new();
        opt.export("opt", &mut out);
        let back = Adam::import(cfg, "opt", &out);
        assert_eq!(back.step, 1);
        assert_eq!(back.m, opt.m);
        assert_eq!(back.v, opt.v);
    }
}

//! Training losses, each available as a tape function and a plain value.

use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::identity::{cosine, FREmbedder};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub fm: f64,
    pub prc: f64,
    pub id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { fm: 10.0, prc: 10.0, id: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_fm", self.fm), ("lambda_prc", self.prc), ("lambda_id", self.id)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative finite number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generator-side loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_g: f64,
    pub fm: f64,
    pub prc: f64,
    pub id: f64,
}

/// `L_adv_G + λ_FM·L_FM + λ_prc·L_prc + λ_id·L_id`.
pub fn total_objective(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_adv_G", parts.adv_g), ("L_FM", parts.fm), ("L_prc", parts.prc), ("L_id", parts.id)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v}")));
        }
    }
    Ok(parts.adv_g + w.fm * parts.fm + w.prc * parts.prc + w.id * parts.id)
}

/// Weighted sum on the tape; terms with zero weight are not recorded.
pub fn total_objective_graph<T: Float>(g: &mut Graph<T>, adv_g: Var, fm: Var, prc: Var, id: Var, w: &LossWeights) -> Var {
    let mut total = adv_g;
    for (v, lambda) in [(fm, w.fm), (prc, w.prc), (id, w.id)] {
        if lambda != 0.0 {
            let s = g.scale(v, lambda);
            total = g.add(total, s);
        }
    }
    total
}

/// `1 − cos` between embeddings, from unit reference vectors; batch mean.
/// `raw_embedding: [B, d_id]` is the FR penultimate output of the generated images.
pub fn identity_loss_graph<T: Float>(g: &mut Graph<T>, raw_embedding: Var, reference_unit: &Tensor<T>) -> Var {
    let e = g.l2_normalize(raw_embedding);
    let r = g.input(reference_unit.clone());
    let cos = g.row_dot(e, r);
    let m = g.mean(cos);
    let neg = g.scale(m, -1.0);
    g.add_scalar(neg, 1.0)
}

/// `1 − cos(fr(generated), fr(reference))`.
pub fn identity_loss(fr: &FREmbedder, generated: &Tensor<f32>, reference: &Tensor<f32>) -> Result<f64> {
    let e = fr.embed_batch(&[generated, reference])?;
    Ok(1.0 - cosine(&e[0].vector, &e[1].vector))
}

fn hinge_terms<T: Float>(g: &mut Graph<T>, logits: Var, sign: f64) -> Var {
    // mean(relu(1 + sign·x))
    let s = g.scale(logits, sign);
    let s = g.add_scalar(s, 1.0);
    let r = g.relu(s);
    g.mean(r)
}

fn mean_over<T: Float>(g: &mut Graph<T>, terms: Vec<Var>) -> Var {
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / n as f64)
}

/// Hinge discriminator loss averaged over scales.
pub fn adversarial_d_graph<T: Float>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Var {
    let terms = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| {
            let a = hinge_terms(g, r, -1.0);
            let b = hinge_terms(g, f, 1.0);
            g.add(a, b)
        })
        .collect();
    mean_over(g, terms)
}

/// `−mean(fake)` averaged over scales.
pub fn adversarial_g_graph<T: Float>(g: &mut Graph<T>, fake: &[Var]) -> Var {
    let terms = fake
        .iter()
        .map(|&f| {
            let m = g.mean(f);
            g.scale(m, -1.0)
        })
        .collect();
    mean_over(g, terms)
}

fn mean_f64(t: &Tensor<f32>) -> f64 {
    t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64
}

/// `(L_adv_G, L_adv_D)` from per-scale logits.
pub fn adversarial_losses(real_logits: &[Tensor<f32>], fake_logits: &[Tensor<f32>]) -> Result<(f64, f64)> {
    if real_logits.len() != fake_logits.len() || real_logits.is_empty() {
        return Err(Error::Shape("real and fake logits must cover the same non-empty set of scales".into()));
    }
    let n = real_logits.len() as f64;
    let mut lg = 0.0;
    let mut ld = 0.0;
    for (r, f) in real_logits.iter().zip(fake_logits) {
        lg -= mean_f64(f);
        let hr = r.data().iter().map(|&x| (1.0 - x as f64).max(0.0)).sum::<f64>() / r.numel() as f64;
        let hf = f.data().iter().map(|&x| (1.0 + x as f64).max(0.0)).sum::<f64>() / f.numel() as f64;
        ld += hr + hf;
    }
    Ok((lg / n, ld / n))
}

/// Mean over layers and scales of the mean absolute difference; real
/// features enter as constants.
pub fn feature_matching_graph<T: Float>(g: &mut Graph<T>, real: &[Vec<Tensor<T>>], fake: &[Vec<Var>]) -> Var {
    let mut terms = Vec::new();
    for (rs, fs) in real.iter().zip(fake) {
        for (r, &f) in rs.iter().zip(fs) {
            let rc = g.input(r.clone());
            let d = g.sub(f, rc);
            let a = g.abs(d);
            terms.push(g.mean(a));
        }
    }
    mean_over(g, terms)
}

pub fn feature_matching_loss(real: &[Vec<Tensor<f32>>], fake: &[Vec<Tensor<f32>>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    if real.len() != fake.len() {
        return Err(Error::Shape(format!("{} real scales vs {} fake scales", real.len(), fake.len())));
    }
    for (rs, fs) in real.iter().zip(fake) {
        if rs.len() != fs.len() {
            return Err(Error::Shape(format!("{} real layers vs {} fake layers", rs.len(), fs.len())));
        }
        for (r, f) in rs.iter().zip(fs) {
            if r.shape() != f.shape() {
                return Err(Error::Shape(format!("feature shapes {:?} vs {:?}", r.shape(), f.shape())));
            }
            total += r.data().iter().zip(f.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>()
                / r.numel() as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Shape("no features to compare".into()));
    }
    Ok(total / n as f64)
}

/// Mean over FR trunk layers of mean absolute feature difference.
pub fn perceptual_loss_graph<T: Float>(g: &mut Graph<T>, generated: &[Var], reference: &[Tensor<T>]) -> Var {
    let terms = generated
        .iter()
        .zip(reference)
        .map(|(&f, r)| {
            let rc = g.input(r.clone());
            let d = g.sub(f, rc);
            let a = g.abs(d);
            g.mean(a)
        })
        .collect();
    mean_over(g, terms)
}

/// Feature network used by the perceptual terms.
pub trait FeatureNet: Sync {
    /// Per-layer activations `[B, C, H, W]` for a batch of `[3, H, W]` images.
    fn features(&self, images: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>>;
}

impl FeatureNet for FREmbedder {
    fn features(&self, images: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        self.trunk_features(images)
    }
}

pub fn perceptual_loss(generated: &Tensor<f32>, reference: &Tensor<f32>, net: &dyn FeatureNet) -> Result<f64> {
    let fa = net.features(&[generated])?;
    let fb = net.features(&[reference])?;
    let mut total = 0.0;
    for (a, b) in fa.iter().zip(&fb) {
        total += a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.numel() as f64;
    }
    Ok(total / fa.len() as f64)
}

/// FR forward on the tape for `images: [B, 3, H, W]`, returning the raw
/// embedding and trunk features. FR weights stay constants.
pub fn fr_on_graph<T: Float>(g: &mut Graph<T>, fr: &FREmbedder, fr_params: &ParamStore<T>, images: Var) -> (Var, Vec<Var>) {
    let f = fr.forward(g, fr_params, images);
    (f.raw_embedding, f.features)
}

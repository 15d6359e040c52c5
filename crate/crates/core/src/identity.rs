//! Face-recognition embedders.
//!
//! Two independently trained instances are used: the train-FR conditions the
//! generator and drives the identity and perceptual losses, the eval-FR is only
//! ever used for measurement. Embeddings are the L2-normalized penultimate
//! activation of a small convolutional identity classifier.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Graph, Tensor, Var};
use crate::checkpoint;
use crate::data::FaceRecord;
use crate::error::{Error, Result};
use crate::nn::{rng_for, Adam, AdamConfig, Conv2d, Linear, ParamStore};

pub const DEFAULT_ID_DIM: usize = 128;
pub const MIN_TRAIN_ACCURACY: f64 = 0.9;
const EMBED_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrRole {
    #[serde(rename = "train-FR")]
    Train,
    #[serde(rename = "eval-FR")]
    Eval,
}

impl std::fmt::Display for FrRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrRole::Train => "train-FR",
            FrRole::Eval => "eval-FR",
        })
    }
}

/// Unit-norm identity feature.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding {
    pub vector: Vec<f32>,
    pub source: FrRole,
}

impl IdentityEmbedding {
    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        cosine(&self.vector, &other.vector)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FREmbedderConfig {
    pub role: FrRole,
    /// Channels of the stem; stage `i` has `width · 2^i`.
    pub width: usize,
    /// Number of stride-2 stages.
    pub depth: usize,
    pub seed: u64,
    pub identity_count: usize,
    pub epochs: usize,
    pub d_id: usize,
    pub resolution: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Temperature of the cosine-softmax classifier.
    pub logit_scale: f64,
}

impl FREmbedderConfig {
    pub fn for_role(role: FrRole, resolution: usize, identity_count: usize) -> Self {
        let base = FREmbedderConfig {
            role,
            width: 16,
            depth: 4,
            seed: 101,
            identity_count,
            epochs: 24,
            d_id: DEFAULT_ID_DIM,
            resolution,
            batch_size: 32,
            lr: 3e-3,
            logit_scale: 16.0,
        };
        match role {
            FrRole::Train => base,
            FrRole::Eval => FREmbedderConfig { width: 20, seed: 202, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.identity_count < 2 {
            return Err(Error::Config("face recognizer needs at least 2 identities".into()));
        }
        if self.width == 0 || self.depth == 0 || self.d_id == 0 || self.batch_size == 0 {
            return Err(Error::Config("width, depth, d_id and batch_size must be positive".into()));
        }
        if self.resolution >> self.depth == 0 {
            return Err(Error::Config(format!(
                "depth {} downsamples resolution {} below one pixel",
                self.depth, self.resolution
            )));
        }
        Ok(())
    }
}

/// Train-FR and eval-FR must differ in seed and in at least one architectural field.
pub fn check_independent(a: &FREmbedderConfig, b: &FREmbedderConfig) -> Result<()> {
    if a.seed == b.seed {
        return Err(Error::Config(format!("FR configs share seed {}", a.seed)));
    }
    if a.width == b.width && a.depth == b.depth && a.d_id == b.d_id {
        return Err(Error::Config("FR configs share the same architecture".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct FrArch {
    stem: Conv2d,
    stages: Vec<Conv2d>,
    head: Linear,
    classes: usize,
    d_id: usize,
    logit_scale: f64,
}

impl FrArch {
    fn new(cfg: &FREmbedderConfig) -> Self {
        let w = cfg.width;
        let stem = Conv2d::new("fr.stem", 3, w, 3, 1);
        let mut stages = Vec::new();
        let mut ch = w;
        for i in 0..cfg.depth {
            let out = w << (i + 1).min(3);
            stages.push(Conv2d::new(format!("fr.s{i}.conv"), ch, out, 3, 2));
            ch = out;
        }
        FrArch {
            stem,
            stages,
            head: Linear::new("fr.head", ch, cfg.d_id),
            classes: cfg.identity_count,
            d_id: cfg.d_id,
            logit_scale: cfg.logit_scale,
        }
    }

    fn init(&self, ps: &mut ParamStore<f32>, seed: u64) {
        let mut rng = rng_for(seed, "fr-init");
        self.stem.init(ps, &mut rng, 1.0);
        for c in &self.stages {
            c.init(ps, &mut rng, 1.0);
        }
        self.head.init(ps, &mut rng, 1.0);
        let std = 1.0 / (self.d_id as f64).sqrt();
        ps.insert("fr.cls.w", crate::nn::normal(&mut rng, &[self.d_id, self.classes], std));
    }
}

/// Outputs of one FR forward pass.
pub struct FrForward {
    /// Un-normalized penultimate activation `[B, d_id]`.
    pub raw_embedding: Var,
    /// Trunk activations, stem first.
    pub features: Vec<Var>,
}

fn global_avg_pool<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let flat = g.reshape(x, &[b, c, hw]);
    let ones = g.input(Tensor::full(&[1, hw, 1], T::lit(1.0 / hw as f64)));
    let pooled = g.matmul(flat, ones, false, false);
    g.reshape(pooled, &[b, c])
}

fn forward_arch<T: Float>(arch: &FrArch, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> FrForward {
    let mut features = Vec::with_capacity(arch.stages.len() + 1);
    // no normalization: per-sample statistics would wash out absolute colour,
    // which carries much of the identity signal
    let h = arch.stem.forward(g, ps, x);
    let mut h = g.leaky_relu(h, 0.2);
    features.push(h);
    for conv in &arch.stages {
        let y = conv.forward(g, ps, h);
        h = g.leaky_relu(y, 0.2);
        features.push(h);
    }
    let pooled = global_avg_pool(g, h);
    let raw_embedding = arch.head.forward(g, ps, pooled);
    FrForward { raw_embedding, features }
}

/// Trained, frozen face-recognition embedder.
#[derive(Clone, Debug)]
pub struct FREmbedder {
    pub config: FREmbedderConfig,
    pub params: ParamStore<f32>,
    pub train_accuracy: f64,
    arch: FrArch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrManifest {
    pub kind: String,
    pub config: FREmbedderConfig,
    pub train_accuracy: f64,
    pub class_count: usize,
}

/// Result of a threshold verification.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verification {
    pub accept: bool,
    pub score: f64,
}

impl FREmbedder {
    /// Untrained embedder with initialized weights.
    pub fn init(cfg: &FREmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = FrArch::new(cfg);
        let mut params = ParamStore::new();
        arch.init(&mut params, cfg.seed);
        Ok(FREmbedder { config: cfg.clone(), params, train_accuracy: 0.0, arch })
    }

    pub fn role(&self) -> FrRole {
        self.config.role
    }

    pub fn dim(&self) -> usize {
        self.config.d_id
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    /// Record the FR forward pass on `g` using parameters `ps` (which may be a
    /// cast of [`FREmbedder::params`]). Parameters are bound as constants
    /// unless `g` marks `fr.` trainable.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, images: Var) -> FrForward {
        forward_arch(&self.arch, g, ps, images)
    }

    fn check_image(&self, image: &Tensor<f32>) -> Result<()> {
        let r = self.config.resolution;
        if image.shape() != [3, r, r] {
            return Err(Error::Shape(format!(
                "{} expects a [3, {r}, {r}] image, got {:?}",
                self.config.role,
                image.shape()
            )));
        }
        Ok(())
    }

    fn stack(&self, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
        for im in images {
            self.check_image(im)?;
        }
        let r = self.config.resolution;
        let parts: Vec<Tensor<f32>> = images.iter().map(|t| (*t).clone().reshape(&[1, 3, r, r])).collect::<Result<_>>()?;
        Tensor::cat0(&parts.iter().collect::<Vec<_>>())
    }

    pub fn embed(&self, image: &Tensor<f32>) -> Result<IdentityEmbedding> {
        Ok(self.embed_batch(&[image])?.remove(0))
    }

    pub fn embed_batch(&self, images: &[&Tensor<f32>]) -> Result<Vec<IdentityEmbedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let mut g = Graph::<f32>::new();
            let x = g.input(self.stack(chunk)?);
            let fwd = self.forward(&mut g, &self.params, x);
            let e = g.l2_normalize(fwd.raw_embedding);
            for row in g.value(e).data().chunks(self.config.d_id) {
                out.push(IdentityEmbedding { vector: row.to_vec(), source: self.config.role });
            }
        }
        Ok(out)
    }

    /// Trunk activations per image: one tensor per layer, batch-major.
    pub fn trunk_features(&self, images: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let mut per_layer: Vec<Vec<Tensor<f32>>> = Vec::new();
        for chunk in images.chunks(EMBED_CHUNK) {
            let mut g = Graph::<f32>::new();
            let x = g.input(self.stack(chunk)?);
            let fwd = self.forward(&mut g, &self.params, x);
            if per_layer.is_empty() {
                per_layer = vec![Vec::new(); fwd.features.len()];
            }
            for (l, f) in fwd.features.iter().enumerate() {
                per_layer[l].push(g.value(*f).clone());
            }
        }
        per_layer.iter().map(|parts| Tensor::cat0(&parts.iter().collect::<Vec<_>>())).collect()
    }

    /// Global-average-pooled deepest trunk activation, one row per image.
    pub fn pooled_features(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let mut g = Graph::<f32>::new();
            let x = g.input(self.stack(chunk)?);
            let fwd = self.forward(&mut g, &self.params, x);
            let last = *fwd.features.last().expect("at least the stem");
            let pooled = global_avg_pool(&mut g, last);
            let c = g.shape(pooled)[1];
            out.extend(g.value(pooled).data().chunks(c).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    fn logits<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, raw: Var) -> Var {
        let e = g.l2_normalize(raw);
        let w = g.param(ps, "fr.cls.w");
        // cls.w is [d_id, K]; normalize class prototypes column-wise
        let wt = g.reshape(w, &[self.arch.d_id, self.arch.classes]);
        let proto = transpose_normalize(g, wt);
        let cos = g.matmul(e, proto, false, true);
        g.scale(cos, self.arch.logit_scale)
    }

    /// Closed-set top-1 accuracy over `records`.
    pub fn accuracy(&self, records: &[FaceRecord]) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::Validation("accuracy over an empty record set".into()));
        }
        let mut correct = 0usize;
        for chunk in records.chunks(EMBED_CHUNK) {
            let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|r| &r.image).collect();
            let mut g = Graph::<f32>::new();
            let x = g.input(self.stack(&imgs)?);
            let fwd = self.forward(&mut g, &self.params, x);
            let logits = self.logits(&mut g, &self.params, fwd.raw_embedding);
            let k = self.arch.classes;
            for (row, r) in g.value(logits).data().chunks(k).zip(chunk) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if pred == r.identity_id as usize {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / records.len() as f64)
    }

    pub fn manifest(&self) -> FrManifest {
        FrManifest {
            kind: "face-recognizer".into(),
            config: self.config.clone(),
            train_accuracy: self.train_accuracy,
            class_count: self.config.identity_count,
        }
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        checkpoint::save(path, &self.manifest(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, params): (FrManifest, _) = checkpoint::load(path)?;
        if m.kind != "face-recognizer" {
            return Err(Error::Checkpoint(format!("{} is a `{}` checkpoint", path.display(), m.kind)));
        }
        let arch = FrArch::new(&m.config);
        let mut expected = ParamStore::new();
        arch.init(&mut expected, 0);
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::State(format!("checkpoint lacks weights for `{name}`"))),
            }
        }
        Ok(FREmbedder { config: m.config, params, train_accuracy: m.train_accuracy, arch })
    }
}

/// `[D, K]` → `[K, D]` with unit rows, recorded on the tape.
fn transpose_normalize<T: Float>(g: &mut Graph<T>, w: Var) -> Var {
    let s = g.shape(w).to_vec();
    let eye = g.input(identity_matrix::<T>(s[1]));
    let wt = g.matmul(eye, w, false, true);
    g.l2_normalize(wt)
}

fn identity_matrix<T: Float>(n: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = T::one();
    }
    t
}

/// Train a classifier over `identity_id` with a cosine-softmax head and
/// freeze it. Fails the quality gate below [`MIN_TRAIN_ACCURACY`].
pub fn train_fr(records: &[FaceRecord], cfg: &FREmbedderConfig) -> Result<FREmbedder> {
    cfg.validate()?;
    let distinct: std::collections::BTreeSet<u32> = records.iter().map(|r| r.identity_id).collect();
    if distinct.len() < 2 {
        return Err(Error::Validation(format!(
            "face recognizer training needs at least 2 identities, got {}",
            distinct.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| r.identity_id as usize >= cfg.identity_count) {
        return Err(Error::Validation(format!(
            "identity {} is outside the configured {} classes",
            r.identity_id, cfg.identity_count
        )));
    }
    let mut model = FREmbedder::init(cfg)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let mut order: Vec<usize> = (0..records.len()).collect();
    let total_steps = (cfg.epochs * records.len().div_ceil(cfg.batch_size)).max(1);
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed ^ epoch as u64, "fr-epoch");
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &records[i].image).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| records[i].identity_id as usize).collect();
            let mut g = Graph::<f32>::with_trainable(&["fr."]);
            let x = g.input(model.stack(&imgs)?);
            let fwd = model.forward(&mut g, &model.params, x);
            let logits = model.logits(&mut g, &model.params, fwd.raw_embedding);
            let loss = g.cross_entropy(logits, &labels);
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("FR cross-entropy became {lv} in epoch {epoch}")));
            }
            total += lv as f64;
            batches += 1;
            let grads = g.backward(loss);
            let progress = opt.steps() as f64 / total_steps as f64;
            opt.cfg.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.step(&mut model.params, &g.param_grads(&grads))?;
        }
        log::info!("{} epoch {epoch}: loss {:.4}", cfg.role, total / batches.max(1) as f64);
    }
    model.train_accuracy = model.accuracy(records)?;
    log::info!("{} training accuracy {:.4}", cfg.role, model.train_accuracy);
    if model.train_accuracy < MIN_TRAIN_ACCURACY {
        return Err(Error::QualityGate(format!(
            "{} reached top-1 training accuracy {:.3} < {MIN_TRAIN_ACCURACY} after {} epochs",
            cfg.role, model.train_accuracy, cfg.epochs
        )));
    }
    Ok(model)
}

/// Accept iff cosine score is strictly greater than `tau`.
pub fn verify_pair(model: &FREmbedder, a: &Tensor<f32>, b: &Tensor<f32>, tau: f64) -> Result<Verification> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::Validation(format!("threshold {tau} outside [-1, 1]")));
    }
    let e = model.embed_batch(&[a, b])?;
    let score = e[0].cosine(&e[1]);
    Ok(Verification { accept: decide(score, tau), score })
}

pub fn decide(score: f64, tau: f64) -> bool {
    score > tau
}

/// Mean genuine and mean impostor cosine over all unordered record pairs.
pub fn pair_statistics(model: &FREmbedder, records: &[FaceRecord]) -> Result<(f64, f64)> {
    let imgs: Vec<&Tensor<f32>> = records.iter().map(|r| &r.image).collect();
    let emb = model.embed_batch(&imgs)?;
    let (mut gs, mut gn, mut is, mut inn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            let c = emb[i].cosine(&emb[j]);
            if records[i].identity_id == records[j].identity_id {
                gs += c;
                gn += 1;
            } else {
                is += c;
                inn += 1;
            }
        }
    }
    if gn == 0 || inn == 0 {
        return Err(Error::Validation("need both genuine and impostor pairs".into()));
    }
    Ok((gs / gn as f64, is / inn as f64))
}

/// Anything that maps images to feature vectors (FR backends, feature nets).
pub trait Embedder: Sync {
    fn embed_images(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f32>>>;
}

/// Identity embeddings as features.
pub struct IdentityFeatures<'a>(pub &'a FREmbedder);

impl Embedder for IdentityFeatures<'_> {
    fn embed_images(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        Ok(self.0.embed_batch(images)?.into_iter().map(|e| e.vector).collect())
    }
}

/// Pooled trunk activations as features (default Fréchet embedder).
pub struct PooledTrunk<'a>(pub &'a FREmbedder);

impl Embedder for PooledTrunk<'_> {
    fn embed_images(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        self.0.pooled_features(images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_record, variation_seed, DataConfig, ToyIdentitySpec};

    fn records(ids: u32, vars: usize, res: usize) -> Vec<FaceRecord> {
        let cfg = DataConfig { resolution: res, ..DataConfig::default() };
        (0..ids)
            .flat_map(|id| (0..vars).map(move |v| (id, v)))
            .map(|(id, v)| generate_record(&ToyIdentitySpec::new(id, 0), variation_seed(0, id, v), &cfg).unwrap())
            .collect()
    }

    fn small_cfg(ids: usize) -> FREmbedderConfig {
        FREmbedderConfig { epochs: 30, batch_size: 10, ..FREmbedderConfig::for_role(FrRole::Train, 32, ids) }
    }

    #[test]
    fn two_identities_are_separated_perfectly() {
        let recs = records(2, 10, 32);
        let fr = train_fr(&recs, &small_cfg(2)).unwrap();
        assert_eq!(fr.train_accuracy, 1.0);
        let e = fr.embed(&recs[0].image).unwrap();
        assert_eq!(e.vector.len(), DEFAULT_ID_DIM);
        let norm: f64 = e.vector.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(e, fr.embed(&recs[0].image).unwrap());
    }

    #[test]
    fn verification_is_strict() {
        let recs = records(2, 2, 32);
        let fr = FREmbedder::init(&small_cfg(2)).unwrap();
        let v = verify_pair(&fr, &recs[0].image, &recs[0].image, 0.5).unwrap();
        assert!(v.accept);
        assert!((v.score - 1.0).abs() < 1e-6);
        assert!(!decide(0.3, 0.3));
        assert!(decide(0.30001, 0.3));
        assert!(verify_pair(&fr, &recs[0].image, &recs[1].image, 1.5).is_err());
    }

    #[test]
    fn wrong_resolution_is_shape_error() {
        let fr = FREmbedder::init(&small_cfg(2)).unwrap();
        let img = Tensor::zeros(&[3, 64, 64]);
        assert!(matches!(fr.embed(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn single_identity_rejected() {
        let recs = records(1, 3, 32);
        assert!(train_fr(&recs, &small_cfg(2)).is_err());
    }

    #[test]
    fn independence_rules() {
        let t = FREmbedderConfig::for_role(FrRole::Train, 64, 10);
        let e = FREmbedderConfig::for_role(FrRole::Eval, 64, 10);
        check_independent(&t, &e).unwrap();
        assert!(check_independent(&t, &FREmbedderConfig { seed: 1, ..t.clone() }).is_err());
        assert!(check_independent(&t, &FREmbedderConfig { seed: t.seed, width: 20, ..t.clone() }).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let fr = FREmbedder::init(&small_cfg(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fr.safetensors");
        fr.save(&p).unwrap();
        let back = FREmbedder::load(&p).unwrap();
        assert_eq!(back.params, fr.params);
        let img = &records(1, 1, 32)[0].image;
        assert_eq!(back.embed(img).unwrap(), fr.embed(img).unwrap());
    }
}

//! Alternating adversarial training of the synthesizer.
//!
//! Each iteration runs one generator forward on a reconstruction batch, one
//! discriminator update on (real, detached fake) and one generator update.
//! Both updates use the discriminator as it was at the start of the
//! iteration. All randomness is derived from `(seed, iteration)`, so runs are
//! bit-reproducible and resumable.

use std::collections::VecDeque;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::{one_hot, FaceRecord, SemanticMask};
use crate::error::{Error, Result};
use crate::identity::{FREmbedder, IdentityEmbedding};
use crate::losses::{
    adversarial_d_graph, adversarial_g_graph, feature_matching_graph, identity_loss_graph, perceptual_loss_graph,
    total_objective, total_objective_graph, LossParts, LossWeights,
};
use crate::model::{CondItem, ModelConfig, Synthesizer, DISCRIMINATOR_SCOPE, GENERATOR_SCOPES};
use crate::nn::{rng_for, splitmix, Adam, AdamConfig, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub divergence_factor: f64,
    pub divergence_patience: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 16,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            log_every: 100,
            divergence_factor: 10.0,
            divergence_patience: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, log_every and checkpoint_every must be positive".into()));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }
}

/// Aborts when `L_adv_D` stays above `factor ×` the median of recent
/// ordinary values for `patience` consecutive iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceGuard {
    pub factor: f64,
    pub patience: u64,
    pub window: usize,
    pub history: VecDeque<f64>,
    pub consecutive: u64,
}

const GUARD_WARMUP: usize = 50;

impl DivergenceGuard {
    pub fn new(factor: f64, patience: u64) -> Self {
        DivergenceGuard { factor, patience, window: 500, history: VecDeque::new(), consecutive: 0 }
    }

    pub fn median(&self) -> Option<f64> {
        if self.history.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = self.history.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    /// Record one value; an error once the patience is exhausted.
    pub fn observe(&mut self, iteration: u64, loss_d: f64) -> Result<()> {
        let exceeded = self.history.len() >= GUARD_WARMUP
            && self.median().is_some_and(|m| loss_d > self.factor * m.max(f64::MIN_POSITIVE));
        if exceeded {
            self.consecutive += 1;
            if self.consecutive >= self.patience {
                return Err(Error::Divergence(format!(
                    "L_adv_D = {loss_d:.4} at iteration {iteration} has exceeded {}× its trailing median {:.4} for {} consecutive iterations",
                    self.factor,
                    self.median().unwrap_or(0.0),
                    self.consecutive
                )));
            }
        } else {
            self.consecutive = 0;
            // diverged values are kept out so the baseline stays meaningful
            self.history.push_back(loss_d);
            if self.history.len() > self.window {
                self.history.pop_front();
            }
        }
        Ok(())
    }
}

/// Losses of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub adv_g: f64,
    pub adv_d: f64,
    pub fm: f64,
    pub prc: f64,
    pub id: f64,
    pub total: f64,
}

/// One metrics-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    #[serde(rename = "L_adv_G")]
    pub adv_g: f64,
    #[serde(rename = "L_adv_D")]
    pub adv_d: f64,
    #[serde(rename = "L_FM")]
    pub fm: f64,
    #[serde(rename = "L_prc")]
    pub prc: f64,
    #[serde(rename = "L_id")]
    pub id: f64,
    /// Perceptual loss of a fixed probe reconstruction, at checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_prc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainingManifest {
    config: TrainConfig,
    guard: DivergenceGuard,
}

/// Everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Synthesizer,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iteration: u64,
    pub guard: DivergenceGuard,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState {
            model: Synthesizer::new(model_cfg)?,
            opt_g: Adam::new(cfg.adam(cfg.lr_g)),
            opt_d: Adam::new(cfg.adam(cfg.lr_d)),
            iteration: 0,
            guard: DivergenceGuard::new(cfg.divergence_factor, cfg.divergence_patience),
            config: cfg.clone(),
        })
    }

    pub fn save(&self, path: &Path, fr_digest: &str) -> Result<String> {
        let mut extra = ParamStore::new();
        self.opt_g.export("opt_g", &mut extra);
        self.opt_d.export("opt_d", &mut extra);
        let training = serde_json::to_value(TrainingManifest { config: self.config.clone(), guard: self.guard.clone() })?;
        let manifest = self.model.manifest(self.iteration, fr_digest, Some(training));
        self.model.save(path, &manifest, Some(&extra))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (model, manifest, extra) = Synthesizer::load(path)?;
        let training: TrainingManifest = manifest
            .training
            .ok_or_else(|| Error::Checkpoint(format!("{} carries no training state", path.display())))
            .and_then(|v| serde_json::from_value(v).map_err(Error::from))?;
        let cfg = training.config;
        Ok(TrainState {
            model,
            opt_g: Adam::import(cfg.adam(cfg.lr_g), "opt_g", &extra),
            opt_d: Adam::import(cfg.adam(cfg.lr_d), "opt_d", &extra),
            iteration: manifest.iteration,
            guard: training.guard,
            config: cfg,
        })
    }
}

/// Batch indices for one iteration: a pure function of `(seed, iteration)`.
pub fn batch_indices(seed: u64, iteration: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = rng_for(seed ^ splitmix(iteration.wrapping_add(1)), "batch");
    rand::seq::index::sample(&mut rng, n, batch.min(n)).into_vec()
}

/// Drives training over a fixed record set with a frozen train-FR.
pub struct Trainer<'a> {
    pub state: TrainState,
    fr: &'a FREmbedder,
    records: &'a [FaceRecord],
    masks: Vec<SemanticMask>,
    identities: Vec<IdentityEmbedding>,
    fr_digest: String,
}

/// Outputs of a completed run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub final_losses: StepLosses,
    pub checkpoints: Vec<(u64, PathBuf, String)>,
    pub fr_digest_before: String,
    pub fr_digest_after: String,
    pub seconds: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(state: TrainState, records: &'a [FaceRecord], fr: &'a FREmbedder) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("no training records".into()));
        }
        let r = state.model.resolution();
        if fr.resolution() != r {
            return Err(Error::Shape(format!("train-FR runs at {} px, model at {r} px", fr.resolution())));
        }
        if fr.dim() != state.model.config.d_id {
            return Err(Error::Shape(format!("train-FR emits {} dims, model expects {}", fr.dim(), state.model.config.d_id)));
        }
        let masks = records
            .iter()
            .map(|rec| one_hot(&rec.mask, state.model.classes()))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<&Tensor<f32>> = records.iter().map(|r| &r.image).collect();
        let identities = fr.embed_batch(&images)?;
        Ok(Trainer { state, fr, records, masks, identities, fr_digest: fr.params.digest() })
    }

    pub fn fr_digest(&self) -> &str {
        &self.fr_digest
    }

    /// One D update and one G update.
    pub fn step(&mut self) -> Result<StepLosses> {
        let st = &mut self.state;
        let cfg = &st.config;
        let idx = batch_indices(cfg.seed, st.iteration, self.records.len(), cfg.batch_size);
        let b = idx.len();
        let items: Vec<CondItem<'_>> = idx
            .iter()
            .map(|&i| CondItem {
                mask: &self.masks[i],
                style_image: &self.records[i].image,
                style_mask: &self.masks[i],
                identity: &self.identities[i],
            })
            .collect();
        let model = &st.model;
        let batch = model.prepare(&items)?;
        let r = model.resolution();
        let reals: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.records[i].image).collect();
        let real = Tensor::cat0(
            &reals
                .iter()
                .map(|t| (*t).clone().reshape(&[1, 3, r, r]))
                .collect::<Result<Vec<_>>>()?
                .iter()
                .collect::<Vec<_>>(),
        )?;

        // generator forward
        let mut gg = Graph::<f32>::with_trainable(&GENERATOR_SCOPES);
        let gen = model.forward(&mut gg, &model.params, &batch);
        let fake = gg.value(gen.image).clone();

        // discriminator loss on (real, detached fake) with the current D
        let mut gd = Graph::<f32>::with_trainable(&[DISCRIMINATOR_SCOPE]);
        let real_v = gd.input(real);
        let fake_v = gd.input(fake);
        let masks_v = gd.input(batch.masks.clone());
        let real_s = model.discriminate_graph(&mut gd, &model.params, real_v, masks_v);
        let fake_s = model.discriminate_graph(&mut gd, &model.params, fake_v, masks_v);
        let rl: Vec<Var> = real_s.iter().map(|s| s.logits).collect();
        let fl: Vec<Var> = fake_s.iter().map(|s| s.logits).collect();
        let loss_d = adversarial_d_graph(&mut gd, &rl, &fl);
        let adv_d = gd.scalar(loss_d) as f64;
        if !adv_d.is_finite() {
            return Err(Error::Numeric(format!("loss term L_adv_D is {adv_d} at iteration {}", st.iteration)));
        }
        let real_feats: Vec<Vec<Tensor<f32>>> =
            real_s.iter().map(|s| s.features.iter().map(|f| gd.value(*f).clone()).collect()).collect();
        let d_grads = gd.param_grads(&gd.backward(loss_d));
        drop(gd);

        // generator losses
        let masks_g = gg.input(batch.masks.clone());
        let fake_g = model.discriminate_graph(&mut gg, &model.params, gen.image, masks_g);
        let fl_g: Vec<Var> = fake_g.iter().map(|s| s.logits).collect();
        let adv_g = adversarial_g_graph(&mut gg, &fl_g);
        let ff: Vec<Vec<Var>> = fake_g.iter().map(|s| s.features.clone()).collect();
        let fm = feature_matching_graph(&mut gg, &real_feats, &ff);
        let w = cfg.weights;
        let (prc, id) = if w.prc > 0.0 || w.id > 0.0 {
            let fwd = self.fr.forward(&mut gg, &self.fr.params, gen.image);
            let ref_feats = self.fr.trunk_features(&reals)?;
            let prc = perceptual_loss_graph(&mut gg, &fwd.features, &ref_feats);
            let mut unit = Vec::with_capacity(b * self.fr.dim());
            for &i in &idx {
                unit.extend_from_slice(&self.identities[i].vector);
            }
            let unit = Tensor::new(&[b, self.fr.dim()], unit)?;
            let id = identity_loss_graph(&mut gg, fwd.raw_embedding, &unit);
            (prc, id)
        } else {
            let z = gg.input(Tensor::scalar(0.0));
            (z, z)
        };
        let total = total_objective_graph(&mut gg, adv_g, fm, prc, id, &w);
        let parts = LossParts {
            adv_g: gg.scalar(adv_g) as f64,
            fm: gg.scalar(fm) as f64,
            prc: gg.scalar(prc) as f64,
            id: gg.scalar(id) as f64,
        };
        let total_v = total_objective(&parts, &w)
            .map_err(|e| Error::Numeric(format!("{e} at iteration {}", st.iteration)))?;
        let g_grads = gg.param_grads(&gg.backward(total));
        drop(gg);

        st.opt_g.step(&mut st.model.params, &g_grads)?;
        st.opt_d.step(&mut st.model.params, &d_grads)?;
        st.guard.observe(st.iteration, adv_d)?;
        st.iteration += 1;
        Ok(StepLosses { adv_g: parts.adv_g, adv_d, fm: parts.fm, prc: parts.prc, id: parts.id, total: total_v })
    }

    /// Perceptual loss of reconstructing the first record with itself.
    pub fn probe_perceptual(&self) -> Result<f64> {
        let model = &self.state.model;
        let item = CondItem {
            mask: &self.masks[0],
            style_image: &self.records[0].image,
            style_mask: &self.masks[0],
            identity: &self.identities[0],
        };
        let out = model.generate_prepared(&model.prepare(&[item])?)?.remove(0);
        crate::losses::perceptual_loss(&out.image, &self.records[0].image, self.fr)
    }

    /// Run to `config.iterations`, writing checkpoints and metrics under
    /// `out_dir` when given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainReport> {
        let start = Instant::now();
        let before = self.fr.params.digest();
        let mut log = match out_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(Error::io(d))?;
                let p = d.join("metrics.jsonl");
                Some((OpenOptions::new().create(true).append(true).open(&p).map_err(Error::io(&p))?, p))
            }
            None => None,
        };
        let mut window = Vec::new();
        let mut last = StepLosses::default();
        let mut checkpoints = Vec::new();
        while self.state.iteration < self.state.config.iterations {
            last = self.step()?;
            window.push(last);
            let it = self.state.iteration;
            let cfg = &self.state.config;
            let at_ckpt = it.is_multiple_of(cfg.checkpoint_every) || it == cfg.iterations;
            if it.is_multiple_of(cfg.log_every) || at_ckpt {
                let n = window.len() as f64;
                let avg = |f: fn(&StepLosses) -> f64| window.iter().map(f).sum::<f64>() / n;
                let rec = MetricsRecord {
                    iteration: it,
                    adv_g: avg(|l| l.adv_g),
                    adv_d: avg(|l| l.adv_d),
                    fm: avg(|l| l.fm),
                    prc: avg(|l| l.prc),
                    id: avg(|l| l.id),
                    probe_prc: if at_ckpt { Some(self.probe_perceptual()?) } else { None },
                };
                log::info!(
                    "iter {it}: L_adv_G {:.3} L_adv_D {:.3} L_FM {:.3} L_prc {:.3} L_id {:.3} ({:.0}s)",
                    rec.adv_g,
                    rec.adv_d,
                    rec.fm,
                    rec.prc,
                    rec.id,
                    start.elapsed().as_secs_f64()
                );
                if let Some((f, p)) = log.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(Error::io(p.as_path()))?;
                }
                window.clear();
            }
            if at_ckpt {
                if let Some(d) = out_dir {
                    let p = checkpoint_path(d, it);
                    let hash = self.state.save(&p, &self.fr_digest)?;
                    fs::copy(&p, d.join("latest.safetensors")).map_err(Error::io(&p))?;
                    checkpoints.push((it, p, hash));
                }
            }
        }
        if let Some((f, p)) = log.as_mut() {
            f.flush().map_err(Error::io(p.as_path()))?;
        }
        let after = self.fr.params.digest();
        if before != after {
            return Err(Error::State("train-FR weights changed during training".into()));
        }
        Ok(TrainReport {
            final_losses: last,
            checkpoints,
            fr_digest_before: before,
            fr_digest_after: after,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.safetensors"))
}

/// Read a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Convenience: fresh state, full run.
pub fn train(
    records: &[FaceRecord],
    fr: &FREmbedder,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(TrainState, TrainReport)> {
    let state = TrainState::new(model_cfg, cfg)?;
    let mut t = Trainer::new(state, records, fr)?;
    let report = t.run(out_dir)?;
    Ok((t.state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_record, variation_seed, DataConfig, ToyIdentitySpec};
    use crate::identity::{FREmbedderConfig, FrRole};

    fn setup() -> (Vec<FaceRecord>, FREmbedder) {
        let cfg = DataConfig { resolution: 32, ..DataConfig::default() };
        let recs: Vec<FaceRecord> = (0..4u32)
            .flat_map(|id| (0..8).map(move |v| (id, v)))
            .map(|(id, v)| generate_record(&ToyIdentitySpec::new(id, 0), variation_seed(0, id, v), &cfg).unwrap())
            .collect();
        let fr = FREmbedder::init(&FREmbedderConfig::for_role(FrRole::Train, 32, 4)).unwrap();
        (recs, fr)
    }

    fn small() -> TrainConfig {
        TrainConfig { iterations: 10, batch_size: 4, checkpoint_every: 5, log_every: 5, ..TrainConfig::default() }
    }

    #[test]
    fn smoke_run_writes_loadable_checkpoint_and_keeps_fr_frozen() {
        let (recs, fr) = setup();
        let dir = tempfile::tempdir().unwrap();
        let (state, report) = train(&recs, &fr, ModelConfig::new(32, 6, 0), &small(), Some(dir.path())).unwrap();
        assert_eq!(state.iteration, 10);
        assert_eq!(report.checkpoints.len(), 2);
        assert_eq!(report.fr_digest_before, report.fr_digest_after);
        let back = TrainState::load(&report.checkpoints[1].1).unwrap();
        assert_eq!(back.iteration, 10);
        assert_eq!(back.model.params, state.model.params);
        let metrics = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.len(), 2);
        assert!(metrics.iter().all(|m| m.probe_prc.is_some()));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (recs, fr) = setup();
        let cfg = TrainConfig { iterations: 6, ..small() };
        let (full, _) = train(&recs, &fr, ModelConfig::new(32, 6, 0), &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let half = TrainConfig { iterations: 3, ..cfg.clone() };
        let (st, _) = train(&recs, &fr, ModelConfig::new(32, 6, 0), &half, None).unwrap();
        let p = dir.path().join("mid.safetensors");
        st.save(&p, "x").unwrap();
        let mut resumed = TrainState::load(&p).unwrap();
        resumed.config.iterations = 6;
        let mut t = Trainer::new(resumed, &recs, &fr).unwrap();
        t.run(None).unwrap();
        assert_eq!(t.state.model.params, full.model.params);
    }

    #[test]
    fn guard_trips_after_patience() {
        let mut g = DivergenceGuard::new(10.0, 5);
        for i in 0..60 {
            g.observe(i, 1.0).unwrap();
        }
        for i in 0..4 {
            g.observe(60 + i, 50.0).unwrap();
        }
        g.observe(64, 1.0).unwrap();
        assert_eq!(g.consecutive, 0);
        for i in 0..4 {
            g.observe(65 + i, 50.0).unwrap();
        }
        assert!(matches!(g.observe(69, 50.0), Err(Error::Divergence(_))));
    }

    #[test]
    fn batch_indices_are_stateless_and_distinct() {
        let a = batch_indices(7, 3, 100, 16);
        assert_eq!(a, batch_indices(7, 3, 100, 16));
        assert_ne!(a, batch_indices(7, 4, 100, 16));
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 16);
        assert_eq!(batch_indices(1, 0, 3, 16).len(), 3);
    }
}

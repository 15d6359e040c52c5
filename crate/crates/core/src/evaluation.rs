//! Measurement protocol: reconstruction cosine suite, FAR-calibrated
//! threshold, impersonation success rate, Fréchet feature distance,
//! perceptual distance and the style-swap sweep.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{one_hot, FaceRecord, SemanticMask};
use crate::encoders::{ConditioningTokens, MaskDescriptor, StyleCodeSet};
use crate::error::{Error, Result};
use crate::identity::{cosine, Embedder, FREmbedder, IdentityEmbedding};
use crate::losses::FeatureNet;
use crate::model::{CondItem, Synthesizer};
use crate::nn::rng_for;

pub const DEFAULT_FAR: f64 = 0.01;
pub const DEFAULT_ATTACK_PAIRS: usize = 500;
pub const DEFAULT_IMPOSTOR_PAIRS: usize = 2000;

/// Pairwise (cascade) summation; order-stable and accurate.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Embeds each record's image with `fr`, in record order.
pub fn embed_records(fr: &FREmbedder, records: &[FaceRecord]) -> Result<Vec<IdentityEmbedding>> {
    let images: Vec<&Tensor<f32>> = records.iter().map(|r| &r.image).collect();
    fr.embed_batch(&images)
}

fn masks_of(records: &[FaceRecord], classes: usize) -> Result<Vec<SemanticMask>> {
    records.iter().map(|r| one_hot(&r.mask, classes)).collect()
}

const GEN_CHUNK: usize = 16;

fn generate_items(model: &Synthesizer, items: &[CondItem<'_>]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(GEN_CHUNK) {
        let batch = model.prepare(chunk)?;
        out.extend(model.generate_prepared(&batch)?.into_iter().map(|o| o.image));
    }
    Ok(out)
}

fn generate_tokens(model: &Synthesizer, items: &[(&MaskDescriptor, &ConditioningTokens)]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(GEN_CHUNK) {
        out.extend(model.generate_batch(chunk)?.into_iter().map(|o| o.image));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub index: usize,
    pub identity_id: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSuite {
    pub mean: f64,
    pub scores: Vec<RecordScore>,
}

/// Reconstructs every record from its own mask, styles and identity and
/// scores `cos(E(x), E(x̂))` under `eval_fr`.
pub fn cosine_suite(
    model: &Synthesizer,
    train_fr: &FREmbedder,
    eval_fr: &FREmbedder,
    records: &[FaceRecord],
) -> Result<CosineSuite> {
    if records.is_empty() {
        return Err(Error::Validation("cosine suite needs at least one record".into()));
    }
    let recon = reconstruct_all(model, train_fr, records)?;
    let originals = embed_records(eval_fr, records)?;
    let refs: Vec<&Tensor<f32>> = recon.iter().collect();
    let generated = eval_fr.embed_batch(&refs)?;
    let scores: Vec<RecordScore> = records
        .iter()
        .enumerate()
        .map(|(i, r)| RecordScore { index: i, identity_id: r.identity_id, score: originals[i].cosine(&generated[i]) })
        .collect();
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    Ok(CosineSuite { mean: mean(&values), scores })
}

/// Own-identity reconstructions of `records`.
pub fn reconstruct_all(model: &Synthesizer, train_fr: &FREmbedder, records: &[FaceRecord]) -> Result<Vec<Tensor<f32>>> {
    let masks = masks_of(records, model.classes())?;
    let ids = embed_records(train_fr, records)?;
    let items: Vec<CondItem<'_>> = (0..records.len())
        .map(|i| CondItem { mask: &masks[i], style_image: &records[i].image, style_mask: &masks[i], identity: &ids[i] })
        .collect();
    generate_items(model, &items)
}

/// Index pair over a record list; the two records belong to different
/// identities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordPair {
    pub first: usize,
    pub second: usize,
}

/// `count` pairs of records with distinct identities, drawn with a fixed
/// seed. Used both for impostor calibration and for attacker/target pairs.
pub fn distinct_identity_pairs(records: &[FaceRecord], count: usize, seed: u64, stream: &str) -> Result<Vec<RecordPair>> {
    let mut ids: Vec<u32> = records.iter().map(|r| r.identity_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Validation(format!(
            "pairs need records from at least two identities, got {}",
            ids.len()
        )));
    }
    let mut rng = rng_for(seed, stream);
    let n = records.len();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if records[a].identity_id != records[b].identity_id {
            out.push(RecordPair { first: a, second: b });
        }
    }
    Ok(out)
}

/// Eval-FR cosine scores of impostor pairs.
pub fn impostor_scores(eval_fr: &FREmbedder, records: &[FaceRecord], pairs: &[RecordPair]) -> Result<Vec<f64>> {
    let emb = embed_records(eval_fr, records)?;
    Ok(pairs.iter().map(|p| emb[p.first].cosine(&emb[p.second])).collect())
}

/// Smallest impostor score `τ` such that the fraction of scores strictly
/// above `τ` is at most `far_target`.
pub fn calibrate_threshold(impostor_scores: &[f64], far_target: f64) -> Result<f64> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::Validation(format!("far_target must lie in (0, 1), got {far_target}")));
    }
    let min = (1.0 / far_target).ceil() as usize;
    if impostor_scores.len() < min {
        return Err(Error::Validation(format!(
            "calibration at FAR {far_target} needs at least {min} impostor pairs, got {}",
            impostor_scores.len()
        )));
    }
    if let Some(bad) = impostor_scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("impostor score {bad} is not finite")));
    }
    let mut s = impostor_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mut i = 0;
    while i < n {
        // first index past the run of values equal to s[i]
        let mut j = i + 1;
        while j < n && s[j] == s[i] {
            j += 1;
        }
        if (n - j) as f64 <= far_target * n as f64 {
            return Ok(s[i]);
        }
        i = j;
    }
    unreachable!("the largest score always satisfies the bound")
}

/// Fraction of scores strictly above `tau`.
pub fn acceptance_rate(scores: &[f64], tau: f64) -> f64 {
    scores.iter().filter(|&&s| s > tau).count() as f64 / scores.len().max(1) as f64
}

fn check_tau(tau: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::Validation(format!("threshold {tau} lies outside [-1, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attacker: usize,
    pub target: usize,
    /// cos(E(x̂), E(x_target)): the decision score.
    pub score_target: f64,
    /// cos(E(x̂), E(x_attacker)), logged for the literal variant.
    pub score_attacker: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub tau: f64,
    pub asr: f64,
    pub outcomes: Vec<AttackOutcome>,
}

fn summarize(tau: f64, outcomes: Vec<AttackOutcome>) -> AttackReport {
    let hits = outcomes.iter().filter(|o| o.success).count();
    AttackReport { tau, asr: hits as f64 / outcomes.len().max(1) as f64, outcomes }
}

/// Precomputed per-record conditioning and embeddings for attack work.
pub struct AttackContext<'a> {
    pub model: &'a Synthesizer,
    pub records: &'a [FaceRecord],
    descriptors: Vec<MaskDescriptor>,
    styles: Vec<StyleCodeSet>,
    train_ids: Vec<IdentityEmbedding>,
    eval_ids: Vec<IdentityEmbedding>,
    eval_fr: &'a FREmbedder,
}

impl<'a> AttackContext<'a> {
    pub fn new(
        model: &'a Synthesizer,
        train_fr: &FREmbedder,
        eval_fr: &'a FREmbedder,
        records: &'a [FaceRecord],
    ) -> Result<Self> {
        let masks = masks_of(records, model.classes())?;
        let descriptors = masks.iter().map(|m| model.embed_mask(m)).collect::<Result<Vec<_>>>()?;
        let styles = records
            .iter()
            .zip(&masks)
            .map(|(r, m)| model.extract_styles(&r.image, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(AttackContext {
            model,
            records,
            descriptors,
            styles,
            train_ids: embed_records(train_fr, records)?,
            eval_ids: embed_records(eval_fr, records)?,
            eval_fr,
        })
    }

    fn check_pair(&self, p: &RecordPair) -> Result<()> {
        let n = self.records.len();
        if p.first >= n || p.second >= n {
            return Err(Error::Validation(format!("pair ({}, {}) out of range for {n} records", p.first, p.second)));
        }
        if self.records[p.first].identity_id == self.records[p.second].identity_id {
            return Err(Error::Validation(format!(
                "attacker and target share identity {}",
                self.records[p.first].identity_id
            )));
        }
        Ok(())
    }

    /// Tokens for attacker `a`'s styles with the classes in `swap` taken
    /// from `t`, plus identity `id`.
    pub fn tokens(&self, a: usize, t: usize, swap: &[usize], id: usize) -> Result<ConditioningTokens> {
        let mut styles = self.styles[a].clone();
        for &c in swap {
            styles.replace_row(c, &self.styles[t]);
        }
        self.model.tokens(&styles, &self.train_ids[id])
    }

    /// Generate `G(m_a, s_{a with swap from t}, id)` for every pair.
    pub fn generate(&self, pairs: &[RecordPair], swap: &[usize], identity_from_target: bool) -> Result<Vec<Tensor<f32>>> {
        let toks = pairs
            .iter()
            .map(|p| {
                self.check_pair(p)?;
                let id = if identity_from_target { p.second } else { p.first };
                self.tokens(p.first, p.second, swap, id)
            })
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<(&MaskDescriptor, &ConditioningTokens)> =
            pairs.iter().zip(&toks).map(|(p, t)| (&self.descriptors[p.first], t)).collect();
        generate_tokens(self.model, &items)
    }

    pub fn score(&self, pairs: &[RecordPair], generated: &[Tensor<f32>], tau: f64) -> Result<AttackReport> {
        check_tau(tau)?;
        let refs: Vec<&Tensor<f32>> = generated.iter().collect();
        let emb = self.eval_fr.embed_batch(&refs)?;
        let outcomes = pairs
            .iter()
            .zip(&emb)
            .map(|(p, e)| {
                let score_target = e.cosine(&self.eval_ids[p.second]);
                AttackOutcome {
                    attacker: p.first,
                    target: p.second,
                    score_target,
                    score_attacker: e.cosine(&self.eval_ids[p.first]),
                    success: score_target > tau,
                }
            })
            .collect();
        Ok(summarize(tau, outcomes))
    }

    pub fn class_count(&self) -> usize {
        self.model.classes()
    }
}

/// Identity-swap attack: attacker mask and styles, target identity.
pub fn attack_success_rate(ctx: &AttackContext<'_>, pairs: &[RecordPair], tau: f64) -> Result<AttackReport> {
    check_tau(tau)?;
    let generated = ctx.generate(pairs, &[], true)?;
    ctx.score(pairs, &generated, tau)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu1, s1) = gaussian_fit(a)?;
    let (mu2, s2) = gaussian_fit(b)?;
    frechet_from_stats(&mu1, &s1, &mu2, &s2)
}

/// Sample mean and unbiased covariance.
pub fn gaussian_fit(xs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if xs.len() < 2 {
        return Err(Error::Validation(format!("Fréchet distance needs at least 2 samples per side, got {}", xs.len())));
    }
    let d = xs[0].len();
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }
    let n = xs.len() as f64;
    let m = DMatrix::from_fn(xs.len(), d, |i, j| xs[i][j]);
    let mu = DVector::from_fn(d, |j, _| pairwise_sum(&xs.iter().map(|x| x[j]).collect::<Vec<_>>()) / n);
    let centered = DMatrix::from_fn(xs.len(), d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1.0);
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the trace of the root
/// taken from the symmetric product `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`.
pub fn frechet_from_stats(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::Shape("Fréchet statistics disagree in dimension".into()));
    }
    let r1 = sym_sqrt(s1);
    let inner = &r1 * s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_root: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    let d = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_root;
    if !d.is_finite() {
        return Err(Error::Numeric(format!("Fréchet distance is {d}")));
    }
    // round-off can leave tiny negatives
    Ok(d.max(0.0))
}

/// Fréchet distance in the feature space of `embedder`.
pub fn frechet_feature_distance(real: &[&Tensor<f32>], fake: &[&Tensor<f32>], embedder: &dyn Embedder) -> Result<f64> {
    let to64 = |v: Vec<Vec<f32>>| v.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect::<Vec<Vec<f64>>>();
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::Validation(format!(
            "Fréchet distance needs at least 2 samples per side, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let a = to64(embedder.embed_images(real)?);
    let b = to64(embedder.embed_images(fake)?);
    frechet_distance(&a, &b)
}

/// Layer-averaged distance between channel-normalized feature maps.
/// Symmetric, zero when the features coincide.
pub fn perceptual_distance(a: &Tensor<f32>, b: &Tensor<f32>, net: &dyn FeatureNet) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("perceptual distance of {:?} vs {:?}", a.shape(), b.shape())));
    }
    let fa = net.features(&[a])?;
    let fb = net.features(&[b])?;
    let mut per_layer = Vec::with_capacity(fa.len());
    for (x, y) in fa.iter().zip(&fb) {
        let s = x.shape();
        let (c, hw) = (s[1], s[2..].iter().product::<usize>());
        let (xd, yd) = (x.data(), y.data());
        let mut acc = Vec::with_capacity(hw);
        for p in 0..hw {
            let norm = |d: &[f32]| (0..c).map(|k| (d[k * hw + p] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (nx, ny) = (norm(xd), norm(yd));
            acc.push((0..c).map(|k| (xd[k * hw + p] as f64 / nx - yd[k * hw + p] as f64 / ny).powi(2)).sum::<f64>());
        }
        per_layer.push(mean(&acc));
    }
    Ok(mean(&per_layer))
}

/// Rows of the style-swap sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SwapSet {
    NoSwap,
    Skin,
    Eyes,
    Eyebrows,
    Mouth,
    Hair,
    FullSwap,
}

impl SwapSet {
    pub const ALL: [SwapSet; 7] =
        [SwapSet::NoSwap, SwapSet::Skin, SwapSet::Eyes, SwapSet::Eyebrows, SwapSet::Mouth, SwapSet::Hair, SwapSet::FullSwap];

    fn class_label(self) -> Option<&'static str> {
        match self {
            SwapSet::Skin => Some("skin"),
            SwapSet::Eyes => Some("eyes"),
            SwapSet::Eyebrows => Some("eyebrows"),
            SwapSet::Mouth => Some("mouth"),
            SwapSet::Hair => Some("hair"),
            SwapSet::NoSwap | SwapSet::FullSwap => None,
        }
    }

    /// Class indices whose styles come from the target.
    pub fn classes(self, class_names: &[String]) -> Result<Vec<usize>> {
        match self {
            SwapSet::NoSwap => Ok(vec![]),
            SwapSet::FullSwap => Ok((0..class_names.len()).collect()),
            s => {
                let label = s.class_label().expect("single-class set");
                class_names
                    .iter()
                    .position(|n| n == label)
                    .map(|c| vec![c])
                    .ok_or_else(|| Error::Validation(format!("class set has no '{label}' label for swap set {s}")))
            }
        }
    }
}

impl fmt::Display for SwapSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for SwapSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SwapSet::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown swap set '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub swap_set: SwapSet,
    pub asr: f64,
    pub perceptual_distance: f64,
    /// Mean absolute pixel difference to the own-identity reconstruction.
    pub pixel_difference: f64,
}

/// Identity swap plus per-class style swaps; distances are measured against
/// the attacker's own-identity reconstruction.
pub fn style_swap_sweep(
    ctx: &AttackContext<'_>,
    pairs: &[RecordPair],
    tau: f64,
    class_names: &[String],
    net: &dyn FeatureNet,
) -> Result<Vec<SweepResult>> {
    check_tau(tau)?;
    if class_names.len() != ctx.class_count() {
        return Err(Error::Validation(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            ctx.class_count()
        )));
    }
    let own = ctx.generate(pairs, &[], false)?;
    let mut rows = Vec::with_capacity(SwapSet::ALL.len());
    for set in SwapSet::ALL {
        let classes = set.classes(class_names)?;
        let gen = ctx.generate(pairs, &classes, true)?;
        let report = ctx.score(pairs, &gen, tau)?;
        let mut prc = Vec::with_capacity(pairs.len());
        let mut pix = Vec::with_capacity(pairs.len());
        for (o, x) in own.iter().zip(&gen) {
            prc.push(perceptual_distance(o, x, net)?);
            pix.push(mean_abs_difference(o, x));
        }
        log::info!("sweep {set}: ASR {:.3}", report.asr);
        rows.push(SweepResult { swap_set: set, asr: report.asr, perceptual_distance: mean(&prc), pixel_difference: mean(&pix) });
    }
    Ok(rows)
}

pub fn mean_abs_difference(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).collect();
    mean(&d)
}

/// Combined metrics document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    #[serde(rename = "C_mean")]
    pub c_mean: Option<f64>,
    pub per_model_scores: serde_json::Map<String, serde_json::Value>,
    pub tau: Option<f64>,
    pub far_target: f64,
    pub asr: Option<f64>,
    pub sweep: Vec<SweepResult>,
}

impl EvalReport {
    pub fn new(checkpoint: &str, far_target: f64) -> Self {
        EvalReport {
            checkpoint: checkpoint.into(),
            c_mean: None,
            per_model_scores: Default::default(),
            tau: None,
            far_target,
            asr: None,
            sweep: vec![],
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(Error::io(path))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepResult]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut text = String::from("swap_set,asr,perceptual_distance\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.swap_set, r.asr, r.perceptual_distance));
    }
    f.write_all(text.as_bytes()).map_err(Error::io(path))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "swap_set,asr,perceptual_distance" {
        return Err(Error::Validation(format!("{}: unexpected header '{header}'", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Validation(format!("{}: bad number '{s}'", path.display())))
            };
            if f.len() != 3 {
                return Err(Error::Validation(format!("{}: bad row '{l}'", path.display())));
            }
            Ok((f[0].to_string(), num(f[1])?, num(f[2])?))
        })
        .collect()
}

/// Eval-FR cosine between two images.
pub fn pair_score(eval_fr: &FREmbedder, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let e = eval_fr.embed_batch(&[a, b])?;
    Ok(cosine(&e[0].vector, &e[1].vector))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(scores: &[f64], far: f64) -> f64 {
        let mut cands = scores.to_vec();
        cands.sort_by(f64::total_cmp);
        for &t in &cands {
            if acceptance_rate(scores, t) <= far {
                return t;
            }
        }
        unreachable!()
    }

    #[test]
    fn calibration_examples() {
        let s: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(calibrate_threshold(&s, 0.1).unwrap(), 0.8);
        assert_eq!(calibrate_threshold(&[0.5; 200], 0.01).unwrap(), 0.5);
        match calibrate_threshold(&[0.1; 99], 0.01) {
            Err(Error::Validation(m)) => assert!(m.contains("at least 100")),
            other => panic!("{other:?}"),
        }
        assert!(calibrate_threshold(&s, 0.0).is_err());
    }

    #[test]
    fn calibration_matches_brute_force_with_ties() {
        let mut rng = rng_for(3, "cal");
        for _ in 0..20 {
            let s: Vec<f64> = (0..300).map(|_| (rng.gen_range(-50..50) as f64) / 50.0).collect();
            for far in [0.01, 0.05, 0.2] {
                let tau = calibrate_threshold(&s, far).unwrap();
                assert_eq!(tau, brute_force(&s, far));
                assert!(acceptance_rate(&s, tau) <= far);
            }
        }
    }

    #[test]
    fn frechet_analytic_cases() {
        let pts: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        assert!(frechet_distance(&pts, &pts).unwrap().abs() < 1e-9);
        let shifted: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0] + 3.0, p[1] + 4.0]).collect();
        assert!((frechet_distance(&pts, &shifted).unwrap() - 25.0).abs() < 1e-9);
        assert!(matches!(frechet_distance(&pts[..1], &pts), Err(Error::Validation(_))));
        let bad = vec![vec![f64::NAN, 0.0], vec![0.0, 0.0]];
        assert!(matches!(frechet_distance(&bad, &pts), Err(Error::Numeric(_))));
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = rng_for(1, "fd");
        let a: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
        let b: Vec<Vec<f64>> = (0..25).map(|_| (0..4).map(|_| rng.gen::<f64>() * 2.0 + 0.3).collect()).collect();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
    }

    #[test]
    fn swap_sets_resolve_against_class_names() {
        let names = crate::data::toy_class_names();
        assert_eq!(SwapSet::NoSwap.classes(&names).unwrap(), Vec::<usize>::new());
        assert_eq!(SwapSet::Hair.classes(&names).unwrap(), vec![2]);
        assert_eq!(SwapSet::FullSwap.classes(&names).unwrap().len(), 6);
        let short: Vec<String> = vec!["background".into(), "skin".into()];
        assert!(matches!(SwapSet::Mouth.classes(&short), Err(Error::Validation(_))));
        assert_eq!("fullswap".parse::<SwapSet>().unwrap(), SwapSet::FullSwap);
        assert!("nose".parse::<SwapSet>().is_err());
    }

    #[test]
    fn pairwise_mean_matches_naive() {
        let xs: Vec<f64> = (0..1001).map(|i| (i as f64).sin()).collect();
        assert!((mean(&xs) - xs.iter().sum::<f64>() / 1001.0).abs() < 1e-12);
    }
}

//! Acceptance criteria 1–10. Runs without the libtest harness so every
//! criterion prints its own PASS/FAIL line; exits non-zero on any failure.
//!
//! `cargo test --test acceptance -- 3 4` runs a subset.
//!
//! Criteria 5–8 need two 20k-iteration trainings (~2 h each on one core).
//! Trained recognizers and synthesizers are cached under
//! `$IDSIS_ACCEPTANCE_DIR` (default: cargo's integration-test tmp dir), keyed by
//! a hash of every config that feeds them; an interrupted training resumes
//! from its last checkpoint.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use idsis_core::autograd::{Graph, Tensor, Var};
use idsis_core::checkpoint::file_sha256;
use idsis_core::config::RunConfig;
use idsis_core::data::{one_hot, toy_class_names, toy_split, FaceRecord, LabelMap, Split};
use idsis_core::encoders::ConditioningTokens;
use idsis_core::evaluation::{
    acceptance_rate, attack_success_rate, calibrate_threshold, cosine_suite, distinct_identity_pairs, frechet_distance,
    frechet_from_stats, impostor_scores, style_swap_sweep, AttackContext, SwapSet, SweepResult,
};
use idsis_core::generator::{cross_attention_graph, HeadVars};
use idsis_core::identity::{train_fr, FREmbedder, FREmbedderConfig, FrRole};
use idsis_core::losses::identity_loss_graph;
use idsis_core::model::{ModelConfig, Synthesizer};
use idsis_core::train::{TrainConfig, TrainState, Trainer};

// ---- pinned tolerances and budgets ----
const ATTN_ROW_TOL: f64 = 1e-5;
const ATTN_INPUTS: usize = 100;
const GRAD_REL_TOL: f64 = 1e-3;
const CALIB_SCORES: usize = 1000;
const FRECHET_TOL: f64 = 1e-6;
const C5_MIN_GAIN: f64 = 0.05;
const FAR_TARGET: f64 = 0.01;
const C6_PAIRS: usize = 500;
const C7_PAIRS: usize = 100;
const C7_MAX_RATIO: f64 = 0.25;
const C8_PROBES: usize = 100;
const C8_CONSISTENCY: f64 = 0.6;
const C9_ITERATIONS: u64 = 100;
const C10_ITERATIONS: u64 = 500;

const BUDGET_1: Duration = Duration::from_secs(60);
const BUDGET_2: Duration = Duration::from_secs(120);
const BUDGET_3: Duration = Duration::from_secs(10);
const BUDGET_4: Duration = Duration::from_secs(10);
const BUDGET_6: Duration = Duration::from_secs(15 * 60);
const BUDGET_10: Duration = Duration::from_secs(15 * 60);

/// Batch size of the two acceptance trainings (iterations stay at 20k).
const ACCEPTANCE_BATCH: usize = 8;
const IMPOSTOR_PAIRS: usize = 2000;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(budget: Duration, start: Instant, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < budget, || format!("{what} took {:.1}s, budget {:.0}s", t.as_secs_f64(), budget.as_secs_f64()))
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn random_labels(rng: &mut ChaCha8Rng, res: usize, classes: usize) -> LabelMap {
    // blocky random partition: random cell size, random class per cell
    let cell = [1usize, 2, 4, 8, 16][rng.gen_range(0..5)];
    let side = res.div_ceil(cell);
    let cells: Vec<u8> = (0..side * side).map(|_| rng.gen_range(0..classes) as u8).collect();
    let labels = (0..res * res).map(|p| cells[(p / res / cell) * side + (p % res) / cell]).collect();
    LabelMap::new(res, res, labels).unwrap()
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig::new(64, 6, 11);
    let model = Synthesizer::new(cfg.clone()).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut descs = Vec::new();
    let mut toks = Vec::new();
    for _ in 0..ATTN_INPUTS {
        let mask = one_hot(&random_labels(&mut rng, 64, 6), 6).map_err(e2s)?;
        descs.push(model.embed_mask(&mask).map_err(e2s)?);
        // wide spread so some softmax rows saturate
        let scale = [0.1f32, 1.0, 10.0][rng.gen_range(0..3)];
        let data: Vec<f32> = (0..7 * cfg.d_s).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect();
        toks.push(ConditioningTokens { tokens: Tensor::new(&[7, cfg.d_s], data).map_err(e2s)? });
    }
    let items: Vec<_> = descs.iter().zip(&toks).collect();
    let outs = model.generate_batch(&items).map_err(e2s)?;
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    let mut blocks = 0usize;
    for o in &outs {
        blocks = blocks.max(o.attention.len());
        for a in &o.attention {
            let t = a.dim(1);
            ensure(t == 7, || format!("attention has {t} columns, expected C+1 = 7"))?;
            for row in a.data().chunks(t) {
                ensure(row.iter().all(|&v| v >= 0.0), || "negative attention weight".into())?;
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                worst = worst.max((s - 1.0).abs());
                rows += 1;
            }
        }
    }
    ensure(blocks == 3, || format!("{blocks} attention blocks at 64 px, expected 3"))?;
    ensure(worst <= ATTN_ROW_TOL, || format!("row sum off by {worst:e}"))?;
    within(BUDGET_1, start, "attention check")?;
    Ok(format!("{rows} rows over {ATTN_INPUTS} inputs × {blocks} blocks, max |Σ−1| = {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

fn pseudo(n: usize, salt: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * 0.618_034 + salt).sin() * 0.9).collect()
}

/// Hand-written multi-head cross-attention (the oracle): `x: [F, N]`,
/// `tokens: [T, S]`, per head `q: [F, dk]`, `k, v: [S, dk]`, `out: [dk, F]`.
/// Returns `(x + Σ_h update_h, mean_h A_h)`.
#[allow(clippy::too_many_arguments)]
fn oracle_cross_attention(
    x: &[f64],
    tok: &[f64],
    heads: &[[Vec<f64>; 4]],
    f: usize,
    n: usize,
    t: usize,
    s: usize,
    dk: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = x.to_vec();
    let mut attn = vec![0.0; n * t];
    for [q, k, v, o] in heads {
        let proj = |w: &[f64]| {
            let mut r = vec![0.0; t * dk];
            for ti in 0..t {
                for j in 0..dk {
                    r[ti * dk + j] = (0..s).map(|si| tok[ti * s + si] * w[si * dk + j]).sum();
                }
            }
            r
        };
        let (kk, vv) = (proj(k), proj(v));
        for ni in 0..n {
            let qn: Vec<f64> = (0..dk).map(|j| (0..f).map(|fi| x[fi * n + ni] * q[fi * dk + j]).sum()).collect();
            let logits: Vec<f64> =
                (0..t).map(|ti| (0..dk).map(|j| qn[j] * kk[ti * dk + j]).sum::<f64>() / (dk as f64).sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|v| v / z).collect();
            let on: Vec<f64> = (0..dk).map(|j| (0..t).map(|ti| a[ti] * vv[ti * dk + j]).sum()).collect();
            for fi in 0..f {
                y[fi * n + ni] += (0..dk).map(|j| o[j * f + fi] * on[j]).sum::<f64>();
            }
            for ti in 0..t {
                attn[ni * t + ti] += a[ti] / heads.len() as f64;
            }
        }
    }
    (y, attn)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let (f, n, t, s, dk, nh) = (4usize, 5usize, 3usize, 3usize, 2usize, 2usize);
    // parameter vector: x, tokens, then per head q, k, v, out
    let sizes: Vec<usize> = [f * n, t * s].into_iter().chain((0..nh).flat_map(|_| [f * dk, s * dk, s * dk, dk * f])).collect();
    let mut params: Vec<Vec<f64>> = sizes.iter().enumerate().map(|(i, &sz)| pseudo(sz, 0.37 * i as f64)).collect();
    let wy = pseudo(f * n, 5.0);
    let wa = pseudo(n * t, 6.0);
    let oracle_loss = |p: &[Vec<f64>]| {
        let heads: Vec<[Vec<f64>; 4]> =
            (0..nh).map(|h| [p[2 + 4 * h].clone(), p[3 + 4 * h].clone(), p[4 + 4 * h].clone(), p[5 + 4 * h].clone()]).collect();
        let (y, a) = oracle_cross_attention(&p[0], &p[1], &heads, f, n, t, s, dk);
        (y.iter().zip(&wy).map(|(a, b)| a * b).sum::<f64>() + a.iter().zip(&wa).map(|(a, b)| a * b).sum::<f64>(), y, a)
    };
    // tape
    let mut g = Graph::<f64>::new();
    let shapes: Vec<Vec<usize>> = [vec![1, f, n], vec![1, t, s]]
        .into_iter()
        .chain((0..nh).flat_map(|_| [vec![f, dk], vec![s, dk], vec![s, dk], vec![dk, f]]))
        .collect();
    let vars: Vec<Var> =
        params.iter().zip(&shapes).map(|(p, sh)| g.variable(Tensor::new(sh, p.clone()).unwrap())).collect();
    let heads: Vec<HeadVars> =
        (0..nh).map(|h| HeadVars { q: vars[2 + 4 * h], k: vars[3 + 4 * h], v: vars[4 + 4 * h], out: vars[5 + 4 * h] }).collect();
    let (y, a) = cross_attention_graph(&mut g, vars[0], vars[1], &heads);
    let wyv = g.input(Tensor::new(&[1, f, n], wy.clone()).unwrap());
    let wav = g.input(Tensor::new(&[1, n, t], wa.clone()).unwrap());
    let py = g.mul(y, wyv);
    let pa = g.mul(a, wav);
    let sy = g.sum(py);
    let sa = g.sum(pa);
    let loss = g.add(sy, sa);
    let (oracle_value, oy, oa) = oracle_loss(&params);
    let fwd = g.value(y).data().iter().zip(&oy).chain(g.value(a).data().iter().zip(&oa)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    ensure(fwd < 1e-12, || format!("tape forward differs from the oracle by {fwd:e}"))?;
    let _ = oracle_value;
    let grads = g.backward(loss);
    let h = 1e-6;
    let mut worst_ca = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let an = grads.get(*v).ok_or("missing gradient")?.to_vec();
        for j in 0..params[i].len() {
            let keep = params[i][j];
            params[i][j] = keep + h;
            let lp = oracle_loss(&params).0;
            params[i][j] = keep - h;
            let lm = oracle_loss(&params).0;
            params[i][j] = keep;
            let fd = (lp - lm) / (2.0 * h);
            worst_ca = worst_ca.max(rel_err(an[j], fd));
        }
    }
    ensure(worst_ca <= GRAD_REL_TOL, || format!("cross-attention gradient rel. error {worst_ca:e}"))?;

    // identity loss on a micro linear head: raw = X·W, loss = 1 − mean cos(raw_b, r_b)
    let (b, din, d) = (3usize, 4usize, 5usize);
    let mut xs = pseudo(b * din, 1.1);
    let mut w = pseudo(din * d, 2.2);
    let refs: Vec<f64> = {
        let r = pseudo(b * d, 3.3);
        r.chunks(d).flat_map(|row| {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(move |v| v / nrm).collect::<Vec<_>>()
        }).collect()
    };
    let id_oracle = |xs: &[f64], w: &[f64]| {
        let mut acc = 0.0;
        for bi in 0..b {
            let raw: Vec<f64> = (0..d).map(|j| (0..din).map(|k| xs[bi * din + k] * w[k * d + j]).sum()).collect();
            let nrm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            acc += raw.iter().zip(&refs[bi * d..(bi + 1) * d]).map(|(a, r)| a * r).sum::<f64>() / nrm;
        }
        1.0 - acc / b as f64
    };
    let mut g = Graph::<f64>::new();
    let xv = g.variable(Tensor::new(&[b, din], xs.clone()).unwrap());
    let wv = g.variable(Tensor::new(&[din, d], w.clone()).unwrap());
    let raw = g.matmul(xv, wv, false, false);
    let l = identity_loss_graph(&mut g, raw, &Tensor::new(&[b, d], refs.clone()).unwrap());
    let lv = g.scalar(l);
    ensure((lv - id_oracle(&xs, &w)).abs() < 1e-12, || "identity loss value differs from the oracle".into())?;
    let gr = g.backward(l);
    let (gx, gw) = (gr.get(xv).ok_or("missing dx")?.to_vec(), gr.get(wv).ok_or("missing dW")?.to_vec());
    let mut worst_id = 0.0f64;
    for j in 0..xs.len() {
        let keep = xs[j];
        xs[j] = keep + h;
        let lp = id_oracle(&xs, &w);
        xs[j] = keep - h;
        let lm = id_oracle(&xs, &w);
        xs[j] = keep;
        worst_id = worst_id.max(rel_err(gx[j], (lp - lm) / (2.0 * h)));
    }
    for j in 0..w.len() {
        let keep = w[j];
        w[j] = keep + h;
        let lp = id_oracle(&xs, &w);
        w[j] = keep - h;
        let lm = id_oracle(&xs, &w);
        w[j] = keep;
        worst_id = worst_id.max(rel_err(gw[j], (lp - lm) / (2.0 * h)));
    }
    ensure(worst_id <= GRAD_REL_TOL, || format!("identity-loss gradient rel. error {worst_id:e}"))?;
    within(BUDGET_2, start, "gradient oracle")?;
    Ok(format!("max rel. error: cross-attention {worst_ca:.1e}, identity loss {worst_id:.1e}"))
}

// ---------------------------------------------------------------- 3

/// Brute force: every observed score (and +∞) is a candidate; keep the
/// smallest whose strict-exceedance rate is within the target.
fn brute_force_tau(scores: &[f64], far: f64) -> f64 {
    let n = scores.len() as f64;
    let mut best = f64::INFINITY;
    for &c in scores {
        let above = scores.iter().filter(|&&s| s > c).count() as f64;
        if above <= far * n && c < best {
            best = c;
        }
    }
    best
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut details = Vec::new();
    for (case, far) in [("continuous", FAR_TARGET), ("tied", FAR_TARGET), ("continuous", 0.05)] {
        let scores: Vec<f64> = (0..CALIB_SCORES)
            .map(|_| {
                let v: f64 = rng.sample::<f64, _>(StandardNormal) * 0.2;
                if case == "tied" {
                    (v * 20.0).round() / 20.0
                } else {
                    v
                }
            })
            .collect();
        let tau = calibrate_threshold(&scores, far).map_err(e2s)?;
        let oracle = brute_force_tau(&scores, far);
        ensure(tau == oracle, || format!("{case}: τ {tau} ≠ brute force {oracle}"))?;
        let rate = acceptance_rate(&scores, tau);
        ensure(rate <= far, || format!("{case}: empirical FAR {rate} > {far}"))?;
        details.push(format!("{case}@{far}: τ={tau:.4} FAR={rate:.4}"));
    }
    within(BUDGET_3, start, "calibration")?;
    Ok(details.join(", "))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    use nalgebra::{DMatrix, DVector};
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let set: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let same = frechet_distance(&set, &set).map_err(e2s)?;
    ensure(same.abs() <= FRECHET_TOL, || format!("identical sets: {same:e}"))?;
    let i2 = DMatrix::<f64>::identity(2, 2);
    let shift = frechet_from_stats(&DVector::from_vec(vec![0.0, 0.0]), &i2, &DVector::from_vec(vec![3.0, 4.0]), &i2)
        .map_err(e2s)?;
    ensure((shift - 25.0).abs() <= FRECHET_TOL, || format!("mean shift: {shift}"))?;
    // the same case from samples: a symmetric set with identity covariance, shifted
    let base = [vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
    let scaled: Vec<Vec<f64>> = base.iter().map(|p| p.iter().map(|v| v * (0.75f64).sqrt()).collect()).collect();
    let moved: Vec<Vec<f64>> = scaled.iter().map(|p| vec![p[0] + 3.0, p[1] + 4.0]).collect();
    let shift_s = frechet_distance(&scaled, &moved).map_err(e2s)?;
    ensure((shift_s - 25.0).abs() <= FRECHET_TOL, || format!("mean shift from samples: {shift_s}"))?;
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let z = DVector::from_vec(vec![0.0]);
    let var = frechet_from_stats(&z, &one(4.0), &z, &one(1.0)).map_err(e2s)?;
    ensure((var - 1.0).abs() <= FRECHET_TOL, || format!("variances 4 vs 1: {var}"))?;
    within(BUDGET_4, start, "Fréchet cases")?;
    Ok(format!("identical {same:.1e}, mean shift {shift:.9} (samples {shift_s:.9}), variances {var:.9}"))
}

// ---------------------------------------------------------------- 5–8 shared state

struct Trained {
    cfg: RunConfig,
    test: Vec<FaceRecord>,
    train_fr: FREmbedder,
    eval_fr: FREmbedder,
    with_id: Synthesizer,
    without_id: Synthesizer,
    tau: f64,
}

fn cache_root() -> PathBuf {
    std::env::var_os("IDSIS_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn key(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(&h.finalize()[..8])
}

fn cached_fr(root: &Path, records: &[FaceRecord], cfg: &FREmbedderConfig, data_key: &str) -> Result<FREmbedder, String> {
    let path = root.join(format!("{}-{}.safetensors", cfg.role, key(&[data_key.into(), format!("{cfg:?}")])));
    if path.exists() {
        return FREmbedder::load(&path).map_err(e2s);
    }
    log(&format!("training {} (cached at {})", cfg.role, path.display()));
    let fr = train_fr(records, cfg).map_err(e2s)?;
    fr.save(&path).map_err(e2s)?;
    Ok(fr)
}

fn cached_synth(
    root: &Path,
    records: &[FaceRecord],
    fr: &FREmbedder,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    data_key: &str,
) -> Result<Synthesizer, String> {
    let fr_digest = fr.params.digest();
    let dir = root.join(format!(
        "synth-lid{}-{}",
        tc.weights.id,
        key(&[data_key.into(), format!("{model_cfg:?}"), format!("{tc:?}"), fr_digest])
    ));
    let final_path = dir.join("final.safetensors");
    if final_path.exists() {
        return Synthesizer::load(&final_path).map(|m| m.0).map_err(e2s);
    }
    let latest = dir.join("latest.safetensors");
    let state = if latest.exists() {
        let s = TrainState::load(&latest).map_err(e2s)?;
        log(&format!("resuming λ_id={} from iteration {}", tc.weights.id, s.iteration));
        s
    } else {
        log(&format!("training λ_id={} for {} iterations in {}", tc.weights.id, tc.iterations, dir.display()));
        TrainState::new(model_cfg.clone(), tc).map_err(e2s)?
    };
    let mut t = Trainer::new(state, records, fr).map_err(e2s)?;
    t.run(Some(&dir)).map_err(e2s)?;
    std::fs::copy(&latest, &final_path).map_err(e2s)?;
    Ok(t.state.model)
}

fn trained() -> Result<Trained, String> {
    let root = cache_root();
    std::fs::create_dir_all(&root).map_err(e2s)?;
    let mut cfg = RunConfig::default();
    cfg.batch = ACCEPTANCE_BATCH;
    cfg.validate().map_err(e2s)?;
    let data = cfg.data();
    ensure(data.resolution == 64 && data.identity_count == 150 && cfg.iterations == 20_000, || {
        "acceptance training must run at 64 px, 150 identities, 20k iterations".into()
    })?;
    let data_key = format!("{data:?}");
    let train = toy_split(&data, Split::Train).map_err(e2s)?;
    let test = toy_split(&data, Split::Test).map_err(e2s)?;
    let train_fr = cached_fr(&root, &train, &cfg.fr(FrRole::Train, data.identity_count), &data_key)?;
    let eval_fr = cached_fr(&root, &train, &cfg.fr(FrRole::Eval, data.identity_count), &data_key)?;
    let model_cfg = cfg.model();
    let mut tc = cfg.train();
    tc.weights.id = 10.0;
    let with_id = cached_synth(&root, &train, &train_fr, &model_cfg, &tc, &data_key)?;
    tc.weights.id = 0.0;
    let without_id = cached_synth(&root, &train, &train_fr, &model_cfg, &tc, &data_key)?;
    let imp = distinct_identity_pairs(&test, IMPOSTOR_PAIRS, cfg.eval_seed, "impostor").map_err(e2s)?;
    let tau = calibrate_threshold(&impostor_scores(&eval_fr, &test, &imp).map_err(e2s)?, FAR_TARGET).map_err(e2s)?;
    Ok(Trained { cfg, test, train_fr, eval_fr, with_id, without_id, tau })
}

// ---------------------------------------------------------------- 5

fn criterion_5(t: &Trained) -> Check {
    let on = cosine_suite(&t.with_id, &t.train_fr, &t.eval_fr, &t.test).map_err(e2s)?.mean;
    let off = cosine_suite(&t.without_id, &t.train_fr, &t.eval_fr, &t.test).map_err(e2s)?.mean;
    let gain = on - off;
    let msg = format!("eval-FR mean cosine λ_id=10 {on:.4} vs λ_id=0 {off:.4}, gain {gain:.4} (need ≥ {C5_MIN_GAIN})");
    ensure(gain >= C5_MIN_GAIN, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 6 and 7

struct Sweep {
    rows: Vec<SweepResult>,
    seconds: f64,
    asr_on: f64,
    asr_off: f64,
}

fn sweep(t: &Trained) -> Result<Sweep, String> {
    let start = Instant::now();
    let pairs = distinct_identity_pairs(&t.test, C6_PAIRS, t.cfg.eval_seed, "attack").map_err(e2s)?;
    let ctx_on = AttackContext::new(&t.with_id, &t.train_fr, &t.eval_fr, &t.test).map_err(e2s)?;
    let ctx_off = AttackContext::new(&t.without_id, &t.train_fr, &t.eval_fr, &t.test).map_err(e2s)?;
    let asr_on = attack_success_rate(&ctx_on, &pairs, t.tau).map_err(e2s)?.asr;
    let asr_off = attack_success_rate(&ctx_off, &pairs, t.tau).map_err(e2s)?.asr;
    let rows = style_swap_sweep(&ctx_on, &pairs, t.tau, &toy_class_names(), &t.train_fr).map_err(e2s)?;
    Ok(Sweep { rows, seconds: start.elapsed().as_secs_f64(), asr_on, asr_off })
}

fn row(s: &Sweep, set: SwapSet) -> &SweepResult {
    s.rows.iter().find(|r| r.swap_set == set).expect("every swap set is swept")
}

fn criterion_6(t: &Trained, s: &Sweep) -> Check {
    let (none, full) = (row(s, SwapSet::NoSwap), row(s, SwapSet::FullSwap));
    let min_prc = s.rows.iter().map(|r| r.perceptual_distance).fold(f64::INFINITY, f64::min);
    let table: Vec<String> =
        s.rows.iter().map(|r| format!("{}:{:.3}/{:.4}", r.swap_set, r.asr, r.perceptual_distance)).collect();
    let msg = format!(
        "τ={:.4}; ASR λ_id=10 {:.3} vs λ_id=0 {:.3}; sweep asr/prc [{}]; {:.0}s",
        t.tau,
        s.asr_on,
        s.asr_off,
        table.join(" "),
        s.seconds
    );
    ensure(s.asr_on > s.asr_off, || format!("identity-swap ASR does not improve with λ_id: {msg}"))?;
    ensure(full.asr >= none.asr, || format!("ASR(FullSwap) < ASR(NoSwap): {msg}"))?;
    ensure(none.perceptual_distance <= min_prc, || format!("NoSwap is not the least perceptible row: {msg}"))?;
    ensure(s.seconds < BUDGET_6.as_secs_f64(), || format!("evaluation over budget: {msg}"))?;
    Ok(msg)
}

fn criterion_7(t: &Trained) -> Check {
    let pairs = distinct_identity_pairs(&t.test, C7_PAIRS, t.cfg.eval_seed, "inconspicuous").map_err(e2s)?;
    let ctx = AttackContext::new(&t.with_id, &t.train_fr, &t.eval_fr, &t.test).map_err(e2s)?;
    let own = ctx.generate(&pairs, &[], false).map_err(e2s)?;
    let id_swap = ctx.generate(&pairs, &[], true).map_err(e2s)?;
    let all: Vec<usize> = (0..ctx.class_count()).collect();
    let full = ctx.generate(&pairs, &all, true).map_err(e2s)?;
    let mad = |a: &[Tensor<f32>], b: &[Tensor<f32>]| {
        let per: Vec<f64> = a.iter().zip(b).map(|(x, y)| idsis_core::evaluation::mean_abs_difference(x, y)).collect();
        per.iter().sum::<f64>() / per.len() as f64
    };
    let (d_id, d_full) = (mad(&own, &id_swap), mad(&own, &full));
    let ratio = d_id / d_full;
    let msg = format!("mean |Δ| identity swap {d_id:.4}, FullSwap {d_full:.4}, ratio {ratio:.3} (need < {C7_MAX_RATIO})");
    ensure(ratio < C7_MAX_RATIO, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 8

fn criterion_8(t: &Trained) -> Check {
    let m = &t.with_id;
    let c = m.classes();
    // locality of the token interface on real codes
    let probes = &t.test[..C8_PROBES.min(t.test.len())];
    let masks = probes.iter().map(|r| one_hot(&r.mask, c)).collect::<Result<Vec<_>, _>>().map_err(e2s)?;
    let styles = probes.iter().zip(&masks).map(|(r, mk)| m.extract_styles(&r.image, mk)).collect::<Result<Vec<_>, _>>().map_err(e2s)?;
    let ids = probes.iter().map(|r| t.train_fr.embed(&r.image)).collect::<Result<Vec<_>, _>>().map_err(e2s)?;
    let tokens = styles.iter().zip(&ids).map(|(s, e)| m.tokens(s, e)).collect::<Result<Vec<_>, _>>().map_err(e2s)?;
    let other = probes.iter().position(|r| r.identity_id != probes[0].identity_id).ok_or("probes share one identity")?;
    for row_c in 0..=c {
        let swapped = if row_c < c {
            let mut s = styles[0].clone();
            s.replace_row(row_c, &styles[other]);
            m.tokens(&s, &ids[0]).map_err(e2s)?
        } else {
            m.tokens(&styles[0], &ids[other]).map_err(e2s)?
        };
        for r in 0..=c {
            let same = swapped.row(r).iter().zip(tokens[0].row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same == (r != row_c), || format!("swapping row {row_c} {} row {r}", if same { "did not change" } else { "changed" }))?;
        }
    }
    // mean-ablation of each row, eval-FR score against the source image
    let descs = masks.iter().map(|mk| m.embed_mask(mk)).collect::<Result<Vec<_>, _>>().map_err(e2s)?;
    let d_s = tokens[0].tokens.dim(1);
    let score = |toks: &[ConditioningTokens]| -> Result<Vec<f64>, String> {
        let items: Vec<_> = descs.iter().zip(toks).collect();
        let gen = m.generate_batch(&items).map_err(e2s)?;
        probes
            .iter()
            .zip(&gen)
            .map(|(r, g)| idsis_core::evaluation::pair_score(&t.eval_fr, &g.image, &r.image).map_err(e2s))
            .collect()
    };
    let base = score(&tokens)?;
    let names: Vec<String> = toy_class_names().into_iter().chain(["identity".to_string()]).collect();
    let mut consistency = BTreeMap::new();
    for r in 0..=c {
        let mut mean_row = vec![0.0f64; d_s];
        for tk in &tokens {
            for (acc, v) in mean_row.iter_mut().zip(tk.row(r)) {
                *acc += *v as f64 / tokens.len() as f64;
            }
        }
        let ablated: Vec<ConditioningTokens> = tokens
            .iter()
            .map(|tk| {
                let mut a = tk.clone();
                a.row_mut(r).iter_mut().zip(&mean_row).for_each(|(d, v)| *d = *v as f32);
                a
            })
            .collect();
        let s = score(&ablated)?;
        let deltas: Vec<f64> = s.iter().zip(&base).map(|(a, b)| a - b).collect();
        let up = deltas.iter().filter(|d| **d > 0.0).count() as f64;
        let down = deltas.iter().filter(|d| **d < 0.0).count() as f64;
        let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
        consistency.insert(r, (up.max(down) / deltas.len() as f64, mean_delta));
    }
    let table: Vec<String> =
        consistency.iter().map(|(r, (f, d))| format!("{}:{:.2}/{:+.3}", names[*r], f, d)).collect();
    let msg = format!("row locality ok; ablation sign-consistency/mean Δ [{}]", table.join(" "));
    let (id_frac, _) = consistency[&c];
    ensure(id_frac >= C8_CONSISTENCY, || format!("identity ablation not sign-consistent: {msg}"))?;
    let offenders: Vec<&str> =
        (0..c).filter(|r| consistency[r].0 >= C8_CONSISTENCY).map(|r| names[r].as_str()).collect();
    ensure(offenders.is_empty(), || format!("style rows {offenders:?} are also sign-consistent: {msg}"))?;
    Ok(msg)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut cfg = RunConfig::default();
    cfg.resolution = 32;
    cfg.identities = 20;
    cfg.batch = 4;
    cfg.iterations = C9_ITERATIONS;
    cfg.checkpoint_every = C9_ITERATIONS;
    cfg.validate().map_err(e2s)?;
    let data = cfg.data();
    let train = toy_split(&data, Split::Train).map_err(e2s)?;
    // an untrained recognizer is enough to exercise the identity loss
    let fr = FREmbedder::init(&cfg.fr(FrRole::Train, data.identity_count)).map_err(e2s)?;
    let mut hashes = Vec::new();
    let mut models = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let (state, _) = idsis_core::train::train(&train, &fr, cfg.model(), &cfg.train(), Some(&out)).map_err(e2s)?;
        let p = out.join(format!("ckpt_{C9_ITERATIONS:06}.safetensors"));
        hashes.push(file_sha256(&p).map_err(e2s)?);
        models.push((state.model, p));
    }
    ensure(hashes[0] == hashes[1], || format!("checkpoints differ: {} vs {}", hashes[0], hashes[1]))?;
    let (model, path) = &models[0];
    let (loaded, _, _) = Synthesizer::load(path).map_err(e2s)?;
    let test = toy_split(&data, Split::Test).map_err(e2s)?;
    let r = &test[0];
    let mask = one_hot(&r.mask, model.classes()).map_err(e2s)?;
    let emb = fr.embed(&r.image).map_err(e2s)?;
    let gen = |m: &Synthesizer| -> Result<Vec<u32>, String> {
        let toks = m.tokens(&m.extract_styles(&r.image, &mask).map_err(e2s)?, &emb).map_err(e2s)?;
        let out = m.generate(&m.embed_mask(&mask).map_err(e2s)?, &toks).map_err(e2s)?;
        Ok(out.image.data().iter().chain(out.attention.iter().flat_map(|a| a.data())).map(|v| v.to_bits()).collect())
    };
    ensure(gen(model)? == gen(&loaded)?, || "generate() differs after the checkpoint round trip".into())?;
    Ok(format!("two runs → sha256 {}…; round-trip generate() bit-identical", &hashes[0][..16]))
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["idsis"];
    full.extend_from_slice(args);
    let code = idsis_core::cli::run(full.iter().copied());
    ensure(code == 0, || format!("`idsis {}` exited with {code}", args.join(" ")))
}

fn criterion_10() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let cfg_path = dir.path().join("smoke.toml");
    let root = dir.path().display().to_string();
    std::fs::write(
        &cfg_path,
        format!(
            "resolution = 32\nidentities = 20\niterations = {C10_ITERATIONS}\ncheckpoint_every = 250\nlog_every = 50\n\
             batch = 8\nattack_pairs = 100\nimpostor_pairs = 200\n\
             dataset_dir = \"{root}/data\"\ncheckpoint_dir = \"{root}/ckpt\"\noutput_dir = \"{root}/out\"\n"
        ),
    )
    .map_err(e2s)?;
    let c = cfg_path.to_str().unwrap();
    for args in [
        vec!["gen-data"],
        vec!["train-fr", "--role", "train"],
        vec!["train-fr", "--role", "eval"],
        vec!["train"],
        vec!["reconstruct", "--index", "0"],
        vec!["swap-id", "--attacker", "0", "--target", "15"],
        vec!["swap-style", "--attacker", "0", "--target", "15", "--swap", "Hair"],
        vec!["eval-recon"],
        vec!["eval-attack"],
        vec!["eval-sweep"],
        vec!["attn-maps", "--index", "0"],
        vec!["plot"],
    ] {
        let mut a = vec!["--config", c];
        a.extend(args);
        cli(&a)?;
    }
    let d = dir.path();
    let expected = [
        "data/meta.json",
        "data/manifest.gen-data.json",
        "ckpt/train_fr.safetensors",
        "ckpt/eval_fr.safetensors",
        "ckpt/manifest.train-fr.json",
        "ckpt/synth/latest.safetensors",
        "ckpt/synth/ckpt_000500.safetensors",
        "ckpt/synth/metrics.jsonl",
        "ckpt/synth/manifest.train.json",
        "out/reconstruct/output.png",
        "out/reconstruct/scores.json",
        "out/reconstruct/manifest.reconstruct.json",
        "out/swap-id/output.png",
        "out/swap-id/manifest.swap-id.json",
        "out/swap-style/output.png",
        "out/swap-style/manifest.swap-style.json",
        "out/eval/metrics.json",
        "out/eval/sweep.csv",
        "out/eval/attack_pairs.csv",
        "out/eval/manifest.eval-recon.json",
        "out/eval/manifest.eval-attack.json",
        "out/eval/manifest.eval-sweep.json",
        "out/attn/attention.json",
        "out/attn/manifest.attn-maps.json",
        "out/plots/sweep.svg",
        "out/plots/losses.svg",
        "out/plots/attn_block0_identity.png",
        "out/plots/manifest.plot.json",
    ];
    let missing: Vec<&str> = expected.iter().copied().filter(|p| !d.join(p).exists()).collect();
    ensure(missing.is_empty(), || format!("missing artifacts: {missing:?}"))?;
    let report = idsis_core::evaluation::EvalReport::read_json(&d.join("out/eval/metrics.json")).map_err(e2s)?;
    ensure(report.c_mean.is_some() && report.asr.is_some() && report.sweep.len() == SwapSet::ALL.len(), || {
        "metrics.json lacks C_mean, ASR or the sweep".into()
    })?;
    within(BUDGET_10, start, "CLI pipeline")?;
    Ok(format!("12 commands, {} artifacts present, {:.0}s", expected.len(), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- driver

fn log(msg: &str) {
    let _ = writeln!(std::io::stderr(), "  .. {msg}");
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: u32| wanted.is_empty() || wanted.contains(&n);
    // `cargo test` passes harness flags such as --list; answer them plainly
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let names = [
        "attention rows are distributions",
        "gradient oracle",
        "threshold calibration oracle",
        "Fréchet analytic cases",
        "identity-injection trend",
        "impersonation trend",
        "inconspicuous identity swap",
        "token locality",
        "reproducibility",
        "end-to-end CLI smoke",
    ];
    let mut failed = Vec::new();
    let mut record = |n: u32, res: Check, secs: f64| {
        let line = match &res {
            Ok(d) => format!("criterion {n:>2} PASS  {} ({secs:.1}s): {d}", names[n as usize - 1]),
            Err(e) => format!("criterion {n:>2} FAIL  {} ({secs:.1}s): {e}", names[n as usize - 1]),
        };
        if res.is_err() {
            failed.push(n);
        }
        let mut out = std::io::stdout();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    };
    let quick: [(u32, fn() -> Check); 6] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (9, criterion_9), (10, criterion_10)];
    for (n, f) in quick.iter().take(4) {
        if on(*n) {
            let s = Instant::now();
            record(*n, f(), s.elapsed().as_secs_f64());
        }
    }
    if (5..=8).any(on) {
        let s = Instant::now();
        let models: OnceCell<Result<Trained, String>> = OnceCell::new();
        let t = models.get_or_init(trained);
        log(&format!("trained models ready after {:.0}s", s.elapsed().as_secs_f64()));
        match t {
            Err(e) => {
                for n in (5..=8).filter(|n| on(*n)) {
                    record(n, Err(format!("training failed: {e}")), 0.0);
                }
            }
            Ok(t) => {
                if on(5) {
                    let s = Instant::now();
                    record(5, criterion_5(t), s.elapsed().as_secs_f64());
                }
                if on(6) {
                    let s = Instant::now();
                    let res = sweep(t).and_then(|sw| criterion_6(t, &sw));
                    record(6, res, s.elapsed().as_secs_f64());
                }
                if on(7) {
                    let s = Instant::now();
                    record(7, criterion_7(t), s.elapsed().as_secs_f64());
                }
                if on(8) {
                    let s = Instant::now();
                    record(8, criterion_8(t), s.elapsed().as_secs_f64());
                }
            }
        }
    }
    for (n, f) in quick.iter().skip(4) {
        if on(*n) {
            let s = Instant::now();
            record(*n, f(), s.elapsed().as_secs_f64());
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: FAILED criteria {failed:?}");
        std::process::exit(1);
    }
}

//! Cross-attention generator, two-scale patch discriminator and attention maps.
//!
//! Spatial features are kept channel-major (`[B, F, N]`) throughout, so the
//! attention is computed as `Qᵀ = W_Qᵀ·X`, `A = softmax(QKᵀ/√d_k)` and the
//! update `W_outᵀ·(A·V)ᵀ`; `A` is `[B, N, T]` with one row per spatial site.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, Conv2d, GroupNorm, ParamStore};

use crate::encoders::DESCRIPTOR_GRID;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossAttnBlockConfig {
    pub feature_dim: usize,
    pub head_count: usize,
    /// Total key/value width across heads.
    pub key_dim: usize,
}

impl CrossAttnBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.key_dim == 0 || self.head_count == 0 {
            return Err(Error::Config("key_dim and head_count must be positive".into()));
        }
        if !self.feature_dim.is_multiple_of(self.head_count) || !self.key_dim.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "feature_dim {} and key_dim {} must be divisible by head_count {}",
                self.feature_dim, self.key_dim, self.head_count
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.key_dim / self.head_count
    }
}

/// Plain weights for a single-head block, in row-vector orientation:
/// `Q = X·W_Q`, `K = T·W_K`, `V = T·W_V`, `out = X + (A·V)·W_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnWeights<T: Float = f32> {
    /// `[F, d_k]`
    pub w_q: Tensor<T>,
    /// `[d_s, d_k]`
    pub w_k: Tensor<T>,
    /// `[d_s, d_k]`
    pub w_v: Tensor<T>,
    /// `[d_k, F]`
    pub w_out: Tensor<T>,
}

/// Per-head weight leaves on a graph.
pub struct HeadVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub out: Var,
}

/// Multi-head cross-attention on the tape. `x: [B, F, N]`, `tokens: [B, T, d_s]`.
/// Returns `(x + update, attention)`; with several heads the retained
/// attention is the head average.
pub fn cross_attention_graph<T: Float>(g: &mut Graph<T>, x: Var, tokens: Var, heads: &[HeadVars]) -> (Var, Var) {
    let mut update = None;
    let mut attn_sum = None;
    for h in heads {
        let dk = g.shape(h.q)[1];
        let qt = g.matmul(h.q, x, true, false); // [B, dk, N]
        let k = g.matmul(tokens, h.k, false, false); // [B, T, dk]
        let v = g.matmul(tokens, h.v, false, false); // [B, T, dk]
        let logits = g.matmul(qt, k, true, true); // [B, N, T]
        let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
        let a = g.softmax(logits);
        let ot = g.matmul(v, a, true, true); // [B, dk, N]
        let u = g.matmul(h.out, ot, true, false); // [B, F, N]
        update = Some(match update {
            None => u,
            Some(acc) => g.add(acc, u),
        });
        attn_sum = Some(match attn_sum {
            None => a,
            Some(acc) => g.add(acc, a),
        });
    }
    let update = update.expect("at least one head");
    let mut attn = attn_sum.expect("at least one head");
    if heads.len() > 1 {
        attn = g.scale(attn, 1.0 / heads.len() as f64);
    }
    (g.add(x, update), attn)
}

/// Single-instance cross-attention over row-major features `[N, F]` and
/// tokens `[T, d_s]`. Returns the `[N, F]` output and the `[N, T]` attention.
pub fn cross_attention<T: Float>(
    features: &Tensor<T>,
    tokens: &Tensor<T>,
    w: &CrossAttnWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (fs, ts) = (features.shape(), tokens.shape());
    if fs.len() != 2 || ts.len() != 2 || fs[0] == 0 {
        return Err(Error::Shape(format!("features {fs:?} and tokens {ts:?} must be non-empty matrices")));
    }
    let (n, f, d_s) = (fs[0], fs[1], ts[1]);
    let dk = w.w_q.shape().get(1).copied().unwrap_or(0);
    let expect = |t: &Tensor<T>, s: [usize; 2], name: &str| {
        if t.shape() != s {
            Err(Error::Shape(format!("{name} is {:?}, expected {s:?}", t.shape())))
        } else {
            Ok(())
        }
    };
    expect(&w.w_q, [f, dk], "W_Q")?;
    expect(&w.w_k, [d_s, dk], "W_K")?;
    expect(&w.w_v, [d_s, dk], "W_V")?;
    expect(&w.w_out, [dk, f], "W_out")?;
    let mut g = Graph::<T>::new();
    let xt = g.input(transpose(features));
    let x = g.reshape(xt, &[1, f, n]);
    let tk = g.input(tokens.clone());
    let tk = g.reshape(tk, &[1, ts[0], d_s]);
    let head = HeadVars {
        q: g.input(w.w_q.clone()),
        k: g.input(w.w_k.clone()),
        v: g.input(w.w_v.clone()),
        out: g.input(w.w_out.clone()),
    };
    let (y, a) = cross_attention_graph(&mut g, x, tk, &[head]);
    let y = g.value(y).clone().reshape(&[f, n])?;
    let a = g.value(a).clone().reshape(&[n, ts[0]])?;
    Ok((transpose(&y), a))
}

pub(crate) fn transpose<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.dim(0), t.dim(1));
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("sizes match")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub classes: usize,
    pub d_s: usize,
    /// Feature width per stage; one stage per resolution from 16 up.
    pub channels: Vec<usize>,
    pub head_count: usize,
    /// Self-attention before the first cross-attention block.
    pub self_attention: bool,
}

impl GeneratorConfig {
    pub fn stages_for(resolution: usize) -> usize {
        (resolution / DESCRIPTOR_GRID).trailing_zeros() as usize + 1
    }

    pub fn default_channels(resolution: usize) -> Vec<usize> {
        (0..Self::stages_for(resolution)).map(|i| (64 >> i).max(16)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < DESCRIPTOR_GRID || !r.is_power_of_two() {
            return Err(Error::Config(format!("resolution {r} must be a power of two ≥ {DESCRIPTOR_GRID}")));
        }
        if self.channels.len() != Self::stages_for(r) {
            return Err(Error::Config(format!(
                "resolution {r} needs {} generator stages, got {} channel widths",
                Self::stages_for(r),
                self.channels.len()
            )));
        }
        for &f in &self.channels {
            if f % 4 != 0 {
                return Err(Error::Config(format!("generator width {f} must be a multiple of 4")));
            }
            CrossAttnBlockConfig { feature_dim: f, head_count: self.head_count, key_dim: self.d_s }.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    name: String,
    cfg: CrossAttnBlockConfig,
    token_dim: usize,
}

impl AttnBlock {
    fn init(&self, ps: &mut ParamStore<f32>, rng: &mut impl Rng) {
        let (f, dh, ds) = (self.cfg.feature_dim, self.cfg.head_dim(), self.token_dim);
        for h in 0..self.cfg.head_count {
            let n = &self.name;
            ps.insert(format!("{n}.h{h}.q"), normal(rng, &[f, dh], 1.0 / (f as f64).sqrt()));
            ps.insert(format!("{n}.h{h}.k"), normal(rng, &[ds, dh], 1.0 / (ds as f64).sqrt()));
            ps.insert(format!("{n}.h{h}.v"), normal(rng, &[ds, dh], 1.0 / (ds as f64).sqrt()));
            ps.insert(format!("{n}.h{h}.out"), normal(rng, &[dh, f], 0.5 / (dh as f64).sqrt()));
        }
    }

    fn heads<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>) -> Vec<HeadVars> {
        (0..self.cfg.head_count)
            .map(|h| {
                let n = &self.name;
                HeadVars {
                    q: g.param(ps, &format!("{n}.h{h}.q")),
                    k: g.param(ps, &format!("{n}.h{h}.k")),
                    v: g.param(ps, &format!("{n}.h{h}.v")),
                    out: g.param(ps, &format!("{n}.h{h}.out")),
                }
            })
            .collect()
    }
}

/// Mask descriptor + tokens → image.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    stem: Conv2d,
    blocks: Vec<AttnBlock>,
    convs: Vec<(Conv2d, GroupNorm)>,
    self_attn: Option<AttnBlock>,
    out: Conv2d,
}

/// Tape handles of one generator pass.
pub struct GenVars {
    /// `[B, 3, H, W]` in [-1, 1].
    pub image: Var,
    /// Per block `[B, N_i, C+1]`.
    pub attention: Vec<Var>,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let stem = Conv2d::new("gen.stem", config.classes, ch[0], 3, 1);
        let mut blocks = Vec::new();
        let mut convs = Vec::new();
        for (i, &f) in ch.iter().enumerate() {
            blocks.push(AttnBlock {
                name: format!("gen.ca{i}"),
                cfg: CrossAttnBlockConfig { feature_dim: f, head_count: config.head_count, key_dim: config.d_s },
                token_dim: config.d_s,
            });
            let next = ch.get(i + 1).copied().unwrap_or(f);
            convs.push((Conv2d::new(format!("gen.conv{i}"), f, next, 3, 1), GroupNorm::new(format!("gen.gn{i}"), next, 4)));
        }
        let self_attn = config.self_attention.then(|| AttnBlock {
            name: "gen.sa".into(),
            cfg: CrossAttnBlockConfig { feature_dim: ch[0], head_count: 1, key_dim: ch[0] },
            token_dim: ch[0],
        });
        let out = Conv2d::new("gen.out", *ch.last().unwrap(), 3, 3, 1);
        Ok(Generator { config, stem, blocks, convs, self_attn, out })
    }

    pub fn init(&self, ps: &mut ParamStore<f32>, rng: &mut impl Rng) {
        self.stem.init(ps, rng, 1.0);
        for b in &self.blocks {
            b.init(ps, rng);
        }
        if let Some(sa) = &self.self_attn {
            sa.init(ps, rng);
        }
        for (c, n) in &self.convs {
            c.init(ps, rng, 1.0);
            n.init(ps);
        }
        self.out.init(ps, rng, 1.0);
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Side of the feature map at block `i`.
    pub fn block_side(&self, i: usize) -> usize {
        DESCRIPTOR_GRID << i
    }

    /// `descriptor: [B, C, 16, 16]`, `tokens: [B, C+1, d_s]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, descriptor: Var, tokens: Var) -> GenVars {
        let b = g.shape(descriptor)[0];
        let h = self.stem.forward(g, ps, descriptor);
        let mut h = g.leaky_relu(h, 0.2);
        let mut attention = Vec::with_capacity(self.blocks.len());
        let last = self.blocks.len() - 1;
        for (i, (block, (conv, norm))) in self.blocks.iter().zip(&self.convs).enumerate() {
            let s = g.shape(h).to_vec();
            let (f, side) = (s[1], s[2]);
            let mut flat = g.reshape(h, &[b, f, side * side]);
            if i == 0 {
                if let Some(sa) = &self.self_attn {
                    let heads = sa.heads(g, ps);
                    flat = self_attention_graph(g, flat, &heads);
                }
            }
            let heads = block.heads(g, ps);
            let (y, a) = cross_attention_graph(g, flat, tokens, &heads);
            attention.push(a);
            h = g.reshape(y, &[b, f, side, side]);
            if i < last {
                h = g.upsample2x(h);
            }
            let y = conv.forward(g, ps, h);
            let y = norm.forward(g, ps, y);
            h = g.leaky_relu(y, 0.2);
        }
        let y = self.out.forward(g, ps, h);
        GenVars { image: g.tanh(y), attention }
    }

    /// Names of the output projections `W_out` of every cross-attention block.
    pub fn output_projection_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| (0..b.cfg.head_count).map(move |h| format!("{}.h{h}.out", b.name)))
            .collect()
    }
}

/// Residual single-head self-attention over `[B, F, N]`.
fn self_attention_graph<T: Float>(g: &mut Graph<T>, x: Var, heads: &[HeadVars]) -> Var {
    let h = &heads[0];
    let dk = g.shape(h.q)[1];
    let qt = g.matmul(h.q, x, true, false); // [B, dk, N]
    let kt = g.matmul(h.k, x, true, false);
    let vt = g.matmul(h.v, x, true, false);
    let logits = g.matmul(qt, kt, true, false); // [B, N, N]
    let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
    let a = g.softmax(logits);
    let ot = g.matmul(vt, a, false, true); // [B, dk, N]
    let u = g.matmul(h.out, ot, true, false);
    g.add(x, u)
}

/// Output of one generator call on a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOutput {
    /// `[3, H, W]` in [-1, 1].
    pub image: Tensor<f32>,
    /// Per block `[N_i, C+1]` row-stochastic attention.
    pub attention: Vec<Tensor<f32>>,
}

impl GeneratorOutput {
    pub fn resolution(&self) -> usize {
        self.image.dim(1)
    }
}

/// Column `token_index` of block `block_index`, bilinearly upsampled to the
/// output resolution.
pub fn attention_heatmaps(out: &GeneratorOutput, token_index: usize, block_index: usize) -> Result<Tensor<f32>> {
    let a = out
        .attention
        .get(block_index)
        .ok_or_else(|| Error::Validation(format!("block {block_index} out of range (have {})", out.attention.len())))?;
    let (n, t) = (a.dim(0), a.dim(1));
    if token_index >= t {
        return Err(Error::Validation(format!("token {token_index} out of range (have {t})")));
    }
    let side = (n as f64).sqrt().round() as usize;
    let col: Vec<f32> = (0..n).map(|p| a.data()[p * t + token_index]).collect();
    Ok(bilinear(&col, side, out.resolution()))
}

/// Half-pixel-centred bilinear resize of a square map.
pub fn bilinear(src: &[f32], side: usize, target: usize) -> Tensor<f32> {
    let scale = side as f64 / target as f64;
    let coord = |o: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = vec![0.0f32; target * target];
    for y in 0..target {
        let (y0, y1, fy) = coord(y);
        for x in 0..target {
            let (x0, x1, fx) = coord(x);
            let v = |yy: usize, xx: usize| src[yy * side + xx] as f64;
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out[y * target + x] = (top * (1.0 - fy) + bot * fy) as f32;
        }
    }
    Tensor::new(&[target, target], out).expect("sizes match")
}

pub const DISC_SCALES: usize = 2;

/// Mask-conditioned patch discriminator applied at full and half resolution.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub classes: usize,
    scales: Vec<DiscScaleNet>,
}

#[derive(Clone, Debug)]
struct DiscScaleNet {
    convs: Vec<(Conv2d, Option<GroupNorm>)>,
    last: Conv2d,
}

/// Logits and intermediate activations of one discriminator scale.
pub struct DiscScale {
    pub logits: Var,
    pub features: Vec<Var>,
}

impl Discriminator {
    pub fn new(classes: usize) -> Self {
        let scales = (0..DISC_SCALES)
            .map(|s| {
                let p = format!("disc.s{s}");
                DiscScaleNet {
                    convs: vec![
                        (Conv2d::new(format!("{p}.c0"), 3 + classes, 32, 3, 2), None),
                        (Conv2d::new(format!("{p}.c1"), 32, 64, 3, 2), Some(GroupNorm::new(format!("{p}.n1"), 64, 4))),
                        (Conv2d::new(format!("{p}.c2"), 64, 64, 3, 1), Some(GroupNorm::new(format!("{p}.n2"), 64, 4))),
                    ],
                    last: Conv2d::new(format!("{p}.out"), 64, 1, 3, 1),
                }
            })
            .collect();
        Discriminator { classes, scales }
    }

    pub fn init(&self, ps: &mut ParamStore<f32>, rng: &mut impl Rng) {
        for s in &self.scales {
            for (c, n) in &s.convs {
                c.init(ps, rng, 1.0);
                if let Some(n) = n {
                    n.init(ps);
                }
            }
            s.last.init(ps, rng, 1.0);
        }
    }

    /// `image: [B, 3, H, W]`, `mask: [B, C, H, W]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, image: Var, mask: Var) -> Vec<DiscScale> {
        let mut x = g.concat1(&[image, mask]);
        let mut out = Vec::with_capacity(self.scales.len());
        for (i, net) in self.scales.iter().enumerate() {
            if i > 0 {
                x = g.avg_pool2x(x);
            }
            let mut h = x;
            let mut features = Vec::new();
            for (c, n) in &net.convs {
                h = c.forward(g, ps, h);
                if let Some(n) = n {
                    h = n.forward(g, ps, h);
                }
                h = g.leaky_relu(h, 0.2);
                features.push(h);
            }
            out.push(DiscScale { logits: net.last.forward(g, ps, h), features });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_for;

    fn weights(f: usize, ds: usize, dk: usize, salt: u64) -> CrossAttnWeights<f64> {
        let mut rng = rng_for(salt, "ca");
        let mk = |rng: &mut _, s: [usize; 2]| normal(rng, &s, 0.7).cast::<f64>();
        CrossAttnWeights {
            w_q: mk(&mut rng, [f, dk]),
            w_k: mk(&mut rng, [ds, dk]),
            w_v: mk(&mut rng, [ds, dk]),
            w_out: mk(&mut rng, [dk, f]),
        }
    }

    fn rand_t(shape: &[usize], salt: u64) -> Tensor<f64> {
        let mut rng = rng_for(salt, "t");
        normal(&mut rng, shape, 1.0).cast()
    }

    #[test]
    fn single_token_attends_fully() {
        let w = weights(4, 3, 5, 1);
        let x = rand_t(&[6, 4], 2);
        let tok = rand_t(&[1, 3], 3);
        let (y, a) = cross_attention(&x, &tok, &w).unwrap();
        assert!(a.data().iter().all(|&v| v == 1.0));
        // residual = (tok·W_V)·W_out on every row
        let mut vrow = [0.0; 5];
        for j in 0..5 {
            vrow[j] = (0..3).map(|i| tok.data()[i] * w.w_v.data()[i * 5 + j]).sum::<f64>();
        }
        for n in 0..6 {
            for f in 0..4 {
                let r: f64 = (0..5).map(|j| vrow[j] * w.w_out.data()[j * 4 + f]).sum();
                assert!((y.data()[n * 4 + f] - x.data()[n * 4 + f] - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let mut w = weights(4, 3, 5, 4);
        w.w_q.data_mut().fill(0.0);
        let x = rand_t(&[5, 4], 5);
        let tok = rand_t(&[4, 3], 6);
        let (_, a) = cross_attention(&x, &tok, &w).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn equal_keys_average_values() {
        let mut w = weights(2, 2, 2, 7);
        // identity W_V, W_out, so the update is the attended value itself
        w.w_v = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        w.w_out = w.w_v.clone();
        // tokens whose first coordinate differs only in a direction W_K ignores
        w.w_k = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let tok = Tensor::new(&[2, 2], vec![3.0, 0.5, -1.0, 0.5]).unwrap();
        let x = rand_t(&[3, 2], 8);
        let (y, a) = cross_attention(&x, &tok, &w).unwrap();
        for n in 0..3 {
            assert!((a.data()[n * 2] - 0.5).abs() < 1e-15);
            assert!((y.data()[n * 2] - x.data()[n * 2] - 1.0).abs() < 1e-12);
            assert!((y.data()[n * 2 + 1] - x.data()[n * 2 + 1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let w = weights(4, 3, 5, 1);
        let x = rand_t(&[6, 5], 2);
        let tok = rand_t(&[2, 3], 3);
        assert!(matches!(cross_attention(&x, &tok, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let c = CrossAttnBlockConfig { feature_dim: 6, head_count: 4, key_dim: 8 };
        assert!(c.validate().is_err());
        let bad = GeneratorConfig {
            resolution: 64,
            classes: 6,
            d_s: 64,
            channels: vec![64, 32],
            head_count: 1,
            self_attention: false,
        };
        assert!(bad.validate().is_err());
        assert_eq!(GeneratorConfig::default_channels(64), vec![64, 32, 16]);
        assert_eq!(GeneratorConfig::default_channels(32), vec![64, 32]);
    }

    #[test]
    fn heatmap_bounds_and_constant_case() {
        let out = GeneratorOutput {
            image: Tensor::zeros(&[3, 8, 8]),
            attention: vec![Tensor::full(&[4, 1], 1.0)],
        };
        let h = attention_heatmaps(&out, 0, 0).unwrap();
        assert!(h.data().iter().all(|&v| (v - 1.0).abs() < 1e-7));
        assert!(attention_heatmaps(&out, 1, 0).is_err());
        assert!(attention_heatmaps(&out, 0, 1).is_err());
    }

    #[test]
    fn bilinear_preserves_range_and_constants() {
        let src = [0.0, 1.0, 2.0, 3.0];
        let t = bilinear(&src, 2, 4);
        assert!(t.data().iter().all(|&v| (0.0..=3.0).contains(&v)));
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[15], 3.0);
    }
}

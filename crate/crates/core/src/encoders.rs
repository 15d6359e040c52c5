//! Mask embedder, per-class style encoder and conditioning tokens.
//!
//! Each class is encoded from its own masked copy of the reference image (a
//! grouped convolution over classes with shared weights), so a style code can
//! only ever see pixels of its own region.

use rand::Rng;

use crate::autograd::{avg_pool2x, Float, Graph, Tensor, Var};
use crate::data::{downsample_to, SemanticMask};
use crate::error::{Error, Result};
use crate::identity::IdentityEmbedding;
use crate::nn::{normal, Conv2d, GroupNorm, Linear, ParamStore};

/// Side of the mask descriptor grid.
pub const DESCRIPTOR_GRID: usize = 16;
/// Masks are area-downsampled to this side before the fully connected embedder.
pub const MASK_INPUT: usize = 32;
const MASK_HIDDEN: usize = 256;

/// `[C, 16, 16]` per-class mask embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDescriptor {
    pub grid: Tensor<f32>,
}

/// `[C, d_s]` style codes plus which rows are null codes.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCodeSet {
    pub codes: Tensor<f32>,
    pub null_flags: Vec<bool>,
}

impl StyleCodeSet {
    pub fn classes(&self) -> usize {
        self.codes.dim(0)
    }

    pub fn row(&self, c: usize) -> &[f32] {
        let d = self.codes.dim(1);
        &self.codes.data()[c * d..(c + 1) * d]
    }

    /// Copy row `c` from `other`.
    pub fn replace_row(&mut self, c: usize, other: &StyleCodeSet) {
        let d = self.codes.dim(1);
        self.codes.data_mut()[c * d..(c + 1) * d].copy_from_slice(other.row(c));
        self.null_flags[c] = other.null_flags[c];
    }
}

/// `[C+1, d_s]`: style codes in class order, then the identity token.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningTokens {
    pub tokens: Tensor<f32>,
}

impl ConditioningTokens {
    pub fn count(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn identity_row(&self) -> usize {
        self.count() - 1
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.tokens.dim(1);
        &self.tokens.data()[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.tokens.dim(1);
        &mut self.tokens.data_mut()[i * d..(i + 1) * d]
    }
}

/// Row-wise concatenation; no normalization.
pub fn assemble_tokens(styles: &StyleCodeSet, id_token: &[f32]) -> Result<ConditioningTokens> {
    let (c, d) = (styles.codes.dim(0), styles.codes.dim(1));
    if id_token.len() != d {
        return Err(Error::Shape(format!("identity token has {} dims, style codes {d}", id_token.len())));
    }
    let mut data = styles.codes.data().to_vec();
    data.extend_from_slice(id_token);
    Ok(ConditioningTokens { tokens: Tensor::new(&[c + 1, d], data)? })
}

/// Stack per-sample token sets into `[B, C+1, d_s]`.
pub fn stack_tokens(sets: &[&ConditioningTokens]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = sets
        .iter()
        .map(|t| {
            let s = t.tokens.shape();
            t.tokens.clone().reshape(&[1, s[0], s[1]])
        })
        .collect::<Result<_>>()?;
    Tensor::cat0(&parts.iter().collect::<Vec<_>>())
}

/// Two-layer MLP shared across classes on each flattened 32×32 mask channel.
#[derive(Clone, Debug)]
pub struct MaskEmbedder {
    pub classes: usize,
    fc1: Linear,
    fc2: Linear,
}

impl MaskEmbedder {
    pub fn new(classes: usize) -> Self {
        MaskEmbedder {
            classes,
            fc1: Linear::new("em.fc1", MASK_INPUT * MASK_INPUT, MASK_HIDDEN),
            fc2: Linear::new("em.fc2", MASK_HIDDEN, DESCRIPTOR_GRID * DESCRIPTOR_GRID),
        }
    }

    pub fn init(&self, ps: &mut ParamStore<f32>, rng: &mut impl Rng) {
        self.fc1.init(ps, rng, 2f64.sqrt());
        self.fc2.init(ps, rng, 1.0);
    }

    /// `[C, H, W]` mask → `[C, 32, 32]` area fractions (nearest-upsampled if smaller).
    pub fn prepare(mask: &SemanticMask) -> Result<Tensor<f32>> {
        mask.validate_partition()?;
        let h = mask.height();
        if h >= MASK_INPUT {
            downsample_to(&mask.channels, MASK_INPUT)
        } else {
            Err(Error::Shape(format!("mask side {h} is below the {MASK_INPUT}-pixel embedder input")))
        }
    }

    /// `prepared: [B, C, 32, 32]` → descriptor `[B, C, 16, 16]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, prepared: Var) -> Var {
        let s = g.shape(prepared).to_vec();
        let (b, c) = (s[0], s[1]);
        let rows = g.reshape(prepared, &[b * c, MASK_INPUT * MASK_INPUT]);
        let h = self.fc1.forward(g, ps, rows);
        let h = g.leaky_relu(h, 0.2);
        let out = self.fc2.forward(g, ps, h);
        g.reshape(out, &[b, c, DESCRIPTOR_GRID, DESCRIPTOR_GRID])
    }

    pub fn embed(&self, ps: &ParamStore<f32>, mask: &SemanticMask) -> Result<MaskDescriptor> {
        if mask.classes() != self.classes {
            return Err(Error::Shape(format!("mask has {} classes, model {}", mask.classes(), self.classes)));
        }
        let prepared = Self::prepare(mask)?.reshape(&[1, self.classes, MASK_INPUT, MASK_INPUT])?;
        let mut g = Graph::<f32>::new();
        let x = g.input(prepared);
        let y = self.forward(&mut g, ps, x);
        let grid = g.value(y).clone().reshape(&[self.classes, DESCRIPTOR_GRID, DESCRIPTOR_GRID])?;
        Ok(MaskDescriptor { grid })
    }
}

/// Constant per-batch inputs of the style encoder.
pub struct StyleInputs {
    /// `[B·C, 3, r/2, r/2]` masked, half-resolution images.
    pub masked: Tensor<f32>,
    /// `[B·C, P, 1]` pooling weights at `r/4` (rows sum to 1, or 0 if absent).
    pub pool: Tensor<f32>,
    /// One flag per `(sample, class)` row: class has nonzero area.
    pub present: Vec<bool>,
}

/// Convolutional trunk with group norm and a residual skip, masked average
/// pooling per class, a shared linear head plus per-class bias, and learned
/// null codes for empty regions.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pub classes: usize,
    pub d_s: usize,
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    conv3: Conv2d,
    gn3: GroupNorm,
    head: Linear,
}

const STYLE_C1: usize = 8;
const STYLE_C2: usize = 16;

impl StyleEncoder {
    pub fn new(classes: usize, d_s: usize) -> Self {
        StyleEncoder {
            classes,
            d_s,
            conv1: Conv2d::new("es.conv1", 3, STYLE_C1, 3, 1),
            gn1: GroupNorm::new("es.gn1", STYLE_C1, 4),
            conv2: Conv2d::new("es.conv2", STYLE_C1, STYLE_C2, 3, 2),
            gn2: GroupNorm::new("es.gn2", STYLE_C2, 4),
            conv3: Conv2d::new("es.conv3", STYLE_C2, STYLE_C2, 3, 1),
            gn3: GroupNorm::new("es.gn3", STYLE_C2, 4),
            head: Linear::new("es.head", STYLE_C2, d_s),
        }
    }

    pub fn init(&self, ps: &mut ParamStore<f32>, rng: &mut impl Rng) {
        self.conv1.init(ps, rng, 1.0);
        self.gn1.init(ps);
        self.conv2.init(ps, rng, 1.0);
        self.gn2.init(ps);
        self.conv3.init(ps, rng, 0.5);
        self.gn3.init(ps);
        self.head.init(ps, rng, 1.0);
        ps.insert("es.class_bias", Tensor::zeros(&[self.classes, self.d_s]));
        ps.insert("es.null", normal(rng, &[self.classes, self.d_s], 0.5));
    }

    /// Build the constant inputs for a batch of `(image, mask)` pairs.
    pub fn prepare(&self, pairs: &[(&Tensor<f32>, &SemanticMask)]) -> Result<StyleInputs> {
        let c = self.classes;
        let mut masked = Vec::new();
        let mut pool = Vec::new();
        let mut present = Vec::new();
        let mut res = 0;
        for (image, mask) in pairs {
            let r = mask.height();
            if image.shape() != [3, r, mask.width()] || r != mask.width() {
                return Err(Error::Shape(format!(
                    "image {:?} and mask {}x{} differ in resolution",
                    image.shape(),
                    r,
                    mask.width()
                )));
            }
            if mask.classes() != c {
                return Err(Error::Shape(format!("mask has {} classes, encoder {c}", mask.classes())));
            }
            if res != 0 && r != res {
                return Err(Error::Shape("mixed resolutions in one batch".into()));
            }
            res = r;
            let hw = r * r;
            let m = mask.channels.data();
            let frac = downsample_to(&mask.channels, r / 4)?;
            let p = (r / 4) * (r / 4);
            for ch in 0..c {
                let plane = &m[ch * hw..(ch + 1) * hw];
                let mut x = vec![0.0f32; 3 * hw];
                for k in 0..3 {
                    for (i, (&v, &w)) in image.data()[k * hw..(k + 1) * hw].iter().zip(plane).enumerate() {
                        x[k * hw + i] = v * w;
                    }
                }
                let half = avg_pool2x(&Tensor::new(&[1, 3, r, r], x)?);
                masked.extend_from_slice(half.data());
                let wts = &frac.data()[ch * p..(ch + 1) * p];
                let area: f64 = wts.iter().map(|&v| v as f64).sum();
                if area > 0.0 {
                    pool.extend(wts.iter().map(|&v| (v as f64 / area) as f32));
                    present.push(true);
                } else {
                    pool.extend(std::iter::repeat_n(0.0, p));
                    present.push(false);
                }
            }
        }
        let n = pairs.len() * c;
        let p = (res / 4) * (res / 4);
        Ok(StyleInputs {
            masked: Tensor::new(&[n, 3, res / 2, res / 2], masked)?,
            pool: Tensor::new(&[n, p, 1], pool)?,
            present,
        })
    }

    /// Codes `[B, C, d_s]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, inputs: &StyleInputs) -> Var {
        let n = inputs.present.len();
        let b = n / self.classes;
        let x = g.input(inputs.masked.cast());
        let h = self.conv1.forward(g, ps, x);
        let h = self.gn1.forward(g, ps, h);
        let h = g.leaky_relu(h, 0.2);
        let h = self.conv2.forward(g, ps, h);
        let h = self.gn2.forward(g, ps, h);
        let h1 = g.leaky_relu(h, 0.2);
        let h = self.conv3.forward(g, ps, h1);
        let h = self.gn3.forward(g, ps, h);
        let h = g.add(h, h1);
        let feats = g.leaky_relu(h, 0.2);
        let s = g.shape(feats).to_vec();
        let flat = g.reshape(feats, &[n, s[1], s[2] * s[3]]);
        let pool = g.input(inputs.pool.cast());
        let pooled = g.matmul(flat, pool, false, false);
        let pooled = g.reshape(pooled, &[n, s[1]]);
        let codes = self.head.forward(g, ps, pooled);
        let cb = g.param(ps, "es.class_bias");
        let cb = g.repeat(cb, b);
        let cb = g.reshape(cb, &[n, self.d_s]);
        let codes = g.add(codes, cb);
        // present rows keep their code, absent rows take the learned null code
        let mut keep = Vec::with_capacity(n * self.d_s);
        for &p in &inputs.present {
            let v = if p { T::one() } else { T::zero() };
            keep.extend(std::iter::repeat_n(v, self.d_s));
        }
        let drop: Vec<T> = keep.iter().map(|&k| T::one() - k).collect();
        let keep = g.input(Tensor::new(&[n, self.d_s], keep).expect("sizes match"));
        let drop = g.input(Tensor::new(&[n, self.d_s], drop).expect("sizes match"));
        let null = g.param(ps, "es.null");
        let null = g.repeat(null, b);
        let null = g.reshape(null, &[n, self.d_s]);
        let a = g.mul(codes, keep);
        let z = g.mul(null, drop);
        let out = g.add(a, z);
        g.reshape(out, &[b, self.classes, self.d_s])
    }

    pub fn extract(&self, ps: &ParamStore<f32>, image: &Tensor<f32>, mask: &SemanticMask) -> Result<StyleCodeSet> {
        let inputs = self.prepare(&[(image, mask)])?;
        let mut g = Graph::<f32>::new();
        let y = self.forward(&mut g, ps, &inputs);
        let codes = g.value(y).clone().reshape(&[self.classes, self.d_s])?;
        let null_flags = inputs.present.iter().map(|p| !p).collect();
        Ok(StyleCodeSet { codes, null_flags })
    }
}

/// Affine map from identity embeddings into the style-code space.
#[derive(Clone, Debug)]
pub struct IdProjection {
    pub d_id: usize,
    pub d_s: usize,
    lin: Linear,
}

impl IdProjection {
    pub fn new(d_id: usize, d_s: usize) -> Self {
        IdProjection { d_id, d_s, lin: Linear::new("proj", d_id, d_s) }
    }

    pub fn init(&self, ps: &mut ParamStore<f32>, rng: &mut impl Rng) {
        self.lin.init(ps, rng, 1.0);
    }

    /// `[B, d_id]` → `[B, 1, d_s]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, emb: Var) -> Var {
        let b = g.shape(emb)[0];
        let t = self.lin.forward(g, ps, emb);
        g.reshape(t, &[b, 1, self.d_s])
    }

    pub fn project(&self, ps: &ParamStore<f32>, emb: &IdentityEmbedding) -> Result<Vec<f32>> {
        if emb.vector.len() != self.d_id {
            return Err(Error::Shape(format!(
                "identity embedding has {} dims, projection expects {}",
                emb.vector.len(),
                self.d_id
            )));
        }
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(&[1, self.d_id], emb.vector.clone())?);
        let y = self.forward(&mut g, ps, x);
        Ok(g.value(y).data().to_vec())
    }
}

/// Assemble `[B, C+1, d_s]` tokens on the tape.
pub fn tokens_on_graph<T: Float>(g: &mut Graph<T>, styles: Var, id_token: Var) -> Var {
    g.concat1(&[styles, id_token])
}

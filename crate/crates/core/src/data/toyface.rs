//! Procedural toy faces: six-class label maps with matching RGB renders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::LabelMap;
use super::record::FaceRecord;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::{mix, splitmix};

pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const HAIR: u8 = 2;
pub const EYES: u8 = 3;
pub const EYEBROWS: u8 = 4;
pub const MOUTH: u8 = 5;

/// Painter's order: later classes overwrite earlier ones.
pub const TOY_CLASSES: [&str; 6] = ["background", "skin", "hair", "eyes", "eyebrows", "mouth"];

pub fn toy_class_names() -> Vec<String> {
    TOY_CLASSES.iter().map(|s| s.to_string()).collect()
}

/// Trait indices into [`ToyIdentitySpec::traits`].
pub mod traits {
    pub const FACE_ASPECT: usize = 0;
    pub const SKIN_TONE: usize = 1;
    pub const HAIR_TONE: usize = 2;
    pub const HAIR_LENGTH: usize = 3;
    pub const EYE_COLOR: usize = 4;
    pub const EYE_SPACING: usize = 5;
    pub const EYEBROW_THICKNESS: usize = 6;
    pub const MOUTH_WIDTH: usize = 7;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub resolution: usize,
    pub seed: u64,
    pub identity_count: usize,
    pub variations: usize,
    pub disjoint_identities: bool,
    pub class_names: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            resolution: 64,
            seed: 0,
            identity_count: 150,
            variations: 10,
            disjoint_identities: true,
            class_names: toy_class_names(),
        }
    }
}

impl DataConfig {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate_toy(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(Error::Config(format!("resolution {} is below the minimum of 32", self.resolution)));
        }
        if !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!("resolution {} must be a power of two", self.resolution)));
        }
        if self.class_names.len() != TOY_CLASSES.len() {
            return Err(Error::Config(format!(
                "the toy generator renders exactly {} classes, config has {}",
                TOY_CLASSES.len(),
                self.class_names.len()
            )));
        }
        Ok(())
    }
}

/// Subject identity: eight traits in [0, 1], a pure function of
/// `(identity_id, dataset seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyIdentitySpec {
    pub identity_id: u32,
    pub traits: [f32; 8],
}

impl ToyIdentitySpec {
    pub fn new(identity_id: u32, dataset_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(dataset_seed ^ splitmix(identity_id as u64), "identity"));
        let mut traits = [0.0f32; 8];
        for t in traits.iter_mut() {
            *t = rng.gen::<f32>();
        }
        ToyIdentitySpec { identity_id, traits }
    }
}

/// Seed of the `variation`-th render of an identity within a dataset.
pub fn variation_seed(dataset_seed: u64, identity_id: u32, variation: usize) -> u64 {
    mix(dataset_seed ^ splitmix(((identity_id as u64) << 20) | variation as u64), "variation")
}

type Rgb = [f32; 3];

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn ramp3(a: Rgb, b: Rgb, c: Rgb, t: f32) -> Rgb {
    if t < 0.5 {
        lerp(a, b, t * 2.0)
    } else {
        lerp(b, c, (t - 0.5) * 2.0)
    }
}

fn scale(c: Rgb, k: f32) -> Rgb {
    [c[0] * k, c[1] * k, c[2] * k]
}

fn in_ellipse(u: f32, v: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let a = (u - cx) / rx;
    let b = (v - cy) / ry;
    a * a + b * b
}

struct Nuisance {
    shift: (f32, f32),
    tint: Rgb,
    background: Rgb,
}

impl Nuisance {
    fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // ±0.1 in [-1, 1] coordinates is ±5% of the image width
        let shift = (rng.gen_range(-0.1..=0.1), rng.gen_range(-0.1..=0.1));
        let tint = [
            1.0 + rng.gen_range(-0.08..=0.08),
            1.0 + rng.gen_range(-0.08..=0.08),
            1.0 + rng.gen_range(-0.08..=0.08),
        ];
        let background = [rng.gen_range(0.15..0.9), rng.gen_range(0.15..0.9), rng.gen_range(0.15..0.9)];
        Nuisance { shift, tint, background }
    }
}

/// Render one record. Geometry and colours come from the identity traits;
/// translation, tint and background come from `variation_seed`.
pub fn generate_record(spec: &ToyIdentitySpec, variation_seed: u64, cfg: &DataConfig) -> Result<FaceRecord> {
    cfg.validate_toy()?;
    let res = cfg.resolution;
    let t = &spec.traits;
    let nz = Nuisance::draw(variation_seed);

    let aspect = t[traits::FACE_ASPECT];
    let face_rx = 0.50 - 0.08 * aspect;
    let face_ry = 0.60 + 0.14 * aspect;
    let (cx, cy) = (nz.shift.0, 0.05 + nz.shift.1);
    let hair_rx = face_rx + 0.09;
    let hair_ry = face_ry + 0.07;
    let fringe = -face_ry * 0.55;
    let hair_bottom = -0.2 + 0.85 * t[traits::HAIR_LENGTH];
    let eye_dx = 0.15 + 0.10 * t[traits::EYE_SPACING];
    let (eye_y, eye_rx, eye_ry) = (-0.05, 0.09, 0.06);
    let (brow_y, brow_rx) = (-0.19, 0.10);
    let brow_ry = 0.025 + 0.03 * t[traits::EYEBROW_THICKNESS];
    let (mouth_y, mouth_ry) = (0.33, 0.045);
    let mouth_rx = 0.09 + 0.11 * t[traits::MOUTH_WIDTH];

    let skin = lerp([0.96, 0.80, 0.69], [0.40, 0.26, 0.18], t[traits::SKIN_TONE]);
    let hair = ramp3([0.92, 0.80, 0.50], [0.45, 0.28, 0.14], [0.08, 0.07, 0.07], t[traits::HAIR_TONE]);
    let iris = ramp3([0.25, 0.50, 0.85], [0.30, 0.60, 0.30], [0.45, 0.28, 0.12], t[traits::EYE_COLOR]);
    let brow = scale(hair, 0.7);
    let lips = lerp([0.85, 0.35, 0.40], [0.55, 0.18, 0.22], t[traits::SKIN_TONE]);

    let mut labels = vec![BACKGROUND; res * res];
    let mut image = vec![0.0f32; 3 * res * res];
    for py in 0..res {
        for px in 0..res {
            let u = (px as f32 + 0.5) / res as f32 * 2.0 - 1.0 - cx;
            let v = (py as f32 + 0.5) / res as f32 * 2.0 - 1.0 - cy;
            let face_r = in_ellipse(u, v, 0.0, 0.0, face_rx, face_ry);
            let inside_face = face_r <= 1.0;
            let in_hair_shell = in_ellipse(u, v, 0.0, -0.06, hair_rx, hair_ry) <= 1.0;

            let mut label = BACKGROUND;
            let mut color = nz.background;
            if inside_face {
                label = SKIN;
                color = scale(skin, 1.0 - 0.12 * face_r);
            }
            if in_hair_shell && (v < fringe || (!inside_face && v < hair_bottom)) {
                label = HAIR;
                color = scale(hair, 1.0 + 0.08 * (40.0 * u + 10.0 * v).sin());
            }
            for side in [-1.0f32, 1.0] {
                let ex = side * eye_dx;
                if in_ellipse(u, v, ex, eye_y, eye_rx, eye_ry) <= 1.0 {
                    label = EYES;
                    let r2 = in_ellipse(u, v, ex, eye_y, 1.0, 1.0);
                    color = if r2 <= 0.017 * 0.017 {
                        [0.05, 0.05, 0.05]
                    } else if r2 <= 0.045 * 0.045 {
                        iris
                    } else {
                        [0.95, 0.95, 0.93]
                    };
                }
            }
            for side in [-1.0f32, 1.0] {
                if in_ellipse(u, v, side * eye_dx, brow_y, brow_rx, brow_ry) <= 1.0 {
                    label = EYEBROWS;
                    color = brow;
                }
            }
            if in_ellipse(u, v, 0.0, mouth_y, mouth_rx, mouth_ry) <= 1.0 {
                label = MOUTH;
                color = lips;
            }

            let p = py * res + px;
            labels[p] = label;
            for ch in 0..3 {
                let c = (color[ch] * nz.tint[ch]).clamp(0.0, 1.0);
                // 8-bit quantization keeps PNG round trips lossless
                let q = (c * 255.0).round();
                image[ch * res * res + p] = q / 127.5 - 1.0;
            }
        }
    }
    Ok(FaceRecord {
        image: Tensor::new(&[3, res, res], image)?,
        mask: LabelMap::new(res, res, labels)?,
        identity_id: spec.identity_id,
        variation_seed,
    })
}

/// All records of a toy dataset in `(identity, variation)` order.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Vec<FaceRecord>> {
    use rayon::prelude::*;
    cfg.validate_toy()?;
    let jobs: Vec<(u32, usize)> = (0..cfg.identity_count as u32)
        .flat_map(|id| (0..cfg.variations).map(move |v| (id, v)))
        .collect();
    jobs.par_iter()
        .map(|&(id, v)| generate_record(&ToyIdentitySpec::new(id, cfg.seed), variation_seed(cfg.seed, id, v), cfg))
        .collect()
}

use crate::autograd::{avg_pool2x, Tensor};
use crate::error::{Error, Result};

/// Per-pixel class labels, row-major `height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count of each class in `0..classes`.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
        h
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if let Some(i) = self.labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::Validation(format!(
                "label {} at pixel (row {}, col {}) is outside 0..{classes}",
                self.labels[i],
                i / self.width,
                i % self.width
            )));
        }
        Ok(())
    }
}

/// C binary planes partitioning the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMask {
    /// `[C, H, W]`, entries in {0, 1}.
    pub channels: Tensor<f32>,
    pub class_names: Vec<String>,
}

/// One-hot encode a label map into `classes` binary planes.
pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<SemanticMask> {
    labels.check_classes(classes)?;
    let hw = labels.height * labels.width;
    let mut data = vec![0.0f32; classes * hw];
    for (p, &l) in labels.labels.iter().enumerate() {
        data[l as usize * hw + p] = 1.0;
    }
    let channels = Tensor::new(&[classes, labels.height, labels.width], data)?;
    let class_names = (0..classes).map(|c| format!("class{c}")).collect();
    Ok(SemanticMask { channels, class_names })
}

impl SemanticMask {
    pub fn with_names(mut self, names: &[String]) -> Self {
        if names.len() == self.classes() {
            self.class_names = names.to_vec();
        }
        self
    }

    pub fn classes(&self) -> usize {
        self.channels.dim(0)
    }

    pub fn height(&self) -> usize {
        self.channels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.channels.dim(2)
    }

    /// Argmax decode back to labels.
    pub fn decode(&self) -> LabelMap {
        let (c, h, w) = (self.classes(), self.height(), self.width());
        let d = self.channels.data();
        let labels = (0..h * w)
            .map(|p| {
                (0..c)
                    .max_by(|&a, &b| d[a * h * w + p].total_cmp(&d[b * h * w + p]).then(b.cmp(&a)))
                    .unwrap_or(0) as u8
            })
            .collect();
        LabelMap { height: h, width: w, labels }
    }

    /// Every pixel has channel sum exactly 1 and binary entries.
    pub fn validate_partition(&self) -> Result<()> {
        let (c, hw) = (self.classes(), self.height() * self.width());
        let d = self.channels.data();
        for p in 0..hw {
            let mut sum = 0.0;
            for ch in 0..c {
                let v = d[ch * hw + p];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Validation(format!("mask value {v} at pixel {p} is not binary")));
                }
                sum += v;
            }
            if sum != 1.0 {
                return Err(Error::Validation(format!(
                    "mask channels at pixel (row {}, col {}) sum to {sum}, not 1",
                    p / self.width(),
                    p % self.width()
                )));
            }
        }
        Ok(())
    }

    /// Class-area fractions on a grid `size × size` (repeated 2x2 averaging).
    pub fn area_fractions(&self, size: usize) -> Result<Tensor<f32>> {
        downsample_to(&self.channels, size)
    }

    /// Channels present (nonzero area) in the mask.
    pub fn present(&self) -> Vec<bool> {
        let hw = self.height() * self.width();
        self.channels.data().chunks(hw).map(|ch| ch.iter().any(|&v| v > 0.0)).collect()
    }
}

/// Average-pool the trailing two axes by powers of two down to `size`.
pub fn downsample_to(t: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let h = s[s.len() - 2];
    if h < size || !h.is_multiple_of(size) || !(h / size).is_power_of_two() || s[s.len() - 1] != h {
        return Err(Error::Shape(format!("cannot downsample {s:?} to {size}x{size}")));
    }
    let mut cur = t.clone();
    while cur.shape()[cur.shape().len() - 2] > size {
        cur = avg_pool2x(&cur);
    }
    Ok(cur)
}

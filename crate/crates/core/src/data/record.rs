use crate::autograd::Tensor;

use super::mask::LabelMap;

/// One (image, mask, identity) sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceRecord {
    /// `[3, H, W]` in [-1, 1].
    pub image: Tensor<f32>,
    pub mask: LabelMap,
    pub identity_id: u32,
    pub variation_seed: u64,
}

impl FaceRecord {
    pub fn resolution(&self) -> usize {
        self.mask.height
    }
}

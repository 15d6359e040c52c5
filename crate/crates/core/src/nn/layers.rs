use rand::Rng;
use rand_distr::StandardNormal;

use super::ParamStore;
use crate::autograd::{Float, Graph, Tensor, Var};

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Square-kernel convolution with "same" padding for stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv2d { name: name.into(), in_ch, out_ch, kernel, stride, pad: kernel / 2, bias: true }
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut impl Rng, gain: f64) {
        let fan_in = (self.in_ch * self.kernel * self.kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        store.insert(
            format!("{}.w", self.name),
            normal(rng, &[self.out_ch, self.in_ch, self.kernel, self.kernel], std),
        );
        if self.bias {
            store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.out_ch]));
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, &format!("{}.w", self.name));
        let y = g.conv2d(x, w, self.stride, self.pad);
        if self.bias {
            let b = g.param(ps, &format!("{}.b", self.name));
            g.channel_bias(y, b)
        } else {
            y
        }
    }
}

/// `y = x·W + b` with `W: [in, out]` over rows of `x: [R, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear { name: name.into(), in_dim, out_dim }
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut impl Rng, gain: f64) {
        let std = gain / (self.in_dim as f64).sqrt();
        store.insert(format!("{}.w", self.name), normal(rng, &[self.in_dim, self.out_dim], std));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let rows = g.shape(x)[0];
        let w = g.param(ps, &format!("{}.w", self.name));
        let b = g.param(ps, &format!("{}.b", self.name));
        let y = g.matmul(x, w, false, false);
        let bb = g.repeat(b, rows);
        g.add(y, bb)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        GroupNorm { name: name.into(), channels, groups: groups.min(channels).max(1) }
    }

    pub fn init(&self, store: &mut ParamStore<f32>) {
        store.insert(format!("{}.gamma", self.name), Tensor::full(&[self.channels], 1.0));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(ps, &format!("{}.gamma", self.name));
        let beta = g.param(ps, &format!("{}.beta", self.name));
        g.group_norm(x, gamma, beta, self.groups)
    }
}

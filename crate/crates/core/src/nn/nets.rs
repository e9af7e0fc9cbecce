//! The segmentation U-Net and the discriminator classifier.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Gradients, Graph, Padding, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Number of 2x poolings in the U-Net; chip sides must be divisible by `2^POOL_DEPTH`.
pub const POOL_DEPTH: usize = 2;
const DISC_SLOPE: f64 = 0.2;

/// A named weight tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self { name: name.into(), value, grad }
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensor<U> {
        ParamTensor { name: self.name.clone(), value: self.value.cast(), grad: self.grad.cast() }
    }
}

fn he_conv<T: Scalar, R: Rng>(rng: &mut R, name: &str, out_c: usize, in_c: usize, k: usize) -> [ParamTensor<T>; 2] {
    let fan_in = in_c * k * k;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let w = (0..out_c * fan_in).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    [
        ParamTensor::new(format!("{name}.w"), Tensor::new(vec![out_c, in_c, k, k], w)),
        ParamTensor::new(format!("{name}.b"), Tensor::zeros(vec![out_c])),
    ]
}

/// Shared parameter plumbing for both networks.
pub trait Network<T: Scalar> {
    fn params(&self) -> &[ParamTensor<T>];
    fn params_mut(&mut self) -> &mut [ParamTensor<T>];

    /// Places every parameter on `g`; `trainable` decides whether gradients flow to them.
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params()
            .iter()
            .map(|p| if trainable { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect()
    }

    /// Adds the gradients of bound parameters into their accumulators.
    fn accumulate(&mut self, grads: &Gradients<T>, bound: &[Var]) {
        for (p, v) in self.params_mut().iter_mut().zip(bound) {
            if let Some(g) = grads.get(*v) {
                p.grad.add_assign(g);
            }
        }
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Order-sensitive FNV-1a digest of the weights, for change detection.
    fn weight_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for v in p.value.data() {
                for byte in v.to_f64_lossy().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Three-level U-Net with skip concatenations and a logistic 1x1 head.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<T = f32> {
    in_channels: usize,
    base: usize,
    params: Vec<ParamTensor<T>>,
}

// parameter pairs (w, b) in order
const SEG_LAYERS: usize = 11;
const SEG_HEAD: usize = SEG_LAYERS - 1;

impl<T: Scalar> SegNet<T> {
    /// `base` is the first level width; the others are `2*base` and `4*base`.
    pub fn new<R: Rng>(in_channels: usize, base: usize, zero_head: bool, rng: &mut R) -> Self {
        let (c1, c2, c3) = (base, 2 * base, 4 * base);
        let specs: [(&str, usize, usize, usize); SEG_LAYERS] = [
            ("enc1a", c1, in_channels, 3),
            ("enc1b", c1, c1, 3),
            ("enc2a", c2, c1, 3),
            ("enc2b", c2, c2, 3),
            ("mid_a", c3, c2, 3),
            ("mid_b", c3, c3, 3),
            ("dec2a", c2, c3 + c2, 3),
            ("dec2b", c2, c2, 3),
            ("dec1a", c1, c2 + c1, 3),
            ("dec1b", c1, c1, 3),
            ("head", 1, c1, 1),
        ];
        let mut params = Vec::with_capacity(2 * SEG_LAYERS);
        for (name, o, i, k) in specs {
            params.extend(he_conv(rng, name, o, i, k));
        }
        if zero_head {
            for p in &mut params[2 * SEG_HEAD..] {
                p.value.data_mut().fill(T::zero());
            }
        }
        Self { in_channels, base, params }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn base(&self) -> usize {
        self.base
    }

    /// Rebuilds a net from loaded parameters, checking names and shapes.
    pub fn from_params(in_channels: usize, base: usize, params: Vec<ParamTensor<T>>) -> Result<Self> {
        let template = Self::new(in_channels, base, true, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        check_layout(&template.params, &params)?;
        Ok(Self { in_channels, base, params })
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        SegNet { in_channels: self.in_channels, base: self.base, params: self.params.iter().map(|p| p.cast()).collect() }
    }

    /// `N x in_channels x H x W` input to `N x 1 x H x W` probabilities.
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Contract(format!("segnet expects N x {} x H x W input, got {s:?}", self.in_channels)));
        }
        let div = 1 << POOL_DEPTH;
        if s[2] != s[3] || s[2] % div != 0 || s[2] == 0 {
            return Err(Error::Contract(format!("segnet needs square chips with side divisible by {div}, got {}x{}", s[2], s[3])));
        }
        let conv = |g: &mut Graph<T>, layer: usize, x: Var| -> Result<Var> {
            let y = g.conv2d(x, bound[2 * layer], bound[2 * layer + 1], 1, Padding::Same)?;
            Ok(g.relu(y))
        };
        let e1 = conv(g, 0, x)?;
        let e1 = conv(g, 1, e1)?;
        let p1 = g.max_pool2(e1)?;
        let e2 = conv(g, 2, p1)?;
        let e2 = conv(g, 3, e2)?;
        let p2 = g.max_pool2(e2)?;
        let m = conv(g, 4, p2)?;
        let m = conv(g, 5, m)?;
        let u2 = g.upsample2(m)?;
        let c2 = g.concat(u2, e2)?;
        let d2 = conv(g, 6, c2)?;
        let d2 = conv(g, 7, d2)?;
        let u1 = g.upsample2(d2)?;
        let c1 = g.concat(u1, e1)?;
        let d1 = conv(g, 8, c1)?;
        let d1 = conv(g, 9, d1)?;
        let logits = g.conv2d(d1, bound[2 * SEG_HEAD], bound[2 * SEG_HEAD + 1], 1, Padding::Valid)?;
        Ok(g.logistic(logits))
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x);
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Scalar> Network<T> for SegNet<T> {
    fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }
}

/// Strided convolutional encoder, global average pool and a logistic unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscNet<T = f32> {
    in_channels: usize,
    base: usize,
    params: Vec<ParamTensor<T>>,
}

const DISC_BLOCKS: usize = 4;

impl<T: Scalar> DiscNet<T> {
    pub fn new<R: Rng>(in_channels: usize, base: usize, zero_head: bool, rng: &mut R) -> Self {
        let widths = [base, 2 * base, 4 * base, 4 * base];
        let mut params = Vec::with_capacity(2 * DISC_BLOCKS + 2);
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            params.extend(he_conv(rng, &format!("block{}", i + 1), w, prev, 3));
            prev = w;
        }
        let normal = Normal::new(0.0, (1.0 / prev as f64).sqrt()).expect("positive std");
        let w = (0..prev)
            .map(|_| if zero_head { T::zero() } else { T::from_f64_lossy(normal.sample(rng)) })
            .collect();
        params.push(ParamTensor::new("head.w", Tensor::new(vec![1, prev], w)));
        params.push(ParamTensor::new("head.b", Tensor::zeros(vec![1])));
        Self { in_channels, base, params }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn from_params(in_channels: usize, base: usize, params: Vec<ParamTensor<T>>) -> Result<Self> {
        let template = Self::new(in_channels, base, true, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        check_layout(&template.params, &params)?;
        Ok(Self { in_channels, base, params })
    }

    pub fn cast<U: Scalar>(&self) -> DiscNet<U> {
        DiscNet { in_channels: self.in_channels, base: self.base, params: self.params.iter().map(|p| p.cast()).collect() }
    }

    /// `N x C x H x W` images to `N x 1` probabilities of being real.
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Contract(format!("discnet expects N x {} x H x W input, got {s:?}", self.in_channels)));
        }
        let slope = T::from_f64_lossy(DISC_SLOPE);
        let mut h = x;
        for i in 0..DISC_BLOCKS {
            let y = g.conv2d(h, bound[2 * i], bound[2 * i + 1], 2, Padding::Same)?;
            h = g.leaky_relu(y, slope);
        }
        let pooled = g.global_avg_pool(h)?;
        let logit = g.linear(pooled, bound[2 * DISC_BLOCKS], bound[2 * DISC_BLOCKS + 1])?;
        Ok(g.logistic(logit))
    }

    pub fn predict(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x);
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Scalar> Network<T> for DiscNet<T> {
    fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }
}

fn check_layout<T: Scalar>(expected: &[ParamTensor<T>], got: &[ParamTensor<T>]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), got.len())));
    }
    for (e, g) in expected.iter().zip(got) {
        if e.name != g.name || e.value.shape() != g.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                g.name,
                g.value.shape(),
                e.name,
                e.value.shape()
            )));
        }
    }
    Ok(())
}

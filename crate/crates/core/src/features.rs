//! Feature and context encoders, the correlation pyramid and its lookup.

use msf_autograd::nn::{instance_norm, Bound, Conv2d, Init, ParamStore};
use msf_autograd::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MsfError, Result};

/// Downsampling factor of every encoder.
pub const FEATURE_STRIDE: usize = 8;
pub const PYRAMID_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn other(self) -> Self {
        match self {
            Self::Forward => Self::Backward,
            Self::Backward => Self::Forward,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextState<T> {
    pub g: Tensor<T>,
    pub h0: Tensor<T>,
}

pub fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(MsfError::NotDivisible { height: h, width: w });
    }
    Ok(())
}

fn check_image<T: Scalar>(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape[0] != 3 {
        return Err(MsfError::Shape(format!("image must be [3, H, W], got {shape:?}")));
    }
    check_divisible(shape[1], shape[2])
}

/// Three stride-2 3x3 blocks (conv, instance norm, ReLU) and a 1x1 head.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl FeatureEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, widths: [usize; 3], out_dim: usize) -> Self {
        let mut blocks = Vec::with_capacity(3);
        let mut in_ch = 3;
        for (i, &c) in widths.iter().enumerate() {
            blocks.push(Conv2d::new(init, &format!("{name}.block{i}"), in_ch, c, 3, 2, 2f64.sqrt()));
            in_ch = c;
        }
        let head = Conv2d::new(init, &format!("{name}.head"), in_ch, out_dim, 1, 1, 1.0);
        Self { blocks, head }
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_ch
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        check_image::<T>(&image.shape())?;
        let mut x = image;
        for b in &self.blocks {
            x = instance_norm(b.forward(p, x), 1e-5).relu();
        }
        Ok(self.head.forward(p, x))
    }

    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<FeatureMap<T>> {
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let v = self.forward(&p, tape.constant(image.clone()))?.value();
        Ok(FeatureMap { values: (*v).clone(), scale: FEATURE_STRIDE })
    }
}

/// Encoder whose output splits into the context feature `g` (ReLU) and the
/// initial hidden state `h0` (tanh).
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    encoder: FeatureEncoder,
    pub context_dim: usize,
    pub hidden_dim: usize,
}

impl ContextEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, widths: [usize; 3], context_dim: usize, hidden_dim: usize) -> Self {
        Self { encoder: FeatureEncoder::new(init, name, widths, context_dim + hidden_dim), context_dim, hidden_dim }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let out = self.encoder.forward(p, image)?;
        let g = out.narrow(0, 0, self.context_dim).relu();
        let h0 = out.narrow(0, self.context_dim, self.hidden_dim).tanh();
        Ok((g, h0))
    }

    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<ContextState<T>> {
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let (g, h0) = self.forward(&p, tape.constant(image.clone()))?;
        Ok(ContextState { g: (*g.value()).clone(), h0: (*h0.value()).clone() })
    }
}

/// All-pairs correlation volumes. Level `k` has shape `[h*w, h_k, w_k]`:
/// one plane over target positions per reference position.
pub struct CorrelationPyramid<'t, T> {
    pub levels: Vec<Var<'t, T>>,
    pub height: usize,
    pub width: usize,
    pub direction: Direction,
}

/// 2x2 average pooling over the last two axes; axes already of size 1 are
/// left alone so coarse levels of small maps stay non-empty.
fn pool_level<'t, T: Scalar>(v: Var<'t, T>) -> Var<'t, T> {
    let s = v.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let kh = if h >= 2 { 2 } else { 1 };
    let kw = if w >= 2 { 2 } else { 1 };
    v.avg_pool2d_rect((kh, kw), (kh, kw))
}

/// Builds the pyramid between reference features `f1` and target `f2`
/// (`[C, h, w]` each). Level 1 is `f1^T f2 / sqrt(C)`.
pub fn build_corr_pyramid<'t, T: Scalar>(f1: Var<'t, T>, f2: Var<'t, T>, direction: Direction) -> Result<CorrelationPyramid<'t, T>> {
    let (s1, s2) = (f1.shape(), f2.shape());
    if s1 != s2 || s1.len() != 3 {
        return Err(MsfError::Shape(format!("feature maps {s1:?} and {s2:?} must match")));
    }
    let (c, h, w) = (s1[0], s1[1], s1[2]);
    let a = f1.reshape(&[c, h * w]).t();
    let b = f2.reshape(&[c, h * w]);
    let norm = T::from_usize_lossy(c).sqrt().recip();
    let mut levels = vec![a.matmul(b).scale(norm).reshape(&[h * w, h, w])];
    for _ in 1..PYRAMID_LEVELS {
        let next = pool_level(*levels.last().unwrap());
        levels.push(next);
    }
    Ok(CorrelationPyramid { levels, height: h, width: w, direction })
}

impl<'t, T: Scalar> CorrelationPyramid<'t, T> {
    /// Channels produced by [`Self::lookup`] for `radius`.
    pub fn lookup_channels(radius: usize) -> usize {
        (2 * radius + 1) * (2 * radius + 1) * PYRAMID_LEVELS
    }

    /// Samples a `(2r+1)^2` window around `positions` (`[2, h, w]`, x then y,
    /// in level-1 pixels) at every level; level `k` uses `positions / 2^(k-1)`.
    /// Output `[(2r+1)^2 * 4, h, w]`, level-major then row-major offsets.
    pub fn lookup(&self, positions: Var<'t, T>, radius: usize) -> Var<'t, T> {
        let (h, w) = (self.height, self.width);
        assert_eq!(positions.shape(), [2, h, w], "lookup positions must be [2, h, w]");
        let centers = positions.reshape(&[2, h * w]);
        let taps = (2 * radius + 1) * (2 * radius + 1);
        let mut parts = Vec::with_capacity(self.levels.len());
        for (k, level) in self.levels.iter().enumerate() {
            let scaled = centers.scale(T::lit(0.5f64.powi(k as i32)));
            parts.push(level.window_lookup(scaled, radius));
        }
        Var::concat(&parts, 0).reshape(&[taps * self.levels.len(), h, w])
    }
}

//! Geometry-motion features: projection from the hidden state, bidirectional
//! temporal fusion, the motion encoder and relative positional attention.

use msf_autograd::nn::{Bound, Conv2d, Init, ParamId};
use msf_autograd::{Scalar, Tensor, Var};

use crate::error::{MsfError, Result};
use crate::features::Direction;

/// Three convolutions (3x3, 3x3, 1x1) with ReLU between them.
#[derive(Clone, Debug)]
pub struct GmfProjection {
    layers: [Conv2d; 3],
}

impl GmfProjection {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, hidden_dim: usize, gmf_dim: usize) -> Self {
        let g = 2f64.sqrt();
        Self {
            layers: [
                Conv2d::new(init, "gmf.proj0", hidden_dim, gmf_dim, 3, 1, g),
                Conv2d::new(init, "gmf.proj1", gmf_dim, gmf_dim, 3, 1, g),
                Conv2d::new(init, "gmf.proj2", gmf_dim, gmf_dim, 1, 1, 1.0),
            ],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers[2].out_ch
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, hidden: Var<'t, T>) -> Var<'t, T> {
        let x = self.layers[0].forward(p, hidden).relu();
        let x = self.layers[1].forward(p, x).relu();
        self.layers[2].forward(p, x)
    }
}

/// Output of the fusion network together with the tensor it consumed.
pub struct Fused<'t, T> {
    pub output: Var<'t, T>,
    pub input: Var<'t, T>,
}

/// Two convolutions with a ReLU, applied to `[own, -other]`.
#[derive(Clone, Debug)]
pub struct TemporalFusion {
    c1: Conv2d,
    c2: Conv2d,
}

impl TemporalFusion {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, gmf_dim: usize) -> Self {
        Self {
            c1: Conv2d::new(init, "gmf.fuse0", 2 * gmf_dim, gmf_dim, 3, 1, 2f64.sqrt()),
            c2: Conv2d::new(init, "gmf.fuse1", gmf_dim, gmf_dim, 3, 1, 1.0),
        }
    }

    /// Fuses the GMF pair for the branch `direction`. The opposite branch's
    /// GMF is negated and, when `detach_other`, cut from the gradient.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        gmf_fwd: Var<'t, T>,
        gmf_bwd: Var<'t, T>,
        direction: Direction,
        detach_other: bool,
    ) -> Result<Fused<'t, T>> {
        if gmf_fwd.shape() != gmf_bwd.shape() {
            return Err(MsfError::Shape(format!("GMF shapes {:?} and {:?} differ", gmf_fwd.shape(), gmf_bwd.shape())));
        }
        let (own, other) = match direction {
            Direction::Forward => (gmf_fwd, gmf_bwd),
            Direction::Backward => (gmf_bwd, gmf_fwd),
        };
        let other = if detach_other { other.detach() } else { other };
        let input = Var::concat(&[own, other.neg()], 0);
        let output = self.c2.forward(p, self.c1.forward(p, input).relu());
        Ok(Fused { output, input })
    }
}

/// Channel widths of the motion sub-encoders.
const SF_ENC: usize = 16;
const OF_ENC: usize = 16;
const D_ENC: usize = 8;
const CORR_ENC: [usize; 2] = [48, 32];
const GMF_ENC: usize = 32;

/// Separate encoders for scene flow, optical flow, disparity, correlation
/// and fused GMF, concatenated and mixed by one convolution.
#[derive(Clone, Debug)]
pub struct MotionEncoder {
    sf: Conv2d,
    of: Conv2d,
    disp: Conv2d,
    corr: [Conv2d; 2],
    gmf: Conv2d,
    out: Conv2d,
}

pub struct MotionInputs<'t, T> {
    pub scene_flow: Var<'t, T>,
    pub optical_flow: Var<'t, T>,
    pub disparity: Var<'t, T>,
    pub correlation: Var<'t, T>,
    pub gmf: Var<'t, T>,
}

impl MotionEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, corr_ch: usize, gmf_dim: usize, motion_dim: usize) -> Self {
        let g = 2f64.sqrt();
        let cat = SF_ENC + OF_ENC + D_ENC + CORR_ENC[1] + GMF_ENC;
        Self {
            sf: Conv2d::new(init, "motion.sf", 3, SF_ENC, 3, 1, g),
            of: Conv2d::new(init, "motion.of", 2, OF_ENC, 3, 1, g),
            disp: Conv2d::new(init, "motion.disp", 1, D_ENC, 3, 1, g),
            corr: [
                Conv2d::new(init, "motion.corr0", corr_ch, CORR_ENC[0], 1, 1, g),
                Conv2d::new(init, "motion.corr1", CORR_ENC[0], CORR_ENC[1], 3, 1, g),
            ],
            gmf: Conv2d::new(init, "motion.gmf", gmf_dim, GMF_ENC, 3, 1, g),
            out: Conv2d::new(init, "motion.out", cat, motion_dim, 3, 1, g),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_ch
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &MotionInputs<'t, T>) -> Result<Var<'t, T>> {
        let spatial = |v: &Var<'t, T>| v.shape()[1..].to_vec();
        let hw = spatial(&x.scene_flow);
        for v in [&x.optical_flow, &x.disparity, &x.correlation, &x.gmf] {
            if spatial(v) != hw {
                return Err(MsfError::Shape(format!("motion input {:?} does not match {hw:?}", v.shape())));
            }
        }
        let corr = self.corr[1].forward(p, self.corr[0].forward(p, x.correlation).relu()).relu();
        let parts = [
            self.sf.forward(p, x.scene_flow).relu(),
            self.of.forward(p, x.optical_flow).relu(),
            self.disp.forward(p, x.disparity).relu(),
            corr,
            self.gmf.forward(p, x.gmf).relu(),
        ];
        Ok(self.out.forward(p, Var::concat(&parts, 0)).relu())
    }
}

/// Position-only attention over the `h x w` low-resolution grid.
#[derive(Clone, Debug)]
pub struct PositionalAttention {
    query: Conv2d,
    value: Conv2d,
    pub p_h: ParamId,
    pub p_w: ParamId,
    pub alpha: ParamId,
    pub dim: usize,
    /// Grid size the embedding tables were created for.
    pub grid: (usize, usize),
}

/// `[n_out, n_in]` linear resampling of an offset table with `2*src-1` rows
/// to `2*dst-1` rows, mapping the extreme offsets onto each other.
fn resample_matrix<T: Scalar>(src: usize, dst: usize) -> Tensor<T> {
    let (n_in, n_out) = (2 * src - 1, 2 * dst - 1);
    let mut m = Tensor::zeros(&[n_out, n_in]);
    let ratio = if dst > 1 { (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
    for r in 0..n_out {
        let offset = r as f64 - (dst - 1) as f64;
        let pos = (offset * ratio + (src - 1) as f64).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        m.data_mut()[r * n_in + lo] += T::lit(1.0 - frac);
        if frac > 0.0 {
            m.data_mut()[r * n_in + lo + 1] += T::lit(frac);
        }
    }
    m
}

impl PositionalAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, context_dim: usize, motion_dim: usize, dim: usize, grid: (usize, usize)) -> Self {
        let query = Conv2d::without_bias(init, "attn.query", context_dim, dim, 1, 1.0);
        let value = Conv2d::without_bias(init, "attn.value", motion_dim, motion_dim, 1, 1.0);
        let p_h = init.uniform("attn.p_h".into(), &[2 * grid.0 - 1, dim], 0.5);
        let p_w = init.uniform("attn.p_w".into(), &[2 * grid.1 - 1, dim], 0.5);
        let alpha = init.zeros("attn.alpha".into(), &[1]);
        Self { query, value, p_h, p_w, alpha, dim, grid }
    }

    pub fn query_weight(&self) -> ParamId {
        self.query.weight
    }

    pub fn value_weight(&self) -> ParamId {
        self.value.weight
    }

    /// Offset tables for an `h x w` grid, resampled when it differs from the
    /// creation grid.
    pub fn tables<'t, T: Scalar>(&self, p: &Bound<'t, T>, h: usize, w: usize) -> (Var<'t, T>, Var<'t, T>) {
        let tape = p.tape();
        let fit = |table: Var<'t, T>, src: usize, dst: usize| {
            if src == dst {
                table
            } else {
                tape.constant(resample_matrix(src, dst)).matmul(table)
            }
        };
        (fit(p.get(self.p_h), self.grid.0, h), fit(p.get(self.p_w), self.grid.1, w))
    }

    /// Row-stochastic `[S, S]` attention from the context feature `g`.
    pub fn attention_map<'t, T: Scalar>(&self, p: &Bound<'t, T>, g: Var<'t, T>) -> Var<'t, T> {
        let s = g.shape();
        let (h, w) = (s[1], s[2]);
        let (ph, pw) = self.tables(p, h, w);
        let q = self.query.forward(p, g).reshape(&[self.dim, h * w]).t();
        attention_from_query(q, ph, pw, h, w)
    }

    /// `M + alpha * reshape(A . sigma(M))`.
    pub fn aggregate<'t, T: Scalar>(&self, p: &Bound<'t, T>, m: Var<'t, T>, a: Var<'t, T>) -> Var<'t, T> {
        let v = self.value.forward(p, m);
        aggregate_with(m, v, a, p.get(self.alpha))
    }
}

/// Attention from an explicit `[S, D]` query and offset tables.
pub fn attention_from_query<'t, T: Scalar>(q: Var<'t, T>, p_h: Var<'t, T>, p_w: Var<'t, T>, h: usize, w: usize) -> Var<'t, T> {
    let d = q.shape()[1];
    let lv = q.matmul(p_h.t());
    let lh = q.matmul(p_w.t());
    let scale = T::from_usize_lossy(d).sqrt().recip();
    lv.relative_position_logits(lh, h, w).scale(scale).softmax(1)
}

/// `M + alpha * reshape(A . flatten(V))` for a value map `V` of `M`'s shape.
pub fn aggregate_with<'t, T: Scalar>(m: Var<'t, T>, v: Var<'t, T>, a: Var<'t, T>, alpha: Var<'t, T>) -> Var<'t, T> {
    let shape = m.shape();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let mixed = a.matmul(v.reshape(&[c, n]).t()).t().reshape(&shape);
    m + mixed * alpha.reshape(&[1, 1, 1])
}

/// Materializes `P[(i,j),(i',j')] = p_h[i'-i] + p_w[j'-j]` as `[S, S, D]`.
pub fn positional_embedding<T: Scalar>(p_h: &Tensor<T>, p_w: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let d = p_h.dim(1);
    let (mh, mw) = ((p_h.dim(0) + 1) / 2, (p_w.dim(0) + 1) / 2);
    let s = h * w;
    let mut out = Tensor::zeros(&[s, s, d]);
    for q in 0..s {
        let (i, j) = (q / w, q % w);
        for k in 0..s {
            let (ii, jj) = (k / w, k % w);
            let rv = ii + mh - 1 - i;
            let rh = jj + mw - 1 - j;
            for c in 0..d {
                let v = p_h.data()[rv * d + c] + p_w.data()[rh * d + c];
                out.data_mut()[(q * s + k) * d + c] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use msf_autograd::Tape;

    #[test]
    fn resample_identity_and_endpoints() {
        let m = resample_matrix::<f64>(4, 4);
        for r in 0..7 {
            for c in 0..7 {
                assert_eq!(m.data()[r * 7 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
        let m = resample_matrix::<f64>(8, 4);
        assert_eq!(m.shape(), &[7, 15]);
        assert_eq!(m.data()[0], 1.0);
        assert_eq!(m.data()[3 * 15 + 7], 1.0);
        assert_eq!(m.data()[6 * 15 + 14], 1.0);
    }

    #[test]
    fn hand_computed_attention_on_2x2() {
        let tape = Tape::<f64>::new();
        // S = 4, D = 1. Queries and tables chosen by hand.
        let q = tape.constant(Tensor::from_f64(&[4, 1], &[1.0, 0.0, -1.0, 2.0]));
        let ph = tape.constant(Tensor::from_f64(&[3, 1], &[0.1, 0.0, 0.3]));
        let pw = tape.constant(Tensor::from_f64(&[3, 1], &[-0.2, 0.5, 0.4]));
        let a = attention_from_query(q, ph, pw, 2, 2).value();
        let qs = [1.0, 0.0, -1.0, 2.0];
        let (ph, pw) = ([0.1, 0.0, 0.3], [-0.2, 0.5, 0.4]);
        for r in 0..4 {
            let (i, j) = (r / 2, r % 2);
            let logits: Vec<f64> = (0..4)
                .map(|k| {
                    let (ii, jj) = (k / 2, k % 2);
                    qs[r] * (ph[ii + 1 - i] + pw[jj + 1 - j])
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..4 {
                assert!((a.data()[r * 4 + k] - logits[k].exp() / z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn uniform_attention_averages() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let a = tape.constant(Tensor::full(&[6, 6], 1.0 / 6.0));
        let alpha = tape.constant(Tensor::from_f64(&[1], &[0.5]));
        let out = aggregate_with(m, m, a, alpha).value();
        let mean = [2.5, 8.5];
        for i in 0..12 {
            let expected = i as f64 + 0.5 * mean[i / 6];
            assert!((out.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_attention_adds_permuted() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::from_fn(&[1, 1, 4], |i| (i * i) as f64));
        let perm = [2usize, 0, 3, 1];
        let a = tape.constant(Tensor::from_fn(&[4, 4], |i| if perm[i / 4] == i % 4 { 1.0 } else { 0.0 }));
        let alpha = tape.constant(Tensor::from_f64(&[1], &[1.0]));
        let out = aggregate_with(m, m, a, alpha).value();
        for i in 0..4 {
            assert_eq!(out.data()[i], (i * i + perm[i] * perm[i]) as f64);
        }
    }
}

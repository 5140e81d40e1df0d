//! Matrix products, 2-D convolution and softmax.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::{Scalar, Tensor, Var};

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    let av = if ta {
        ArrayView2::from_shape((m, k).strides((1, m)), a).expect("gemm lhs")
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let bv = if tb {
        ArrayView2::from_shape((k, n).strides((1, k)), b).expect("gemm rhs")
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    let mut col = vec![T::zero(); c * k * k * p];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ch * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
        let (m, k) = (a.dim(0), a.dim(1));
        let n = b.dim(1);
        assert_eq!(b.dim(0), k, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        gemm(m, n, k, a.data(), false, b.data(), false, &mut out, T::zero());
        self.push(
            Tensor::new(&[m, n], out),
            &[self, other],
            Box::new(move |args| {
                let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad.data());
                let mut ga = vec![T::zero(); m * k];
                gemm(m, k, n, g, false, b.data(), true, &mut ga, T::zero());
                let mut gb = vec![T::zero(); k * n];
                gemm(k, n, m, a.data(), true, g, false, &mut gb, T::zero());
                vec![Some(Tensor::new(&[m, k], ga)), Some(Tensor::new(&[k, n], gb))]
            }),
        )
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, k, k]` weights and
    /// zero padding.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Var<'t, T> {
        let (x, wt) = (self.value(), weight.value());
        assert_eq!(x.rank(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(wt.rank(), 4, "conv2d weight must be [O, C, k, k]");
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let (o, k) = (wt.dim(0), wt.dim(2));
        assert_eq!(wt.dim(1), c, "conv2d channel mismatch: input {c}, weight {}", wt.dim(1));
        assert_eq!(wt.dim(3), k, "conv2d kernel must be square");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let ck = c * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;

        let mut out = vec![T::zero(); o * p];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.numel(), o, "conv2d bias size mismatch");
            for (oc, row) in out.chunks_mut(p).enumerate() {
                row.fill(bv.data()[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if direct {
            gemm(o, p, ck, wt.data(), false, x.data(), false, &mut out, beta);
        } else {
            let col = im2col(x.data(), c, h, w, k, stride, pad, ho, wo);
            gemm(o, p, ck, wt.data(), false, &col, false, &mut out, beta);
        }
        let parents: Vec<Var<'t, T>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        let has_bias = bias.is_some();
        self.push(
            Tensor::new(&[o, ho, wo], out),
            &parents,
            Box::new(move |args| {
                let (x, wt, g) = (args.inputs[0], args.inputs[1], args.grad.data());
                let col_owned;
                let col: &[T] = if direct {
                    x.data()
                } else {
                    col_owned = im2col(x.data(), c, h, w, k, stride, pad, ho, wo);
                    &col_owned
                };
                let mut gw = vec![T::zero(); o * ck];
                gemm(o, ck, p, g, false, col, true, &mut gw, T::zero());
                let mut gcol = vec![T::zero(); ck * p];
                gemm(ck, p, o, wt.data(), true, g, false, &mut gcol, T::zero());
                let gx = if direct { gcol } else { col2im(&gcol, c, h, w, k, stride, pad, ho, wo) };
                let mut grads = vec![Some(Tensor::new(&[c, h, w], gx)), Some(Tensor::new(&[o, c, k, k], gw))];
                if has_bias {
                    let gb: Vec<T> = g.chunks(p).map(|row| row.iter().copied().sum()).collect();
                    grads.push(Some(Tensor::new(&[o], gb)));
                }
                grads
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'t, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        self.push(
            Tensor::new(&shape, out),
            &[self],
            Box::new(move |args| {
                let y = args.output.data();
                let g = args.grad.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(args.output.shape(), gx))]
            }),
        )
    }
}

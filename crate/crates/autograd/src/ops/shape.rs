//! Layout operations: reshape, permute, concat, narrow, padding and pooling.

use crate::{Scalar, Tensor, Var};

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        self.push(
            v.reshape(shape),
            &[self],
            Box::new(move |args| vec![Some(args.grad.reshape(&in_shape))]),
        )
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t, T> {
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.push(
            self.value().permute(perm),
            &[self],
            Box::new(move |args| vec![Some(args.grad.permute(&inverse))]),
        )
    }

    /// Swaps the two axes of a matrix.
    pub fn t(self) -> Var<'t, T> {
        self.permute(&[1, 0])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        self.push(
            v.narrow(axis, start, len),
            &[self],
            Box::new(move |args| {
                let mut parts: Vec<Tensor<T>> = Vec::with_capacity(3);
                let mut before = in_shape.clone();
                before[axis] = start;
                let mut after = in_shape.clone();
                after[axis] = in_shape[axis] - start - len;
                if start > 0 {
                    parts.push(Tensor::zeros(&before));
                }
                parts.push(args.grad.clone());
                if after[axis] > 0 {
                    parts.push(Tensor::zeros(&after));
                }
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                vec![Some(Tensor::concat(&refs, axis))]
            }),
        )
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        let value = Tensor::concat(&refs, axis);
        parts[0].push(
            value,
            parts,
            Box::new(move |args| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let g = args.grad.narrow(axis, start, n);
                        start += n;
                        Some(g)
                    })
                    .collect()
            }),
        )
    }

    /// Reflection padding of the last two axes.
    pub fn pad_reflect(self, pad: usize) -> Var<'t, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let r = shape.len();
        assert!(r >= 2, "pad_reflect needs at least two axes");
        let (h, w) = (shape[r - 2], shape[r - 1]);
        assert!(pad < h && pad < w, "reflection pad larger than input");
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let planes = v.numel() / (h * w);
        let reflect = move |i: isize, n: usize| -> usize {
            let n = n as isize;
            let j = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
            j as usize
        };
        let mut out = Vec::with_capacity(planes * ho * wo);
        let src = v.data();
        for p in 0..planes {
            for y in 0..ho {
                let sy = reflect(y as isize - pad as isize, h);
                for x in 0..wo {
                    let sx = reflect(x as isize - pad as isize, w);
                    out.push(src[p * h * w + sy * w + sx]);
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        self.push(
            Tensor::new(&out_shape, out),
            &[self],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gx = Tensor::zeros(&shape);
                let d = gx.data_mut();
                for p in 0..planes {
                    for y in 0..ho {
                        let sy = reflect(y as isize - pad as isize, h);
                        for x in 0..wo {
                            let sx = reflect(x as isize - pad as isize, w);
                            d[p * h * w + sy * w + sx] += g[p * ho * wo + y * wo + x];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Average pooling over the last two axes with a square window. Trailing
    /// rows and columns that do not fill a window are dropped.
    pub fn avg_pool2d(self, kernel: usize, stride: usize) -> Var<'t, T> {
        self.avg_pool2d_rect((kernel, kernel), (stride, stride))
    }

    /// Average pooling with a `(rows, cols)` window and stride.
    pub fn avg_pool2d_rect(self, kernel: (usize, usize), stride: (usize, usize)) -> Var<'t, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let ((kh, kw), (sh, sw)) = (kernel, stride);
        assert!(h >= kh && w >= kw, "pooling window larger than input {shape:?}");
        let ho = (h - kh) / sh + 1;
        let wo = (w - kw) / sw + 1;
        let planes = v.numel() / (h * w);
        let norm = T::from_usize_lossy(kh * kw).recip();
        let src = v.data();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for ky in 0..kh {
                    let row = &plane[(y * sh + ky) * w..];
                    for x in 0..wo {
                        let base = x * sw;
                        let mut acc = T::zero();
                        for kx in 0..kw {
                            acc += row[base + kx];
                        }
                        dst[y * wo + x] += acc;
                    }
                }
            }
            for o in dst.iter_mut() {
                *o *= norm;
            }
        }
        let mut out_shape = shape.clone();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        self.push(
            Tensor::new(&out_shape, out),
            &[self],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gx = Tensor::zeros(&shape);
                let d = gx.data_mut();
                for p in 0..planes {
                    for y in 0..ho {
                        for x in 0..wo {
                            let gv = g[p * ho * wo + y * wo + x] * norm;
                            for ky in 0..kh {
                                let row = p * h * w + (y * sh + ky) * w + x * sw;
                                for kx in 0..kw {
                                    d[row + kx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

//! Bilinear sampling, correlation window lookup, relative-position gathering
//! and convex upsampling.

use crate::{Scalar, Tensor, Var};

/// Corner indices and weights of a bilinear sample. Corners outside the
/// plane carry weight but read zero.
#[derive(Clone, Copy)]
struct Bilinear<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

impl<T: Scalar> Bilinear<T> {
    #[inline]
    fn new(x: T, y: T) -> Self {
        let xf = x.floor();
        let yf = y.floor();
        Self {
            x0: xf.to_isize().unwrap_or(isize::MIN / 4),
            y0: yf.to_isize().unwrap_or(isize::MIN / 4),
            fx: x - xf,
            fy: y - yf,
        }
    }

    #[inline]
    fn read(plane: &[T], h: usize, w: usize, x: isize, y: isize) -> T {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            plane[y as usize * w + x as usize]
        } else {
            T::zero()
        }
    }

    /// Value and its partial derivatives in x and y.
    #[inline]
    fn sample(&self, plane: &[T], h: usize, w: usize) -> (T, T, T) {
        let one = T::one();
        let v00 = Self::read(plane, h, w, self.x0, self.y0);
        let v10 = Self::read(plane, h, w, self.x0 + 1, self.y0);
        let v01 = Self::read(plane, h, w, self.x0, self.y0 + 1);
        let v11 = Self::read(plane, h, w, self.x0 + 1, self.y0 + 1);
        let (fx, fy) = (self.fx, self.fy);
        let top = v00 * (one - fx) + v10 * fx;
        let bottom = v01 * (one - fx) + v11 * fx;
        let value = top * (one - fy) + bottom * fy;
        let dx = (v10 - v00) * (one - fy) + (v11 - v01) * fy;
        let dy = bottom - top;
        (value, dx, dy)
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], h: usize, w: usize, g: T) {
        let one = T::one();
        let (fx, fy) = (self.fx, self.fy);
        let corners = [
            (self.x0, self.y0, (one - fx) * (one - fy)),
            (self.x0 + 1, self.y0, fx * (one - fy)),
            (self.x0, self.y0 + 1, (one - fx) * fy),
            (self.x0 + 1, self.y0 + 1, fx * fy),
        ];
        for (x, y, wt) in corners {
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                plane[y as usize * w + x as usize] += g * wt;
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Samples a `[C, H, W]` input at `coords` (`[2, Ho, Wo]`, channel 0 = x
    /// column, channel 1 = y row, in pixels). Outside samples read zero.
    pub fn bilinear_sample(self, coords: Var<'t, T>) -> Var<'t, T> {
        let (x, pos) = (self.value(), coords.value());
        assert_eq!(x.rank(), 3, "bilinear_sample input must be [C, H, W]");
        assert!(pos.rank() == 3 && pos.dim(0) == 2, "coords must be [2, Ho, Wo]");
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let (ho, wo) = (pos.dim(1), pos.dim(2));
        let p = ho * wo;
        let (px, py) = (pos.plane(0), pos.plane(1));
        let taps: Vec<Bilinear<T>> = (0..p).map(|i| Bilinear::new(px[i], py[i])).collect();
        let mut out = vec![T::zero(); c * p];
        for ch in 0..c {
            let plane = x.plane(ch);
            for (i, tap) in taps.iter().enumerate() {
                out[ch * p + i] = tap.sample(plane, h, w).0;
            }
        }
        self.push(
            Tensor::new(&[c, ho, wo], out),
            &[self, coords],
            Box::new(move |args| {
                let (x, g) = (args.inputs[0], args.grad);
                let mut gx = Tensor::zeros(&[c, h, w]);
                let mut gpos = Tensor::zeros(&[2, ho, wo]);
                for ch in 0..c {
                    let plane = x.plane(ch);
                    let gplane = g.plane(ch);
                    for (i, tap) in taps.iter().enumerate() {
                        let (_, dx, dy) = tap.sample(plane, h, w);
                        let gd = gpos.data_mut();
                        gd[i] += gplane[i] * dx;
                        gd[p + i] += gplane[i] * dy;
                    }
                    let gxp = gx.plane_mut(ch);
                    for (i, tap) in taps.iter().enumerate() {
                        tap.scatter(gxp, h, w, gplane[i]);
                    }
                }
                vec![Some(gx), Some(gpos)]
            }),
        )
    }

    /// For each query `q` of a `[S, Hk, Wk]` volume, samples the `(2r+1)^2`
    /// window centered at `centers[:, q]` (`[2, S]`, x then y) from plane `q`.
    /// Output is `[(2r+1)^2, S]`, window offsets row-major (dy outer, dx
    /// inner). Outside samples read zero.
    pub fn window_lookup(self, centers: Var<'t, T>, radius: usize) -> Var<'t, T> {
        let (vol, ctr) = (self.value(), centers.value());
        assert_eq!(vol.rank(), 3, "window_lookup volume must be [S, H, W]");
        let (s, h, w) = (vol.dim(0), vol.dim(1), vol.dim(2));
        assert_eq!(ctr.shape(), &[2, s], "window_lookup centers must be [2, S]");
        let side = 2 * radius + 1;
        let taps_per_query = side * side;
        let offsets: Vec<(T, T)> = (0..side)
            .flat_map(|dy| (0..side).map(move |dx| (dx, dy)))
            .map(|(dx, dy)| {
                (T::from_usize_lossy(dx) - T::from_usize_lossy(radius), T::from_usize_lossy(dy) - T::from_usize_lossy(radius))
            })
            .collect();
        let mut taps = Vec::with_capacity(s * taps_per_query);
        for q in 0..s {
            let (cx, cy) = (ctr.data()[q], ctr.data()[s + q]);
            for &(ox, oy) in &offsets {
                taps.push(Bilinear::new(cx + ox, cy + oy));
            }
        }
        let mut out = vec![T::zero(); taps_per_query * s];
        for q in 0..s {
            let plane = &vol.data()[q * h * w..(q + 1) * h * w];
            for k in 0..taps_per_query {
                out[k * s + q] = taps[q * taps_per_query + k].sample(plane, h, w).0;
            }
        }
        self.push(
            Tensor::new(&[taps_per_query, s], out),
            &[self, centers],
            Box::new(move |args| {
                let (vol, g) = (args.inputs[0], args.grad.data());
                let mut gvol = Tensor::zeros(&[s, h, w]);
                let mut gctr = vec![T::zero(); 2 * s];
                for q in 0..s {
                    let plane = &vol.data()[q * h * w..(q + 1) * h * w];
                    let gplane = &mut gvol.data_mut()[q * h * w..(q + 1) * h * w];
                    for k in 0..taps_per_query {
                        let tap = &taps[q * taps_per_query + k];
                        let gv = g[k * s + q];
                        let (_, dx, dy) = tap.sample(plane, h, w);
                        gctr[q] += gv * dx;
                        gctr[s + q] += gv * dy;
                        tap.scatter(gplane, h, w, gv);
                    }
                }
                vec![Some(gvol), Some(Tensor::new(&[2, s], gctr))]
            }),
        )
    }

    /// Relative-position logits. `self` holds per-query logits against every
    /// vertical offset (`[S, 2*max_h - 1]`), `horizontal` against every
    /// horizontal offset (`[S, 2*max_w - 1]`), where `S = h * w` and offset
    /// `d` lives at column `d + max - 1`. Output `[S, S]`:
    /// `out[(i,j), (i',j')] = vert[(i,j), i'-i] + horiz[(i,j), j'-j]`.
    pub fn relative_position_logits(self, horizontal: Var<'t, T>, h: usize, w: usize) -> Var<'t, T> {
        let (lv, lh) = (self.value(), horizontal.value());
        let s = h * w;
        assert_eq!(lv.dim(0), s, "vertical logits rows must equal h*w");
        assert_eq!(lh.dim(0), s, "horizontal logits rows must equal h*w");
        let (nv, nh) = (lv.dim(1), lh.dim(1));
        let (max_h, max_w) = ((nv + 1) / 2, (nh + 1) / 2);
        assert!(h <= max_h && w <= max_w, "grid {h}x{w} exceeds embedding table {max_h}x{max_w}");
        let col_v = move |i: usize, ii: usize| ii + max_h - 1 - i;
        let col_h = move |j: usize, jj: usize| jj + max_w - 1 - j;
        let mut out = vec![T::zero(); s * s];
        for i in 0..h {
            for j in 0..w {
                let q = i * w + j;
                let rv = &lv.data()[q * nv..(q + 1) * nv];
                let rh = &lh.data()[q * nh..(q + 1) * nh];
                let row = &mut out[q * s..(q + 1) * s];
                for ii in 0..h {
                    for jj in 0..w {
                        row[ii * w + jj] = rv[col_v(i, ii)] + rh[col_h(j, jj)];
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[s, s], out),
            &[self, horizontal],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gv = vec![T::zero(); s * nv];
                let mut gh = vec![T::zero(); s * nh];
                for i in 0..h {
                    for j in 0..w {
                        let q = i * w + j;
                        for ii in 0..h {
                            for jj in 0..w {
                                let gq = g[q * s + ii * w + jj];
                                gv[q * nv + col_v(i, ii)] += gq;
                                gh[q * nh + col_h(j, jj)] += gq;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[s, nv], gv)), Some(Tensor::new(&[s, nh], gh))]
            }),
        )
    }

    /// Convex upsampling of a `[C, h, w]` field by `factor` using weights
    /// `[9, factor*factor, h, w]` over the replicate-padded 3x3 coarse
    /// neighborhood (neighbor `k` is offset `(k / 3 - 1, k % 3 - 1)` in
    /// (row, column)). Weights are expected to sum to one over axis 0.
    pub fn convex_upsample(self, weights: Var<'t, T>, factor: usize) -> Var<'t, T> {
        let (x, wt) = (self.value(), weights.value());
        assert_eq!(x.rank(), 3, "convex_upsample field must be [C, h, w]");
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let ff = factor * factor;
        assert_eq!(wt.shape(), &[9, ff, h, w], "convex_upsample weights shape");
        let (hf, wf) = (h * factor, w * factor);
        let neighbor = move |k: usize, y: usize, xx: usize| -> usize {
            let ny = (y as isize + (k / 3) as isize - 1).clamp(0, h as isize - 1) as usize;
            let nx = (xx as isize + (k % 3) as isize - 1).clamp(0, w as isize - 1) as usize;
            ny * w + nx
        };
        let plane = h * w;
        let mut out = vec![T::zero(); c * hf * wf];
        for ch in 0..c {
            let src = x.plane(ch);
            let dst = &mut out[ch * hf * wf..(ch + 1) * hf * wf];
            for k in 0..9 {
                for sub in 0..ff {
                    let (a, b) = (sub / factor, sub % factor);
                    let wk = &wt.data()[(k * ff + sub) * plane..(k * ff + sub + 1) * plane];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(y * factor + a) * wf + xx * factor + b] += wk[y * w + xx] * src[neighbor(k, y, xx)];
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[c, hf, wf], out),
            &[self, weights],
            Box::new(move |args| {
                let (x, wt, g) = (args.inputs[0], args.inputs[1], args.grad.data());
                let mut gx = vec![T::zero(); c * plane];
                let mut gw = vec![T::zero(); 9 * ff * plane];
                for ch in 0..c {
                    let src = x.plane(ch);
                    let gsrc = &g[ch * hf * wf..(ch + 1) * hf * wf];
                    for k in 0..9 {
                        for sub in 0..ff {
                            let (a, b) = (sub / factor, sub % factor);
                            let base = (k * ff + sub) * plane;
                            for y in 0..h {
                                for xx in 0..w {
                                    let gv = gsrc[(y * factor + a) * wf + xx * factor + b];
                                    let n = neighbor(k, y, xx);
                                    gw[base + y * w + xx] += gv * src[n];
                                    gx[ch * plane + n] += gv * wt.data()[base + y * w + xx];
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx)), Some(Tensor::new(&[9, ff, h, w], gw))]
            }),
        )
    }
}

/// Plain bilinear sample of one plane at `(x, y)`, zero outside. Shared by
/// non-differentiable callers.
pub fn sample_plane<T: Scalar>(plane: &[T], h: usize, w: usize, x: T, y: T) -> T {
    Bilinear::new(x, y).sample(plane, h, w).0
}

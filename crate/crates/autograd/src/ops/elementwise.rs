//! Elementwise arithmetic with broadcasting, unary maps and reductions.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::tensor::{numel, strides};
use crate::{Scalar, Tensor, Var};

/// Output shape for a broadcast binary op.
///
/// Equal shapes pass through. A single-element operand broadcasts against
/// anything. Otherwise ranks must match and every dimension pair must be equal
/// or contain a 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    if a == b {
        return a.to_vec();
    }
    if numel(b) == 1 {
        return a.to_vec();
    }
    if numel(a) == 1 {
        return b.to_vec();
    }
    assert_eq!(a.len(), b.len(), "cannot broadcast {a:?} with {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

/// Strides that read an operand of `shape` while iterating over `out`.
fn read_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    if numel(shape) == 1 {
        return vec![0; out.len()];
    }
    let s = strides(shape);
    shape.iter().zip(s).map(|(&n, st)| if n == 1 { 0 } else { st }).collect()
}

fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    if b.numel() == 1 {
        let bv = b.data()[0];
        return Tensor::new(&out, a.data().iter().map(|&x| f(x, bv)).collect());
    }
    if a.numel() == 1 {
        let av = a.data()[0];
        return Tensor::new(&out, b.data().iter().map(|&y| f(av, y)).collect());
    }
    let sa = read_strides(a.shape(), &out);
    let sb = read_strides(b.shape(), &out);
    let rank = out.len();
    let n = numel(&out);
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data()[ia], b.data()[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out, data)
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    if numel(shape) == 1 {
        return Tensor::new(shape, vec![grad.sum()]);
    }
    let out = grad.shape();
    let st = read_strides(shape, out);
    let rank = out.len();
    let mut data = vec![T::zero(); numel(shape)];
    let mut idx = vec![0usize; rank];
    let mut i = 0usize;
    for &g in grad.data() {
        data[i] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            i += st[d];
            if idx[d] < out[d] {
                break;
            }
            i -= st[d] * out[d];
            idx[d] = 0;
        }
    }
    Tensor::new(shape, data)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>, &Tensor<T>) -> (Option<Tensor<T>>, Option<Tensor<T>>)
            + 'static,
    ) -> Var<'t, T> {
        let (av, bv) = (self.value(), other.value());
        let value = broadcast_zip(&av, &bv, f);
        self.push(
            value,
            &[self, other],
            Box::new(move |args| {
                let (a, b) = (args.inputs[0], args.inputs[1]);
                let (ga, gb) = backward(args.grad, a, b, args.output);
                vec![ga.map(|g| reduce_to(&g, a.shape())), gb.map(|g| reduce_to(&g, b.shape()))]
            }),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a + b, |g, _, _, _| (Some(g.clone()), Some(g.clone())))
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a - b, |g, _, _, _| (Some(g.clone()), Some(g.map(|v| -v))))
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |a, b| a * b,
            |g, a, b, _| (Some(broadcast_zip(g, b, |g, b| g * b)), Some(broadcast_zip(g, a, |g, a| g * a))),
        )
    }

    pub fn div(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |a, b| a / b,
            |g, _, b, out| {
                let ga = broadcast_zip(g, b, |g, b| g / b);
                // d(a/b)/db = -out/b
                let q = broadcast_zip(out, b, |o, b| -o / b);
                (Some(ga), Some(g.zip_map(&q, |g, q| g * q)))
            },
        )
    }

    /// Applies `f` elementwise with derivative `df(x, y)`.
    pub fn map_with(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let value = self.value().map(f);
        self.push(
            value,
            &[self],
            Box::new(move |args| {
                let x = args.inputs[0].data();
                let y = args.output.data();
                let g = args.grad.data();
                let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(Tensor::new(args.grad.shape(), data))]
            }),
        )
    }

    pub fn neg(self) -> Var<'t, T> {
        self.map_with(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.map_with(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        self.map_with(move |x| x + s, |_, _| T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.map_with(T::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.map_with(T::ln, |x, _| x.recip())
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.map_with(T::sqrt, |_, y| if y > T::zero() { T::lit(0.5) / y } else { T::zero() })
    }

    pub fn square(self) -> Var<'t, T> {
        self.map_with(|x| x * x, |x, _| x + x)
    }

    pub fn recip(self) -> Var<'t, T> {
        self.map_with(T::recip, |_, y| -y * y)
    }

    pub fn powf(self, p: T) -> Var<'t, T> {
        self.map_with(move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    /// Derivative taken as 0 at 0.
    pub fn abs(self) -> Var<'t, T> {
        self.map_with(T::abs, |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.map_with(T::tanh, |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.map_with(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.map_with(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(self) -> Var<'t, T> {
        self.map_with(softplus, |x, _| sigmoid(x))
    }

    /// `max(x, floor)`; no gradient where the floor is active.
    pub fn clamp_min(self, floor: T) -> Var<'t, T> {
        self.map_with(move |x| x.max(floor), move |x, _| if x > floor { T::one() } else { T::zero() })
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.push(
            Tensor::scalar(v.sum()),
            &[self],
            Box::new(move |args| vec![Some(Tensor::full(&shape, args.grad.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize_lossy(self.value().numel().max(1));
        self.sum().scale(n.recip())
    }

    /// Sums over `axis`, keeping it with size 1.
    pub fn sum_axis_keep(self, axis: usize) -> Var<'t, T> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let mut out_shape = in_shape.clone();
        out_shape[axis] = 1;
        let value = v.sum_axis(axis).into_reshaped(&out_shape);
        self.push(
            value,
            &[self],
            Box::new(move |args| {
                let g = args.grad;
                vec![Some(broadcast_zip(&Tensor::zeros(&in_shape), g, |_, g| g))]
            }),
        )
    }

    pub fn mean_axis_keep(self, axis: usize) -> Var<'t, T> {
        let n = T::from_usize_lossy(self.value().dim(axis));
        self.sum_axis_keep(axis).scale(n.recip())
    }

    /// Masked mean: `sum(self * mask) / max(sum(mask), 1)`. The mask is a
    /// constant tensor of the same shape.
    pub fn masked_mean(self, mask: &Tensor<T>) -> Var<'t, T> {
        let count = mask.sum().max(T::one());
        let m = self.tape().constant(mask.clone());
        self.mul(m).sum().scale(count.recip())
    }

    /// Euclidean norm over axis 0: `[C, ...] -> [...]`. Gradient is 0 where
    /// the norm vanishes.
    pub fn norm_axis0(self) -> Var<'t, T> {
        let v = self.value();
        let c = v.dim(0);
        let rest: Vec<usize> = v.shape()[1..].to_vec();
        let n = numel(&rest);
        let mut out = vec![T::zero(); n];
        for ch in 0..c {
            for (o, &x) in out.iter_mut().zip(v.plane(ch)) {
                *o += x * x;
            }
        }
        for o in &mut out {
            *o = o.sqrt();
        }
        self.push(
            Tensor::new(&rest, out),
            &[self],
            Box::new(move |args| {
                let x = args.inputs[0];
                let y = args.output.data();
                let g = args.grad.data();
                let mut gx = Tensor::zeros(x.shape());
                for ch in 0..c {
                    let xs = x.plane(ch);
                    let gs = gx.plane_mut(ch);
                    for i in 0..n {
                        if y[i] > T::zero() {
                            gs[i] = g[i] * xs[i] / y[i];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else if x < T::lit(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'t, T: Scalar> Div for Var<'t, T> {
    type Output = Var<'t, T>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(self, rhs)
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

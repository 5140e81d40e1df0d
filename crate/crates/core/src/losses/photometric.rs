//! SSIM + L1 photometric error and first-order edge-aware smoothness.

use msf_autograd::{Scalar, Tensor, Var};

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
pub const SSIM_WEIGHT: f64 = 0.85;

/// Per-channel SSIM over 3x3 windows with reflection padding, `[C, H, W]`.
pub fn ssim<'t, T: Scalar>(x: Var<'t, T>, y: Var<'t, T>) -> Var<'t, T> {
    let pool = |v: Var<'t, T>| v.pad_reflect(1).avg_pool2d(3, 1);
    let (mx, my) = (pool(x), pool(y));
    let sx = pool(x.square()) - mx.square();
    let sy = pool(y.square()) - my.square();
    let sxy = pool(x * y) - mx * my;
    let two = T::lit(2.0);
    let num = (mx * my).scale(two).add_scalar(T::lit(C1)) * sxy.scale(two).add_scalar(T::lit(C2));
    let den = (mx.square() + my.square()).add_scalar(T::lit(C1)) * (sx + sy).add_scalar(T::lit(C2));
    num / den
}

/// Per-pixel `0.85 (1 - SSIM) / 2 + 0.15 |x - y|`, averaged over channels: `[H, W]`.
pub fn photometric_map<'t, T: Scalar>(reference: Var<'t, T>, warped: Var<'t, T>) -> Var<'t, T> {
    let s = reference.shape();
    let dssim = ssim(reference, warped).neg().add_scalar(T::one()).scale(T::lit(0.5 * SSIM_WEIGHT));
    let l1 = (reference - warped).abs().scale(T::lit(1.0 - SSIM_WEIGHT));
    (dssim + l1).mean_axis_keep(0).reshape(&s[1..])
}

pub struct MaskedLoss<'t, T> {
    pub value: Var<'t, T>,
    /// Set when the mask selected no pixel; `value` is then 0.
    pub empty_mask: bool,
}

/// Mean of `map` over pixels where `mask` (`[H, W]`, 0/1) is set.
pub fn masked<'t, T: Scalar>(map: Var<'t, T>, mask: &Tensor<T>) -> MaskedLoss<'t, T> {
    if mask.sum() <= T::zero() {
        return MaskedLoss { value: map.tape().scalar(T::zero()), empty_mask: true };
    }
    MaskedLoss { value: map.masked_mean(mask), empty_mask: false }
}

pub fn photometric_loss<'t, T: Scalar>(reference: Var<'t, T>, warped: Var<'t, T>, mask: &Tensor<T>) -> MaskedLoss<'t, T> {
    masked(photometric_map(reference, warped), mask)
}

fn forward_diff<'t, T: Scalar>(v: Var<'t, T>, axis: usize) -> Var<'t, T> {
    let n = v.shape()[axis];
    v.narrow(axis, 1, n - 1) - v.narrow(axis, 0, n - 1)
}

fn forward_diff_plain<T: Scalar>(v: &Tensor<T>, axis: usize) -> Tensor<T> {
    let n = v.dim(axis);
    v.narrow(axis, 1, n - 1).zip_map(&v.narrow(axis, 0, n - 1), |a, b| a - b)
}

/// Channel mean of `|d field|` weighted by `exp(-mean_c |d image|)`, summed
/// over the two axis directions, each averaged over its valid pixels.
pub fn smoothness_loss<'t, T: Scalar>(field: Var<'t, T>, image: &Tensor<T>) -> Var<'t, T> {
    let tape = field.tape();
    let mut total = tape.scalar(T::zero());
    let inv_c = T::from_usize_lossy(image.dim(0)).recip();
    for axis in [2, 1] {
        if image.dim(axis) < 2 {
            continue;
        }
        let grad_img = forward_diff_plain(image, axis).map(|v| v.abs()).sum_axis(0);
        let weight = grad_img.map(|g| (-(g * inv_c)).exp());
        let mut wshape = vec![1];
        wshape.extend_from_slice(weight.shape());
        let g = forward_diff(field, axis).abs().mean_axis_keep(0);
        total = total + (g * tape.constant(weight.into_reshaped(&wshape))).mean();
    }
    total
}

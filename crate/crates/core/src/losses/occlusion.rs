//! Occlusion masks from forward-backward consistency.

use msf_autograd::{sample_plane, Scalar, Tensor};

use crate::camera::{flow_from_sceneflow, in_bounds, CameraModel, DisparityField, SceneFlowField};
use crate::error::{MsfError, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConsistencyThresholds {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for ConsistencyThresholds {
    fn default() -> Self {
        Self { alpha1: 0.01, alpha2: 0.5 }
    }
}

impl ConsistencyThresholds {
    /// `|a + b|^2 > alpha1 (|a|^2 + |b|^2) + alpha2` for the residual `a + b`.
    #[inline]
    pub fn inconsistent(&self, sum_sq: f64, a_sq: f64, b_sq: f64) -> bool {
        sum_sq > self.alpha1 * (a_sq + b_sq) + self.alpha2
    }
}

/// Binary `[H, W]` masks, 1 = occluded.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMasks<T> {
    pub disparity: Tensor<T>,
    pub scene_flow: Tensor<T>,
}

impl<T: Scalar> OcclusionMasks<T> {
    pub fn none(h: usize, w: usize) -> Self {
        Self { disparity: Tensor::zeros(&[h, w]), scene_flow: Tensor::zeros(&[h, w]) }
    }

    pub fn is_occluded(&self, i: usize) -> bool {
        self.disparity.data()[i] > T::zero() || self.scene_flow.data()[i] > T::zero()
    }

    /// `1 - mask` as a loss weight.
    pub fn visible(mask: &Tensor<T>) -> Tensor<T> {
        mask.map(|m| T::one() - m)
    }
}

/// Forward-backward check of a `[2, H, W]` forward flow against the backward
/// flow of the target frame. Pixels whose target leaves the image or whose
/// projection is invalid count as occluded.
pub fn flow_consistency_mask<T: Scalar>(
    flow_fwd: &Tensor<T>,
    valid_fwd: &Tensor<T>,
    flow_bwd: &Tensor<T>,
    valid_bwd: &Tensor<T>,
    th: ConsistencyThresholds,
) -> Tensor<T> {
    let (h, w) = (flow_fwd.dim(1), flow_fwd.dim(2));
    let n = h * w;
    let (bx, by) = (flow_bwd.plane(0), flow_bwd.plane(1));
    Tensor::from_fn(&[h, w], |i| {
        let (fx, fy) = (flow_fwd.data()[i], flow_fwd.data()[n + i]);
        let x = T::from_usize_lossy(i % w) + fx;
        let y = T::from_usize_lossy(i / w) + fy;
        let occluded = if valid_fwd.data()[i] <= T::zero() || !in_bounds(x, y, h, w) {
            true
        } else if sample_plane(valid_bwd.data(), h, w, x, y) < T::lit(0.5) {
            true
        } else {
            let (wx, wy) = (sample_plane(bx, h, w, x, y).as_f64(), sample_plane(by, h, w, x, y).as_f64());
            let (fx, fy) = (fx.as_f64(), fy.as_f64());
            let sum_sq = (fx + wx).powi(2) + (fy + wy).powi(2);
            th.inconsistent(sum_sq, fx * fx + fy * fy, wx * wx + wy * wy)
        };
        if occluded {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Stereo occlusion of the left view. The right-view disparity is built by
/// splatting every left pixel to `round(u - d)` keeping the largest
/// disparity; a left pixel is occluded when the disparity found at its
/// target disagrees with its own under the consistency thresholds. Targets
/// left of the image are not marked here (the warp mask covers them).
pub fn stereo_occlusion<T: Scalar>(d: &Tensor<T>, th: ConsistencyThresholds) -> Tensor<T> {
    let (h, w) = (d.dim(1), d.dim(2));
    let target = |u: usize, dv: f64| -> Option<usize> {
        let x = (u as f64 - dv).round();
        (x >= 0.0 && x < w as f64).then_some(x as usize)
    };
    let mut right = vec![f64::NEG_INFINITY; h * w];
    for v in 0..h {
        for u in 0..w {
            let dv = d.data()[v * w + u].as_f64();
            if let Some(x) = target(u, dv) {
                let r = &mut right[v * w + x];
                *r = r.max(dv);
            }
        }
    }
    Tensor::from_fn(&[h, w], |i| {
        let (v, u) = (i / w, i % w);
        let dv = d.data()[i].as_f64();
        match target(u, dv) {
            Some(x) => {
                let dr = right[v * w + x];
                if th.inconsistent((dr - dv).powi(2), dv * dv, dr * dr) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            None => T::zero(),
        }
    })
}

/// Masks for the reference frame `t`: `d_fwd` and `s_fwd` belong to `t`,
/// `d_bwd` and `s_bwd` to `t+1` (with `s_bwd` pointing back to `t`). Swap the
/// roles to get the masks of `t+1`.
pub fn occlusion_masks<T: Scalar>(
    d_fwd: &DisparityField<T>,
    d_bwd: &DisparityField<T>,
    s_fwd: &SceneFlowField<T>,
    s_bwd: &SceneFlowField<T>,
    cam: &CameraModel<T>,
) -> Result<OcclusionMasks<T>> {
    occlusion_masks_with(d_fwd, d_bwd, s_fwd, s_bwd, cam, ConsistencyThresholds::default())
}

pub fn occlusion_masks_with<T: Scalar>(
    d_fwd: &DisparityField<T>,
    d_bwd: &DisparityField<T>,
    s_fwd: &SceneFlowField<T>,
    s_bwd: &SceneFlowField<T>,
    cam: &CameraModel<T>,
    th: ConsistencyThresholds,
) -> Result<OcclusionMasks<T>> {
    if d_fwd.values().shape() != d_bwd.values().shape() {
        return Err(MsfError::Shape("disparity fields of the two frames differ in size".into()));
    }
    let f = flow_from_sceneflow(d_fwd, s_fwd, cam)?;
    let b = flow_from_sceneflow(d_bwd, s_bwd, cam)?;
    Ok(OcclusionMasks {
        disparity: stereo_occlusion(d_fwd.values(), th),
        scene_flow: flow_consistency_mask(&f.coords, &f.valid, &b.coords, &b.valid, th),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel<f64> {
        CameraModel::from_focal(50.0, 15.5, 7.5, 0.5).unwrap()
    }

    #[test]
    fn consistent_static_scene_has_no_occlusion() {
        let d = DisparityField::new(Tensor::from_fn(&[1, 16, 32], |i| 2.0 + 0.01 * (i / 32) as f64), 1).unwrap();
        let s = SceneFlowField::zeros(16, 32);
        let m = occlusion_masks(&d, &d, &s, &s, &cam()).unwrap();
        assert_eq!(m.disparity.sum(), 0.0);
        assert_eq!(m.scene_flow.sum(), 0.0);
    }

    #[test]
    fn random_flows_are_inconsistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DisparityField::new(Tensor::full(&[1, 16, 32], 3.0), 1).unwrap();
        let mut rs = || SceneFlowField::new(Tensor::from_fn(&[3, 16, 32], |_| rng.gen_range(-1.0..1.0))).unwrap();
        let (a, b) = (rs(), rs());
        let m = occlusion_masks(&d, &d, &a, &b, &cam()).unwrap();
        assert!(m.scene_flow.sum() > 0.0);
    }

    #[test]
    fn stereo_foreground_occludes_background() {
        // Background at d=2 with a foreground strip at d=8 in columns 10..14.
        let d = Tensor::from_fn(&[1, 1, 32], |i| if (10..14).contains(&i) { 8.0 } else { 2.0 });
        let occ = stereo_occlusion(&d, ConsistencyThresholds::default());
        // Background pixels whose right-view target is covered by the strip.
        let covered: Vec<usize> = (0..32).filter(|&i| occ.data()[i] > 0.0).collect();
        assert!(!covered.is_empty());
        assert!(covered.iter().all(|&u| (4..10).contains(&u)), "{covered:?}");
    }
}

//! Region-wise rigid fitting and the occlusion regularization term.

use std::path::PathBuf;

use msf_autograd::{Scalar, Tensor, Var};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use super::occlusion::OcclusionMasks;
use crate::camera::{diff, CameraModel, DepthField, PointMap, SceneFlowField};

/// Pixels of one segment, stored as flat indices into an `H x W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub id: u32,
    pub pixels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub source: Option<PathBuf>,
}

impl RegionMask {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[self.height, self.width]);
        for &i in &self.pixels {
            t.data_mut()[i] = T::one();
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReliableParams {
    /// 3D consistency threshold in meters.
    pub theta: f64,
    pub max_depth: f64,
    pub max_mean_depth: f64,
    pub min_points: usize,
}

impl Default for ReliableParams {
    fn default() -> Self {
        Self { theta: 0.025, max_depth: 75.0, max_mean_depth: 25.0, min_points: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliableRegion {
    pub region_id: u32,
    /// Flat indices of reliable pixels.
    pub reliable: Vec<usize>,
    pub mean_depth: f64,
    pub keep: bool,
}

impl ReliableRegion {
    pub fn to_tensor<T: Scalar>(&self, h: usize, w: usize) -> Tensor<T> {
        let mut t = Tensor::zeros(&[h, w]);
        for &i in &self.reliable {
            t.data_mut()[i] = T::one();
        }
        t
    }
}

fn dist<T: Scalar>(a: [T; 3], b: [T; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Reliable pixels of `region`: visible in both masks, 3D-consistent within
/// `theta` and not farther than `max_depth`. The region is kept when it has
/// at least `min_points` reliable pixels with mean depth `<= max_mean_depth`.
pub fn reliable_mask<T: Scalar>(
    region: &RegionMask,
    occ: &OcclusionMasks<T>,
    p_warp: &PointMap<T>,
    p_tgt: &PointMap<T>,
    depth: &DepthField<T>,
    params: &ReliableParams,
) -> ReliableRegion {
    let z = depth.values().data();
    let reliable: Vec<usize> = region
        .pixels
        .iter()
        .copied()
        .filter(|&i| {
            !occ.is_occluded(i) && dist(p_warp.point(i), p_tgt.point(i)) < params.theta && z[i].as_f64() <= params.max_depth
        })
        .collect();
    let mean_depth = if reliable.is_empty() {
        0.0
    } else {
        reliable.iter().map(|&i| z[i].as_f64()).sum::<f64>() / reliable.len() as f64
    };
    let keep = reliable.len() >= params.min_points && mean_depth <= params.max_mean_depth;
    ReliableRegion { region_id: region.id, reliable, mean_depth, keep }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { r: Matrix3::identity(), t: Vector3::zeros() }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.r * Vector3::from(p) + self.t;
        [q.x, q.y, q.z]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("rigid fit needs at least 3 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("point sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correspondences are degenerate (collinear or coincident)")]
    Degenerate,
}

/// Least-squares rigid transform with `dst ~ R src + T`.
pub fn rigid_fit_svd(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<RigidTransform, FitError> {
    if src.len() != dst.len() {
        return Err(FitError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(FitError::TooFewPoints(src.len()));
    }
    let n = src.len() as f64;
    let centroid = |pts: &[[f64; 3]]| pts.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        let (pa, pb) = (Vector3::from(*a) - cs, Vector3::from(*b) - cd);
        h += pa * pb.transpose();
        spread += pa * pa.transpose();
    }
    // Rank of the centered source cloud: collinear points have rank 1.
    let scale = spread.trace().max(f64::MIN_POSITIVE);
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if ev[1] <= 1e-12 * scale {
        return Err(FitError::Degenerate);
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(FitError::Degenerate)?, svd.v_t.ok_or(FitError::Degenerate)?);
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = v * fix * u.transpose();
    Ok(RigidTransform { r, t: cd - r * cs })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SkipReason {
    NoOcclusion,
    Unreliable { reliable: usize, mean_depth: f64 },
    Fit(FitError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionFit {
    pub region_id: u32,
    pub pixels: Vec<usize>,
    pub reliable: usize,
    pub transform: RigidTransform,
    /// `R P + T` for each of `pixels`, frozen at fit time.
    pub targets: Vec<[f64; 3]>,
}

/// Region fits for one frame, in ascending region-id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionFits {
    pub fits: Vec<RegionFit>,
    pub skipped: Vec<(u32, SkipReason)>,
    pub height: usize,
    pub width: usize,
}

impl RegionFits {
    /// `[H, W]` indicator of all pixels in kept regions.
    pub fn support<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[self.height, self.width]);
        for f in &self.fits {
            for &i in &f.pixels {
                t.data_mut()[i] = T::one();
            }
        }
        t
    }

    /// Frozen targets `R P + T` for kept-region pixels (zero elsewhere).
    pub fn target_points<T: Scalar>(&self) -> Tensor<T> {
        let n = self.height * self.width;
        let mut t = Tensor::zeros(&[3, self.height, self.width]);
        for f in &self.fits {
            for (&i, q) in f.pixels.iter().zip(&f.targets) {
                for c in 0..3 {
                    t.data_mut()[c * n + i] = T::lit(q[c]);
                }
            }
        }
        t
    }
}

/// Fits a rigid motion per region that contains occluded pixels, from its
/// reliable points `P` and their flow-moved counterparts `P + s`.
/// `p_tgt` is the target-frame point cloud sampled at the flow positions.
pub fn fit_regions<T: Scalar>(
    regions: &[RegionMask],
    occ: &OcclusionMasks<T>,
    depth: &DepthField<T>,
    s: &SceneFlowField<T>,
    p_tgt: &PointMap<T>,
    cam: &CameraModel<T>,
    params: &ReliableParams,
) -> RegionFits {
    let shape = depth.values().shape();
    let (h, w) = (shape[1], shape[2]);
    let points = crate::camera::backproject(depth, cam);
    let moved = crate::camera::apply_scene_flow(&points, s).expect("matching shapes");
    let mut order: Vec<&RegionMask> = regions.iter().collect();
    order.sort_by_key(|r| r.id);
    let mut out = RegionFits { height: h, width: w, ..Default::default() };
    for region in order {
        if !region.pixels.iter().any(|&i| occ.is_occluded(i)) {
            out.skipped.push((region.id, SkipReason::NoOcclusion));
            continue;
        }
        let rel = reliable_mask(region, occ, &moved, p_tgt, depth, params);
        if !rel.keep {
            out.skipped.push((region.id, SkipReason::Unreliable { reliable: rel.reliable.len(), mean_depth: rel.mean_depth }));
            continue;
        }
        let src: Vec<[f64; 3]> = rel.reliable.iter().map(|&i| points.point(i).map(|v| v.as_f64())).collect();
        let dst: Vec<[f64; 3]> = rel.reliable.iter().map(|&i| moved.point(i).map(|v| v.as_f64())).collect();
        match rigid_fit_svd(&src, &dst) {
            Ok(transform) => out.fits.push(RegionFit {
                region_id: region.id,
                pixels: region.pixels.clone(),
                reliable: rel.reliable.len(),
                targets: region.pixels.iter().map(|&i| transform.apply(points.point(i).map(|v| v.as_f64()))).collect(),
                transform,
            }),
            Err(e) => out.skipped.push((region.id, SkipReason::Fit(e))),
        }
    }
    out
}

pub struct OccLoss<'t, T> {
    pub value: Var<'t, T>,
    /// No region survived; `value` is 0.
    pub no_regions: bool,
}

/// Mean over kept-region pixels of `|stop(R P + T) - (P + s)|`, where `P` is
/// back-projected from the differentiable `depth` (`[1, H, W]`) and the
/// target is the one frozen by [`fit_regions`].
pub fn occlusion_loss<'t, T: Scalar>(fits: &RegionFits, depth: Var<'t, T>, s: Var<'t, T>, cam: &CameraModel<T>) -> OccLoss<'t, T> {
    let tape = depth.tape();
    if fits.fits.is_empty() {
        return OccLoss { value: tape.scalar(T::zero()), no_regions: true };
    }
    let points = diff::backproject(depth, cam);
    let target = tape.constant(fits.target_points());
    let residual = (target - (points + s)).norm_axis0();
    OccLoss { value: residual.masked_mean(&fits.support()), no_regions: false }
}

/// Fits the regions from the current values of `depth` and `s`, then builds
/// the loss. `p_tgt` is the target-frame cloud sampled where each pixel lands.
pub fn occlusion_regularization<'t, T: Scalar>(
    regions: &[RegionMask],
    depth: Var<'t, T>,
    s: Var<'t, T>,
    occ: &OcclusionMasks<T>,
    p_tgt: &PointMap<T>,
    cam: &CameraModel<T>,
    params: &ReliableParams,
) -> crate::error::Result<(OccLoss<'t, T>, RegionFits)> {
    let depth_field = DepthField::new((*depth.value()).clone())?;
    let flow = SceneFlowField::new((*s.value()).clone())?;
    let fits = fit_regions(regions, occ, &depth_field, &flow, p_tgt, cam, params);
    Ok((occlusion_loss(&fits, depth, s, cam), fits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rz90() -> Matrix3<f64> {
        Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn identity_fit() {
        let pts = [[0.0, 0.0, 1.0], [1.0, 0.0, 2.0], [0.0, 1.0, 3.0], [1.0, 1.0, 1.5]];
        let t = rigid_fit_svd(&pts, &pts).unwrap();
        assert!((t.r - Matrix3::identity()).norm() < 1e-12);
        assert!(t.t.norm() < 1e-12);
    }

    #[test]
    fn recovers_rz90() {
        let src = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let truth = RigidTransform { r: rz90(), t: Vector3::new(1.0, 2.0, 3.0) };
        let dst: Vec<[f64; 3]> = src.iter().map(|&p| truth.apply(p)).collect();
        let est = rigid_fit_svd(&src, &dst).unwrap();
        assert!((est.r - truth.r).norm() < 1e-9);
        assert!((est.t - truth.t).norm() < 1e-9);
    }

    #[test]
    fn collinear_and_short_inputs_fail() {
        let line = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [3.0, 3.0, 3.0]];
        assert_eq!(rigid_fit_svd(&line, &line), Err(FitError::Degenerate));
        assert_eq!(rigid_fit_svd(&line[..2], &line[..2]), Err(FitError::TooFewPoints(2)));
    }

    fn flat_region(n: usize, w: usize) -> RegionMask {
        RegionMask { id: 1, pixels: (0..n).collect(), height: n / w, width: w, source: None }
    }

    #[test]
    fn reliable_mask_examples() {
        let (h, w) = (2, 8);
        let region = flat_region(h * w, w);
        let occ = OcclusionMasks::<f64>::none(h, w);
        let pts = PointMap::new(Tensor::from_fn(&[3, h, w], |i| i as f64)).unwrap();
        let depth = DepthField::new(Tensor::full(&[1, h, w], 10.0)).unwrap();
        let rel = reliable_mask(&region, &occ, &pts, &pts, &depth, &ReliableParams::default());
        assert_eq!(rel.reliable, region.pixels);
        assert!(rel.keep);

        let far = DepthField::new(Tensor::from_fn(&[1, h, w], |i| if i == 3 { 80.0 } else { 10.0 })).unwrap();
        let rel = reliable_mask(&region, &occ, &pts, &pts, &far, &ReliableParams::default());
        assert!(!rel.reliable.contains(&3));

        let distant = DepthField::new(Tensor::full(&[1, h, w], 30.0)).unwrap();
        let rel = reliable_mask(&region, &occ, &pts, &pts, &distant, &ReliableParams::default());
        assert_eq!(rel.reliable.len(), h * w);
        assert!(!rel.keep);
    }
}

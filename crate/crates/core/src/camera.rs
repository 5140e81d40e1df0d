//! Pinhole camera, disparity/depth conversion, back-projection and
//! projection, plus the derived optical flow and bilinear warping.
//!
//! Pixel coordinates are `(u, v) = (column, row)` with the origin at the
//! center of the top-left pixel. Fields are channel-first: a flow or a pixel
//! position map is `[2, H, W]` with x in channel 0.
//!
//! Every operation exists twice: a plain version on [`Tensor`]s and a
//! differentiable version on tape [`Var`]s in [`diff`].

use msf_autograd::{sample_plane, Scalar, Tensor};

use crate::error::{MsfError, Result};

/// Smallest disparity (pixels) a prediction may take before depth conversion.
pub const DISPARITY_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel<T> {
    k: [[T; 3]; 3],
    k_inv: [[T; 3]; 3],
    baseline: T,
}

fn invert3<T: Scalar>(m: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let c = |r: usize, s: usize| m[r % 3][s % 3];
    let mut cof = [[T::zero(); 3]; 3];
    for (i, row) in cof.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = c(i + 1, j + 1) * c(i + 2, j + 2) - c(i + 1, j + 2) * c(i + 2, j + 1);
        }
    }
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    let scale = m.iter().flatten().fold(T::zero(), |a, &b| a.max(b.abs()));
    if !det.is_finite() || det.abs() <= T::lit(1e-12) * scale * scale * scale {
        return None;
    }
    let mut inv = [[T::zero(); 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cof[j][i] / det;
        }
    }
    Some(inv)
}

impl<T: Scalar> CameraModel<T> {
    /// Validates `K` (invertible, `fx == fy > 0`) and `b > 0`.
    pub fn new(k: [[T; 3]; 3], baseline: T) -> Result<Self> {
        let (fx, fy) = (k[0][0], k[1][1]);
        if !(fx > T::zero()) {
            return Err(MsfError::InvalidCamera(format!("focal length {fx} must be positive")));
        }
        if (fx - fy).abs() > T::lit(1e-9) * fx {
            return Err(MsfError::InvalidCamera(format!("anisotropic focal lengths fx={fx}, fy={fy}")));
        }
        if !(baseline > T::zero()) || !baseline.is_finite() {
            return Err(MsfError::InvalidCamera(format!("baseline {baseline} must be positive")));
        }
        let k_inv = invert3(&k).ok_or_else(|| MsfError::InvalidCamera("intrinsic matrix is singular".into()))?;
        Ok(Self { k, k_inv, baseline })
    }

    pub fn from_focal(f: T, cx: T, cy: T, baseline: T) -> Result<Self> {
        let (z, o) = (T::zero(), T::one());
        Self::new([[f, z, cx], [z, f, cy], [z, z, o]], baseline)
    }

    pub fn k(&self) -> &[[T; 3]; 3] {
        &self.k
    }

    pub fn k_inv(&self) -> &[[T; 3]; 3] {
        &self.k_inv
    }

    pub fn focal(&self) -> T {
        self.k[0][0]
    }

    pub fn baseline(&self) -> T {
        self.baseline
    }

    /// `f * b`, the disparity-depth product.
    pub fn fb(&self) -> T {
        self.focal() * self.baseline
    }

    /// Camera for an image downsampled by `factor` with pixel centers kept
    /// aligned: low-res pixel `u'` covers full-res `factor * u' + (factor-1)/2`.
    pub fn downsampled(&self, factor: usize) -> Self {
        let s = T::from_usize_lossy(factor);
        let shift = (s - T::one()) / T::lit(2.0);
        let mut k = self.k;
        for row in k.iter_mut().take(2) {
            row[0] = row[0] / s;
            row[1] = row[1] / s;
            row[2] = (row[2] - shift) / s;
        }
        Self::new(k, self.baseline).expect("downsampling keeps a valid camera")
    }

    pub fn cast<U: Scalar>(&self) -> CameraModel<U> {
        let conv = |m: &[[T; 3]; 3]| m.map(|r| r.map(|v| U::lit(v.as_f64())));
        CameraModel { k: conv(&self.k), k_inv: conv(&self.k_inv), baseline: U::lit(self.baseline.as_f64()) }
    }

    /// `K^-1 (u, v, 1)`.
    pub fn ray(&self, u: T, v: T) -> [T; 3] {
        let m = &self.k_inv;
        [0, 1, 2].map(|r| m[r][0] * u + m[r][1] * v + m[r][2])
    }

    /// Perspective projection; `None` when `z <= 0`.
    pub fn project_point(&self, p: [T; 3]) -> Option<[T; 2]> {
        let k = &self.k;
        let q = [0, 1, 2].map(|r| k[r][0] * p[0] + k[r][1] * p[1] + k[r][2] * p[2]);
        if p[2] > T::zero() && q[2] > T::zero() {
            Some([q[0] / q[2], q[1] / q[2]])
        } else {
            None
        }
    }
}

fn expect_plane_shape<T: Scalar>(t: &Tensor<T>, channels: usize, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != channels {
        return Err(MsfError::Shape(format!("{what} must be [{channels}, H, W], got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// Disparity in pixels, `[1, H, W]`, all values strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityField<T> {
    values: Tensor<T>,
    /// Downsampling factor relative to the input image.
    pub scale: usize,
}

impl<T: Scalar> DisparityField<T> {
    pub fn new(values: Tensor<T>, scale: usize) -> Result<Self> {
        expect_plane_shape(&values, 1, "disparity")?;
        if let Some((index, &v)) = values.data().iter().enumerate().find(|(_, &v)| !(v > T::zero())) {
            return Err(MsfError::NonPositiveDisparity { index, value: v.as_f64() });
        }
        Ok(Self { values, scale })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn height(&self) -> usize {
        self.values.dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.dim(2)
    }
}

/// Depth in meters, `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthField<T> {
    values: Tensor<T>,
}

impl<T: Scalar> DepthField<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        expect_plane_shape(&values, 1, "depth")?;
        if let Some((i, v)) = values.data().iter().enumerate().find(|(_, v)| !(**v > T::zero() && v.is_finite())) {
            return Err(MsfError::Shape(format!("depth {v} at index {i} is not positive and finite")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }
}

/// Metric 3D motion per pixel, `[3, H, W]`, camera coordinates of the
/// reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFlowField<T> {
    values: Tensor<T>,
}

impl<T: Scalar> SceneFlowField<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        expect_plane_shape(&values, 3, "scene flow")?;
        if !values.all_finite() {
            return Err(MsfError::Shape("scene flow contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { values: Tensor::zeros(&[3, h, w]) }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }
}

/// 3D points in camera coordinates, `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> PointMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        expect_plane_shape(&values, 3, "point map")?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn point(&self, i: usize) -> [T; 3] {
        let n = self.values.dim(1) * self.values.dim(2);
        let d = self.values.data();
        [d[i], d[n + i], d[2 * n + i]]
    }
}

/// Pixel positions (`[2, H, W]`) with a per-pixel validity mask (`[H, W]`, 1 valid).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPositions<T> {
    pub coords: Tensor<T>,
    pub valid: Tensor<T>,
}

/// `[2, H, W]` grid holding `(u, v)` of every pixel.
pub fn pixel_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let n = h * w;
    Tensor::from_fn(&[2, h, w], |i| {
        let (c, p) = (i / n, i % n);
        T::from_usize_lossy(if c == 0 { p % w } else { p / w })
    })
}

pub fn disparity_to_depth<T: Scalar>(d: &DisparityField<T>, cam: &CameraModel<T>) -> Result<DepthField<T>> {
    let fb = cam.fb();
    DepthField::new(d.values.map(|v| fb / v))
}

pub fn depth_to_disparity<T: Scalar>(depth: &DepthField<T>, cam: &CameraModel<T>, scale: usize) -> Result<DisparityField<T>> {
    let fb = cam.fb();
    DisparityField::new(depth.values.map(|v| fb / v), scale)
}

pub fn backproject<T: Scalar>(depth: &DepthField<T>, cam: &CameraModel<T>) -> PointMap<T> {
    let (h, w) = (depth.values.dim(1), depth.values.dim(2));
    let n = h * w;
    let mut out = vec![T::zero(); 3 * n];
    for (i, &z) in depth.values.data().iter().enumerate() {
        let r = cam.ray(T::from_usize_lossy(i % w), T::from_usize_lossy(i / w));
        for c in 0..3 {
            out[c * n + i] = z * r[c];
        }
    }
    PointMap { values: Tensor::new(&[3, h, w], out) }
}

/// Projects every point; points with `z <= 0` get position 0 and are invalid.
pub fn project<T: Scalar>(points: &PointMap<T>, cam: &CameraModel<T>) -> PixelPositions<T> {
    let (h, w) = (points.values.dim(1), points.values.dim(2));
    let n = h * w;
    let mut coords = Tensor::zeros(&[2, h, w]);
    let mut valid = Tensor::zeros(&[h, w]);
    for i in 0..n {
        if let Some(p) = cam.project_point(points.point(i)) {
            coords.data_mut()[i] = p[0];
            coords.data_mut()[n + i] = p[1];
            valid.data_mut()[i] = T::one();
        }
    }
    PixelPositions { coords, valid }
}

pub fn apply_scene_flow<T: Scalar>(points: &PointMap<T>, s: &SceneFlowField<T>) -> Result<PointMap<T>> {
    if points.values.shape() != s.values.shape() {
        return Err(MsfError::Shape(format!(
            "points {:?} and scene flow {:?} differ",
            points.values.shape(),
            s.values.shape()
        )));
    }
    Ok(PointMap { values: points.values.zip_map(&s.values, |a, b| a + b) })
}

/// Optical flow induced by moving each back-projected pixel by `s`.
pub fn flow_from_sceneflow<T: Scalar>(
    d: &DisparityField<T>,
    s: &SceneFlowField<T>,
    cam: &CameraModel<T>,
) -> Result<PixelPositions<T>> {
    let depth = disparity_to_depth(d, cam)?;
    let moved = apply_scene_flow(&backproject(&depth, cam), s)?;
    let mut pos = project(&moved, cam);
    let grid = pixel_grid::<T>(d.height(), d.width());
    let n = d.height() * d.width();
    for i in 0..2 * n {
        if pos.valid.data()[i % n] > T::zero() {
            pos.coords.data_mut()[i] -= grid.data()[i];
        }
    }
    Ok(pos)
}

/// Slack allowed past the outer pixel centers, absorbing roundoff of
/// projections that land exactly on the border.
pub const BOUNDS_SLACK: f64 = 1e-6;

/// In-image test for bilinear sample positions.
pub fn in_bounds<T: Scalar>(x: T, y: T, h: usize, w: usize) -> bool {
    let e = T::lit(BOUNDS_SLACK);
    x >= -e && y >= -e && x <= T::from_usize_lossy(w - 1) + e && y <= T::from_usize_lossy(h - 1) + e
}

/// Samples `field` (`[C, H, W]`) at `p + flow(p)`. Returns the warped field and
/// the in-bounds mask (`[H, W]`, 1 inside).
pub fn warp_bilinear<T: Scalar>(field: &Tensor<T>, flow: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = field.dim(0);
    let (h, w) = expect_plane_shape(field, c, "field")?;
    if flow.shape() != [2, h, w] {
        return Err(MsfError::Shape(format!("flow {:?} does not match field {h}x{w}", flow.shape())));
    }
    let n = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut mask = Tensor::zeros(&[h, w]);
    for i in 0..n {
        let x = T::from_usize_lossy(i % w) + flow.data()[i];
        let y = T::from_usize_lossy(i / w) + flow.data()[n + i];
        if in_bounds(x, y, h, w) {
            mask.data_mut()[i] = T::one();
        }
        for ch in 0..c {
            out.data_mut()[ch * n + i] = sample_plane(field.plane(ch), h, w, x, y);
        }
    }
    Ok((out, mask))
}

/// In-bounds mask of sample positions `p + flow(p)` for a `[2, H, W]` flow.
pub fn in_bounds_mask<T: Scalar>(flow: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (flow.dim(1), flow.dim(2));
    let n = h * w;
    Tensor::from_fn(&[h, w], |i| {
        let x = T::from_usize_lossy(i % w) + flow.data()[i];
        let y = T::from_usize_lossy(i / w) + flow.data()[n + i];
        if in_bounds(x, y, h, w) {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Differentiable counterparts operating on tape variables.
pub mod diff {
    use msf_autograd::{Scalar, Tensor, Var};

    use super::{in_bounds_mask, pixel_grid, CameraModel, DISPARITY_FLOOR};

    fn matrix_conv<'t, T: Scalar>(x: Var<'t, T>, m: &[[T; 3]; 3]) -> Var<'t, T> {
        let w = Tensor::new(&[3, 3, 1, 1], m.iter().flatten().copied().collect());
        x.conv2d(x.tape().constant(w), None, 1, 0)
    }

    /// `f b / max(d, floor)` for a `[1, H, W]` disparity.
    pub fn depth_from_disparity<'t, T: Scalar>(d: Var<'t, T>, cam: &CameraModel<T>) -> Var<'t, T> {
        d.clamp_min(T::lit(DISPARITY_FLOOR)).recip().scale(cam.fb())
    }

    /// Per-pixel rays `K^-1 (u, v, 1)` as a `[3, H, W]` tensor.
    pub fn ray_map<T: Scalar>(cam: &CameraModel<T>, h: usize, w: usize) -> Tensor<T> {
        let n = h * w;
        let mut out = Tensor::zeros(&[3, h, w]);
        for i in 0..n {
            let r = cam.ray(T::from_usize_lossy(i % w), T::from_usize_lossy(i / w));
            for c in 0..3 {
                out.data_mut()[c * n + i] = r[c];
            }
        }
        out
    }

    pub fn backproject<'t, T: Scalar>(depth: Var<'t, T>, cam: &CameraModel<T>) -> Var<'t, T> {
        let s = depth.shape();
        let rays = depth.tape().constant(ray_map(cam, s[1], s[2]));
        rays * depth
    }

    /// Projects `[3, H, W]` points; the mask marks `z > 0`. The division uses
    /// `max(z, 1e-6)` so invalid points stay finite.
    pub fn project<'t, T: Scalar>(points: Var<'t, T>, cam: &CameraModel<T>) -> (Var<'t, T>, Tensor<T>) {
        let q = matrix_conv(points, cam.k());
        let valid = {
            let p = points.value();
            let n = p.dim(1) * p.dim(2);
            Tensor::from_fn(&[p.dim(1), p.dim(2)], |i| if p.data()[2 * n + i] > T::zero() { T::one() } else { T::zero() })
        };
        let z = q.narrow(0, 2, 1).clamp_min(T::lit(1e-6));
        (q.narrow(0, 0, 2) / z, valid)
    }

    /// Optical flow of `d` (`[1, H, W]`) moved by `s` (`[3, H, W]`), with the
    /// projection validity mask.
    pub fn flow_from_sceneflow<'t, T: Scalar>(
        d: Var<'t, T>,
        s: Var<'t, T>,
        cam: &CameraModel<T>,
    ) -> (Var<'t, T>, Tensor<T>) {
        let shape = d.shape();
        let pts = backproject(depth_from_disparity(d, cam), cam) + s;
        let (pos, valid) = project(pts, cam);
        let grid = d.tape().constant(pixel_grid(shape[1], shape[2]));
        (pos - grid, valid)
    }

    /// Bilinear warp of `field` by `flow`, returning the in-bounds mask.
    pub fn warp<'t, T: Scalar>(field: Var<'t, T>, flow: Var<'t, T>) -> (Var<'t, T>, Tensor<T>) {
        let f = flow.value();
        let grid = flow.tape().constant(pixel_grid(f.dim(1), f.dim(2)));
        let mask = in_bounds_mask(&f);
        (field.bilinear_sample(grid + flow), mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use msf_autograd::Tape;

    fn identity_cam() -> CameraModel<f64> {
        CameraModel::from_focal(1.0, 0.0, 0.0, 1.0).unwrap()
    }

    fn disp(h: usize, w: usize, v: &[f64]) -> DisparityField<f64> {
        DisparityField::new(Tensor::from_f64(&[1, h, w], v), 1).unwrap()
    }

    #[test]
    fn camera_validation() {
        assert!(CameraModel::from_focal(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(CameraModel::from_focal(1.0, 1.0, 1.0, -0.5).is_err());
        let aniso = CameraModel::new([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 1.0]], 1.0);
        assert!(matches!(aniso, Err(MsfError::InvalidCamera(_))));
        let singular = CameraModel::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]], 1.0);
        assert!(singular.is_err());
    }

    #[test]
    fn depth_examples() {
        let cam = identity_cam();
        let depth = disparity_to_depth(&disp(1, 1, &[2.0]), &cam).unwrap();
        assert_eq!(depth.values().data(), &[0.5]);

        let kitti = CameraModel::from_focal(721.5, 609.5, 172.8, 0.54).unwrap();
        let depth = disparity_to_depth(&disp(1, 1, &[38.961]), &kitti).unwrap();
        assert!((depth.values().item() - 721.5 * 0.54 / 38.961).abs() < 1e-12);
        assert!((depth.values().item() - 10.0).abs() < 1e-3);

        let err = DisparityField::new(Tensor::<f64>::from_f64(&[1, 1, 3], &[1.0, 0.0, 2.0]), 1).unwrap_err();
        assert!(matches!(err, MsfError::NonPositiveDisparity { index: 1, .. }));
    }

    #[test]
    fn backproject_and_project_examples() {
        let cam = identity_cam();
        let depth = DepthField::new(Tensor::from_fn(&[1, 4, 3], |i| if i == 11 { 2.0 } else { 1.0 })).unwrap();
        let pts = backproject(&depth, &cam);
        assert_eq!(pts.point(0), [0.0, 0.0, 1.0]);
        // (u, v) = (2, 3) is the last pixel of a 4x3 map.
        assert_eq!(pts.point(11), [4.0, 6.0, 2.0]);

        let p = PointMap::new(Tensor::from_f64(&[3, 1, 3], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, -1.0])).unwrap();
        let proj = project(&p, &cam);
        assert_eq!(proj.coords.data(), &[0.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(proj.valid.data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn scene_flow_examples() {
        let p = PointMap::new(Tensor::<f64>::from_f64(&[3, 1, 1], &[0.0, 0.0, 1.0])).unwrap();
        let s = SceneFlowField::new(Tensor::from_f64(&[3, 1, 1], &[0.0, 0.0, 1.0])).unwrap();
        assert_eq!(apply_scene_flow(&p, &s).unwrap().values().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(apply_scene_flow(&p, &SceneFlowField::zeros(1, 1)).unwrap(), p);
    }

    #[test]
    fn flow_examples() {
        let cam = CameraModel::from_focal(100.0, 2.0, 1.0, 0.5).unwrap();
        let d = disp(3, 5, &[4.0; 15]);
        let zero = flow_from_sceneflow(&d, &SceneFlowField::zeros(3, 5), &cam).unwrap();
        assert!(zero.coords.max_abs() < 1e-12);

        // Pure forward motion leaves the principal point (2, 1) in place.
        let s = SceneFlowField::new(Tensor::from_fn(&[3, 3, 5], |i| if i / 15 == 2 { 0.7 } else { 0.0 })).unwrap();
        let f = flow_from_sceneflow(&d, &s, &cam).unwrap();
        let center = 5 + 2;
        assert!(f.coords.data()[center].abs() < 1e-12 && f.coords.data()[15 + center].abs() < 1e-12);
        assert!(f.coords.data()[0].abs() > 1e-3);
    }

    #[test]
    fn warp_examples() {
        let field = Tensor::from_fn(&[1, 2, 4], |i| 2.0 * (i % 4) as f64);
        let (same, mask) = warp_bilinear(&field, &Tensor::zeros(&[2, 2, 4])).unwrap();
        assert_eq!(same, field);
        assert!(mask.data().iter().all(|&m| m == 1.0));

        let shift = Tensor::from_fn(&[2, 2, 4], |i| if i < 8 { 1.0 } else { 0.0 });
        let (shifted, mask) = warp_bilinear(&field, &shift).unwrap();
        assert_eq!(&shifted.data()[..3], &[2.0, 4.0, 6.0]);
        assert_eq!(mask.data(), &[1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);

        let half = Tensor::from_fn(&[2, 2, 4], |i| if i < 8 { 0.5 } else { 0.0 });
        let (mid, _) = warp_bilinear(&field, &half).unwrap();
        assert_eq!(&mid.data()[..3], &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn downsampled_camera_keeps_pixel_centers() {
        let cam = CameraModel::<f64>::from_focal(100.0, 63.5, 31.5, 0.5).unwrap();
        let low = cam.downsampled(8);
        assert_eq!(low.focal(), 12.5);
        // Low-res pixel 0 covers full-res pixels 0..8, centered at 3.5.
        let full_ray = cam.ray(3.5, 3.5);
        let low_ray = low.ray(0.0, 0.0);
        for c in 0..3 {
            assert!((full_ray[c] - low_ray[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn diff_matches_plain() {
        let cam = CameraModel::from_focal(50.0, 3.2, 2.1, 0.3).unwrap();
        let d = Tensor::from_fn(&[1, 4, 6], |i| 1.0 + 0.1 * i as f64);
        let s = Tensor::from_fn(&[3, 4, 6], |i| 0.01 * ((i * 7) % 11) as f64 - 0.05);
        let plain = flow_from_sceneflow(
            &DisparityField::new(d.clone(), 1).unwrap(),
            &SceneFlowField::new(s.clone()).unwrap(),
            &cam,
        )
        .unwrap();
        let tape = Tape::new();
        let (flow, valid) = diff::flow_from_sceneflow(tape.constant(d), tape.constant(s), &cam);
        assert!(flow.value().max_abs_diff(&plain.coords) < 1e-10);
        assert_eq!(valid, plain.valid);
    }
}

//! Ray-cast rigid scenes with exact ground truth.
//!
//! World coordinates coincide with the left camera of frame 1. Every object
//! and the camera move with a constant body-frame velocity, so frame `k`
//! places the camera at `E^(k-1)` and object `j` at `O_j E_j^(k-1)`.

use msf_autograd::Tensor;
use nalgebra::{Isometry3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::regions::regions_from_ids;
use crate::camera::CameraModel;
use crate::error::{MsfError, Result};
use crate::eval::{BoolMap, ComponentValidity, GroundTruth};
use crate::losses::RegionMask;

pub const FRAME_COUNT: usize = 4;
pub const GROUND_ID: u32 = 1;
pub const WALL_ID: u32 = 2;
const OCCLUSION_TOLERANCE: f64 = 1e-6;

/// Body-frame motion per frame: translation in meters and yaw in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    pub translation: [f64; 3],
    pub yaw: f64,
}

impl RigidMotion {
    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::new(Vector3::from(self.translation), Vector3::new(0.0, self.yaw, 0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MotionSpec {
    /// Uniform in `[-x, x] x [-y, y] x [z_min, z_max]` and `[-yaw, yaw]`.
    Random { x: f64, y: f64, z_min: f64, z_max: f64, yaw: f64 },
    Fixed(RigidMotion),
}

impl MotionSpec {
    fn sample(&self, rng: &mut ChaCha8Rng) -> RigidMotion {
        match *self {
            Self::Fixed(m) => m,
            Self::Random { x, y, z_min, z_max, yaw } => RigidMotion {
                translation: [sym(rng, x), sym(rng, y), rng.gen_range(z_min..=z_max)],
                yaw: sym(rng, yaw),
            },
        }
    }
}

fn sym(rng: &mut ChaCha8Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.gen_range(-a..=a)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub boxes: usize,
    pub focal: f64,
    pub baseline: f64,
    pub camera_height: f64,
    pub wall_distance: f64,
    /// Range of box half extents in meters.
    pub box_half_size: (f64, f64),
    /// Range of box center depths.
    pub box_depth: (f64, f64),
    pub ego: MotionSpec,
    pub objects: MotionSpec,
    /// Samples per pixel side for the rendered images.
    pub supersample: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 128,
            boxes: 3,
            focal: 110.0,
            baseline: 0.54,
            camera_height: 1.5,
            wall_distance: 20.0,
            box_half_size: (0.4, 0.8),
            box_depth: (6.0, 11.0),
            ego: MotionSpec::Random { x: 0.05, y: 0.0, z_min: 0.2, z_max: 0.5, yaw: 0.01 },
            objects: MotionSpec::Random { x: 0.15, y: 0.0, z_min: -0.3, z_max: 0.3, yaw: 0.05 },
            supersample: 2,
        }
    }
}

impl SceneConfig {
    /// A config with no camera or object motion.
    pub fn static_scene(seed: u64) -> Self {
        let zero = MotionSpec::Fixed(RigidMotion::default());
        Self { seed, ego: zero, objects: zero, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.focal,
            self.baseline,
            self.camera_height,
            self.wall_distance,
            self.box_half_size.0,
            self.box_half_size.1,
            self.box_depth.0,
        ];
        if self.height == 0 || self.width == 0 || self.supersample == 0 || positive.iter().any(|&v| !(v > 0.0)) {
            return Err(MsfError::DegenerateScene(format!("sizes must be positive: {self:?}")));
        }
        if self.box_half_size.0 > self.box_half_size.1 || self.box_depth.0 > self.box_depth.1 {
            return Err(MsfError::DegenerateScene("empty size or depth range".into()));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(MsfError::NotDivisible { height: self.height, width: self.width });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// The local `y = 0` plane.
    Ground,
    /// The local `z = 0` plane.
    Wall,
    /// Axis-aligned box with the given half extents.
    Cuboid([f64; 3]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Wave {
    freq: [f64; 3],
    phase: f64,
    amp: [f64; 3],
}

/// Band-limited solid texture: a few random sinusoids per object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    base: [f64; 3],
    waves: Vec<Wave>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, min_wavelength: f64) -> Self {
        let base = [0; 3].map(|_| rng.gen_range(0.35..0.65));
        let waves = (0..8)
            .map(|_| {
                let wl = min_wavelength * rng.gen_range(1.0..4.0);
                let dir = loop {
                    let v = Vector3::new(sym(rng, 1.0), sym(rng, 1.0), sym(rng, 1.0));
                    if v.norm() > 0.2 {
                        break v.normalize();
                    }
                };
                Wave {
                    freq: (dir / wl).into(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amp: [0; 3].map(|_| rng.gen_range(0.2..0.6)),
                }
            })
            .collect();
        Self { base, waves }
    }

    pub fn color(&self, p: &Point3<f64>) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for w in &self.waves {
            let s = (std::f64::consts::TAU * (w.freq[0] * p.x + w.freq[1] * p.y + w.freq[2] * p.z) + w.phase).sin();
            for c in 0..3 {
                acc[c] += w.amp[c] * s;
            }
        }
        [0, 1, 2].map(|c| (self.base[c] + 0.3 * acc[c].tanh()).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    /// World-from-object pose at frame 1.
    pub pose: Isometry3<f64>,
    pub motion: RigidMotion,
    pub texture: Texture,
}

impl SceneObject {
    /// World-from-object pose at frame `k`.
    pub fn pose_at(&self, k: i32) -> Isometry3<f64> {
        self.pose * power(&self.motion.isometry(), k - 1)
    }

    /// Ray parameter of the first hit in object coordinates.
    fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self.shape {
            Shape::Ground => plane_hit(o.y, d.y),
            Shape::Wall => plane_hit(o.z, d.z),
            Shape::Cuboid(half) => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a].abs() < EPS {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let (ta, tb) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                (t1 >= t0 && t0 > EPS).then_some(t0)
            }
        }
    }
}

fn plane_hit(o: f64, d: f64) -> Option<f64> {
    if d.abs() < 1e-12 {
        return None;
    }
    let t = -o / d;
    (t > 1e-9).then_some(t)
}

fn power(m: &Isometry3<f64>, n: i32) -> Isometry3<f64> {
    let base = if n < 0 { m.inverse() } else { *m };
    (0..n.unsigned_abs()).fold(Isometry3::identity(), |acc, _| acc * base)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Hit {
    /// Depth along the camera axis.
    depth: f64,
    object: usize,
    local: Point3<f64>,
}

/// Dense ground truth for one frame. Disparities are `[1, H, W]`, scene and
/// optical flows `[3|2, H, W]`, masks `[H, W]` with 1 where the condition holds.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTruth {
    pub depth: Tensor<f64>,
    pub disparity: Tensor<f64>,
    pub sf_fwd: Tensor<f64>,
    pub sf_bwd: Tensor<f64>,
    pub flow_fwd: Tensor<f64>,
    pub flow_bwd: Tensor<f64>,
    /// Disparity of each pixel's point in the next frame.
    pub d2_fwd: Tensor<f64>,
    /// Moved point lies in front of the next camera.
    pub valid_fwd: Tensor<f64>,
    pub valid_bwd: Tensor<f64>,
    /// Point hidden or out of view in the next / previous frame.
    pub occ_fwd: Tensor<f64>,
    pub occ_bwd: Tensor<f64>,
    /// Point hidden or out of view in the right camera.
    pub occ_stereo: Tensor<f64>,
    pub region_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub left: Vec<Tensor<f64>>,
    pub right: Vec<Tensor<f64>>,
    pub truth: Vec<FrameTruth>,
    pub objects: Vec<SceneObject>,
    pub ego: RigidMotion,
    cam: CameraModel<f64>,
}

impl SyntheticScene {
    pub fn camera(&self) -> &CameraModel<f64> {
        &self.cam
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn regions(&self, k: usize) -> Vec<RegionMask> {
        regions_from_ids(&self.truth[k].region_ids, self.height(), self.width(), None)
    }

    /// Evaluation ground truth for reference frame `k` towards `k + 1`.
    pub fn ground_truth(&self, k: usize) -> GroundTruth<f64> {
        let t = &self.truth[k];
        let (h, w) = (self.height(), self.width());
        let all = BoolMap::filled(h, w, true);
        let valid = BoolMap::from_tensor(&t.valid_fwd);
        let visible = BoolMap::from_tensor(&t.occ_fwd).not().and(&valid).expect("same grid");
        let stereo_visible = BoolMap::from_tensor(&t.occ_stereo).not();
        GroundTruth {
            d1: t.disparity.clone(),
            d2: t.d2_fwd.clone(),
            flow: t.flow_fwd.clone(),
            occ: ComponentValidity { d1: all, d2: valid.clone(), fl: valid },
            noc: ComponentValidity { d1: stereo_visible, d2: visible.clone(), fl: visible },
        }
    }
}

struct Renderer<'a> {
    objects: &'a [SceneObject],
    ego: Isometry3<f64>,
    cam: &'a CameraModel<f64>,
    baseline: f64,
    height: usize,
    width: usize,
}

impl Renderer<'_> {
    fn camera_pose(&self, k: i32) -> Isometry3<f64> {
        power(&self.ego, k - 1)
    }

    /// Casts the ray through pixel `(u, v)` of frame `k`, left or right camera.
    fn cast(&self, k: i32, right: bool, u: f64, v: f64) -> Option<Hit> {
        let cam_pose = self.camera_pose(k);
        let offset = if right { self.baseline } else { 0.0 };
        let d_cam = Vector3::from(self.cam.ray(u, v));
        let origin = cam_pose * Point3::new(offset, 0.0, 0.0);
        let dir = cam_pose * d_cam;
        let mut best: Option<Hit> = None;
        for (j, obj) in self.objects.iter().enumerate() {
            let inv = obj.pose_at(k).inverse();
            let (o, d) = (inv * origin, inv * dir);
            if let Some(t) = obj.intersect(&o, &d) {
                if best.is_none_or(|b| t < b.depth) {
                    best = Some(Hit { depth: t, object: j, local: o + d * t });
                }
            }
        }
        best
    }

    /// Camera-`k` coordinates of an object-local point at frame `at`.
    fn to_camera(&self, k: i32, obj: usize, local: &Point3<f64>, at: i32) -> Point3<f64> {
        self.camera_pose(k).inverse() * (self.objects[obj].pose_at(at) * local)
    }

    fn visible(&self, k: i32, right: bool, p: &Point3<f64>) -> bool {
        let offset = if right { self.baseline } else { 0.0 };
        let q = Point3::new(p.x - offset, p.y, p.z);
        let Some([u, v]) = self.cam.project_point([q.x, q.y, q.z]) else {
            return false;
        };
        if !crate::camera::in_bounds(u, v, self.height, self.width) {
            return false;
        }
        match self.cast(k, right, u, v) {
            Some(hit) => hit.depth >= q.z * (1.0 - OCCLUSION_TOLERANCE),
            None => true,
        }
    }

    fn image(&self, k: i32, right: bool, ss: usize) -> Result<Tensor<f64>> {
        let (h, w) = (self.height, self.width);
        let n = h * w;
        let mut out = Tensor::zeros(&[3, h, w]);
        let step = 1.0 / ss as f64;
        for i in 0..n {
            let (u0, v0) = ((i % w) as f64, (i / w) as f64);
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = u0 - 0.5 + step * (sx as f64 + 0.5);
                    let v = v0 - 0.5 + step * (sy as f64 + 0.5);
                    let hit = self.cast(k, right, u, v).ok_or_else(|| MsfError::DegenerateScene(format!("ray at ({u}, {v}) hits nothing")))?;
                    let c = self.objects[hit.object].texture.color(&hit.local);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            let norm = (ss * ss) as f64;
            for ch in 0..3 {
                out.data_mut()[ch * n + i] = acc[ch] / norm;
            }
        }
        Ok(out)
    }

    fn truth(&self, k: i32) -> Result<FrameTruth> {
        let (h, w) = (self.height, self.width);
        let n = h * w;
        let fb = self.cam.fb();
        let mut t = FrameTruth {
            depth: Tensor::zeros(&[1, h, w]),
            disparity: Tensor::zeros(&[1, h, w]),
            sf_fwd: Tensor::zeros(&[3, h, w]),
            sf_bwd: Tensor::zeros(&[3, h, w]),
            flow_fwd: Tensor::zeros(&[2, h, w]),
            flow_bwd: Tensor::zeros(&[2, h, w]),
            d2_fwd: Tensor::zeros(&[1, h, w]),
            valid_fwd: Tensor::zeros(&[h, w]),
            valid_bwd: Tensor::zeros(&[h, w]),
            occ_fwd: Tensor::zeros(&[h, w]),
            occ_bwd: Tensor::zeros(&[h, w]),
            occ_stereo: Tensor::zeros(&[h, w]),
            region_ids: vec![0; n],
        };
        for i in 0..n {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            let hit = self.cast(k, false, u, v).ok_or_else(|| MsfError::DegenerateScene(format!("pixel ({u}, {v}) hits nothing")))?;
            // Both ends of the motion go through the same pose chain, so a
            // static point has exactly zero flow.
            let x = self.to_camera(k, hit.object, &hit.local, k);
            let [u0, v0] = self.cam.project_point([x.x, x.y, x.z]).unwrap_or([u, v]);
            t.depth.data_mut()[i] = hit.depth;
            t.disparity.data_mut()[i] = fb / hit.depth;
            t.region_ids[i] = self.objects[hit.object].id;
            t.occ_stereo.data_mut()[i] = f64::from(!self.visible(k, true, &x));
            for (dk, sf, flow, valid, occ) in [
                (1, &mut t.sf_fwd, &mut t.flow_fwd, &mut t.valid_fwd, &mut t.occ_fwd),
                (-1, &mut t.sf_bwd, &mut t.flow_bwd, &mut t.valid_bwd, &mut t.occ_bwd),
            ] {
                let moved = self.to_camera(k + dk, hit.object, &hit.local, k + dk);
                for c in 0..3 {
                    sf.data_mut()[c * n + i] = moved[c] - x[c];
                }
                match self.cam.project_point([moved.x, moved.y, moved.z]) {
                    Some([pu, pv]) => {
                        flow.data_mut()[i] = pu - u0;
                        flow.data_mut()[n + i] = pv - v0;
                        valid.data_mut()[i] = 1.0;
                        occ.data_mut()[i] = f64::from(!self.visible(k + dk, false, &moved));
                    }
                    None => occ.data_mut()[i] = 1.0,
                }
                if dk == 1 && moved.z > 0.0 {
                    t.d2_fwd.data_mut()[i] = fb / moved.z;
                }
            }
        }
        Ok(t)
    }
}

fn build_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let zero = RigidMotion::default();
    let mut objects = vec![
        SceneObject {
            id: GROUND_ID,
            shape: Shape::Ground,
            pose: Isometry3::translation(0.0, cfg.camera_height, 0.0),
            motion: zero,
            texture: Texture::random(rng, 0.5),
        },
        SceneObject {
            id: WALL_ID,
            shape: Shape::Wall,
            pose: Isometry3::translation(0.0, 0.0, cfg.wall_distance),
            motion: zero,
            texture: Texture::random(rng, 1.2),
        },
    ];
    let lateral = 0.35 * cfg.width as f64 / cfg.focal;
    for b in 0..cfg.boxes {
        let (lo, hi) = cfg.box_half_size;
        let half = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
        let z = rng.gen_range(cfg.box_depth.0..=cfg.box_depth.1);
        // Spread boxes across the view so they overlap little.
        let slot = (b as f64 + 0.5) / cfg.boxes as f64 * 2.0 - 1.0;
        let x = (slot + sym(rng, 0.15)) * lateral * z;
        let yaw = sym(rng, 0.6);
        objects.push(SceneObject {
            id: WALL_ID + 1 + b as u32,
            shape: Shape::Cuboid(half),
            pose: Isometry3::new(Vector3::new(x, cfg.camera_height - half[1], z), Vector3::new(0.0, yaw, 0.0)),
            motion: cfg.objects.sample(rng),
            texture: Texture::random(rng, 0.25),
        });
    }
    objects
}

/// Renders four frames with stereo pairs and ground truth.
pub fn synth_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ego = cfg.ego.sample(&mut rng);
    let objects = build_objects(cfg, &mut rng);
    let cx = (cfg.width as f64 - 1.0) / 2.0;
    let cy = (cfg.height as f64 - 1.0) / 2.0;
    let cam = CameraModel::from_focal(cfg.focal, cx, cy, cfg.baseline)?;
    let r = Renderer { objects: &objects, ego: ego.isometry(), cam: &cam, baseline: cfg.baseline, height: cfg.height, width: cfg.width };
    let mut left = Vec::with_capacity(FRAME_COUNT);
    let mut right = Vec::with_capacity(FRAME_COUNT);
    let mut truth = Vec::with_capacity(FRAME_COUNT);
    for k in 0..FRAME_COUNT as i32 {
        left.push(r.image(k, false, cfg.supersample)?);
        right.push(r.image(k, true, cfg.supersample)?);
        truth.push(r.truth(k)?);
    }
    Ok(SyntheticScene { config: cfg.clone(), left, right, truth, objects, ego, cam })
}

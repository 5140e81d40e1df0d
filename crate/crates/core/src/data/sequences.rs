//! Training batches of two overlapping triplets and evaluation triplets.

use std::path::Path;

use msf_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layout::{scene_dirs, SceneData};
use super::synth::SyntheticScene;
use crate::camera::CameraModel;
use crate::error::Result;
use crate::losses::RegionMask;

/// Four consecutive frames `t-1 .. t+2` forming the triplets
/// `(t-1, t, t+1)` and `(t, t+1, t+2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub scene: String,
    /// Index of frame `t-1` in the scene.
    pub start: usize,
    pub left: [Tensor<f64>; 4],
    pub right: [Tensor<f64>; 4],
    pub cam: CameraModel<f64>,
    /// Regions of frames `t` and `t+1`.
    pub regions: [Vec<RegionMask>; 2],
}

impl SequenceBatch {
    pub fn triplet(&self, second: bool) -> [&Tensor<f64>; 3] {
        let o = usize::from(second);
        [&self.left[o], &self.left[o + 1], &self.left[o + 2]]
    }
}

/// A single inference triplet centered on `center`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTriplet {
    pub scene: String,
    pub center: usize,
    pub frames: [Tensor<f64>; 3],
    pub cam: CameraModel<f64>,
}

/// Photometric jitter applied identically to all frames of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub seed: u64,
    /// Gamma drawn from `[1 - g, 1 + g]`.
    pub gamma: f64,
    pub brightness: f64,
    pub color: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self { seed: 0, gamma: 0.1, brightness: 0.1, color: 0.05 }
    }
}

impl Augment {
    /// Deterministic for a given `(seed, epoch, index)`.
    pub fn apply(&self, batch: &SequenceBatch, epoch: u64, index: usize) -> SequenceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64) << 32);
        let mut draw = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let gamma = 1.0 + draw(self.gamma);
        let gain = 1.0 + draw(self.brightness);
        let tint = [0; 3].map(|_| 1.0 + draw(self.color));
        let jitter = |img: &Tensor<f64>| {
            let n = img.dim(1) * img.dim(2);
            Tensor::from_fn(img.shape(), |j| (img.data()[j].powf(gamma) * gain * tint[j / n]).clamp(0.0, 1.0))
        };
        SequenceBatch { left: batch.left.each_ref().map(jitter), right: batch.right.each_ref().map(jitter), ..batch.clone() }
    }
}

fn batches_of(name: &str, cam: &CameraModel<f64>, left: &[Tensor<f64>], right: &[Tensor<f64>], regions: &[Vec<RegionMask>]) -> Vec<SequenceBatch> {
    if left.len() < 4 {
        return Vec::new();
    }
    (0..=left.len() - 4)
        .map(|s| SequenceBatch {
            scene: name.to_string(),
            start: s,
            left: std::array::from_fn(|i| left[s + i].clone()),
            right: std::array::from_fn(|i| right[s + i].clone()),
            cam: cam.clone(),
            regions: [
                regions.get(s + 1).cloned().unwrap_or_default(),
                regions.get(s + 2).cloned().unwrap_or_default(),
            ],
        })
        .collect()
}

pub fn scene_batches(scene: &SceneData) -> Vec<SequenceBatch> {
    batches_of(&scene.name, &scene.cam, &scene.left, &scene.right, &scene.regions)
}

pub fn synthetic_batches(name: &str, scene: &SyntheticScene) -> Vec<SequenceBatch> {
    let regions: Vec<_> = (0..scene.left.len()).map(|k| scene.regions(k)).collect();
    batches_of(name, scene.camera(), &scene.left, &scene.right, &regions)
}

/// Triplets centered on every frame that has both neighbors.
pub fn eval_triplets(scene: &SceneData) -> Vec<EvalTriplet> {
    (1..scene.frames().saturating_sub(1))
        .map(|c| EvalTriplet {
            scene: scene.name.clone(),
            center: c,
            frames: std::array::from_fn(|i| scene.left[c - 1 + i].clone()),
            cam: scene.cam.clone(),
        })
        .collect()
}

/// Loaded scenes of a dataset, with training batches and evaluation triplets
/// in directory order.
pub struct Sequences {
    pub scenes: Vec<SceneData>,
    pub batches: Vec<SequenceBatch>,
    pub triplets: Vec<EvalTriplet>,
}

/// Scenes with fewer than three frames are skipped with a log entry; scenes
/// with exactly three frames only yield an evaluation triplet.
pub fn build_sequences(root: &Path) -> Result<Sequences> {
    let mut out = Sequences { scenes: Vec::new(), batches: Vec::new(), triplets: Vec::new() };
    for dir in scene_dirs(root)? {
        let scene = SceneData::load(&dir)?;
        if scene.frames() < 3 {
            log::warn!("skipping {}: {} consecutive frames", scene.name, scene.frames());
            continue;
        }
        if scene.frames() < 4 {
            log::info!("{}: {} frames, evaluation only", scene.name, scene.frames());
        }
        out.batches.extend(scene_batches(&scene));
        out.triplets.extend(eval_triplets(&scene));
        out.scenes.push(scene);
    }
    Ok(out)
}

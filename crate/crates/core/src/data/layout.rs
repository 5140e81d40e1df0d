//! Directory layout of a dataset.
//!
//! ```text
//! root/scene_0000/
//!   calib.txt                 f, b and K (row-major), one `key = value` per line
//!   frames/left_00.png        8-bit RGB, one per frame
//!   frames/right_00.png
//!   disp/occ_00.png           disparity of frame k, all valid pixels
//!   disp/noc_00.png           ... restricted to pixels visible in the right view
//!   disp/d2_occ_00.png        disparity of frame k's points in frame k+1
//!   disp/d2_noc_00.png
//!   flow/occ_00.png           optical flow k -> k+1
//!   flow/noc_00.png
//!   regions/regions_00.png    16-bit region ids, 0 = unassigned
//! ```
//! Ground truth files are optional; frames and calib are required.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use msf_autograd::{Scalar, Tensor};

use super::kitti::{read_disparity_png, read_flow_png, write_disparity_png, write_flow_png};
use super::regions::{load_region_masks, write_region_png};
use super::synth::SyntheticScene;
use crate::camera::CameraModel;
use crate::error::{MsfError, Result};
use crate::eval::{ComponentValidity, GroundTruth};
use crate::losses::RegionMask;

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:04}")
}

fn frame_path(dir: &Path, sub: &str, prefix: &str, k: usize) -> PathBuf {
    dir.join(sub).join(format!("{prefix}_{k:02}.png"))
}

pub fn write_calib(path: &Path, cam: &CameraModel<f64>) -> Result<()> {
    let k = cam.k();
    let flat: Vec<String> = k.iter().flatten().map(|v| format!("{v:.17}")).collect();
    let text = format!("f = {:.17}\nb = {:.17}\nK = {}\n", cam.focal(), cam.baseline(), flat.join(" "));
    fs::write(path, text)?;
    Ok(())
}

pub fn read_calib(path: &Path) -> Result<CameraModel<f64>> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| MsfError::Dataset(format!("{}: {reason}", path.display()));
    let (mut b, mut k) = (None, None);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("malformed line '{line}'")))?;
        let nums: Vec<f64> = value
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("not a number: '{t}'"))))
            .collect::<Result<_>>()?;
        match key.trim() {
            "f" => {}
            "b" => b = nums.first().copied(),
            "K" if nums.len() == 9 => k = Some([[nums[0], nums[1], nums[2]], [nums[3], nums[4], nums[5]], [nums[6], nums[7], nums[8]]]),
            "K" => return Err(bad(format!("K needs 9 entries, got {}", nums.len()))),
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
    }
    let (k, b) = (k.ok_or_else(|| bad("missing K".into()))?, b.ok_or_else(|| bad("missing b".into()))?);
    CameraModel::new(k, b)
}

pub fn write_image<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (h, w) = (img.dim(1), img.dim(2));
    if img.dim(0) != 3 {
        return Err(MsfError::Shape(format!("image must be [3, H, W], got {:?}", img.shape())));
    }
    let n = h * w;
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (img.data()[c * n + i].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    out.save(path)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[3, h, w], |j| raw[3 * (j % n) + j / n] as f64 / 255.0))
}

/// Writes one synthetic scene under `dir`.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    for sub in ["frames", "disp", "flow", "regions"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    write_calib(&dir.join("calib.txt"), scene.camera())?;
    for k in 0..scene.left.len() {
        write_image(&frame_path(dir, "frames", "left", k), &scene.left[k])?;
        write_image(&frame_path(dir, "frames", "right", k), &scene.right[k])?;
        let gt = scene.ground_truth(k);
        write_disparity_png(&frame_path(dir, "disp", "occ", k), &gt.d1, Some(&gt.occ.d1))?;
        write_disparity_png(&frame_path(dir, "disp", "noc", k), &gt.d1, Some(&gt.noc.d1))?;
        write_disparity_png(&frame_path(dir, "disp", "d2_occ", k), &gt.d2, Some(&gt.occ.d2))?;
        write_disparity_png(&frame_path(dir, "disp", "d2_noc", k), &gt.d2, Some(&gt.noc.d2))?;
        write_flow_png(&frame_path(dir, "flow", "occ", k), &gt.flow, Some(&gt.occ.fl))?;
        write_flow_png(&frame_path(dir, "flow", "noc", k), &gt.flow, Some(&gt.noc.fl))?;
        write_region_png(&frame_path(dir, "regions", "regions", k), &scene.truth[k].region_ids, scene.height(), scene.width())?;
    }
    Ok(())
}

/// One scene directory loaded into memory.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub name: String,
    pub path: PathBuf,
    pub cam: CameraModel<f64>,
    pub left: Vec<Tensor<f64>>,
    pub right: Vec<Tensor<f64>>,
    /// Region masks per frame; empty when the file is absent.
    pub regions: Vec<Vec<RegionMask>>,
}

impl SceneData {
    pub fn frames(&self) -> usize {
        self.left.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cam = read_calib(&path.join("calib.txt"))?;
        let (mut left, mut right, mut regions) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0.. {
            let (l, r) = (frame_path(path, "frames", "left", k), frame_path(path, "frames", "right", k));
            if !l.exists() || !r.exists() {
                break;
            }
            left.push(read_image(&l)?);
            right.push(read_image(&r)?);
            let rp = frame_path(path, "regions", "regions", k);
            regions.push(if rp.exists() { load_region_masks(&rp)? } else { Vec::new() });
        }
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(first) = left.first() {
            if left.iter().chain(&right).any(|f| f.shape() != first.shape()) {
                return Err(MsfError::Dataset(format!("{name}: frames differ in size")));
            }
        }
        Ok(Self { name, path: path.to_path_buf(), cam, left, right, regions })
    }

    /// Ground truth of frame `k`, if all six files exist.
    pub fn ground_truth(&self, k: usize) -> Result<Option<GroundTruth<f64>>> {
        let p = |sub, prefix| frame_path(&self.path, sub, prefix, k);
        let files = [p("disp", "occ"), p("disp", "noc"), p("disp", "d2_occ"), p("disp", "d2_noc"), p("flow", "occ"), p("flow", "noc")];
        if files.iter().any(|f| !f.exists()) {
            return Ok(None);
        }
        let [d1o, d1n, d2o, d2n] = [0, 1, 2, 3].map(|i| read_disparity_png(&files[i]));
        let (d1o, d1n, d2o, d2n) = (d1o?, d1n?, d2o?, d2n?);
        let (flo, fln) = (read_flow_png(&files[4])?, read_flow_png(&files[5])?);
        Ok(Some(GroundTruth {
            d1: d1o.values,
            d2: d2o.values,
            flow: flo.values,
            occ: ComponentValidity { d1: d1o.valid, d2: d2o.valid, fl: flo.valid },
            noc: ComponentValidity { d1: d1n.valid, d2: d2n.valid, fl: fln.valid },
        }))
    }
}

/// Scene directories under `root`, sorted by name.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(MsfError::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("calib.txt").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

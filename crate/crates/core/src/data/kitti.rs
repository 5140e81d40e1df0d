//! KITTI 16-bit PNG encodings for disparity and optical flow.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use msf_autograd::{Scalar, Tensor};

use crate::error::{MsfError, Result};
use crate::eval::BoolMap;

pub const DISPARITY_SCALE: f64 = 256.0;
pub const FLOW_SCALE: f64 = 64.0;
pub const FLOW_OFFSET: f64 = 32768.0;

/// A decoded field with its validity.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiField {
    /// `[1, H, W]` for disparity, `[2, H, W]` for flow; 0 where invalid.
    pub values: Tensor<f64>,
    pub valid: BoolMap,
}

fn codec(path: &Path, reason: impl Into<String>) -> MsfError {
    MsfError::Codec { path: path.to_path_buf(), reason: reason.into() }
}

fn quantize(path: &Path, v: f64) -> Result<u16> {
    let q = v.round();
    if !(0.0..=65535.0).contains(&q) {
        return Err(codec(path, format!("value {v} outside the 16-bit range after scaling")));
    }
    Ok(q as u16)
}

pub fn encode_disparity(d: f64) -> Option<u16> {
    let q = (d * DISPARITY_SCALE).round();
    (0.0..=65535.0).contains(&q).then_some(q as u16)
}

pub fn decode_disparity(stored: u16) -> Option<f64> {
    (stored != 0).then(|| stored as f64 / DISPARITY_SCALE)
}

pub fn encode_flow(f: f64) -> Option<u16> {
    let q = (f * FLOW_SCALE + FLOW_OFFSET).round();
    (0.0..=65535.0).contains(&q).then_some(q as u16)
}

pub fn decode_flow(stored: u16) -> f64 {
    (stored as f64 - FLOW_OFFSET) / FLOW_SCALE
}

/// Writes a `[1, H, W]` or `[H, W]` disparity; pixels outside `valid` are
/// stored as 0.
pub fn write_disparity_png<T: Scalar>(path: &Path, d: &Tensor<T>, valid: Option<&BoolMap>) -> Result<()> {
    let (h, w) = (d.dim(d.rank() - 2), d.dim(d.rank() - 1));
    if d.numel() != h * w {
        return Err(codec(path, format!("disparity must have one channel, got {:?}", d.shape())));
    }
    let mut data = Vec::with_capacity(h * w);
    for (i, &v) in d.data().iter().enumerate() {
        let keep = valid.is_none_or(|m| m.data[i]);
        data.push(if keep { quantize(path, v.as_f64() * DISPARITY_SCALE)? } else { 0 });
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized buffer");
    img.save(path)?;
    Ok(())
}

pub fn read_disparity_png(path: &Path) -> Result<KittiField> {
    let img = match image::open(path)? {
        DynamicImage::ImageLuma16(b) => b,
        other => return Err(codec(path, format!("disparity must be 16-bit single-channel, got {:?}", other.color()))),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let valid = BoolMap::from_fn(h, w, |i| raw[i] != 0);
    let values = Tensor::from_fn(&[1, h, w], |i| decode_disparity(raw[i]).unwrap_or(0.0));
    Ok(KittiField { values, valid })
}

/// Writes a `[2, H, W]` flow; the third channel holds validity.
pub fn write_flow_png<T: Scalar>(path: &Path, flow: &Tensor<T>, valid: Option<&BoolMap>) -> Result<()> {
    if flow.rank() != 3 || flow.dim(0) != 2 {
        return Err(codec(path, format!("flow must be [2, H, W], got {:?}", flow.shape())));
    }
    let (h, w) = (flow.dim(1), flow.dim(2));
    let n = h * w;
    let mut data = Vec::with_capacity(3 * n);
    for i in 0..n {
        let keep = valid.is_none_or(|m| m.data[i]);
        if keep {
            data.push(quantize(path, flow.data()[i].as_f64() * FLOW_SCALE + FLOW_OFFSET)?);
            data.push(quantize(path, flow.data()[n + i].as_f64() * FLOW_SCALE + FLOW_OFFSET)?);
            data.push(1);
        } else {
            data.extend([FLOW_OFFSET as u16, FLOW_OFFSET as u16, 0]);
        }
    }
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized buffer");
    img.save(path)?;
    Ok(())
}

pub fn read_flow_png(path: &Path) -> Result<KittiField> {
    let img = match image::open(path)? {
        DynamicImage::ImageRgb16(b) => b,
        other => return Err(codec(path, format!("flow must be 16-bit three-channel, got {:?}", other.color()))),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let raw = img.into_raw();
    let valid = BoolMap::from_fn(h, w, |i| raw[3 * i + 2] != 0);
    let values = Tensor::from_fn(&[2, h, w], |j| {
        let (c, i) = (j / n, j % n);
        if valid.data[i] {
            decode_flow(raw[3 * i + c])
        } else {
            0.0
        }
    });
    Ok(KittiField { values, valid })
}

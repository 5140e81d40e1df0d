//! Region-id maps: one id per pixel, 0 = unassigned.

use std::collections::BTreeMap;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{MsfError, Result};
use crate::losses::RegionMask;

/// One mask per nonzero id, in ascending id order.
pub fn regions_from_ids(ids: &[u32], height: usize, width: usize, source: Option<&Path>) -> Vec<RegionMask> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        if id != 0 {
            by_id.entry(id).or_default().push(i);
        }
    }
    by_id
        .into_iter()
        .map(|(id, pixels)| RegionMask { id, pixels, height, width, source: source.map(Path::to_path_buf) })
        .collect()
}

pub fn write_region_png(path: &Path, ids: &[u32], height: usize, width: usize) -> Result<()> {
    let codec = |reason: String| MsfError::Codec { path: path.to_path_buf(), reason };
    if ids.len() != height * width {
        return Err(codec(format!("{} ids for a {height}x{width} map", ids.len())));
    }
    let data = ids
        .iter()
        .map(|&id| u16::try_from(id).map_err(|_| codec(format!("region id {id} exceeds 16 bits"))))
        .collect::<Result<Vec<u16>>>()?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, data).expect("buffer size checked above");
    img.save(path)?;
    Ok(())
}

/// Reads an 8- or 16-bit single-channel id map.
pub fn read_region_ids(path: &Path) -> Result<(Vec<u32>, usize, usize)> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ids = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(MsfError::Codec {
                path: path.to_path_buf(),
                reason: format!("region map must be single-channel integer, got {:?}", other.color()),
            })
        }
    };
    Ok((ids, h, w))
}

pub fn load_region_masks(path: &Path) -> Result<Vec<RegionMask>> {
    let (ids, h, w) = read_region_ids(path)?;
    Ok(regions_from_ids(&ids, h, w, Some(path)))
}

//! Axial mid-slice PNGs: one grayscale image per modality with the label
//! map blended on top.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use scseg::data::{CaseVolume, MODALITIES};
use scseg::regions::{LabelVolume, ED, ET, NCR};

pub const NCR_COLOR: [u8; 3] = [220, 40, 40];
pub const ED_COLOR: [u8; 3] = [40, 200, 60];
pub const ET_COLOR: [u8; 3] = [250, 210, 30];
const ALPHA: f32 = 0.5;

pub fn label_color(code: u8) -> Option<[u8; 3]> {
    match code {
        NCR => Some(NCR_COLOR),
        ED => Some(ED_COLOR),
        ET => Some(ET_COLOR),
        _ => None,
    }
}

/// Write `<stem>_<modality>.png` for every modality and return the paths.
pub fn render_mid_slice(
    volume: &CaseVolume,
    labels: &LabelVolume,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>, image::ImageError> {
    let [d, h, w] = volume.dims();
    let z = d / 2;
    let plane = h * w;
    let lab = &labels.voxels()[z * plane..(z + 1) * plane];
    let mut paths = Vec::new();
    for (c, name) in MODALITIES.iter().enumerate() {
        let slice = &volume.channel(c)[z * plane..(z + 1) * plane];
        let (lo, hi) = slice
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let g = (slice[i] - lo) / span * 255.0;
            let px = match label_color(lab[i]) {
                Some(col) => col.map(|v| (1.0 - ALPHA) * g + ALPHA * v as f32),
                None => [g; 3],
            };
            Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
        });
        let path = dir.join(format!("{stem}_{name}.png"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

use rand::Rng;

use super::{CaseVolume, MODALITIES};
use crate::error::{Error, Result};
use crate::regions::{LabelVolume, BACKGROUND};
use crate::tensor::{Scalar, Tensor};

const ZSCORE_EPS: f64 = 1e-8;
/// Chance that a foreground-biased patch is centred on a tumor voxel.
pub const FOREGROUND_PROB: f64 = 0.5;

/// Per channel `(x - mean) / (std + 1e-8)` with population statistics.
pub fn zscore_normalize(v: &CaseVolume) -> CaseVolume {
    let n = v.voxels();
    let mut out = Vec::with_capacity(v.intensities().len());
    for c in 0..MODALITIES.len() {
        let ch = v.channel(c);
        let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = 1.0 / (var.sqrt() + ZSCORE_EPS);
        out.extend(ch.iter().map(|&x| ((x as f64 - mean) * scale) as f32));
    }
    CaseVolume::new(v.case_id.clone(), out, v.labels().clone()).expect("shape preserved")
}

/// Voxels added before and after each axis by [`pad_to_divisible`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub before: [usize; 3],
    pub after: [usize; 3],
}

impl Padding {
    pub fn is_empty(&self) -> bool {
        self.before == [0; 3] && self.after == [0; 3]
    }

    pub fn padded_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| dims[a] + self.before[a] + self.after[a])
    }

    /// Embed `channels` grids of extent `dims` into the padded extent.
    pub fn pad<T: Copy>(&self, data: &[T], channels: usize, dims: [usize; 3], fill: T) -> Vec<T> {
        let out_dims = self.padded_dims(dims);
        let mut out = vec![fill; channels * out_dims.iter().product::<usize>()];
        copy_box(
            data,
            dims,
            &mut out,
            out_dims,
            channels,
            [0; 3],
            self.before,
            dims,
        );
        out
    }

    /// Inverse of [`Padding::pad`]; `dims` is the padded extent.
    pub fn crop<T: Copy + Default>(&self, data: &[T], channels: usize, dims: [usize; 3]) -> Vec<T> {
        let inner: [usize; 3] = std::array::from_fn(|a| dims[a] - self.before[a] - self.after[a]);
        let mut out = vec![T::default(); channels * inner.iter().product::<usize>()];
        copy_box(
            data,
            dims,
            &mut out,
            inner,
            channels,
            self.before,
            [0; 3],
            inner,
        );
        out
    }
}

/// Copy a `size` box starting at `from` in `src` to `to` in `dst`, per channel.
#[allow(clippy::too_many_arguments)]
fn copy_box<T: Copy>(
    src: &[T],
    src_dims: [usize; 3],
    dst: &mut [T],
    dst_dims: [usize; 3],
    channels: usize,
    from: [usize; 3],
    to: [usize; 3],
    size: [usize; 3],
) {
    let src_n: usize = src_dims.iter().product();
    let dst_n: usize = dst_dims.iter().product();
    for c in 0..channels {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let s =
                    c * src_n + ((from[0] + z) * src_dims[1] + from[1] + y) * src_dims[2] + from[2];
                let d = c * dst_n + ((to[0] + z) * dst_dims[1] + to[1] + y) * dst_dims[2] + to[2];
                dst[d..d + size[2]].copy_from_slice(&src[s..s + size[2]]);
            }
        }
    }
}

/// Zero-pad intensities and background-pad labels so every extent is a
/// multiple of `divisor`. Odd excess goes to the high side.
pub fn pad_to_divisible(v: &CaseVolume, divisor: usize) -> Result<(CaseVolume, Padding)> {
    if divisor == 0 {
        return Err(Error::invalid("pad_to_divisible", "divisor must be >= 1"));
    }
    let dims = v.dims();
    let mut pad = Padding::default();
    for a in 0..3 {
        let total = dims[a].div_ceil(divisor) * divisor - dims[a];
        pad.before[a] = total / 2;
        pad.after[a] = total - total / 2;
    }
    if pad.is_empty() {
        return Ok((v.clone(), pad));
    }
    let out_dims = pad.padded_dims(dims);
    let intensities = pad.pad(v.intensities(), MODALITIES.len(), dims, 0.0);
    let labels = pad.pad(v.labels().voxels(), 1, dims, BACKGROUND);
    let padded = CaseVolume::new(
        v.case_id.clone(),
        intensities,
        LabelVolume::new(out_dims, labels)?,
    )?;
    Ok((padded, pad))
}

pub fn crop_back(v: &CaseVolume, pad: &Padding) -> Result<CaseVolume> {
    let dims = v.dims();
    if (0..3).any(|a| pad.before[a] + pad.after[a] >= dims[a]) {
        return Err(Error::Geometry(format!(
            "cannot crop {pad:?} from extents {dims:?}"
        )));
    }
    let inner = std::array::from_fn(|a| dims[a] - pad.before[a] - pad.after[a]);
    CaseVolume::new(
        v.case_id.clone(),
        pad.crop(v.intensities(), MODALITIES.len(), dims),
        LabelVolume::new(inner, pad.crop(v.labels().voxels(), 1, dims))?,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchPolicy {
    /// Centre on a random tumor voxel with probability [`FOREGROUND_PROB`],
    /// otherwise anywhere; falls back to uniform when there is no tumor.
    RandomForeground,
    Center,
}

/// Cubic crop of a case: intensities `[4, s, s, s]` and labels `[s, s, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub intensities: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Patch {
    pub fn label_volume(&self) -> Result<LabelVolume> {
        LabelVolume::new([self.size; 3], self.labels.clone())
    }

    pub fn input_tensor<T: Scalar>(&self) -> Tensor<T> {
        let s = self.size;
        Tensor::from_vec(
            [1, MODALITIES.len(), s, s, s],
            self.intensities.iter().map(|&x| T::of(x as f64)).collect(),
        )
        .expect("patch shape")
    }
}

pub fn extract_patch(
    v: &CaseVolume,
    size: usize,
    policy: PatchPolicy,
    rng: &mut impl Rng,
) -> Result<Patch> {
    let dims = v.dims();
    if size == 0 || dims.iter().any(|&e| e < size) {
        return Err(Error::Geometry(format!(
            "patch size {size} does not fit extents {dims:?}"
        )));
    }
    let span: [usize; 3] = std::array::from_fn(|a| dims[a] - size);
    let start: [usize; 3] = match policy {
        PatchPolicy::Center => std::array::from_fn(|a| span[a] / 2),
        PatchPolicy::RandomForeground => {
            let labels = v.labels().voxels();
            let tumor = labels.iter().filter(|&&l| l != BACKGROUND).count();
            if tumor > 0 && rng.random_bool(FOREGROUND_PROB) {
                let k = rng.random_range(0..tumor);
                let i = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l != BACKGROUND)
                    .nth(k)
                    .map(|(i, _)| i)
                    .expect("k < tumor count");
                let c = crate::regions::unravel(dims, i);
                std::array::from_fn(|a| c[a].saturating_sub(size / 2).min(span[a]))
            } else {
                std::array::from_fn(|a| rng.random_range(0..=span[a]))
            }
        }
    };
    let cube = [size; 3];
    let mut intensities = vec![0.0; MODALITIES.len() * size * size * size];
    copy_box(
        v.intensities(),
        dims,
        &mut intensities,
        cube,
        MODALITIES.len(),
        start,
        [0; 3],
        cube,
    );
    let mut labels = vec![BACKGROUND; size * size * size];
    copy_box(
        v.labels().voxels(),
        dims,
        &mut labels,
        cube,
        1,
        start,
        [0; 3],
        cube,
    );
    Ok(Patch {
        size,
        intensities,
        labels,
    })
}

fn flip_grid<T: Copy>(data: &mut [T], channels: usize, s: usize, axes: [bool; 3]) {
    let n = s * s * s;
    let src = data.to_vec();
    let f = |i: usize, flip: bool| if flip { s - 1 - i } else { i };
    for c in 0..channels {
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    let from = ((f(z, axes[0]) * s) + f(y, axes[1])) * s + f(x, axes[2]);
                    data[c * n + (z * s + y) * s + x] = src[c * n + from];
                }
            }
        }
    }
}

/// Mirror the given axes of intensities and labels alike.
pub fn flip_patch(p: &Patch, axes: [bool; 3]) -> Patch {
    let mut out = p.clone();
    if axes.iter().any(|&a| a) {
        flip_grid(&mut out.intensities, MODALITIES.len(), p.size, axes);
        flip_grid(&mut out.labels, 1, p.size, axes);
    }
    out
}

/// Flip each axis independently with probability 0.5.
pub fn augment_flip(p: &Patch, rng: &mut impl Rng) -> (Patch, [bool; 3]) {
    let axes = std::array::from_fn(|_| rng.random_bool(0.5));
    (flip_patch(p, axes), axes)
}

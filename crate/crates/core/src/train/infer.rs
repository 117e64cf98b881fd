use crate::data::{CaseVolume, Padding, MODALITIES};
use crate::error::{Error, Result};
use crate::regions::{
    aggregate_report, labels_from_regions, region_dice, regions_from_labels, CaseDice, DiceReport,
    LabelVolume, RegionMasks,
};
use crate::tensor::{Scalar, Tensor};
use crate::unet::Network;

/// Window origins along one axis: multiples of `stride`, plus a final
/// window flush with the far edge.
pub fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let last = extent - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

pub fn window_stride(patch: usize, overlap: f64) -> usize {
    ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1)
}

/// Region probabilities `[3, D, H, W]` for a whole normalized volume.
///
/// Finest-head logits of overlapping windows are averaged with uniform
/// weights and only then passed through the sigmoid. Extents below the
/// patch size are zero-padded and cropped back.
pub fn sliding_window_infer<T: Scalar>(
    net: &Network<T>,
    volume: &CaseVolume,
    overlap: f64,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(
            "sliding_window_infer",
            format!("overlap {overlap} not in [0, 1)"),
        ));
    }
    let patch = net.config().patch_size;
    let regions = net.config().num_regions;
    let dims = volume.dims();
    let mut pad = Padding::default();
    for a in 0..3 {
        let total = patch.saturating_sub(dims[a]);
        pad.before[a] = total / 2;
        pad.after[a] = total - total / 2;
    }
    let full = pad.padded_dims(dims);
    let src = pad.pad(volume.intensities(), MODALITIES.len(), dims, 0.0f32);
    let n: usize = full.iter().product();
    let stride = window_stride(patch, overlap);
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| window_starts(full[a], patch, stride));

    let mut sum = vec![0.0f64; regions * n];
    let mut count = vec![0u32; n];
    let p3 = patch * patch * patch;
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let mut window = Vec::with_capacity(MODALITIES.len() * p3);
                for c in 0..MODALITIES.len() {
                    for z in z0..z0 + patch {
                        for y in y0..y0 + patch {
                            let i = c * n + (z * full[1] + y) * full[2] + x0;
                            window.extend(src[i..i + patch].iter().map(|&v| T::of(v as f64)));
                        }
                    }
                }
                let input = Tensor::from_vec([1, MODALITIES.len(), patch, patch, patch], window)?;
                let logits = net.predict(input)?;
                let logits = logits.data();
                for r in 0..regions {
                    for z in 0..patch {
                        for y in 0..patch {
                            for x in 0..patch {
                                let vox = ((z0 + z) * full[1] + y0 + y) * full[2] + x0 + x;
                                sum[r * n + vox] +=
                                    logits[((r * patch + z) * patch + y) * patch + x].f64();
                                if r == 0 {
                                    count[vox] += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let probs: Vec<T> = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| T::of(crate::autograd::sigmoid_scalar(s / count[i % n] as f64)))
        .collect();
    let probs = pad.crop(&probs, regions, full);
    Tensor::from_vec([regions, dims[0], dims[1], dims[2]], probs)
}

/// Label map predicted for a whole normalized volume.
pub fn predict_labels<T: Scalar>(
    net: &Network<T>,
    volume: &CaseVolume,
    overlap: f64,
) -> Result<LabelVolume> {
    let probs = sliding_window_infer(net, volume, overlap)?;
    Ok(labels_from_regions(&RegionMasks::from_probabilities(
        &probs, 0.5,
    )?))
}

/// Hard Dice of a predicted label map against the case's ground truth.
pub fn score_case(case_id: &str, pred: &LabelVolume, truth: &LabelVolume) -> Result<CaseDice> {
    if pred.dims() != truth.dims() {
        return Err(Error::Geometry(format!(
            "{case_id}: prediction {:?} vs ground truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(CaseDice {
        case_id: case_id.to_string(),
        dice: region_dice(&regions_from_labels(pred), &regions_from_labels(truth))?,
    })
}

/// Per-case region Dice over normalized validation cases.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    cases: &[CaseVolume],
    overlap: f64,
) -> Result<DiceReport> {
    let scored = cases
        .iter()
        .map(|v| {
            let pred = predict_labels(net, v, overlap)?;
            score_case(&v.case_id, &pred, v.labels())
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_report(scored)
}

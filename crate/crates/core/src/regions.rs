//! Tumor label volumes, the nested evaluation regions derived from them,
//! and hard Dice scoring.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BACKGROUND: u8 = 0;
pub const NCR: u8 = 1;
pub const ED: u8 = 2;
pub const ET: u8 = 3;
/// Older releases of the benchmark encoded enhancing tumor as 4.
pub const LEGACY_ET: u8 = 4;

pub const REGION_NAMES: [&str; 3] = ["ET", "TC", "WT"];

/// Integer tissue classes on a `[D, H, W]` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    voxels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], voxels: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != voxels.len() || dims.contains(&0) {
            return Err(Error::invalid(
                "label_volume",
                format!("extents {dims:?} do not match {} voxels", voxels.len()),
            ));
        }
        if let Some(i) = voxels.iter().position(|&v| v > ET) {
            return Err(Error::UnknownLabel {
                code: voxels[i],
                index: unravel(dims, i),
            });
        }
        Ok(LabelVolume { dims, voxels })
    }

    pub fn background(dims: [usize; 3]) -> Self {
        LabelVolume {
            dims,
            voxels: vec![BACKGROUND; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn count(&self, code: u8) -> usize {
        self.voxels.iter().filter(|&&v| v == code).count()
    }

    pub fn tumor_voxels(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != BACKGROUND).count()
    }
}

pub(crate) fn unravel(dims: [usize; 3], i: usize) -> [usize; 3] {
    [
        i / (dims[1] * dims[2]),
        (i / dims[2]) % dims[1],
        i % dims[2],
    ]
}

/// Binary `[3, D, H, W]` masks in the order ET, TC, WT.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl RegionMasks {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if 3 * dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(
                "region_masks",
                format!(
                    "extents {dims:?} need {} mask values",
                    3 * dims.iter().product::<usize>()
                ),
            ));
        }
        Ok(RegionMasks {
            dims,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    /// Threshold region probabilities `[3, D, H, W]` (or `[1, 3, D, H, W]`).
    pub fn from_probabilities<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Result<Self> {
        let shape = probs.shape();
        let spatial = match shape {
            [3, d, h, w] | [1, 3, d, h, w] => [*d, *h, *w],
            other => {
                return Err(Error::invalid(
                    "region_masks",
                    format!("expected [3, D, H, W] probabilities, got {other:?}"),
                ))
            }
        };
        let data = probs
            .data()
            .iter()
            .map(|p| (p.f64() > threshold) as u8)
            .collect();
        Self::new(spatial, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.dims.iter().product::<usize>();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn et(&self) -> &[u8] {
        self.channel(0)
    }

    pub fn tc(&self) -> &[u8] {
        self.channel(1)
    }

    pub fn wt(&self) -> &[u8] {
        self.channel(2)
    }

    pub fn is_nested(&self) -> bool {
        self.et()
            .iter()
            .zip(self.tc())
            .zip(self.wt())
            .all(|((&e, &t), &w)| e <= t && t <= w)
    }

    /// The masks as a float tensor `[3, D, H, W]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [d, h, w] = self.dims;
        Tensor::from_vec(
            [3, d, h, w],
            self.data
                .iter()
                .map(|&v| if v != 0 { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask extents are consistent")
    }
}

pub fn regions_from_labels(labels: &LabelVolume) -> RegionMasks {
    let n = labels.len();
    let mut data = vec![0u8; 3 * n];
    for (i, &l) in labels.voxels().iter().enumerate() {
        data[i] = (l == ET) as u8;
        data[n + i] = (l == NCR || l == ET) as u8;
        data[2 * n + i] = (l != BACKGROUND) as u8;
    }
    RegionMasks {
        dims: labels.dims(),
        data,
    }
}

/// Inverse of [`regions_from_labels`]; nesting is first enforced by
/// propagating ET into TC and TC into WT.
pub fn labels_from_regions(masks: &RegionMasks) -> LabelVolume {
    let voxels = masks
        .et()
        .iter()
        .zip(masks.tc())
        .zip(masks.wt())
        .map(|((&et, &tc), &wt)| {
            let tc = tc | et;
            let wt = wt | tc;
            if et != 0 {
                ET
            } else if tc != 0 {
                NCR
            } else if wt != 0 {
                ED
            } else {
                BACKGROUND
            }
        })
        .collect();
    LabelVolume {
        dims: masks.dims(),
        voxels,
    }
}

/// `2|P ∩ G| / (|P| + |G|)`, defined as 1 when both masks are empty.
pub fn dice_score(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "dice_score",
            expected: vec![gt.len()],
            got: vec![pred.len()],
        });
    }
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        sp += p as usize;
        sg += g as usize;
    }
    if sp + sg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + sg) as f64)
}

/// Hard Dice of each region, ordered ET, TC, WT.
pub fn region_dice(pred: &RegionMasks, gt: &RegionMasks) -> Result<[f64; 3]> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            op: "region_dice",
            expected: gt.dims().to_vec(),
            got: pred.dims().to_vec(),
        });
    }
    Ok([
        dice_score(pred.et(), gt.et())?,
        dice_score(pred.tc(), gt.tc())?,
        dice_score(pred.wt(), gt.wt())?,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseDice {
    pub case_id: String,
    pub dice: [f64; 3],
}

impl CaseDice {
    pub fn average(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }
}

/// Per-case Dice with per-region mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub cases: Vec<CaseDice>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Mean of the three region means.
    pub avg_mean: f64,
    /// Population std of each case's mean over regions.
    pub avg_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_report(cases: Vec<CaseDice>) -> Result<DiceReport> {
    if cases.is_empty() {
        return Err(Error::invalid("aggregate_report", "no cases to aggregate"));
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for r in 0..3 {
        (mean[r], std[r]) = mean_std(cases.iter().map(|c| c.dice[r]));
    }
    let avg_mean = mean.iter().sum::<f64>() / 3.0;
    let (_, avg_std) = mean_std(cases.iter().map(CaseDice::average));
    Ok(DiceReport {
        cases,
        mean,
        std,
        avg_mean,
        avg_std,
    })
}

/// Per-case and summary records of a report, one JSON object per line.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReportRecord {
    Case {
        case_id: String,
        dice_et: f64,
        dice_tc: f64,
        dice_wt: f64,
    },
    Summary {
        cases: usize,
        mean_et: f64,
        mean_tc: f64,
        mean_wt: f64,
        mean_avg: f64,
        std_et: f64,
        std_tc: f64,
        std_wt: f64,
        std_avg: f64,
    },
}

impl DiceReport {
    pub fn records(&self) -> Vec<ReportRecord> {
        let mut out: Vec<ReportRecord> = self
            .cases
            .iter()
            .map(|c| ReportRecord::Case {
                case_id: c.case_id.clone(),
                dice_et: c.dice[0],
                dice_tc: c.dice[1],
                dice_wt: c.dice[2],
            })
            .collect();
        out.push(ReportRecord::Summary {
            cases: self.cases.len(),
            mean_et: self.mean[0],
            mean_tc: self.mean[1],
            mean_wt: self.mean[2],
            mean_avg: self.avg_mean,
            std_et: self.std[0],
            std_tc: self.std[1],
            std_wt: self.std[2],
            std_avg: self.avg_std,
        });
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in self.records() {
            s.push_str(&serde_json::to_string(&r)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Cells `mean_{std}` in percent for ET, TC, WT, AVG.
    pub fn cells(&self) -> [String; 4] {
        let cell = |m: f64, s: f64| format!("{:.2}_{{{:.2}}}", 100.0 * m, 100.0 * s);
        [
            cell(self.mean[0], self.std[0]),
            cell(self.mean[1], self.std[1]),
            cell(self.mean[2], self.std[2]),
            cell(self.avg_mean, self.avg_std),
        ]
    }

    /// Table row with a leading label column.
    pub fn table(&self, label: &str) -> String {
        let cells = self.cells();
        let width = label.len().max(8);
        format!(
            "{:<width$} | {:>16} | {:>16} | {:>16} | {:>16}\n{:<width$} | {:>16} | {:>16} | {:>16} | {:>16}\n",
            "Approach", "ET", "TC", "WT", "AVG", label, cells[0], cells[1], cells[2], cells[3],
        )
    }
}

impl fmt::Display for DiceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table("model"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_mapping() {
        let dims = [1, 1, 4];
        let l = LabelVolume::new(dims, vec![0, 1, 2, 3]).unwrap();
        let m = regions_from_labels(&l);
        assert_eq!(m.et(), &[0, 0, 0, 1]);
        assert_eq!(m.tc(), &[0, 1, 0, 1]);
        assert_eq!(m.wt(), &[0, 1, 1, 1]);
        assert_eq!(labels_from_regions(&m), l);
    }

    #[test]
    fn unknown_code_names_the_voxel() {
        let err = LabelVolume::new([1, 2, 2], vec![0, 0, 0, 7]).unwrap_err();
        match err {
            Error::UnknownLabel { code, index } => {
                assert_eq!(code, 7);
                assert_eq!(index, [0, 1, 1]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_volume_has_empty_masks() {
        let m = regions_from_labels(&LabelVolume::background([2, 2, 2]));
        assert!(m
            .channel(0)
            .iter()
            .chain(m.tc())
            .chain(m.wt())
            .all(|&v| v == 0));
        assert_eq!(labels_from_regions(&m).tumor_voxels(), 0);
    }

    #[test]
    fn lone_et_mask_is_forced_to_label_3() {
        let m = RegionMasks::new([1, 1, 1], vec![1, 0, 0]).unwrap();
        assert_eq!(labels_from_regions(&m).voxels(), &[ET]);
    }

    #[test]
    fn dice_counting() {
        assert_eq!(dice_score(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice_score(&[1, 0, 0], &[0, 1, 0]).unwrap(), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0]).unwrap(), 1.0);
        let p: Vec<u8> = (0..16).map(|i| (i < 8) as u8).collect();
        let g: Vec<u8> = (0..16).map(|i| (4..12).contains(&i) as u8).collect();
        assert_eq!(dice_score(&p, &g).unwrap(), 0.5);
        assert!(dice_score(&[1], &[1, 0]).is_err());
    }

    fn case(id: &str, d: [f64; 3]) -> CaseDice {
        CaseDice {
            case_id: id.into(),
            dice: d,
        }
    }

    #[test]
    fn report_statistics() {
        let r = aggregate_report(vec![case("a", [1.0, 1.0, 1.0])]).unwrap();
        assert_eq!(r.cells()[0], "100.00_{0.00}");
        assert_eq!(r.std, [0.0; 3]);

        let r =
            aggregate_report(vec![case("a", [0.8, 0.9, 1.0]), case("b", [0.6, 0.7, 1.0])]).unwrap();
        assert!((r.mean[0] - 0.7).abs() < 1e-12);
        assert!((r.std[0] - 0.1).abs() < 1e-12);
        assert_eq!(r.cells()[0], "70.00_{10.00}");
        assert!((r.avg_mean - (0.7 + 0.8 + 1.0) / 3.0).abs() < 1e-12);
        assert!(aggregate_report(vec![]).is_err());
    }

    #[test]
    fn table_column_order() {
        let r = aggregate_report(vec![case("a", [0.5, 0.6, 0.7])]).unwrap();
        let header = r.table("Baseline");
        let first = header.lines().next().unwrap();
        let cols: Vec<&str> = first.split('|').map(str::trim).collect();
        assert_eq!(cols, ["Approach", "ET", "TC", "WT", "AVG"]);
        let records = r.records();
        assert_eq!(records.len(), 2);
        assert!(matches!(records[1], ReportRecord::Summary { cases: 1, .. }));
    }
}

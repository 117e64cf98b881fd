//! Multi-modal case volumes: synthetic generation, on-disk format and the
//! preprocessing applied before training and inference.

pub mod io;
pub mod phantom;
pub mod preprocess;

use crate::error::{Error, Result};
use crate::regions::LabelVolume;

pub use io::{
    load_manifest, read_case, read_labels, split_indices, write_case, write_dataset, write_labels,
    DatasetManifest, ManifestEntry, ReadStats, Split,
};
pub use phantom::{case_seeds, generate_phantom, ClassIntensities, PhantomSpec};
pub use preprocess::{
    augment_flip, crop_back, extract_patch, flip_patch, pad_to_divisible, zscore_normalize,
    Padding, Patch, PatchPolicy,
};

/// Channel order of every intensity grid.
pub const MODALITIES: [&str; 4] = ["T1", "T1Gd", "T2", "FLAIR"];
pub const T1GD: usize = 1;
pub const FLAIR: usize = 3;

/// Four co-registered intensity channels `[4, D, H, W]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseVolume {
    pub case_id: String,
    intensities: Vec<f32>,
    labels: LabelVolume,
}

impl CaseVolume {
    pub fn new(
        case_id: impl Into<String>,
        intensities: Vec<f32>,
        labels: LabelVolume,
    ) -> Result<Self> {
        if intensities.len() != MODALITIES.len() * labels.len() {
            return Err(Error::invalid(
                "case_volume",
                format!(
                    "{} intensities for {} channels of {:?}",
                    intensities.len(),
                    MODALITIES.len(),
                    labels.dims()
                ),
            ));
        }
        Ok(CaseVolume {
            case_id: case_id.into(),
            intensities,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims()
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn intensities(&self) -> &[f32] {
        &self.intensities
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.intensities[c * n..(c + 1) * n]
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    pub fn into_parts(self) -> (String, Vec<f32>, LabelVolume) {
        (self.case_id, self.intensities, self.labels)
    }
}

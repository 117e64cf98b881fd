//! On-disk case format.
//!
//! Each case is a JSON header `<id>.vol.json` next to two raw blobs:
//! `<id>.vol.raw` holds `f32` little-endian intensities in C order
//! `[channel, depth, height, width]` and `<id>.seg.raw` holds `u8` labels
//! in C order `[depth, height, width]`. Label-only volumes (predictions)
//! use `<id>.seg.json` with no intensity file. A dataset directory adds a
//! `manifest.json` listing every case and its split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::phantom::{case_seeds, generate_phantom, PhantomSpec};
use super::{CaseVolume, MODALITIES};
use crate::error::{Error, Result};
use crate::regions::{LabelVolume, ET, LEGACY_ET};

pub const VOLUME_MAGIC: &str = "SCSEG-VOLUME";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    format_version: u32,
    case_id: String,
    extents: [usize; 3],
    channels: Vec<String>,
    intensity_file: Option<String>,
    intensity_type: Option<String>,
    label_file: String,
    label_type: String,
}

/// Side information collected while reading a case.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReadStats {
    /// Voxels stored with the legacy enhancing-tumor code 4, now 3.
    pub legacy_remapped: usize,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
    {
        return Err(Error::invalid(
            "case_id",
            format!("{id:?} is not a portable file stem"),
        ));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_header(path: &Path, header: &Header) -> Result<()> {
    let mut text = serde_json::to_string_pretty(header)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Write `<id>.vol.json`, `<id>.vol.raw` and `<id>.seg.raw` under `dir`
/// and return the header path.
pub fn write_case(dir: &Path, v: &CaseVolume) -> Result<PathBuf> {
    check_id(&v.case_id)?;
    let id = &v.case_id;
    let header = Header {
        magic: VOLUME_MAGIC.into(),
        format_version: FORMAT_VERSION,
        case_id: id.clone(),
        extents: v.dims(),
        channels: MODALITIES.iter().map(|s| s.to_string()).collect(),
        intensity_file: Some(format!("{id}.vol.raw")),
        intensity_type: Some("f32le".into()),
        label_file: format!("{id}.seg.raw"),
        label_type: "u8".into(),
    };
    let bytes: Vec<u8> = v
        .intensities()
        .iter()
        .flat_map(|x| x.to_le_bytes())
        .collect();
    write_file(&dir.join(format!("{id}.vol.raw")), &bytes)?;
    write_file(&dir.join(&header.label_file), v.labels().voxels())?;
    let path = dir.join(format!("{id}.vol.json"));
    write_header(&path, &header)?;
    Ok(path)
}

/// Write a label-only volume as `<id>.seg.json` plus `<id>.seg.raw`.
pub fn write_labels(dir: &Path, id: &str, labels: &LabelVolume) -> Result<PathBuf> {
    check_id(id)?;
    let header = Header {
        magic: VOLUME_MAGIC.into(),
        format_version: FORMAT_VERSION,
        case_id: id.into(),
        extents: labels.dims(),
        channels: Vec::new(),
        intensity_file: None,
        intensity_type: None,
        label_file: format!("{id}.seg.raw"),
        label_type: "u8".into(),
    };
    write_file(&dir.join(&header.label_file), labels.voxels())?;
    let path = dir.join(format!("{id}.seg.json"));
    write_header(&path, &header)?;
    Ok(path)
}

fn read_header(path: &Path) -> Result<Header> {
    let malformed = |msg: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        msg,
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    // Check the magic before the full schema so a foreign file is named as such.
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(VOLUME_MAGIC) => {}
        found => {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: found.unwrap_or("").to_string(),
            })
        }
    }
    let h: Header = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if h.format_version != FORMAT_VERSION {
        return Err(malformed(format!(
            "unsupported format_version {}",
            h.format_version
        )));
    }
    if h.extents.contains(&0) {
        return Err(malformed(format!(
            "extents {:?} must be positive",
            h.extents
        )));
    }
    if h.label_type != "u8" {
        return Err(malformed(format!(
            "label_type {:?}, expected \"u8\"",
            h.label_type
        )));
    }
    Ok(h)
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

fn read_label_blob(dir: &Path, h: &Header) -> Result<(LabelVolume, ReadStats)> {
    let n: usize = h.extents.iter().product();
    let mut voxels = read_blob(&dir.join(&h.label_file), n)?;
    let mut stats = ReadStats::default();
    for v in voxels.iter_mut().filter(|v| **v == LEGACY_ET) {
        *v = ET;
        stats.legacy_remapped += 1;
    }
    if stats.legacy_remapped > 0 {
        log::warn!(
            "{}: remapped {} voxels from legacy label 4 to 3",
            h.case_id,
            stats.legacy_remapped
        );
    }
    Ok((LabelVolume::new(h.extents, voxels)?, stats))
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Read a case from its `.vol.json` header.
pub fn read_case(header_path: &Path) -> Result<(CaseVolume, ReadStats)> {
    let h = read_header(header_path)?;
    let malformed = |msg: String| Error::MalformedHeader {
        path: header_path.to_path_buf(),
        msg,
    };
    if h.channels != MODALITIES {
        return Err(malformed(format!(
            "channels {:?}, expected {MODALITIES:?}",
            h.channels
        )));
    }
    let file = h
        .intensity_file
        .as_deref()
        .ok_or_else(|| malformed("no intensity_file".into()))?;
    if h.intensity_type.as_deref() != Some("f32le") {
        return Err(malformed(format!(
            "intensity_type {:?}, expected \"f32le\"",
            h.intensity_type
        )));
    }
    let dir = parent(header_path);
    let n: usize = h.extents.iter().product();
    let raw = read_blob(&dir.join(file), 4 * MODALITIES.len() * n)?;
    let intensities = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let (labels, stats) = read_label_blob(dir, &h)?;
    Ok((CaseVolume::new(h.case_id, intensities, labels)?, stats))
}

/// Read only the labels of any header (case or label-only).
pub fn read_labels(header_path: &Path) -> Result<(String, LabelVolume, ReadStats)> {
    let h = read_header(header_path)?;
    let (labels, stats) = read_label_blob(parent(header_path), &h)?;
    Ok((h.case_id, labels, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub case_id: String,
    /// Header path relative to the dataset directory.
    pub header: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub cases: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.cases.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries(split).count()
    }

    /// Read every case of `split`, in manifest order.
    pub fn load_cases(&self, dir: &Path, split: Split) -> Result<Vec<CaseVolume>> {
        self.entries(split)
            .map(|e| read_case(&dir.join(&e.header)).map(|(v, _)| v))
            .collect()
    }
}

/// Deterministic shuffle of `0..n` into (train, val) index sets.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let (train, val) = idx.split_at(n_train.min(n));
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Keeps the split stream independent of the per-case seed stream.
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Generate `count` phantom cases into `dir` and write the manifest last.
pub fn write_dataset(dir: &Path, spec: &PhantomSpec, count: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("write_dataset", "case count must be >= 1"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let seeds = case_seeds(spec.seed, count);
    let headers: Vec<PathBuf> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let v = generate_phantom(spec, &format!("case_{i:03}"), s)?;
            write_case(dir, &v)
        })
        .collect::<Result<_>>()?;
    let (_, val) = split_indices(count, spec.seed);
    let cases = headers
        .iter()
        .enumerate()
        .map(|(i, h)| ManifestEntry {
            case_id: format!("case_{i:03}"),
            header: h.file_name().unwrap().to_string_lossy().into_owned(),
            split: if val.binary_search(&i).is_ok() {
                Split::Val
            } else {
                Split::Train
            },
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: spec.seed,
        phantom: spec.clone(),
        cases,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Read `manifest.json` from `dir`, checking that ids are unique and every
/// referenced file exists.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let mut ids: Vec<&str> = m.cases.iter().map(|e| e.case_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::MalformedHeader {
            path,
            msg: format!("case {} is listed twice", w[0]),
        });
    }
    for e in &m.cases {
        let h = dir.join(&e.header);
        if !h.is_file() {
            return Err(Error::MalformedHeader {
                path,
                msg: format!("case {} references missing file {}", e.case_id, h.display()),
            });
        }
    }
    Ok(m)
}

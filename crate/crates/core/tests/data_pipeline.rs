mod common;

use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scseg::data::{
    augment_flip, crop_back, extract_patch, generate_phantom, load_manifest, pad_to_divisible,
    read_case, read_labels, split_indices, write_case, write_dataset, write_labels,
    zscore_normalize, CaseVolume, PatchPolicy, Split, T1GD,
};
use scseg::regions::{regions_from_labels, LabelVolume, ET, NCR};
use scseg::Error;

fn random_case(id: &str, dims: [usize; 3], seed: u64) -> CaseVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let mut intensities: Vec<f32> = (0..4 * n).map(|_| rng.random_range(-5.0..5.0)).collect();
    // Values that a lossy text or decimal path would not preserve.
    intensities[0] = -0.0;
    intensities[1] = f32::MIN_POSITIVE / 3.0;
    intensities[2] = 1.0 + f32::EPSILON;
    let labels = LabelVolume::new(dims, (0..n).map(|_| rng.random_range(0..4)).collect()).unwrap();
    CaseVolume::new(id, intensities, labels).unwrap()
}

fn bits(v: &CaseVolume) -> Vec<u32> {
    v.intensities().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn case_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_case("case_7", [5, 3, 4], 1);
    let header = write_case(dir.path(), &v).unwrap();
    let (back, stats) = read_case(&header).unwrap();
    assert_eq!(stats.legacy_remapped, 0);
    assert_eq!(back.case_id, v.case_id);
    assert_eq!(back.dims(), v.dims());
    assert_eq!(bits(&back), bits(&v));
    assert_eq!(back.labels(), v.labels());

    let lh = write_labels(dir.path(), "pred_7", v.labels()).unwrap();
    let (id, labels, _) = read_labels(&lh).unwrap();
    assert_eq!((id.as_str(), &labels), ("pred_7", v.labels()));
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_case("c", [2, 2, 2], 2);
    let header = write_case(dir.path(), &v).unwrap();
    let text = fs::read_to_string(&header).unwrap();

    fs::write(&header, text.replace("SCSEG-VOLUME", "NIFTI-1")).unwrap();
    match read_case(&header) {
        Err(Error::BadMagic { found, .. }) => assert_eq!(found, "NIFTI-1"),
        other => panic!("expected a magic error, got {other:?}"),
    }

    fs::write(&header, text.replace("\"extents\"", "\"extent\"")).unwrap();
    assert!(matches!(
        read_case(&header),
        Err(Error::MalformedHeader { .. })
    ));
    fs::write(&header, "{ not json").unwrap();
    assert!(matches!(
        read_case(&header),
        Err(Error::MalformedHeader { .. })
    ));

    fs::write(&header, &text).unwrap();
    let raw = dir.path().join("c.vol.raw");
    let bytes = fs::read(&raw).unwrap();
    fs::write(&raw, &bytes[..bytes.len() - 3]).unwrap();
    match read_case(&header) {
        Err(Error::Truncated {
            expected, found, ..
        }) => assert_eq!((expected, found), (128, 125)),
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn legacy_enhancing_code_is_remapped() {
    let dir = tempfile::tempdir().unwrap();
    let header = r#"{
  "magic": "SCSEG-VOLUME",
  "format_version": 1,
  "case_id": "legacy",
  "extents": [1, 2, 3],
  "channels": ["T1", "T1Gd", "T2", "FLAIR"],
  "intensity_file": "legacy.vol.raw",
  "intensity_type": "f32le",
  "label_file": "legacy.seg.raw",
  "label_type": "u8"
}"#;
    fs::write(dir.path().join("legacy.vol.json"), header).unwrap();
    fs::write(dir.path().join("legacy.vol.raw"), vec![0u8; 4 * 4 * 6]).unwrap();
    fs::write(dir.path().join("legacy.seg.raw"), [0u8, 4, 1, 2, 4, 3]).unwrap();
    let (v, stats) = read_case(&dir.path().join("legacy.vol.json")).unwrap();
    assert_eq!(stats.legacy_remapped, 2);
    assert_eq!(v.labels().voxels(), &[0, 3, 1, 2, 3, 3]);

    fs::write(dir.path().join("legacy.seg.raw"), [0u8, 5, 1, 2, 4, 3]).unwrap();
    assert!(matches!(
        read_case(&dir.path().join("legacy.vol.json")),
        Err(Error::UnknownLabel { code: 5, .. })
    ));
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn datasets_are_reproducible_and_split_80_20() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = common::small_phantom(42);
    let m = write_dataset(a.path(), &spec, 10).unwrap();
    write_dataset(b.path(), &spec, 10).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!((m.count(Split::Train), m.count(Split::Val)), (8, 2));

    let loaded = load_manifest(a.path()).unwrap();
    assert_eq!(loaded, m);
    for v in loaded.load_cases(a.path(), Split::Val).unwrap() {
        assert!(regions_from_labels(v.labels()).is_nested());
        assert!(v.labels().tumor_voxels() > 0);
    }

    fs::remove_file(a.path().join("case_003.vol.json")).unwrap();
    let err = load_manifest(a.path()).unwrap_err().to_string();
    assert!(err.contains("case_003"), "{err}");
}

#[test]
fn default_split_is_64_16_and_seed_stable() {
    let (train, val) = split_indices(80, 42);
    assert_eq!((train.len(), val.len()), (64, 16));
    assert_eq!(split_indices(80, 42), (train.clone(), val.clone()));
    let mut all: Vec<_> = train.iter().chain(&val).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..80).collect::<Vec<_>>());
    assert_ne!(split_indices(80, 43).1, val);
}

#[test]
fn enhancing_rim_outshines_necrosis() {
    let spec = scseg::data::PhantomSpec::default();
    let gap = (spec.means.et[T1GD] - spec.means.ncr[T1GD]) as f64;
    assert!(spec.noise_std < gap / 4.0);
    for seed in 0..3 {
        let v = generate_phantom(&spec, "c", seed).unwrap();
        let t1gd = v.channel(T1GD);
        let mean = |code| {
            let xs: Vec<f64> = v
                .labels()
                .voxels()
                .iter()
                .zip(t1gd)
                .filter(|(l, _)| **l == code)
                .map(|(_, &x)| x as f64)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        // The gap is applied before per-case gain jitter, so allow for it.
        assert!(mean(ET) - mean(NCR) > gap * (1.0 - spec.gain_jitter) * 0.9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn phantoms_are_nested_and_reproducible(seed in any::<u64>()) {
        let spec = common::small_phantom(0);
        let a = generate_phantom(&spec, "p", seed).unwrap();
        let b = generate_phantom(&spec, "p", seed).unwrap();
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert_eq!(a.labels(), b.labels());
        prop_assert!(regions_from_labels(a.labels()).is_nested());
    }

    #[test]
    fn pad_then_crop_is_identity(d in 1usize..9, h in 1usize..9, w in 1usize..9, div in 1usize..6, seed in any::<u64>()) {
        let v = random_case("p", [d, h, w], seed);
        let (padded, pad) = pad_to_divisible(&v, div).unwrap();
        prop_assert!(padded.dims().iter().all(|e| e % div == 0));
        let back = crop_back(&padded, &pad).unwrap();
        prop_assert_eq!(bits(&back), bits(&v));
        prop_assert_eq!(back.labels(), v.labels());
    }

    #[test]
    fn normalization_is_idempotent(seed in any::<u64>(), scale in 0.1f32..100.0) {
        let v = random_case("z", [4, 5, 3], seed);
        let scaled: Vec<f32> = v.intensities().iter().map(|x| x * scale + 7.0).collect();
        let v = CaseVolume::new("z", scaled, v.labels().clone()).unwrap();
        let once = zscore_normalize(&v);
        let twice = zscore_normalize(&once);
        for (a, b) in once.intensities().iter().zip(twice.intensities()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
        for c in 0..4 {
            let ch = once.channel(c);
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-5 && (var.sqrt() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn patches_fit_and_flips_keep_alignment(seed in any::<u64>(), size in 1usize..=6, center in any::<bool>()) {
        let v = random_case("q", [6, 7, 6], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = if center { PatchPolicy::Center } else { PatchPolicy::RandomForeground };
        let p = extract_patch(&v, size, policy, &mut rng).unwrap();
        prop_assert_eq!(p.intensities.len(), 4 * size.pow(3));
        prop_assert_eq!(p.labels.len(), size.pow(3));
        let (f, axes) = augment_flip(&p, &mut rng);
        let tumor = |l: &[u8]| l.iter().filter(|&&x| x != 0).count();
        prop_assert_eq!(tumor(&f.labels), tumor(&p.labels));
        let again = scseg::data::flip_patch(&f, axes);
        prop_assert_eq!(again.labels, p.labels);
        prop_assert!(extract_patch(&v, 8, policy, &mut rng).is_err());
    }
}

#[test]
fn flip_masks_follow_the_seed() {
    let v = random_case("f", [4, 4, 4], 3);
    let p = extract_patch(
        &v,
        4,
        PatchPolicy::Center,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let masks = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..8)
            .map(|_| augment_flip(&p, &mut rng).1)
            .collect::<Vec<_>>()
    };
    assert_eq!(masks(11), masks(11));
    assert_eq!(p.intensities, v.intensities());
    assert_eq!(p.labels, v.labels().voxels());
}

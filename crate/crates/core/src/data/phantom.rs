//! Procedural brain-tumor phantoms.
//!
//! A tumor is three concentric shells sharing one random deformation of the
//! unit sphere: an NCR core, an ET rim up to the tumor-core radius, and an
//! ED shell up to the whole-tumor radius. Because every shell scales the
//! same star-shaped surface, nesting holds by construction. Intensities are
//! per-class means per modality (enhancing rim bright and necrosis dark on
//! T1Gd, edema bright on FLAIR) times a per-case gain, plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CaseVolume, MODALITIES};
use crate::error::{Error, Result};
use crate::regions::{LabelVolume, BACKGROUND, ED, ET, NCR};

/// Mean intensity per modality (T1, T1Gd, T2, FLAIR) of each tissue class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassIntensities {
    pub brain: [f32; 4],
    pub ncr: [f32; 4],
    pub ed: [f32; 4],
    pub et: [f32; 4],
}

impl Default for ClassIntensities {
    fn default() -> Self {
        ClassIntensities {
            brain: [1.0, 1.0, 1.0, 1.0],
            ncr: [0.6, 0.4, 1.7, 1.2],
            ed: [0.8, 1.0, 1.5, 1.9],
            et: [0.9, 2.0, 1.2, 1.4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub extent: [usize; 3],
    /// Semi-axes of the brain ellipsoid, centred in the grid.
    pub brain_radii: [f64; 3],
    /// Tumor centre offset from the grid centre, uniform in `±center_jitter`.
    pub center_jitter: f64,
    pub wt_radius: [f64; 2],
    pub tc_radius: [f64; 2],
    pub ncr_radius: [f64; 2],
    /// Per-axis stretch drawn from `[1 - anisotropy, 1 + anisotropy]`.
    pub anisotropy: f64,
    /// Relative amplitude of the surface deformation.
    pub deformation: f64,
    pub means: ClassIntensities,
    pub noise_std: f64,
    /// Per-case, per-modality gain drawn from `[1 - gain_jitter, 1 + gain_jitter]`.
    pub gain_jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: [48, 48, 48],
            brain_radii: [21.0, 22.0, 19.0],
            center_jitter: 4.0,
            wt_radius: [9.0, 12.0],
            tc_radius: [5.5, 7.5],
            ncr_radius: [2.0, 3.5],
            anisotropy: 0.15,
            deformation: 0.12,
            means: ClassIntensities::default(),
            noise_std: 0.15,
            gain_jitter: 0.1,
            seed: 42,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Phantom(m));
        if self.extent.contains(&0) {
            return bad(format!("extent {:?} must be positive", self.extent));
        }
        for (name, [lo, hi]) in [
            ("ncr_radius", self.ncr_radius),
            ("tc_radius", self.tc_radius),
            ("wt_radius", self.wt_radius),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!(
                    "{name} range [{lo}, {hi}] must satisfy 0 < min <= max"
                ));
            }
        }
        if self.ncr_radius[1] >= self.tc_radius[0] {
            return bad(format!(
                "radius ordering violated: ncr_radius max {} must be < tc_radius min {}",
                self.ncr_radius[1], self.tc_radius[0]
            ));
        }
        if self.tc_radius[1] >= self.wt_radius[0] {
            return bad(format!(
                "radius ordering violated: tc_radius max {} must be < wt_radius min {}",
                self.tc_radius[1], self.wt_radius[0]
            ));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        if !(0.0..1.0).contains(&self.anisotropy)
            || !(0.0..1.0).contains(&self.deformation)
            || !(0.0..1.0).contains(&self.gain_jitter)
        {
            return bad("anisotropy, deformation and gain_jitter must lie in [0, 1)".into());
        }
        if !(self.center_jitter >= 0.0) || self.brain_radii.iter().any(|&r| !(r > 0.0)) {
            return bad("center_jitter must be >= 0 and brain radii positive".into());
        }
        Ok(())
    }
}

/// Random star-shaped radius modulation `1 + amp * mean_j sin(f_j u.v_j + phi_j)`.
struct Deformation {
    amp: f64,
    waves: [([f64; 3], f64, f64); 3],
}

impl Deformation {
    fn draw(amp: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut wave = || {
            let mut v = [0.0; 3];
            v.iter_mut().for_each(|c| *c = normal.sample(rng));
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|c| *c /= n);
            (
                v,
                rng.random_range(2.0..5.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        Deformation {
            amp,
            waves: [wave(), wave(), wave()],
        }
    }

    fn factor(&self, u: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(v, f, phi)| (f * (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) + phi).sin())
            .sum();
        1.0 + self.amp * s / 3.0
    }
}

fn draw(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Generate one case; identical `(spec, case_seed)` give identical volumes.
pub fn generate_phantom(spec: &PhantomSpec, case_id: &str, case_seed: u64) -> Result<CaseVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let [d, h, w] = spec.extent;
    let mid = [
        d as f64 / 2.0 - 0.5,
        h as f64 / 2.0 - 0.5,
        w as f64 / 2.0 - 0.5,
    ];
    let center: [f64; 3] = std::array::from_fn(|a| {
        mid[a]
            + if spec.center_jitter > 0.0 {
                rng.random_range(-spec.center_jitter..spec.center_jitter)
            } else {
                0.0
            }
    });
    let stretch: [f64; 3] =
        std::array::from_fn(|_| draw([1.0 - spec.anisotropy, 1.0 + spec.anisotropy], &mut rng));
    let r_wt = draw(spec.wt_radius, &mut rng);
    let r_tc = draw(spec.tc_radius, &mut rng);
    let r_ncr = draw(spec.ncr_radius, &mut rng);
    let deform = Deformation::draw(spec.deformation, &mut rng);
    let gain: [f64; 4] =
        std::array::from_fn(|_| draw([1.0 - spec.gain_jitter, 1.0 + spec.gain_jitter], &mut rng));

    let n = d * h * w;
    let mut labels = vec![BACKGROUND; n];
    let mut in_brain = vec![false; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = [z as f64, y as f64, x as f64];
                let b: f64 = (0..3)
                    .map(|a| ((p[a] - mid[a]) / spec.brain_radii[a]).powi(2))
                    .sum();
                in_brain[i] = b <= 1.0;
                let q: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]) / stretch[a]);
                let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                let scaled = if rho > 0.0 {
                    rho / deform.factor([q[0] / rho, q[1] / rho, q[2] / rho])
                } else {
                    0.0
                };
                labels[i] = if scaled <= r_ncr {
                    NCR
                } else if scaled <= r_tc {
                    ET
                } else if scaled <= r_wt {
                    ED
                } else {
                    BACKGROUND
                };
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("valid noise std");
    let m = &spec.means;
    let mut intensities = Vec::with_capacity(MODALITIES.len() * n);
    for c in 0..MODALITIES.len() {
        for i in 0..n {
            let mean = match labels[i] {
                NCR => m.ncr[c],
                ED => m.ed[c],
                ET => m.et[c],
                _ if in_brain[i] => m.brain[c],
                _ => 0.0,
            };
            let eps = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            intensities.push((gain[c] * mean as f64 + eps) as f32);
        }
    }
    CaseVolume::new(case_id, intensities, LabelVolume::new(spec.extent, labels)?)
}

/// Per-case seeds derived from the dataset seed, in case order.
pub fn case_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

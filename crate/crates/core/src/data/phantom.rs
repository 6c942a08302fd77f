//! Procedural PET/CT/GTV cases for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::case::{BBox, PatientCase};
use super::volume::{Modality, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Field of view in mm per axis; the raw grid has `extent/spacing` voxels.
    pub extent: [usize; 3],
    pub n_lesions: usize,
    pub spacing: [f32; 3],
    pub center_id: String,
    /// Relative PET noise standard deviation.
    pub noise: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            extent: [48; 3],
            n_lesions: 1,
            spacing: [0.98, 0.98, 3.27],
            center_id: "PHANTOM".into(),
            noise: 0.05,
        }
    }
}

struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.c[a]) / self.r[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Phantom with default spacing and centre label.
pub fn generate_phantom(seed: u64, extent: usize, n_lesions: usize) -> Result<PatientCase> {
    generate_phantom_with(
        seed,
        &PhantomConfig {
            extent: [extent; 3],
            n_lesions,
            ..Default::default()
        },
    )
}

pub fn generate_phantom_with(seed: u64, cfg: &PhantomConfig) -> Result<PatientCase> {
    if cfg.extent.iter().any(|&e| e == 0 || e % 16 != 0) {
        return Err(Error::Config(format!(
            "phantom extent {:?} must be positive multiples of 16",
            cfg.extent
        )));
    }
    if cfg.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!("phantom spacing {:?} must be positive", cfg.spacing)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = cfg.spacing.map(f64::from);
    let dims: [usize; 3] = std::array::from_fn(|a| ((cfg.extent[a] as f64 / sp[a]).round() as usize).max(1));
    let fov: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1).max(1) as f64 * sp[a]);
    let margin = dims.map(|d| d / 8);
    let bbox = BBox {
        start: margin,
        end: std::array::from_fn(|a| dims[a] - margin[a]),
    };

    // Smooth CT background from a few low-frequency waves, scaled into ±200 HU.
    let waves: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let f = std::array::from_fn(|_| rng.random_range(0.3..1.5));
            (f, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
        })
        .collect();
    let amp: f64 = waves.iter().map(|w| w.2).sum();
    let bones: Vec<(Ellipsoid, f64)> = (0..2)
        .map(|_| {
            let e = Ellipsoid {
                c: std::array::from_fn(|a| rng.random_range(0.2..0.8) * fov[a]),
                r: std::array::from_fn(|a| rng.random_range(0.05..0.1) * fov[a].max(16.0)),
            };
            (e, rng.random_range(400.0..800.0))
        })
        .collect();

    let pet_bg = rng.random_range(1.0..2.0);
    let lesions: Vec<(Ellipsoid, f64)> = (0..cfg.n_lesions)
        .map(|_| {
            let r: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.08..0.16) * fov[a].max(16.0));
            // Centres snap to a voxel so every lesion owns at least one voxel.
            let c = std::array::from_fn(|a| {
                let lo = bbox.start[a] as f64 * sp[a] + r[a];
                let hi = (bbox.end[a] - 1) as f64 * sp[a] - r[a];
                let w = if hi > lo { rng.random_range(lo..hi) } else { 0.5 * (lo + hi) };
                (w / sp[a]).round().clamp(0.0, (dims[a] - 1) as f64) * sp[a]
            });
            (Ellipsoid { c, r }, rng.random_range(5.0..10.0))
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise * pet_bg).map_err(|e| Error::Config(e.to_string()))?;
    let n: usize = dims.iter().product();
    let (mut pet, mut ct, mut gtv) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];
                let mut hu = 200.0
                    * waves
                        .iter()
                        .map(|(f, ph, a)| {
                            let arg: f64 = (0..3).map(|k| f[k] * p[k] / fov[k]).sum();
                            a * (std::f64::consts::TAU * arg + ph).cos()
                        })
                        .sum::<f64>()
                    / amp;
                if let Some((_, v)) = bones.iter().find(|(e, _)| e.contains(p)) {
                    hu = *v;
                }
                let lesion = lesions.iter().find(|(e, _)| e.contains(p));
                let uptake = lesion.map_or(1.0, |(_, k)| *k);
                let bg = pet_bg * (1.0 + 0.1 * (std::f64::consts::TAU * p[2] / fov[2]).sin());
                pet.push((bg * uptake + noise.sample(&mut rng)).max(0.0) as f32);
                ct.push(hu as f32);
                gtv.push(lesion.is_some() as u8 as f32);
            }
        }
    }
    let case = PatientCase {
        case_id: format!("{}{seed:03}", cfg.center_id),
        center_id: cfg.center_id.clone(),
        pet: Volume::new(pet, dims, cfg.spacing, Modality::Pet)?,
        ct: Volume::new(ct, dims, cfg.spacing, Modality::Ct)?,
        gtv: Some(Volume::new(gtv, dims, cfg.spacing, Modality::Mask)?),
        bbox,
    };
    case.validate()?;
    Ok(case)
}

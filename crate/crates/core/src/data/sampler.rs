use rand::Rng;
use serde::{Deserialize, Serialize};

use super::case::PatientCase;
use super::volume::Volume;
use crate::error::{Error, Result};

pub const PET_PAD: f32 = 0.0;
/// Air after CT normalization.
pub const CT_PAD: f32 = -1.0;
pub const LABEL_PAD: f32 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Patch extent along x, y, z.
    pub patch: [usize; 3],
    /// Probability of drawing a window that contains tumour.
    pub p_tumor: f64,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patch: [144; 3],
            p_tumor: 0.9,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch.iter().any(|&p| p == 0 || p % 16 != 0) {
            return Err(Error::Config(format!(
                "patch {:?} must be positive multiples of 16",
                self.patch
            )));
        }
        if !(0.0..=1.0).contains(&self.p_tumor) {
            return Err(Error::Config(format!("p_tumor {} must lie in [0, 1]", self.p_tumor)));
        }
        Ok(())
    }
}

/// Patches cut from one window of a case.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pet: Volume,
    pub ct: Volume,
    pub label: Volume,
    /// Window origin in case voxels; negative when the case is smaller than
    /// the patch and gets padded.
    pub start: [isize; 3],
}

impl Patch {
    pub fn has_tumor(&self) -> bool {
        self.label.data.contains(&1.0)
    }
}

/// Window enumeration for one case, reusable across draws.
#[derive(Clone, Debug)]
pub struct CaseSampler {
    patch: [usize; 3],
    p_tumor: f64,
    starts: [Vec<isize>; 3],
    tumor: Vec<u32>,
}

impl CaseSampler {
    pub fn new(case: &PatientCase, cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let gtv = case
            .gtv
            .as_ref()
            .ok_or_else(|| Error::Data(format!("case {} has no GTV to sample from", case.case_id)))?;
        let dims = gtv.dims;
        let starts: [Vec<isize>; 3] = std::array::from_fn(|a| {
            let (n, p) = (dims[a] as isize, cfg.patch[a] as isize);
            if n >= p {
                (0..=n - p).collect()
            } else {
                vec![-((p - n) / 2)]
            }
        });
        let prefix = Prefix3::new(gtv);
        let mut tumor = Vec::new();
        let mut idx = 0u32;
        for &z in &starts[2] {
            for &y in &starts[1] {
                for &x in &starts[0] {
                    if prefix.any([x, y, z], cfg.patch) {
                        tumor.push(idx);
                    }
                    idx += 1;
                }
            }
        }
        Ok(Self {
            patch: cfg.patch,
            p_tumor: cfg.p_tumor,
            starts,
            tumor,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.starts.iter().map(Vec::len).product()
    }

    pub fn n_tumor_windows(&self) -> usize {
        self.tumor.len()
    }

    /// Chooses a window origin: a tumour window with probability `p_tumor`
    /// (when one exists), otherwise any window.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> [isize; 3] {
        let u: f64 = rng.random();
        let flat = if u < self.p_tumor && !self.tumor.is_empty() {
            self.tumor[rng.random_range(0..self.tumor.len())] as usize
        } else {
            rng.random_range(0..self.n_windows())
        };
        let (nx, ny) = (self.starts[0].len(), self.starts[1].len());
        [
            self.starts[0][flat % nx],
            self.starts[1][(flat / nx) % ny],
            self.starts[2][flat / (nx * ny)],
        ]
    }

    pub fn sample<R: Rng + ?Sized>(&self, case: &PatientCase, rng: &mut R) -> Result<Patch> {
        let start = self.draw(rng);
        extract_patch(case, start, self.patch)
    }
}

/// Cuts patch-sized windows at `start`, padding PET and labels with 0 and
/// CT with −1.
pub fn extract_patch(case: &PatientCase, start: [isize; 3], patch: [usize; 3]) -> Result<Patch> {
    let gtv = case
        .gtv
        .as_ref()
        .ok_or_else(|| Error::Data(format!("case {} has no GTV", case.case_id)))?;
    Ok(Patch {
        pet: case.pet.window(start, patch, PET_PAD),
        ct: case.ct.window(start, patch, CT_PAD),
        label: gtv.window(start, patch, LABEL_PAD),
        start,
    })
}

/// One draw from a fresh [`CaseSampler`].
pub fn sample_patch<R: Rng + ?Sized>(case: &PatientCase, cfg: &SamplerConfig, rng: &mut R) -> Result<Patch> {
    CaseSampler::new(case, cfg)?.sample(case, rng)
}

/// Inclusive 3-D prefix sums of a mask, padded with a zero border.
struct Prefix3 {
    dims: [usize; 3],
    sums: Vec<u32>,
}

impl Prefix3 {
    fn new(v: &Volume) -> Self {
        let [nx, ny, nz] = v.dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut sums = vec![0u32; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| (z * sy + y) * sx + x;
        for z in 1..=nz {
            for y in 1..=ny {
                for x in 1..=nx {
                    let v = (v.at(x - 1, y - 1, z - 1) != 0.0) as u32;
                    sums[at(x, y, z)] = v + sums[at(x - 1, y, z)] + sums[at(x, y - 1, z)] + sums[at(x, y, z - 1)]
                        - sums[at(x - 1, y - 1, z)]
                        - sums[at(x - 1, y, z - 1)]
                        - sums[at(x, y - 1, z - 1)]
                        + sums[at(x - 1, y - 1, z - 1)];
                }
            }
        }
        Self { dims: v.dims, sums }
    }

    /// Whether the window `[start, start + size)`, clipped to the grid,
    /// contains a non-zero voxel.
    fn any(&self, start: [isize; 3], size: [usize; 3]) -> bool {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            lo[a] = start[a].max(0) as usize;
            hi[a] = ((start[a] + size[a] as isize).max(0) as usize).min(self.dims[a]);
            if lo[a] >= hi[a] {
                return false;
            }
        }
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let s = |x: usize, y: usize, z: usize| self.sums[(z * sy + y) * sx + x] as i64;
        let total = s(hi[0], hi[1], hi[2]) - s(lo[0], hi[1], hi[2]) - s(hi[0], lo[1], hi[2]) - s(hi[0], hi[1], lo[2])
            + s(lo[0], lo[1], hi[2])
            + s(lo[0], hi[1], lo[2])
            + s(hi[0], lo[1], lo[2])
            - s(lo[0], lo[1], lo[2]);
        total > 0
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti::volume_read;
use super::preprocess::{ct_normalize, resample_isotropic};
use super::volume::{Modality, Volume};
use crate::error::{Error, Result};

/// Axis-aligned voxel box, `[start, end)` per axis in x, y, z order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub start: [usize; 3],
    pub end: [usize; 3],
}

impl BBox {
    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            start: [0; 3],
            end: dims,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.end[a] - self.start[a])
    }

    pub fn check(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.start[a] >= self.end[a] || self.end[a] > dims[a] {
                return Err(Error::Data(format!("bbox {self:?} does not fit volume dims {dims:?}")));
            }
        }
        Ok(())
    }

    /// Maps the box onto a grid resampled from `from` to `to` voxels per
    /// axis, covering every output voxel whose source lies inside it.
    pub fn rescale(&self, from: [usize; 3], to: [usize; 3]) -> Self {
        let mut out = *self;
        for a in 0..3 {
            if from[a] == to[a] {
                continue;
            }
            if from[a] == 1 || to[a] == 1 {
                (out.start[a], out.end[a]) = (0, to[a]);
                continue;
            }
            let r = (to[a] - 1) as f64 / (from[a] - 1) as f64;
            let s = (self.start[a] as f64 * r - 1e-9).ceil().max(0.0) as usize;
            let e = ((((self.end[a] - 1) as f64) * r + 1e-9).floor() as usize + 1).min(to[a]);
            out.start[a] = s.min(to[a] - 1);
            out.end[a] = e.max(out.start[a] + 1);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientCase {
    pub case_id: String,
    pub center_id: String,
    pub pet: Volume,
    pub ct: Volume,
    pub gtv: Option<Volume>,
    pub bbox: BBox,
}

impl PatientCase {
    pub fn validate(&self) -> Result<()> {
        let ctx = |msg: String| Error::Data(format!("case {}: {msg}", self.case_id));
        if self.pet.modality != Modality::Pet || self.ct.modality != Modality::Ct {
            return Err(ctx(format!(
                "expected PET and CT, got {} and {}",
                self.pet.modality, self.ct.modality
            )));
        }
        if !self.pet.same_grid(&self.ct) {
            return Err(ctx(format!(
                "PET grid {:?} differs from CT grid {:?}",
                self.pet.dims, self.ct.dims
            )));
        }
        if let Some(g) = &self.gtv {
            if g.modality != Modality::Mask || !g.same_grid(&self.pet) {
                return Err(ctx("GTV must be a mask on the PET grid".into()));
            }
        }
        self.bbox.check(self.pet.dims).map_err(|e| ctx(e.to_string()))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.pet.dims
    }
}

/// Crops every volume of the case to its bounding box.
pub fn crop_bbox(case: &PatientCase) -> Result<PatientCase> {
    case.bbox.check(case.dims())?;
    let (s, e) = (case.bbox.start, case.bbox.end);
    Ok(PatientCase {
        case_id: case.case_id.clone(),
        center_id: case.center_id.clone(),
        pet: case.pet.crop(s, e)?,
        ct: case.ct.crop(s, e)?,
        gtv: case.gtv.as_ref().map(|g| g.crop(s, e)).transpose()?,
        bbox: BBox::full(case.bbox.dims()),
    })
}

/// Resamples every volume to `target` mm and normalizes CT. Running it on
/// an already processed case returns the case unchanged.
pub fn preprocess_case(case: &PatientCase, target: f32) -> Result<PatientCase> {
    case.validate()?;
    let pet = resample_isotropic(&case.pet, target)?;
    let ct = ct_normalize(&resample_isotropic(&case.ct, target)?)?;
    let gtv = case.gtv.as_ref().map(|g| resample_isotropic(g, target)).transpose()?;
    let out = PatientCase {
        case_id: case.case_id.clone(),
        center_id: case.center_id.clone(),
        bbox: case.bbox.rescale(case.pet.dims, pet.dims),
        pet,
        ct,
        gtv,
    };
    out.validate()?;
    Ok(out)
}

/// One manifest record: `case_id center_id pet ct gtv x0 y0 z0 x1 y1 z1`.
/// A GTV path of `-` means no ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub center_id: String,
    pub pet: PathBuf,
    pub ct: PathBuf,
    pub gtv: Option<PathBuf>,
    pub bbox: BBox,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<PatientCase> {
        let case = PatientCase {
            case_id: self.case_id.clone(),
            center_id: self.center_id.clone(),
            pet: volume_read(&self.pet)?.with_modality(Modality::Pet)?,
            ct: volume_read(&self.ct)?.with_modality(Modality::Ct)?,
            gtv: self
                .gtv
                .as_ref()
                .map(|p| volume_read(p).and_then(|v| v.with_modality(Modality::Mask)))
                .transpose()?,
            bbox: self.bbox,
        };
        case.validate()?;
        Ok(case)
    }
}

/// Parses a manifest. Relative paths are resolved against the manifest's
/// directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Manifest { line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 11 {
            return Err(bad(format!("expected 11 fields, found {}", f.len())));
        }
        let mut b = [0usize; 6];
        for (k, v) in f[5..].iter().enumerate() {
            b[k] = v
                .parse()
                .map_err(|_| bad(format!("bbox field '{v}' is not a non-negative integer")))?;
        }
        let bbox = BBox {
            start: [b[0], b[1], b[2]],
            end: [b[3], b[4], b[5]],
        };
        if (0..3).any(|a| bbox.start[a] >= bbox.end[a]) {
            return Err(bad(format!("empty bbox {bbox:?}")));
        }
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        out.push(ManifestEntry {
            case_id: f[0].to_string(),
            center_id: f[1].to_string(),
            pet: resolve(f[2]),
            ct: resolve(f[3]),
            gtv: (f[4] != "-").then(|| resolve(f[4])),
            bbox,
        });
    }
    Ok(out)
}

/// Writes entries with paths relative to `base` where possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut s = String::from("# case_id center_id pet ct gtv x0 y0 z0 x1 y1 z1\n");
    for e in entries {
        let [x0, y0, z0] = e.bbox.start;
        let [x1, y1, z1] = e.bbox.end;
        let gtv = e.gtv.as_deref().map(rel).unwrap_or_else(|| "-".into());
        writeln!(
            s,
            "{} {} {} {} {} {x0} {y0} {z0} {x1} {y1} {z1}",
            e.case_id,
            e.center_id,
            rel(&e.pet),
            rel(&e.ct),
            gtv
        )
        .unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

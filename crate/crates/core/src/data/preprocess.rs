use super::volume::{Modality, Volume};
use crate::error::{Error, Result};
use crate::volumetric::{trilinear_resize, LinearTaps};

pub const CT_CLIP_HU: f32 = 1024.0;
pub const ZSCORE_EPS: f64 = 1e-8;

/// Output extent along one axis: `round(n·s/t)`, at least 1.
pub fn resampled_extent(n: usize, spacing: f32, target: f32) -> usize {
    ((n as f64 * spacing as f64 / target as f64).round() as usize).max(1)
}

/// Resamples to `target` mm voxels. Intensities are interpolated
/// trilinearly and masks with nearest neighbour. Sample `j` of an axis is
/// taken from source index `j·(n−1)/(m−1)`, so the first and last voxel
/// centres keep their world positions.
pub fn resample_isotropic(v: &Volume, target: f32) -> Result<Volume> {
    if !(target > 0.0) {
        return Err(Error::Data(format!("target spacing {target} must be positive")));
    }
    v.validate()?;
    if v.spacing == [target; 3] {
        return Ok(v.clone());
    }
    let dims: [usize; 3] = std::array::from_fn(|a| resampled_extent(v.dims[a], v.spacing[a], target));
    let data = if v.modality == Modality::Mask {
        nearest(v, dims)
    } else {
        trilinear_resize(&v.to_tensor(), [dims[2], dims[1], dims[0]])?.to_vec()
    };
    Ok(Volume {
        data,
        dims,
        spacing: [target; 3],
        ..v.clone_header()
    })
}

fn nearest(v: &Volume, dims: [usize; 3]) -> Vec<f32> {
    let pick = |a: usize| {
        let t = LinearTaps::align_corners(v.dims[a], dims[a]);
        (0..dims[a])
            .map(|i| if t.frac[i] < 0.5 { t.lo[i] } else { t.hi[i] })
            .collect::<Vec<_>>()
    };
    let (ix, iy, iz) = (pick(0), pick(1), pick(2));
    let mut out = Vec::with_capacity(dims.iter().product());
    for &z in &iz {
        for &y in &iy {
            out.extend(ix.iter().map(|&x| v.at(x, y, z)));
        }
    }
    out
}

/// Clips CT to ±1024 HU and maps it to `[−1, 1]`. Already normalized
/// volumes are returned unchanged.
pub fn ct_normalize(v: &Volume) -> Result<Volume> {
    if v.modality != Modality::Ct {
        return Err(Error::Data(format!("ct_normalize expects a CT volume, got {}", v.modality)));
    }
    if v.normalized {
        return Ok(v.clone());
    }
    let mut out = v.clone();
    for x in &mut out.data {
        *x = x.clamp(-CT_CLIP_HU, CT_CLIP_HU) / CT_CLIP_HU;
    }
    out.normalized = true;
    Ok(out)
}

/// `(x − mean)/max(std, 1e-8)` with the population standard deviation.
pub fn pet_zscore(values: &[f32]) -> Vec<f32> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(ZSCORE_EPS);
    values.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect()
}

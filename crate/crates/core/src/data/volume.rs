use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Pet,
    Ct,
    Mask,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Pet => "PET",
            Modality::Ct => "CT",
            Modality::Mask => "MASK",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PET" => Ok(Modality::Pet),
            "CT" => Ok(Modality::Ct),
            "MASK" => Ok(Modality::Mask),
            _ => Err(Error::Data(format!("unknown modality '{s}'"))),
        }
    }
}

/// A scalar 3-D grid stored x-fastest: index `(z·ny + y)·nx + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    /// `[nx, ny, nz]`.
    pub dims: [usize; 3],
    /// Voxel size in mm along x, y, z.
    pub spacing: [f32; 3],
    /// World position of voxel (0, 0, 0) in mm.
    pub origin: [f32; 3],
    pub modality: Modality,
    /// Set once intensity normalization has been applied.
    pub normalized: bool,
}

impl Volume {
    pub fn new(data: Vec<f32>, dims: [usize; 3], spacing: [f32; 3], modality: Modality) -> Result<Self> {
        let v = Self {
            data,
            dims,
            spacing,
            origin: [0.0; 3],
            modality,
            normalized: false,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], modality: Modality, value: f32) -> Result<Self> {
        Self::new(vec![value; dims.iter().product()], dims, spacing, modality)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Data(format!("volume dims {:?} must be positive", self.dims)));
        }
        if self.data.len() != self.numel() {
            return Err(Error::Data(format!(
                "volume dims {:?} need {} samples, got {}",
                self.dims,
                self.numel(),
                self.data.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Data(format!("spacing {:?} must be positive", self.spacing)));
        }
        if self.modality == Modality::Mask {
            if let Some(v) = self.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("mask contains non-binary value {v}")));
            }
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Same geometry, new samples.
    pub fn with_data(&self, data: Vec<f32>, modality: Modality) -> Result<Self> {
        let v = Self {
            data,
            modality,
            ..self.clone_header()
        };
        v.validate()?;
        Ok(v)
    }

    pub(crate) fn clone_header(&self) -> Self {
        Self {
            data: Vec::new(),
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            modality: self.modality,
            normalized: self.normalized,
        }
    }

    /// Reinterprets the samples as another modality, checking mask binarity.
    pub fn with_modality(mut self, modality: Modality) -> Result<Self> {
        self.modality = modality;
        self.validate()?;
        Ok(self)
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Sub-volume `[start, end)` per axis, with the origin moved accordingly.
    pub fn crop(&self, start: [usize; 3], end: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if start[a] >= end[a] || end[a] > self.dims[a] {
                return Err(Error::Data(format!(
                    "crop [{start:?}, {end:?}) outside volume dims {:?}",
                    self.dims
                )));
            }
        }
        let dims = [end[0] - start[0], end[1] - start[1], end[2] - start[2]];
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in start[2]..end[2] {
            for y in start[1]..end[1] {
                let i = self.index(start[0], y, z);
                data.extend_from_slice(&self.data[i..i + dims[0]]);
            }
        }
        let mut origin = self.origin;
        for a in 0..3 {
            origin[a] += start[a] as f32 * self.spacing[a];
        }
        Ok(Self {
            data,
            dims,
            origin,
            ..self.clone_header()
        })
    }

    /// Window `[start, start + size)` of a conceptually padded volume;
    /// samples outside the grid take `fill`.
    pub fn window(&self, start: [isize; 3], size: [usize; 3], fill: f32) -> Self {
        let mut data = vec![fill; size.iter().product()];
        let [nx, ny, nz] = self.dims.map(|d| d as isize);
        let x0 = start[0].max(0);
        let x1 = (start[0] + size[0] as isize).min(nx);
        for z in 0..size[2] {
            let sz = start[2] + z as isize;
            if sz < 0 || sz >= nz {
                continue;
            }
            for y in 0..size[1] {
                let sy = start[1] + y as isize;
                if sy < 0 || sy >= ny || x0 >= x1 {
                    continue;
                }
                let src = self.index(x0 as usize, sy as usize, sz as usize);
                let dst = (z * size[1] + y) * size[0] + (x0 - start[0]) as usize;
                let len = (x1 - x0) as usize;
                data[dst..dst + len].copy_from_slice(&self.data[src..src + len]);
            }
        }
        let mut origin = self.origin;
        for a in 0..3 {
            origin[a] += start[a] as f32 * self.spacing[a];
        }
        Self {
            data,
            dims: size,
            origin,
            ..self.clone_header()
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// `[1, 1, nz, ny, nx]` tensor view of the samples.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [nx, ny, nz] = self.dims;
        Tensor::new(self.data.clone(), &[1, 1, nz, ny, nx]).expect("volume shape is consistent")
    }
}

/// Stacks equally sized volumes into one `[N, C, nz, ny, nx]` tensor, where
/// `items[n][c]` is channel `c` of example `n`.
pub fn stack_channels(items: &[Vec<&Volume>]) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .and_then(|v| v.first())
        .ok_or_else(|| Error::Data("nothing to stack".into()))?;
    let dims = first.dims;
    let c = items[0].len();
    let mut data = Vec::with_capacity(items.len() * c * first.numel());
    for ex in items {
        if ex.len() != c {
            return Err(Error::Data("examples have different channel counts".into()));
        }
        for v in ex {
            if v.dims != dims {
                return Err(Error::Data(format!("cannot stack dims {:?} with {:?}", v.dims, dims)));
            }
            data.extend_from_slice(&v.data);
        }
    }
    Tensor::new(data, &[items.len(), c, dims[2], dims[1], dims[0]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        Volume::new((0..n).map(|i| i as f32).collect(), dims, [1.0, 2.0, 3.0], Modality::Pet).unwrap()
    }

    #[test]
    fn crop_moves_origin() {
        let v = ramp([4, 3, 2]);
        let c = v.crop([1, 1, 1], [3, 3, 2]).unwrap();
        assert_eq!(c.dims, [2, 2, 1]);
        assert_eq!(c.data, vec![v.at(1, 1, 1), v.at(2, 1, 1), v.at(1, 2, 1), v.at(2, 2, 1)]);
        assert_eq!(c.origin, [1.0, 2.0, 3.0]);
        assert!(v.crop([0, 0, 0], [5, 1, 1]).is_err());
        assert_eq!(v.crop([0; 3], v.dims).unwrap(), v);
    }

    #[test]
    fn window_pads_outside() {
        let v = ramp([2, 2, 2]);
        let w = v.window([-1, 0, 0], [3, 2, 2], -1.0);
        assert_eq!(&w.data[..3], &[-1.0, 0.0, 1.0]);
        assert_eq!(v.window([0; 3], [2, 2, 2], 9.0).data, v.data);
    }

    #[test]
    fn mask_must_be_binary() {
        assert!(Volume::new(vec![0.0, 0.5], [2, 1, 1], [1.0; 3], Modality::Mask).is_err());
        assert!(Volume::new(vec![0.0, 1.0], [2, 1, 1], [0.0, 1.0, 1.0], Modality::Pet).is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::data::{crop_bbox, pet_zscore, stack_channels, Modality, PatientCase, Volume, CT_PAD, PET_PAD};
use crate::error::{Error, Result};
use crate::model::{forward, forward_logits, ModelConfig};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Crops with more voxels than this (after padding) are processed in tiles.
    pub max_voxels: usize,
    pub tile: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            max_voxels: 160 * 160 * 160,
            tile: [144; 3],
            stride: [96; 3],
        }
    }
}

impl InferConfig {
    pub fn validate(&self, divisor: usize) -> Result<()> {
        for a in 0..3 {
            if self.tile[a] == 0 || !self.tile[a].is_multiple_of(divisor) {
                return Err(Error::Config(format!("tile {:?} must be multiples of {divisor}", self.tile)));
            }
            if self.stride[a] == 0 || self.stride[a] > self.tile[a] {
                return Err(Error::Config(format!("stride {:?} must lie in [1, tile]", self.stride)));
            }
        }
        Ok(())
    }
}

/// Whether model outputs are read as probabilities or as logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    #[default]
    Probability,
    Logit,
}

/// Foreground probabilities over the case's bounding-box crop.
pub fn predict_case(params: &ModelParams<f32>, cfg: &ModelConfig, case: &PatientCase, icfg: &InferConfig) -> Result<Volume> {
    predict_map(params, cfg, case, icfg, OutputSpace::Probability)
}

/// Model output over the bounding-box crop in the requested space.
pub fn predict_map(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    case: &PatientCase,
    icfg: &InferConfig,
    space: OutputSpace,
) -> Result<Volume> {
    let crop = crop_bbox(case)?;
    let pet = crop.pet.with_data(pet_zscore(&crop.pet.data), Modality::Pet)?;
    predict_crop(params, cfg, &pet, &crop.ct, 0, icfg, space)
}

/// Runs the model on a normalized PET/CT crop. The crop is padded
/// symmetrically to the next multiple of the model divisor plus
/// `extra_pad` voxels per side; the padding is removed from the output.
pub fn predict_crop(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    pet: &Volume,
    ct: &Volume,
    extra_pad: usize,
    icfg: &InferConfig,
    space: OutputSpace,
) -> Result<Volume> {
    if !pet.same_grid(ct) {
        return Err(Error::Data(format!(
            "PET dims {:?} and CT dims {:?} differ",
            pet.dims, ct.dims
        )));
    }
    let k = cfg.divisor();
    icfg.validate(k)?;
    let dims = pet.dims;
    let padded: [usize; 3] = std::array::from_fn(|a| (dims[a] + 2 * extra_pad).div_ceil(k) * k);
    let before: [isize; 3] = std::array::from_fn(|a| -(((padded[a] - dims[a]) / 2) as isize));
    let pet_p = pet.window(before, padded, PET_PAD);
    let ct_p = ct.window(before, padded, CT_PAD);

    let out = if padded.iter().product::<usize>() <= icfg.max_voxels {
        run(params, cfg, &pet_p, &ct_p, space)?
    } else {
        tiled(params, cfg, &pet_p, &ct_p, icfg, space)?
    };
    let start: [usize; 3] = before.map(|b| (-b) as usize);
    let end: [usize; 3] = std::array::from_fn(|a| start[a] + dims[a]);
    let mut v = out.crop(start, end)?;
    v.origin = pet.origin;
    Ok(v)
}

fn run(params: &ModelParams<f32>, cfg: &ModelConfig, pet: &Volume, ct: &Volume, space: OutputSpace) -> Result<Volume> {
    let x = stack_channels(&[vec![pet, ct]])?;
    let y: Tensor<f32> = match space {
        OutputSpace::Probability => forward(params, cfg, &x)?,
        OutputSpace::Logit => forward_logits(params, cfg, &x)?,
    };
    if y.shape()[1] != 1 {
        return Err(Error::Config(format!(
            "inference expects one output channel, model has {}",
            y.shape()[1]
        )));
    }
    let mut v = pet.with_data(y.to_vec(), Modality::Pet)?;
    v.normalized = false;
    Ok(v)
}

/// Tile origins covering `[0, n)` with windows of `tile`, the last one
/// flush with the end.
fn tile_starts(n: usize, tile: usize, stride: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let mut s: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < n).collect();
    s.push(n - tile);
    s
}

fn tiled(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    pet: &Volume,
    ct: &Volume,
    icfg: &InferConfig,
    space: OutputSpace,
) -> Result<Volume> {
    let dims = pet.dims;
    let tile: [usize; 3] = std::array::from_fn(|a| icfg.tile[a].min(dims[a]));
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| tile_starts(dims[a], tile[a], icfg.stride[a]));
    let mut sum = vec![0f64; pet.numel()];
    let mut hits = vec![0u32; pet.numel()];
    for &z in &starts[2] {
        for &y in &starts[1] {
            for &x in &starts[0] {
                let s = [x as isize, y as isize, z as isize];
                let out = run(params, cfg, &pet.window(s, tile, PET_PAD), &ct.window(s, tile, CT_PAD), space)?;
                for tz in 0..tile[2] {
                    for ty in 0..tile[1] {
                        for tx in 0..tile[0] {
                            let i = pet.index(x + tx, y + ty, z + tz);
                            sum[i] += out.at(tx, ty, tz) as f64;
                            hits[i] += 1;
                        }
                    }
                }
            }
        }
    }
    let data = sum.iter().zip(&hits).map(|(s, &h)| (s / h as f64) as f32).collect();
    pet.with_data(data, Modality::Pet)
}

use serde::{Deserialize, Serialize};

use super::predict::{predict_map, InferConfig, OutputSpace};
use crate::data::{Modality, PatientCase, Volume};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Member checkpoint paths, in order.
    pub checkpoints: Vec<String>,
    pub threshold: f64,
    /// Space in which member outputs are averaged.
    pub combine: OutputSpace,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            threshold: 0.5,
            combine: OutputSpace::Probability,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// Mean probability map and the thresholded mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    pub probability: Volume,
    pub mask: Volume,
}

/// Voxelwise mean of member maps. Each voxel's values are sorted before
/// summation in f64, so the result does not depend on member order.
pub fn mean_maps(maps: &[Volume]) -> Result<Volume> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
    for (i, m) in maps.iter().enumerate() {
        if m.dims != first.dims {
            return Err(Error::Data(format!(
                "member {i} output dims {:?} differ from {:?}",
                m.dims, first.dims
            )));
        }
    }
    let k = maps.len();
    let mut buf = vec![0f32; k];
    let data = (0..first.numel())
        .map(|i| {
            for (b, m) in buf.iter_mut().zip(maps) {
                *b = m.data[i];
            }
            buf.sort_by(f32::total_cmp);
            (buf.iter().map(|&v| v as f64).sum::<f64>() / k as f64) as f32
        })
        .collect();
    first.with_data(data, first.modality)
}

/// Combines member outputs (probabilities or logits per `ecfg.combine`)
/// into a probability map and a `≥ threshold` mask.
pub fn combine_members(maps: &[Volume], ecfg: &EnsembleConfig) -> Result<EnsembleOutput> {
    ecfg.validate()?;
    let mean = mean_maps(maps)?;
    let probability = match ecfg.combine {
        OutputSpace::Probability => mean,
        OutputSpace::Logit => {
            let p = mean.data.iter().map(|&z| sigmoid(z)).collect();
            mean.with_data(p, Modality::Pet)?
        }
    };
    let t = ecfg.threshold;
    let mask_data = probability.data.iter().map(|&p| (p as f64 >= t) as u8 as f32).collect();
    let mask = probability.with_data(mask_data, Modality::Mask)?;
    Ok(EnsembleOutput { probability, mask })
}

fn sigmoid(z: f32) -> f32 {
    let z = z as f64;
    (if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        z.exp() / (1.0 + z.exp())
    }) as f32
}

/// Runs every member on the case and combines the results.
pub fn ensemble_predict(
    members: &[(ModelConfig, ModelParams<f32>)],
    case: &PatientCase,
    ecfg: &EnsembleConfig,
    icfg: &InferConfig,
) -> Result<EnsembleOutput> {
    ecfg.validate()?;
    let maps = members
        .iter()
        .map(|(cfg, p)| predict_map(p, cfg, case, icfg, ecfg.combine))
        .collect::<Result<Vec<_>>>()?;
    combine_members(&maps, ecfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f32]) -> Volume {
        Volume::new(v.to_vec(), [v.len(), 1, 1], [1.0; 3], Modality::Pet).unwrap()
    }

    #[test]
    fn hand_case() {
        let out = combine_members(&[map(&[0.6, 0.9]), map(&[0.3, 0.2])], &EnsembleConfig::default()).unwrap();
        assert!((out.probability.data[0] - 0.45).abs() < 1e-7);
        assert_eq!(out.mask.data, vec![0.0, 1.0]);
    }

    #[test]
    fn identical_members_reproduce_single() {
        let m = map(&[0.1, 0.5, 0.73, 0.4999, 0.999]);
        let one = combine_members(std::slice::from_ref(&m), &EnsembleConfig::default()).unwrap();
        let eight = combine_members(&vec![m.clone(); 8], &EnsembleConfig::default()).unwrap();
        assert_eq!(one, eight);
        assert_eq!(eight.probability.data, m.data);
    }

    #[test]
    fn logit_combination() {
        let cfg = EnsembleConfig {
            combine: OutputSpace::Logit,
            ..Default::default()
        };
        let out = combine_members(&[map(&[2.0, -1.0]), map(&[-1.0, -2.0])], &cfg).unwrap();
        assert_eq!(out.mask.data, vec![1.0, 0.0]);
        assert!((out.probability.data[0] - sigmoid(0.5)).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(combine_members(&[], &EnsembleConfig::default()).is_err());
        assert!(combine_members(&[map(&[0.1]), map(&[0.1, 0.2])], &EnsembleConfig::default()).is_err());
        let bad = EnsembleConfig {
            threshold: 1.0,
            ..Default::default()
        };
        assert!(combine_members(&[map(&[0.1])], &bad).is_err());
    }
}

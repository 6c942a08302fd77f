//! Soft Dice plus focal training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub smooth: f64,
    /// Probabilities are clamped to `[prob_clamp, 1 - prob_clamp]` before `ln`.
    pub prob_clamp: f64,
    /// Adds the background term `-(1-y)·ŷ^γ·ln(1-ŷ)` to the focal loss.
    pub focal_symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            smooth: 1.0,
            prob_clamp: 1e-7,
            focal_symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal_gamma must be >= 0, got {}", self.focal_gamma)));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::Config(format!("smooth must be > 0, got {}", self.smooth)));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::Config(format!(
                "prob_clamp must lie in (0, 0.5), got {}",
                self.prob_clamp
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(op: &'static str, y: &Tensor<T>, p: &Tensor<T>) -> Result<()> {
    if y.shape() != p.shape() {
        return Err(Error::shape(op, y.shape(), p.shape()));
    }
    Ok(())
}

/// Splits a `[N, …]` batch into per-example tensors when `N > 1`.
fn examples<T: Scalar>(y: &Tensor<T>, p: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    if y.rank() == 5 && y.shape()[0] > 1 {
        (0..y.shape()[0]).map(|i| Ok((y.batch_item(i)?, p.batch_item(i)?))).collect()
    } else {
        Ok(vec![(y.clone(), p.clone())])
    }
}

fn batch_mean<T: Scalar>(terms: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("at least one example");
    for t in it {
        acc = acc.add(&t)?;
    }
    Ok(if n > 1 { acc.scale(T::of(1.0 / n as f64)) } else { acc })
}

fn dice_one<T: Scalar>(y: &Tensor<T>, p: &Tensor<T>, smooth: f64) -> Result<Tensor<T>> {
    let s = T::of(smooth);
    let num = y.mul(p)?.sum().scale(T::of(2.0)).add_scalar(s);
    let den = y.sum().add(&p.sum())?.add_scalar(s);
    Ok(num.div(&den)?.rsub_scalar(T::one()))
}

/// `1 − (2·Σyŷ + s)/(Σy + Σŷ + s)`, averaged over the batch when the
/// input is `[N, C, D, H, W]` with `N > 1`.
pub fn soft_dice_loss<T: Scalar>(y: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    soft_dice_loss_smooth(y, p, 1.0)
}

pub fn soft_dice_loss_smooth<T: Scalar>(y: &Tensor<T>, p: &Tensor<T>, smooth: f64) -> Result<Tensor<T>> {
    check_pair("soft_dice_loss", y, p)?;
    let terms = examples(y, p)?
        .iter()
        .map(|(y, p)| dice_one(y, p, smooth))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(terms)
}

/// `−mean(y·(1−ŷ)^γ·ln ŷ)` over all voxels, plus the mirrored background
/// term when `cfg.focal_symmetric` is set.
pub fn focal_loss<T: Scalar>(y: &Tensor<T>, p: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    check_pair("focal_loss", y, p)?;
    let eps = T::of(cfg.prob_clamp);
    let g = T::of(cfg.focal_gamma);
    let pc = p.clamp(eps, T::one() - eps);
    let q = pc.rsub_scalar(T::one());
    let mut per_voxel = y.mul(&q.pow(g))?.mul(&pc.ln())?;
    if cfg.focal_symmetric {
        let bg = y.rsub_scalar(T::one()).mul(&pc.pow(g))?.mul(&q.ln())?;
        per_voxel = per_voxel.add(&bg)?;
    }
    Ok(per_voxel.mean().neg())
}

/// Unweighted sum of the soft Dice and focal losses.
pub fn total_loss<T: Scalar>(y: &Tensor<T>, p: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    let (d, f) = loss_parts(y, p, cfg)?;
    d.add(&f)
}

/// `(dice, focal)` sharing the prediction node, for logging.
pub fn loss_parts<T: Scalar>(y: &Tensor<T>, p: &Tensor<T>, cfg: &LossConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((soft_dice_loss_smooth(y, p, cfg.smooth)?, focal_loss(y, p, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn dice_examples() {
        assert_eq!(soft_dice_loss(&t(&[0.0; 8]), &t(&[0.0; 8])).unwrap().item(), 0.0);
        let y = t(&[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(soft_dice_loss(&y, &y).unwrap().item(), 0.0);
        assert_eq!(soft_dice_loss(&t(&[1.0]), &t(&[0.0])).unwrap().item(), 0.5);
        assert!(soft_dice_loss(&t(&[1.0]), &t(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn focal_examples() {
        let cfg = LossConfig::default();
        let v = focal_loss(&t(&[1.0]), &t(&[0.5]), &cfg).unwrap().item();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.173287).abs() < 1e-6);
        assert_eq!(focal_loss(&t(&[0.0; 3]), &t(&[0.3, 0.9, 0.1]), &cfg).unwrap().item(), 0.0);
        let near = focal_loss(&t(&[1.0, 1.0]), &t(&[1.0 - 1e-7; 2]), &cfg).unwrap().item();
        assert!(near < 1e-20);
    }

    #[test]
    fn symmetric_focal_penalizes_false_positives() {
        let cfg = LossConfig {
            focal_symmetric: true,
            ..LossConfig::default()
        };
        let v = focal_loss(&t(&[0.0]), &t(&[0.5]), &cfg).unwrap().item();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_single_voxel() {
        let cfg = LossConfig::default();
        let (y, p) = (t(&[1.0]), t(&[0.5]));
        let total = total_loss(&y, &p, &cfg).unwrap().item();
        assert!((total - 0.373287).abs() < 1e-6, "{total}");
        let parts = soft_dice_loss(&y, &p).unwrap().item() + focal_loss(&y, &p, &cfg).unwrap().item();
        assert_eq!(total, parts);
    }

    #[test]
    fn dice_is_batch_averaged() {
        let y = Tensor::new(vec![1.0, 0.0], &[2, 1, 1, 1, 1]).unwrap();
        let p = Tensor::new(vec![0.0, 0.0], &[2, 1, 1, 1, 1]).unwrap();
        // Example losses 0.5 and 0.
        assert_eq!(soft_dice_loss(&y, &p).unwrap().item(), 0.25);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig {
                focal_gamma: -1.0,
                ..Default::default()
            },
            LossConfig {
                smooth: 0.0,
                ..Default::default()
            },
            LossConfig {
                prob_clamp: 0.5,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}

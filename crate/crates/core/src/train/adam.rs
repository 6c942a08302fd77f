use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), vec![T::zero(); t.numel()]))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update from the gradients accumulated on `params`. Parameters
/// without a gradient are treated as having a zero gradient. The updated
/// tensors are fresh leaves.
pub fn adam_step<T: Scalar>(params: &mut ModelParams<T>, state: &mut OptimizerState<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let mut grads = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let g = t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]);
        if g.len() != t.numel() {
            return Err(Error::shape("adam_step", t.shape(), &[g.len()]));
        }
        if let Some(i) = g.iter().position(|v| !v.as_f64().is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{name}` at index {i} is {}",
                g[i].as_f64()
            )));
        }
        grads.push((name.to_string(), g));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, g) in grads {
        let p = params.get(&name)?;
        let m = state.m.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        let v = state.v.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if m.len() != g.len() || v.len() != g.len() {
            return Err(Error::shape("adam_step", &[m.len()], &[g.len()]));
        }
        let data: Vec<T> = p
            .data()
            .iter()
            .zip(&g)
            .zip(m.iter_mut().zip(v.iter_mut()))
            .map(|((&w, &g), (m, v))| {
                let g = g.as_f64();
                let mn = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
                let vn = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
                *m = T::of(mn);
                *v = T::of(vn);
                let step = lr * (mn / bc1) / ((vn / bc2).sqrt() + cfg.eps);
                T::of(w.as_f64() - step)
            })
            .collect();
        params.set_data(&name, data)?;
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64, g: f64) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        let t = Tensor::param(vec![v], &[1]).unwrap();
        t.scale(g).sum().backward().unwrap();
        p.insert("w", t);
        p
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = one(1.5, 0.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &mut s, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        for g in [3.0, -0.01] {
            let mut p = one(1.0, g);
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &mut s, 1e-3, &AdamConfig::default()).unwrap();
            let d = p.get("w").unwrap().item() - 1.0;
            assert!((d + 1e-3 * g.signum()).abs() < 1e-9, "{d}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one(1.0, f64::NAN);
        let mut s = OptimizerState::new(&p);
        let e = adam_step(&mut p, &mut s, 1e-3, &AdamConfig::default()).unwrap_err();
        assert!(matches!(e, Error::NonFinite(ref m) if m.contains("`w`")));
    }
}

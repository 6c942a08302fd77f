use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `max_i |analytic_i − numeric_i| / max(|analytic_i|, 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates where a smaller step was needed to avoid a kink.
    pub refined: usize,
}

/// Compares the reverse-mode gradient of a scalar-valued `f` at `x` with
/// central finite differences of step `h`, over every coordinate of `x`.
pub fn gradcheck<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_sampled(f, x, h, &coords)
}

/// As [`gradcheck`], restricted to the listed coordinates. Used where a full
/// sweep would need too many forward evaluations.
pub fn gradcheck_sampled<T, F>(f: F, x: &Tensor<T>, h: T, coords: &[usize]) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if !(h > T::zero()) {
        return Err(Error::Config(format!("gradcheck step must be positive, got {h}")));
    }
    let shape = x.shape().to_vec();
    let base = x.to_vec();

    let analytic = analytic_grad(&f, &base, &shape)?;

    let eval = |i: usize, delta: T| -> Result<f64> {
        let mut v = base.clone();
        v[i] = v[i] + delta;
        let y = f(&Tensor::new(v, &shape)?)?.item();
        check_finite("f(x ± h·e_i)", y)?;
        Ok(y.as_f64())
    };

    let two_h = 2.0 * h.as_f64();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        refined: 0,
    };
    for &i in coords {
        if i >= base.len() {
            return Err(Error::invalid("gradcheck", format!("coordinate {i} out of range")));
        }
        let numeric = (eval(i, h)? - eval(i, -h)?) / two_h;
        let a = analytic[i].as_f64();
        check_finite("analytic gradient", a)?;
        let rel = (a - numeric).abs() / a.abs().max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

fn analytic_grad<T, F>(f: &F, base: &[T], shape: &[usize]) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let leaf = Tensor::param(base.to_vec(), shape)?;
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    check_finite("f(x)", out.item())?;
    out.backward()?;
    Ok(leaf.grad().unwrap_or_else(|| vec![T::zero(); base.len()]))
}

/// Sampled check for piecewise-smooth functions such as networks with
/// ReLU and max pooling. Per coordinate the steps are tried in order; a
/// step is accepted once the forward and backward one-sided differences
/// agree to `agree` (relative), i.e. no kink lies inside the stencil.
/// Otherwise the step with the smallest disagreement is used.
pub fn gradcheck_piecewise<T, F>(f: F, x: &Tensor<T>, steps: &[T], agree: f64, coords: &[usize]) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if steps.is_empty() || steps.iter().any(|&h| !(h > T::zero())) {
        return Err(Error::Config("gradcheck steps must be positive".into()));
    }
    let shape = x.shape().to_vec();
    let base = x.to_vec();
    let analytic = analytic_grad(&f, &base, &shape)?;
    let f0 = f(&Tensor::new(base.clone(), &shape)?)?.item().as_f64();
    let eval = |i: usize, delta: T| -> Result<f64> {
        let mut v = base.clone();
        v[i] = v[i] + delta;
        let y = f(&Tensor::new(v, &shape)?)?.item();
        check_finite("f(x ± h·e_i)", y)?;
        Ok(y.as_f64())
    };
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        refined: 0,
    };
    for &i in coords {
        if i >= base.len() {
            return Err(Error::invalid("gradcheck", format!("coordinate {i} out of range")));
        }
        let mut numeric = 0.0;
        let mut best = f64::INFINITY;
        for (k, &h) in steps.iter().enumerate() {
            let hf = h.as_f64();
            let fwd = (eval(i, h)? - f0) / hf;
            let bwd = (f0 - eval(i, -h)?) / hf;
            let gap = (fwd - bwd).abs();
            if gap < best {
                best = gap;
                numeric = 0.5 * (fwd + bwd);
            }
            if gap <= agree * (0.5 * (fwd + bwd)).abs().max(REL_FLOOR) {
                break;
            }
            if k == 0 {
                report.refined += 1;
            }
        }
        let a = analytic[i].as_f64();
        check_finite("analytic gradient", a)?;
        let rel = (a - numeric).abs() / a.abs().max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

fn check_finite<T: Scalar>(what: &str, v: T) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::new(vec![0.5, -2.0, 3.0, 7.5], &[4]).unwrap();
        let r = gradcheck(|x| Ok(x.sum()), &x, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::<f64>::new(vec![1.0], &[1]).unwrap();
        assert!(gradcheck(|x| Ok(x.sum()), &x, 0.0).is_err());
        let z = Tensor::<f64>::new(vec![0.0], &[1]).unwrap();
        assert!(matches!(gradcheck(|x| Ok(x.ln().sum()), &z, 1e-3), Err(Error::NonFinite(_))));
    }

    #[test]
    fn piecewise_steps_past_a_kink() {
        // relu(x − 1 + 1e-7) has a kink inside a 1e-6 stencil around x = 1.
        let x = Tensor::<f64>::new(vec![1.0, 2.0], &[2]).unwrap();
        let f = |x: &Tensor<f64>| Ok(x.add_scalar(-1.0 + 1e-7).relu().sum());
        let plain = gradcheck_sampled(f, &x, 1e-6, &[0, 1]).unwrap();
        assert!(plain.max_rel_error > 0.1);
        let r = gradcheck_piecewise(f, &x, &[1e-6, 1e-8], 1e-4, &[0, 1]).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.refined, 1);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // clamp with a kink inside the stencil: the check must not report ~0.
        let x = Tensor::<f64>::new(vec![1.0], &[1]).unwrap();
        let r = gradcheck(|x| Ok(x.clamp(0.0, 1.0).sum()), &x, 1e-3).unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}

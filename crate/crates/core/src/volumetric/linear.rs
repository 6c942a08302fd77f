use crate::error::{Error, Result};
use crate::tensor::{expect_rank, gemm, Mat, Scalar, Tensor};

/// Mean over all spatial positions: `[N, C, D, H, W] → [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("global_avg_pool", x, 5)?;
    crate::tensor::channel_mean_op("global_avg_pool", x)
}

/// Fully connected layer `x·wᵀ + b` with `x [N, F]`, `w [G, F]`, `b [G]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("linear", x, 2)?;
    expect_rank("linear", w, 2)?;
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let g = w.shape()[0];
    if w.shape()[1] != f {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    if b.shape() != [g] {
        return Err(Error::shape("linear", &[g], b.shape()));
    }
    let mut out = vec![T::zero(); n * g];
    for row in out.chunks_mut(g) {
        row.copy_from_slice(b.data());
    }
    gemm(Mat::new(x.data(), n, f), Mat::t(w.data(), g, f), T::one(), &mut out);

    let (rx, rw, rb) = (x.requires_grad(), w.requires_grad(), b.requires_grad());
    let (xc, wc) = (x.clone(), w.clone());
    Ok(Tensor::from_op(
        "linear",
        vec![n, g],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        move |gr| {
            let gx = rx.then(|| {
                let mut gx = vec![T::zero(); n * f];
                gemm(Mat::new(gr, n, g), Mat::new(wc.data(), g, f), T::zero(), &mut gx);
                gx
            });
            let gw = rw.then(|| {
                let mut gw = vec![T::zero(); g * f];
                gemm(Mat::t(gr, n, g), Mat::new(xc.data(), n, f), T::zero(), &mut gw);
                gw
            });
            let gb = rb.then(|| {
                let mut gb = vec![T::zero(); g];
                for row in gr.chunks(g) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                gb
            });
            vec![gx, gw, gb]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::new(v.to_vec(), s).unwrap()
    }

    #[test]
    fn gap_examples() {
        assert_eq!(global_avg_pool(&t(&[2.0; 8], &[1, 1, 2, 2, 2])).unwrap().to_vec(), vec![2.0]);
        let x = t(&(1..=8).map(f64::from).collect::<Vec<_>>(), &[1, 1, 2, 2, 2]);
        assert_eq!(global_avg_pool(&x).unwrap().to_vec(), vec![4.5]);
        assert_eq!(
            global_avg_pool(&Tensor::<f32>::zeros(&[3, 5, 1, 2, 3])).unwrap().shape(),
            &[3, 5]
        );
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1.0, 2.0], &[1, 2]);
        let y = linear(&x, &t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]), &t(&[0.0, 0.0], &[2])).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);
        let y = linear(&x, &t(&[3.0, 4.0], &[1, 2]), &t(&[5.0], &[1])).unwrap();
        assert_eq!(y.to_vec(), vec![16.0]);
        let y = linear(
            &t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]),
            &Tensor::zeros(&[3, 2]),
            &t(&[1.0, 2.0, 3.0], &[3]),
        )
        .unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(linear(&x, &t(&[1.0; 3], &[1, 3]), &t(&[0.0], &[1])).is_err());
    }
}

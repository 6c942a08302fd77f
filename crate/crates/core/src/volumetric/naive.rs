//! Direct nested-loop reference kernels, evaluated in 64-bit.
//!
//! These share the contracts of [`conv3d`](super::conv3d) and
//! [`conv3d_transposed`](super::conv3d_transposed) but not their code path;
//! they exist for differential testing and produce graph-free tensors.

use super::conv::spatial_dims;
use super::{Conv3dSpec, TransposedConv3dSpec};
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Scalar, Tensor};

pub fn conv3d_naive<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &Conv3dSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    expect_rank("conv3d_naive", x, 5)?;
    if x.shape()[1] != spec.in_channels {
        return Err(Error::invalid("conv3d_naive", "channel mismatch"));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape("conv3d_naive", &spec.weight_shape(), w.shape()));
    }
    let n = x.shape()[0];
    let [id, ih, iw] = spatial_dims(x);
    let [od, oh, ow] = spec.output_dims([id, ih, iw])?;
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let xv = |b: usize, c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= id as isize || y >= ih as isize || xx >= iw as isize {
            return 0.0;
        }
        x.data()[(((b * cin + c) * id + z as usize) * ih + y as usize) * iw + xx as usize].as_f64()
    };
    let wv = |o: usize, c: usize, a: usize, bb: usize, e: usize| w.data()[(((o * cin + c) * kd + a) * kh + bb) * kw + e].as_f64();

    let mut out = Vec::with_capacity(n * cout * od * oh * ow);
    for bi in 0..n {
        for o in 0..cout {
            let bias = b.map_or(0.0, |b| b.data()[o].as_f64());
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias;
                        for c in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let sz = (z * sd + a) as isize - pd as isize;
                                        let sy = (y * sh + bb) as isize - ph as isize;
                                        let sx = (xx * sw + e) as isize - pw as isize;
                                        acc += wv(o, c, a, bb, e) * xv(bi, c, sz, sy, sx);
                                    }
                                }
                            }
                        }
                        out.push(T::of(acc));
                    }
                }
            }
        }
    }
    Tensor::new(out, &[n, cout, od, oh, ow])
}

/// Scatter formulation: every input voxel adds `x · w` into the output
/// window it projects onto.
pub fn conv3d_transposed_naive<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &TransposedConv3dSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    expect_rank("conv3d_transposed_naive", x, 5)?;
    if w.shape() != spec.weight_shape() || x.shape()[1] != spec.in_channels {
        return Err(Error::shape("conv3d_transposed_naive", &spec.weight_shape(), w.shape()));
    }
    let n = x.shape()[0];
    let [id, ih, iw] = spatial_dims(x);
    let [od, oh, ow] = spec.output_dims([id, ih, iw])?;
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let mut out = vec![0.0f64; n * cout * od * oh * ow];
    for bi in 0..n {
        for c in 0..cin {
            for z in 0..id {
                for y in 0..ih {
                    for xx in 0..iw {
                        let v = x.data()[(((bi * cin + c) * id + z) * ih + y) * iw + xx].as_f64();
                        for o in 0..cout {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let tz = (z * sd + a) as isize - pd as isize;
                                        let ty = (y * sh + bb) as isize - ph as isize;
                                        let tx = (xx * sw + e) as isize - pw as isize;
                                        if tz < 0 || ty < 0 || tx < 0 {
                                            continue;
                                        }
                                        let (tz, ty, tx) = (tz as usize, ty as usize, tx as usize);
                                        if tz >= od || ty >= oh || tx >= ow {
                                            continue;
                                        }
                                        let wv = w.data()[(((c * cout + o) * kd + a) * kh + bb) * kw + e].as_f64();
                                        out[(((bi * cout + o) * od + tz) * oh + ty) * ow + tx] += v * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        let plane = od * oh * ow;
        for (i, ch) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % cout].as_f64();
            ch.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(out.into_iter().map(T::of).collect(), &[n, cout, od, oh, ow])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_zero_weight_cases() {
        let x = Tensor::<f64>::new((0..8).map(f64::from).collect(), &[1, 1, 2, 2, 2]).unwrap();
        let spec = Conv3dSpec::same(1, 1, 1);
        let y = conv3d_naive(&x, &Tensor::new(vec![1.0], &[1, 1, 1, 1, 1]).unwrap(), None, &spec).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let b = Tensor::new(vec![3.0], &[1]).unwrap();
        let y = conv3d_naive(&x, &Tensor::zeros(&[1, 1, 1, 1, 1]), Some(&b), &spec).unwrap();
        assert_eq!(y.to_vec(), vec![3.0; 8]);
    }
}

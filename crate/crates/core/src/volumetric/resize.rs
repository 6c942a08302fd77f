use rayon::prelude::*;

use super::conv::spatial_dims;
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Scalar, Tensor};

/// Linear interpolation taps along one axis with align-corners-true
/// sampling: `src = i·(in−1)/(out−1)`, or the center when `out == 1`.
#[derive(Clone, Debug)]
pub(crate) struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn align_corners(input: usize, output: usize) -> Self {
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for i in 0..output {
            let src = if output == 1 {
                (input as f64 - 1.0) / 2.0
            } else {
                i as f64 * (input as f64 - 1.0) / (output as f64 - 1.0)
            };
            let l = (src.floor() as usize).min(input - 1);
            let h = (l + 1).min(input - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { src - l as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Trilinear resize of the spatial axes of `x [N, C, D, H, W]`.
pub fn trilinear_resize<T: Scalar>(x: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    expect_rank("trilinear_resize", x, 5)?;
    if target.contains(&0) {
        return Err(Error::invalid(
            "trilinear_resize",
            format!("target extents {target:?} must be ≥ 1"),
        ));
    }
    let src = spatial_dims(x);
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let shape = vec![n, c, target[0], target[1], target[2]];
    if src == target {
        return Ok(Tensor::from_op("trilinear_resize", shape, x.to_vec(), vec![x.clone()], |g| {
            vec![Some(g.to_vec())]
        }));
    }
    let taps = [
        LinearTaps::align_corners(src[0], target[0]),
        LinearTaps::align_corners(src[1], target[1]),
        LinearTaps::align_corners(src[2], target[2]),
    ];
    let in_plane: usize = src.iter().product();
    let out_plane: usize = target.iter().product();
    let [_, sh, sw] = src;
    let [td, th, tw] = target;

    let mut out = vec![T::zero(); n * c * out_plane];
    out.par_chunks_mut(out_plane)
        .zip(x.data().par_chunks(in_plane))
        .for_each(|(o, s)| {
            let at = |z: usize, y: usize, xx: usize| s[(z * sh + y) * sw + xx].as_f64();
            for z in 0..td {
                let (z0, z1, fz) = (taps[0].lo[z], taps[0].hi[z], taps[0].frac[z]);
                for y in 0..th {
                    let (y0, y1, fy) = (taps[1].lo[y], taps[1].hi[y], taps[1].frac[y]);
                    for xx in 0..tw {
                        let (x0, x1, fx) = (taps[2].lo[xx], taps[2].hi[xx], taps[2].frac[xx]);
                        let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                        let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                        let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                        let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                        let c0 = c00 * (1.0 - fy) + c01 * fy;
                        let c1 = c10 * (1.0 - fy) + c11 * fy;
                        o[(z * th + y) * tw + xx] = T::of(c0 * (1.0 - fz) + c1 * fz);
                    }
                }
            }
        });

    let total = x.numel();
    Ok(Tensor::from_op("trilinear_resize", shape, out, vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); total];
        gx.par_chunks_mut(in_plane).zip(g.par_chunks(out_plane)).for_each(|(gs, go)| {
            let mut add = |z: usize, y: usize, xx: usize, v: f64| {
                let i = (z * sh + y) * sw + xx;
                gs[i] = gs[i] + T::of(v);
            };
            for z in 0..td {
                let (z0, z1, fz) = (taps[0].lo[z], taps[0].hi[z], taps[0].frac[z]);
                for y in 0..th {
                    let (y0, y1, fy) = (taps[1].lo[y], taps[1].hi[y], taps[1].frac[y]);
                    for xx in 0..tw {
                        let (x0, x1, fx) = (taps[2].lo[xx], taps[2].hi[xx], taps[2].frac[xx]);
                        let gv = go[(z * th + y) * tw + xx].as_f64();
                        for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                    let wgt = wz * wy * wx;
                                    if wgt != 0.0 {
                                        add(zi, yi, xi, gv * wgt);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        vec![Some(gx)]
    }))
}

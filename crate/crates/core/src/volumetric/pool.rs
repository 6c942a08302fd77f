use rayon::prelude::*;

use super::conv::spatial_dims;
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Scalar, Tensor};

/// 2×2×2 max pooling with stride 2. Ties resolve to the first element in
/// scan order, which is where the gradient is routed.
pub fn maxpool3d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("maxpool3d", x, 5)?;
    let [d, h, w] = spatial_dims(x);
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool3d",
            format!("spatial extents {:?} must all be even", [d, h, w]),
        ));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let mut out = vec![T::zero(); n * c * out_plane];
    // Flat input index of each selected element.
    let mut arg = vec![0u32; n * c * out_plane];
    out.par_chunks_mut(out_plane)
        .zip(arg.par_chunks_mut(out_plane))
        .zip(x.data().par_chunks(in_plane))
        .enumerate()
        .for_each(|(nc, ((o, am), src))| {
            let base = nc * in_plane;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut at = 0usize;
                        let mut first = true;
                        for a in 0..2 {
                            for b in 0..2 {
                                for e in 0..2 {
                                    let i = ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + e;
                                    let v = src[i];
                                    if first || v > best {
                                        best = v;
                                        at = i;
                                        first = false;
                                    }
                                }
                            }
                        }
                        let j = (z * oh + y) * ow + xx;
                        o[j] = best;
                        am[j] = (base + at) as u32;
                    }
                }
            }
        });
    let total = x.numel();
    Ok(Tensor::from_op(
        "maxpool3d",
        vec![n, c, od, oh, ow],
        out,
        vec![x.clone()],
        move |g| {
            let mut gx = vec![T::zero(); total];
            for (&i, &gi) in arg.iter().zip(g) {
                gx[i as usize] = gx[i as usize] + gi;
            }
            vec![Some(gx)]
        },
    ))
}

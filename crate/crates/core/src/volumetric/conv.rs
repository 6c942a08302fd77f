//! 3-D convolution and transposed convolution.
//!
//! All three kernels (forward, input gradient, weight gradient) reduce to an
//! im2col gather followed by a GEMM. The gather is driven by per-axis index
//! tables, so the same routine serves the forward pass of a convolution and
//! its adjoint (which is also the forward pass of a transposed convolution).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{expect_rank, gemm, Mat, Scalar, Tensor};

/// Target element count of one im2col buffer.
const COL_BUDGET: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub has_bias: bool,
}

impl Conv3dSpec {
    /// Cubic kernel, stride 1, "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: [1; 3],
            padding: [kernel / 2; 3],
            has_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("conv3d channel counts must be positive".into()));
        }
        for a in 0..3 {
            if self.kernel[a].is_multiple_of(2) {
                return Err(Error::Config(format!("conv3d kernel {:?} must be odd", self.kernel)));
            }
            if self.stride[a] == 0 {
                return Err(Error::Config("conv3d stride must be positive".into()));
            }
        }
        Ok(())
    }

    /// `floor((in + 2·pad − kernel)/stride) + 1` per axis; errors when < 1.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(Error::invalid(
                    "conv3d",
                    format!(
                        "input {input:?} too small for kernel {:?} with padding {:?}",
                        self.kernel, self.padding
                    ),
                ));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kd, kh, kw]
    }
}

/// Transposed convolution; weights laid out `[in, out, kd, kh, kw]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransposedConv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output_padding: [usize; 3],
    pub has_bias: bool,
}

impl TransposedConv3dSpec {
    /// Kernel 3, stride 2, padding 1, output padding 1: doubles every extent.
    pub fn doubling(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [3; 3],
            stride: [2; 3],
            padding: [1; 3],
            output_padding: [1; 3],
            has_bias: false,
        }
    }

    /// `(in − 1)·stride − 2·pad + kernel + output_padding` per axis.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let v = (input[a] as isize - 1) * self.stride[a] as isize - 2 * self.padding[a] as isize
                + self.kernel[a] as isize
                + self.output_padding[a] as isize;
            if v < 1 {
                return Err(Error::invalid(
                    "conv3d_transposed",
                    format!("computed output extent {v} on axis {a} for input {input:?}"),
                ));
            }
            out[a] = v as usize;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("transposed conv channel counts must be positive".into()));
        }
        for a in 0..3 {
            if self.stride[a] == 0 || self.output_padding[a] >= self.stride[a] {
                return Err(Error::Config(format!(
                    "transposed conv needs stride > output_padding, got {:?} / {:?}",
                    self.stride, self.output_padding
                )));
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.in_channels, self.out_channels, kd, kh, kw]
    }

    /// The convolution this layer is the adjoint of.
    fn forward_conv(&self) -> Geometry {
        Geometry {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

/// For each destination index and kernel tap along one axis, the source index
/// or -1 for padding.
struct AxisMap {
    k: usize,
    table: Vec<i32>,
}

impl AxisMap {
    /// Convolution gather: `src = dst·s − p + tap`.
    fn forward(dst_len: usize, src_len: usize, k: usize, s: usize, p: usize) -> Self {
        let mut table = Vec::with_capacity(dst_len * k);
        for o in 0..dst_len {
            for t in 0..k {
                let i = (o * s + t) as isize - p as isize;
                table.push(if i >= 0 && (i as usize) < src_len { i as i32 } else { -1 });
            }
        }
        Self { k, table }
    }

    /// Adjoint gather: `src = (dst + p − tap)/s` when exact.
    fn adjoint(dst_len: usize, src_len: usize, k: usize, s: usize, p: usize) -> Self {
        let mut table = Vec::with_capacity(dst_len * k);
        for z in 0..dst_len {
            for t in 0..k {
                let num = z as isize + p as isize - t as isize;
                let ok = num >= 0 && num % s as isize == 0 && ((num / s as isize) as usize) < src_len;
                table.push(if ok { (num / s as isize) as i32 } else { -1 });
            }
        }
        Self { k, table }
    }

    #[inline]
    fn get(&self, dst: usize, tap: usize) -> i32 {
        self.table[dst * self.k + tap]
    }
}

struct Gather {
    maps: [AxisMap; 3],
    src_dims: [usize; 3],
    dst_dims: [usize; 3],
}

impl Gather {
    fn forward(g: &Geometry, src_dims: [usize; 3], dst_dims: [usize; 3]) -> Self {
        let m = |a: usize| AxisMap::forward(dst_dims[a], src_dims[a], g.kernel[a], g.stride[a], g.padding[a]);
        Self {
            maps: [m(0), m(1), m(2)],
            src_dims,
            dst_dims,
        }
    }

    /// Gather for the adjoint of the convolution `g` whose input grid is
    /// `dst_dims` and output grid is `src_dims`.
    fn adjoint(g: &Geometry, src_dims: [usize; 3], dst_dims: [usize; 3]) -> Self {
        let m = |a: usize| AxisMap::adjoint(dst_dims[a], src_dims[a], g.kernel[a], g.stride[a], g.padding[a]);
        Self {
            maps: [m(0), m(1), m(2)],
            src_dims,
            dst_dims,
        }
    }

    fn src_len(&self) -> usize {
        self.src_dims.iter().product()
    }

    fn dst_plane(&self) -> usize {
        self.dst_dims[1] * self.dst_dims[2]
    }

    /// Destination depth slices per im2col chunk.
    fn chunk_depth(&self, rows: usize) -> usize {
        (COL_BUDGET / (rows * self.dst_plane()).max(1)).clamp(1, self.dst_dims[0])
    }

    /// Fills `col` (`channels·taps × positions`, row-major) for destination
    /// depth slices `d0..d1` from one sample `src` of shape `[channels, src_dims]`.
    fn im2col<T: Scalar>(&self, src: &[T], channels: usize, d0: usize, d1: usize, col: &mut [T]) {
        let [kd, kh, kw] = [self.maps[0].k, self.maps[1].k, self.maps[2].k];
        let [_, sh, sw] = self.src_dims;
        let [_, dh, dw] = self.dst_dims;
        let positions = (d1 - d0) * dh * dw;
        let src_len = self.src_len();
        debug_assert_eq!(col.len(), channels * kd * kh * kw * positions);
        let mut row = 0;
        for c in 0..channels {
            let plane = &src[c * src_len..(c + 1) * src_len];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let out = &mut col[row * positions..(row + 1) * positions];
                        let mut j = 0;
                        for od in d0..d1 {
                            let id = self.maps[0].get(od, a);
                            for oh in 0..dh {
                                let ih = self.maps[1].get(oh, b);
                                let dst = &mut out[j..j + dw];
                                j += dw;
                                if id < 0 || ih < 0 {
                                    dst.fill(T::zero());
                                    continue;
                                }
                                let base = (id as usize * sh + ih as usize) * sw;
                                for (ow, v) in dst.iter_mut().enumerate() {
                                    let iw = self.maps[2].get(ow, e);
                                    *v = if iw < 0 { T::zero() } else { plane[base + iw as usize] };
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// `out[n, m, dst] = Σ_r A[m, r] · col_n[r, dst]`, chunked over destination
/// depth slices. `a` is `m × (channels·taps)` row-major.
fn gather_gemm<T: Scalar>(
    src: &[T],
    batch: usize,
    channels: usize,
    gather: &Gather,
    a: &[T],
    m: usize,
    pointwise: bool,
) -> Vec<T> {
    let rows = channels * gather.maps.iter().map(|mp| mp.k).product::<usize>();
    let dst_len: usize = gather.dst_dims.iter().product();
    let src_len = gather.src_len();
    let mut out = vec![T::zero(); batch * m * dst_len];
    if pointwise {
        // 1×1×1, stride 1, no padding: the input already is the column matrix.
        out.par_chunks_mut(m * dst_len).enumerate().for_each(|(n, o)| {
            let x = &src[n * channels * src_len..(n + 1) * channels * src_len];
            gemm(Mat::new(a, m, rows), Mat::new(x, rows, dst_len), T::zero(), o);
        });
        return out;
    }
    let cd = gather.chunk_depth(rows);
    let plane = gather.dst_plane();
    let jobs: Vec<(usize, usize)> = (0..batch)
        .flat_map(|n| (0..gather.dst_dims[0]).step_by(cd).map(move |d0| (n, d0)))
        .collect();
    let pieces: Vec<Vec<T>> = jobs
        .par_iter()
        .map(|&(n, d0)| {
            let d1 = (d0 + cd).min(gather.dst_dims[0]);
            let p = (d1 - d0) * plane;
            let mut col = vec![T::zero(); rows * p];
            let x = &src[n * channels * src_len..(n + 1) * channels * src_len];
            gather.im2col(x, channels, d0, d1, &mut col);
            let mut piece = vec![T::zero(); m * p];
            gemm(Mat::new(a, m, rows), Mat::new(&col, rows, p), T::zero(), &mut piece);
            piece
        })
        .collect();
    for (&(n, d0), piece) in jobs.iter().zip(&pieces) {
        let p = piece.len() / m;
        for ch in 0..m {
            let dst = (n * m + ch) * dst_len + d0 * plane;
            out[dst..dst + p].copy_from_slice(&piece[ch * p..(ch + 1) * p]);
        }
    }
    out
}

/// `dW[m, r] = Σ_n Σ_pos dy_n[m, pos] · col_n[r, pos]` where `col_n` is the
/// gather of `src` onto the grid of `dy`.
fn weight_grad<T: Scalar>(
    src: &[T],
    batch: usize,
    channels: usize,
    gather: &Gather,
    dy: &[T],
    m: usize,
    pointwise: bool,
) -> Vec<T> {
    let rows = channels * gather.maps.iter().map(|mp| mp.k).product::<usize>();
    let dst_len: usize = gather.dst_dims.iter().product();
    let src_len = gather.src_len();
    let plane = gather.dst_plane();
    let cd = if pointwise {
        gather.dst_dims[0]
    } else {
        gather.chunk_depth(rows)
    };
    let jobs: Vec<(usize, usize)> = (0..batch)
        .flat_map(|n| (0..gather.dst_dims[0]).step_by(cd).map(move |d0| (n, d0)))
        .collect();
    let partials: Vec<Vec<T>> = jobs
        .par_iter()
        .map(|&(n, d0)| {
            let d1 = (d0 + cd).min(gather.dst_dims[0]);
            let p = (d1 - d0) * plane;
            let x = &src[n * channels * src_len..(n + 1) * channels * src_len];
            let owned;
            let col: &[T] = if pointwise {
                x
            } else {
                let mut c = vec![T::zero(); rows * p];
                gather.im2col(x, channels, d0, d1, &mut c);
                owned = c;
                &owned
            };
            // dy rows for this chunk are strided by the full grid length.
            let g = &dy[n * m * dst_len..(n + 1) * m * dst_len];
            let mut gchunk = vec![T::zero(); m * p];
            for ch in 0..m {
                let s = ch * dst_len + d0 * plane;
                gchunk[ch * p..(ch + 1) * p].copy_from_slice(&g[s..s + p]);
            }
            let mut dw = vec![T::zero(); m * rows];
            gemm(Mat::new(&gchunk, m, p), Mat::t(col, rows, p), T::zero(), &mut dw);
            dw
        })
        .collect();
    // Fixed summation order keeps gradients independent of thread scheduling.
    let mut total = vec![T::zero(); m * rows];
    for part in partials {
        total.iter_mut().zip(part).for_each(|(t, v)| *t = *t + v);
    }
    total
}

/// Rearranges `[p, q, taps]` into `[q, p, taps]`.
fn swap_channel_axes<T: Scalar>(w: &[T], p: usize, q: usize, taps: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for i in 0..p {
        for j in 0..q {
            let s = (i * q + j) * taps;
            let d = (j * p + i) * taps;
            out[d..d + taps].copy_from_slice(&w[s..s + taps]);
        }
    }
    out
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], spatial: usize) {
    let c = bias.len();
    out.par_chunks_mut(spatial).enumerate().for_each(|(i, ch)| {
        let b = bias[i % c];
        ch.iter_mut().for_each(|v| *v = *v + b);
    });
}

fn bias_grad<T: Scalar>(g: &[T], channels: usize, spatial: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, ch) in g.chunks(spatial).enumerate() {
        gb[i % channels] = gb[i % channels] + ch.iter().copied().sum::<T>();
    }
    gb
}

pub(crate) fn spatial_dims<T: Scalar>(x: &Tensor<T>) -> [usize; 3] {
    [x.shape()[2], x.shape()[3], x.shape()[4]]
}

fn check_bias<T: Scalar>(op: &'static str, b: Option<&Tensor<T>>, has_bias: bool, c: usize) -> Result<()> {
    match (b, has_bias) {
        (Some(b), true) if b.shape() == [c] => Ok(()),
        (Some(b), true) => Err(Error::shape(op, &[c], b.shape())),
        (None, false) => Ok(()),
        (Some(_), false) => Err(Error::invalid(op, "bias given but spec has_bias = false")),
        (None, true) => Err(Error::invalid(op, "spec has_bias = true but no bias given")),
    }
}

/// Zero-padded 3-D cross-correlation of `x [N, Cin, D, H, W]` with
/// `w [Cout, Cin, kd, kh, kw]`, plus optional bias `[Cout]`.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &Conv3dSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    expect_rank("conv3d", x, 5)?;
    if x.shape()[1] != spec.in_channels {
        return Err(Error::invalid(
            "conv3d",
            format!("input has {} channels, spec expects {}", x.shape()[1], spec.in_channels),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape("conv3d", &spec.weight_shape(), w.shape()));
    }
    check_bias("conv3d", b, spec.has_bias, spec.out_channels)?;

    let n = x.shape()[0];
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let in_dims = spatial_dims(x);
    let out_dims = spec.output_dims(in_dims)?;
    let geom = Geometry {
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
    };
    let taps = geom.taps();
    let pointwise = geom.is_pointwise();
    let fwd = Gather::forward(&geom, in_dims, out_dims);
    let mut out = gather_gemm(x.data(), n, cin, &fwd, w.data(), cout, pointwise);
    let out_len: usize = out_dims.iter().product();
    if let Some(b) = b {
        add_bias(&mut out, b.data(), out_len);
    }

    let shape = vec![n, cout, out_dims[0], out_dims[1], out_dims[2]];
    let (rx, rw) = (x.requires_grad(), w.requires_grad());
    let rb = b.is_some_and(Tensor::requires_grad);
    let (xc, wc) = (x.clone(), w.clone());
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(b.cloned());
    let has_bias = b.is_some();
    Ok(Tensor::from_op("conv3d", shape, out, parents, move |g| {
        let gx = rx.then(|| {
            let adj = Gather::adjoint(&geom, out_dims, in_dims);
            let wt = swap_channel_axes(wc.data(), cout, cin, taps);
            gather_gemm(g, n, cout, &adj, &wt, cin, pointwise)
        });
        let gw = rw.then(|| weight_grad(xc.data(), n, cin, &fwd, g, cout, pointwise));
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(rb.then(|| bias_grad(g, cout, out_len)));
        }
        grads
    }))
}

/// Transposed convolution (adjoint of [`conv3d`] with the same geometry),
/// `x [N, Cin, …]`, `w [Cin, Cout, kd, kh, kw]`.
pub fn conv3d_transposed<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &TransposedConv3dSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    expect_rank("conv3d_transposed", x, 5)?;
    if x.shape()[1] != spec.in_channels {
        return Err(Error::invalid(
            "conv3d_transposed",
            format!("input has {} channels, spec expects {}", x.shape()[1], spec.in_channels),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape("conv3d_transposed", &spec.weight_shape(), w.shape()));
    }
    check_bias("conv3d_transposed", b, spec.has_bias, spec.out_channels)?;

    let n = x.shape()[0];
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let in_dims = spatial_dims(x);
    let out_dims = spec.output_dims(in_dims)?;
    let geom = spec.forward_conv();
    let taps = geom.taps();
    let pointwise = geom.is_pointwise();
    // As a convolution, the transposed layer maps out_dims → in_dims with
    // weight [cin (conv out), cout (conv in), taps].
    let adj = Gather::adjoint(&geom, in_dims, out_dims);
    let wt = swap_channel_axes(w.data(), cin, cout, taps);
    let mut out = gather_gemm(x.data(), n, cin, &adj, &wt, cout, pointwise);
    let out_len: usize = out_dims.iter().product();
    if let Some(b) = b {
        add_bias(&mut out, b.data(), out_len);
    }

    let shape = vec![n, cout, out_dims[0], out_dims[1], out_dims[2]];
    let (rx, rw) = (x.requires_grad(), w.requires_grad());
    let rb = b.is_some_and(Tensor::requires_grad);
    let (xc, wc) = (x.clone(), w.clone());
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(b.cloned());
    let has_bias = b.is_some();
    Ok(Tensor::from_op("conv3d_transposed", shape, out, parents, move |g| {
        let fwd = Gather::forward(&geom, out_dims, in_dims);
        let gx = rx.then(|| gather_gemm(g, n, cout, &fwd, wc.data(), cin, pointwise));
        let gw = rw.then(|| weight_grad(g, n, cout, &fwd, xc.data(), cin, pointwise));
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(rb.then(|| bias_grad(g, cout, out_len)));
        }
        grads
    }))
}

//! Elementwise arithmetic, reductions, matrix product and per-channel
//! statistics with their gradient rules.

use rayon::prelude::*;

use super::{expect_rank, gemm, numel_of, Mat, Scalar, Tensor};
use crate::error::{Error, Result};

/// Above this many elements, elementwise maps run on the rayon pool.
const PAR_THRESHOLD: usize = 1 << 15;

fn map_vec<T: Scalar>(src: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    if src.len() >= PAR_THRESHOLD {
        src.par_iter().map(|&v| f(v)).collect()
    } else {
        src.iter().map(|&v| f(v)).collect()
    }
}

fn zip_vec<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    if a.len() >= PAR_THRESHOLD {
        a.par_iter().zip(b.par_iter()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn apply<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        }
    }

    /// Partial derivatives (∂/∂x, ∂/∂y) at (x, y).
    fn partials<T: Scalar>(self, x: T, y: T) -> (T, T) {
        match self {
            BinaryKind::Add => (T::one(), T::one()),
            BinaryKind::Sub => (T::one(), -T::one()),
            BinaryKind::Mul => (y, x),
            BinaryKind::Div => (T::one() / y, -x / (y * y)),
        }
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    let (an, bn) = (a.numel(), b.numel());
    let shape = if a.shape() == b.shape() || bn == 1 {
        a.shape().to_vec()
    } else if an == 1 {
        b.shape().to_vec()
    } else {
        return Err(Error::shape(kind.name(), a.shape(), b.shape()));
    };
    let n = numel_of(&shape);
    let ad = a.data();
    let bd = b.data();
    let at = |i: usize| if an == 1 { ad[0] } else { ad[i] };
    let bt = |i: usize| if bn == 1 { bd[0] } else { bd[i] };
    let data: Vec<T> = (0..n).map(|i| kind.apply(at(i), bt(i))).collect();

    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        kind.name(),
        shape,
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            let ad = ac.data();
            let bd = bc.data();
            let at = |i: usize| if an == 1 { ad[0] } else { ad[i] };
            let bt = |i: usize| if bn == 1 { bd[0] } else { bd[i] };
            let mut ga = ra.then(|| vec![T::zero(); an]);
            let mut gb = rb.then(|| vec![T::zero(); bn]);
            for (i, &gi) in g.iter().enumerate() {
                let (dx, dy) = kind.partials(at(i), bt(i));
                if let Some(ga) = ga.as_mut() {
                    let j = if an == 1 { 0 } else { i };
                    ga[j] = ga[j] + gi * dx;
                }
                if let Some(gb) = gb.as_mut() {
                    let j = if bn == 1 { 0 } else { i };
                    gb[j] = gb[j] + gi * dy;
                }
            }
            vec![ga, gb]
        },
    ))
}

/// Unary map whose derivative is a function of the input value.
fn unary<T: Scalar>(
    x: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T) -> T + Sync,
    df: impl Fn(T) -> T + Sync + Send + 'static,
) -> Tensor<T> {
    let data = map_vec(x.data(), f);
    let xc = x.clone();
    Tensor::from_op(op, x.shape().to_vec(), data, vec![x.clone()], move |g| {
        vec![Some(zip_vec(g, xc.data(), |gi, xi| gi * df(xi)))]
    })
}

fn sigmoid_of<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Div)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        unary(self, "add_scalar", move |v| v + c, |_| T::one())
    }

    /// `c - x`, elementwise.
    pub fn rsub_scalar(&self, c: T) -> Tensor<T> {
        unary(self, "rsub_scalar", move |v| c - v, |_| -T::one())
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        unary(self, "scale", move |v| v * c, move |_| c)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo ≤ x ≤ hi`.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        unary(
            self,
            "clamp",
            move |v| v.max(lo).min(hi),
            move |v| if v >= lo && v <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(
            self,
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |v| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(self, "sigmoid", sigmoid_of, |v| {
            let s = sigmoid_of(v);
            s * (T::one() - s)
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary(
            self,
            "tanh",
            |v| v.tanh(),
            |v| {
                let t = v.tanh();
                T::one() - t * t
            },
        )
    }

    pub fn ln(&self) -> Tensor<T> {
        unary(self, "ln", |v| v.ln(), |v| T::one() / v)
    }

    /// `x^p` for a constant exponent.
    pub fn pow(&self, p: T) -> Tensor<T> {
        unary(
            self,
            "pow",
            move |v| v.powf(p),
            move |v| {
                if p == T::zero() {
                    T::zero()
                } else if p == T::one() {
                    T::one()
                } else {
                    p * v.powf(p - T::one())
                }
            },
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum::<T>();
        let n = self.numel();
        Tensor::from_op("sum", Vec::new(), vec![total], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::of(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Same values under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// `x[n,c,…] + v[n,c]`.
    pub fn add_channel(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        channel_binary(self, v, false)
    }

    /// `x[n,c,…] · v[n,c]`.
    pub fn mul_channel(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        channel_binary(self, v, true)
    }

    /// `x[n,c,…] - v[n,c]`.
    pub fn sub_channel(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.add_channel(&v.neg())
    }
}

impl<T: Scalar> Tensor<T> {
    /// Repeats a `[C]` vector into `[n, C]` rows.
    pub fn tile_rows(&self, n: usize) -> Result<Tensor<T>> {
        if self.rank() != 1 {
            return Err(Error::invalid(
                "tile_rows",
                format!("expected rank-1, got {:?}", self.shape()),
            ));
        }
        let c = self.numel();
        let data: Vec<T> = (0..n).flat_map(|_| self.data().iter().copied()).collect();
        Ok(Tensor::from_op("tile_rows", vec![n, c], data, vec![self.clone()], move |g| {
            let mut gs = vec![T::zero(); c];
            for row in g.chunks(c) {
                gs.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
            }
            vec![Some(gs)]
        }))
    }

    /// Sample `i` of a batched tensor, keeping a leading axis of 1.
    pub fn batch_item(&self, i: usize) -> Result<Tensor<T>> {
        if self.rank() == 0 || i >= self.shape()[0] {
            return Err(Error::invalid(
                "batch_item",
                format!("index {i} for shape {:?}", self.shape()),
            ));
        }
        let per = self.numel() / self.shape()[0];
        let mut shape = self.shape().to_vec();
        shape[0] = 1;
        let total = self.numel();
        let data = self.data()[i * per..(i + 1) * per].to_vec();
        Ok(Tensor::from_op("batch_item", shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); total];
            gx[i * per..(i + 1) * per].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }
}

/// Splits a rank ≥ 2 shape into (N, C, spatial element count).
pub(crate) fn ncs(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(op, format!("need [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], numel_of(&shape[2..])))
}

fn channel_binary<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>, multiply: bool) -> Result<Tensor<T>> {
    let op = if multiply { "mul_channel" } else { "add_channel" };
    let (n, c, s) = ncs(op, x.shape())?;
    if v.shape() != [n, c] {
        return Err(Error::shape(op, x.shape(), v.shape()));
    }
    let xd = x.data();
    let vd = v.data();
    let mut out = vec![T::zero(); xd.len()];
    out.par_chunks_mut(s)
        .zip(xd.par_chunks(s))
        .enumerate()
        .for_each(|(nc, (o, xs))| {
            let k = vd[nc];
            if multiply {
                o.iter_mut().zip(xs).for_each(|(o, &xv)| *o = xv * k);
            } else {
                o.iter_mut().zip(xs).for_each(|(o, &xv)| *o = xv + k);
            }
        });
    let (rx, rv) = (x.requires_grad(), v.requires_grad());
    let (xc, vc) = (x.clone(), v.clone());
    Ok(Tensor::from_op(
        op,
        x.shape().to_vec(),
        out,
        vec![x.clone(), v.clone()],
        move |g| {
            let vd = vc.data();
            let xd = xc.data();
            let gx = rx.then(|| {
                if multiply {
                    let mut gx = vec![T::zero(); g.len()];
                    gx.par_chunks_mut(s)
                        .zip(g.par_chunks(s))
                        .enumerate()
                        .for_each(|(nc, (o, gs))| {
                            let k = vd[nc];
                            o.iter_mut().zip(gs).for_each(|(o, &gi)| *o = gi * k);
                        });
                    gx
                } else {
                    g.to_vec()
                }
            });
            let gv = rv.then(|| {
                g.par_chunks(s)
                    .zip(xd.par_chunks(s))
                    .map(|(gs, xs)| {
                        if multiply {
                            gs.iter().zip(xs).map(|(&gi, &xi)| gi * xi).sum::<T>()
                        } else {
                            gs.iter().copied().sum::<T>()
                        }
                    })
                    .collect::<Vec<T>>()
            });
            vec![gx, gv]
        },
    ))
}

/// Matrix product of `[m,k]` and `[k,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n), T::zero(), &mut out);
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "matmul",
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        move |g| {
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            let ga = ra.then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(Mat::new(g, m, n), Mat::t(bc.data(), k, n), T::zero(), &mut ga);
                ga
            });
            let gb = rb.then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(Mat::t(ac.data(), m, k), Mat::new(g, m, n), T::zero(), &mut gb);
                gb
            });
            vec![ga, gb]
        },
    ))
}

/// Per-(sample, channel) mean over all trailing axes, shape `[N, C]`.
pub(crate) fn channel_mean<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, s) = ncs(op, x.shape())?;
    if s == 0 {
        return Err(Error::invalid(op, "empty spatial extent"));
    }
    let inv = T::one() / T::of(s as f64);
    let means: Vec<T> = x.data().par_chunks(s).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    let total = x.numel();
    Ok(Tensor::from_op(op, vec![n, c], means, vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); total];
        gx.par_chunks_mut(s).zip(g.par_iter()).for_each(|(o, &gi)| {
            let v = gi * inv;
            o.iter_mut().for_each(|o| *o = v);
        });
        vec![Some(gx)]
    }))
}

/// Per-(sample, channel) mean and population variance over the spatial
/// voxels of a `[N, C, D, H, W]` tensor. Both outputs are differentiable.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    expect_rank("channel_stats", x, 5)?;
    let mean = channel_mean("channel_stats", x)?;
    let (n, c, s) = ncs("channel_stats", x.shape())?;
    let inv = T::one() / T::of(s as f64);
    let md = mean.data();
    let vars: Vec<T> = x
        .data()
        .par_chunks(s)
        .zip(md.par_iter())
        .map(|(ch, &m)| {
            ch.iter()
                .map(|&v| {
                    let d = v - m;
                    d * d
                })
                .sum::<T>()
                * inv
        })
        .collect();
    let xc = x.clone();
    let means = md.to_vec();
    let var = Tensor::from_op("channel_var", vec![n, c], vars, vec![x.clone()], move |g| {
        // d Var / d x_j = 2 (x_j - μ) / S; the μ term cancels since Σ(x - μ) = 0.
        let two = T::of(2.0) * inv;
        let mut gx = vec![T::zero(); xc.numel()];
        gx.par_chunks_mut(s)
            .zip(xc.data().par_chunks(s))
            .enumerate()
            .for_each(|(nc, (o, xs))| {
                let k = g[nc] * two;
                let m = means[nc];
                o.iter_mut().zip(xs).for_each(|(o, &xv)| *o = k * (xv - m));
            });
        vec![Some(gx)]
    });
    Ok((mean, var))
}

/// Concatenates `[N, Ca, …]` and `[N, Cb, …]` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, s) = ncs("concat_channels", a.shape())?;
    let (nb, cb, sb) = ncs("concat_channels", b.shape())?;
    if n != nb || a.shape()[2..] != b.shape()[2..] {
        return Err(Error::shape("concat_channels", a.shape(), b.shape()));
    }
    debug_assert_eq!(s, sb);
    let (la, lb) = (ca * s, cb * s);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * la..(i + 1) * la]);
        out.extend_from_slice(&b.data()[i * lb..(i + 1) * lb]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(
        "concat_channels",
        shape,
        out,
        vec![a.clone(), b.clone()],
        move |g| {
            let ga = ra.then(|| {
                (0..n)
                    .flat_map(|i| g[i * (la + lb)..i * (la + lb) + la].iter().copied())
                    .collect()
            });
            let gb = rb.then(|| {
                (0..n)
                    .flat_map(|i| g[i * (la + lb) + la..(i + 1) * (la + lb)].iter().copied())
                    .collect()
            });
            vec![ga, gb]
        },
    ))
}

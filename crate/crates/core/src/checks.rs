//! Registry of finite-difference gradient checks over every differentiable
//! op, run at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::loss::{focal_loss, soft_dice_loss, LossConfig};
use crate::model::{build_model, forward, ModelConfig};
use crate::senorm::{se_block, se_norm, SeActivation, SeBlockParams, SeNormParams};
use crate::tensor::{channel_stats, concat_channels, gradcheck, gradcheck_piecewise, matmul, GradcheckReport, Tensor};
use crate::volumetric::*;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
const H: f64 = 1e-5;

type T = Tensor<f64>;

pub struct GradCheck {
    pub name: &'static str,
    pub tolerance: f64,
    run: fn(&mut ChaCha8Rng) -> Result<GradcheckReport>,
}

impl GradCheck {
    pub fn run(&self, seed: u64) -> Result<CheckOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rep = (self.run)(&mut rng)?;
        Ok(CheckOutcome {
            name: self.name,
            seed,
            max_rel_error: rep.max_rel_error,
            tolerance: self.tolerance,
            passed: rep.max_rel_error < self.tolerance,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn uni(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).unwrap()
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
    uni(rng, shape, -1.0, 1.0)
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(v, shape).unwrap()
}

/// Distinct values spaced ≥ 0.01 apart, so max selections are stable.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(v, shape).unwrap()
}

/// `Σ y ⊙ r` for a random fixed `r`, so every output coordinate matters.
fn probe(y: Result<T>, r: &T) -> Result<T> {
    Ok(y?.mul(r)?.sum())
}

fn check(f: impl Fn(&T) -> Result<T>, x: &T) -> Result<GradcheckReport> {
    gradcheck(f, x, H)
}

/// Worst of several reports.
fn worst(reps: Vec<GradcheckReport>) -> GradcheckReport {
    reps.into_iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one report")
}

fn binary_ops(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let a = normal(rng, &[2, 3]);
    let b = uni(rng, &[2, 3], 0.5, 1.5);
    let s = uni(rng, &[1], 0.5, 1.5);
    let r = normal(rng, &[2, 3]);
    Ok(worst(vec![
        check(|x| probe(x.add(&b), &r), &a)?,
        check(|x| probe(a.sub(x), &r), &b)?,
        check(|x| probe(x.mul(&b), &r), &a)?,
        check(|x| probe(a.div(x), &r), &b)?,
        check(|x| probe(a.mul(x), &r), &s)?,
        check(|x| probe(x.div(&s), &r), &a)?,
    ]))
}

fn unary_ops(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let x = normal(rng, &[3, 4]);
    let pos = uni(rng, &[3, 4], 0.2, 2.0);
    let kinked = off_zero(rng, &[3, 4]);
    let r = normal(rng, &[3, 4]);
    Ok(worst(vec![
        check(|t| probe(Ok(t.add_scalar(0.3).rsub_scalar(2.0).scale(-1.7).neg()), &r), &x)?,
        check(|t| probe(Ok(t.relu()), &r), &kinked)?,
        check(|t| probe(Ok(t.clamp(-0.05, 0.05)), &r), &kinked)?,
        check(|t| probe(Ok(t.sigmoid()), &r), &x)?,
        check(|t| probe(Ok(t.tanh()), &r), &x)?,
        check(|t| probe(Ok(t.ln()), &r), &pos)?,
        check(|t| probe(Ok(t.pow(-0.5)), &r), &pos)?,
        check(|t| probe(Ok(t.pow(2.0)), &r), &x)?,
    ]))
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let x = normal(rng, &[2, 3, 2, 1, 2]);
    let v = normal(rng, &[2, 3]);
    let r = normal(rng, &[2, 3, 2, 1, 2]);
    let rb = normal(rng, &[1, 3, 2, 1, 2]);
    let rt = normal(rng, &[4, 3]);
    let c = normal(rng, &[3]);
    Ok(worst(vec![
        check(|t| Ok(t.sum()), &x)?,
        check(|t| Ok(t.mean().scale(3.0)), &x)?,
        check(
            |t| probe(t.reshape(&[6, 4]).and_then(|y| y.reshape(&[2, 3, 2, 1, 2])), &r),
            &x,
        )?,
        check(|t| probe(x.add_channel(t), &r), &v)?,
        check(|t| probe(t.mul_channel(&v), &r), &x)?,
        check(|t| probe(x.mul_channel(t), &r), &v)?,
        check(|t| probe(t.sub_channel(&v), &r), &x)?,
        check(|t| probe(t.batch_item(1), &rb), &x)?,
        check(|t| probe(t.tile_rows(4), &rt), &c)?,
    ]))
}

fn matmul_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let a = normal(rng, &[3, 4]);
    let b = normal(rng, &[4, 2]);
    let r = normal(rng, &[3, 2]);
    Ok(worst(vec![
        check(|x| probe(matmul(x, &b), &r), &a)?,
        check(|x| probe(matmul(&a, x), &r), &b)?,
    ]))
}

fn channel_stats_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let x = normal(rng, &[2, 2, 2, 3, 1]);
    let (rm, rv) = (normal(rng, &[2, 2]), normal(rng, &[2, 2]));
    check(
        |t| {
            let (m, v) = channel_stats(t)?;
            m.mul(&rm)?.sum().add(&v.mul(&rv)?.sum())
        },
        &x,
    )
}

fn concat_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let a = normal(rng, &[2, 1, 2, 2, 1]);
    let b = normal(rng, &[2, 2, 2, 2, 1]);
    let r = normal(rng, &[2, 3, 2, 2, 1]);
    Ok(worst(vec![
        check(|x| probe(concat_channels(x, &b), &r), &a)?,
        check(|x| probe(concat_channels(&a, x), &r), &b)?,
    ]))
}

fn conv3d_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let spec = Conv3dSpec {
        in_channels: 2,
        out_channels: 2,
        kernel: [3, 1, 3],
        stride: [rng.random_range(1..=2), 1, 1],
        padding: [1, 0, 1],
        has_bias: true,
    };
    let x = normal(rng, &[1, 2, 4, 2, 3]);
    let w = normal(rng, &spec.weight_shape());
    let b = normal(rng, &[2]);
    let out = spec.output_dims([4, 2, 3])?;
    let r = normal(rng, &[1, 2, out[0], out[1], out[2]]);
    Ok(worst(vec![
        check(|t| probe(conv3d(t, &w, Some(&b), &spec), &r), &x)?,
        check(|t| probe(conv3d(&x, t, Some(&b), &spec), &r), &w)?,
        check(|t| probe(conv3d(&x, &w, Some(t), &spec), &r), &b)?,
    ]))
}

fn conv3d_transposed_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let mut spec = TransposedConv3dSpec::doubling(2, 2);
    spec.has_bias = true;
    let x = normal(rng, &[1, 2, 2, 1, 2]);
    let w = normal(rng, &spec.weight_shape());
    let b = normal(rng, &[2]);
    let r = normal(rng, &[1, 2, 4, 2, 4]);
    Ok(worst(vec![
        check(|t| probe(conv3d_transposed(t, &w, Some(&b), &spec), &r), &x)?,
        check(|t| probe(conv3d_transposed(&x, t, Some(&b), &spec), &r), &w)?,
        check(|t| probe(conv3d_transposed(&x, &w, Some(t), &spec), &r), &b)?,
    ]))
}

fn maxpool_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let x = distinct(rng, &[1, 2, 2, 4, 4]);
    let r = normal(rng, &[1, 2, 1, 2, 2]);
    check(|t| probe(maxpool3d(t), &r), &x)
}

fn resize_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let x = normal(rng, &[1, 2, 2, 3, 2]);
    let target = [rng.random_range(1..=4), rng.random_range(2..=5), 4];
    let r = normal(rng, &[1, 2, target[0], target[1], target[2]]);
    check(|t| probe(trilinear_resize(t, target), &r), &x)
}

fn gap_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let x = normal(rng, &[2, 3, 2, 2, 2]);
    let r = normal(rng, &[2, 3]);
    check(|t| probe(global_avg_pool(t), &r), &x)
}

fn linear_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let x = normal(rng, &[3, 4]);
    let w = normal(rng, &[2, 4]);
    let b = normal(rng, &[2]);
    let r = normal(rng, &[3, 2]);
    Ok(worst(vec![
        check(|t| probe(linear(t, &w, &b), &r), &x)?,
        check(|t| probe(linear(&x, t, &b), &r), &w)?,
        check(|t| probe(linear(&x, &w, t), &r), &b)?,
    ]))
}

fn random_se(rng: &mut ChaCha8Rng, channels: usize, activation: SeActivation) -> SeBlockParams<f64> {
    let h = channels / 2;
    SeBlockParams {
        w1: normal(rng, &[h, channels]),
        b1: uni(rng, &[h], 0.2, 0.6),
        w2: normal(rng, &[channels, h]),
        b2: normal(rng, &[channels]),
        activation,
    }
}

fn se_block_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let mut reps = Vec::new();
    for act in [SeActivation::Sigmoid, SeActivation::Tanh] {
        let p = random_se(rng, 4, act);
        let x = normal(rng, &[2, 4, 2, 2, 1]);
        let r = normal(rng, &[2, 4]);
        reps.push(check(|t| probe(se_block(t, &p), &r), &x)?);
        reps.push(check(
            |t| {
                probe(
                    se_block(
                        &x,
                        &SeBlockParams {
                            w1: t.clone(),
                            ..p.clone()
                        },
                    ),
                    &r,
                )
            },
            &p.w1,
        )?);
        reps.push(check(
            |t| {
                probe(
                    se_block(
                        &x,
                        &SeBlockParams {
                            w2: t.clone(),
                            ..p.clone()
                        },
                    ),
                    &r,
                )
            },
            &p.w2,
        )?);
    }
    Ok(worst(reps))
}

fn se_norm_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let p = SeNormParams {
        gamma: random_se(rng, 4, SeActivation::Sigmoid),
        beta: random_se(rng, 4, SeActivation::Tanh),
        eps: 1e-5,
    };
    let x = normal(rng, &[2, 4, 2, 2, 2]);
    let r = normal(rng, &[2, 4, 2, 2, 2]);
    let with_gamma_w2 = |t: &T| SeNormParams {
        gamma: SeBlockParams {
            w2: t.clone(),
            ..p.gamma.clone()
        },
        ..p.clone()
    };
    Ok(worst(vec![
        check(|t| probe(se_norm(t, &p), &r), &x)?,
        check(|t| probe(se_norm(&x, &with_gamma_w2(t)), &r), &p.gamma.w2)?,
    ]))
}

fn label(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect(), shape).unwrap()
}

fn dice_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let y = label(rng, &[4, 4, 4]);
    let p = uni(rng, &[4, 4, 4], 0.05, 0.95);
    check(|t| soft_dice_loss(&y, t), &p)
}

fn focal_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let y = label(rng, &[4, 4, 4]);
    let p = uni(rng, &[4, 4, 4], 0.05, 0.95);
    let sym = LossConfig {
        focal_symmetric: true,
        ..LossConfig::default()
    };
    Ok(worst(vec![
        check(|t| focal_loss(&y, t, &LossConfig::default()), &p)?,
        check(|t| focal_loss(&y, t, &sym), &p)?,
    ]))
}

/// The tiny network on a 16³ input: gradients with respect to sampled
/// input voxels and sampled entries of a few parameter tensors.
fn network_check(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let cfg = ModelConfig::tiny();
    let seed = rng.random();
    let mut params = build_model::<f64>(&cfg, seed)?;
    // Non-zero SE output layers so γ and β depend on the input.
    let names: Vec<String> = params.names().filter(|n| n.contains("fc2")).map(String::from).collect();
    for n in names {
        let t = params.get(&n)?;
        let v: Vec<f64> = (0..t.numel()).map(|_| rng.random_range(-0.3..0.3)).collect();
        params.set_data(&n, v)?;
    }
    let x = normal(rng, &[1, 2, 16, 16, 16]);
    let r = normal(rng, &[1, 1, 16, 16, 16]);
    let loss = |p: &crate::params::ModelParams<f64>, x: &T| probe(forward(p, &cfg, x), &r);
    let steps = [1e-6, 3e-7, 1e-7, 3e-8];
    let agree = 1e-4;
    let sample = |rng: &mut ChaCha8Rng, n: usize, k: usize| (0..k).map(|_| rng.random_range(0..n)).collect::<Vec<_>>();

    let mut reps = vec![gradcheck_piecewise(
        |t| loss(&params, t),
        &x,
        &steps,
        agree,
        &sample(rng, x.numel(), 6),
    )?];
    for name in [
        "head.conv.w",
        "encoder.level0.res0.branch.conv0.conv.w",
        "encoder.level2.res1.branch.conv1.norm.gamma.fc2.w",
        "decoder.level1.up.w",
    ] {
        let w = params.get(name)?.detach();
        let coords = sample(rng, w.numel(), 3);
        reps.push(gradcheck_piecewise(
            |t| {
                let mut p = params.clone();
                p.insert(name, t.clone());
                loss(&p, &x)
            },
            &w,
            &steps,
            agree,
            &coords,
        )?);
    }
    Ok(worst(reps))
}

pub fn registry() -> Vec<GradCheck> {
    let op = |name, run| GradCheck {
        name,
        tolerance: OP_TOLERANCE,
        run,
    };
    vec![
        op("elementwise_binary", binary_ops),
        op("elementwise_unary", unary_ops),
        op("reductions_and_broadcast", reductions),
        op("matmul", matmul_check),
        op("channel_stats", channel_stats_check),
        op("concat_channels", concat_check),
        op("conv3d", conv3d_check),
        op("conv3d_transposed", conv3d_transposed_check),
        op("maxpool3d", maxpool_check),
        op("trilinear_resize", resize_check),
        op("global_avg_pool", gap_check),
        op("linear", linear_check),
        op("se_block", se_block_check),
        op("se_norm", se_norm_check),
        op("soft_dice_loss", dice_check),
        op("focal_loss", focal_check),
        GradCheck {
            name: "network_tiny",
            tolerance: NETWORK_TOLERANCE,
            run: network_check,
        },
    ]
}

/// Runs every registered check for each seed.
pub fn run_all(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for c in registry() {
        for s in seeds.clone() {
            out.push(c.run(s)?);
        }
    }
    Ok(out)
}

//! Squeeze-and-excitation normalization and the blocks built from it.
//!
//! An SE Norm layer standardizes every channel of every sample with its own
//! mean and variance, then applies a per-channel scale `γ` and shift `β` that
//! are themselves computed from the layer input by two SE blocks: one ending
//! in a sigmoid (`γ ∈ (0, 1)`), one in a tanh (`β ∈ (−1, 1)`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ModelParams, Registrar};
use crate::tensor::{channel_stats, expect_rank, Scalar, Tensor};
use crate::volumetric::{conv3d, global_avg_pool, linear, Conv3dSpec};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeActivation {
    Sigmoid,
    Tanh,
}

/// Normalization used inside convolutional blocks. `InstanceNorm` (learned,
/// input-independent `γ`, `β`) exists for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    SeNorm,
    InstanceNorm,
}

/// Placement of the activation relative to the normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    /// conv → ReLU → norm
    #[default]
    ReluThenNorm,
    /// conv → norm → ReLU
    NormThenRelu,
}

/// Settings shared by every convolutional block of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub reduction: usize,
    pub eps: f64,
    pub norm: NormKind,
    pub order: BlockOrder,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            reduction: 2,
            eps: DEFAULT_EPS,
            norm: NormKind::SeNorm,
            order: BlockOrder::ReluThenNorm,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeBlockParams<T: Scalar> {
    /// `[C/r, C]`
    pub w1: Tensor<T>,
    /// `[C/r]`
    pub b1: Tensor<T>,
    /// `[C, C/r]`
    pub w2: Tensor<T>,
    /// `[C]`
    pub b2: Tensor<T>,
    pub activation: SeActivation,
}

impl<T: Scalar> SeBlockParams<T> {
    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    /// All-zero weights and biases.
    pub fn zeros(channels: usize, reduction: usize, activation: SeActivation) -> Result<Self> {
        let h = hidden_width(channels, reduction)?;
        Ok(Self {
            w1: Tensor::zeros(&[h, channels]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[channels, h]),
            b2: Tensor::zeros(&[channels]),
            activation,
        })
    }

    pub(crate) fn register(
        reg: &mut Registrar<'_, T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        activation: SeActivation,
    ) -> Result<Self> {
        let h = hidden_width(channels, reduction)?;
        let bound = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            w1: reg.uniform(format!("{prefix}.fc1.w"), &[h, channels], bound),
            b1: reg.uniform(format!("{prefix}.fc1.b"), &[h], bound),
            // Zero output layer: training starts from γ = 0.5, β = 0.
            w2: reg.constant(format!("{prefix}.fc2.w"), &[channels, h], 0.0),
            b2: reg.constant(format!("{prefix}.fc2.b"), &[channels], 0.0),
            activation,
        })
    }

    pub fn load(store: &ModelParams<T>, prefix: &str, activation: SeActivation) -> Result<Self> {
        Ok(Self {
            w1: store.get(&format!("{prefix}.fc1.w"))?.clone(),
            b1: store.get(&format!("{prefix}.fc1.b"))?.clone(),
            w2: store.get(&format!("{prefix}.fc2.w"))?.clone(),
            b2: store.get(&format!("{prefix}.fc2.b"))?.clone(),
            activation,
        })
    }
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Config(format!(
            "SE block needs channels ({channels}) divisible by a positive reduction ratio ({reduction})"
        )));
    }
    Ok(channels / reduction)
}

/// `activation(FC₂(ReLU(FC₁(GAP(x)))))`, one value per (sample, channel).
pub fn se_block<T: Scalar>(x: &Tensor<T>, p: &SeBlockParams<T>) -> Result<Tensor<T>> {
    expect_rank("se_block", x, 5)?;
    if x.shape()[1] != p.channels() {
        return Err(Error::invalid(
            "se_block",
            format!("input has {} channels, block expects {}", x.shape()[1], p.channels()),
        ));
    }
    let squeezed = global_avg_pool(x)?;
    let hidden = linear(&squeezed, &p.w1, &p.b1)?.relu();
    let excited = linear(&hidden, &p.w2, &p.b2)?;
    Ok(match p.activation {
        SeActivation::Sigmoid => excited.sigmoid(),
        SeActivation::Tanh => excited.tanh(),
    })
}

/// Per-(sample, channel) standardization `(x − μ)/√(Var + ε)` with the
/// population variance over the spatial voxels.
pub fn normalize<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (mean, var) = channel_stats(x)?;
    let inv_std = var.add_scalar(T::of(eps)).pow(T::of(-0.5));
    x.sub_channel(&mean)?.mul_channel(&inv_std)
}

#[derive(Clone, Debug)]
pub struct SeNormParams<T: Scalar> {
    pub gamma: SeBlockParams<T>,
    pub beta: SeBlockParams<T>,
    pub eps: f64,
}

impl<T: Scalar> SeNormParams<T> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            gamma: SeBlockParams::zeros(channels, reduction, SeActivation::Sigmoid)?,
            beta: SeBlockParams::zeros(channels, reduction, SeActivation::Tanh)?,
            eps: DEFAULT_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.channels()
    }
}

/// `γ(x) · normalize(x) + β(x)`, with `γ` and `β` computed from the
/// un-normalized input.
pub fn se_norm<T: Scalar>(x: &Tensor<T>, p: &SeNormParams<T>) -> Result<Tensor<T>> {
    expect_rank("se_norm", x, 5)?;
    if p.beta.channels() != p.gamma.channels() || !(p.eps > 0.0) {
        return Err(Error::Config("SE Norm blocks disagree on channels or eps ≤ 0".into()));
    }
    let gamma = se_block(x, &p.gamma)?;
    let beta = se_block(x, &p.beta)?;
    normalize(x, p.eps)?.mul_channel(&gamma)?.add_channel(&beta)
}

#[derive(Clone, Debug)]
pub struct InstanceNormParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

pub fn instance_norm<T: Scalar>(x: &Tensor<T>, p: &InstanceNormParams<T>) -> Result<Tensor<T>> {
    expect_rank("instance_norm", x, 5)?;
    let n = x.shape()[0];
    normalize(x, p.eps)?
        .mul_channel(&p.weight.tile_rows(n)?)?
        .add_channel(&p.bias.tile_rows(n)?)
}

#[derive(Clone, Debug)]
pub enum Norm<T: Scalar> {
    Se(SeNormParams<T>),
    Instance(InstanceNormParams<T>),
}

impl<T: Scalar> Norm<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Norm::Se(p) => se_norm(x, p),
            Norm::Instance(p) => instance_norm(x, p),
        }
    }

    fn register(reg: &mut Registrar<'_, T>, prefix: &str, channels: usize, cfg: &BlockConfig) -> Result<Self> {
        Ok(match cfg.norm {
            NormKind::SeNorm => Norm::Se(SeNormParams {
                gamma: SeBlockParams::register(
                    reg,
                    &format!("{prefix}.gamma"),
                    channels,
                    cfg.reduction,
                    SeActivation::Sigmoid,
                )?,
                beta: SeBlockParams::register(reg, &format!("{prefix}.beta"), channels, cfg.reduction, SeActivation::Tanh)?,
                eps: cfg.eps,
            }),
            NormKind::InstanceNorm => Norm::Instance(InstanceNormParams {
                weight: reg.constant(format!("{prefix}.weight"), &[channels], 1.0),
                bias: reg.constant(format!("{prefix}.bias"), &[channels], 0.0),
                eps: cfg.eps,
            }),
        })
    }

    fn load(store: &ModelParams<T>, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        Ok(match cfg.norm {
            NormKind::SeNorm => Norm::Se(SeNormParams {
                gamma: SeBlockParams::load(store, &format!("{prefix}.gamma"), SeActivation::Sigmoid)?,
                beta: SeBlockParams::load(store, &format!("{prefix}.beta"), SeActivation::Tanh)?,
                eps: cfg.eps,
            }),
            NormKind::InstanceNorm => Norm::Instance(InstanceNormParams {
                weight: store.get(&format!("{prefix}.weight"))?.clone(),
                bias: store.get(&format!("{prefix}.bias"))?.clone(),
                eps: cfg.eps,
            }),
        })
    }
}

/// Convolution, ReLU and normalization (order per [`BlockOrder`]).
#[derive(Clone, Debug)]
pub struct ConvBlockParams<T: Scalar> {
    pub spec: Conv3dSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: Norm<T>,
    pub order: BlockOrder,
}

impl<T: Scalar> ConvBlockParams<T> {
    pub(crate) fn register(
        reg: &mut Registrar<'_, T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let spec = Conv3dSpec::same(in_channels, out_channels, kernel);
        spec.validate()?;
        let fan_in = (in_channels * kernel * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Ok(Self {
            weight: reg.uniform(format!("{prefix}.conv.w"), &spec.weight_shape(), bound),
            bias: reg.uniform(format!("{prefix}.conv.b"), &[out_channels], bound),
            norm: Norm::register(reg, &format!("{prefix}.norm"), out_channels, cfg)?,
            order: cfg.order,
            spec,
        })
    }

    pub fn load(
        store: &ModelParams<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let spec = Conv3dSpec::same(in_channels, out_channels, kernel);
        Ok(Self {
            weight: store.get(&format!("{prefix}.conv.w"))?.clone(),
            bias: store.get(&format!("{prefix}.conv.b"))?.clone(),
            norm: Norm::load(store, &format!("{prefix}.norm"), cfg)?,
            order: cfg.order,
            spec,
        })
    }
}

pub fn conv_block<T: Scalar>(x: &Tensor<T>, p: &ConvBlockParams<T>) -> Result<Tensor<T>> {
    let y = conv3d(x, &p.weight, Some(&p.bias), &p.spec)?;
    match p.order {
        BlockOrder::ReluThenNorm => p.norm.apply(&y.relu()),
        BlockOrder::NormThenRelu => Ok(p.norm.apply(&y)?.relu()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Number of stacked conv blocks on the residual branch.
    pub branch_depth: usize,
}

impl ResBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            branch_depth: 2,
        }
    }

    /// A 1×1×1 projection block replaces the identity shortcut exactly when
    /// the channel count changes.
    pub fn projection(&self) -> bool {
        self.in_channels != self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct ResBlockParams<T: Scalar> {
    pub spec: ResBlockSpec,
    pub branch: Vec<ConvBlockParams<T>>,
    pub shortcut: Option<ConvBlockParams<T>>,
}

impl<T: Scalar> ResBlockParams<T> {
    pub(crate) fn register(reg: &mut Registrar<'_, T>, prefix: &str, spec: ResBlockSpec, cfg: &BlockConfig) -> Result<Self> {
        if spec.branch_depth == 0 {
            return Err(Error::Config("residual branch needs at least one conv block".into()));
        }
        let mut branch = Vec::with_capacity(spec.branch_depth);
        for j in 0..spec.branch_depth {
            let cin = if j == 0 { spec.in_channels } else { spec.out_channels };
            branch.push(ConvBlockParams::register(
                reg,
                &format!("{prefix}.branch.conv{j}"),
                cin,
                spec.out_channels,
                spec.kernel,
                cfg,
            )?);
        }
        let shortcut = if spec.projection() {
            Some(ConvBlockParams::register(
                reg,
                &format!("{prefix}.shortcut"),
                spec.in_channels,
                spec.out_channels,
                1,
                cfg,
            )?)
        } else {
            None
        };
        Ok(Self { spec, branch, shortcut })
    }

    pub fn load(store: &ModelParams<T>, prefix: &str, spec: ResBlockSpec, cfg: &BlockConfig) -> Result<Self> {
        let branch = (0..spec.branch_depth)
            .map(|j| {
                let cin = if j == 0 { spec.in_channels } else { spec.out_channels };
                ConvBlockParams::load(
                    store,
                    &format!("{prefix}.branch.conv{j}"),
                    cin,
                    spec.out_channels,
                    spec.kernel,
                    cfg,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let shortcut = if spec.projection() {
            Some(ConvBlockParams::load(
                store,
                &format!("{prefix}.shortcut"),
                spec.in_channels,
                spec.out_channels,
                1,
                cfg,
            )?)
        } else {
            None
        };
        Ok(Self { spec, branch, shortcut })
    }
}

/// Stacked conv blocks plus an identity or 1×1×1-projection shortcut. Both
/// branch blocks complete before the addition.
pub fn res_block<T: Scalar>(x: &Tensor<T>, p: &ResBlockParams<T>) -> Result<Tensor<T>> {
    if p.shortcut.is_some() != p.spec.projection() {
        return Err(Error::Config(format!(
            "residual block {}→{} channels has inconsistent shortcut",
            p.spec.in_channels, p.spec.out_channels
        )));
    }
    let mut branch = x.clone();
    for block in &p.branch {
        branch = conv_block(&branch, block)?;
    }
    let shortcut = match &p.shortcut {
        Some(proj) => conv_block(x, proj)?,
        None => x.clone(),
    };
    if branch.shape() != shortcut.shape() {
        return Err(Error::shape("res_block", branch.shape(), shortcut.shape()));
    }
    branch.add(&shortcut)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::new(v.to_vec(), s).unwrap()
    }

    #[test]
    fn zero_weight_blocks_give_half_and_zero() {
        let x = t(&[1.0, -3.0, 2.0, 7.0], &[1, 2, 1, 1, 2]);
        let g = se_block(&x, &SeBlockParams::zeros(2, 2, SeActivation::Sigmoid).unwrap()).unwrap();
        assert_eq!(g.to_vec(), vec![0.5, 0.5]);
        let b = se_block(&x, &SeBlockParams::zeros(2, 2, SeActivation::Tanh).unwrap()).unwrap();
        assert_eq!(b.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_set_se_block() {
        // GAP gives descriptors [2, 5].
        let x = t(&[1.0, 3.0, 5.0, 5.0], &[1, 2, 1, 1, 2]);
        let p = SeBlockParams {
            w1: t(&[1.0, 0.0], &[1, 2]),
            b1: t(&[0.0], &[1]),
            w2: t(&[1.0, 0.0], &[2, 1]),
            b2: t(&[0.0, 0.0], &[2]),
            activation: SeActivation::Sigmoid,
        };
        let y = se_block(&x, &p).unwrap().to_vec();
        let s2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((y[0] - s2).abs() < 1e-15);
        assert_eq!(y[1], 0.5);
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(SeBlockParams::<f32>::zeros(3, 2, SeActivation::Sigmoid).is_err());
        assert!(SeBlockParams::<f32>::zeros(4, 0, SeActivation::Sigmoid).is_err());
        assert_eq!(SeBlockParams::<f32>::zeros(8, 2, SeActivation::Sigmoid).unwrap().hidden(), 4);
    }

    #[test]
    fn constant_channel_normalizes_to_beta() {
        let x = t(&[4.0; 8], &[1, 1, 2, 2, 2]);
        let p = SeNormParams::zeros(1, 1).unwrap();
        let y = se_norm(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_value_channel() {
        let x = t(&[1.0, 3.0], &[1, 1, 1, 1, 2]);
        let xn = normalize(&x, DEFAULT_EPS).unwrap().to_vec();
        assert!((xn[0] + 1.0).abs() < 1e-5 && (xn[1] - 1.0).abs() < 1e-5);
        let y = se_norm(&x, &SeNormParams::zeros(1, 1).unwrap()).unwrap().to_vec();
        assert!((y[0] - 0.5 * xn[0]).abs() < 1e-15 && (y[1] - 0.5 * xn[1]).abs() < 1e-15);
    }

    #[test]
    fn conv_block_with_zero_conv_outputs_beta() {
        let mut store = ModelParams::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut reg = Registrar {
            store: &mut store,
            rng: &mut rng,
        };
        let mut p = ConvBlockParams::register(&mut reg, "b", 2, 4, 3, &BlockConfig::default()).unwrap();
        p.weight = Tensor::zeros(p.weight.shape());
        p.bias = Tensor::zeros(p.bias.shape());
        let x = Tensor::full(&[1, 2, 4, 4, 4], 1.0);
        let y = conv_block(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

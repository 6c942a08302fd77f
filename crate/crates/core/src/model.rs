//! Residual encoder / convolutional decoder segmentation network.
//!
//! ```text
//! level 0  stem(7³) res … ───────────────────────────── cat → blocks ─┬─(+)→ 1×1×1 → sigmoid
//!   ↓ pool                                             ↑ up           │
//! level 1  res …  ─────────────────────── cat → blocks ┤──── path ────┤
//!   ↓ pool                                ↑ up                        │
//! level 2  res …  ────────── cat → blocks ┤─────────── path ──────────┤
//!   ↓ pool                   ↑ up                                     │
//! level 3  res …  ─ cat → blocks ┤─────────────────── path ───────────┘
//!   ↓ pool          ↑ up
//! level 4  res …  ──┘
//! ```
//!
//! Each upsampling path is a 1×1×1 conv block down to the level-0 width
//! followed by trilinear resizing to full resolution; the paths are summed
//! into the last decoder output before the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ModelParams, Registrar};
use crate::senorm::{conv_block, res_block, BlockConfig, ConvBlockParams, ResBlockParams, ResBlockSpec};
use crate::tensor::{concat_channels, Scalar, Tensor};
use crate::volumetric::{conv3d, conv3d_transposed, maxpool3d, trilinear_resize, Conv3dSpec, TransposedConv3dSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// PET and CT.
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of 2×2×2 pooling stages.
    pub levels: usize,
    /// Channel width per level, `levels + 1` entries.
    pub widths: Vec<usize>,
    /// Residual blocks per encoder level, `levels + 1` entries.
    pub encoder_blocks: Vec<usize>,
    /// Conv blocks per decoder stage.
    pub decoder_blocks: usize,
    /// Conv blocks on each residual branch.
    pub branch_depth: usize,
    /// Kernel of the first residual block.
    pub stem_kernel: usize,
    pub kernel: usize,
    pub upsampling_paths: usize,
    pub block: BlockConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            out_channels: 1,
            levels: 4,
            widths: vec![32, 64, 128, 256, 512],
            encoder_blocks: vec![2, 3, 3, 3, 3],
            decoder_blocks: 2,
            branch_depth: 2,
            stem_kernel: 7,
            kernel: 3,
            upsampling_paths: 3,
            block: BlockConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Default topology with widths 4, 8, 16, 32, 64.
    pub fn tiny() -> Self {
        Self {
            widths: vec![4, 8, 16, 32, 64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("model channel counts must be positive".into());
        }
        if self.widths.len() != self.levels + 1 {
            return bad(format!(
                "widths has {} entries, need levels + 1 = {}",
                self.widths.len(),
                self.levels + 1
            ));
        }
        if self.encoder_blocks.len() != self.levels + 1 {
            return bad(format!(
                "encoder_blocks has {} entries, need levels + 1 = {}",
                self.encoder_blocks.len(),
                self.levels + 1
            ));
        }
        if self.encoder_blocks.contains(&0) {
            return bad("every encoder level needs at least one residual block".into());
        }
        if self.levels > 0 && self.decoder_blocks == 0 {
            return bad("decoder stages need at least one conv block".into());
        }
        if self.branch_depth == 0 {
            return bad("branch_depth must be ≥ 1".into());
        }
        for &w in &self.widths {
            if w == 0 || w % self.block.reduction.max(1) != 0 || self.block.reduction == 0 {
                return bad(format!(
                    "width {w} must be positive and divisible by reduction {}",
                    self.block.reduction
                ));
            }
        }
        for k in [self.stem_kernel, self.kernel] {
            if k % 2 == 0 {
                return bad(format!("kernel {k} must be odd"));
            }
        }
        if self.upsampling_paths > self.levels.saturating_sub(1) {
            return bad(format!(
                "{} upsampling paths need at least {} levels",
                self.upsampling_paths,
                self.upsampling_paths + 1
            ));
        }
        if !(self.block.eps > 0.0) {
            return bad("normalization eps must be positive".into());
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    /// Output shape for an input shape, without running the network.
    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 5]> {
        self.validate()?;
        self.check_input(input)?;
        Ok([input[0], self.out_channels, input[2], input[3], input[4]])
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.in_channels {
            return Err(Error::invalid(
                "forward",
                format!("expected [N, {}, D, H, W], got {shape:?}", self.in_channels),
            ));
        }
        let q = self.divisor();
        if shape[2..].iter().any(|&d| d % q != 0) {
            return Err(Error::invalid(
                "forward",
                format!(
                    "spatial extents {:?} must be divisible by {q}; pad the input to the next multiple of {q}",
                    &shape[2..]
                ),
            ));
        }
        Ok(())
    }

    fn encoder_spec(&self, level: usize, index: usize) -> ResBlockSpec {
        let out = self.widths[level];
        let (cin, kernel) = match (level, index) {
            (0, 0) => (self.in_channels, self.stem_kernel),
            (l, 0) => (self.widths[l - 1], self.kernel),
            (l, _) => (self.widths[l], self.kernel),
        };
        ResBlockSpec {
            in_channels: cin,
            out_channels: out,
            kernel,
            branch_depth: self.branch_depth,
        }
    }

    fn decoder_block_channels(&self, level: usize, index: usize) -> (usize, usize) {
        let w = self.widths[level];
        if index == 0 {
            (2 * w, w)
        } else {
            (w, w)
        }
    }
}

fn enc_name(level: usize, index: usize) -> String {
    format!("encoder.level{level}.res{index}")
}

fn dec_name(level: usize, index: usize) -> String {
    format!("decoder.level{level}.block{index}")
}

fn up_name(level: usize) -> String {
    format!("decoder.level{level}.up.w")
}

fn path_name(level: usize) -> String {
    format!("paths.level{level}")
}

/// Deterministic parameter set for `cfg` and `seed`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut store = ModelParams::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = Registrar {
        store: &mut store,
        rng: &mut rng,
    };
    for level in 0..=cfg.levels {
        for i in 0..cfg.encoder_blocks[level] {
            ResBlockParams::register(&mut reg, &enc_name(level, i), cfg.encoder_spec(level, i), &cfg.block)?;
        }
    }
    for level in (0..cfg.levels).rev() {
        let up = TransposedConv3dSpec::doubling(cfg.widths[level + 1], cfg.widths[level]);
        let bound = 1.0 / ((cfg.widths[level + 1] * 27) as f64).sqrt();
        reg.uniform(up_name(level), &up.weight_shape(), bound);
        for j in 0..cfg.decoder_blocks {
            let (cin, cout) = cfg.decoder_block_channels(level, j);
            ConvBlockParams::register(&mut reg, &dec_name(level, j), cin, cout, cfg.kernel, &cfg.block)?;
        }
    }
    for level in 1..=cfg.upsampling_paths {
        ConvBlockParams::register(&mut reg, &path_name(level), cfg.widths[level], cfg.widths[0], 1, &cfg.block)?;
    }
    let head = Conv3dSpec::same(cfg.widths[0], cfg.out_channels, 1);
    let bound = 1.0 / (cfg.widths[0] as f64).sqrt();
    reg.uniform("head.conv.w".into(), &head.weight_shape(), bound);
    reg.uniform("head.conv.b".into(), &[cfg.out_channels], bound);
    Ok(store)
}

/// Total number of scalar parameters.
pub fn count_params<T: Scalar>(params: &ModelParams<T>) -> usize {
    params.count()
}

/// Pre-sigmoid output `[N, out, D, H, W]`.
pub fn forward_logits<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    cfg.validate()?;
    cfg.check_input(x.shape())?;
    let full = [x.shape()[2], x.shape()[3], x.shape()[4]];

    let mut h = x.clone();
    let mut skips = Vec::with_capacity(cfg.levels);
    for level in 0..=cfg.levels {
        if level > 0 {
            h = maxpool3d(&h)?;
        }
        let expect: Vec<usize> = full.iter().map(|d| d >> level).collect();
        if h.shape()[2..] != expect[..] {
            return Err(Error::invalid(
                "forward",
                format!("encoder level {level} has extent {:?}, expected {expect:?}", &h.shape()[2..]),
            ));
        }
        for i in 0..cfg.encoder_blocks[level] {
            let p = ResBlockParams::load(params, &enc_name(level, i), cfg.encoder_spec(level, i), &cfg.block)?;
            h = res_block(&h, &p)?;
        }
        if level < cfg.levels {
            skips.push(h.clone());
        }
    }

    let mut decoded: Vec<Option<Tensor<T>>> = vec![None; cfg.levels];
    for level in (0..cfg.levels).rev() {
        let up = TransposedConv3dSpec::doubling(cfg.widths[level + 1], cfg.widths[level]);
        h = conv3d_transposed(&h, params.get(&up_name(level))?, None, &up)?;
        h = concat_channels(&h, &skips[level])?;
        for j in 0..cfg.decoder_blocks {
            let (cin, cout) = cfg.decoder_block_channels(level, j);
            let p = ConvBlockParams::load(params, &dec_name(level, j), cin, cout, cfg.kernel, &cfg.block)?;
            h = conv_block(&h, &p)?;
        }
        decoded[level] = Some(h.clone());
    }

    for (level, feats) in decoded.iter().enumerate().take(cfg.upsampling_paths + 1).skip(1) {
        let feats = feats.as_ref().expect("decoder stage ran");
        let p = ConvBlockParams::load(params, &path_name(level), cfg.widths[level], cfg.widths[0], 1, &cfg.block)?;
        let reduced = conv_block(feats, &p)?;
        h = h.add(&trilinear_resize(&reduced, full)?)?;
    }

    let head = Conv3dSpec::same(cfg.widths[0], cfg.out_channels, 1);
    conv3d(&h, params.get("head.conv.w")?, Some(params.get("head.conv.b")?), &head)
}

/// Foreground probabilities in `(0, 1)`, shape `[N, out, D, H, W]`.
pub fn forward<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward_logits(params, cfg, x)?.sigmoid())
}

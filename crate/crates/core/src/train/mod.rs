//! Training loop with Adam, cosine restarts and checkpointing.

mod adam;
mod checkpoint;
mod schedule;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, CHECKPOINT_VERSION};
pub use schedule::cosine_lr;

use crate::data::{crop_bbox, pet_zscore, stack_channels, CaseSampler, Modality, Patch, PatientCase, SamplerConfig};
use crate::error::{Error, Result};
use crate::infer::{predict_case, InferConfig};
use crate::loss::{loss_parts, LossConfig};
use crate::metrics::segmentation_metrics;
use crate::model::{build_model, forward, ModelConfig};
use crate::params::ModelParams;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to `ceil(cases / batch_size)`: one patch per case per epoch.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_epochs: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    /// Validation cadence in epochs; 0 validates only after the last epoch.
    pub val_every: usize,
    /// Periodic checkpoint cadence in epochs; 0 disables periodic files.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            steps_per_epoch: None,
            batch_size: 2,
            lr_max: 1e-3,
            lr_min: 1e-6,
            cycle_epochs: 25.0,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            val_every: 1,
            checkpoint_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be ≥ 1".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max) {
            return bad(format!("need 0 ≤ lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(self.cycle_epochs >= 1.0) {
            return bad(format!("cycle_epochs must be ≥ 1, got {}", self.cycle_epochs));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        self.loss.validate()?;
        self.sampler.validate()
    }

    pub fn lr_at(&self, epoch_fraction: f64) -> f64 {
        cosine_lr(epoch_fraction, self.lr_max, self.lr_min, self.cycle_epochs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch_fraction: f64,
    pub lr: f64,
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

impl StepRecord {
    pub const HEADER: &'static str = "step\tepoch_fraction\tlr\tdice_loss\tfocal_loss\ttotal";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.epoch_fraction, self.lr, self.dice, self.focal, self.total
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub dsc: f64,
}

/// Network input `[N, 2, D, H, W]` with channels PET (z-scored per patch)
/// and CT, plus labels `[N, 1, D, H, W]`.
pub fn batch_tensors(patches: &[Patch]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let pets = patches
        .iter()
        .map(|p| p.pet.with_data(pet_zscore(&p.pet.data), Modality::Pet))
        .collect::<Result<Vec<_>>>()?;
    let x = stack_channels(&patches.iter().zip(&pets).map(|(p, pet)| vec![pet, &p.ct]).collect::<Vec<_>>())?;
    let y = stack_channels(&patches.iter().map(|p| vec![&p.label]).collect::<Vec<_>>())?;
    Ok((x, y))
}

/// Mean DSC of thresholded predictions over the cases' bounding boxes.
pub fn validation_dsc(params: &ModelParams<f32>, cfg: &ModelConfig, cases: &[PatientCase], icfg: &InferConfig) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Data("no validation cases".into()));
    }
    let frozen = params.detached();
    let mut total = 0.0;
    for case in cases {
        let prob = predict_case(&frozen, cfg, case, icfg)?;
        let gt = crop_bbox(case)?
            .gtv
            .ok_or_else(|| Error::Data(format!("validation case {} has no GTV", case.case_id)))?;
        let mask: Vec<f32> = prob.data.iter().map(|&p| (p >= 0.5) as u8 as f32).collect();
        total += segmentation_metrics(&mask, &gt.data)?.dsc;
    }
    Ok(total / cases.len() as f64)
}

pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub infer: InferConfig,
    pub params: ModelParams<f32>,
    pub opt: OptimizerState<f32>,
    pub best_val_dsc: Option<f64>,
    pub best_params: Option<ModelParams<f32>>,
    pub log: Vec<StepRecord>,
    pub val_log: Vec<ValRecord>,
    train: Vec<(PatientCase, CaseSampler)>,
    val: Vec<PatientCase>,
    out_dir: Option<PathBuf>,
    log_file: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, train: Vec<PatientCase>, val: Vec<PatientCase>) -> Result<Self> {
        let params = build_model::<f32>(&model_cfg, derive_seed(cfg.seed, &[0]))?;
        let opt = OptimizerState::new(&params);
        Self::assemble(model_cfg, cfg, params, opt, None, train, val)
    }

    /// Continues from a checkpoint; subsequent steps match an
    /// uninterrupted run.
    pub fn resume(ckpt: Checkpoint, train: Vec<PatientCase>, val: Vec<PatientCase>) -> Result<Self> {
        Self::assemble(ckpt.model, ckpt.train, ckpt.params, ckpt.opt, ckpt.best_val_dsc, train, val)
    }

    fn assemble(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        params: ModelParams<f32>,
        opt: OptimizerState<f32>,
        best_val_dsc: Option<f64>,
        train: Vec<PatientCase>,
        val: Vec<PatientCase>,
    ) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let train = train
            .into_iter()
            .map(|c| CaseSampler::new(&c, &cfg.sampler).map(|s| (c, s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model_cfg,
            cfg,
            infer: InferConfig::default(),
            params,
            opt,
            best_val_dsc,
            best_params: None,
            log: Vec::new(),
            val_log: Vec::new(),
            train,
            val,
            out_dir: None,
            log_file: None,
        })
    }

    /// Writes checkpoints and the step log under `dir`.
    pub fn with_output_dir(mut self, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let path = dir.join("train_log.tsv");
        let fresh = self.opt.step == 0 || !path.exists();
        let mut f = BufWriter::new(
            fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)?,
        );
        if fresh {
            writeln!(f, "{}", StepRecord::HEADER)?;
        }
        self.log_file = Some(f);
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| self.train.len().div_ceil(self.cfg.batch_size))
    }

    pub fn total_steps(&self) -> u64 {
        (self.cfg.epochs * self.steps_per_epoch()) as u64
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model_cfg.clone(),
            train: self.cfg.clone(),
            params: self.params.clone(),
            opt: self.opt.clone(),
            best_val_dsc: self.best_val_dsc,
        }
    }

    /// Patches for step `s`: cases are visited in a per-epoch shuffled
    /// order and every draw has its own seed, so a step's batch depends
    /// only on `(seed, s)`.
    pub fn batch_for_step(&self, s: u64) -> Result<Vec<Patch>> {
        let spe = self.steps_per_epoch() as u64;
        let (epoch, k) = (s / spe, (s % spe) as usize);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[1, epoch])));
        (0..self.cfg.batch_size)
            .map(|b| {
                let (case, sampler) = &self.train[order[(k * self.cfg.batch_size + b) % order.len()]];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[2, s, b as u64]));
                sampler.sample(case, &mut rng)
            })
            .collect()
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let s = self.opt.step;
        let epoch_fraction = s as f64 / self.steps_per_epoch() as f64;
        let lr = self.cfg.lr_at(epoch_fraction);
        let (x, y) = batch_tensors(&self.batch_for_step(s)?)?;
        let pred = forward(&self.params, &self.model_cfg, &x)?;
        let (dice, focal) = loss_parts(&y, &pred, &self.cfg.loss)?;
        let total = dice.add(&focal)?;
        let rec = StepRecord {
            step: s + 1,
            epoch_fraction,
            lr,
            dice: dice.item() as f64,
            focal: focal.item() as f64,
            total: total.item() as f64,
        };
        if !rec.total.is_finite() {
            let note = self.save_named("diagnostic.ckpt")?;
            return Err(Error::NonFinite(format!("loss {} at step {}{note}", rec.total, s + 1)));
        }
        total.backward()?;
        if let Err(e) = adam_step(&mut self.params, &mut self.opt, lr, &self.cfg.adam) {
            let note = self.save_named("diagnostic.ckpt")?;
            return Err(match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m}{note}")),
                e => e,
            });
        }
        if let Some(f) = &mut self.log_file {
            writeln!(f, "{}", rec.to_line())?;
        }
        self.log.push(rec);
        Ok(rec)
    }

    fn save_named(&self, name: &str) -> Result<String> {
        match &self.out_dir {
            Some(dir) => {
                let p = dir.join(name);
                checkpoint_save(&self.checkpoint(), &p)?;
                Ok(format!(" (state saved to {})", p.display()))
            }
            None => Ok(String::new()),
        }
    }

    /// Validates on the held-out cases and keeps the best parameters.
    pub fn validate_now(&mut self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let dsc = validation_dsc(&self.params, &self.model_cfg, &self.val, &self.infer)?;
        let epoch = self.opt.step as usize / self.steps_per_epoch();
        self.val_log.push(ValRecord { epoch, dsc });
        info!("epoch {epoch}: validation DSC {dsc:.4}");
        if self.best_val_dsc.is_none_or(|b| dsc > b) {
            self.best_val_dsc = Some(dsc);
            self.best_params = Some(self.params.clone());
            self.save_named("best.ckpt")?;
        }
        Ok(Some(dsc))
    }

    /// Runs up to `n` steps without passing the configured end, with
    /// validation and checkpoints at epoch boundaries.
    pub fn run_steps(&mut self, n: u64) -> Result<()> {
        let end = (self.opt.step + n).min(self.total_steps());
        let spe = self.steps_per_epoch() as u64;
        while self.opt.step < end {
            let rec = self.step()?;
            if rec.step % 10 == 0 || rec.step == 1 {
                info!(
                    "step {} lr {:.3e} dice {:.4} focal {:.4} total {:.4}",
                    rec.step, rec.lr, rec.dice, rec.focal, rec.total
                );
            }
            if self.opt.step.is_multiple_of(spe) {
                let epoch = (self.opt.step / spe) as usize;
                let last = self.opt.step == self.total_steps();
                let due = self.cfg.val_every > 0 && epoch.is_multiple_of(self.cfg.val_every);
                if due || last {
                    self.validate_now()?;
                }
                if self.cfg.checkpoint_every > 0 && epoch.is_multiple_of(self.cfg.checkpoint_every) {
                    self.save_named(&format!("epoch_{epoch:04}.ckpt"))?;
                }
            }
        }
        if let Some(f) = &mut self.log_file {
            f.flush()?;
        }
        self.save_named("last.ckpt")?;
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_steps(self.total_steps().saturating_sub(self.opt.step))
    }
}

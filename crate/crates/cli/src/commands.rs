use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use seunet::checks::registry;
use seunet::data::{
    crop_bbox, generate_phantom_with, preprocess_case, read_manifest, volume_read, volume_write, write_manifest, ManifestEntry,
    Modality, PatientCase,
};
use seunet::infer::{ensemble_predict, evaluate, make_splits, predict_case, EvalCase, SplitPlan};
use seunet::seed::derive_seed;
use seunet::train::{checkpoint_load, Trainer};

use crate::config::RunConfig;
use crate::montage::export_slices;
use crate::{Cli, CliError, Command};

pub fn dispatch(cli: Cli, cfg: RunConfig) -> Result<(), CliError> {
    match cli.command {
        Command::Defaults => {
            println!("{}", cfg.to_json());
            Ok(())
        }
        Command::Phantom {
            cases,
            extent,
            lesions,
            centers,
        } => phantom(&cfg, cases, extent, lesions, centers),
        Command::Preprocess { manifest } => preprocess(&cfg, manifest),
        Command::Train {
            manifest,
            splits,
            fold,
            epochs,
            resume,
        } => train(cfg, manifest, splits, fold, epochs, resume),
        Command::Infer {
            checkpoint,
            manifest,
            png,
        } => infer(&cfg, &[checkpoint], manifest, png),
        Command::Ensemble {
            checkpoints,
            manifest,
            png,
        } => {
            let members = if checkpoints.is_empty() {
                cfg.ensemble.checkpoints.iter().map(PathBuf::from).collect()
            } else {
                checkpoints
            };
            if members.is_empty() {
                return Err(CliError::Config(
                    "ensemble needs --checkpoints or ensemble.checkpoints".into(),
                ));
            }
            infer(&cfg, &members, manifest, png)
        }
        Command::Evaluate { manifest, predictions } => evaluate_cmd(&cfg, manifest, &predictions),
        Command::Split { manifest } => split(&cfg, manifest),
        Command::Gradcheck { seeds } => gradcheck(seeds),
    }
}

fn out_dir(cfg: &RunConfig, sub: &str) -> Result<PathBuf, CliError> {
    let d = cfg.output_dir.join(sub);
    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

fn manifest_path(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.manifest.clone())
        .ok_or_else(|| CliError::Config("no manifest: pass --manifest or set `manifest`".into()))
}

fn load_cases(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<Vec<PatientCase>, CliError> {
    let path = manifest_path(cfg, flag)?;
    let entries = read_manifest(&path)?;
    if entries.is_empty() {
        return Err(CliError::Runtime(anyhow!("manifest {} lists no cases", path.display())));
    }
    let mut cases = Vec::with_capacity(entries.len());
    for e in &entries {
        let c = e.load()?;
        cases.push(preprocess_case(&c, cfg.target_spacing)?);
    }
    Ok(cases)
}

fn write_case(dir: &Path, rel: &str, case: &PatientCase) -> Result<ManifestEntry, CliError> {
    let file = |kind: &str| PathBuf::from(rel).join(format!("{}_{kind}.nii.gz", case.case_id));
    volume_write(&case.pet, dir.join(file("pet")))?;
    volume_write(&case.ct, dir.join(file("ct")))?;
    if let Some(g) = &case.gtv {
        volume_write(g, dir.join(file("gtv")))?;
    }
    Ok(ManifestEntry {
        case_id: case.case_id.clone(),
        center_id: case.center_id.clone(),
        pet: file("pet"),
        ct: file("ct"),
        gtv: case.gtv.as_ref().map(|_| file("gtv")),
        bbox: case.bbox,
    })
}

fn phantom(cfg: &RunConfig, n: usize, extent: Option<usize>, lesions: Option<usize>, centers: usize) -> Result<(), CliError> {
    if n == 0 || centers == 0 {
        return Err(CliError::Config("--cases and --centers must be positive".into()));
    }
    let mut pcfg = cfg.phantom.clone();
    if let Some(e) = extent {
        pcfg.extent = [e; 3];
    }
    if let Some(l) = lesions {
        pcfg.n_lesions = l;
    }
    if pcfg.extent.iter().any(|&e| e == 0 || e % 16 != 0) {
        return Err(CliError::Config(format!(
            "extent {:?} must be positive multiples of 16",
            pcfg.extent
        )));
    }
    out_dir(cfg, "phantoms")?;
    let base = pcfg.center_id.clone();
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % centers;
        pcfg.center_id = if centers > 1 { format!("{base}{k}") } else { base.clone() };
        let mut case = generate_phantom_with(derive_seed(cfg.train.seed, &[i as u64]), &pcfg)?;
        case.case_id = format!("case{i:03}");
        entries.push(write_case(&cfg.output_dir, "phantoms", &case)?);
    }
    let path = cfg.output_dir.join("manifest.tsv");
    write_manifest(&path, &entries)?;
    info!("wrote {n} phantom cases and {}", path.display());
    Ok(())
}

fn preprocess(cfg: &RunConfig, manifest: Option<PathBuf>) -> Result<(), CliError> {
    let cases = load_cases(cfg, manifest)?;
    out_dir(cfg, "preprocessed")?;
    let entries = cases
        .iter()
        .map(|c| write_case(&cfg.output_dir, "preprocessed", c))
        .collect::<Result<Vec<_>, _>>()?;
    let path = cfg.output_dir.join("preprocessed.tsv");
    write_manifest(&path, &entries)?;
    info!("wrote {} preprocessed cases and {}", entries.len(), path.display());
    Ok(())
}

fn read_plan(path: &Path) -> Result<SplitPlan, CliError> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn train(
    mut cfg: RunConfig,
    manifest: Option<PathBuf>,
    splits: Option<PathBuf>,
    fold: Option<String>,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
) -> Result<(), CliError> {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.validate()?;
    }
    let cases = load_cases(&cfg, manifest)?;
    let (train, val) = match (splits, &fold) {
        (Some(p), Some(name)) => {
            let plan = read_plan(&p)?;
            let f = plan
                .folds
                .iter()
                .find(|f| &f.name == name)
                .ok_or_else(|| CliError::Config(format!("fold `{name}` not in {}", p.display())))?;
            let pick = |ids: &[String]| cases.iter().filter(|c| ids.contains(&c.case_id)).cloned().collect::<Vec<_>>();
            (pick(&f.train), pick(&f.val))
        }
        _ => (cases, Vec::new()),
    };
    let dir = match &fold {
        Some(f) => out_dir(&cfg, &format!("train_{f}"))?,
        None => out_dir(&cfg, "train")?,
    };
    fs::write(dir.join("config.json"), cfg.to_json())?;
    let mut trainer = match resume {
        Some(p) => {
            let mut ck = checkpoint_load(&p, Some(&cfg.model))?;
            ck.train.epochs = cfg.train.epochs;
            Trainer::resume(ck, train, val)?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), train, val)?,
    };
    trainer.infer = cfg.infer.clone();
    let mut trainer = trainer.with_output_dir(&dir)?;
    info!(
        "training {} steps ({} per epoch)",
        trainer.total_steps(),
        trainer.steps_per_epoch()
    );
    trainer.run()?;
    if let Some(r) = trainer.log.last() {
        info!("finished at step {} with loss {:.4}", r.step, r.total);
    }
    Ok(())
}

fn infer(cfg: &RunConfig, checkpoints: &[PathBuf], manifest: Option<PathBuf>, png: bool) -> Result<(), CliError> {
    let members = checkpoints
        .iter()
        .map(|p| checkpoint_load(p, None).map(|c| (c.model, c.params.detached())))
        .collect::<Result<Vec<_>, _>>()?;
    let cases = load_cases(cfg, manifest)?;
    let dir = out_dir(cfg, "predictions")?;
    for case in &cases {
        let (prob, mask) = if members.len() == 1 {
            let (m, p) = &members[0];
            let prob = predict_case(p, m, case, &cfg.infer)?;
            let t = cfg.ensemble.threshold;
            let data = prob.data.iter().map(|&v| (v as f64 >= t) as u8 as f32).collect();
            let mask = prob.with_data(data, Modality::Mask)?;
            (prob, mask)
        } else {
            let out = ensemble_predict(&members, case, &cfg.ensemble, &cfg.infer)?;
            (out.probability, out.mask)
        };
        volume_write(&prob, dir.join(format!("{}_prob.nii.gz", case.case_id)))?;
        volume_write(&mask, dir.join(format!("{}_mask.nii.gz", case.case_id)))?;
        if png {
            let underlay = crop_bbox(case)?.ct;
            export_slices(&mask, &underlay, &dir.join(format!("{}.png", case.case_id)))?;
        }
        info!("{}: {} foreground voxels", case.case_id, mask.count_nonzero());
    }
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, manifest: Option<PathBuf>, predictions: &Path) -> Result<(), CliError> {
    let cases = load_cases(cfg, manifest)?;
    let mut preds = Vec::with_capacity(cases.len());
    let mut gts = Vec::with_capacity(cases.len());
    for c in &cases {
        let p = predictions.join(format!("{}_mask.nii.gz", c.case_id));
        preds.push(volume_read(&p).with_context(|| format!("prediction for {}", c.case_id))?);
        gts.push(crop_bbox(c)?.gtv);
    }
    let items: Vec<EvalCase<'_>> = cases
        .iter()
        .zip(&preds)
        .zip(&gts)
        .map(|((c, p), g)| EvalCase {
            case_id: &c.case_id,
            center_id: &c.center_id,
            pred: p,
            gt: g.as_ref(),
        })
        .collect();
    let report = evaluate(&items)?;
    let text = report.to_text();
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("evaluation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn split(cfg: &RunConfig, manifest: Option<PathBuf>) -> Result<(), CliError> {
    let path = manifest_path(cfg, manifest)?;
    let ids: Vec<(String, String)> = read_manifest(&path)?.into_iter().map(|e| (e.case_id, e.center_id)).collect();
    let s = &cfg.split;
    let plan = make_splits(&ids, s.kind, s.n_random_folds, s.val_fraction, cfg.train.seed)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let out = cfg.output_dir.join("splits.json");
    fs::write(&out, serde_json::to_string_pretty(&plan).map_err(anyhow::Error::from)?)?;
    for f in &plan.folds {
        println!("fold {} train={} val={}", f.name, f.train.len(), f.val.len());
    }
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let mut failed = Vec::new();
    for check in registry() {
        let mut worst = 0f64;
        for seed in 0..seeds {
            let o = check.run(seed)?;
            worst = worst.max(o.max_rel_error);
            if !o.passed {
                failed.push(format!("{} (seed {seed})", o.name));
            }
        }
        let verdict = if worst < check.tolerance { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<26} max_rel_error={worst:.3e} tolerance={:.0e}",
            check.name, check.tolerance
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("gradient checks failed: {}", failed.join(", "))))
    }
}

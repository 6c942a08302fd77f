//! End-to-end runs of the `seunet` binary.

use std::path::Path;
use std::process::{Command, Output};

use seunet::data::{Modality, Volume};
use seunet_cli::{render_slices, RunConfig};

fn seunet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seunet"))
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn tiny_config(path: &Path) {
    let mut cfg = RunConfig {
        model: seunet::ModelConfig::tiny(),
        ..Default::default()
    };
    cfg.train.epochs = 1;
    cfg.train.batch_size = 1;
    cfg.train.sampler.patch = [16; 3];
    cfg.train.val_every = 1;
    cfg.infer.tile = [48; 3];
    cfg.infer.stride = [32; 3];
    std::fs::write(path, cfg.to_json()).unwrap();
}

#[test]
fn phantom_train_infer_evaluate() {
    let work = tempfile::tempdir().unwrap();
    let cfg_dir = tempfile::tempdir().unwrap();
    let conf = cfg_dir.path().join("tiny.json");
    tiny_config(&conf);
    let conf = conf.to_str().unwrap();
    let w = work.path();

    ok(&seunet(
        w,
        &[
            "phantom",
            "--seed",
            "7",
            "--cases",
            "4",
            "--extent",
            "48",
            "--centers",
            "2",
            "--out",
            "out",
        ],
    ));
    let manifest = "out/manifest.tsv";
    assert!(w.join(manifest).exists());

    let split = ok(&seunet(
        w,
        &["split", "--config", conf, "--manifest", manifest, "--out", "out"],
    ));
    assert_eq!(split.lines().count(), 2, "{split}");

    ok(&seunet(
        w,
        &[
            "train",
            "--config",
            conf,
            "--seed",
            "3",
            "--manifest",
            manifest,
            "--splits",
            "out/splits.json",
            "--fold",
            "PHANTOM0",
            "--out",
            "out",
        ],
    ));
    let ckpt = "out/train_PHANTOM0/last.ckpt";
    assert!(w.join(ckpt).exists());
    assert!(w.join("out/train_PHANTOM0/best.ckpt").exists());
    let log = std::fs::read_to_string(w.join("out/train_PHANTOM0/train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(&seunet(
        w,
        &[
            "infer",
            "--config",
            conf,
            "--checkpoint",
            ckpt,
            "--manifest",
            manifest,
            "--png",
            "--out",
            "out",
        ],
    ));
    assert!(w.join("out/predictions/case000_mask.nii.gz").exists());
    assert!(w.join("out/predictions/case003.png").exists());
    let first = std::fs::read(w.join("out/predictions/case001.png")).unwrap();
    let mask = std::fs::read(w.join("out/predictions/case001_mask.nii.gz")).unwrap();

    let report = ok(&seunet(
        w,
        &[
            "evaluate",
            "--config",
            conf,
            "--manifest",
            manifest,
            "--predictions",
            "out/predictions",
            "--out",
            "out",
        ],
    ));
    assert_eq!(report.lines().filter(|l| l.starts_with("case=")).count(), 4);
    assert!(report.contains("center=PHANTOM0") && report.contains("center=PHANTOM1"));
    assert!(report.lines().any(|l| l.starts_with("average dsc=")));

    // Re-running with the same inputs reproduces the outputs byte for byte.
    ok(&seunet(
        w,
        &[
            "infer",
            "--config",
            conf,
            "--checkpoint",
            ckpt,
            "--manifest",
            manifest,
            "--png",
            "--out",
            "out",
        ],
    ));
    assert_eq!(std::fs::read(w.join("out/predictions/case001.png")).unwrap(), first);
    assert_eq!(std::fs::read(w.join("out/predictions/case001_mask.nii.gz")).unwrap(), mask);

    ok(&seunet(
        w,
        &[
            "ensemble",
            "--config",
            conf,
            "--checkpoints",
            ckpt,
            ckpt,
            "--manifest",
            manifest,
            "--out",
            "ens",
        ],
    ));
    assert_eq!(std::fs::read(w.join("ens/predictions/case001_mask.nii.gz")).unwrap(), mask);

    let mut top: Vec<_> = std::fs::read_dir(w)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, vec!["ens", "out"]);
}

#[test]
fn preprocess_writes_isotropic_cases() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    ok(&seunet(
        w,
        &["phantom", "--seed", "1", "--cases", "2", "--extent", "32", "--out", "raw"],
    ));
    ok(&seunet(w, &["preprocess", "--manifest", "raw/manifest.tsv", "--out", "pre"]));
    let entries = seunet::data::read_manifest(w.join("pre/preprocessed.tsv")).unwrap();
    assert_eq!(entries.len(), 2);
    let case = entries[0].load().unwrap();
    assert_eq!(case.pet.spacing, [1.0; 3]);
    assert!(case.ct.normalized);
}

#[test]
fn defaults_round_trip() {
    let work = tempfile::tempdir().unwrap();
    let text = ok(&seunet(work.path(), &["defaults"]));
    assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    std::fs::write(work.path().join("d.json"), &text).unwrap();
    assert_eq!(ok(&seunet(work.path(), &["defaults", "--config", "d.json"])), text);
}

#[test]
fn exit_codes() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    assert_eq!(seunet(w, &["frobnicate"]).status.code(), Some(2));

    std::fs::write(w.join("bad.json"), r#"{"train": {"epochs": 3, "learning_rate": 1}}"#).unwrap();
    let o = seunet(w, &["defaults", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));

    std::fs::write(w.join("lr.json"), r#"{"train": {"lr_min": 0.1}}"#).unwrap();
    assert_eq!(seunet(w, &["defaults", "--config", "lr.json"]).status.code(), Some(3));

    let o = seunet(w, &["evaluate", "--manifest", "missing.tsv", "--predictions", "p"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[runtime]"));
    assert!(!w.join("runs").exists());
}

#[test]
fn gradcheck_passes() {
    let work = tempfile::tempdir().unwrap();
    let out = ok(&seunet(work.path(), &["gradcheck", "--seeds", "1"]));
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 17, "{out}");
}

fn vol(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32, m: Modality) -> Volume {
    let mut data = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                data.push(f(x, y, z));
            }
        }
    }
    Volume::new(data, dims, [1.0; 3], m).unwrap()
}

#[test]
fn slice_montages() {
    let dims = [8, 6, 9];
    let under = vol(dims, |x, y, z| (x + y + z) as f32, Modality::Ct);
    let empty = vol(dims, |_, _, _| 0.0, Modality::Mask);
    let full = vol(dims, |_, _, _| 1.0, Modality::Mask);

    let a = render_slices(&empty, &under).unwrap();
    assert_eq!(a.dimensions(), (24, 6));
    assert!(a.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));

    let b = render_slices(&full, &under).unwrap();
    let red = |x: u32, y: u32| b.get_pixel(x, y).0 == [255, 32, 32];
    for panel in 0..3 {
        let x0 = panel * 8;
        for x in x0..x0 + 8 {
            assert!(red(x, 0) && red(x, 5));
        }
        for y in 0..6 {
            assert!(red(x0, y) && red(x0 + 7, y));
        }
        assert!(!red(x0 + 3, 3));
    }

    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.png"), dir.path().join("b.png"));
    seunet_cli::export_slices(&full, &under, &p).unwrap();
    seunet_cli::export_slices(&full, &under, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());

    let other = vol([8, 6, 8], |_, _, _| 0.0, Modality::Mask);
    assert!(render_slices(&other, &under).is_err());
}

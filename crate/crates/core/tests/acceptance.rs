//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{dot, normal, probe, rng};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seunet::data::*;
use seunet::infer::*;
use seunet::senorm::{normalize, se_block, SeActivation, SeBlockParams, SeNormParams};
use seunet::train::*;
use seunet::volumetric::*;
use seunet::*;

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let reg = seunet::checks::registry();
    let mut worst_op = 0f64;
    let mut worst_net = 0f64;
    for check in &reg {
        for seed in 0..20 {
            let o = check.run(seed).map_err(|e| format!("{} seed {seed}: {e}", check.name))?;
            ensure(
                o.passed,
                format!(
                    "{} seed {seed}: rel err {:.3e} ≥ {:.0e}",
                    o.name, o.max_rel_error, o.tolerance
                ),
            )?;
            if check.name == "network_tiny" {
                worst_net = worst_net.max(o.max_rel_error);
            } else {
                worst_op = worst_op.max(o.max_rel_error);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 300.0, format!("took {secs:.0} s"))?;
    Ok(format!(
        "{} checks × 20 seeds, worst op {worst_op:.1e} (< 1e-6), network {worst_net:.1e} (< 1e-3), {secs:.0} s",
        reg.len()
    ))
}

fn random_conv_spec(r: &mut ChaCha8Rng) -> (Conv3dSpec, [usize; 3], usize) {
    loop {
        let k = [1, 3][r.random_range(0..2)];
        let spec = Conv3dSpec {
            in_channels: r.random_range(1..=3),
            out_channels: r.random_range(1..=3),
            kernel: [k, [1, 3][r.random_range(0..2)], k],
            stride: [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=2)],
            padding: [r.random_range(0..=k / 2), 0, r.random_range(0..=k / 2)],
            has_bias: r.random_bool(0.5),
        };
        let dims = [r.random_range(1..=7), r.random_range(1..=7), r.random_range(1..=7)];
        if spec.output_dims(dims).is_ok() {
            return (spec, dims, r.random_range(1..=2));
        }
    }
}

fn kernels() -> Outcome {
    let mut r = rng(31);
    let mut worst = 0f64;
    for _ in 0..30 {
        let (spec, d, n) = random_conv_spec(&mut r);
        let x = normal(&mut r, &[n, spec.in_channels, d[0], d[1], d[2]]);
        let w = normal(&mut r, &spec.weight_shape());
        let b = spec.has_bias.then(|| normal(&mut r, &[spec.out_channels]));
        let fast = conv3d(&x, &w, b.as_ref(), &spec).map_err(|e| e.to_string())?;
        let slow = conv3d_naive(&x, &w, b.as_ref(), &spec).map_err(|e| e.to_string())?;
        ensure(fast.shape() == slow.shape(), "shape mismatch")?;
        worst = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    ensure(worst < 1e-10, format!("conv vs naive max err {worst:.2e}"))?;
    let mut adj = 0f64;
    for _ in 0..30 {
        let (mut spec, d, n) = random_conv_spec(&mut r);
        spec.has_bias = false;
        let shape = [n, spec.in_channels, d[0], d[1], d[2]];
        let x = Tensor::param(normal(&mut r, &shape).to_vec(), &shape).unwrap();
        let w = normal(&mut r, &spec.weight_shape());
        let cx = conv3d(&x, &w, None, &spec).unwrap();
        let y = normal(&mut r, cx.shape());
        let lhs = dot(cx.data(), y.data());
        probe(&cx, &y).unwrap().backward().unwrap();
        let rhs = dot(x.data(), &x.grad().unwrap());
        adj = adj.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    ensure(adj < 1e-8, format!("adjoint error {adj:.2e}"))?;
    Ok(format!("30 specs max err {worst:.1e} (< 1e-10); adjoint {adj:.1e} (< 1e-8)"))
}

fn se_norm_stats() -> Outcome {
    let mut r = rng(33);
    let (mut worst_mean, mut worst_std) = (0f64, 0f64);
    let (mut g_lo, mut g_hi, mut b_abs) = (1f64, 0f64, 0f64);
    for _ in 0..20 {
        let x = normal(&mut r, &[2, 4, 5, 6, 7])
            .scale(r.random_range(0.5..10.0))
            .add_scalar(r.random_range(-20.0..20.0));
        let y = normalize(&x, 1e-5).unwrap();
        let vox = 5 * 6 * 7;
        for ch in y.data().chunks(vox) {
            let m = ch.iter().sum::<f64>() / vox as f64;
            let s = (ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vox as f64).sqrt();
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((s - 1.0).abs());
        }
        let block = |r: &mut ChaCha8Rng, act| SeBlockParams {
            w1: normal(r, &[2, 4]),
            b1: normal(r, &[2]),
            w2: normal(r, &[4, 2]),
            b2: normal(r, &[4]),
            activation: act,
        };
        let u = normal(&mut r, &[2, 4, 5, 6, 7]);
        let g = se_block(&u, &block(&mut r, SeActivation::Sigmoid)).unwrap();
        let b = se_block(&u, &block(&mut r, SeActivation::Tanh)).unwrap();
        g_lo = g.data().iter().cloned().fold(g_lo, f64::min);
        g_hi = g.data().iter().cloned().fold(g_hi, f64::max);
        b_abs = b.data().iter().map(|v| v.abs()).fold(b_abs, f64::max);
    }
    ensure(
        worst_mean < 1e-5 && worst_std < 1e-3,
        format!("mean {worst_mean:.1e}, std dev {worst_std:.1e}"),
    )?;
    ensure(
        g_lo > 0.0 && g_hi < 1.0 && b_abs < 1.0,
        format!("γ in [{g_lo}, {g_hi}], |β| ≤ {b_abs}"),
    )?;
    let x = normal(&mut r, &[1, 4, 3, 3, 3]).scale(100.0);
    let z = SeNormParams::<f64>::zeros(4, 2).unwrap();
    let g0 = se_block(&x, &z.gamma).unwrap();
    let b0 = se_block(&x, &z.beta).unwrap();
    ensure(
        g0.data().iter().all(|&v| v == 0.5) && b0.data().iter().all(|&v| v == 0.0),
        "zero blocks not exactly 0.5 / 0",
    )?;
    Ok(format!(
        "|mean| ≤ {worst_mean:.1e}, |std−1| ≤ {worst_std:.1e}, γ ∈ [{g_lo:.3}, {g_hi:.3}], |β| ≤ {b_abs:.3}, zero blocks exact"
    ))
}

fn losses() -> Outcome {
    let t = |v: &[f64]| Tensor::new(v.to_vec(), &[v.len()]).unwrap();
    let empty = soft_dice_loss(&t(&[0.0, 0.0, 0.0]), &t(&[0.0, 0.0, 0.0])).unwrap().item();
    let one = soft_dice_loss(&t(&[1.0]), &t(&[0.0])).unwrap().item();
    let focal = focal_loss(&t(&[1.0]), &t(&[0.5]), &LossConfig::default()).unwrap().item();
    ensure(empty == 0.0, format!("empty dice {empty}"))?;
    ensure(one == 0.5, format!("single voxel dice {one}"))?;
    ensure((focal - 0.173287).abs() <= 1e-6, format!("focal {focal}"))?;
    Ok(format!("dice(∅) = {empty}, dice(1, 0) = {one}, focal(1, 0.5) = {focal:.6}"))
}

fn schedule() -> Outcome {
    let lr = |t| cosine_lr(t, 1e-3, 1e-6, 25.0);
    let checks = [
        (lr(0.0), 1e-3),
        (lr(12.5), 5.005e-4),
        (lr(25.0 - 1e-9), 1e-6),
        (lr(25.0), 1e-3),
        (lr(37.5), 5.005e-4),
    ];
    for (i, (got, want)) in checks.iter().enumerate() {
        ensure((got - want).abs() <= 1e-12, format!("check {i}: {got:e} vs {want:e}"))?;
    }
    Ok("1e-3 at 0, 5.005e-4 at 12.5, → 1e-6 at 25⁻, 1e-3 at 25".into())
}

fn overfit() -> Outcome {
    let t0 = Instant::now();
    let cfg = PhantomConfig {
        extent: [48; 3],
        spacing: [1.0; 3],
        n_lesions: 1,
        ..Default::default()
    };
    let case = preprocess_case(&generate_phantom_with(3, &cfg).unwrap(), 1.0).unwrap();
    let tcfg = TrainConfig {
        epochs: 200,
        batch_size: 2,
        lr_max: 3e-3,
        cycle_epochs: 200.0,
        sampler: SamplerConfig {
            patch: [32; 3],
            ..Default::default()
        },
        val_every: 0,
        checkpoint_every: 0,
        ..Default::default()
    };
    let mut t = Trainer::new(ModelConfig::tiny(), tcfg, vec![case.clone()], vec![case]).map_err(|e| e.to_string())?;
    ensure(t.total_steps() == 200, format!("{} steps", t.total_steps()))?;
    t.run().map_err(|e| e.to_string())?;
    let first = t.log[0].total;
    let last = t.log.last().unwrap().total;
    let drop = 1.0 - last / first;
    let dsc = t.val_log.last().map(|v| v.dsc).ok_or("no validation")?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        drop >= 0.8,
        format!("loss {first:.4} → {last:.4} ({:.0}% drop)", drop * 100.0),
    )?;
    ensure(dsc > 0.9, format!("val DSC {dsc:.4}"))?;
    ensure(secs < 900.0, format!("took {secs:.0} s"))?;
    Ok(format!(
        "loss {first:.4} → {last:.4} ({:.1}% drop), val DSC {dsc:.4}, {secs:.0} s",
        drop * 100.0
    ))
}

fn ensemble() -> Outcome {
    let v = |d: &[f32]| Volume::new(d.to_vec(), [d.len(), 1, 1], [1.0; 3], Modality::Pet).unwrap();
    let ecfg = EnsembleConfig::default();
    let hand = combine_members(&[v(&[0.6]), v(&[0.3])], &ecfg).unwrap();
    ensure(
        (hand.probability.data[0] - 0.45).abs() < 1e-7 && hand.mask.data[0] == 0.0,
        "hand case",
    )?;

    let cfg = PhantomConfig {
        extent: [32; 3],
        spacing: [1.0; 3],
        ..Default::default()
    };
    let case = preprocess_case(&generate_phantom_with(1, &cfg).unwrap(), 1.0).unwrap();
    let icfg = InferConfig::default();
    let member = |s| (ModelConfig::tiny(), build_model::<f32>(&ModelConfig::tiny(), s).unwrap());
    let single = predict_case(&member(1).1, &ModelConfig::tiny(), &case, &icfg).unwrap();
    let same = ensemble_predict(&vec![member(1); 8], &case, &ecfg, &icfg).unwrap();
    ensure(
        same.probability.data == single.data,
        "identical members differ from the single model",
    )?;
    let members: Vec<_> = (0..8).map(member).collect();
    let a = ensemble_predict(&members, &case, &ecfg, &icfg).unwrap();
    let mut shuffled = members.clone();
    shuffled.swap(0, 7);
    shuffled.swap(2, 5);
    shuffled.reverse();
    let b = ensemble_predict(&shuffled, &case, &ecfg, &icfg).unwrap();
    ensure(a == b, "member order changed the result")?;
    Ok("(0.6, 0.3) → 0.45 → 0; 8 identical members bit-exact; 8-member permutation bit-exact".into())
}

fn table_average() -> Outcome {
    let rows: Vec<MetricsReport> = [0.744, 0.739, 0.801, 0.696]
        .iter()
        .map(|&d| MetricsReport {
            dsc: d,
            precision: d,
            recall: d,
        })
        .collect();
    let avg = average_rows(&rows).unwrap().dsc;
    ensure((avg - 0.745).abs() <= 5e-4, format!("{avg}"))?;
    Ok(format!("mean of center rows = {avg:.4}"))
}

fn pipeline() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let case = generate_phantom(12, 48, 2).unwrap();
    for (name, v) in [
        ("p.nii.gz", &case.pet),
        ("c.nii", &case.ct),
        ("g.nii.gz", case.gtv.as_ref().unwrap()),
    ] {
        let path = dir.path().join(name);
        volume_write(v, &path).unwrap();
        let back = volume_read(&path).unwrap();
        let same = back.dims == v.dims && back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("{name} round trip differs"))?;
    }
    let iso = preprocess_case(&case, 1.0).unwrap();
    for v in [&iso.pet, &iso.ct, iso.gtv.as_ref().unwrap()] {
        ensure(&resample_isotropic(v, 1.0).unwrap() == v, "1 mm resample is not the identity")?;
    }
    ensure(
        iso.gtv.as_ref().unwrap().data.iter().all(|&v| v == 0.0 || v == 1.0),
        "mask not binary after resampling",
    )?;

    let mut cases = Vec::new();
    for (k, center) in ["A", "B", "C", "D"].iter().enumerate() {
        for i in 0..3 {
            let pc = PhantomConfig {
                extent: [16; 3],
                center_id: center.to_string(),
                ..Default::default()
            };
            let c = generate_phantom_with((10 * k + i) as u64, &pc).unwrap();
            cases.push((c.case_id, c.center_id));
        }
    }
    let plan = make_splits(&cases, FoldKind::LeaveOneCenterOut, 0, 0.2, 0).unwrap();
    let mut covered = BTreeSet::new();
    for f in &plan.folds {
        let val: BTreeSet<_> = f.val.iter().collect();
        ensure(f.train.iter().all(|c| !val.contains(c)), "train/val leakage")?;
        ensure(f.train.len() + f.val.len() == cases.len(), "fold does not cover the set")?;
        for v in &f.val {
            ensure(covered.insert(v.clone()), "case in two validation folds")?;
        }
    }
    ensure(
        plan.folds.len() == 4 && covered.len() == cases.len(),
        "LOCO folds do not partition",
    )?;

    let small = preprocess_case(
        &generate_phantom_with(
            2,
            &PhantomConfig {
                extent: [32; 3],
                ..Default::default()
            },
        )
        .unwrap(),
        1.0,
    )
    .unwrap();
    let tcfg = TrainConfig {
        epochs: 4,
        batch_size: 1,
        cycle_epochs: 2.0,
        seed: 5,
        sampler: SamplerConfig {
            patch: [16; 3],
            ..Default::default()
        },
        val_every: 0,
        checkpoint_every: 0,
        ..Default::default()
    };
    let mut full = Trainer::new(ModelConfig::tiny(), tcfg.clone(), vec![small.clone()], vec![]).unwrap();
    full.run().unwrap();
    let mut head = Trainer::new(ModelConfig::tiny(), tcfg, vec![small.clone()], vec![])
        .unwrap()
        .with_output_dir(dir.path())
        .unwrap();
    head.run_steps(2).unwrap();
    let ckpt = checkpoint_load(dir.path().join("last.ckpt"), Some(&ModelConfig::tiny())).unwrap();
    let mut tail = Trainer::resume(ckpt, vec![small], vec![]).unwrap();
    tail.run().unwrap();
    let bits = |p: &ModelParams<f32>| {
        p.iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    ensure(
        bits(&full.params) == bits(&tail.params) && full.opt == tail.opt,
        "resumed run differs",
    )?;
    Ok("NIfTI bit-exact, 1 mm identity, binary masks, 4 LOCO folds partition, resume bit-identical".into())
}

fn sampler_bias() -> Outcome {
    // A 3³ tumour in the corner of a 96³ volume: uniform windows almost
    // never contain it.
    let dims = [96; 3];
    let pet = Volume::filled(dims, [1.0; 3], Modality::Pet, 1.0).unwrap();
    let ct = Volume::filled(dims, [1.0; 3], Modality::Ct, 0.0).unwrap();
    let mut gtv = Volume::filled(dims, [1.0; 3], Modality::Mask, 0.0).unwrap();
    for z in 2..5 {
        for y in 2..5 {
            for x in 2..5 {
                let i = gtv.index(x, y, z);
                gtv.data[i] = 1.0;
            }
        }
    }
    let case = PatientCase {
        case_id: "corner".into(),
        center_id: "X".into(),
        pet,
        ct,
        gtv: Some(gtv),
        bbox: BBox::full(dims),
    };
    let cfg = SamplerConfig {
        patch: [32; 3],
        ..Default::default()
    };
    let sampler = CaseSampler::new(&case, &cfg).unwrap();
    let uniform = sampler.n_tumor_windows() as f64 / sampler.n_windows() as f64;
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let hits = (0..1000)
        .filter(|_| sampler.sample(&case, &mut r).unwrap().has_tumor())
        .count();
    let frac = hits as f64 / 1000.0;
    ensure((0.87..=0.95).contains(&frac), format!("fraction {frac}"))?;
    Ok(format!("{hits}/1000 tumour patches ({frac:.3}); uniform rate {uniform:.1e}"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradients),
        ("kernel oracle equivalence", kernels),
        ("SE Norm statistics", se_norm_stats),
        ("loss unit values", losses),
        ("cosine schedule", schedule),
        ("end-to-end overfit", overfit),
        ("ensemble semantics", ensemble),
        ("center-row averaging", table_average),
        ("pipeline integrity", pipeline),
        ("sampler bias", sampler_bias),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{secs:.1} s]", i + 1)
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

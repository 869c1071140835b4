//! Acceptance criteria. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any fails. Each criterion also has a wall-clock limit.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepback_autodiff::{grad, no_grad, Var};
use stepback_core::convert::Converter;
use stepback_core::dataset::FeatureStore;
use stepback_core::evaluation::{global_variance, heatmap_image, render_heatmap, ConversionKind};
use stepback_core::features::Spectrogram;
use stepback_core::losses::{
    classifier_loss, conversion_identity_loss, reconstruction_loss, stepback_loss, Loss,
};
use stepback_core::model::{batch_input, Bound, Mode, Model, ModelConfig, ParamStore};
use stepback_core::trainer::{lambda_schedule, training_budget, TrainStage, Trainer, TrainingConfig};

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > limit => Err(format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
}

fn budget_identity() -> Outcome {
    let b = training_budget(&TrainingConfig::paper());
    check(b == 548_000, format!("budget {b}"))?;
    Ok("paper schedule = 548000 mini-batches".into())
}

fn lambda_ramp() -> Outcome {
    let cfg = TrainingConfig::paper();
    let got = [
        lambda_schedule(0, &cfg),
        lambda_schedule(18_000, &cfg),
        lambda_schedule(36_000, &cfg),
    ];
    check(got == [0.0, 0.0005, 0.001], format!("{got:?}"))?;
    Ok("λ(0)=0, λ(18000)=0.0005, λ(36000)=0.001 exactly".into())
}

fn loss_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_mae = 0.0f64;
    for _ in 0..100 {
        let y = Array3::from_shape_fn((2, 4, 4), |_| rng.random_range(-5.0f64..5.0));
        let x = Array3::from_shape_fn((2, 4, 4), |_| rng.random_range(-5.0f64..5.0));
        let mut acc = 0.0f64;
        for ((b, f), t) in (0..2).flat_map(|b| (0..4).map(move |f| (b, f))).flat_map(|bf| (0..4).map(move |t| (bf, t))) {
            acc += (y[[b, f, t]] - x[[b, f, t]]).abs();
        }
        let got = reconstruction_loss(&batch_input(y), &batch_input(x))
            .map_err(|e| e.to_string())?
            .value
            .value;
        worst_mae = worst_mae.max((got - acc / 32.0).abs());
    }
    check(worst_mae <= 1e-9, format!("MAE oracle error {worst_mae:e}"))?;

    let uniform = Var::constant(ArrayD::from_elem(IxDyn(&[4, 20]), (1.0f64 / 20.0).ln()));
    let labels = [0, 7, 13, 19];
    let clf = classifier_loss(&uniform, &labels).map_err(|e| e.to_string())?.value.value;
    let low = conversion_identity_loss(&uniform, &labels).map_err(|e| e.to_string())?.value.value;
    let target = 20f64.ln();
    check(
        (clf - target).abs() <= 1e-6 && (low - target).abs() <= 1e-6,
        format!("uniform NLL {clf} / {low}, expected {target}"),
    )?;

    let mut inexact = 0;
    for _ in 0..1000 {
        let a = rng.random_range(0.0..100.0);
        let b = rng.random_range(0.1..100.0);
        let lambda = rng.random_range(0.0..=0.001);
        let l = stepback_loss(
            &Loss::single("l_upp", Var::scalar(a)),
            &Loss::single("l_low", Var::scalar(b)),
            lambda,
        )
        .map_err(|e| e.to_string())?;
        if l.value.value + lambda * a - b != 0.0 {
            inexact += 1;
        }
    }
    check(inexact == 0, format!("{inexact} of 1000 stepback triples not exact"))?;
    Ok(format!(
        "MAE max err {worst_mae:.1e}; uniform NLL = ln 20; 1000/1000 stepback identities exact"
    ))
}

/// Gradients below this norm are treated as zero. A bias feeding an instance
/// norm has an exactly zero gradient, which both methods only see as noise.
const ZERO_GRAD: f64 = 1e-7;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` of one tensor's gradient; `None`
/// when both vanish.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> Option<f64> {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    (scale >= ZERO_GRAD).then(|| diff / scale)
}

/// Worst per-tensor relative error of one loss: `(error, tensor, zero-gradient tensors)`.
struct TensorReport {
    worst: f64,
    tensor: String,
    zero: usize,
}

/// Compares the analytic gradients of each output of `losses` with central
/// differences on every entry of every trainable tensor. One perturbation
/// sweep serves all outputs.
fn gradient_check(
    store: &ParamStore,
    trainable: &[&str],
    losses: &dyn Fn(&Bound) -> Vec<Var>,
) -> std::result::Result<(Vec<TensorReport>, usize), String> {
    let bound = store.bind(trainable);
    let (names, vars) = bound.trainable();
    let grads: Vec<Vec<Var>> = losses(&bound).iter().map(|l| grad(l, &vars, false)).collect();
    let mut reports: Vec<TensorReport> = grads
        .iter()
        .map(|_| TensorReport { worst: 0.0, tensor: String::new(), zero: 0 })
        .collect();
    let eps = 1e-6;
    let mut count = 0;
    let mut work = store.clone();
    let _g = no_grad();
    for (t, name) in names.iter().enumerate() {
        let n = work.get(name).map_err(|e| e.to_string())?.len();
        let mut numeric = vec![vec![0.0; n]; grads.len()];
        for k in 0..n {
            let orig = work.get(name).unwrap().as_slice().unwrap()[k];
            work.get_mut(name).unwrap().as_slice_mut().unwrap()[k] = orig + eps;
            let up = losses(&work.bind(&[]));
            work.get_mut(name).unwrap().as_slice_mut().unwrap()[k] = orig - eps;
            let down = losses(&work.bind(&[]));
            work.get_mut(name).unwrap().as_slice_mut().unwrap()[k] = orig;
            for (o, (u, d)) in up.iter().zip(&down).enumerate() {
                numeric[o][k] = (u.item() - d.item()) / (2.0 * eps);
            }
        }
        count += n;
        for (o, r) in reports.iter_mut().enumerate() {
            let analytic: Vec<f64> = grads[o][t].value().iter().copied().collect();
            match rel_err(&analytic, &numeric[o]) {
                None => r.zero += 1,
                Some(e) if e > r.worst => {
                    r.worst = e;
                    r.tensor = name.clone();
                }
                Some(_) => {}
            }
        }
    }
    Ok((reports, count))
}

fn tiny_setup() -> (Model, ParamStore, Var, Vec<usize>, Vec<usize>) {
    let model = Model::new(ModelConfig::tiny(), 8, 2).unwrap();
    let store = model.init_params(&mut ChaCha8Rng::seed_from_u64(5));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = batch_input(Array3::from_shape_fn((2, 8, 16), |_| rng.random_range(-2.0..2.0)));
    (model, store, x, vec![0, 1], vec![1, 0])
}

fn gradient_checks() -> Outcome {
    let (model, store, x, src, dst) = tiny_setup();
    let lambda = 0.001;
    // Dropout masks are redrawn from the same seed at every evaluation.
    let train = || ChaCha8Rng::seed_from_u64(77);
    let l_clf = |p: &Bound| {
        let mut r = train();
        let lp = model.classify(p, &x, &mut Mode::Train(&mut r)).unwrap();
        vec![classifier_loss(&lp, &src).unwrap().total]
    };
    // L_upp is L_pre: same input, same speaker, same dropout masks.
    let parts = |p: &Bound| {
        let mut r = train();
        let mut mode = Mode::Train(&mut r);
        let z = model.encode(p, &x, &mut mode).unwrap();
        let y = model.decode(p, &z, &src, &mut mode).unwrap();
        let y2 = model.decode(p, &z, &dst, &mut mode).unwrap();
        let upp = reconstruction_loss(&y, &x).unwrap();
        let lp = model.classify(p, &y2, &mut Mode::Eval).unwrap();
        let low = conversion_identity_loss(&lp, &dst).unwrap();
        (upp, low)
    };
    let generator = |p: &Bound| {
        let (upp, low) = parts(p);
        let back = stepback_loss(&upp, &low, lambda).unwrap().total;
        vec![upp.total, low.total, back]
    };

    let mut summary = Vec::new();
    let mut total = 0;
    let mut zero = 0;
    let sweeps: [(&[&str], &[&str], &dyn Fn(&Bound) -> Vec<Var>); 2] = [
        (&["L_clf"], &["clf"], &l_clf),
        (&["L_pre", "L_low", "L_back"], &["enc", "dec"], &generator),
    ];
    for (labels, groups, f) in sweeps {
        let (reports, n) = gradient_check(&store, groups, f)?;
        total += n;
        for (name, r) in labels.iter().zip(reports) {
            zero = zero.max(r.zero);
            check(r.worst <= 1e-3, format!("{name}: relative error {:.2e} on {}", r.worst, r.tensor))?;
            summary.push(format!("{name} {:.1e}", r.worst));
        }
    }

    // ∇L_back = −λ∇L_upp + ∇L_low.
    let bound = store.bind(&["enc", "dec"]);
    let (_, vars) = bound.trainable();
    let (upp, low) = parts(&bound);
    let g_upp = grad(&upp.total, &vars, false);
    let g_low = grad(&low.total, &vars, false);
    let (upp, low) = parts(&bound);
    let g_back = grad(&stepback_loss(&upp, &low, lambda).unwrap().total, &vars, false);
    let mut additivity = 0.0f64;
    for ((b, u), l) in g_back.iter().zip(&g_upp).zip(&g_low) {
        for ((b, u), l) in b.value().iter().zip(u.value().iter()).zip(l.value().iter()) {
            additivity = additivity.max((b - (-lambda * u + l)).abs());
        }
    }
    check(additivity <= 1e-6, format!("gradient additivity error {additivity:e}"))?;
    Ok(format!(
        "worst per-tensor relative error {}; {total} entries; \
         up to {zero} tensors with zero gradient; additivity {additivity:.1e}",
        summary.join(", ")
    ))
}

/// Desk-preset training on 64-bin synthetic features, shared by the
/// accounting and freeze criteria.
struct DeskRun {
    stepback_pre: usize,
    stepback_back: usize,
    gan_disc: usize,
    gan_gen: usize,
    clf_after_prep: String,
    clf_after_stepback: String,
    clf_after_gan: String,
    gp_ok: bool,
    gap_ok: bool,
    probe_before: f64,
    probe_after: f64,
}

fn desk_store() -> FeatureStore {
    common::store(2, 8, 160, 64, 21)
}

/// Mean log-probability the frozen classifier gives the true source speaker
/// on conversions of a fixed probe batch to the other speaker.
fn source_logprob_on_conversions(t: &Trainer, store: &FeatureStore) -> f64 {
    let _g = no_grad();
    let m = &t.state.model;
    let p = t.state.params.bind(&[]);
    let segs: Vec<_> = store.entries.iter().map(|e| e.spectrogram.frames(0, 128)).collect();
    let x = batch_input(stepback_core::dataset::stack_spectrograms(&segs));
    let src: Vec<usize> = store.entries.iter().map(|e| e.speaker.index).collect();
    let dst: Vec<usize> = src.iter().map(|s| 1 - s).collect();
    let z = m.encode(&p, &x, &mut Mode::Eval).unwrap();
    let y2 = m.decode(&p, &z, &dst, &mut Mode::Eval).unwrap();
    let lp = m.classify(&p, &y2, &mut Mode::Eval).unwrap();
    src.iter().enumerate().map(|(b, s)| lp.value()[[b, *s]]).sum::<f64>() / src.len() as f64
}

fn desk_run() -> std::result::Result<DeskRun, String> {
    let store = desk_store();
    let cfg = TrainingConfig::desk();
    let mut t = Trainer::new(cfg, &store).map_err(|e| e.to_string())?;
    t.run_stage(TrainStage::Preparatory).map_err(|e| e.to_string())?;
    let clf_after_prep = t.state.classifier_checksum();
    let probe_before = source_logprob_on_conversions(&t, &store);
    let mark = t.log.records.len();
    t.run_stage(TrainStage::Stepback).map_err(|e| e.to_string())?;
    let probe_after = source_logprob_on_conversions(&t, &store);
    let clf_after_stepback = t.state.classifier_checksum();
    let stepback = &t.log.records[mark..];
    let stepback_pre = stepback.iter().filter(|r| r.objective == "l_pre").count();
    let stepback_back = stepback.iter().filter(|r| r.objective == "l_back").count();
    let mark = t.log.records.len();
    t.run_stage(TrainStage::Gan).map_err(|e| e.to_string())?;
    let gan = &t.log.records[mark..];
    let d: Vec<_> = gan.iter().filter(|r| r.objective == "d_loss").collect();
    Ok(DeskRun {
        stepback_pre,
        stepback_back,
        gan_disc: d.len(),
        gan_gen: gan.iter().filter(|r| r.objective == "g_loss").count(),
        clf_after_prep,
        clf_after_stepback,
        clf_after_gan: t.state.classifier_checksum(),
        gp_ok: d.iter().all(|r| r.component("gp").is_some_and(|g| g.is_finite() && g >= 0.0)),
        gap_ok: d.iter().all(|r| r.component("wasserstein").is_some_and(f64::is_finite)),
        probe_before,
        probe_after,
    })
}

fn dual_decoder_sharing() -> Outcome {
    let (model, store, x, src, _) = tiny_setup();
    let decoder_groups: Vec<_> = store
        .iter()
        .map(|(n, _)| n.split('.').next().unwrap().to_string())
        .filter(|g| g.starts_with("dec"))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    check(decoder_groups == ["dec"], format!("decoder groups {decoder_groups:?}"))?;
    let p = store.bind(&["dec"]);
    let z = {
        let _g = no_grad();
        model.encode(&p, &x, &mut Mode::Eval).unwrap()
    };
    let y1 = model.decode(&p, &z, &src, &mut Mode::Eval).unwrap();
    let y2 = model.decode(&p, &z, &src, &mut Mode::Eval).unwrap();
    let identical = y1.value().iter().zip(y2.value().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    check(identical, "decoder paths differ")?;
    // Both paths write into the same leaves: the gradient of the sum is the
    // sum of the gradients.
    let (_, vars) = p.trainable();
    let l1 = reconstruction_loss(&y1, &x).unwrap().total;
    let l2 = y2.square().mean_all();
    let g_sum = grad(&l1.add(&l2), &vars, false);
    let g1 = grad(&l1, &vars, false);
    let g2 = grad(&l2, &vars, false);
    let mut err = 0.0f64;
    for ((s, a), b) in g_sum.iter().zip(&g1).zip(&g2) {
        for ((s, a), b) in s.value().iter().zip(a.value().iter()).zip(b.value().iter()) {
            err = err.max((s - a - b).abs());
        }
    }
    check(err <= 1e-12, format!("shared-leaf accumulation error {err:e}"))?;
    Ok(format!("one decoder parameter set; outputs bit-identical; gradients accumulate (err {err:.0e})"))
}

fn overfit_smoke() -> Outcome {
    let store = desk_store();
    let cfg = TrainingConfig {
        pre_recon_steps: 500,
        pre_clf_steps: 500,
        ..TrainingConfig::desk()
    };
    let mut t = Trainer::new(cfg, &store).map_err(|e| e.to_string())?;
    let mut first_90 = None;
    let mut last_acc = 0.0;
    while t.counters.pre_clf < 500 {
        t.step().map_err(|e| e.to_string())?;
        if t.counters.pre_clf > 0 && t.counters.pre_clf % 50 == 0 {
            last_acc = train_accuracy(&t, &store);
            if last_acc > 0.9 && first_90.is_none() {
                first_90 = Some(t.counters.pre_clf);
            }
        }
    }
    let pre: Vec<f64> = t
        .log
        .records
        .iter()
        .filter(|r| r.objective == "l_pre")
        .map(|r| r.loss)
        .collect();
    let (first, last) = (pre[0], *pre.last().unwrap());
    let tail = pre[pre.len() - 10..].iter().sum::<f64>() / 10.0;
    check(
        last < 0.5 * first,
        format!("L_pre {first:.4} -> {last:.4} (ratio {:.3})", last / first),
    )?;
    let reached = first_90.ok_or_else(|| format!("accuracy {last_acc:.3} after 500 steps"))?;
    Ok(format!(
        "L_pre {first:.4} -> {last:.4} (ratio {:.3}, last-10 mean {tail:.4}); \
         train accuracy > 0.9 at step {reached}, {last_acc:.3} at 500",
        last / first
    ))
}

/// Frozen-mode accuracy over two 128-frame windows of every training utterance.
fn train_accuracy(t: &Trainer, store: &FeatureStore) -> f64 {
    let _g = no_grad();
    let p = t.state.params.bind(&[]);
    let mut segs = Vec::new();
    let mut labels = Vec::new();
    for e in &store.entries {
        for start in [0, e.spectrogram.n_frames() - 128] {
            segs.push(e.spectrogram.frames(start, 128));
            labels.push(e.speaker.index);
        }
    }
    let x = batch_input(stepback_core::dataset::stack_spectrograms(&segs));
    let lp = t.state.model.classify(&p, &x, &mut Mode::Eval).unwrap();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(b, l)| {
            let row = lp.value().index_axis(ndarray::Axis(0), *b).to_owned();
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            best == **l
        })
        .count();
    correct as f64 / labels.len() as f64
}

fn shape_contracts() -> Outcome {
    let store = common::store(3, 2, 300, 24, 4);
    let cfg = TrainingConfig {
        model: "desk".into(),
        segment_frames: 32,
        ..common::tiny_config()
    };
    let trainer = Trainer::new(cfg, &store).map_err(|e| e.to_string())?;
    let converter = Converter::new(trainer.checkpoint());
    let model = &converter.checkpoint().state.model;
    let p = converter.checkpoint().state.params.bind(&[]);
    let _g = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cases = 0;
    for t in [32usize, 64, 128, 256] {
        let x = batch_input(Array3::from_shape_fn((2, 24, t), |_| rng.random_range(-2.0..2.0)));
        let z = model.encode(&p, &x, &mut Mode::Eval).map_err(|e| e.to_string())?;
        check(z.shape()[2] == t / 8, format!("encode {t} -> {:?}", z.shape()))?;
        let y = model.decode(&p, &z, &[0, 2], &mut Mode::Eval).map_err(|e| e.to_string())?;
        check(y.shape() == x.shape(), format!("decode {:?} -> {:?}", z.shape(), y.shape()))?;
        for extra in 0..8 {
            let n = t + extra;
            let raw = Array2::from_shape_fn((n, 24), |_| rng.random_range(-8.0..0.0));
            let src = Spectrogram::new(raw, 256).unwrap();
            let target = &store.speakers[rng.random_range(0..3)].code;
            let out = converter
                .convert_spectrogram(&src, target, None)
                .map_err(|e| e.to_string())?;
            check(
                out.n_frames() == t && out.n_bins() == 24,
                format!("convert {n} frames -> {}", out.n_frames()),
            )?;
            cases += 1;
        }
    }
    Ok(format!("encode T/8, decode 8T at T ∈ {{32,64,128,256}}; {cases} conversions trimmed to a multiple of 8"))
}

fn objective_eval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let bins = rng.random_range(1..40);
        let specs: Vec<Spectrogram> = (0..rng.random_range(1..5))
            .map(|_| {
                let frames = rng.random_range(1..60);
                Spectrogram::new(Array2::from_shape_fn((frames, bins), |_| rng.random_range(-23.0..4.0)), 256).unwrap()
            })
            .collect();
        let p = global_variance(&specs, ConversionKind::F2M).map_err(|e| e.to_string())?;
        for k in 0..bins {
            let vals: Vec<f64> = specs
                .iter()
                .flat_map(|s| (0..s.n_frames()).map(move |t| s.values[[t, k]]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            worst = worst.max((p.variances[k] - var).abs());
        }
    }
    check(worst <= 1e-9, format!("global variance oracle error {worst:e}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = Spectrogram::new(Array2::from_shape_fn((128, 513), |_| rng.random_range(-23.0..4.0)), 256).unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    render_heatmap(&s, &a).map_err(|e| e.to_string())?;
    render_heatmap(&s, &b).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    check(!ba.is_empty() && ba == bb, "heatmap bytes differ")?;
    check(
        heatmap_image(&s).unwrap() == heatmap_image(&s.clone()).unwrap(),
        "heatmap pixels differ",
    )?;
    Ok(format!("GV max error {worst:.1e} over 50 random sets; heatmap PNG bytes identical ({} B)", ba.len()))
}

fn main() {
    let mut report = Report { failures: 0 };
    println!("acceptance criteria");
    report.run("budget identity", Duration::from_secs(1), budget_identity);
    report.run("lambda schedule", Duration::from_secs(1), lambda_ramp);
    report.run("loss unit suite", Duration::from_secs(1), loss_suite);
    report.run("gradient check", Duration::from_secs(300), gradient_checks);

    let start = Instant::now();
    let run = desk_run();
    let desk_time = start.elapsed();
    report.run("schedule accounting", Duration::from_secs(300), || {
        let r = run.as_ref().map_err(Clone::clone)?;
        check(
            (r.stepback_pre, r.stepback_back, r.gan_disc, r.gan_gen) == (80, 20, 50, 10),
            format!(
                "stepback {} L_pre / {} L_back, GAN {} D / {} G",
                r.stepback_pre, r.stepback_back, r.gan_disc, r.gan_gen
            ),
        )?;
        check(desk_time <= Duration::from_secs(300), format!("desk run took {desk_time:.1?}"))?;
        check(r.gp_ok && r.gap_ok, "non-finite or negative GAN component")?;
        Ok(format!(
            "20 cycles: 80 L_pre + 20 L_back; 10 G steps: 50 D steps; GP and gap finite; desk run {desk_time:.1?}"
        ))
    });
    report.run("freeze contract", Duration::from_secs(1), || {
        let r = run.as_ref().map_err(Clone::clone)?;
        check(
            r.clf_after_prep == r.clf_after_stepback && r.clf_after_prep == r.clf_after_gan,
            "classifier checksum changed",
        )?;
        Ok(format!("classifier sha256 {}… unchanged through stepback and GAN", &r.clf_after_prep[..12]))
    });
    if let Ok(r) = &run {
        println!(
            "INFO  probe: mean log P(source | converted) {:.4} before stepback, {:.4} after",
            r.probe_before, r.probe_after
        );
    }
    report.run("dual-decoder sharing", Duration::from_secs(1), dual_decoder_sharing);
    report.run("overfit smoke", Duration::from_secs(900), overfit_smoke);
    report.run("shape contracts", Duration::from_secs(60), shape_contracts);
    report.run("objective eval", Duration::from_secs(60), objective_eval);

    if report.failures > 0 {
        println!("{} criteria failed", report.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}

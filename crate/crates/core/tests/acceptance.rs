//! Acceptance checks. Prints one `criterion N: PASS|FAIL` line per
//! criterion and exits nonzero if any fails. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 1 5`.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use clstm_core::data::synthetic::{build_corpus, ClipPlan};
use clstm_core::data::{load_batch, Corpus, SeqRef, SyntheticSpec, DEFAULT_FLOW_BOUND, FRAME_FPS};
use clstm_core::eval::{compute_metrics, majority_vote, plan_folds, run_loso, EvalReport};
use clstm_core::flow::{farneback_flow, FlowParams};
use clstm_core::gradcheck::{finite_difference_check, finite_difference_check_floored, GradCheckReport};
use clstm_core::models::{fuse, Batch};
use clstm_core::nn::{clstm_layer, dense, dropout, ClstmNodes, Mode};
use clstm_core::rng::stream;
use clstm_core::saliency::{mass_inside, saliency, SaliencyMethod};
use clstm_core::train::{loss_and_grads, OptimizerConfig, OptimizerState, TrainSchedule};
use clstm_core::data::AugmentConfig;
use clstm_core::nn::Bound;
use clstm_core::{FusionMode, Graph, Modality, Model, ModelConfig, NodeId, Padding, Result, Tensor};

type Outcome = (bool, String);

// ---------------------------------------------------------------- 1

fn parameter_counts() -> Outcome {
    let c1 = Model::build(ModelConfig::clstm1(Modality::Rgb), 0).unwrap().count_parameters().1;
    let c2 = Model::build(ModelConfig::clstm2(FusionMode::Add), 0).unwrap().count_parameters().1;
    (c1 == 731_522 && c2 == 1_458_946, format!("C-LSTM-1 {c1}, C-LSTM-2 {c2}"))
}

// ---------------------------------------------------------------- 2

const GRAD_TOL: f64 = 1e-4;

fn check(
    name: &'static str,
    f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    params: Vec<Tensor>,
) -> (&'static str, GradCheckReport) {
    (name, finite_difference_check(f, &params, 1e-6).unwrap())
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut stream(seed))
}

/// A fixed random projection to a scalar, so every output element matters.
fn project(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = g.constant(uniform(&g.shape(y).to_vec(), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn layer_checks() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        check(
            "conv2d same",
            |g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), Padding::Same)?;
                project(g, y, 90)
            },
            vec![uniform(&[2, 5, 4, 2], 1), uniform(&[3, 3, 2, 3], 2), uniform(&[3], 3)],
        ),
        check(
            "conv2d valid",
            |g, p| {
                let y = g.conv2d(p[0], p[1], None, Padding::Valid)?;
                project(g, y, 91)
            },
            vec![uniform(&[1, 6, 5, 2], 4), uniform(&[3, 3, 2, 2], 5)],
        ),
        check(
            "activations",
            |g, p| {
                let (s, t, r) = (g.sigmoid(p[0]), g.tanh(p[0]), g.relu(p[0]));
                let st = g.add(s, t)?;
                let y = g.mul(st, r)?;
                project(g, y, 92)
            },
            vec![uniform(&[3, 4], 6)],
        ),
        check(
            "max pool 2x2",
            |g, p| {
                let y = g.max_pool2(p[0])?;
                project(g, y, 93)
            },
            vec![uniform(&[2, 4, 6, 3], 7)],
        ),
        check(
            "batch norm (train)",
            |g, p| {
                let (y, _) = g.batch_norm_train(p[0], p[1], p[2], 1e-3)?;
                project(g, y, 94)
            },
            vec![uniform(&[3, 2, 2, 2], 8), uniform(&[2], 9), uniform(&[2], 10)],
        ),
        check(
            "batch norm (inference)",
            |g, p| {
                let y = g.batch_norm_infer(p[0], p[1], p[2], &[0.1, -0.2], &[0.5, 1.5], 1e-3)?;
                project(g, y, 95)
            },
            vec![uniform(&[2, 3, 2, 2], 11), uniform(&[2], 12), uniform(&[2], 13)],
        ),
        check(
            "dense",
            |g, p| {
                let y = dense(g, p[0], p[1], p[2])?;
                project(g, y, 96)
            },
            vec![uniform(&[4, 5], 14), uniform(&[5, 2], 15), uniform(&[2], 16)],
        ),
        check(
            "dropout",
            |g, p| {
                let y = dropout(g, p[0], 0.3, Mode::Train, &mut stream(17))?;
                project(g, y, 97)
            },
            vec![uniform(&[4, 6], 18)],
        ),
        check(
            "C-LSTM layer",
            |g, p| {
                let w = ClstmNodes::from_gates(g, [p[1], p[2], p[3], p[4]], [p[5], p[6], p[7], p[8]], [p[9], p[10], p[11], p[12]])?;
                let y = clstm_layer(g, p[0], &w)?;
                project(g, y, 98)
            },
            {
                let mut v = vec![uniform(&[1, 3, 4, 4, 2], 19)];
                v.extend((0..4).map(|i| uniform(&[3, 3, 2, 2], 20 + i)));
                v.extend((0..4).map(|i| uniform(&[3, 3, 2, 2], 30 + i)));
                v.extend((0..4).map(|i| uniform(&[2], 40 + i)));
                v
            },
        ),
        check(
            "fusion add and mult",
            |g, p| {
                let a = fuse(g, FusionMode::Add, p[0], p[1])?;
                let m = fuse(g, FusionMode::Mult, p[0], p[1])?;
                let y = g.add(a, m)?;
                project(g, y, 99)
            },
            vec![uniform(&[2, 2, 2, 3], 50), uniform(&[2, 2, 2, 3], 51)],
        ),
        check(
            "binary cross-entropy",
            |g, p| {
                let s = g.sigmoid(p[0]);
                g.bce(s, &Tensor::uniform(&[2, 3, 2], 0.0, 1.0, &mut stream(52)), 1e-7)
            },
            vec![uniform(&[2, 3, 2], 53)],
        ),
    ]
}

/// Denominator floor for the full-model check. Central differences at
/// `eps = 1e-6` resolve a loss near 0.7 to about 1e-10, so relative errors of
/// gradients much smaller than this floor are rounding noise.
const FULL_MODEL_FLOOR: f64 = 1e-6;

/// Full four-block C-LSTM-1 in training mode (batch statistics, fixed
/// dropout mask), every trainable element checked.
fn full_model_check() -> GradCheckReport {
    let cfg = ModelConfig {
        hidden: 3,
        kernel: 3,
        frames: 2,
        ..ModelConfig::clstm1(Modality::Rgb).with_resolution(16, 16)
    };
    let m = Model::build(cfg.clone(), 3).unwrap();
    let batch = Batch {
        rgb: Some(Tensor::uniform(&[2, 2, 16, 16, 3], 0.0, 1.0, &mut stream(4))),
        flow: None,
    };
    let target = Tensor::uniform(&[2, 2, 2], 0.0, 1.0, &mut stream(5));
    let names: Vec<String> = m.params.trainable_names().map(String::from).collect();
    let params: Vec<Tensor> = names.iter().map(|n| m.params.get(n).unwrap().clone()).collect();
    finite_difference_check_floored(
        |g, p| {
            let bound = Bound::from_nodes(names.iter().cloned().zip(p.iter().copied()));
            let out = m.forward_in(g, &bound, &batch, Mode::Train, &mut stream(6), &[])?;
            g.bce(out.probs, &target, 1e-7)
        },
        &params,
        1e-6,
        usize::MAX,
        FULL_MODEL_FLOOR,
    )
    .unwrap()
}

fn gradients() -> Outcome {
    let layers = layer_checks();
    let full = full_model_check();
    let worst_layer = layers
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap();
    let pass = layers.iter().all(|(_, r)| r.max_rel_error < GRAD_TOL) && full.max_rel_error < GRAD_TOL;
    (
        pass,
        format!(
            "{} layer checks, worst {} at {:.2e}; full C-LSTM-1 (16x16) {} elements, max rel err {:.2e} (floor {FULL_MODEL_FLOOR:.0e}) at {:?} ({:.3e} vs {:.3e})",
            layers.len(),
            worst_layer.0,
            worst_layer.1.max_rel_error,
            full.checked,
            full.max_rel_error,
            full.worst,
            full.analytic,
            full.numeric
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Smooth multi-frequency pattern shifted by `(sx, sy)` pixels.
fn pattern(n: usize, sx: f64, sy: f64) -> Tensor {
    let data = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64 - sx, (i / n) as f64 - sy);
            0.5 + 0.12 * (0.29 * x + 0.21 * y).sin() + 0.10 * (-0.17 * x + 0.33 * y + 1.0).sin()
                + 0.08 * (0.25 * x - 0.27 * y + 2.0).cos()
                + 0.06 * (0.09 * x + 0.13 * y + 0.4).sin()
        })
        .collect();
    Tensor::new(&[n, n], data).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn interior(t: &Tensor, margin: usize) -> Vec<f64> {
    let n = t.shape()[0];
    (margin..n - margin)
        .flat_map(|y| (margin..n - margin).map(move |x| (y, x)))
        .map(|(y, x)| t.get(&[y, x]))
        .collect()
}

fn optical_flow() -> Outcome {
    let p = FlowParams::default();
    let mut pass = true;
    let mut notes = Vec::new();
    for (sx, sy) in [(2.0, 0.0), (3.0, 4.0)] {
        let f = farneback_flow(&pattern(64, 0.0, 0.0), &pattern(64, sx, sy), &p).unwrap();
        let (eu, ev) = (
            (median(interior(&f.u, 8)) - sx).abs(),
            (median(interior(&f.v, 8)) - sy).abs(),
        );
        pass &= eu < 0.25 && ev < 0.25;
        notes.push(format!("({sx},{sy}) err ({eu:.4},{ev:.4})"));
    }
    let same = pattern(64, 0.0, 0.0);
    let z = farneback_flow(&same, &same, &p).unwrap();
    let zmax = z.u.max_abs().max(z.v.max_abs());
    pass &= zmax < 1e-6;
    notes.push(format!("identical max |flow| {zmax:.1e}"));
    (pass, notes.join(", "))
}

// ---------------------------------------------------------------- 4

/// Desk-scale corpus and model for the dynamics experiment.
fn experiment_spec() -> SyntheticSpec {
    SyntheticSpec {
        size: 32,
        clips_per_class: 4,
        frames_per_clip: 40,
        ..SyntheticSpec::default()
    }
}

const REPEATS: usize = 2;
const MASTER_SEED: u64 = 2024;

fn experiment_model(base: ModelConfig) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        kernel: 3,
        layers: 4,
        bn_momentum: 0.9,
        ..base.with_resolution(32, 32)
    }
}

fn experiment_schedule(cfg: &ModelConfig) -> TrainSchedule {
    TrainSchedule {
        max_epochs: 60,
        patience: Some(15),
        batch_size: 4,
        ..TrainSchedule::for_model(cfg.kind, cfg.modality, 0)
    }
}

fn loso(corpus: &Corpus, cfg: ModelConfig) -> EvalReport {
    let sched = experiment_schedule(&cfg);
    let t = Instant::now();
    let r = run_loso(corpus, &cfg, &sched, REPEATS, MASTER_SEED, None).unwrap();
    let (f1, acc) = (r.f1(), r.accuracy());
    say(&format!(
        "  {:<12} f1 {:.3} (fold std {:.3}, repeat std {:.3})  accuracy {:.3}  [{:.0}s]",
        r.model,
        f1.mean,
        f1.std_foldwise,
        f1.std_repeatwise,
        acc.mean,
        t.elapsed().as_secs_f64()
    ));
    let folds: Vec<String> = r
        .rows
        .iter()
        .map(|row| format!("s{}:{:.2}", row.test_subject, row.metrics.accuracy))
        .collect();
    say(&format!("    per-fold accuracy {}", folds.join(" ")));
    r
}

fn dynamics_matter() -> Outcome {
    let flow = FlowParams::default();
    let corpus = build_corpus(&experiment_spec(), Some((&flow, DEFAULT_FLOW_BOUND))).unwrap();
    let frame = loso(&corpus, experiment_model(ModelConfig::frame_cnn(Modality::Rgb)));
    let one = loso(&corpus, experiment_model(ModelConfig::clstm1(Modality::Rgb)));
    let two = loso(&corpus, experiment_model(ModelConfig::clstm2(FusionMode::Add)));
    let (fa, oa) = (frame.accuracy().mean, one.accuracy().mean);
    let (of, tf) = (one.f1().mean, two.f1().mean);
    let pass = fa <= 0.60 && oa >= 0.90 && tf >= of - 0.02;
    (
        pass,
        format!("frame CNN acc {fa:.3} (<= 0.60), C-LSTM-1 acc {oa:.3} (>= 0.90), C-LSTM-2 f1 {tf:.3} vs C-LSTM-1 f1 {of:.3} (>= -0.02)"),
    )
}

// ---------------------------------------------------------------- 5

fn protocol() -> Outcome {
    let plans = plan_folds(&[1, 2, 3, 4, 5, 6]).unwrap();
    let p3 = &plans[2];
    let p5 = &plans[4];
    let rotation = p3.test_subject == 3
        && p3.val_subject == 5
        && p3.train_subjects == [1, 2, 4, 6]
        && p5.test_subject == 5
        && p5.val_subject == 1
        && p5.train_subjects == [2, 3, 4, 6];
    let tie = [0u8, 1, 0, 1, 1, 0, 1, 0, 0, 1];
    let n = 10_000;
    let mut ones = 0;
    let mut replay = true;
    for seed in 0..n {
        let a = majority_vote(&tie, &mut stream(seed)).unwrap();
        replay &= a == majority_vote(&tie, &mut stream(seed)).unwrap();
        ones += usize::from(a);
    }
    let share = ones as f64 / n as f64;
    let pass = rotation && replay && (share - 0.5).abs() <= 0.02;
    (pass, format!("rotation {rotation}, replay {replay}, tie draws class 1 in {:.2}%", share * 100.0))
}

// ---------------------------------------------------------------- 6

fn metric_oracle() -> Outcome {
    let mut cases = 0usize;
    let mut bad = 0usize;
    for len in 1..=8u32 {
        for pb in 0u32..1 << len {
            for lb in 0u32..1 << len {
                let bits = |b: u32| -> Vec<u8> { (0..len).map(|i| ((b >> i) & 1) as u8).collect() };
                let (p, l) = (bits(pb), bits(lb));
                let m = compute_metrics(&p, &l).unwrap();
                let tp = (pb & lb).count_ones() as usize;
                let fp = (pb & !lb).count_ones() as usize;
                let fn_ = (!pb & lb).count_ones() as usize;
                let tn = len as usize - tp - fp - fn_;
                let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
                let acc = (tp + tn) as f64 / len as f64;
                let ok = (m.tp, m.fp, m.tn, m.fn_) == (tp, fp, tn, fn_)
                    && (m.f1 - f1).abs() < 1e-12
                    && (m.accuracy - acc).abs() < 1e-12;
                bad += usize::from(!ok);
                cases += 1;
            }
        }
    }
    (bad == 0, format!("{cases} prediction/label pairs, {bad} mismatches"))
}

// ---------------------------------------------------------------- 7

fn overfit() -> Outcome {
    let corpus = build_corpus(&experiment_spec(), None).unwrap();
    let refs: Vec<SeqRef> = corpus.sequences(&corpus.subjects()).into_iter().step_by(4).take(20).collect();
    let samples: Vec<_> = refs.iter().map(|&r| corpus.sample(r)).collect();
    let mut model = Model::build(experiment_model(ModelConfig::clstm1(Modality::Rgb)), 1).unwrap();
    let mut opt = OptimizerState::new(OptimizerConfig::adadelta(), &model.params);
    let batch = 4;
    let mut last = f64::INFINITY;
    for epoch in 1..=200usize {
        let mut total = 0.0;
        for (bi, chunk) in samples.chunks(batch).enumerate() {
            let (b, y) = load_batch(chunk, Modality::Rgb).unwrap();
            let (loss, grads, bn) = loss_and_grads(&model, &b, &y, (epoch * 100 + bi) as u64).unwrap();
            opt.step(&mut model.params, &grads).unwrap();
            model.apply_bn_updates(&bn).unwrap();
            total += loss * chunk.len() as f64;
        }
        last = total / samples.len() as f64;
        if last < 0.05 {
            return (true, format!("{} sequences, training BCE {last:.4} at epoch {epoch}", samples.len()));
        }
    }
    (false, format!("{} sequences, training BCE {last:.4} after 200 epochs", samples.len()))
}

// ---------------------------------------------------------------- 8

fn fusion_semantics() -> Outcome {
    let mut ok = true;
    for (fusion, expect_rgb) in [(FusionMode::Add, true), (FusionMode::Mult, false)] {
        let cfg = ModelConfig::clstm2(fusion).with_resolution(32, 32);
        let m = Model::build(cfg.clone(), 7).unwrap();
        let shape = [1, cfg.frames, 32, 32, 3];
        let batch = Batch {
            rgb: Some(Tensor::uniform(&shape, 0.0, 1.0, &mut stream(1))),
            flow: Some(Tensor::uniform(&shape, 0.0, 1.0, &mut stream(2))),
        };
        let zeros = Tensor::zeros(&[1, cfg.frames, 2, 2, cfg.hidden]);
        let pass = m
            .forward_with(&batch, Mode::Infer, &mut stream(0), &[(Modality::Flow, zeros)])
            .unwrap();
        let fused = pass.graph.value(pass.fused.unwrap());
        let rgb = pass.graph.value(pass.stream_outputs[0]);
        ok &= rgb.max_abs() > 0.0;
        ok &= if expect_rgb { fused == rgb } else { fused.data().iter().all(|&v| v == 0.0) };
    }
    (ok, "add(r, 0) == r and mult(r, 0) == 0 inside the built C-LSTM-2 graph".into())
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    let spec = SyntheticSpec {
        clips_per_class: 1,
        frames_per_clip: 20,
        size: 16,
        successors: false,
        ..SyntheticSpec::default()
    };
    let corpus = build_corpus(&spec, None).unwrap();
    let cfg = ModelConfig {
        hidden: 4,
        kernel: 3,
        layers: 2,
        ..ModelConfig::clstm1(Modality::Rgb).with_resolution(16, 16)
    };
    let sched = TrainSchedule {
        max_epochs: 3,
        patience: Some(2),
        batch_size: 4,
        augment: AugmentConfig::ALL,
        ..TrainSchedule::for_model(cfg.kind, cfg.modality, 0)
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let d = dir.path().join(name);
        run_loso(&corpus, &cfg, &sched, 2, 99, Some(&d)).unwrap().write(&d).unwrap();
        std::fs::read(d.join("summary.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    (a == b, format!("two 2-repeat runs, summary.csv {} bytes, identical {}", a.len(), a == b))
}

// ---------------------------------------------------------------- 10

fn saliency_sanity() -> Outcome {
    let spec = SyntheticSpec {
        size: 64,
        clips_per_class: 2,
        frames_per_clip: 40,
        ..SyntheticSpec::default()
    };
    let corpus = build_corpus(&spec, None).unwrap();
    let cfg = ModelConfig {
        hidden: 8,
        kernel: 3,
        layers: 3,
        bn_momentum: 0.9,
        ..ModelConfig::clstm1(Modality::Rgb).with_resolution(64, 64)
    };
    let mut model = Model::build(cfg.clone(), 5).unwrap();
    let sched = TrainSchedule {
        max_epochs: 25,
        patience: Some(8),
        batch_size: 4,
        ..TrainSchedule::for_model(cfg.kind, cfg.modality, 6)
    };
    let train_refs = corpus.sequences(&[1, 2, 3, 4]);
    let val_refs = corpus.sequences(&[5]);
    clstm_core::train::train(&mut model, &corpus, &train_refs, &val_refs, &sched, None).unwrap();

    let moving: Vec<SeqRef> = corpus
        .sequences(&[5, 6])
        .into_iter()
        .filter(|&r| corpus.label(r) == 1)
        .take(20)
        .collect();
    let mut fractions = Vec::new();
    for &r in &moving {
        let sample = corpus.sample(r);
        let (subject, index) = clip_position(&corpus, r);
        let plan = ClipPlan::new(&spec, subject, index);
        let res = saliency(&model, &sample, 1, SaliencyMethod::TopFilter).unwrap();
        for (k, hm) in res.heatmaps.iter().enumerate() {
            let t = (r.start + k) as f64 / FRAME_FPS;
            fractions.push(mass_inside(hm, plan.bounding_box(t, 8.0)));
        }
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    (mean >= 0.60, format!("{} sequences, mean heat mass inside dilated box {mean:.3} (>= 0.60)", moving.len()))
}

/// Subject and within-subject clip index of a sequence.
fn clip_position(corpus: &Corpus, r: SeqRef) -> (u32, usize) {
    let e = &corpus.clips[r.clip].entry;
    let index = e.clip_id.rsplit("_c").next().unwrap().parse().unwrap();
    (e.subject_id, index)
}

// ----------------------------------------------------------------

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, parameter_counts),
        (2, gradients),
        (3, optical_flow),
        (4, dynamics_matter),
        (5, protocol),
        (6, metric_oracle),
        (7, overfit),
        (8, fusion_semantics),
        (9, determinism),
        (10, saliency_sanity),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        say(&format!("criterion {n}: {verdict} ({detail}) [{:.1}s]", t.elapsed().as_secs_f64()));
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        say(&format!("failed criteria: {failed:?}"));
        std::process::exit(1);
    }
}

//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `cargo test --test acceptance -- 4 9` runs
//! a subset.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use pix2affect::eval::{
    cross_validate, format_table, lovo_folds, predict, split_train_val, train_model, DatasetBuilder, EarlyStopping,
    LabeledDataset, TrainConfig, Verdict,
};
use pix2affect::explain::{default_layer, gradcam, render_heatmap};
use pix2affect::manifest::Manifest;
use pix2affect::nn::{build_architecture, count_parameters, Checkpoint, ModelName, ModelParams};
use pix2affect::traces::{label_trace, normalize_trace, AnnotationTrace, ArousalClass, LabelingConfig};
use pix2affect::video::pnm::{decode_pnm, encode_pgm, quantize};
use pix2affect::video::{synth_video, SynthConfig, FRAME_PIXELS};
use pix2affect::Rng;

use common::grad;

const EPSILONS: [f64; 4] = [0.0, 0.05, 0.10, 0.20];

// criterion 5
const LEARN_VIDEOS: usize = 20;
const LEARN_SECONDS: f64 = 60.0;
const LEARN_SEED: u64 = 2024;
const LEARN_EPOCHS: usize = 1;
const LEARN_BUDGET_S: f64 = 1800.0;

// criterion 6
const TREND_VIDEOS: usize = 6;
const TREND_SECONDS: f64 = 20.0;
const TREND_EPOCHS: usize = 2;
const TREND_SLACK: f64 = 0.02;

// criterion 8
const CAM_VIDEOS: usize = 8;
const CAM_SECONDS: f64 = 30.0;
const CAM_SEED: u64 = 7;
const CAM_EPOCHS: usize = 10;

struct Verdicts {
    pass: bool,
    lines: Vec<String>,
}

impl Verdicts {
    fn new() -> Self {
        Self {
            pass: true,
            lines: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.lines.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }

    fn note(&mut self, line: String) {
        self.lines.push(format!("     {line}"));
    }
}

/// Labels a synthetic corpus at each epsilon, one video at a time.
fn synth_datasets(cfg: &SynthConfig, epsilons: &[f64]) -> Vec<LabeledDataset> {
    let mut builders: Vec<DatasetBuilder> = epsilons.iter().map(|&e| DatasetBuilder::new(e).unwrap()).collect();
    for i in 0..cfg.num_videos {
        let v = synth_video(cfg, i).unwrap();
        for b in &mut builders {
            b.add_video(&v.clip, &v.trace).unwrap();
        }
    }
    builders.into_iter().map(DatasetBuilder::finish).collect()
}

fn architecture_fidelity(v: &mut Verdicts) {
    for (name, want) in [(ModelName::FrameCnn2d, 960), (ModelName::SeqCnn2d, 960), (ModelName::SeqCnn3d, 1920)] {
        let got = build_architecture(name).flatten_width().unwrap();
        v.check(got == want, format!("{name} flatten width {got}, expected {want}"));
    }
}

/// `x` rounded to two significant figures.
fn sig2(x: f64) -> f64 {
    let mag = 10f64.powi(x.abs().log10().floor() as i32 - 1);
    (x / mag).round() * mag
}

fn parameter_counts(v: &mut Verdicts) {
    for (name, want, rounded) in [
        (ModelName::FrameCnn2d, 69_070, Some(6.9e4)),
        (ModelName::SeqCnn2d, 70_470, Some(7.0e4)),
        (ModelName::SeqCnn3d, 137_910, None),
    ] {
        let spec = build_architecture(name);
        let got = count_parameters(&spec, false).unwrap();
        let with_bn = count_parameters(&spec, true).unwrap();
        v.check(got == want, format!("{name}: {got} parameters without batch-norm affine, expected {want}"));
        if let Some(r) = rounded {
            let s = sig2(got as f64);
            v.check(s == r, format!("{name}: {got} rounds to {s:.1e}, expected {r:.1e}"));
        }
        v.note(format!("{name}: {with_bn} with batch-norm affine"));
    }
    let three_d = count_parameters(&build_architecture(ModelName::SeqCnn3d), false).unwrap();
    v.note(format!(
        "3DSeqCNN closed form {three_d} vs reported ~1.45e5: gap {} not explained by batch norm (+3840)",
        145_000 - three_d
    ));
}

fn gradient_correctness(v: &mut Verdicts) {
    let layers = grad::layer_results(grad::SEEDS);
    let kinds: BTreeSet<&str> = layers.iter().map(|r| r.kind.as_str()).collect();
    for kind in kinds {
        let group: Vec<&grad::CaseResult> = layers.iter().filter(|r| r.kind == kind).collect();
        let fails: Vec<String> = group.iter().filter_map(|r| grad::layer_verdict(r).err()).collect();
        let (e64, e32) = worst(&group);
        v.check(
            fails.is_empty() && group.len() as u64 == grad::SEEDS,
            format!(
                "{kind}: {} seeds, max rel err 64-bit {e64:.1e} (< 1e-6), 32-bit {e32:.1e} (< 1e-3){}",
                group.len(),
                fails.first().map(|f| format!(": {f}")).unwrap_or_default()
            ),
        );
    }
    let nets = grad::architecture_results(grad::SEEDS);
    for name in ModelName::ALL {
        let group: Vec<&grad::CaseResult> = nets.iter().filter(|r| r.kind == name.as_str()).collect();
        let verdict = grad::architecture_verdict(&group);
        let (e64, e32) = worst(&group);
        let checked: usize = group.iter().map(|r| r.checked()).sum();
        let skipped: usize = group.iter().map(|r| r.skipped()).sum();
        v.check(
            verdict.is_ok() && group.len() as u64 == grad::SEEDS,
            format!(
                "{name} reduced input: {} seeds, {checked} coordinates ({skipped} at kinks), \
                 64-bit {e64:.1e}, 32-bit {e32:.1e}{}",
                group.len(),
                verdict.err().map(|e| format!(": {e}")).unwrap_or_default()
            ),
        );
    }
}

fn worst(group: &[&grad::CaseResult]) -> (f64, f64) {
    group.iter().fold((0.0f64, 0.0f64), |(a, b), r| {
        (a.max(r.r64.max_relative_error), b.max(r.r32.max_relative_error))
    })
}

/// Labels recomputed straight from the raw samples: normalize, hold the
/// latest sample at each frame time, average each window's distinct
/// samples, compare with the mean. `None` is Uncertain, `Some(true)` High.
fn brute_force_labels(samples: &[(f64, f64)], frames: usize, eps: f64) -> Vec<Option<bool>> {
    let lo = samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f64> = samples.iter().map(|s| (s.1 - lo) / (hi - lo)).collect();
    let mean = norm.iter().sum::<f64>() / norm.len() as f64;
    (0..frames / 8)
        .map(|w| {
            let held: BTreeSet<usize> = (w * 8..w * 8 + 8)
                .map(|f| {
                    let t = f as f64 / 30.0;
                    samples.iter().rposition(|s| s.0 <= t).unwrap_or(0)
                })
                .collect();
            let value = held.iter().map(|&i| norm[i]).sum::<f64>() / held.len() as f64;
            if eps == 0.0 {
                Some(value > mean)
            } else if value >= mean + eps {
                Some(true)
            } else if value <= mean - eps {
                Some(false)
            } else {
                None
            }
        })
        .collect()
}

fn random_trace(rng: &mut Rng) -> (Vec<(f64, f64)>, usize) {
    let n = 2 + rng.below(120);
    let coarse = rng.bernoulli(0.3);
    let mut t = rng.uniform() * 0.5;
    let mut samples = Vec::with_capacity(n);
    let mut level = 0.0;
    for _ in 0..n {
        level += rng.normal();
        // small integer levels make windows land exactly on the mean
        let v = if coarse { rng.below(3) as f64 } else { level };
        samples.push((t, v));
        t += 0.02 + rng.uniform() * 0.5;
    }
    if samples.iter().all(|s| s.1 == samples[0].1) {
        samples[0].1 += 1.0;
    }
    (samples, 8 + rng.below(900))
}

fn labeling_oracle(v: &mut Verdicts) {
    let mut rng = Rng::new(4);
    let mut mismatches = 0usize;
    let mut windows = 0usize;
    let mut monotone = true;
    let mut kept_total = [0usize; 4];
    for k in 0..1000 {
        let (samples, frames) = random_trace(&mut rng);
        let trace = AnnotationTrace::new(format!("t{k}"), samples.clone()).unwrap();
        let norm = normalize_trace(&trace).unwrap();
        let mut kept_prev = usize::MAX;
        for (j, &eps) in EPSILONS.iter().enumerate() {
            let got = label_trace(&norm, frames, &LabelingConfig::with_epsilon(eps).unwrap()).unwrap();
            let want = brute_force_labels(&samples, frames, eps);
            windows += want.len();
            if got.len() != want.len() {
                mismatches += want.len();
                continue;
            }
            for (g, w) in got.iter().zip(&want) {
                let g = match g.class {
                    ArousalClass::High => Some(true),
                    ArousalClass::Low => Some(false),
                    ArousalClass::Uncertain => None,
                };
                mismatches += usize::from(g != *w);
            }
            let kept = got.iter().filter(|l| l.class != ArousalClass::Uncertain).count();
            monotone &= kept <= kept_prev;
            kept_prev = kept;
            kept_total[j] += kept;
        }
    }
    v.check(
        mismatches == 0,
        format!("1000 traces, {windows} window labels over 4 epsilons, {mismatches} mismatches"),
    );
    v.check(
        monotone,
        format!(
            "labeled windows non-increasing in epsilon per trace; totals {:?} for {:?}",
            kept_total, EPSILONS
        ),
    );
}

fn learnability(v: &mut Verdicts) {
    let start = Instant::now();
    let cfg = SynthConfig {
        num_videos: LEARN_VIDEOS,
        duration_s: LEARN_SECONDS,
        seed: LEARN_SEED,
        ..SynthConfig::default()
    };
    let ds = synth_datasets(&cfg, &[0.10]).remove(0);
    let c = ds.counts();
    v.note(format!(
        "{LEARN_VIDEOS} videos x {LEARN_SECONDS} s, seed {LEARN_SEED}: {} of {} windows labeled at epsilon 0.10, built in {:.0} s",
        c.kept,
        c.windows,
        start.elapsed().as_secs_f64()
    ));
    let tc = TrainConfig {
        max_epochs: LEARN_EPOCHS,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut reports = Vec::new();
    for (name, margin) in [(ModelName::SeqCnn2d, 0.15), (ModelName::FrameCnn2d, 0.10)] {
        let t = Instant::now();
        let cv = cross_validate(name, &ds, &tc, 1).unwrap();
        let r = &cv.report;
        let gap = r.mean_accuracy - r.mean_baseline;
        v.check(
            gap >= margin && r.failures.is_empty(),
            format!(
                "{name}: LOVO accuracy {:.1}% +/- {:.1}, baseline {:.1}%, gap {:.1} points (>= {:.0}), {} folds, {:.0} s",
                100.0 * r.mean_accuracy,
                100.0 * r.ci95,
                100.0 * r.mean_baseline,
                100.0 * gap,
                100.0 * margin,
                r.folds.len(),
                t.elapsed().as_secs_f64()
            ),
        );
        reports.push(cv.report);
    }
    let secs = start.elapsed().as_secs_f64();
    v.check(
        secs <= LEARN_BUDGET_S,
        format!("total {secs:.0} s (<= {LEARN_BUDGET_S:.0}) with max_epochs {LEARN_EPOCHS}, patience {}", tc.patience),
    );
    for line in format_table(&reports).lines() {
        v.note(line.to_string());
    }
}

fn trend_corpus() -> SynthConfig {
    SynthConfig {
        num_videos: TREND_VIDEOS,
        duration_s: TREND_SECONDS,
        seed: LEARN_SEED,
        ..SynthConfig::default()
    }
}

fn relative_ordering(v: &mut Verdicts) {
    let eps = [0.0, 0.10, 0.20];
    let sets = synth_datasets(&trend_corpus(), &eps);
    let tc = TrainConfig {
        max_epochs: TREND_EPOCHS,
        seed: 1,
        ..TrainConfig::default()
    };
    v.note(format!(
        "{TREND_VIDEOS} videos x {TREND_SECONDS} s, max_epochs {TREND_EPOCHS}; records {:?}",
        sets.iter().map(LabeledDataset::len).collect::<Vec<_>>()
    ));
    let mut reports = Vec::new();
    for name in ModelName::ALL {
        let acc: Vec<f64> = sets
            .iter()
            .map(|ds| {
                let cv = cross_validate(name, ds, &tc, 1).unwrap();
                let a = cv.report.mean_accuracy;
                reports.push(cv.report);
                a
            })
            .collect();
        v.check(
            acc[2] >= acc[0] - TREND_SLACK,
            format!(
                "{name}: {:.1}% / {:.1}% / {:.1}% at epsilon 0 / 0.10 / 0.20; 0.20 >= 0 - {:.0} points",
                100.0 * acc[0],
                100.0 * acc[1],
                100.0 * acc[2],
                100.0 * TREND_SLACK
            ),
        );
    }
    for line in format_table(&reports).lines() {
        v.note(line.to_string());
    }
}

fn protocol_invariants(v: &mut Verdicts) {
    let small = SynthConfig {
        num_videos: 4,
        duration_s: 10.0,
        seed: 31,
        ..SynthConfig::default()
    };
    let ds = synth_datasets(&small, &[0.10]).remove(0);

    let folds = lovo_folds(&ds).unwrap();
    let mut disjoint = folds.len() == ds.videos.len();
    for f in &folds {
        let train: BTreeSet<u32> = f.train.iter().map(|&i| ds.records()[i].video).collect();
        let test: BTreeSet<u32> = f.test.iter().map(|&i| ds.records()[i].video).collect();
        disjoint &= train.is_disjoint(&test) && test.len() == 1 && f.train.len() + f.test.len() == ds.len();
    }
    v.check(disjoint, format!("{} folds: train and test videos disjoint, every record used once", folds.len()));

    // constant validation loss
    let mut stop = EarlyStopping::new(15);
    let mut epochs = 0;
    for epoch in 1..=100 {
        epochs = epoch;
        if stop.observe(epoch, 0.693) == Verdict::Stop {
            break;
        }
    }
    v.check(epochs == 16, format!("constant validation loss, patience 15: stopped after {epochs} epochs (expected 16)"));

    // restore the best epoch: a fresh run cut at the best epoch must land
    // on the same parameters
    let spec = build_architecture(ModelName::FrameCnn2d);
    let f = &folds[0];
    let rng = Rng::new(3);
    let (tr, val) = split_train_val(&f.train, 0.1, &mut rng.derive(0)).unwrap();
    let tc = TrainConfig {
        max_epochs: 40,
        patience: 4,
        learning_rate: 3e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let (best, curve) = train_model(&spec, &ds, &tr, &val, &tc, &mut rng.derive(1)).unwrap();
    let cut = TrainConfig {
        max_epochs: curve.best_epoch,
        ..tc.clone()
    };
    let (again, _) = train_model(&spec, &ds, &tr, &val, &cut, &mut rng.derive(1)).unwrap();
    let (val_loss, _) = predict(&spec, &best, &ds, &val).unwrap();
    v.check(
        curve.best_epoch < curve.epochs.len() && again == best && val_loss == curve.best_val_loss,
        format!(
            "best epoch {} of {} run: returned parameters equal a run stopped at epoch {}, validation loss {:.4}",
            curve.best_epoch,
            curve.epochs.len(),
            curve.best_epoch,
            val_loss
        ),
    );
    v.check(
        curve.stopped_early && curve.epochs.len() == curve.best_epoch + tc.patience,
        format!(
            "early stop after {} epochs = best {} + patience {}",
            curve.epochs.len(),
            curve.best_epoch,
            tc.patience
        ),
    );

    let tc = TrainConfig {
        max_epochs: 2,
        seed: 77,
        ..TrainConfig::default()
    };
    let a = cross_validate(ModelName::SeqCnn2d, &ds, &tc, 1).unwrap();
    let b = cross_validate(ModelName::SeqCnn2d, &ds, &tc, 1).unwrap();
    let same = serde_json::to_string(&a.report).unwrap() == serde_json::to_string(&b.report).unwrap()
        && a.params == b.params;
    v.check(same, "two LOVO runs with seed 77, jobs 1: identical reports and parameters".into());
}

/// Trains on all but the first video and explains its test segments.
fn localization(v: &mut Verdicts, name: ModelName) {
    let cfg = SynthConfig {
        num_videos: CAM_VIDEOS,
        duration_s: CAM_SECONDS,
        seed: CAM_SEED,
        ..SynthConfig::default()
    };
    let share = cfg.region.area() as f64 / FRAME_PIXELS as f64;
    let ds = synth_datasets(&cfg, &[0.10]).remove(0);
    let spec = build_architecture(name);
    let f = &lovo_folds(&ds).unwrap()[0];
    let rng = Rng::new(CAM_SEED);
    let (tr, val) = split_train_val(&f.train, 0.1, &mut rng.derive(0)).unwrap();
    let tc = TrainConfig {
        max_epochs: CAM_EPOCHS,
        seed: CAM_SEED,
        ..TrainConfig::default()
    };
    let (params, _) = train_model(&spec, &ds, &tr, &val, &tc, &mut rng.derive(1)).unwrap();
    let (_, preds) = predict(&spec, &params, &ds, &f.test).unwrap();
    let layer = default_layer(&spec).unwrap();
    let single = name.single_frame();
    let (mut n, mut inside, mut in_range, mut correct) = (0usize, 0usize, true, 0usize);
    let mut fractions = Vec::new();
    for (&i, &p) in f.test.iter().zip(&preds) {
        let r = &ds.records()[i];
        correct += usize::from(p == r.class_index());
        for class in [0, 1] {
            let h = gradcam(&spec, &params, ds.input(r, single), class, layer).unwrap();
            in_range &= h.values.data().iter().all(|x| (0.0..=1.0).contains(x));
            if class == 1 && r.class_index() == 1 && p == 1 {
                let m = h.mass_fraction(&cfg.region);
                fractions.push(m);
                n += 1;
                inside += usize::from(m >= 0.5);
            }
        }
    }
    fractions.sort_by(f64::total_cmp);
    let rate = inside as f64 / n.max(1) as f64;
    v.check(
        n > 0 && rate >= 0.70 && share <= 0.10,
        format!(
            "{name}: {inside} of {n} correct High heatmaps put >= 50% of mass in a region of {:.1}% of the frame \
             ({:.0}% >= 70%; median share {:.2}; test accuracy {:.1}%)",
            100.0 * share,
            100.0 * rate,
            fractions.get(n / 2).copied().unwrap_or(0.0),
            100.0 * correct as f64 / f.test.len() as f64
        ),
    );
    v.check(in_range, format!("{name}: all {} heatmaps within [0, 1]", 2 * f.test.len()));

}

fn gradcam_localization(v: &mut Verdicts) {
    localization(v, ModelName::FrameCnn2d);
    localization(v, ModelName::SeqCnn2d);
}

fn format_round_trips(v: &mut Verdicts) {
    let small = SynthConfig {
        num_videos: 3,
        duration_s: 5.0,
        seed: 12,
        ..SynthConfig::default()
    };
    let ds = synth_datasets(&small, &[0.05]).remove(0);
    let mut a = Vec::new();
    ds.write_to(&mut a).unwrap();
    let manifest = Manifest::parse(&ds.manifest().to_text()).unwrap();
    let back = LabeledDataset::read_from(&mut a.as_slice(), &manifest).unwrap();
    let mut b = Vec::new();
    back.write_to(&mut b).unwrap();
    v.check(
        a == b && back.manifest().to_text() == ds.manifest().to_text(),
        format!("AFD1: {} records, {} bytes, identical after read and rewrite", ds.len(), a.len()),
    );

    let mut ok = true;
    let mut sizes = Vec::new();
    for name in ModelName::ALL {
        let params = ModelParams::init(&build_architecture(name), &mut Rng::new(5)).unwrap();
        let ck = Checkpoint { model: name, seed: 5, params };
        let mut a = Vec::new();
        ck.write_to(&mut a).unwrap();
        let back = Checkpoint::read_from(&mut a.as_slice()).unwrap();
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        ok &= a == b && back == ck;
        sizes.push(a.len());
    }
    v.check(ok, format!("AFM1: three models ({sizes:?} bytes) identical after read and rewrite"));

    let r = &ds.records()[0];
    let frame: Vec<u8> = ds.last_frame(r).iter().map(|&p| quantize(p)).collect();
    let frame_pgm = encode_pgm(128, 72, &frame).unwrap();
    let spec = build_architecture(ModelName::FrameCnn2d);
    let params = ModelParams::init(&spec, &mut Rng::new(6)).unwrap();
    let h = gradcam(&spec, &params, ds.last_frame(r), 1, default_layer(&spec).unwrap()).unwrap();
    let (heat, overlay) = render_heatmap(&h, ds.last_frame(r)).unwrap();
    let mut ok = true;
    for bytes in [&frame_pgm, &heat, &overlay] {
        let img = decode_pnm(bytes).unwrap();
        ok &= encode_pgm(img.width, img.height, &img.pixels).unwrap() == *bytes;
    }
    v.check(ok, "PGM: frame, heatmap and overlay identical after decode and re-encode".into());
}

struct Criterion {
    id: u32,
    title: &'static str,
    budget_s: Option<f64>,
    run: fn(&mut Verdicts),
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, title: "architecture fidelity", budget_s: Some(1.0), run: architecture_fidelity },
    Criterion { id: 2, title: "parameter counts", budget_s: Some(1.0), run: parameter_counts },
    Criterion { id: 3, title: "gradient correctness", budget_s: Some(120.0), run: gradient_correctness },
    Criterion { id: 4, title: "labeling oracle", budget_s: Some(60.0), run: labeling_oracle },
    Criterion { id: 5, title: "learnability", budget_s: Some(LEARN_BUDGET_S), run: learnability },
    Criterion { id: 6, title: "relative ordering", budget_s: None, run: relative_ordering },
    Criterion { id: 7, title: "evaluation protocol", budget_s: None, run: protocol_invariants },
    Criterion { id: 8, title: "activation-map localization", budget_s: Some(300.0), run: gradcam_localization },
    Criterion { id: 9, title: "format round trips", budget_s: Some(60.0), run: format_round_trips },
];

fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut summary = Vec::new();
    for c in CRITERIA.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        println!("criterion {} ({})", c.id, c.title);
        let start = Instant::now();
        let mut v = Verdicts::new();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| (c.run)(&mut v)));
        let secs = start.elapsed().as_secs_f64();
        if let Err(e) = outcome {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            v.check(false, format!("panicked: {msg}"));
        }
        if let Some(b) = c.budget_s {
            v.check(secs <= b, format!("ran in {secs:.1} s (budget {b:.0} s)"));
        }
        for line in &v.lines {
            println!("  {line}");
        }
        summary.push(format!(
            "{} criterion {}: {} ({secs:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            c.id,
            c.title
        ));
        if !v.pass {
            summary.last_mut().unwrap().push_str(" <-");
        }
    }
    println!();
    for s in &summary {
        println!("{s}");
    }
    if summary.iter().all(|s| s.starts_with("PASS")) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use log::{info, warn};
use pix2affect::eval::{
    baseline_majority, cross_validate, fold_seed, format_table, predict, split_train_val, train_model,
    DatasetBuilder, LabeledDataset, RunReport, TrainConfig,
};
use pix2affect::explain::{default_layer, gradcam_with, write_heatmap, CamVariant};
use pix2affect::manifest::Manifest;
use pix2affect::nn::{build_architecture, Checkpoint, ModelName};
use pix2affect::traces::{label_trace, normalize_trace, parse_trace, ArousalClass, LabelingConfig};
use pix2affect::video::{frame_files, ingest_clip, synth_video, write_pgm, SynthConfig};
use pix2affect::video::pnm::quantize;
use pix2affect::Rng;
use serde_json::json;

use crate::settings::{finish_manifest, run_manifest, unix_now, Settings};
use crate::{ClassArg, Exit, Global};

/// Epsilon values always listed in the build summary.
const REFERENCE_EPSILONS: [f64; 4] = [0.0, 0.05, 0.10, 0.20];

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of videos.
    #[arg(long)]
    videos: Option<usize>,
    /// Seconds per video.
    #[arg(long)]
    duration: Option<f64>,
    /// Per-pixel noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Annotator lag in seconds.
    #[arg(long)]
    lag: Option<f64>,
    /// Annotator noise in latent units.
    #[arg(long)]
    annotator_noise: Option<f64>,
    /// Background lighting drift.
    #[arg(long)]
    flicker: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Corpus directory with one subdirectory of frames and a trace per video.
    corpus: PathBuf,
    /// Half-width of the uncertainty band around the trace mean.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct XvalArgs {
    /// AFD1 datasets, one table row each.
    #[arg(required = true)]
    datasets: Vec<PathBuf>,
    /// 2dframe, 2dseq or 3dseq; repeat for several models.
    #[arg(long = "model")]
    models: Vec<String>,
    #[command(flatten)]
    train: TrainOpts,
    /// Also write the best parameters of every fold.
    #[arg(long)]
    save_checkpoints: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    dataset: PathBuf,
    #[arg(long)]
    model: Option<String>,
    /// Hold this video out and report test accuracy on it.
    #[arg(long)]
    test_video: Option<String>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Restrict to these videos (repeatable).
    #[arg(long)]
    video: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    GradientTimesActivation,
    PooledWeights,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Only these videos (repeatable).
    #[arg(long)]
    video: Vec<String>,
    /// Only these window indices (repeatable).
    #[arg(long)]
    window: Vec<u32>,
    /// Only segments whose label is this class.
    #[arg(long, value_enum)]
    label: Option<ClassArg>,
    /// Class whose logit is explained.
    #[arg(long, value_enum, default_value = "both")]
    class: ClassArg,
    /// Convolution layer index; defaults to the last one.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, value_enum, default_value = "gradient-times-activation")]
    variant: VariantArg,
    /// At most this many segments.
    #[arg(long)]
    limit: Option<usize>,
}

fn parse_model(s: &str) -> Result<ModelName> {
    Ok(s.trim().parse::<ModelName>()?)
}

fn train_config(g: &Global, s: &Settings, o: &TrainOpts) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        max_epochs: s.pick(o.max_epochs, "max_epochs", d.max_epochs)?,
        patience: s.pick(o.patience, "patience", d.patience)?,
        batch_size: s.pick(o.batch_size, "batch_size", d.batch_size)?,
        learning_rate: s.pick(o.learning_rate, "learning_rate", d.learning_rate)?,
        val_fraction: s.pick(o.val_fraction, "val_fraction", d.val_fraction)?,
        seed: s.pick(g.seed, "seed", 0)?,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn synth(g: &Global, s: &Settings, a: SynthArgs) -> Result<()> {
    let started = unix_now();
    let d = SynthConfig::default();
    let mut cfg = SynthConfig {
        num_videos: s.pick(a.videos, "videos", d.num_videos)?,
        duration_s: s.pick(a.duration, "duration", d.duration_s)?,
        seed: s.pick(g.seed, "seed", 0)?,
        noise: s.pick(a.noise, "noise", d.noise)?,
        lag_s: s.pick(a.lag, "lag", d.lag_s)?,
        annotator_noise: s.pick(a.annotator_noise, "annotator_noise", d.annotator_noise)?,
        flicker: s.pick(a.flicker, "flicker", d.flicker)?,
        ..d
    };
    cfg.region.top = s.pick(None, "region_top", cfg.region.top)?;
    cfg.region.left = s.pick(None, "region_left", cfg.region.left)?;
    cfg.region.height = s.pick(None, "region_height", cfg.region.height)?;
    cfg.region.width = s.pick(None, "region_width", cfg.region.width)?;
    cfg.meter_margin = s.pick(None, "meter_margin", cfg.meter_margin)?;
    cfg.drift = s.pick(None, "drift", cfg.drift)?;
    cfg.volatility = s.pick(None, "volatility", cfg.volatility)?;
    cfg.validate()?;
    let out = s.pick(g.out.clone(), "out", PathBuf::from("corpus"))?;
    create_dir(&out)?;

    for i in 0..cfg.num_videos {
        let v = synth_video(&cfg, i)?;
        let dir = out.join(&v.clip.video_id);
        create_dir(&dir)?;
        let (h, w) = (v.clip.frames.shape()[1], v.clip.frames.shape()[2]);
        for f in 0..v.clip.frame_count() {
            let px: Vec<u8> = v.clip.frame(f).iter().map(|&p| quantize(p)).collect();
            write_pgm(&dir.join(format!("frame_{f:05}.pgm")), w, h, &px)?;
        }
        fs::write(dir.join("trace.txt"), v.trace.to_text())?;
        info!("wrote {} ({} frames)", dir.display(), v.clip.frame_count());
    }

    let mut m = run_manifest("synth", cfg.seed, started);
    m.set("output", out.display())
        .set("videos", cfg.num_videos)
        .set("duration", cfg.duration_s)
        .set("noise", cfg.noise)
        .set("lag", cfg.lag_s)
        .set("annotator_noise", cfg.annotator_noise)
        .set("flicker", cfg.flicker)
        .set("drift", cfg.drift)
        .set("volatility", cfg.volatility)
        .set("region_top", cfg.region.top)
        .set("region_left", cfg.region.left)
        .set("region_height", cfg.region.height)
        .set("region_width", cfg.region.width)
        .set("meter_margin", cfg.meter_margin);
    finish_manifest(m, &out.join("manifest.txt"))?;
    println!(
        "wrote {} videos x {} frames to {}",
        cfg.num_videos,
        cfg.frame_count(),
        out.display()
    );
    Ok(())
}

/// The single `.txt` file in a video directory.
fn trace_file(dir: &Path) -> Result<PathBuf> {
    let mut found = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "txt") {
            found.push(p);
        }
    }
    match found.len() {
        1 => Ok(found.pop().unwrap()),
        n => Err(Exit::data(format!("{} holds {n} trace files, expected 1", dir.display())).into()),
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct LabelTally {
    kept: usize,
    uncertain: usize,
}

pub fn build(g: &Global, s: &Settings, a: BuildArgs) -> Result<()> {
    let started = unix_now();
    let epsilon = s.pick(a.epsilon, "epsilon", 0.0)?;
    let out = s.pick(g.out.clone(), "out", PathBuf::from("dataset.afd"))?;
    let mut builder = DatasetBuilder::new(epsilon)?;

    let mut dirs = Vec::new();
    for e in fs::read_dir(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))? {
        let p = e?.path();
        if p.is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Exit::data(format!("{} has no video directories", a.corpus.display())).into());
    }
    let mut epsilons: Vec<f64> = REFERENCE_EPSILONS.to_vec();
    if !epsilons.contains(&epsilon) {
        epsilons.push(epsilon);
        epsilons.sort_by(f64::total_cmp);
    }
    let mut tally = vec![LabelTally::default(); epsilons.len()];
    let mut windows = 0usize;
    for dir in &dirs {
        if frame_files(dir)?.is_empty() {
            warn!("skipping {}: no frames", dir.display());
            continue;
        }
        let id = dir.file_name().unwrap().to_string_lossy().into_owned();
        let tpath = trace_file(dir)?;
        let trace = parse_trace(&id, BufReader::new(File::open(&tpath)?))
            .with_context(|| format!("parsing {}", tpath.display()))?;
        let clip = ingest_clip(&id, dir)?;
        if let Ok(norm) = normalize_trace(&trace) {
            windows += clip.segment_count();
            for (e, t) in epsilons.iter().zip(tally.iter_mut()) {
                for l in label_trace(&norm, clip.frame_count(), &LabelingConfig::with_epsilon(*e)?)? {
                    if l.class == ArousalClass::Uncertain {
                        t.uncertain += 1;
                    } else {
                        t.kept += 1;
                    }
                }
            }
        }
        builder.add_video(&clip, &trace)?;
    }
    let ds = builder.finish();
    let c = ds.counts();

    let mut summary = format!(
        "videos: {} kept, {} excluded\nwindows: {windows}\n{:<8} {:>8} {:>10} {:>8}\n",
        ds.videos.len(),
        ds.excluded.len(),
        "epsilon",
        "records",
        "uncertain",
        "dropped"
    );
    for (e, t) in epsilons.iter().zip(&tally) {
        let pct = if windows > 0 { 100.0 * t.uncertain as f64 / windows as f64 } else { 0.0 };
        let mark = if *e == epsilon { " *" } else { "" };
        let _ = writeln!(summary, "{e:<8.2} {:>8} {:>10} {pct:>7.1}%{mark}", t.kept, t.uncertain);
    }
    for (id, why) in &ds.excluded {
        let _ = writeln!(summary, "excluded {id}: {why}");
    }
    let _ = writeln!(
        summary,
        "dataset at epsilon {epsilon}: {} records ({} low, {} high), {} uncertain dropped",
        c.kept, c.low, c.high, c.uncertain
    );
    print!("{summary}");

    if ds.is_empty() {
        return Err(Exit::data(format!("no labeled records at epsilon {epsilon}")).into());
    }
    if c.kept * 10 < c.windows {
        warn!("epsilon {epsilon} keeps only {} of {} windows", c.kept, c.windows);
    }
    let mut m = run_manifest("build", s.pick(g.seed, "seed", 0)?, started);
    m.set("corpus", a.corpus.display()).set("output", out.display());
    if let Ok(sm) = Manifest::load(&a.corpus.join("manifest.txt")) {
        for (k, v) in sm.entries() {
            m.set(format!("corpus.{k}"), v);
        }
    }
    m.set("finished_unix", unix_now());
    ds.save(&out, &m).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn model_list(s: &Settings, flags: &[String]) -> Result<Vec<ModelName>> {
    let raw: Vec<String> = if flags.is_empty() {
        s.pick_opt::<String>(None, "model")?
            .map(|v| v.split(',').map(str::to_string).collect())
            .unwrap_or_default()
    } else {
        flags.to_vec()
    };
    if raw.is_empty() {
        return Err(Exit::usage("no --model given").into());
    }
    raw.iter().map(|m| parse_model(m)).collect()
}

pub fn xval(g: &Global, s: &Settings, a: XvalArgs) -> Result<()> {
    let started = unix_now();
    let models = model_list(s, &a.models)?;
    let cfg = train_config(g, s, &a.train)?;
    let jobs = s.pick(g.jobs, "jobs", 1)?;
    let out = s.pick(g.out.clone(), "out", PathBuf::from("xval"))?;
    create_dir(&out)?;

    let mut reports: Vec<RunReport> = Vec::new();
    let mut failed = Vec::new();
    for path in &a.datasets {
        let ds = load_dataset(path)?;
        for &model in &models {
            let stem = format!("{model}_eps{:.2}", ds.epsilon);
            match cross_validate(model, &ds, &cfg, jobs) {
                Ok(cv) => {
                    let file = out.join(format!("report_{stem}.json"));
                    fs::write(&file, serde_json::to_string_pretty(&cv.report)?)?;
                    if a.save_checkpoints {
                        let dir = out.join("checkpoints");
                        create_dir(&dir)?;
                        for (video, params) in cv.params {
                            Checkpoint {
                                model,
                                seed: fold_seed(cfg.seed, &video),
                                params,
                            }
                            .save(&dir.join(format!("{stem}_{video}.afm")))?;
                        }
                    }
                    for f in &cv.report.failures {
                        failed.push(format!("{stem} fold {}: {}", f.video_id, f.error));
                    }
                    reports.push(cv.report);
                }
                Err(e) => failed.push(format!("{stem}: {e}")),
            }
        }
    }
    let table = format_table(&reports);
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");

    let mut m = run_manifest("xval", cfg.seed, started);
    m.set("datasets", a.datasets.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","))
        .set("models", models.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","))
        .set("jobs", jobs)
        .set("output", out.display());
    cfg.to_manifest(&mut m);
    m.set("failures", failed.len());
    finish_manifest(m, &out.join("manifest.txt"))?;
    if !failed.is_empty() {
        return Err(Exit::runtime(format!("{} failures: {}", failed.len(), failed.join("; "))).into());
    }
    Ok(())
}

pub fn train(g: &Global, s: &Settings, a: TrainArgs) -> Result<()> {
    let started = unix_now();
    let model = match s.pick_opt(a.model.clone(), "model")? {
        Some(m) => parse_model(&m)?,
        None => return Err(Exit::usage("no --model given").into()),
    };
    let cfg = train_config(g, s, &a.train)?;
    let out = s.pick(g.out.clone(), "out", PathBuf::from("model.afm"))?;
    let ds = load_dataset(&a.dataset)?;
    let (pool, test): (Vec<usize>, Vec<usize>) = match &a.test_video {
        Some(v) => {
            let (t, p): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| ds.video_id(&ds.records()[i]) == v);
            if t.is_empty() {
                return Err(Exit::data(format!("no records for test video `{v}`")).into());
            }
            (p, t)
        }
        None => ((0..ds.len()).collect(), Vec::new()),
    };
    let spec = build_architecture(model);
    let rng = Rng::new(cfg.seed);
    let (tr, val) = split_train_val(&pool, cfg.val_fraction, &mut rng.derive(0))?;
    let (params, curve) = train_model(&spec, &ds, &tr, &val, &cfg, &mut rng.derive(1))?;
    let ck = Checkpoint {
        model,
        seed: cfg.seed,
        params,
    };
    ck.save(&out).with_context(|| format!("writing {}", out.display()))?;

    let mut m = run_manifest("train", cfg.seed, started);
    m.set("model", model)
        .set("dataset", a.dataset.display())
        .set("epsilon", ds.epsilon)
        .set("output", out.display())
        .set("train_records", tr.len())
        .set("val_records", val.len())
        .set("epochs_run", curve.epochs.len())
        .set("best_epoch", curve.best_epoch)
        .set("best_val_loss", curve.best_val_loss)
        .set("stopped_early", curve.stopped_early);
    cfg.to_manifest(&mut m);
    println!(
        "{model}: {} epochs, best epoch {} (val loss {:.4}){}",
        curve.epochs.len(),
        curve.best_epoch,
        curve.best_val_loss,
        if curve.stopped_early { ", stopped early" } else { "" }
    );
    if let Some(v) = &a.test_video {
        let (_, preds) = predict(&spec, &ck.params, &ds, &test)?;
        let acc = accuracy(&ds, &test, &preds);
        let base = baseline_majority(&ds, &pool, &test)?;
        m.set("test_video", v).set("test_accuracy", acc).set("baseline_accuracy", base);
        println!("test video {v}: accuracy {:.1}%, baseline {:.1}%", 100.0 * acc, 100.0 * base);
    }
    finish_manifest(m, &PathBuf::from(format!("{}.manifest", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn accuracy(ds: &LabeledDataset, idx: &[usize], preds: &[usize]) -> f64 {
    let hits = idx
        .iter()
        .zip(preds)
        .filter(|(&i, &p)| ds.records()[i].class_index() == p)
        .count();
    hits as f64 / idx.len() as f64
}

fn select_videos(ds: &LabeledDataset, videos: &[String]) -> Result<Vec<usize>> {
    let known: BTreeSet<&str> = ds.videos.iter().map(|v| v.video_id.as_str()).collect();
    for v in videos {
        if !known.contains(v.as_str()) {
            warn!("video `{v}` is not in the dataset");
        }
    }
    Ok((0..ds.len())
        .filter(|&i| videos.is_empty() || videos.iter().any(|v| v == ds.video_id(&ds.records()[i])))
        .collect())
}

pub fn eval(g: &Global, s: &Settings, a: EvalArgs) -> Result<()> {
    let started = unix_now();
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let idx = select_videos(&ds, &a.video)?;
    if idx.is_empty() {
        return Err(Exit::data("no records selected").into());
    }
    let spec = ck.spec();
    let (loss, preds) = predict(&spec, &ck.params, &ds, &idx)?;
    let acc = accuracy(&ds, &idx, &preds);
    let high = idx.iter().filter(|&&i| ds.records()[i].class_index() == 1).count();
    let pred_high = preds.iter().filter(|&&p| p == 1).count();
    let doc = json!({
        "model": ck.model.as_str(),
        "checkpoint": a.checkpoint.display().to_string(),
        "dataset": a.dataset.display().to_string(),
        "epsilon": ds.epsilon,
        "records": idx.len(),
        "high_records": high,
        "predicted_high": pred_high,
        "accuracy": acc,
        "mean_loss": loss,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    if let Some(out) = s.pick_opt(g.out.clone(), "out")? {
        fs::write(&out, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", out.display()))?;
        let mut m = run_manifest("eval", ck.seed, started);
        m.set("checkpoint", a.checkpoint.display())
            .set("dataset", a.dataset.display())
            .set("videos", a.video.join(","))
            .set("output", out.display());
        finish_manifest(m, &PathBuf::from(format!("{}.manifest", out.display())))?;
    }
    Ok(())
}

fn class_name(c: usize) -> &'static str {
    if c == 1 {
        "high"
    } else {
        "low"
    }
}

pub fn gradcam(g: &Global, s: &Settings, a: GradcamArgs) -> Result<()> {
    let started = unix_now();
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let spec = ck.spec();
    let layer = match a.layer {
        Some(l) => l,
        None => default_layer(&spec)?,
    };
    let variant = match a.variant {
        VariantArg::GradientTimesActivation => CamVariant::GradientTimesActivation,
        VariantArg::PooledWeights => CamVariant::PooledWeights,
    };
    let classes: Vec<usize> = match a.class {
        ClassArg::Low => vec![0],
        ClassArg::High => vec![1],
        ClassArg::Both => vec![0, 1],
    };
    let mut idx: Vec<usize> = select_videos(&ds, &a.video)?
        .into_iter()
        .filter(|&i| {
            let r = &ds.records()[i];
            (a.window.is_empty() || a.window.contains(&r.window))
                && match a.label {
                    Some(ClassArg::Low) => r.class_index() == 0,
                    Some(ClassArg::High) => r.class_index() == 1,
                    _ => true,
                }
        })
        .collect();
    if let Some(n) = a.limit {
        idx.truncate(n);
    }
    if idx.is_empty() {
        return Err(Exit::data("selector matches no segments").into());
    }
    let out = s.pick(g.out.clone(), "out", PathBuf::from("gradcam"))?;
    create_dir(&out)?;
    let (_, preds) = predict(&spec, &ck.params, &ds, &idx)?;
    let mut index = String::from("directory\tvideo\twindow\tlabel\tpredicted\tclass\n");
    for (&i, &pred) in idx.iter().zip(&preds) {
        let r = &ds.records()[i];
        let video = ds.video_id(r);
        for &c in &classes {
            let mut h = gradcam_with(&spec, &ck.params, ds.input(r, ck.model.single_frame()), c, layer, variant)?;
            h.source = format!("{video}/{}", r.window);
            let name = format!("{video}_w{:05}_{}", r.window, class_name(c));
            write_heatmap(&h, ds.last_frame(r), &out.join(&name))?;
            let _ = writeln!(
                index,
                "{name}\t{video}\t{}\t{}\t{}\t{}",
                r.window,
                class_name(r.class_index()),
                class_name(pred),
                class_name(c)
            );
        }
    }
    fs::write(out.join("index.txt"), &index)?;
    let mut m = run_manifest("gradcam", ck.seed, started);
    m.set("checkpoint", a.checkpoint.display())
        .set("dataset", a.dataset.display())
        .set("model", ck.model)
        .set("layer", layer)
        .set("variant", format!("{:?}", a.variant))
        .set("segments", idx.len())
        .set("output", out.display());
    finish_manifest(m, &out.join("manifest.txt"))?;
    println!("wrote {} heatmaps to {}", idx.len() * classes.len(), out.display());
    Ok(())
}

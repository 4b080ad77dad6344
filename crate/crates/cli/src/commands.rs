//! Subcommand implementations.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde_json::{json, Map, Value};
use spmim::data::synth::synth_dataset;
use spmim::data::{read_manifest, load_manifest_images, resize_bilinear, save_gray_png, save_rgb_png};
use spmim::eval::gradcam::overlay;
use spmim::eval::evaluate;
use spmim::rng::{derive_seed, rng_from_seed};
use spmim::train::mask_levels;
use spmim::{
    apply_mask_zero, build_encoder, cross_validate, gradcam, holdout_split, load_checkpoint, load_image, quality_check,
    sample_mask, save_checkpoint, Checkpoint, Classifier, EpochRecord, Finetuner, ImageRecord, Metrics, MimModel, Mode,
    ModelSnapshot, PredictionSet, Pretrainer, Session, SparseExec, SpatialMask, Tensor,
};

use crate::config::{reference, MetricName, RunConfig};
use crate::{CliError, Command, Common};

const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const REPORT_FILE: &str = "report.jsonl";
const CONFIG_FILE: &str = "config.toml";
const BENCH_RATIOS: [f64; 4] = [0.0, 0.3, 0.6, 0.9];

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Pretrain { common, out, resume } => pretrain(&common, out, resume),
        Command::Finetune { common, out, resume, pretrained } => finetune(&common, out, resume, pretrained),
        Command::Evaluate { common, checkpoint, cv, holdout, pretrained } => {
            evaluate_cmd(&common, checkpoint, cv, holdout, pretrained)
        }
        Command::Reconstruct { common, checkpoint, out, mask_ratio } => reconstruct(&common, &checkpoint, &out, mask_ratio),
        Command::Gradcam { common, checkpoint, image, class, scale, out } => {
            gradcam_cmd(&common, &checkpoint, &image, class, scale, &out)
        }
        Command::Qc { common } => qc(&common),
        Command::Bench { common, size, batch, repeats } => bench(&common, size, batch, repeats),
        Command::Synth { out, count, seed, size, classes } => synth(&out, count, seed, size, classes),
        Command::Config => {
            print!("{}", reference());
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &common.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    Ok(cfg)
}

fn manifest_path(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.data
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Config("no manifest: set data.manifest or pass --manifest".into()))
}

fn fit_size(pixels: Tensor, size: usize) -> Result<Tensor, CliError> {
    if pixels.shape()[1..] == [size, size] {
        Ok(pixels)
    } else {
        Ok(resize_bilinear(&pixels, size, size)?)
    }
}

/// Loads the manifest images at the configured resolution, dropping those
/// that fail quality control when `data.qc_filter` is set.
fn load_dataset(cfg: &RunConfig) -> Result<Vec<ImageRecord>, CliError> {
    let entries = read_manifest(manifest_path(cfg)?)?;
    let mut out = Vec::with_capacity(entries.len());
    for mut rec in load_manifest_images(&entries)? {
        if cfg.data.qc_filter {
            let report = quality_check(&rec.pixels, &cfg.data.qc)?;
            if !report.pass {
                eprintln!("qc: skipping {} ({:?})", rec.path.display(), report.failed_checks);
                continue;
            }
        }
        rec.pixels = fit_size(rec.pixels, cfg.data.image_size)?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(CliError::Data("manifest yields no usable images".into()));
    }
    Ok(out)
}

fn labeled(records: &[ImageRecord]) -> Result<(Vec<Tensor>, Vec<usize>), CliError> {
    records
        .iter()
        .map(|r| match r.label {
            Some(l) => Ok((r.pixels.clone(), l)),
            None => Err(CliError::Data(format!("{}: missing label", r.path.display()))),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(|v| v.into_iter().unzip())
}

fn output_dir(out: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    out.or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: set output.dir or pass --out".into()))
}

/// Creates `dir`, or accepts it if empty. A non-empty directory is refused
/// unless `resume`; returns whether earlier state is present.
fn claim_dir(dir: &Path, resume: bool) -> Result<bool, CliError> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !resume {
            return Err(CliError::Data(format!(
                "{} already exists; pass --resume to continue or choose another directory",
                dir.display()
            )));
        }
        Ok(occupied)
    } else {
        fs::create_dir_all(dir)?;
        Ok(false)
    }
}

fn claim_fresh_dir(dir: &Path) -> Result<(), CliError> {
    claim_dir(dir, false).map(|_| ())
}

/// Keeps the first `epochs` report lines and reopens the file for appending.
fn open_report(dir: &Path, epochs: usize) -> Result<File, CliError> {
    let path = dir.join(REPORT_FILE);
    let kept: Vec<String> = match File::open(&path) {
        Ok(f) => BufReader::new(f).lines().take(epochs).collect::<Result<_, _>>()?,
        Err(_) => Vec::new(),
    };
    let mut f = File::create(&path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    drop(f);
    Ok(OpenOptions::new().append(true).open(path)?)
}

fn log_epoch(report: &mut File, rec: &EpochRecord) -> Result<(), CliError> {
    writeln!(report, "{}", json!({ "epoch": rec.epoch, "mean_loss": rec.mean_loss }))?;
    println!("epoch {} mean_loss {:.6} wall_ms {}", rec.epoch, rec.mean_loss, rec.wall_ms);
    Ok(())
}

fn check_resume_seed(ck: &Checkpoint, seed: u64) -> Result<(), CliError> {
    if ck.rng_seed != seed {
        return Err(CliError::Config(format!(
            "checkpoint was written with seed {}, not {seed}",
            ck.rng_seed
        )));
    }
    Ok(())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(dir.join(CONFIG_FILE), text)?;
    Ok(())
}

fn pretrain(common: &Common, out: Option<PathBuf>, resume: bool) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let dir = output_dir(out, &cfg)?;
    let images: Vec<Tensor> = load_dataset(&cfg)?.into_iter().map(|r| r.pixels).collect();
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let resuming = claim_dir(&dir, resume)? && ckpt_path.exists();
    let mut trainer = if resuming {
        let ck = load_checkpoint(&ckpt_path)?;
        check_resume_seed(&ck, common.seed)?;
        if ck.model != ModelSnapshot::Pretrain(cfg.model_spec()) {
            return Err(CliError::Config("checkpoint model differs from the configured model".into()));
        }
        Pretrainer::from_checkpoint(&ck, cfg.pretrain_config(), common.seed)?
    } else {
        write_config(&dir, &cfg)?;
        Pretrainer::new(&cfg.model_spec(), cfg.pretrain_config(), common.seed)?
    };
    let mut report = open_report(&dir, trainer.epoch)?;
    while trainer.epoch < cfg.training.pretrain_epochs {
        let (rec, _) = trainer.train_epoch(&images)?;
        log_epoch(&mut report, &rec)?;
        save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    }
    Ok(())
}

fn finetune(common: &Common, out: Option<PathBuf>, resume: bool, pretrained: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let dir = output_dir(out, &cfg)?;
    let (images, labels) = labeled(&load_dataset(&cfg)?)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let resuming = claim_dir(&dir, resume)? && ckpt_path.exists();
    let mut trainer = if resuming {
        let ck = load_checkpoint(&ckpt_path)?;
        check_resume_seed(&ck, common.seed)?;
        Finetuner::from_checkpoint(&ck, cfg.finetune_config(), common.seed)?
    } else {
        let pre = pretrained.as_deref().map(load_checkpoint).transpose()?;
        write_config(&dir, &cfg)?;
        Finetuner::new(&cfg.encoder, pre.as_ref(), cfg.finetune_config(), common.seed)?
    };
    let mut report = open_report(&dir, trainer.epoch)?;
    while trainer.epoch < cfg.training.finetune_epochs {
        let (rec, _) = trainer.train_epoch(&images, &labels)?;
        log_epoch(&mut report, &rec)?;
        save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    }
    Ok(())
}

fn metrics_json(m: &Metrics, names: &[MetricName]) -> Value {
    let mut obj = Map::new();
    for n in names {
        let (key, v) = match n {
            MetricName::Accuracy => ("accuracy", m.accuracy),
            MetricName::WeightedF1 => ("weighted_f1", m.weighted_f1),
            MetricName::Auc => ("auc", m.auc),
            MetricName::Kappa => ("kappa", m.kappa),
        };
        obj.insert(key.into(), json!(v));
    }
    Value::Object(obj)
}

fn load_classifier(path: &Path) -> Result<(Classifier, spmim::ParamStore), CliError> {
    let ck = load_checkpoint(path)?;
    let ModelSnapshot::Classifier(spec) = &ck.model else {
        return Err(CliError::Data(format!("{}: not a classifier checkpoint", path.display())));
    };
    let (model, mut store) = Classifier::build(spec, ck.rng_seed)?;
    ck.restore_into(&mut store, "")?;
    Ok((model, store))
}

fn finetune_and_predict(
    cfg: &RunConfig,
    pre: Option<&Checkpoint>,
    images: &[Tensor],
    labels: &[usize],
    train: &[usize],
    val: &[usize],
    seed: u64,
) -> spmim::Result<PredictionSet> {
    let pick = |idx: &[usize]| -> (Vec<Tensor>, Vec<usize>) { idx.iter().map(|&i| (images[i].clone(), labels[i])).unzip() };
    let (tx, ty) = pick(train);
    let (vx, vy) = pick(val);
    let (trainer, _) = spmim::finetune(&cfg.encoder, pre, &tx, &ty, &cfg.finetune_config(), seed)?;
    PredictionSet::new(trainer.predict_proba(&vx)?, vy, cfg.training.num_classes)
}

fn evaluate_cmd(
    common: &Common,
    checkpoint: Option<PathBuf>,
    cv: bool,
    holdout: bool,
    pretrained: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let (images, labels) = labeled(&load_dataset(&cfg)?)?;
    let names = &cfg.eval.metrics;
    if let Some(path) = checkpoint {
        let (model, store) = load_classifier(&path)?;
        let probs = model.predict_proba(&store, &images, cfg.training.batch_size)?;
        let m = evaluate(&PredictionSet::new(probs, labels, model.num_classes())?)?;
        println!("{}", metrics_json(&m, names));
        return Ok(());
    }
    let pre = pretrained.as_deref().map(load_checkpoint).transpose()?;
    if cv {
        let report = cross_validate(&labels, cfg.eval.folds, common.seed, |train, val, s| {
            finetune_and_predict(&cfg, pre.as_ref(), &images, &labels, train, val, s)
        })?;
        for (f, m) in report.folds.iter().enumerate() {
            println!("{}", json!({ "fold": f, "metrics": metrics_json(m, names) }));
        }
        println!(
            "{}",
            json!({ "mean": metrics_json(&report.mean, names), "std": metrics_json(&report.std, names) })
        );
    } else if holdout {
        let split = holdout_split(images.len(), cfg.eval.holdout_ratio, common.seed)?;
        let preds = finetune_and_predict(&cfg, pre.as_ref(), &images, &labels, &split.train, &split.validation, common.seed)?;
        println!("{}", metrics_json(&evaluate(&preds)?, names));
    }
    Ok(())
}

fn reconstruct(common: &Common, checkpoint: &Path, out: &Path, mask_ratio: Option<f64>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let ratio = mask_ratio.unwrap_or(cfg.masking.ratio);
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CliError::Config(format!("mask ratio {ratio} not in [0, 1]")));
    }
    let ck = load_checkpoint(checkpoint)?;
    let ModelSnapshot::Pretrain(spec) = &ck.model else {
        return Err(CliError::Data(format!("{}: not a pretraining checkpoint", checkpoint.display())));
    };
    let (model, mut store) = MimModel::build(spec, ck.rng_seed)?;
    ck.restore_into(&mut store, "")?;
    let records = load_dataset(&cfg)?;
    claim_fresh_dir(out)?;
    let mask_seed = cfg.masking.seed.unwrap_or(common.seed);
    for (i, rec) in records.iter().enumerate() {
        let (_, h, w) = (rec.pixels.shape()[0], rec.pixels.shape()[1], rec.pixels.shape()[2]);
        let grid = sample_mask(h / 32, w / 32, ratio, derive_seed(mask_seed, &[i as u64]))?;
        let masks = mask_levels(std::slice::from_ref(&grid), h, w)?;
        let x = Tensor::stack(std::slice::from_ref(&rec.pixels))?;
        let mut s = Session::new(&store, Mode::Eval, 0);
        let xv = s.input(x.clone());
        let fwd = model.forward(&mut s, xv, &masks, SparseExec::Compact)?;
        let recon = s.value(fwd.recon).clone();
        let loss = if grid.masked_count() > 0 {
            let l = s.graph.masked_mse(fwd.recon, &x, &masks[0])?;
            Some(s.value(l).item()?)
        } else {
            None
        };
        let masked = apply_mask_zero(&x, &masks[0])?;
        let panel = side_by_side(&[&x, &masked, &recon], h, w);
        let name = format!("{:05}_{}.png", i, rec.id);
        save_rgb_png(out.join(&name), &panel)?;
        println!("{}", json!({ "image": rec.path, "output": name, "masked_mse": loss }));
    }
    Ok(())
}

/// Places `[1, 3, h, w]` tensors left to right in one `[3, h, n*w]` image.
fn side_by_side(parts: &[&Tensor], h: usize, w: usize) -> Tensor {
    let n = parts.len();
    Tensor::from_fn(&[3, h, n * w], |i| {
        let (c, y, x) = (i / (h * n * w), (i / (n * w)) % h, i % (n * w));
        parts[x / w].data()[(c * h + y) * w + x % w].clamp(0.0, 1.0)
    })
}

fn gradcam_cmd(
    common: &Common,
    checkpoint: &Path,
    image: &Path,
    class: Option<usize>,
    scale: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let (model, store) = load_classifier(checkpoint)?;
    let pixels = fit_size(load_image(image)?.pixels, cfg.data.image_size)?;
    let probs = model.predict_proba(&store, std::slice::from_ref(&pixels), 1)?.remove(0);
    let predicted = PredictionSet::new(vec![probs.clone()], vec![0], model.num_classes())?.predicted()[0];
    let target = class.unwrap_or(predicted);
    let heat = gradcam(&model, &store, &pixels, target, scale.unwrap_or(cfg.eval.gradcam_scale))?;
    claim_fresh_dir(out)?;
    save_gray_png(out.join("heatmap.png"), &heat.map)?;
    save_rgb_png(out.join("overlay.png"), &overlay(&pixels, &heat.map, 0.5)?)?;
    println!(
        "{}",
        json!({ "image": image, "target_class": target, "predicted": predicted, "probabilities": probs, "scale": heat.scale })
    );
    Ok(())
}

fn qc(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    for entry in read_manifest(manifest_path(&cfg)?)? {
        let rec = load_image(&entry.path)?;
        let r = quality_check(&rec.pixels, &cfg.data.qc)?;
        println!(
            "{}",
            json!({
                "path": entry.path,
                "blur_score": r.blur_score,
                "contrast_score": r.contrast_score,
                "illumination_score": r.illumination_score,
                "artifact_score": r.artifact_score,
                "pass": r.pass,
                "failed_checks": r.failed_checks,
            })
        );
    }
    Ok(())
}

fn median_ms(mut f: impl FnMut() -> spmim::Result<()>, repeats: usize) -> spmim::Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

fn bench(common: &Common, size: usize, batch: usize, repeats: usize) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    if size == 0 || size % 32 != 0 || batch == 0 || repeats == 0 {
        return Err(CliError::Config("size must be a positive multiple of 32; batch and repeats positive".into()));
    }
    let (encoder, store, params) = build_encoder(&cfg.encoder, common.seed)?;
    let x = Tensor::uniform(&[batch, 3, size, size], 0.0, 1.0, &mut rng_from_seed(common.seed));
    let forward = |masks: Option<&[Arc<SpatialMask>]>| -> spmim::Result<()> {
        let mut s = Session::new(&store, Mode::Eval, 0);
        let xv = s.input(x.clone());
        encoder.forward(&mut s, xv, masks, SparseExec::Compact).map(|_| ())
    };
    let dense = median_ms(|| forward(None), repeats)?;
    println!("encoder: {params} parameters, input {batch}x3x{size}x{size}, median of {repeats}");
    println!("{:>10} {:>12} {:>12} {:>8}", "mask_ratio", "sparse_ms", "dense_ms", "speedup");
    for ratio in BENCH_RATIOS {
        let grids = (0..batch)
            .map(|i| sample_mask(size / 32, size / 32, ratio, derive_seed(common.seed, &[i as u64])))
            .collect::<spmim::Result<Vec<_>>>()?;
        let masks = mask_levels(&grids, size, size)?;
        let sparse = median_ms(|| forward(Some(&masks)), repeats)?;
        println!("{ratio:>10.1} {sparse:>12.2} {dense:>12.2} {:>8.2}", dense / sparse);
    }
    Ok(())
}

fn synth(out: &Path, count: usize, seed: u64, size: usize, classes: usize) -> Result<(), CliError> {
    let cfg = spmim::data::synth::SynthConfig { size, num_classes: classes, ..Default::default() };
    let (images, labels) = synth_dataset(&cfg, count, seed)?;
    claim_fresh_dir(out)?;
    let mut manifest = String::new();
    for (i, (img, label)) in images.iter().zip(&labels).enumerate() {
        let name = format!("img_{i:05}.png");
        save_rgb_png(out.join(&name), img)?;
        manifest.push_str(&format!("{name}\t{label}\n"));
    }
    fs::write(out.join("manifest.tsv"), manifest)?;
    println!("wrote {count} images to {}", out.display());
    Ok(())
}


use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vesselseg::eval::{report_csv, score_image, stratified_kfold, wilcoxon_csv, wilcoxon_signed_rank, ImageScores};
use vesselseg::imageio::{
    binary_raster, green_channel, labels_from_raster, normalize, probability_raster, read_pnm_file, write_pnm_file,
    FovMask, Plane, RasterImage,
};
use vesselseg::network::{load_model_with_meta, save_model_with_meta, ArchConfig, ParamSet};
use vesselseg::predict::{segment_image, Model, Segmentation};
use vesselseg::training::{train, EpochLog};
use vesselseg::wavelet::{build_input_stack, ChannelMode, InputStack};
use vesselseg::Real;

use crate::config::{
    resolve_channels, resolve_precision, resolve_predict, resolve_train, FileLayer, Precision, PredictSettings,
    TrainSettings, UsageError,
};
use crate::manifest::{load_fov, load_record, load_truth, LoadedImage, Manifest, Record};
use crate::synth::{generate, SynthConfig};
use crate::{CliError, Command, CrossvalArgs, DecomposeArgs, EvaluateArgs, PredictArgs, TrainArgs};

pub(crate) fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                count: a.count,
                width: a.width,
                height: a.height,
                seed: a.seed,
            };
            if cfg.count == 0 {
                return Err(CliError::Usage("--count must be at least 1".into()));
            }
            if cfg.width < crate::synth::MIN_SIDE || cfg.height < crate::synth::MIN_SIDE {
                return Err(CliError::Usage(format!(
                    "--width and --height must be at least {}",
                    crate::synth::MIN_SIDE
                )));
            }
            let m = generate(&cfg, &a.out)?;
            println!(
                "wrote {} images and {}",
                m.records.len(),
                a.out.join("manifest.tsv").display()
            );
            Ok(())
        }
        Command::Decompose(a) => decompose(a),
        Command::Train(a) => train_command(a),
        Command::Predict(a) => predict_command(a),
        Command::Evaluate(a) => evaluate_command(a),
        Command::Crossval(a) => crossval_command(a),
    }
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf, UsageError> {
    value.ok_or_else(|| UsageError(format!("--{flag} is required (or set `{flag}` in the config file)")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Normalized input stack of an image file.
fn load_stack<T: Real>(image: &Path, fov: &FovMask, mode: ChannelMode) -> Result<InputStack<T>> {
    let raster = read_pnm_file(image)?;
    if raster.width != fov.width || raster.height != fov.height {
        bail!(
            "{} is {}x{} but its FOV is {}x{}",
            image.display(),
            raster.width,
            raster.height,
            fov.width,
            fov.height
        );
    }
    let green = normalize(&green_channel::<T>(&raster), Some(fov))
        .with_context(|| format!("normalizing {}", image.display()))?;
    Ok(build_input_stack(&green, fov, mode).with_context(|| format!("decomposing {}", image.display()))?)
}

const CHANNEL_NAMES: [&str; 3] = ["v", "h", "d"];

fn decompose(a: DecomposeArgs) -> Result<(), CliError> {
    let file = FileLayer::load(a.config.as_deref())?;
    let mode = resolve_channels(&file, a.channels)?.unwrap_or(ChannelMode::D2);
    let raster = read_pnm_file(&a.image).map_err(anyhow::Error::from)?;
    let fov = match &a.fov {
        Some(p) => load_fov(p)?,
        None => FovMask::full(raster.width, raster.height),
    };
    let stack: InputStack<f64> = load_stack(&a.image, &fov, mode)?;
    let mut names = vec!["green".to_string()];
    for level in mode.detail_levels() {
        names.extend(CHANNEL_NAMES.iter().map(|n| format!("{n}{level}")));
    }
    create_dir(&a.out)?;
    let stem = a
        .image
        .file_stem()
        .map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let mut sidecar = String::from("channel\tname\tmin\tmax\n");
    for (i, (plane, name)) in stack.channels.iter().zip(&names).enumerate() {
        let (lo, hi) = plane
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = hi - lo;
        let data = plane
            .values
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - lo) / span * 65535.0).round() as u16
                } else {
                    0
                }
            })
            .collect();
        let img = RasterImage::new(plane.width, plane.height, 1, 16, data).map_err(anyhow::Error::from)?;
        write_pnm_file(&a.out.join(format!("{stem}_c{i}_{name}.pgm")), &img).map_err(anyhow::Error::from)?;
        sidecar.push_str(&format!("{i}\t{name}\t{lo}\t{hi}\n"));
    }
    write_text(&a.out.join(format!("{stem}_channels.tsv")), &sidecar)?;
    println!("wrote {} channels to {}", names.len(), a.out.display());
    Ok(())
}

fn model_bytes<T: Real>(params: &ParamSet<T>, arch: &ArchConfig, channels: ChannelMode) -> Vec<u8> {
    save_model_with_meta(params, arch, &[("channels".to_string(), channels.as_str().to_string())])
}

fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{}\n", EpochLog::csv_header());
    for e in log {
        s.push_str(&e.csv_line());
        s.push('\n');
    }
    s
}

/// Trains on `images`, writing `model.bin`, `train_log.csv` and any
/// periodic checkpoints into `dir`.
fn train_into<T: Real>(
    settings: &TrainSettings,
    images: &[LoadedImage<T>],
    dir: &Path,
    label: &str,
) -> Result<(Model<T>, Vec<EpochLog>)> {
    create_dir(dir)?;
    let data: Vec<_> = images.iter().map(|i| i.data.clone()).collect();
    let total = settings.train.epochs;
    let outcome = train(&settings.train, &settings.arch, &data, |e, params| {
        eprintln!(
            "{label}epoch {}/{total} loss {:.6} lr {:.6e}",
            e.epoch, e.mean_loss, e.lr
        );
        if settings.checkpoint_every > 0 && e.epoch % settings.checkpoint_every == 0 && e.epoch < total {
            let path = dir.join(format!("checkpoint_epoch{:03}.bin", e.epoch));
            fs::write(&path, model_bytes(params, &settings.arch, settings.channels)).map_err(|err| {
                vesselseg::Error::Io {
                    context: path.display().to_string(),
                    source: err,
                }
            })?;
        }
        Ok(())
    })?;
    let path = dir.join("model.bin");
    fs::write(&path, model_bytes(&outcome.params, &settings.arch, settings.channels))
        .with_context(|| format!("writing {}", path.display()))?;
    write_text(&dir.join("train_log.csv"), &log_csv(&outcome.log))?;
    Ok((Model::new(outcome.params, settings.arch.clone())?, outcome.log))
}

fn load_all<T: Real>(manifest: &Manifest, mode: ChannelMode) -> Result<Vec<LoadedImage<T>>> {
    manifest.records.iter().map(|r| load_record(r, mode)).collect()
}

fn train_command(a: TrainArgs) -> Result<(), CliError> {
    let file = FileLayer::load(a.config.as_deref())?;
    let manifest_path = required(file.pick_path("manifest", a.manifest), "manifest")?;
    let out = required(file.pick_path("out", a.out), "out")?;
    let settings = resolve_train(&file, a.train.into_flags())?;
    let manifest = Manifest::read(&manifest_path)?;
    match settings.precision {
        Precision::F32 => train_with::<f32>(&settings, &manifest, &out),
        Precision::F64 => train_with::<f64>(&settings, &manifest, &out),
    }?;
    println!("wrote {}", out.join("model.bin").display());
    Ok(())
}

fn train_with<T: Real>(settings: &TrainSettings, manifest: &Manifest, out: &Path) -> Result<()> {
    let images = load_all::<T>(manifest, settings.channels)?;
    train_into(settings, &images, out, "")?;
    Ok(())
}

fn write_segmentation<T: Real>(dir: &Path, name: &str, seg: &Segmentation<T>) -> Result<()> {
    write_pnm_file(
        &dir.join(format!("{name}_prob.pgm")),
        &probability_raster(seg.probabilities.vessel()),
    )?;
    write_pnm_file(&dir.join(format!("{name}_seg.pgm")), &binary_raster(&seg.binary))?;
    Ok(())
}

fn load_model<T: Real>(path: &Path, channels_flag: Option<ChannelMode>) -> Result<(Model<T>, ChannelMode)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (params, arch, meta) =
        load_model_with_meta::<T>(&bytes).with_context(|| format!("loading {}", path.display()))?;
    let stored = meta
        .iter()
        .find(|(k, _)| k == "channels")
        .and_then(|(_, v)| ChannelMode::parse(v));
    let mode = match (stored, channels_flag) {
        (Some(s), Some(f)) if s != f => {
            return Err(UsageError(format!(
                "model was trained on channel set {} but --channels {} was given",
                s.as_str(),
                f.as_str()
            ))
            .into())
        }
        (Some(s), _) => s,
        (None, Some(f)) => f,
        (None, None) => match arch.in_channels {
            1 => ChannelMode::Base,
            7 => ChannelMode::D1D2,
            n => return Err(UsageError(format!("model with {n} input channels: pass --channels")).into()),
        },
    };
    if mode.channel_count() != arch.in_channels {
        bail!(
            "channel set {} has {} channels, model expects {}",
            mode.as_str(),
            mode.channel_count(),
            arch.in_channels
        );
    }
    Ok((Model::new(params, arch)?, mode))
}

fn predict_command(a: PredictArgs) -> Result<(), CliError> {
    let file = FileLayer::load(a.config.as_deref())?;
    let settings = resolve_predict(&file, a.predict.mode, a.predict.threshold)?;
    let out = required(file.pick_path("out", a.out), "out")?;
    let channels = resolve_channels(&file, a.channels)?;
    let precision = resolve_precision(&file, a.precision)?;
    let inputs: Vec<(String, PathBuf, Option<PathBuf>)> = match (a.image, file.pick_path("manifest", a.manifest)) {
        (Some(img), _) => {
            let name = img
                .file_stem()
                .map_or("image".into(), |s| s.to_string_lossy().into_owned());
            vec![(name, img, a.fov)]
        }
        (None, Some(m)) => Manifest::read(&m)?
            .records
            .into_iter()
            .map(|r| (r.name(), r.image, Some(r.fov)))
            .collect(),
        (None, None) => return Err(CliError::Usage("give --manifest or --image".into())),
    };
    match precision {
        Precision::F32 => predict_with::<f32>(&a.model, channels, &inputs, &settings, &out),
        Precision::F64 => predict_with::<f64>(&a.model, channels, &inputs, &settings, &out),
    }
}

fn predict_with<T: Real>(
    model_path: &Path,
    channels: Option<ChannelMode>,
    inputs: &[(String, PathBuf, Option<PathBuf>)],
    settings: &PredictSettings,
    out: &Path,
) -> Result<(), CliError> {
    let (model, mode) = load_model::<T>(model_path, channels)?;
    create_dir(out)?;
    for (name, image, fov_path) in inputs {
        let fov = match fov_path {
            Some(p) => load_fov(p)?,
            None => {
                let r = read_pnm_file(image).map_err(anyhow::Error::from)?;
                FovMask::full(r.width, r.height)
            }
        };
        let stack = load_stack::<T>(image, &fov, mode)?;
        let seg = segment_image(&model, &stack, &fov, settings.mode, settings.threshold)
            .with_context(|| format!("segmenting {name}"))?;
        write_segmentation(out, name, &seg)?;
    }
    println!("wrote {} segmentations to {}", inputs.len(), out.display());
    Ok(())
}

/// Scores the saved maps of one record.
fn score_saved(record: &Record, predictions: &Path) -> Result<ImageScores> {
    let name = record.name();
    let prob_path = predictions.join(format!("{name}_prob.pgm"));
    let seg_path = predictions.join(format!("{name}_seg.pgm"));
    let prob_raster = read_pnm_file(&prob_path).with_context(|| format!("prediction for {name}"))?;
    if prob_raster.channels != 1 {
        bail!("{} must be grayscale", prob_path.display());
    }
    let max = f64::from(prob_raster.maxval());
    let prob = Plane::new(
        prob_raster.width,
        prob_raster.height,
        prob_raster.data.iter().map(|&v| f64::from(v) / max).collect(),
    )?;
    let binary: Plane<f64> =
        labels_from_raster(&read_pnm_file(&seg_path).with_context(|| format!("segmentation for {name}"))?)?;
    let truth: Plane<f64> = load_truth(&record.truth)?;
    let fov = load_fov(&record.fov)?;
    Ok(score_image(&name, &prob, &binary, &truth, &fov).with_context(|| format!("scoring {name}"))?)
}

fn evaluate_command(a: EvaluateArgs) -> Result<(), CliError> {
    let file = FileLayer::load(a.config.as_deref())?;
    let manifest = Manifest::read(&required(file.pick_path("manifest", a.manifest), "manifest")?)?;
    let out = file.pick_path("out", a.out);
    let rows = manifest
        .records
        .iter()
        .map(|r| score_saved(r, &a.predictions))
        .collect::<Result<Vec<_>>>()?;
    let report = report_csv(&rows);
    let mut comparison = None;
    if let Some(base) = &a.baseline {
        let base_rows = manifest
            .records
            .iter()
            .map(|r| score_saved(r, base))
            .collect::<Result<Vec<_>>>()?;
        comparison = Some(compare(&rows, &base_rows));
    }
    match out {
        Some(dir) => {
            create_dir(&dir)?;
            write_text(&dir.join("report.csv"), &report)?;
            if let Some(c) = &comparison {
                write_text(&dir.join("wilcoxon.csv"), c)?;
            }
            println!("wrote {}", dir.join("report.csv").display());
        }
        None => {
            print!("{report}");
            if let Some(c) = &comparison {
                print!("{c}");
            }
        }
    }
    Ok(())
}

/// `metric,W,p` rows for paired per-image scores; `NA` when every pair ties.
fn compare(rows: &[ImageScores], base: &[ImageScores]) -> String {
    let metrics: [(&str, fn(&ImageScores) -> f64); 4] = [
        ("Sn", |r| r.metrics.sn),
        ("Sp", |r| r.metrics.sp),
        ("Acc", |r| r.metrics.acc),
        ("AUC", |r| r.auc),
    ];
    let mut ok = Vec::new();
    let mut lines = String::new();
    for (name, f) in metrics {
        let pairs: Vec<(f64, f64)> = rows.iter().zip(base).map(|(a, b)| (f(a), f(b))).collect();
        match wilcoxon_signed_rank(&pairs) {
            Ok(r) => ok.push((name.to_string(), r)),
            Err(_) => lines.push_str(&format!("{name},NA,NA\n")),
        }
    }
    let mut out = wilcoxon_csv(&ok);
    out.push_str(&lines);
    out
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn crossval_command(a: CrossvalArgs) -> Result<(), CliError> {
    let file = FileLayer::load(a.config.as_deref())?;
    let manifest_path = required(file.pick_path("manifest", a.manifest), "manifest")?;
    let out = required(file.pick_path("out", a.out), "out")?;
    let settings = resolve_train(&file, a.train.into_flags())?;
    let predict = resolve_predict(&file, a.predict.mode, a.predict.threshold)?;
    let k = file.pick("k", a.k)?.unwrap_or(5);
    let manifest = Manifest::read(&manifest_path)?;
    if k == 0 || k > manifest.records.len() {
        return Err(CliError::Usage(format!(
            "--k {k} needs between 1 and {} folds",
            manifest.records.len()
        )));
    }
    let rows = match settings.precision {
        Precision::F32 => crossval_with::<f32>(&settings, &predict, k, &manifest, &out),
        Precision::F64 => crossval_with::<f64>(&settings, &predict, k, &manifest, &out),
    }?;
    let report = report_csv(&rows);
    write_text(&out.join("report.csv"), &report)?;
    if let Some(mean) = report.lines().last() {
        println!("{mean}");
    }
    Ok(())
}

fn crossval_with<T: Real>(
    settings: &TrainSettings,
    predict: &PredictSettings,
    k: usize,
    manifest: &Manifest,
    out: &Path,
) -> Result<Vec<ImageScores>> {
    create_dir(out)?;
    let strata: Vec<String> = manifest.records.iter().map(|r| r.stratum.clone()).collect();
    let split = stratified_kfold(&strata, k, &mut ChaCha8Rng::seed_from_u64(settings.train.seed))?;
    let mut folds_csv = String::from("image,stratum,fold\n");
    for (r, &f) in manifest.records.iter().zip(&split.assignments) {
        folds_csv.push_str(&format!("{},{},{f}\n", r.name(), r.stratum));
    }
    write_text(&out.join("folds.csv"), &folds_csv)?;

    let images = load_all::<T>(manifest, settings.channels)?;
    let mut scores: Vec<Option<ImageScores>> = vec![None; manifest.records.len()];
    let mut log_csv = String::from("fold,epoch,mean_loss,lr\n");
    let mut summary = String::from("fold,images,Sn,Sp,Acc,AUC\n");
    for fold in 0..k {
        let dir = out.join(format!("fold{fold}"));
        let train_idx = split.train_items(fold);
        let test_idx = split.test_items(fold);
        if train_idx.is_empty() {
            bail!("fold {fold} leaves no training images");
        }
        let mut fold_settings = settings.clone();
        fold_settings.train.seed = settings.train.seed.wrapping_add(fold as u64);
        let fold_images: Vec<LoadedImage<T>> = train_idx
            .iter()
            .map(|&i| LoadedImage {
                name: images[i].name.clone(),
                data: images[i].data.clone(),
            })
            .collect();
        let (model, log) = train_into(&fold_settings, &fold_images, &dir, &format!("fold {fold}: "))?;
        for e in &log {
            log_csv.push_str(&format!("{fold},{}\n", e.csv_line()));
        }
        let test = manifest.subset(&test_idx);
        let abs = Manifest {
            records: test
                .records
                .iter()
                .map(|r| Record {
                    image: absolute(&r.image),
                    truth: absolute(&r.truth),
                    fov: absolute(&r.fov),
                    stratum: r.stratum.clone(),
                })
                .collect(),
        };
        write_text(&dir.join("test.tsv"), &abs.to_text(None))?;
        let pred_dir = dir.join("pred");
        create_dir(&pred_dir)?;
        let mut fold_rows = Vec::new();
        for &i in &test_idx {
            let img = &images[i];
            let seg = segment_image(&model, &img.data.stack, &img.data.fov, predict.mode, predict.threshold)
                .with_context(|| format!("segmenting {}", img.name))?;
            write_segmentation(&pred_dir, &img.name, &seg)?;
            let s = score_saved(&manifest.records[i], &pred_dir)?;
            fold_rows.push(s.clone());
            scores[i] = Some(s);
        }
        if let Some((sn, sp, acc, auc)) = vesselseg::eval::mean_scores(&fold_rows) {
            summary.push_str(&format!(
                "{fold},{},{sn:.6},{sp:.6},{acc:.6},{auc:.6}\n",
                fold_rows.len()
            ));
        }
    }
    write_text(&out.join("train_log.csv"), &log_csv)?;
    write_text(&out.join("fold_summary.csv"), &summary)?;
    scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| anyhow!("image {i} was never tested")))
        .collect()
}

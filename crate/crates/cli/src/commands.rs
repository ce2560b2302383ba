use std::fs;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use voxsynth::checkpoint::{
    checkpoint_kind, load_checkpoint_expecting, load_patch_checkpoint, save_checkpoint,
    save_patch_checkpoint,
};
use voxsynth::classify::{
    extract_features, kfold_split, run_classification_experiment, SubjectFeatures, COLUMN_NAMES,
    LAMBDA_GRID,
};
use voxsynth::dataset::{read_dataset, write_dataset, PairedDataset};
use voxsynth::error::{Error, Result};
use voxsynth::metrics::{
    aggregate_metric, mae, psnr, roi_metrics, ssim_global, MetricsReport, RoiRow, SubjectRecord,
    SSIM_C1, SSIM_C2,
};
use voxsynth::optim::LossKind;
use voxsynth::patch::{build_patch_cnn, reconstruct, PatchCnn};
use voxsynth::pgm::export_slice_pgm;
use voxsynth::phantom::{gen_dataset, PhantomMode, PhantomSpec};
use voxsynth::rvol::{load_rvol, save_rvol};
use voxsynth::tensor::Tensor;
use voxsynth::train::{
    patch_steps_per_epoch, train_patch, train_unet, unet_steps_per_epoch, TrainOptions,
};
use voxsynth::unet::{build_unet, OptimConfig, UNetModel};
use voxsynth::volume::{LabelVolume, Volume};

use crate::config::Resolver;
use crate::{ClassifyArgs, EvaluateArgs, PhantomArgs, SynthesizeArgs, TrainArgs};

fn init_threads(threads: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

fn parse_loss(s: &str) -> Result<LossKind> {
    match s {
        "bce" => Ok(LossKind::Bce),
        "mse" => Ok(LossKind::Mse),
        other => Err(Error::InvalidConfig(format!("loss must be 'bce' or 'mse', got {other:?}"))),
    }
}

/// Writes `# `-prefixed provenance lines followed by the payload.
fn write_report(path: &Path, command: &str, resolver: &Resolver, payload: &str) -> Result<()> {
    let mut text = format!("# command={command}\n");
    for line in resolver.provenance_lines() {
        text.push_str("# ");
        text.push_str(&line);
        text.push('\n');
    }
    text.push_str(payload);
    fs::write(path, text)?;
    Ok(())
}

fn provenance_header(command: &str, resolver: &Resolver) -> Vec<String> {
    let mut lines = vec![format!("command={command}")];
    lines.extend(resolver.provenance_lines());
    lines
}

pub fn run_phantom(args: &PhantomArgs) -> Result<()> {
    let resolver = Resolver::new(args.common.config.as_deref())?;
    let common = args.common.resolve(&resolver)?;
    init_threads(common.threads);

    let n = resolver.get("n", args.n, 72usize)?;
    let size = resolver.get("size", args.size, common.profile.phantom_size())?;
    let mode = PhantomMode::parse(&resolver.get("mode", args.mode.clone(), "nonlocal".into())?)?;
    let amplitude = resolver.get("amplitude", args.amplitude, 0.5f64)?;
    let balance = resolver.get("balance", args.balance.clone(), "strict".to_string())?;
    let strict_balance = match balance.as_str() {
        "strict" => true,
        "loose" => false,
        other => {
            return Err(Error::InvalidConfig(format!(
                "balance must be 'strict' or 'loose', got {other:?}"
            )))
        }
    };

    let spec = PhantomSpec {
        size: [size; 3],
        n,
        strict_balance,
        seed: common.seed,
        mode,
        amplitude,
    };
    let ds = gen_dataset(&spec)?;
    let manifest = write_dataset(&ds, &common.out, &provenance_header("phantom", &resolver))?;
    println!(
        "wrote {} subjects ({size}x{size}x{size}, mode {}) to {}",
        ds.len(),
        mode.name(),
        manifest.display()
    );
    Ok(())
}

/// Splits subjects into train/validation indices: a k-fold rotation round
/// when `folds >= 2`, otherwise a contiguous tail holdout.
fn train_val_split(
    data: &PairedDataset,
    folds: usize,
    fold: usize,
    val_count: Option<usize>,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = data.len();
    if folds >= 2 {
        if fold >= folds {
            return Err(Error::InvalidConfig(format!(
                "fold index {fold} is out of range for {folds} folds"
            )));
        }
        let plan = kfold_split(n, folds, &data.labels(), seed)?;
        let round = plan.round(fold);
        let mut train = round.train;
        train.sort_unstable();
        let mut val = round.val;
        val.sort_unstable();
        Ok((train, val))
    } else {
        let val = val_count.unwrap_or_else(|| (n / 8).max(1).min(n - 1));
        if val >= n {
            return Err(Error::InvalidConfig(format!(
                "validation holdout {val} leaves no training subjects out of {n}"
            )));
        }
        Ok(((0..n - val).collect(), (n - val..n).collect()))
    }
}

fn write_log(path: &Path, header: &[String], lines: &[String], append: bool) -> Result<()> {
    if append && path.exists() {
        let mut f = OpenOptions::new().append(true).open(path)?;
        for line in lines {
            writeln!(f, "{line}")?;
        }
        return Ok(());
    }
    let mut text = String::new();
    for line in header {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    for line in lines {
        text.push_str(line);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let resolver = Resolver::new(args.common.config.as_deref())?;
    let common = args.common.resolve(&resolver)?;
    init_threads(common.threads);

    let method = resolver.get_required::<String>("method", args.method.clone())?;
    let data_path = resolver.get_path("data", args.data.clone())?;
    let epochs = resolver.get("epochs", args.epochs, 10usize)?;
    let loss = parse_loss(&resolver.get("loss", args.loss.clone(), "bce".into())?)?;
    let lr = resolver.get("lr", args.lr, 0.008f64)?;
    let folds = resolver.get("folds", args.folds, 0usize)?;
    let fold = resolver.get("fold", args.fold, 0usize)?;
    let val_count = resolver.get_optional("val_count", args.val_count)?;
    let resume = resolver.get_path_optional("resume", args.resume.clone())?;

    let data = read_dataset(&data_path)?;
    let (train_idx, val_idx) =
        train_val_split(&data, folds, fold, val_count, common.seed)?;

    fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join("model.unck");
    let log_path = common.out.join("train.log");

    let (final_record, step) = match method.as_str() {
        "unet" => {
            let profile_cfg = common.profile.unet_config();
            let mut cfg = profile_cfg.clone();
            cfg.depth = resolver.get("depth", args.depth, profile_cfg.depth)?;
            cfg.base_channels =
                resolver.get("base_channels", args.base_channels, profile_cfg.base_channels)?;
            let mut model = match &resume {
                Some(p) => load_checkpoint_expecting(p, &cfg)?,
                None => build_unet(&cfg, &OptimConfig { lr, ..OptimConfig::default() }, common.seed)?,
            };
            let spe = unet_steps_per_epoch(train_idx.len()) as u64;
            let done = (model.step / spe) as usize;
            let remaining = epochs.saturating_sub(done);
            let opts = TrainOptions { epochs: remaining, seed: common.seed, loss, ..TrainOptions::default() };
            let hist = train_unet(&mut model, &data, &train_idx, &val_idx, &opts)?;
            save_checkpoint(&model, &ckpt_path)?;
            write_log(
                &log_path,
                &provenance_header("train", &resolver),
                &hist.log_lines(),
                resume.is_some(),
            )?;
            (hist.records.last().cloned(), model.step)
        }
        "patch" => {
            let centers = resolver.get("centers", args.centers, 10_000usize)?;
            let batch = resolver.get("batch", args.batch, 32usize)?;
            let val_patches = resolver.get("val_patches", args.val_patches, 64usize)?;
            let mut model = match &resume {
                Some(p) => load_patch_checkpoint(p)?,
                None => build_patch_cnn::<f32>(
                    &OptimConfig { lr, ..OptimConfig::default() },
                    common.seed,
                ),
            };
            let spe = patch_steps_per_epoch(train_idx.len(), centers, batch.max(1)) as u64;
            let done = (model.step / spe) as usize;
            let remaining = epochs.saturating_sub(done);
            let opts = TrainOptions {
                epochs: remaining,
                seed: common.seed,
                loss,
                patch_centers_per_volume: centers,
                patch_batch: batch,
                val_patches_per_volume: val_patches,
            };
            let hist = train_patch(&mut model, &data, &train_idx, &val_idx, &opts)?;
            save_patch_checkpoint(&model, &ckpt_path)?;
            write_log(
                &log_path,
                &provenance_header("train", &resolver),
                &hist.log_lines(),
                resume.is_some(),
            )?;
            (hist.records.last().cloned(), model.step)
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "method must be 'unet' or 'patch', got {other:?}"
            )))
        }
    };

    match final_record {
        Some(r) => println!(
            "trained {method} to epoch {} (step {step}); train_loss={} val_loss={}",
            r.epoch, r.train_loss, r.val_loss
        ),
        None => println!("checkpoint already at {epochs} epochs (step {step}); nothing to do"),
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

enum LoadedModel {
    Unet(Box<UNetModel<f32>>),
    Patch(Box<PatchCnn<f32>>),
}

fn load_any_model(path: &Path) -> Result<LoadedModel> {
    match checkpoint_kind(path)?.as_str() {
        "unet" => {
            let model = voxsynth::checkpoint::load_checkpoint(path)?;
            Ok(LoadedModel::Unet(Box::new(model)))
        }
        "patch" => Ok(LoadedModel::Patch(Box::new(load_patch_checkpoint(path)?))),
        other => Err(Error::InvalidData(format!("checkpoint holds unknown model kind {other:?}"))),
    }
}

fn predict_volume(model: &LoadedModel, input: &Volume, stride: usize) -> Result<Volume> {
    match model {
        LoadedModel::Unet(m) => m.predict(Tensor::from_volume(input))?.to_volume(input.spacing),
        LoadedModel::Patch(m) => Ok(reconstruct(m, input, stride)?.volume),
    }
}

fn synth_name(id: &str) -> String {
    format!("{id}_synth.rvol")
}

pub fn run_synthesize(args: &SynthesizeArgs) -> Result<()> {
    let resolver = Resolver::new(args.common.config.as_deref())?;
    let common = args.common.resolve(&resolver)?;
    init_threads(common.threads);

    let ckpt = resolver.get_path("checkpoint", args.checkpoint.clone())?;
    let data_path = resolver.get_path("data", args.data.clone())?;
    let stride = resolver.get("stride", args.stride, 3usize)?;
    let slices = resolver.get_bool("slices", args.slices)?;

    let model = load_any_model(&ckpt)?;
    let data = read_dataset(&data_path)?;
    fs::create_dir_all(&common.out)?;

    let predictions: Vec<(String, Volume)> = data
        .subjects
        .par_iter()
        .map(|s| Ok((s.id.clone(), predict_volume(&model, &s.input, stride)?)))
        .collect::<Result<_>>()?;

    let mut listing = String::from("id,output\n");
    for (id, vol) in &predictions {
        let name = synth_name(id);
        save_rvol(vol, &common.out.join(&name))?;
        listing.push_str(&format!("{id},{name}\n"));
    }
    write_report(&common.out.join("predictions.csv"), "synthesize", &resolver, &listing)?;

    if slices {
        let slice_dir = common.out.join("slices");
        fs::create_dir_all(&slice_dir)?;
        for (s, (_, pred)) in data.subjects.iter().zip(&predictions) {
            for (view, axis) in [("axial", 2usize), ("sagittal", 0usize)] {
                let mid = s.input.dims[axis] / 2;
                export_slice_pgm(
                    &s.input,
                    axis,
                    mid,
                    &slice_dir.join(format!("{}_{view}_input.pgm", s.id)),
                )?;
                export_slice_pgm(
                    pred,
                    axis,
                    mid,
                    &slice_dir.join(format!("{}_{view}_synth.pgm", s.id)),
                )?;
                export_slice_pgm(
                    &s.target,
                    axis,
                    mid,
                    &slice_dir.join(format!("{}_{view}_target.pgm", s.id)),
                )?;
            }
        }
    }
    println!("synthesized {} volumes into {}", predictions.len(), common.out.display());
    Ok(())
}

fn parse_roi_list(spec: &str) -> Result<Vec<(i32, String)>> {
    let mut out = Vec::new();
    for item in spec.split(',') {
        let (id, name) = item.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("roi entry {item:?} is not id=name"))
        })?;
        let id: i32 = id
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("roi id {id:?} is not an integer")))?;
        out.push((id, name.trim().to_string()));
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("empty roi list".into()));
    }
    Ok(out)
}

fn load_label_volume(path: &Path) -> Result<LabelVolume> {
    let vol = load_rvol(path)?;
    let labels: Vec<i32> = vol.data.iter().map(|&v| v.round() as i32).collect();
    LabelVolume::new(vol.dims, labels)
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let resolver = Resolver::new(args.common.config.as_deref())?;
    let common = args.common.resolve(&resolver)?;
    init_threads(common.threads);

    let pred_dir = resolver.get_path("predictions", args.predictions.clone())?;
    let data_path = resolver.get_path("data", args.data.clone())?;
    let max_intensity = resolver.get("max_intensity", args.max_intensity, 1.0f64)?;
    let labels_path = resolver.get_path_optional("labels", args.labels.clone())?;
    let roi_spec = resolver.get_optional::<String>("roi", args.roi.clone())?;

    let data = read_dataset(&data_path)?;
    let pairs: Vec<(String, Volume, &Volume)> = data
        .subjects
        .iter()
        .map(|s| {
            let path = pred_dir.join(synth_name(&s.id));
            if !path.exists() {
                return Err(Error::InvalidData(format!(
                    "missing prediction for subject {}: {}",
                    s.id,
                    path.display()
                )));
            }
            Ok((s.id.clone(), load_rvol(&path)?, &s.target))
        })
        .collect::<Result<_>>()?;

    let records: Vec<SubjectRecord> = pairs
        .par_iter()
        .map(|(id, pred, target)| {
            Ok(SubjectRecord {
                subject: id.clone(),
                mae: mae(pred, target, None)?,
                psnr: psnr(pred, target, max_intensity, None)?,
                ssim: ssim_global(pred, target, SSIM_C1, SSIM_C2)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut roi_rows: Vec<RoiRow> = Vec::new();
    if let Some(labels_path) = &labels_path {
        let labels = load_label_volume(labels_path)?;
        let roi_list = match &roi_spec {
            Some(spec) => parse_roi_list(spec)?,
            None => {
                let mut ids: Vec<i32> =
                    labels.labels.iter().copied().filter(|&l| l != 0).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.into_iter().map(|id| (id, format!("roi{id}"))).collect()
            }
        };
        let per_subject: Vec<Vec<RoiRow>> = pairs
            .par_iter()
            .map(|(_, pred, target)| roi_metrics(pred, target, &labels, &roi_list, max_intensity))
            .collect::<Result<_>>()?;
        for (k, (id, name)) in roi_list.iter().enumerate() {
            let maes: Vec<f64> = per_subject.iter().map(|rows| rows[k].mae).collect();
            let psnrs: Vec<f64> = per_subject.iter().map(|rows| rows[k].psnr).collect();
            let mean_psnr = match aggregate_metric(&psnrs) {
                Ok(agg) => agg.mean,
                Err(_) => f64::INFINITY,
            };
            roi_rows.push(RoiRow {
                id: *id,
                name: name.clone(),
                mae: aggregate_metric(&maes)?.mean,
                psnr: mean_psnr,
            });
        }
    }

    let report = MetricsReport { records, roi_rows };
    fs::create_dir_all(&common.out)?;
    write_report(&common.out.join("metrics.csv"), "evaluate", &resolver, &report.to_csv())?;
    let summary = report.summary_text()?;
    write_report(&common.out.join("summary.txt"), "evaluate", &resolver, &summary)?;
    if !report.roi_rows.is_empty() {
        write_report(&common.out.join("roi.csv"), "evaluate", &resolver, &report.roi_csv())?;
    }
    print!("{summary}");
    Ok(())
}

pub fn run_classify(args: &ClassifyArgs) -> Result<()> {
    let resolver = Resolver::new(args.common.config.as_deref())?;
    let common = args.common.resolve(&resolver)?;
    init_threads(common.threads);

    let data_path = resolver.get_path("data", args.data.clone())?;
    let synth_dir = resolver.get_path("synth", args.synth.clone())?;
    let k = resolver.get("k", args.k, 9usize)?;
    let grid = resolver.get("grid", args.grid, 4usize)?;
    let lambdas = match resolver.get_optional::<String>("lambdas", args.lambdas.clone())? {
        Some(spec) => spec
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidConfig(format!("lambda {v:?} is not a number"))
                })
            })
            .collect::<Result<Vec<f64>>>()?,
        None => LAMBDA_GRID.to_vec(),
    };

    let data = read_dataset(&data_path)?;
    let features: Vec<SubjectFeatures> = data
        .subjects
        .par_iter()
        .map(|s| {
            let synth_path = synth_dir.join(synth_name(&s.id));
            if !synth_path.exists() {
                return Err(Error::InvalidData(format!(
                    "missing synthesized volume for subject {}: {}",
                    s.id,
                    synth_path.display()
                )));
            }
            let synth = load_rvol(&synth_path)?;
            Ok(SubjectFeatures {
                input: extract_features(&s.input, grid)?,
                target: extract_features(&s.target, grid)?,
                synth: extract_features(&synth, grid)?,
            })
        })
        .collect::<Result<_>>()?;

    let labels = data.labels();
    let plan = kfold_split(data.len(), k, &labels, common.seed)?;
    let report = run_classification_experiment(&features, &labels, &plan, &lambdas)?;

    fs::create_dir_all(&common.out)?;
    let table = report.to_csv();
    write_report(&common.out.join("classification.csv"), "classify", &resolver, &table)?;

    let mut folds = String::new();
    for col in &report.columns {
        let lams: Vec<String> = col.chosen_lambdas.iter().map(|l| l.to_string()).collect();
        folds.push_str(&format!("# lambda_{}={}\n", col.name, lams.join(";")));
    }
    folds.push_str("round,");
    folds.push_str(&COLUMN_NAMES.join(","));
    folds.push('\n');
    for r in 0..k {
        folds.push_str(&r.to_string());
        for col in &report.columns {
            folds.push_str(&format!(",{}", col.fold_accuracies[r]));
        }
        folds.push('\n');
    }
    write_report(&common.out.join("folds.csv"), "classify", &resolver, &folds)?;

    print!("{table}");
    Ok(())
}

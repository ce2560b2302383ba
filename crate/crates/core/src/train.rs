//! Epoch-based training loops for both synthesis methods, producing a
//! structured history whose per-epoch lines serialize as
//! `epoch,step,train_loss,val_loss`.
//!
//! All shuffling and patch sampling derives from per-(seed, epoch, subject)
//! ChaCha8 streams, so a fixed seed gives a bit-reproducible run and a resumed
//! run continues the epoch numbering stored in the checkpoint step counter.

use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::optim::{loss_by_kind, LossKind, Reduction};
use crate::patch::{extract_pair_at, sample_centers, stack_batch, PatchCnn};
use crate::rng::{seeded, shuffle};
use crate::tensor::Tensor;
use crate::unet::UNetModel;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Number of new epochs to run in this call.
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Random window centers sampled per volume per epoch (patch method).
    pub patch_centers_per_volume: usize,
    /// Windows per optimizer step (patch method).
    pub patch_batch: usize,
    /// Fixed per-volume validation windows (patch method); resampled from the
    /// same stream every epoch, so validation losses are comparable.
    pub val_patches_per_volume: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            seed: 0,
            loss: LossKind::Bce,
            patch_centers_per_volume: 10_000,
            patch_batch: 32,
            val_patches_per_volume: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.step, self.train_loss, self.val_loss)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn log_lines(&self) -> Vec<String> {
        self.records.iter().map(EpochRecord::log_line).collect()
    }
}

/// Trailing mean over the last `window` values (or fewer near the start).
pub fn smoothed_series(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = (i + 1).saturating_sub(w);
            let slice = &values[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Smoothed step-loss value at the end of each epoch: the trailing
/// window-mean of the per-step losses, read at epoch boundaries.
pub fn epoch_smoothed(step_losses: &[f64], steps_per_epoch: usize, window: usize) -> Vec<f64> {
    if steps_per_epoch == 0 {
        return Vec::new();
    }
    let smooth = smoothed_series(step_losses, window);
    smooth
        .iter()
        .enumerate()
        .filter(|(i, _)| (i + 1) % steps_per_epoch == 0)
        .map(|(_, &v)| v)
        .collect()
}

pub fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn check_indices(data: &PairedDataset, idx: &[usize], what: &str) -> Result<()> {
    for &i in idx {
        if i >= data.len() {
            return Err(Error::InvalidData(format!(
                "{what} index {i} is out of range for {} subjects",
                data.len()
            )));
        }
    }
    Ok(())
}

fn with_epoch_context(e: Error, epoch: u64) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

pub fn unet_steps_per_epoch(n_train: usize) -> usize {
    n_train
}

/// Mean full-volume loss of the model in evaluation mode over `idx`.
pub fn eval_unet_loss(
    model: &UNetModel<f32>,
    data: &PairedDataset,
    idx: &[usize],
    loss: LossKind,
) -> Result<f64> {
    check_indices(data, idx, "validation")?;
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0f64;
    for &i in idx {
        let s = &data.subjects[i];
        let y = model.predict(Tensor::from_volume(&s.input))?;
        let t = Tensor::from_volume(&s.target);
        sum += loss_by_kind(loss, &y, &t, Reduction::Mean)?.0;
    }
    Ok(sum / idx.len() as f64)
}

/// Runs `opts.epochs` additional epochs of one-volume-per-step training.
/// Epoch numbering continues from the checkpointed step count.
pub fn train_unet(
    model: &mut UNetModel<f32>,
    data: &PairedDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    if train_idx.is_empty() {
        return Err(Error::InvalidData("training set is empty".into()));
    }
    check_indices(data, train_idx, "training")?;
    check_indices(data, val_idx, "validation")?;
    let steps_per_epoch = unet_steps_per_epoch(train_idx.len()) as u64;
    let epochs_done = model.step / steps_per_epoch;

    let mut history = TrainHistory::default();
    for e in 0..opts.epochs {
        let epoch = epochs_done + e as u64 + 1;
        let mut order = train_idx.to_vec();
        shuffle(&mut seeded(stream_seed(opts.seed, epoch, 0)), &mut order);
        let mut sum = 0.0f64;
        for &i in &order {
            let s = &data.subjects[i];
            let x = Tensor::from_volume(&s.input);
            let t = Tensor::from_volume(&s.target);
            let l = model
                .train_step(x, &t, opts.loss)
                .map_err(|err| with_epoch_context(err, epoch))?;
            history.step_losses.push(l);
            sum += l;
        }
        history.records.push(EpochRecord {
            epoch,
            step: model.step,
            train_loss: sum / order.len() as f64,
            val_loss: eval_unet_loss(model, data, val_idx, opts.loss)?,
        });
    }
    Ok(history)
}

pub fn patch_steps_per_epoch(n_train: usize, centers_per_volume: usize, batch: usize) -> usize {
    n_train * centers_per_volume.div_ceil(batch)
}

/// Mean patch loss over a fixed, seed-derived set of validation windows.
pub fn eval_patch_loss(
    model: &PatchCnn<f32>,
    data: &PairedDataset,
    idx: &[usize],
    opts: &TrainOptions,
) -> Result<f64> {
    check_indices(data, idx, "validation")?;
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for &i in idx {
        let s = &data.subjects[i];
        let mut rng = seeded(stream_seed(opts.seed, 0, i as u64 + 1));
        let centers = sample_centers(s.input.dims, opts.val_patches_per_volume, &mut rng)?;
        for chunk in centers.chunks(opts.patch_batch.max(1)) {
            let pairs: Vec<_> =
                chunk.iter().map(|&c| extract_pair_at(&s.input, &s.target, c)).collect();
            let xb = stack_batch(&pairs.iter().map(|p| p.input.clone()).collect::<Vec<_>>())?;
            let tb = stack_batch(&pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?;
            let y = model.predict(xb)?;
            sum += loss_by_kind(opts.loss, &y, &tb, Reduction::Mean)?.0 * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(sum / count as f64)
}

/// Patch-method training: every epoch draws fresh random windows from each
/// training volume and steps on batches of them.
pub fn train_patch(
    model: &mut PatchCnn<f32>,
    data: &PairedDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    if train_idx.is_empty() {
        return Err(Error::InvalidData("training set is empty".into()));
    }
    if opts.patch_centers_per_volume == 0 {
        return Err(Error::InvalidConfig("patch_centers_per_volume must be positive".into()));
    }
    check_indices(data, train_idx, "training")?;
    check_indices(data, val_idx, "validation")?;
    let batch = opts.patch_batch.max(1);
    let steps_per_epoch =
        patch_steps_per_epoch(train_idx.len(), opts.patch_centers_per_volume, batch) as u64;
    let epochs_done = model.step / steps_per_epoch;

    let mut history = TrainHistory::default();
    for e in 0..opts.epochs {
        let epoch = epochs_done + e as u64 + 1;
        let mut order = train_idx.to_vec();
        shuffle(&mut seeded(stream_seed(opts.seed, epoch, 0)), &mut order);
        let mut sum = 0.0f64;
        let mut steps = 0usize;
        for &i in &order {
            let s = &data.subjects[i];
            let mut rng = seeded(stream_seed(opts.seed, epoch, i as u64 + 1));
            let centers =
                sample_centers(s.input.dims, opts.patch_centers_per_volume, &mut rng)?;
            for chunk in centers.chunks(batch) {
                let pairs: Vec<_> =
                    chunk.iter().map(|&c| extract_pair_at(&s.input, &s.target, c)).collect();
                let xb =
                    stack_batch(&pairs.iter().map(|p| p.input.clone()).collect::<Vec<_>>())?;
                let tb =
                    stack_batch(&pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?;
                let l = model
                    .train_step(xb, &tb, opts.loss)
                    .map_err(|err| with_epoch_context(err, epoch))?;
                history.step_losses.push(l);
                sum += l;
                steps += 1;
            }
        }
        history.records.push(EpochRecord {
            epoch,
            step: model.step,
            train_loss: sum / steps as f64,
            val_loss: eval_patch_loss(model, data, val_idx, opts)?,
        });
    }
    Ok(history)
}

//! Volume quality metrics: MAE, PSNR, global SSIM, ROI-masked variants, and
//! fold aggregation.
//!
//! SSIM here is the single-statistics form — one mean, variance, and
//! covariance per volume, population (divide-by-n) moments — not the sliding
//! window variant. The numerator is the product `(2 μx μy + c1)(2 σxy + c2)`;
//! a sum there would not evaluate to 1 for identical images, which is the
//! property everything downstream relies on.
//!
//! All accumulation is sequential f64, so results are independent of thread
//! count.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

/// Default `c1 = (0.01·L)²` with dynamic range L = 1.
pub const SSIM_C1: f64 = 1e-4;
/// Default `c2 = (0.03·L)²` with dynamic range L = 1.
pub const SSIM_C2: f64 = 9e-4;

fn check_pair(x: &Volume, y: &Volume) -> Result<()> {
    if x.dims != y.dims {
        return Err(Error::ShapeMismatch(format!(
            "volume dims {:?} != {:?}",
            x.dims, y.dims
        )));
    }
    Ok(())
}

fn check_mask(len: usize, mask: Option<&[bool]>) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for a volume of {len} voxels",
                m.len()
            )));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::InvalidData("mask selects no voxels".into()));
        }
    }
    Ok(())
}

fn masked_pairs<'a>(
    x: &'a Volume,
    y: &'a Volume,
    mask: Option<&'a [bool]>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    x.data
        .iter()
        .zip(&y.data)
        .enumerate()
        .filter(move |(i, _)| mask.map_or(true, |m| m[*i]))
        .map(|(_, (&a, &b))| (a as f64, b as f64))
}

/// Mean absolute difference over the masked voxels (all voxels if no mask).
pub fn mae(x: &Volume, y: &Volume, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(x, y)?;
    check_mask(x.data.len(), mask)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (a, b) in masked_pairs(x, y, mask) {
        sum += (a - b).abs();
        n += 1;
    }
    Ok(sum / n as f64)
}

fn mse(x: &Volume, y: &Volume, mask: Option<&[bool]>) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (a, b) in masked_pairs(x, y, mask) {
        let d = a - b;
        sum += d * d;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// `10·log10(max² / MSE)`. Identical volumes have MSE 0; the result is then
/// the positive-infinity sentinel, which [`aggregate_metric`] excludes.
pub fn psnr(x: &Volume, y: &Volume, max_intensity: f64, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(x, y)?;
    check_mask(x.data.len(), mask)?;
    if max_intensity <= 0.0 || !max_intensity.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "psnr max intensity must be positive and finite, got {max_intensity}"
        )));
    }
    let e = mse(x, y, mask)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_intensity * max_intensity / e).log10())
}

struct GlobalStats {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn global_stats(x: &Volume, y: &Volume, mask: Option<&[bool]>) -> GlobalStats {
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    let mut n = 0usize;
    for (a, b) in masked_pairs(x, y, mask) {
        sx += a;
        sy += b;
        n += 1;
    }
    let mean_x = sx / n as f64;
    let mean_y = sy / n as f64;
    let mut var_x = 0.0f64;
    let mut var_y = 0.0f64;
    let mut cov = 0.0f64;
    for (a, b) in masked_pairs(x, y, mask) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    GlobalStats {
        mean_x,
        mean_y,
        var_x: var_x / n as f64,
        var_y: var_y / n as f64,
        cov: cov / n as f64,
    }
}

/// Whole-volume SSIM:
/// `(2 μx μy + c1)(2 σxy + c2) / ((μx² + μy² + c1)(σx² + σy² + c2))`.
pub fn ssim_global(x: &Volume, y: &Volume, c1: f64, c2: f64) -> Result<f64> {
    ssim_global_masked(x, y, c1, c2, None)
}

/// SSIM restricted to masked voxels, so a patch reconstruction and a
/// full-volume prediction can be scored on the same support.
pub fn ssim_global_masked(
    x: &Volume,
    y: &Volume,
    c1: f64,
    c2: f64,
    mask: Option<&[bool]>,
) -> Result<f64> {
    check_pair(x, y)?;
    check_mask(x.data.len(), mask)?;
    let s = global_stats(x, y, mask);
    let num = (2.0 * s.mean_x * s.mean_y + c1) * (2.0 * s.cov + c2);
    let den = (s.mean_x * s.mean_x + s.mean_y * s.mean_y + c1) * (s.var_x + s.var_y + c2);
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiRow {
    pub id: i32,
    pub name: String,
    pub mae: f64,
    pub psnr: f64,
}

/// Per-ROI MAE and PSNR using the label volume as masks, ordered as
/// requested. Every requested id must select at least one voxel.
pub fn roi_metrics(
    x: &Volume,
    y: &Volume,
    labels: &LabelVolume,
    rois: &[(i32, String)],
    max_intensity: f64,
) -> Result<Vec<RoiRow>> {
    check_pair(x, y)?;
    if labels.dims != x.dims {
        return Err(Error::ShapeMismatch(format!(
            "label dims {:?} != volume dims {:?}",
            labels.dims, x.dims
        )));
    }
    let mut rows = Vec::with_capacity(rois.len());
    for (id, name) in rois {
        let mask: Vec<bool> = labels.labels.iter().map(|&l| l == *id).collect();
        if !mask.iter().any(|&b| b) {
            return Err(Error::InvalidData(format!("ROI id {id} ({name}) selects no voxels")));
        }
        rows.push(RoiRow {
            id: *id,
            name: name.clone(),
            mae: mae(x, y, Some(&mask))?,
            psnr: psnr(x, y, max_intensity, Some(&mask))?,
        });
    }
    Ok(rows)
}

/// Arithmetic mean and sample standard deviation (n−1). With fewer than two
/// values the deviation is absent.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(Error::InvalidData("cannot aggregate zero values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Ok((mean, None));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, Some((ss / (n - 1.0)).sqrt())))
}

/// Aggregation of a possibly infinite-valued metric column: non-finite
/// entries (the PSNR sentinel) are excluded and counted.
pub struct MetricAggregate {
    pub mean: f64,
    pub stddev: Option<f64>,
    pub excluded: usize,
}

pub fn aggregate_metric(values: &[f64]) -> Result<MetricAggregate> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = values.len() - finite.len();
    if finite.is_empty() {
        return Err(Error::InvalidData(
            "no finite values to aggregate (all PSNR values were infinite)".into(),
        ));
    }
    let (mean, stddev) = aggregate_folds(&finite)?;
    Ok(MetricAggregate { mean, stddev, excluded })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject: String,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub records: Vec<SubjectRecord>,
    pub roi_rows: Vec<RoiRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,mae,psnr,ssim\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.subject, r.mae, r.psnr, r.ssim));
        }
        out
    }

    pub fn roi_csv(&self) -> String {
        let mut out = String::from("roi_id,name,mae,psnr\n");
        for r in &self.roi_rows {
            out.push_str(&format!("{},{},{},{}\n", r.id, r.name, r.mae, r.psnr));
        }
        out
    }

    /// `(mae, psnr, ssim)` column aggregates. Infinite PSNR entries are
    /// excluded and surface in `excluded`; when every PSNR is infinite
    /// (exact-match predictions) the PSNR aggregate is itself infinite
    /// rather than an error.
    pub fn aggregates(&self) -> Result<[MetricAggregate; 3]> {
        let col = |f: fn(&SubjectRecord) -> f64| -> Vec<f64> {
            self.records.iter().map(f).collect()
        };
        let psnrs = col(|r| r.psnr);
        let psnr_agg = if !psnrs.is_empty() && psnrs.iter().all(|v| v.is_infinite()) {
            MetricAggregate { mean: f64::INFINITY, stddev: None, excluded: psnrs.len() }
        } else {
            aggregate_metric(&psnrs)?
        };
        Ok([
            aggregate_metric(&col(|r| r.mae))?,
            psnr_agg,
            aggregate_metric(&col(|r| r.ssim))?,
        ])
    }

    pub fn summary_text(&self) -> Result<String> {
        let [m, p, s] = self.aggregates()?;
        let fmt = |a: &MetricAggregate| match a.stddev {
            Some(sd) => format!("{:.6} +/- {:.6}", a.mean, sd),
            None => format!("{:.6}", a.mean),
        };
        let psnr_line = if p.mean.is_infinite() {
            "infinite (predictions match targets exactly)".to_string()
        } else {
            fmt(&p)
        };
        let mut text = format!(
            "subjects: {}\nmae:  {}\npsnr: {}\nssim: {}\n",
            self.records.len(),
            fmt(&m),
            psnr_line,
            fmt(&s)
        );
        if p.excluded > 0 && !p.mean.is_infinite() {
            text.push_str(&format!(
                "warning: {} PSNR value(s) were infinite (identical volumes) and were excluded\n",
                p.excluded
            ));
        }
        Ok(text)
    }
}

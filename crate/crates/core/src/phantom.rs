//! Synthetic paired volumes with a known, verifiable generative map.
//!
//! The input is a smooth blob field inside an ellipsoidal mask. The target is
//! derived from the input through box smoothing, a mirror coupling across the
//! mid-plane of axis 0 (nonlocal mode only), and a power nonlinearity — so the
//! input→target map is deterministic, nonlinear, and carries dependencies at
//! controllable distances that perturbation probes can measure directly.

use crate::dataset::{PairedDataset, Subject};
use crate::error::{Error, Result};
use crate::rng::{index, range_f64, seeded};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomMode {
    Local,
    Nonlocal,
}

impl PhantomMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(PhantomMode::Local),
            "nonlocal" => Ok(PhantomMode::Nonlocal),
            other => Err(Error::InvalidConfig(format!(
                "mode must be 'local' or 'nonlocal', got {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PhantomMode::Local => "local",
            PhantomMode::Nonlocal => "nonlocal",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub n: usize,
    /// With strict balance, odd `n` is an error; otherwise class 0 gets the
    /// extra subject.
    pub strict_balance: bool,
    pub seed: u64,
    pub mode: PhantomMode,
    /// Class-effect amplitude in [0, 1]: class-1 inputs have the fixed
    /// subregion scaled by (1 − amplitude).
    pub amplitude: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: [32, 32, 32],
            n: 72,
            strict_balance: true,
            seed: 0,
            mode: PhantomMode::Nonlocal,
            amplitude: 0.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&d| d < 8) {
            return Err(Error::InvalidConfig(format!(
                "phantom size {:?} is too small; every axis needs at least 8 voxels",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::InvalidConfig(format!(
                "amplitude must be in [0, 1], got {}",
                self.amplitude
            )));
        }
        Ok(())
    }
}

struct Blob {
    center: [f64; 3],
    sigma: [f64; 3],
    amp: f64,
}

/// Blob field inside the ellipsoid, normalized so the maximum is exactly 1.
fn base_input(seed: u64, size: [usize; 3]) -> Volume {
    let mut rng = seeded(seed);
    let n_blobs = 8 + index(&mut rng, 9);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            center: [
                range_f64(&mut rng, 0.15, 0.85) * (size[0] - 1) as f64,
                range_f64(&mut rng, 0.15, 0.85) * (size[1] - 1) as f64,
                range_f64(&mut rng, 0.15, 0.85) * (size[2] - 1) as f64,
            ],
            sigma: [
                range_f64(&mut rng, 0.06, 0.16) * size[0] as f64,
                range_f64(&mut rng, 0.06, 0.16) * size[1] as f64,
                range_f64(&mut rng, 0.06, 0.16) * size[2] as f64,
            ],
            amp: range_f64(&mut rng, 0.5, 1.0),
        })
        .collect();

    let c = [
        (size[0] - 1) as f64 / 2.0,
        (size[1] - 1) as f64 / 2.0,
        (size[2] - 1) as f64 / 2.0,
    ];
    let r = [0.48 * size[0] as f64, 0.48 * size[1] as f64, 0.48 * size[2] as f64];

    let mut data = vec![0.0f64; size[0] * size[1] * size[2]];
    let mut max = 0.0f64;
    let mut i = 0;
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let p = [x as f64, y as f64, z as f64];
                let e = ((p[0] - c[0]) / r[0]).powi(2)
                    + ((p[1] - c[1]) / r[1]).powi(2)
                    + ((p[2] - c[2]) / r[2]).powi(2);
                if e <= 1.0 {
                    let mut v = 0.0f64;
                    for b in &blobs {
                        let q = ((p[0] - b.center[0]) / b.sigma[0]).powi(2)
                            + ((p[1] - b.center[1]) / b.sigma[1]).powi(2)
                            + ((p[2] - b.center[2]) / b.sigma[2]).powi(2);
                        v += b.amp * (-0.5 * q).exp();
                    }
                    data[i] = v;
                    max = max.max(v);
                }
                i += 1;
            }
        }
    }
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let out: Vec<f32> = data.iter().map(|&v| (v * scale).clamp(0.0, 1.0) as f32).collect();
    Volume::new(size, [1.0; 3], out).expect("generated field matches its own dims")
}

/// 3³ box smoothing; border voxels average their in-bounds neighbors.
pub fn box3(vol: &Volume) -> Volume {
    let d = vol.dims;
    let mut out = vec![0.0f32; vol.data.len()];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let mut sum = 0.0f64;
                let mut count = 0u32;
                for dz in -1i64..=1 {
                    let zz = z as i64 + dz;
                    if zz < 0 || zz >= d[2] as i64 {
                        continue;
                    }
                    for dy in -1i64..=1 {
                        let yy = y as i64 + dy;
                        if yy < 0 || yy >= d[1] as i64 {
                            continue;
                        }
                        for dx in -1i64..=1 {
                            let xx = x as i64 + dx;
                            if xx < 0 || xx >= d[0] as i64 {
                                continue;
                            }
                            sum += vol.at(xx as usize, yy as usize, zz as usize) as f64;
                            count += 1;
                        }
                    }
                }
                out[vol.index(x, y, z)] = (sum / count as f64) as f32;
            }
        }
    }
    Volume::new(d, vol.spacing, out).expect("smoothed field matches input dims")
}

pub fn mirror_x(x: usize, dims: [usize; 3]) -> usize {
    dims[0] - 1 - x
}

/// The input→target generator map:
/// nonlocal) target(v) = clamp01( (box3(input)(v) · (0.5 + 0.5·input(mirror(v))))^1.5 )
/// local)    target(v) = clamp01( box3(input)(v)^1.5 )
pub fn target_map(input: &Volume, mode: PhantomMode) -> Volume {
    let sm = box3(input);
    let d = input.dims;
    let mut out = vec![0.0f32; input.data.len()];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let s = sm.at(x, y, z) as f64;
                let m = match mode {
                    PhantomMode::Nonlocal => {
                        0.5 + 0.5 * input.at(mirror_x(x, d), y, z) as f64
                    }
                    PhantomMode::Local => 1.0,
                };
                out[input.index(x, y, z)] = (s * m).powf(1.5).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Volume::new(d, input.spacing, out).expect("target matches input dims")
}

/// Deterministic (input, target) pair for one seed; no class effect applied.
pub fn gen_phantom_pair(seed: u64, spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let input = base_input(seed, spec.size);
    let target = target_map(&input, spec.mode);
    Ok((input, target))
}

/// The fixed subregion carrying the class signal: the central half-box
/// [size/4, 3·size/4) on every axis. At 32³ with a 4-grid feature extractor
/// this covers exactly eight feature blocks, so block-mean classifiers can
/// pool the class signal across blocks.
pub fn class_subregion(size: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    (
        [size[0] / 4, size[1] / 4, size[2] / 4],
        [3 * size[0] / 4, 3 * size[1] / 4, 3 * size[2] / 4],
    )
}

fn apply_class_effect(input: &mut Volume, amplitude: f64) {
    let (lo, hi) = class_subregion(input.dims);
    let scale = (1.0 - amplitude) as f32;
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                *input.at_mut(x, y, z) *= scale;
            }
        }
    }
}

/// Generates `n` subjects with alternating classes (subject `i` has class
/// `i % 2`); class-1 inputs get the subregion scaled by (1 − amplitude) and
/// their targets are recomputed from the modified input, so the class effect
/// propagates through the generator map. Per-subject seed is `seed + i`.
pub fn gen_dataset(spec: &PhantomSpec) -> Result<PairedDataset> {
    spec.validate()?;
    if spec.n < 2 {
        return Err(Error::InvalidConfig(format!("dataset needs at least 2 subjects, got {}", spec.n)));
    }
    if spec.strict_balance && spec.n % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "strict class balance requires even n, got {}",
            spec.n
        )));
    }
    let subjects: Vec<Subject> = (0..spec.n)
        .map(|i| {
            let class = (i % 2) as u8;
            let mut input = base_input(spec.seed.wrapping_add(i as u64), spec.size);
            if class == 1 {
                apply_class_effect(&mut input, spec.amplitude);
            }
            let target = target_map(&input, spec.mode);
            Subject { id: format!("s{i:03}"), class, input, target }
        })
        .collect();
    Ok(PairedDataset { subjects })
}

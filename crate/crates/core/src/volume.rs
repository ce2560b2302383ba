//! In-memory scalar volumes and the basic geometry transforms used by the
//! preprocessing pipeline.

use crate::error::{Error, Result};

/// A dense 3-D scalar field.
///
/// `data` is row-major with the x index fastest: voxel `(x, y, z)` lives at
/// `x + dims[0] * (y + dims[1] * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Voxel spacing in millimetres per axis.
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDimensions(format!("zero extent in {dims:?}")));
        }
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, dims {:?} need {}",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Volume { dims, spacing, data })
    }

    /// All-zero volume with unit spacing.
    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, z: usize) -> &mut f32 {
        let i = self.index(x, y, z);
        &mut self.data[i]
    }
}

/// Integer label field aligned with a [`Volume`], used for region-of-interest
/// metric tables.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub labels: Vec<i32>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<i32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "label data has {} values, dims {:?} need {}",
                labels.len(),
                dims,
                n
            )));
        }
        Ok(LabelVolume { dims, labels })
    }

    /// Converts a scalar volume whose voxels hold exact small integers.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let mut labels = Vec::with_capacity(vol.len());
        for &v in &vol.data {
            let r = v.round();
            if !v.is_finite() || (v - r).abs() > 1e-4 || r.abs() > 1e6 {
                return Err(Error::InvalidData(format!(
                    "label volume voxel {v} is not an integer label"
                )));
            }
            labels.push(r as i32);
        }
        Ok(LabelVolume { dims: vol.dims, labels })
    }
}

/// Rescales into `[0, 1]` by the volume's own min/max.
///
/// A constant volume maps to all zeros. Non-finite voxels are rejected rather
/// than silently propagated into the network.
pub fn normalize_minmax(vol: &Volume) -> Result<Volume> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &vol.data {
        if !v.is_finite() {
            return Err(Error::NonFinite("volume voxel during normalization".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let data = if range == 0.0 {
        vec![0.0; vol.len()]
    } else {
        vol.data.iter().map(|&v| (v - lo) / range).collect()
    };
    Ok(Volume {
        dims: vol.dims,
        spacing: vol.spacing,
        data,
    })
}

/// Downsamples by an integer factor per axis using block means.
///
/// Every factor must divide its axis exactly; partial blocks would silently
/// change the statistics the metrics depend on. Spacing scales up by the
/// factor so world extent is preserved.
pub fn downsample_meanpool(vol: &Volume, factors: [usize; 3]) -> Result<Volume> {
    if factors.iter().any(|&f| f == 0) {
        return Err(Error::InvalidConfig("downsample factor must be positive".into()));
    }
    for a in 0..3 {
        if vol.dims[a] % factors[a] != 0 {
            return Err(Error::ShapeMismatch(format!(
                "axis {a} extent {} not divisible by factor {}",
                vol.dims[a], factors[a]
            )));
        }
    }
    let od = [
        vol.dims[0] / factors[0],
        vol.dims[1] / factors[1],
        vol.dims[2] / factors[2],
    ];
    let block = (factors[0] * factors[1] * factors[2]) as f64;
    let mut data = vec![0.0f32; od[0] * od[1] * od[2]];
    for oz in 0..od[2] {
        for oy in 0..od[1] {
            for ox in 0..od[0] {
                let mut sum = 0.0f64;
                for dz in 0..factors[2] {
                    for dy in 0..factors[1] {
                        for dx in 0..factors[0] {
                            sum += vol.at(
                                ox * factors[0] + dx,
                                oy * factors[1] + dy,
                                oz * factors[2] + dz,
                            ) as f64;
                        }
                    }
                }
                data[ox + od[0] * (oy + od[1] * oz)] = (sum / block) as f32;
            }
        }
    }
    Ok(Volume {
        dims: od,
        spacing: [
            vol.spacing[0] * factors[0] as f32,
            vol.spacing[1] * factors[1] as f32,
            vol.spacing[2] * factors[2] as f32,
        ],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_x_fastest() {
        let mut v = Volume::zeros([3, 2, 2]);
        *v.at_mut(1, 0, 0) = 1.0;
        *v.at_mut(0, 1, 0) = 2.0;
        *v.at_mut(0, 0, 1) = 3.0;
        assert_eq!(v.data[1], 1.0);
        assert_eq!(v.data[3], 2.0);
        assert_eq!(v.data[6], 3.0);
    }

    #[test]
    fn normalize_maps_to_unit_range() {
        let v = Volume::new([2, 2, 1], [1.0; 3], vec![-2.0, 0.0, 2.0, 6.0]).unwrap();
        let n = normalize_minmax(&v).unwrap();
        assert_eq!(n.data, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_volume_is_zeros() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![5.0, 5.0]).unwrap();
        let n = normalize_minmax(&v).unwrap();
        assert_eq!(n.data, vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_nan() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![f32::NAN, 0.0]).unwrap();
        assert!(normalize_minmax(&v).is_err());
    }

    #[test]
    fn meanpool_averages_blocks() {
        // 4x2x2 volume; factor (2,2,2) leaves a 2x1x1 result of block means.
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let v = Volume::new([4, 2, 2], [1.0; 3], data).unwrap();
        let d = downsample_meanpool(&v, [2, 2, 2]).unwrap();
        assert_eq!(d.dims, [2, 1, 1]);
        // First block: x in {0,1}, y in {0,1}, z in {0,1}.
        let b0 = (0.0 + 1.0 + 4.0 + 5.0 + 8.0 + 9.0 + 12.0 + 13.0) / 8.0;
        let b1 = (2.0 + 3.0 + 6.0 + 7.0 + 10.0 + 11.0 + 14.0 + 15.0) / 8.0;
        assert_eq!(d.data, vec![b0, b1]);
        assert_eq!(d.spacing, [2.0, 2.0, 2.0]);
    }

    #[test]
    fn meanpool_rejects_nondivisible() {
        let v = Volume::zeros([5, 4, 4]);
        assert!(downsample_meanpool(&v, [2, 2, 2]).is_err());
    }

    #[test]
    fn labels_from_integer_volume() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 3.0]).unwrap();
        let l = LabelVolume::from_volume(&v).unwrap();
        assert_eq!(l.labels, vec![0, 3]);
        let bad = Volume::new([1, 1, 1], [1.0; 3], vec![0.5]).unwrap();
        assert!(LabelVolume::from_volume(&bad).is_err());
    }
}

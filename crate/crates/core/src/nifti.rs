//! Minimal NIfTI-1 reader: uncompressed single-file `.nii`, datatypes uint8 /
//! int16 / float32, both byte orders.
//!
//! This is deliberately not a general NIfTI library. It reads exactly what the
//! preprocessing pipeline produces upstream (registered, skull-stripped,
//! resampled volumes) and rejects everything else loudly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

const HEADER_LEN: usize = 348;

// Field offsets in the fixed NIfTI-1 header.
const OFF_SIZEOF_HDR: usize = 0;
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum ByteOrder {
    Little,
    Big,
}

struct RawHeader<'a> {
    bytes: &'a [u8],
    order: ByteOrder,
}

impl<'a> RawHeader<'a> {
    fn u32_at(&self, off: usize) -> u32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.order {
            ByteOrder::Little => u32::from_le_bytes(b),
            ByteOrder::Big => u32::from_be_bytes(b),
        }
    }

    fn i16_at(&self, off: usize) -> i16 {
        let b: [u8; 2] = self.bytes[off..off + 2].try_into().unwrap();
        match self.order {
            ByteOrder::Little => i16::from_le_bytes(b),
            ByteOrder::Big => i16::from_be_bytes(b),
        }
    }

    fn f32_at(&self, off: usize) -> f32 {
        f32::from_bits(self.u32_at(off))
    }
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    parse_nifti(&bytes)
}

pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::CompressedInput);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }

    let order = detect_order(bytes)?;
    let hdr = RawHeader { bytes, order };

    let magic = &bytes[OFF_MAGIC..OFF_MAGIC + 4];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::MalformedHeader(format!("unrecognized magic {magic:?}")));
    }

    let ndim = hdr.i16_at(OFF_DIM);
    let mut dim = [1i16; 7];
    for (i, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        *d = hdr.i16_at(OFF_DIM + 2 * (i + 1));
    }
    // Trailing axes beyond the first three must be singleton: this reader
    // produces plain 3-D volumes.
    for (i, &d) in dim.iter().enumerate() {
        if i < (ndim as usize) && d <= 0 {
            return Err(Error::InvalidDimensions(format!("dim[{}] = {d}", i + 1)));
        }
        if i >= 3 && d > 1 {
            return Err(Error::InvalidDimensions(format!(
                "axis {} has extent {d}; only 3-D volumes are supported",
                i + 1
            )));
        }
    }
    let dims = [dim[0] as usize, dim[1] as usize, dim[2] as usize];

    let datatype = hdr.i16_at(OFF_DATATYPE);
    let elem_size = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };

    let vox_offset = hdr.f32_at(OFF_VOX_OFFSET);
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::MalformedHeader(format!("vox_offset {vox_offset}")));
    }
    let data_start = vox_offset as usize;

    let mut spacing = [1.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = hdr.f32_at(OFF_PIXDIM + 4 * (i + 1));
        if p.is_finite() && p > 0.0 {
            *s = p;
        }
    }

    let scl_slope = hdr.f32_at(OFF_SCL_SLOPE);
    let scl_inter = hdr.f32_at(OFF_SCL_INTER);
    let scale = |raw: f32| -> f32 {
        if scl_slope != 0.0 && scl_slope.is_finite() {
            raw * scl_slope + scl_inter
        } else {
            raw
        }
    };

    let n = dims[0] * dims[1] * dims[2];
    let need = data_start + n * elem_size;
    if bytes.len() < need {
        return Err(Error::Truncated {
            kind: "NIfTI",
            detail: format!("file has {} bytes, voxel data needs {need}", bytes.len()),
        });
    }
    let payload = &bytes[data_start..need];

    let mut data = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => {
            for &b in payload {
                data.push(scale(b as f32));
            }
        }
        DT_INT16 => {
            for c in payload.chunks_exact(2) {
                let raw = match order {
                    ByteOrder::Little => i16::from_le_bytes([c[0], c[1]]),
                    ByteOrder::Big => i16::from_be_bytes([c[0], c[1]]),
                };
                data.push(scale(raw as f32));
            }
        }
        DT_FLOAT32 => {
            for c in payload.chunks_exact(4) {
                let bits = match order {
                    ByteOrder::Little => u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                    ByteOrder::Big => u32::from_be_bytes([c[0], c[1], c[2], c[3]]),
                };
                data.push(scale(f32::from_bits(bits)));
            }
        }
        _ => unreachable!(),
    }

    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("voxel value in NIfTI payload".into()));
    }

    Volume::new(dims, spacing, data)
}

/// Resolves byte order: `sizeof_hdr` must read 348 and `dim[0]` must land in
/// 1..=7 under the same order. Each failure mode gets its own error so a
/// caller can tell a garbage file from a legitimate 4-D scan.
fn detect_order(bytes: &[u8]) -> Result<ByteOrder> {
    let mut size_ok = None;
    for order in [ByteOrder::Little, ByteOrder::Big] {
        let hdr = RawHeader { bytes, order };
        if hdr.u32_at(OFF_SIZEOF_HDR) == HEADER_LEN as u32 {
            size_ok = Some(order);
            let ndim = hdr.i16_at(OFF_DIM);
            if (1..=7).contains(&ndim) {
                return Ok(order);
            }
        }
    }
    match size_ok {
        Some(order) => {
            let hdr = RawHeader { bytes, order };
            Err(Error::InvalidDimensions(format!(
                "dim[0] = {} is outside 1..=7",
                hdr.i16_at(OFF_DIM)
            )))
        }
        None => Err(Error::MalformedHeader(
            "sizeof_hdr is not 348 under either byte order".into(),
        )),
    }
}

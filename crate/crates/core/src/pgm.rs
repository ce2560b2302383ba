//! Binary PGM export of axis-aligned slices, for eyeballing inputs and
//! synthesized outputs without a viewer that understands volumes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Writes the 2-D slice `index` along `axis` as binary PGM (maxval 255).
///
/// Slice orientation: the remaining axes keep their (x, y, z) order, first as
/// image columns, second as rows. Values must already be in `[0, 1]`; a byte
/// is `round(v * 255)` with halves rounded away from zero.
pub fn export_slice_pgm(vol: &Volume, axis: usize, index: usize, path: &Path) -> Result<()> {
    let bytes = render_slice_pgm(vol, axis, index)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Same as [`export_slice_pgm`] but returns the file image, which is what the
/// round-trip tests consume.
pub fn render_slice_pgm(vol: &Volume, axis: usize, index: usize) -> Result<Vec<u8>> {
    if axis > 2 {
        return Err(Error::InvalidConfig(format!("slice axis {axis} not in 0..=2")));
    }
    if index >= vol.dims[axis] {
        return Err(Error::InvalidConfig(format!(
            "slice index {index} out of range for axis {axis} with extent {}",
            vol.dims[axis]
        )));
    }
    for &v in &vol.data {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidData(format!(
                "voxel {v} outside [0,1]; normalize before PGM export"
            )));
        }
    }

    let (ax_w, ax_h) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (vol.dims[ax_w], vol.dims[ax_h]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    let mut coord = [0usize; 3];
    coord[axis] = index;
    for row in 0..h {
        coord[ax_h] = row;
        for col in 0..w {
            coord[ax_w] = col;
            let v = vol.at(coord[0], coord[1], coord[2]);
            let scaled = (v * 255.0).round();
            out.push(scaled.clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Parses the header + payload produced by [`render_slice_pgm`]. Test support
/// for round-trip checks; not a general PGM reader.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::InvalidData("PGM header incomplete".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::InvalidData("PGM header not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(Error::InvalidData("not a binary PGM".into()));
    }
    let dims_line = lines
        .next()
        .ok_or_else(|| Error::InvalidData("PGM missing dimensions".into()))?;
    let mut parts = dims_line.split_whitespace();
    let w: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidData("bad PGM width".into()))?;
    let h: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidData("bad PGM height".into()))?;
    if lines.next() != Some("255") {
        return Err(Error::InvalidData("PGM maxval must be 255".into()));
    }
    let payload = bytes[header_end + 1..].to_vec();
    if payload.len() != w * h {
        return Err(Error::InvalidData(format!(
            "PGM payload is {} bytes, expected {}",
            payload.len(),
            w * h
        )));
    }
    Ok((w, h, payload))
}

//! RVOL: the toolkit's own little-endian volume container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "RVOL"            4 bytes magic
//! version           u32, currently 1
//! dims              3 x u32 (x, y, z)
//! spacing           3 x f32
//! data              dims[0]*dims[1]*dims[2] x f32, x fastest
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

const MAGIC: &[u8; 4] = b"RVOL";
const VERSION: u32 = 1;

pub fn save_rvol(vol: &Volume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rvol(vol, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_rvol(vol: &Volume, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for &d in &vol.dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidDimensions(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &s in &vol.spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    for &v in &vol.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_rvol(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    read_rvol(&mut r)
}

pub fn read_rvol(r: &mut impl Read) -> Result<Volume> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { kind: "RVOL", expected: "RVOL" });
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { kind: "RVOL", found: version });
    }
    let dims = [
        read_u32(r, "dims")? as usize,
        read_u32(r, "dims")? as usize,
        read_u32(r, "dims")? as usize,
    ];
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidDimensions(format!("zero extent in {dims:?}")));
    }
    let mut spacing = [0.0f32; 3];
    for s in &mut spacing {
        *s = read_f32(r, "spacing")?;
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or_else(|| Error::InvalidDimensions(format!("dims {dims:?} overflow")))?;
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes, "voxel data")?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(dims, spacing, data)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated { kind: "RVOL", detail: format!("while reading {what}") }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(f32::from_le_bytes(b))
}

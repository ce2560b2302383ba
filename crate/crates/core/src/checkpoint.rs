//! UNCK checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "UNCK" | u32 version | u32 config_len, config bytes | u64 step
//!        | parameter arrays, each u32 len + f32 data
//!        | Adam moment arrays, u32 len + f32 data
//! ```
//!
//! The config blob is UTF-8 `key=value` lines. Parameter arrays appear in the
//! model's topology order — trainable arrays first, then batchnorm running
//! statistics. Moments are interleaved per trainable array (first moment,
//! then second), in the same topology order; running statistics carry no
//! moments. Array lengths are implied by the config, so a mismatch is a
//! structural error, not a silent reinterpretation. Checkpoints store f32
//! parameters only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patch::{build_patch_cnn, PatchCnn};
use crate::unet::{build_unet, OptimConfig, UNetConfig, UNetModel};

const MAGIC: &[u8; 4] = b"UNCK";
const VERSION: u32 = 1;
const KIND: &'static str = "UNCK";

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { kind: KIND, detail: format!("while reading {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32_array(&mut self, expected_len: usize, what: &str) -> Result<Vec<f32>> {
        let len = self.u32(what)? as usize;
        if len != expected_len {
            return Err(Error::InvalidData(format!(
                "{what}: stored length {len}, expected {expected_len}"
            )));
        }
        let bytes = self.take(len * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::InvalidData(format!(
                "{} trailing bytes after checkpoint payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn push_f32_array(out: &mut Vec<u8>, data: &[f32]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn write_header(out: &mut Vec<u8>, config: &str, step: u64) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&step.to_le_bytes());
}

pub(crate) fn read_header<'a>(r: &mut Reader<'a>) -> Result<(String, u64)> {
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { kind: KIND, expected: "UNCK" });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { kind: KIND, found: version });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_bytes = r.take(cfg_len, "config blob")?;
    let config = String::from_utf8(cfg_bytes.to_vec())
        .map_err(|_| Error::InvalidData("config blob is not UTF-8".into()))?;
    let step = r.u64("step count")?;
    Ok((config, step))
}

/// Parses `key=value` lines; later duplicates win.
pub(crate) fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            if line.is_empty() {
                return None;
            }
            line.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub(crate) fn kv_get<'a>(kv: &'a [(String, String)], key: &str) -> Result<&'a str> {
    kv.iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::InvalidData(format!("checkpoint config is missing key `{key}`")))
}

fn kv_parse<T: std::str::FromStr>(kv: &[(String, String)], key: &str) -> Result<T> {
    let raw = kv_get(kv, key)?;
    raw.parse()
        .map_err(|_| Error::InvalidData(format!("checkpoint config key `{key}` has bad value `{raw}`")))
}

fn unet_config_blob(model: &UNetModel<f32>) -> String {
    let c = &model.config;
    let o = &model.opt;
    format!(
        "model=unet\ndepth={}\nbase_channels={}\nin_channels={}\nout_channels={}\nlr={}\nbeta1={}\nbeta2={}\nepsilon={}\n",
        c.depth, c.base_channels, c.in_channels, c.out_channels, o.lr, o.beta1, o.beta2, o.epsilon
    )
}

pub fn encode_checkpoint(model: &UNetModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, &unet_config_blob(model), model.step);
    for arr in model.param_arrays() {
        push_f32_array(&mut out, arr);
    }
    for arr in model.running_stat_arrays() {
        push_f32_array(&mut out, arr);
    }
    for (m, v) in model.opt.m.iter().zip(&model.opt.v) {
        push_f32_array(&mut out, m);
        push_f32_array(&mut out, v);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<UNetModel<f32>> {
    let mut r = Reader::new(bytes);
    let (config_text, step) = read_header(&mut r)?;
    let kv = parse_kv(&config_text);
    let model_kind = kv_get(&kv, "model")?;
    if model_kind != "unet" {
        return Err(Error::InvalidData(format!(
            "checkpoint holds a `{model_kind}` model, not `unet`"
        )));
    }
    let config = UNetConfig {
        depth: kv_parse(&kv, "depth")?,
        base_channels: kv_parse(&kv, "base_channels")?,
        in_channels: kv_parse(&kv, "in_channels")?,
        out_channels: kv_parse(&kv, "out_channels")?,
    };
    let opt = OptimConfig {
        lr: kv_parse(&kv, "lr")?,
        beta1: kv_parse(&kv, "beta1")?,
        beta2: kv_parse(&kv, "beta2")?,
        epsilon: kv_parse(&kv, "epsilon")?,
    };

    let mut model = build_unet::<f32>(&config, &opt, 0)?;
    model.step = step;
    model.opt.t = step;

    let param_lens: Vec<usize> = model.param_arrays().iter().map(|a| a.len()).collect();
    let stat_lens: Vec<usize> = model.running_stat_arrays().iter().map(|a| a.len()).collect();

    let mut params: Vec<Vec<f32>> = Vec::with_capacity(param_lens.len());
    for (i, &len) in param_lens.iter().enumerate() {
        params.push(r.f32_array(len, &format!("parameter array {i}"))?);
    }
    let mut stats: Vec<Vec<f32>> = Vec::with_capacity(stat_lens.len());
    for (i, &len) in stat_lens.iter().enumerate() {
        stats.push(r.f32_array(len, &format!("running-stat array {i}"))?);
    }
    let mut m: Vec<Vec<f32>> = Vec::with_capacity(param_lens.len());
    let mut v: Vec<Vec<f32>> = Vec::with_capacity(param_lens.len());
    for (i, &len) in param_lens.iter().enumerate() {
        m.push(r.f32_array(len, &format!("first moment array {i}"))?);
        v.push(r.f32_array(len, &format!("second moment array {i}"))?);
    }
    r.finish()?;

    for (dst, src) in model.param_arrays_mut().into_iter().zip(&params) {
        dst.copy_from_slice(src);
    }
    for (dst, src) in model.running_stat_arrays_mut().into_iter().zip(&stats) {
        dst.copy_from_slice(src);
    }
    model.opt.m = m;
    model.opt.v = v;
    Ok(model)
}

fn patch_config_blob(model: &PatchCnn<f32>) -> String {
    let o = &model.opt;
    format!(
        "model=patch\nlr={}\nbeta1={}\nbeta2={}\nepsilon={}\n",
        o.lr, o.beta1, o.beta2, o.epsilon
    )
}

pub fn encode_patch_checkpoint(model: &PatchCnn<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, &patch_config_blob(model), model.step);
    for arr in model.param_arrays() {
        push_f32_array(&mut out, arr);
    }
    for (m, v) in model.opt.m.iter().zip(&model.opt.v) {
        push_f32_array(&mut out, m);
        push_f32_array(&mut out, v);
    }
    out
}

pub fn decode_patch_checkpoint(bytes: &[u8]) -> Result<PatchCnn<f32>> {
    let mut r = Reader::new(bytes);
    let (config_text, step) = read_header(&mut r)?;
    let kv = parse_kv(&config_text);
    let model_kind = kv_get(&kv, "model")?;
    if model_kind != "patch" {
        return Err(Error::InvalidData(format!(
            "checkpoint holds a `{model_kind}` model, not `patch`"
        )));
    }
    let opt = OptimConfig {
        lr: kv_parse(&kv, "lr")?,
        beta1: kv_parse(&kv, "beta1")?,
        beta2: kv_parse(&kv, "beta2")?,
        epsilon: kv_parse(&kv, "epsilon")?,
    };
    let mut model = build_patch_cnn::<f32>(&opt, 0);
    model.step = step;
    model.opt.t = step;

    let lens: Vec<usize> = model.param_arrays().iter().map(|a| a.len()).collect();
    let mut params: Vec<Vec<f32>> = Vec::with_capacity(lens.len());
    for (i, &len) in lens.iter().enumerate() {
        params.push(r.f32_array(len, &format!("parameter array {i}"))?);
    }
    let mut m: Vec<Vec<f32>> = Vec::with_capacity(lens.len());
    let mut v: Vec<Vec<f32>> = Vec::with_capacity(lens.len());
    for (i, &len) in lens.iter().enumerate() {
        m.push(r.f32_array(len, &format!("first moment array {i}"))?);
        v.push(r.f32_array(len, &format!("second moment array {i}"))?);
    }
    r.finish()?;

    for (dst, src) in model.param_arrays_mut().into_iter().zip(&params) {
        dst.copy_from_slice(src);
    }
    model.opt.m = m;
    model.opt.v = v;
    Ok(model)
}

pub fn save_patch_checkpoint(model: &PatchCnn<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_patch_checkpoint(model))?;
    Ok(())
}

pub fn load_patch_checkpoint(path: impl AsRef<Path>) -> Result<PatchCnn<f32>> {
    decode_patch_checkpoint(&fs::read(path)?)
}

pub fn save_checkpoint(model: &UNetModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<UNetModel<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Reads only the header and reports which model family the container holds
/// (`"unet"` or `"patch"`), without materializing the parameters.
pub fn checkpoint_kind(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let (config, _) = read_header(&mut r)?;
    let kv = parse_kv(&config);
    Ok(kv_get(&kv, "model")?.to_string())
}

/// Load, requiring the stored architecture to equal `expected`; the error
/// names both configs so a depth-4 checkpoint loaded into a depth-3 run is a
/// clear config mismatch rather than a length error.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &UNetConfig,
) -> Result<UNetModel<f32>> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(Error::InvalidConfig(format!(
            "checkpoint config {:?} does not match expected {:?}",
            model.config, expected
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::LossKind;
    use crate::rng::{range_f64, seeded};
    use crate::tensor::Tensor;

    fn trained_model() -> UNetModel<f32> {
        let cfg = UNetConfig { depth: 1, base_channels: 2, in_channels: 1, out_channels: 1 };
        let mut model = build_unet::<f32>(&cfg, &OptimConfig::default(), 9).unwrap();
        let mut rng = seeded(10);
        let n = 8 * 8 * 8;
        let x = Tensor::new(
            &[1, 1, 8, 8, 8],
            (0..n).map(|_| range_f64(&mut rng, 0.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let t = Tensor::new(
            &[1, 1, 8, 8, 8],
            (0..n).map(|_| range_f64(&mut rng, 0.0, 1.0) as f32).collect(),
        )
        .unwrap();
        for _ in 0..3 {
            model.train_step(x.clone(), &t, LossKind::Bce).unwrap();
        }
        model
    }

    fn bits(a: &[f32]) -> Vec<u32> {
        a.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = trained_model();
        let loaded = decode_checkpoint(&encode_checkpoint(&model)).unwrap();

        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.step, model.step);
        assert_eq!(loaded.opt.t, model.opt.t);
        assert_eq!(loaded.opt.lr, model.opt.lr);
        for (a, b) in model.param_arrays().iter().zip(loaded.param_arrays()) {
            assert_eq!(bits(a), bits(b));
        }
        for (a, b) in model.running_stat_arrays().iter().zip(loaded.running_stat_arrays()) {
            assert_eq!(bits(a), bits(b));
        }
        for (a, b) in model.opt.m.iter().zip(&loaded.opt.m) {
            assert_eq!(bits(a), bits(b));
        }
        for (a, b) in model.opt.v.iter().zip(&loaded.opt.v) {
            assert_eq!(bits(a), bits(b));
        }

        let mut rng = seeded(11);
        let x = Tensor::new(
            &[1, 1, 8, 8, 8],
            (0..512).map(|_| range_f64(&mut rng, 0.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let y1 = model.predict(x.clone()).unwrap();
        let y2 = loaded.predict(x).unwrap();
        assert_eq!(bits(y1.data()), bits(y2.data()));
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join("voxsynth-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.unck");
        let model = trained_model();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, model.step);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncation_anywhere_is_detected() {
        let model = trained_model();
        let full = encode_checkpoint(&model);
        for cut in [0, 3, 4, 7, 8, 11, 40, full.len() / 2, full.len() - 1] {
            let err = decode_checkpoint(&full[..cut]).unwrap_err();
            match err {
                Error::Truncated { .. } | Error::BadMagic { .. } => {}
                other => panic!("cut at {cut}: unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let model = trained_model();
        let mut bytes = encode_checkpoint(&model);
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn future_version_is_rejected() {
        let model = trained_model();
        let mut bytes = encode_checkpoint(&model);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::UnsupportedVersion { kind: "UNCK", found: 2 })
        ));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let model = trained_model();
        let mut bytes = encode_checkpoint(&model);
        bytes.push(0);
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn patch_round_trip_and_kind_separation() {
        let mut model = build_patch_cnn::<f32>(&OptimConfig::default(), 20);
        let mut rng = seeded(21);
        let n = 15 * 15 * 15;
        let x = Tensor::new(
            &[1, 1, 15, 15, 15],
            (0..n).map(|_| range_f64(&mut rng, 0.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let t = Tensor::new(
            &[1, 1, 3, 3, 3],
            (0..27).map(|_| range_f64(&mut rng, 0.0, 1.0) as f32).collect(),
        )
        .unwrap();
        model.train_step(x.clone(), &t, LossKind::Bce).unwrap();

        let bytes = encode_patch_checkpoint(&model);
        let loaded = decode_patch_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.step, model.step);
        assert_eq!(loaded.opt.t, model.opt.t);
        for (a, b) in model.param_arrays().iter().zip(loaded.param_arrays()) {
            assert_eq!(bits(a), bits(b));
        }
        for (a, b) in model.opt.m.iter().zip(&loaded.opt.m) {
            assert_eq!(bits(a), bits(b));
        }
        let y1 = model.predict(x.clone()).unwrap();
        let y2 = loaded.predict(x).unwrap();
        assert_eq!(bits(y1.data()), bits(y2.data()));

        // A patch container is not a unet container and vice versa.
        assert!(decode_checkpoint(&bytes).is_err());
        let unet_bytes = encode_checkpoint(&trained_model());
        assert!(decode_patch_checkpoint(&unet_bytes).is_err());
    }

    #[test]
    fn depth_mismatch_is_a_config_error() {
        let dir = std::env::temp_dir().join("voxsynth-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("depth.unck");
        let model = trained_model();
        save_checkpoint(&model, &path).unwrap();

        let other = UNetConfig { depth: 2, ..model.config.clone() };
        let err = load_checkpoint_expecting(&path, &other).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert!(load_checkpoint_expecting(&path, &model.config).is_ok());
        std::fs::remove_file(&path).unwrap();
    }
}

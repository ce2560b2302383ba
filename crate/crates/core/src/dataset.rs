//! Paired-volume datasets on disk: a directory of RVOL files plus a UTF-8
//! manifest with one `id,class,input_path,target_path` line per subject.
//! Lines starting with `#` are comments (the CLI puts timestamps and the
//! resolved configuration there), so everything outside `#` lines is
//! byte-reproducible for a fixed seed.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rvol::{load_rvol, save_rvol};
use crate::volume::Volume;

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub class: u8,
    pub input: Volume,
    pub target: Volume,
}

#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    pub subjects: Vec<Subject>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.class).collect()
    }
}

pub const MANIFEST_NAME: &str = "manifest.csv";

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Writes every subject pair as `<id>_input.rvol` / `<id>_target.rvol` under
/// `dir` and a manifest listing them. `header` lines are emitted first, each
/// prefixed with `# `.
pub fn write_dataset(ds: &PairedDataset, dir: &Path, header: &[String]) -> Result<PathBuf> {
    if ds.is_empty() {
        return Err(Error::InvalidData("refusing to write an empty dataset".into()));
    }
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for line in header {
        manifest.push_str("# ");
        manifest.push_str(line);
        manifest.push('\n');
    }
    manifest.push_str("id,class,input_path,target_path\n");
    for s in &ds.subjects {
        if !valid_id(&s.id) {
            return Err(Error::InvalidData(format!("subject id {:?} is not filesystem-safe", s.id)));
        }
        let input_name = format!("{}_input.rvol", s.id);
        let target_name = format!("{}_target.rvol", s.id);
        save_rvol(&s.input, &dir.join(&input_name))?;
        save_rvol(&s.target, &dir.join(&target_name))?;
        manifest.push_str(&format!("{},{},{},{}\n", s.id, s.class, input_name, target_name));
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Loads a dataset from its manifest; relative paths resolve against the
/// manifest's directory.
pub fn read_dataset(manifest_path: &Path) -> Result<PairedDataset> {
    let text = fs::read_to_string(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut subjects = Vec::new();
    let mut seen_header = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != "id,class,input_path,target_path" {
                return Err(Error::InvalidData(format!(
                    "manifest line {}: expected header 'id,class,input_path,target_path', got {line:?}",
                    lineno + 1
                )));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::InvalidData(format!(
                "manifest line {}: expected 4 comma-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let class: u8 = fields[1].parse().map_err(|_| {
            Error::InvalidData(format!("manifest line {}: bad class {:?}", lineno + 1, fields[1]))
        })?;
        if class > 1 {
            return Err(Error::InvalidData(format!(
                "manifest line {}: class must be 0 or 1, got {class}",
                lineno + 1
            )));
        }
        let input = load_rvol(&dir.join(fields[2]))?;
        let target = load_rvol(&dir.join(fields[3]))?;
        if input.dims != target.dims {
            return Err(Error::ShapeMismatch(format!(
                "subject {}: input {:?} vs target {:?}",
                fields[0], input.dims, target.dims
            )));
        }
        subjects.push(Subject { id: fields[0].to_string(), class, input, target });
    }
    if !seen_header {
        return Err(Error::InvalidData("manifest has no header line".into()));
    }
    if subjects.is_empty() {
        return Err(Error::InvalidData("manifest lists no subjects".into()));
    }
    Ok(PairedDataset { subjects })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{range_f64, seeded};

    fn toy_subject(id: &str, class: u8, seed: u64) -> Subject {
        let mut rng = seeded(seed);
        let data: Vec<f32> =
            (0..64).map(|_| range_f64(&mut rng, 0.0, 1.0) as f32).collect();
        let input = Volume::new([4, 4, 4], [1.0; 3], data.clone()).unwrap();
        let target = Volume::new([4, 4, 4], [1.0; 3], data).unwrap();
        Subject { id: id.to_string(), class, input, target }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = std::env::temp_dir().join("voxsynth_dataset_roundtrip");
        let _ = fs::remove_dir_all(&dir);
        let ds = PairedDataset {
            subjects: vec![toy_subject("s000", 0, 1), toy_subject("s001", 1, 2)],
        };
        let manifest =
            write_dataset(&ds, &dir, &["generated_at=2024-01-01T00:00:00Z".into()]).unwrap();
        let back = read_dataset(&manifest).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in ds.subjects.iter().zip(&back.subjects) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.class, b.class);
            assert_eq!(a.input.data, b.input.data);
            assert_eq!(a.target.data, b.target.data);
        }
        assert_eq!(back.labels(), vec![0, 1]);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn comment_lines_are_ignored() {
        let dir = std::env::temp_dir().join("voxsynth_dataset_comments");
        let _ = fs::remove_dir_all(&dir);
        let ds = PairedDataset { subjects: vec![toy_subject("a", 1, 3)] };
        let manifest = write_dataset(&ds, &dir, &[]).unwrap();
        let mut text = fs::read_to_string(&manifest).unwrap();
        text = format!("# a new comment\n{text}# trailing comment\n");
        fs::write(&manifest, text).unwrap();
        let back = read_dataset(&manifest).unwrap();
        assert_eq!(back.subjects[0].id, "a");
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn malformed_manifests_are_rejected() {
        let dir = std::env::temp_dir().join("voxsynth_dataset_malformed");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let manifest = dir.join(MANIFEST_NAME);

        fs::write(&manifest, "id,class\n").unwrap();
        assert!(read_dataset(&manifest).is_err());

        fs::write(&manifest, "id,class,input_path,target_path\n").unwrap();
        assert!(read_dataset(&manifest).is_err());

        fs::write(&manifest, "id,class,input_path,target_path\na,7,x.rvol,y.rvol\n").unwrap();
        assert!(read_dataset(&manifest).is_err());

        fs::write(&manifest, "id,class,input_path,target_path\na,1,missing.rvol,missing.rvol\n")
            .unwrap();
        assert!(read_dataset(&manifest).is_err());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn unsafe_ids_are_rejected_on_write() {
        let dir = std::env::temp_dir().join("voxsynth_dataset_badid");
        let _ = fs::remove_dir_all(&dir);
        let mut s = toy_subject("ok", 0, 4);
        s.id = "../escape".into();
        let ds = PairedDataset { subjects: vec![s] };
        assert!(write_dataset(&ds, &dir, &[]).is_err());
        let _ = fs::remove_dir_all(&dir);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::{load_mask, save_mask, BlockMask};
use crate::pruners::{MaskEvent, MetricRow};
use crate::taskgen::{LanguageId, LanguageTask};
use crate::CODE_VERSION;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const STAGE_FILE: &str = "stage.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hash of a language's eval split; two reports are comparable only if
/// their eval sets hash equal.
pub fn eval_set_hash(task: &LanguageTask) -> String {
    let mut h = Sha256::new();
    h.update((task.eval_x.rows() as u64).to_le_bytes());
    h.update((task.eval_x.cols() as u64).to_le_bytes());
    for v in task.eval_x.as_slice() {
        h.update(v.to_le_bytes());
    }
    for &y in &task.eval_y {
        h.update((y as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Format(format!("cannot serialise: {e}")))
}

fn from_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One mask file listed in a manifest. `language` is absent for a mask
/// shared by every language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub language: Option<LanguageId>,
    pub file: String,
    pub sha256: String,
}

/// Index of the mask files a run emitted, with their content hashes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskManifest {
    pub code_version: String,
    pub procedure: String,
    pub sparsity: f64,
    pub languages: Vec<LanguageId>,
    #[serde(rename = "mask")]
    pub entries: Vec<ManifestEntry>,
}

impl MaskManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        from_toml(&dir.join(MANIFEST_FILE))
    }

    /// Loads every mask, refusing any file whose hash differs from the
    /// manifest. Shared masks are handed to every listed language.
    pub fn load_masks(&self, dir: &Path) -> Result<BTreeMap<LanguageId, BlockMask>> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let path = dir.join(&e.file);
            let actual = sha256_file(&path)?;
            if actual != e.sha256 {
                return Err(Error::Format(format!(
                    "{} hashes to {actual}, manifest says {}",
                    path.display(),
                    e.sha256
                )));
            }
            let mask = load_mask(&path)?;
            match e.language {
                Some(z) => {
                    out.insert(z, mask);
                }
                None => {
                    for &z in &self.languages {
                        out.insert(z, mask.clone());
                    }
                }
            }
        }
        if out.keys().copied().collect::<Vec<_>>() != self.languages {
            return Err(Error::Format(format!(
                "manifest lists languages {:?} but provides masks for {:?}",
                self.languages,
                out.keys().collect::<Vec<_>>()
            )));
        }
        Ok(out)
    }
}

/// Writes masks and their manifest into `dir`.
pub fn write_masks(
    dir: &Path,
    procedure: &str,
    sparsity: f64,
    languages: &[LanguageId],
    masks: &[(Option<LanguageId>, &BlockMask)],
) -> Result<MaskManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (z, mask) in masks {
        let file = match z {
            Some(z) => format!("lang-{z}.bmsk"),
            None => "shared.bmsk".to_string(),
        };
        let path = dir.join(&file);
        save_mask(mask, &path)?;
        entries.push(ManifestEntry {
            language: *z,
            file,
            sha256: sha256_file(&path)?,
        });
    }
    let manifest = MaskManifest {
        code_version: CODE_VERSION.to_string(),
        procedure: procedure.to_string(),
        sparsity,
        languages: languages.to_vec(),
        entries,
    };
    fs::write(dir.join(MANIFEST_FILE), to_toml(&manifest)?)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFile {
    pub path: String,
    pub sha256: String,
}

/// Record of a finished intermediate stage: what went in (fingerprint)
/// and what came out (file hashes).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub code_version: String,
    pub fingerprint: String,
    #[serde(rename = "file")]
    pub files: Vec<StageFile>,
}

impl StageRecord {
    /// The record in `dir` if it has this fingerprint and every file it
    /// lists still hashes the same.
    pub fn reusable(dir: &Path, fingerprint: &str) -> Option<StageRecord> {
        let rec: StageRecord = from_toml(&dir.join(STAGE_FILE)).ok()?;
        if rec.fingerprint != fingerprint || rec.code_version != CODE_VERSION {
            return None;
        }
        let intact = rec
            .files
            .iter()
            .all(|f| sha256_file(&dir.join(&f.path)).is_ok_and(|h| h == f.sha256));
        intact.then_some(rec)
    }

    /// Hashes `files` (relative to `dir`) and writes the record last, so a
    /// stage interrupted midway never looks complete.
    pub fn seal(dir: &Path, fingerprint: &str, files: &[&str]) -> Result<StageRecord> {
        let files = files
            .iter()
            .map(|p| {
                Ok(StageFile {
                    path: p.to_string(),
                    sha256: sha256_file(&dir.join(p))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = StageRecord {
            code_version: CODE_VERSION.to_string(),
            fingerprint: fingerprint.to_string(),
            files,
        };
        fs::write(dir.join(STAGE_FILE), to_toml(&rec)?)?;
        Ok(rec)
    }
}

/// Fingerprint of a stage: code version plus every input that shapes its
/// output, serialised as TOML.
pub fn fingerprint<T: Serialize>(kind: &str, inputs: &T) -> Result<String> {
    Ok(sha256_hex(
        format!("{CODE_VERSION}\n{kind}\n{}", to_toml(inputs)?).as_bytes(),
    ))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "language",
        "loss",
        "accuracy",
        "error",
        "sparsity",
        "similarity_to_prev",
        "union_ratio",
        "residual_support",
    ])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.language.to_string(),
            r.loss.to_string(),
            r.accuracy.to_string(),
            r.error().to_string(),
            r.sparsity.to_string(),
            opt(r.similarity_to_prev),
            opt(r.union_ratio),
            opt(r.residual_support),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mask_events_csv(path: &Path, events: &[MaskEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "kind", "language", "sparsity", "similarity_to_prev"])?;
    for e in events {
        w.write_record([
            e.step.to_string(),
            e.kind.to_string(),
            opt(e.language),
            e.mask.sparsity().to_string(),
            e.similarity_to_prev.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_union_ratio_csv(path: &Path, trajectory: &[(u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "union_ratio"])?;
    for (step, u) in trajectory {
        w.write_record([step.to_string(), u.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Marks a seed directory whose run failed; the files next to it are
/// partial.
pub fn flag_failure(dir: &Path, message: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("FAILED");
    let mut f = fs::File::create(&path)?;
    writeln!(f, "{CODE_VERSION}: run failed, outputs in this directory are partial")?;
    writeln!(f, "{message}")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::LayerShape;

    fn mask(keep_first: bool) -> BlockMask {
        let mut m = BlockMask::ones(vec![LayerShape::new("l0", 16, 2)]);
        m.set_block(0, usize::from(!keep_first), false);
        m
    }

    #[test]
    fn manifest_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (mask(true), mask(false));
        let langs = [LanguageId(0), LanguageId(1)];
        let man = write_masks(dir.path(), "imp", 0.25, &langs, &[(Some(langs[0]), &a), (Some(langs[1]), &b)]).unwrap();
        assert_eq!(MaskManifest::load(dir.path()).unwrap(), man);
        let loaded = man.load_masks(dir.path()).unwrap();
        assert_eq!(loaded[&langs[0]], a);
        assert_eq!(loaded[&langs[1]], b);
        save_mask(&a, dir.path().join("lang-1.bmsk")).unwrap();
        assert!(matches!(man.load_masks(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn shared_mask_goes_to_every_language() {
        let dir = tempfile::tempdir().unwrap();
        let a = mask(true);
        let langs = [LanguageId(0), LanguageId(1), LanguageId(2)];
        let man = write_masks(dir.path(), "lap", 0.25, &langs, &[(None, &a)]).unwrap();
        let loaded = man.load_masks(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(loaded.values().all(|m| *m == a));
    }

    #[test]
    fn stage_record_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.bin"), b"abc").unwrap();
        StageRecord::seal(dir.path(), "fp", &["x.bin"]).unwrap();
        assert!(StageRecord::reusable(dir.path(), "fp").is_some());
        assert!(StageRecord::reusable(dir.path(), "other").is_none());
        fs::write(dir.path().join("x.bin"), b"abd").unwrap();
        assert!(StageRecord::reusable(dir.path(), "fp").is_none());
    }
}

//! Sequence manifests: frame, annotation and ground-truth paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::LabelMask;
use crate::error::{Error, Result};
use crate::pipeline::pnm::{read_pgm, read_ppm, RgbImage};

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub name: String,
    pub frames: Vec<String>,
    pub first_frame_annotation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_masks: Option<Vec<String>>,
    pub width: usize,
    pub height: usize,
}

/// A loaded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub annotation: LabelMask,
    pub gt: Option<Vec<LabelMask>>,
    /// Output file stem per frame.
    pub stems: Vec<String>,
}

/// Labels `1..=n` with nothing skipped.
pub fn check_contiguous(mask: &LabelMask) -> Result<usize> {
    let ids = mask.object_ids();
    if ids.is_empty() {
        return Err(Error::Input("annotation contains no objects".into()));
    }
    if ids.iter().enumerate().any(|(i, &id)| id as usize != i + 1) {
        return Err(Error::Input(format!(
            "annotation labels {ids:?} are not 1..n"
        )));
    }
    Ok(ids.len())
}

impl SequenceManifest {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SequenceManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Input(format!(
                "sequence {} has fewer than 2 frames",
                self.name
            )));
        }
        if let Some(gt) = &self.gt_masks {
            if gt.len() != self.frames.len() {
                return Err(Error::Input(format!(
                    "{} ground-truth masks for {} frames",
                    gt.len(),
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }

    /// Reads every referenced file, resolving relative paths against `base`.
    pub fn load(&self, base: &Path) -> Result<Sequence> {
        self.validate()?;
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let frames = self
            .frames
            .iter()
            .map(|f| read_ppm(&resolve(f)))
            .collect::<Result<Vec<_>>>()?;
        for (f, img) in self.frames.iter().zip(&frames) {
            if (img.width, img.height) != (self.width, self.height) {
                return Err(Error::Input(format!(
                    "{f} is {}×{}, manifest says {}×{}",
                    img.width, img.height, self.width, self.height
                )));
            }
        }
        let annotation = read_pgm(&resolve(&self.first_frame_annotation))?;
        check_mask(&annotation, self)?;
        check_contiguous(&annotation)?;
        let gt = match &self.gt_masks {
            Some(paths) => Some(
                paths
                    .iter()
                    .map(|p| {
                        let m = read_pgm(&resolve(p))?;
                        check_mask(&m, self)?;
                        Ok(m)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let stems = self
            .frames
            .iter()
            .map(|f| {
                Path::new(f)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| f.clone())
            })
            .collect();
        Ok(Sequence {
            name: self.name.clone(),
            frames,
            annotation,
            gt,
            stems,
        })
    }
}

fn check_mask(mask: &LabelMask, m: &SequenceManifest) -> Result<()> {
    if (mask.width, mask.height) != (m.width, m.height) {
        return Err(Error::Input(format!(
            "mask is {}×{}, manifest says {}×{}",
            mask.width, mask.height, m.width, m.height
        )));
    }
    Ok(())
}

/// Loads the manifest at `path` together with its files.
pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let m = SequenceManifest::from_file(path)?;
    m.load(path.parent().unwrap_or(Path::new(".")))
}

/// Every `manifest.json` in `dir` or its immediate subdirectories, sorted.
pub fn find_manifests(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let direct = dir.join("manifest.json");
    if direct.is_file() {
        found.push(direct);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|err| Error::io(dir, err))?;
        let m = e.path().join("manifest.json");
        if m.is_file() {
            found.push(m);
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::Input(format!(
            "no manifest.json under {}",
            dir.display()
        )));
    }
    Ok(found)
}

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Sample;
use crate::volume::{load_mask, load_volume, Dims, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wm_mask_path: Option<String>,
    pub label: u8,
    #[serde(default)]
    pub split: Split,
}

impl Subject {
    pub fn new(id: impl Into<String>, image_path: impl Into<String>, label: u8) -> Self {
        Subject {
            id: id.into(),
            image_path: image_path.into(),
            lesion_mask_path: None,
            wm_mask_path: None,
            label,
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub name: String,
    pub dims: Dims,
    pub seed: u64,
}

/// Subject list with paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub metadata: Metadata,
    pub subjects: Vec<Subject>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn in_memory(name: &str, dims: Dims, seed: u64, subjects: Vec<Subject>) -> Self {
        DatasetManifest {
            metadata: Metadata {
                name: name.to_string(),
                dims,
                seed,
            },
            subjects,
            root: PathBuf::new(),
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subjects_in(&self, split: Option<Split>) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(move |s| split.is_none_or(|sp| s.split == sp))
    }

    /// Loads the images of `split` (all subjects when `None`).
    pub fn load_samples(&self, split: Option<Split>) -> Result<Vec<Sample>> {
        self.subjects_in(split)
            .map(|s| {
                Ok(Sample {
                    id: s.id.clone(),
                    volume: load_volume(self.resolve(&s.image_path))?,
                    label: s.label,
                })
            })
            .collect()
    }

    pub fn load_lesion_mask(&self, s: &Subject) -> Result<Option<Mask>> {
        s.lesion_mask_path
            .as_ref()
            .map(|p| load_mask(self.resolve(p)))
            .transpose()
    }

    pub fn load_wm_mask(&self, s: &Subject) -> Result<Option<Mask>> {
        s.wm_mask_path.as_ref().map(|p| load_mask(self.resolve(p))).transpose()
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate subject id {:?}", s.id)));
            }
            if s.label > 1 {
                return Err(Error::Manifest(format!("subject {}: label {} is not 0 or 1", s.id, s.label)));
            }
        }
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        for s in &self.subjects {
            let paths = std::iter::once(&s.image_path)
                .chain(s.lesion_mask_path.as_ref())
                .chain(s.wm_mask_path.as_ref());
            for p in paths {
                if !self.resolve(p).is_file() {
                    return Err(Error::Manifest(format!("subject {}: missing file {p}", s.id)));
                }
            }
        }
        Ok(())
    }
}

/// Parses and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    m.check_files()?;
    Ok(m)
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    m.validate()?;
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

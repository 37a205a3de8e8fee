//! Dataset manifests: a JSON file describing view-embedding blocks and
//! class-text embeddings stored as ZTEB files.
//!
//! ```json
//! {
//!   "dataset": "imagenet-a",
//!   "num_classes": 200,
//!   "class_names": ["goldfish", "..."],
//!   "temperature": 0.01,
//!   "n_views": 64,
//!   "samples": [{"id": "0001", "label": 3, "path": "views.zteb", "offset": 0}],
//!   "text_embeddings": ["text_t0.zteb", "text_t1.zteb"]
//! }
//! ```
//!
//! `offset` is the index of the first of `n_views` consecutive rows in the
//! referenced file. Row `offset` is view 0, the un-augmented source image.
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::zteb::read_embedding_file;
use crate::kernel::DEFAULT_TAU;
use crate::math::EmbeddingMatrix;
use crate::{Error, Result, ZeroConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub path: String,
    pub offset: usize,
}

fn default_temperature() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub n_views: usize,
    pub samples: Vec<SampleRecord>,
    pub text_embeddings: Vec<String>,
    /// Free-form export metadata (crop scale, flip probability, resolution, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.class_names.len() != self.num_classes {
            return bad(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.n_views == 0 {
            return bad("n_views must be positive".into());
        }
        if self.text_embeddings.is_empty() {
            return bad("no text embedding files".into());
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if s.label >= self.num_classes {
                return bad(format!(
                    "sample {} has label {} but only {} classes",
                    s.id, s.label, self.num_classes
                ));
            }
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate sample id {}", s.id));
            }
        }
        Ok(())
    }
}

/// A manifest with every referenced file loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub base_dir: PathBuf,
    /// One matrix per template, each `num_classes × D`.
    pub text: Vec<EmbeddingMatrix<f64>>,
    view_files: HashMap<String, EmbeddingMatrix<f64>>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        let manifest = DatasetManifest::from_json(&text).map_err(|e| e.in_file(path))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_manifest(manifest, base)
    }

    pub fn from_manifest(manifest: DatasetManifest, base_dir: impl Into<PathBuf>) -> Result<Self> {
        manifest.validate()?;
        let base_dir = base_dir.into();
        let resolve = |p: &str| base_dir.join(p);

        let text = manifest
            .text_embeddings
            .iter()
            .map(|p| read_embedding_file::<f64>(resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        let dim = text[0].dim();
        for (p, t) in manifest.text_embeddings.iter().zip(&text) {
            if t.rows() != manifest.num_classes || t.dim() != dim {
                return Err(Error::Manifest(format!(
                    "{p} is {}x{}, expected {}x{dim}",
                    t.rows(),
                    t.dim(),
                    manifest.num_classes
                )));
            }
        }

        let mut view_files = HashMap::new();
        for s in &manifest.samples {
            if !view_files.contains_key(&s.path) {
                let m = read_embedding_file::<f64>(resolve(&s.path))?;
                if m.dim() != dim {
                    return Err(Error::Manifest(format!(
                        "{} has embedding dim {}, text embeddings have {dim}",
                        s.path,
                        m.dim()
                    )));
                }
                view_files.insert(s.path.clone(), m);
            }
            let rows = view_files[&s.path].rows();
            if s.offset + manifest.n_views > rows {
                return Err(Error::Manifest(format!(
                    "sample {}: rows {}..{} exceed the {rows} rows of {}",
                    s.id,
                    s.offset,
                    s.offset + manifest.n_views,
                    s.path
                )));
            }
        }
        Ok(Self {
            manifest,
            base_dir,
            text,
            view_files,
        })
    }

    /// The `n_views × D` block for a sample; row 0 is the source image.
    pub fn views(&self, sample: &SampleRecord) -> EmbeddingMatrix<f64> {
        let file = &self.view_files[&sample.path];
        let rows: Vec<usize> = (sample.offset..sample.offset + self.manifest.n_views).collect();
        file.select_rows(&rows)
    }

    /// `base` with τ replaced by the manifest's temperature.
    pub fn zero_config(&self, base: &ZeroConfig<f64>) -> ZeroConfig<f64> {
        ZeroConfig {
            tau: self.manifest.temperature,
            ..*base
        }
    }
}

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{read_feature_matrix, FeatureMatrix, TokenGrouping};

pub const MANIFEST_VERSION: u32 = 1;

/// A slice `row_start..row_end` of a CBFM file. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRef {
    pub path: PathBuf,
    pub row_start: usize,
    pub row_end: usize,
}

impl RowRef {
    pub fn len(&self) -> usize {
        self.row_end.saturating_sub(self.row_start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub caption_id: String,
    #[serde(default)]
    pub caption: String,
    pub real_ref: RowRef,
    #[serde(default)]
    pub gen_refs: BTreeMap<String, RowRef>,
}

/// Triplets of (real image, caption, generated images per model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub tokens_per_image: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(tokens_per_image: usize, entries: Vec<ManifestEntry>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            tokens_per_image,
            entries,
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate_structure()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn caption_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.caption_id.clone()).collect()
    }

    /// Model names appearing in any entry, sorted.
    pub fn models(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .entries
            .iter()
            .flat_map(|e| e.gen_refs.keys().cloned())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        names.sort();
        names
    }

    pub fn grouping(&self) -> Result<TokenGrouping> {
        TokenGrouping::new(self.tokens_per_image, self.entries.len())
    }

    /// Checks everything that can be checked without opening feature files:
    /// version, token count, unique ids, row-range sizes, and full pairing.
    pub fn validate_structure(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if self.tokens_per_image == 0 {
            return Err(Error::Validation("tokens_per_image must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.caption_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate caption_id `{}`",
                    e.caption_id
                )));
            }
            for r in std::iter::once(&e.real_ref).chain(e.gen_refs.values()) {
                if r.row_start > r.row_end || r.len() != self.tokens_per_image {
                    return Err(Error::Validation(format!(
                        "entry `{}`: row range {}..{} does not span {} tokens",
                        e.caption_id, r.row_start, r.row_end, self.tokens_per_image
                    )));
                }
            }
        }
        for model in self.models() {
            let missing = self.missing_for(&model);
            if !missing.is_empty() {
                return Err(Error::Pairing { model, missing });
            }
        }
        Ok(())
    }

    fn missing_for(&self, model: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| !e.gen_refs.contains_key(model))
            .map(|e| e.caption_id.clone())
            .collect()
    }

    /// Opens every referenced file and checks that all row ranges are in bounds.
    pub fn validate_files(&self) -> Result<()> {
        let mut cache = FileCache::default();
        for e in &self.entries {
            for r in std::iter::once(&e.real_ref).chain(e.gen_refs.values()) {
                let m = cache.get(&self.resolve(&r.path))?;
                if r.row_end > m.rows() {
                    return Err(Error::Validation(format!(
                        "entry `{}`: rows {}..{} exceed {} rows in {}",
                        e.caption_id,
                        r.row_start,
                        r.row_end,
                        m.rows(),
                        r.path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stacks the real feature rows of every entry, in manifest order.
    pub fn load_real(&self) -> Result<FeatureMatrix> {
        let mut cache = FileCache::default();
        let refs: Vec<&RowRef> = self.entries.iter().map(|e| &e.real_ref).collect();
        self.stack(&refs, &mut cache)
    }

    fn stack(&self, refs: &[&RowRef], cache: &mut FileCache) -> Result<FeatureMatrix> {
        let mut out = FeatureMatrix::zeros(0, 0);
        for r in refs {
            let path = self.resolve(&r.path);
            let m = cache.get(&path)?;
            if r.row_end > m.rows() {
                return Err(Error::Validation(format!(
                    "rows {}..{} exceed {} rows in {}",
                    r.row_start,
                    r.row_end,
                    m.rows(),
                    path.display()
                )));
            }
            out.append(&m.slice_rows(r.row_start, r.row_end)?)?;
        }
        Ok(out)
    }
}

#[derive(Default)]
struct FileCache {
    files: HashMap<PathBuf, FeatureMatrix>,
}

impl FileCache {
    fn get(&mut self, path: &Path) -> Result<&FeatureMatrix> {
        if !self.files.contains_key(path) {
            let m = read_feature_matrix(path)?;
            self.files.insert(path.to_path_buf(), m);
        }
        Ok(&self.files[path])
    }
}

/// Real and generated features for one model, row-aligned by caption id.
#[derive(Debug, Clone)]
pub struct PairedFeatures {
    pub real: FeatureMatrix,
    pub generated: FeatureMatrix,
    pub caption_ids: Vec<String>,
}

pub fn load_paired_features(manifest: &DatasetManifest, model: &str) -> Result<PairedFeatures> {
    let missing = manifest.missing_for(model);
    if !missing.is_empty() {
        return Err(Error::Pairing {
            model: model.to_string(),
            missing,
        });
    }
    let mut cache = FileCache::default();
    let real_refs: Vec<&RowRef> = manifest.entries.iter().map(|e| &e.real_ref).collect();
    let gen_refs: Vec<&RowRef> = manifest
        .entries
        .iter()
        .map(|e| &e.gen_refs[model])
        .collect();
    let real = manifest.stack(&real_refs, &mut cache)?;
    let generated = manifest.stack(&gen_refs, &mut cache)?;
    Ok(PairedFeatures {
        real,
        generated,
        caption_ids: manifest.caption_ids(),
    })
}

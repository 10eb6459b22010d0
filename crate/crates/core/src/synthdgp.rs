//! Synthetic features with planted blindspots.
//!
//! Every token carries a sparse set of ground-truth concepts. Concept `k`
//! fires independently with probability `p_k` (scaled by a planted
//! multiplier in the generated role) and an exponentially distributed
//! magnitude; the feature row is the orthonormal embedding of the concept
//! vector plus small isotropic noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasae::SparseCodeMatrix;
use crate::rng::{indexed_stream, named_stream};
use crate::stats::sigmoid;
use crate::tensorio::{
    write_feature_matrix, DatasetManifest, FeatureMatrix, ManifestEntry, RowRef, TokenGrouping,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Natural,
    Generated,
}

/// Compact description from which a full [`DgpSpec`] is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n_concepts: usize,
    pub dim: usize,
    pub base_rate: f64,
    pub magnitude_mean: f64,
    /// Concept id -> rate multiplier in the generated role.
    pub planted: BTreeMap<usize, f64>,
    pub tokens_per_image: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_concepts: 64,
            dim: 256,
            base_rate: 0.05,
            magnitude_mean: 50.0,
            planted: BTreeMap::new(),
            tokens_per_image: 4,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl DgpConfig {
    /// 64 concepts in 256 dimensions, concepts 0-4 suppressed (x0.05) and
    /// 5-9 exaggerated (x10).
    pub fn planted_default(seed: u64) -> Self {
        let mut planted = BTreeMap::new();
        for k in 0..5 {
            planted.insert(k, 0.05);
        }
        for k in 5..10 {
            planted.insert(k, 10.0);
        }
        Self {
            planted,
            seed,
            ..Self::default()
        }
    }
}

/// Fully specified generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n_concepts: usize,
    pub dim: usize,
    pub base_rates: Vec<f64>,
    /// Mean of each concept's exponential magnitude law.
    pub magnitude_means: Vec<f64>,
    /// `dim x n_concepts`, row-major, orthonormal columns.
    pub mixing: Vec<f64>,
    pub planted: BTreeMap<usize, f64>,
    pub tokens_per_image: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DgpSpec {
    pub fn from_config(cfg: &DgpConfig) -> Result<Self> {
        let (k, d) = (cfg.n_concepts, cfg.dim);
        if k == 0 || d < k {
            return Err(Error::Argument(format!(
                "need 0 < n_concepts <= dim, got {k} concepts in {d} dimensions"
            )));
        }
        let mut rng = named_stream(cfg.seed, "dgp/mixing");
        let g = DMatrix::<f64>::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let mut mixing = Vec::with_capacity(d * k);
        for r in 0..d {
            for c in 0..k {
                mixing.push(q[(r, c)]);
            }
        }
        let spec = Self {
            n_concepts: k,
            dim: d,
            base_rates: vec![cfg.base_rate; k],
            magnitude_means: vec![cfg.magnitude_mean; k],
            mixing,
            planted: cfg.planted.clone(),
            tokens_per_image: cfg.tokens_per_image,
            noise_sigma: cfg.noise_sigma,
            seed: cfg.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d) = (self.n_concepts, self.dim);
        if self.base_rates.len() != k || self.magnitude_means.len() != k || self.mixing.len() != d * k {
            return Err(Error::Shape("spec vectors disagree with n_concepts/dim".into()));
        }
        if let Some(p) = self.base_rates.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Validation(format!("base rate {p} outside (0, 1)")));
        }
        if let Some(m) = self.magnitude_means.iter().find(|m| !(**m > 0.0) || !m.is_finite()) {
            return Err(Error::Validation(format!("magnitude mean {m} must be positive")));
        }
        for (&c, &m) in &self.planted {
            if c >= k {
                return Err(Error::Validation(format!("planted concept {c} >= {k}")));
            }
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::Validation(format!(
                    "multiplier {m} for concept {c} must be nonnegative"
                )));
            }
        }
        if self.tokens_per_image == 0 {
            return Err(Error::Validation("tokens_per_image must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Validation("noise_sigma must be nonnegative".into()));
        }
        for a in 0..k {
            for b in a..k {
                let dot: f64 = (0..d).map(|r| self.mixing[r * k + a] * self.mixing[r * k + b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-8 {
                    return Err(Error::Validation(format!(
                        "mixing columns {a} and {b} are not orthonormal"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn multiplier(&self, k: usize) -> f64 {
        self.planted.get(&k).copied().unwrap_or(1.0)
    }

    /// Firing probability of concept `k` in `role`, clipped to `[0, 1]`.
    pub fn effective_rate(&self, k: usize, role: Role) -> f64 {
        match role {
            Role::Natural => self.base_rates[k],
            Role::Generated => (self.base_rates[k] * self.multiplier(k)).clamp(0.0, 1.0),
        }
    }

    /// Column `k` of the mixing matrix.
    pub fn direction(&self, k: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.mixing[r * self.n_concepts + k]).collect()
    }

    /// Concepts whose scaled rate leaves `[0, 1]` in the generated role.
    pub fn clipping_warnings(&self) -> Vec<String> {
        self.planted
            .keys()
            .filter(|&&c| self.base_rates[c] * self.multiplier(c) > 1.0)
            .map(|&c| {
                format!(
                    "concept {c}: rate {} x {} clipped to 1",
                    self.base_rates[c],
                    self.multiplier(c)
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledDataset {
    pub features: FeatureMatrix,
    pub grouping: TokenGrouping,
    /// Ground-truth concept magnitudes per token.
    pub activations: SparseCodeMatrix,
    pub warnings: Vec<String>,
}

pub fn sample_dataset(spec: &DgpSpec, n_img: usize, role: Role) -> Result<SampledDataset> {
    spec.validate()?;
    let warnings = if role == Role::Generated {
        spec.clipping_warnings()
    } else {
        Vec::new()
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let (k, d, t) = (spec.n_concepts, spec.dim, spec.tokens_per_image);
    let rates: Vec<f64> = (0..k).map(|c| spec.effective_rate(c, role)).collect();
    let laws: Vec<Exp<f64>> = spec
        .magnitude_means
        .iter()
        .map(|m| Exp::new(1.0 / m).expect("positive rate"))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let stream = match role {
        Role::Natural => "dgp/natural",
        Role::Generated => "dgp/generated",
    };
    let images: Vec<(Vec<f32>, Vec<Vec<(usize, f64)>>)> = (0..n_img as u64)
        .into_par_iter()
        .map(|img| {
            let mut rng = indexed_stream(spec.seed, stream, img);
            let mut feats = Vec::with_capacity(t * d);
            let mut codes = Vec::with_capacity(t);
            for _ in 0..t {
                let mut active = Vec::new();
                for c in 0..k {
                    if rng.random::<f64>() < rates[c] {
                        active.push((c, laws[c].sample(&mut rng)));
                    }
                }
                for r in 0..d {
                    let row = &spec.mixing[r * k..(r + 1) * k];
                    let v: f64 = active.iter().map(|&(c, a)| row[c] * a).sum::<f64>()
                        + noise.sample(&mut rng);
                    feats.push(v as f32);
                }
                active.retain(|&(_, a)| a > 0.0);
                codes.push(active);
            }
            (feats, codes)
        })
        .collect();
    let mut data = Vec::with_capacity(n_img * t * d);
    let mut rows = Vec::with_capacity(n_img * t);
    for (f, c) in images {
        data.extend(f);
        rows.extend(c);
    }
    Ok(SampledDataset {
        features: FeatureMatrix::new(n_img * t, d, data)?,
        grouping: TokenGrouping::new(t, n_img)?,
        activations: SparseCodeMatrix::from_rows(k, rows)?,
        warnings,
    })
}

/// Exact Ediff of every ground-truth concept under mean aggregation:
/// `sigmoid((p_gen - p_nat) * mean_magnitude / T)`.
pub fn oracle_ediff(spec: &DgpSpec, temperature: f64) -> Vec<f64> {
    (0..spec.n_concepts)
        .map(|c| {
            let delta = (spec.effective_rate(c, Role::Generated) - spec.effective_rate(c, Role::Natural))
                * spec.magnitude_means[c];
            sigmoid(delta / temperature)
        })
        .collect()
}

/// Paths written by [`write_fixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct FixturePaths {
    pub manifest: PathBuf,
    pub spec: PathBuf,
    pub real: PathBuf,
    pub generated: PathBuf,
}

pub const FIXTURE_MODEL: &str = "synthetic";

/// Samples natural and generated sets and writes them with a manifest that
/// pairs image `i` of each.
pub fn write_fixture(dir: impl AsRef<Path>, spec: &DgpSpec, n_img: usize) -> Result<FixturePaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let real = sample_dataset(spec, n_img, Role::Natural)?;
    let gen = sample_dataset(spec, n_img, Role::Generated)?;
    let paths = FixturePaths {
        manifest: dir.join("manifest.json"),
        spec: dir.join("spec.json"),
        real: dir.join("real.cbfm"),
        generated: dir.join(format!("gen_{FIXTURE_MODEL}.cbfm")),
    };
    write_feature_matrix(&real.features, &paths.real)?;
    write_feature_matrix(&gen.features, &paths.generated)?;
    let t = spec.tokens_per_image;
    let entries = (0..n_img)
        .map(|i| {
            let rr = |p: &str| RowRef {
                path: PathBuf::from(p),
                row_start: i * t,
                row_end: (i + 1) * t,
            };
            let mut gen_refs = BTreeMap::new();
            gen_refs.insert(FIXTURE_MODEL.to_string(), rr(&format!("gen_{FIXTURE_MODEL}.cbfm")));
            ManifestEntry {
                caption_id: format!("img{i:05}"),
                caption: String::new(),
                real_ref: rr("real.cbfm"),
                gen_refs,
            }
        })
        .collect();
    DatasetManifest::new(t, entries).save(&paths.manifest)?;
    let json = serde_json::to_vec_pretty(spec).map_err(|e| Error::json("dgp spec", e))?;
    crate::tensorio::write_bytes(&paths.spec, &json)?;
    Ok(paths)
}

/// Reads a spec file holding either a full spec or a compact config.
pub fn load_spec(path: impl AsRef<Path>) -> Result<DgpSpec> {
    let path = path.as_ref();
    let bytes = crate::tensorio::read_bytes(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    if value.get("mixing").is_some() {
        let spec: DgpSpec =
            serde_json::from_value(value).map_err(|e| Error::json(path.display().to_string(), e))?;
        spec.validate()?;
        Ok(spec)
    } else {
        let cfg: DgpConfig =
            serde_json::from_value(value).map_err(|e| Error::json(path.display().to_string(), e))?;
        DgpSpec::from_config(&cfg)
    }
}

//! Per-image concept energies, energy differences and blindspot classes.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasae::SparseCodeMatrix;
use crate::stats::{self, sigmoid, Histogram};
use crate::tensorio::{read_bytes, write_bytes, Container, SectionData, TokenGrouping};

pub const DEFAULT_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_TAIL_TEMPERATURE: f64 = 0.4;
pub const DEFAULT_BINS: usize = 100;

/// Concept energies of one image, aggregated over its token rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyVector {
    pub caption_id: String,
    pub energies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptClass {
    Suppressed,
    Neutral,
    Exaggerated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub temperature: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            lambda_min: 0.1,
            lambda_max: 0.9,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lambda_min && self.lambda_min < self.lambda_max && self.lambda_max < 1.0) {
            return Err(Error::Argument(format!(
                "thresholds must satisfy 0 < {} < {} < 1",
                self.lambda_min, self.lambda_max
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Argument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn classify(&self, ediff: f64) -> ConceptClass {
        if ediff < self.lambda_min {
            ConceptClass::Suppressed
        } else if ediff > self.lambda_max {
            ConceptClass::Exaggerated
        } else {
            ConceptClass::Neutral
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept_id: usize,
    pub ediff: f64,
    pub delta: f64,
    /// Real images in which the concept fires at all.
    pub frequency: u64,
    pub class: ConceptClass,
}

/// Collapses token-level codes into one energy vector per image.
///
/// With `Mean`, tokens where the concept is absent count as zero.
pub fn aggregate_energies(
    codes: &SparseCodeMatrix,
    grouping: TokenGrouping,
    mode: AggregationMode,
    caption_ids: &[String],
) -> Result<Vec<EnergyVector>> {
    grouping.check_rows(codes.n_rows())?;
    if caption_ids.len() != grouping.image_count {
        return Err(Error::Shape(format!(
            "{} caption ids for {} images",
            caption_ids.len(),
            grouping.image_count
        )));
    }
    let k = codes.n_concepts();
    let t = grouping.tokens_per_image as f64;
    Ok((0..grouping.image_count)
        .into_par_iter()
        .map(|img| {
            let mut e = vec![0.0; k];
            for r in grouping.image_rows(img) {
                for (j, a) in codes.row_entries(r) {
                    match mode {
                        AggregationMode::Mean => e[j] += a,
                        AggregationMode::Max => e[j] = e[j].max(a),
                    }
                }
            }
            if mode == AggregationMode::Mean {
                e.iter_mut().for_each(|v| *v /= t);
            }
            EnergyVector {
                caption_id: caption_ids[img].clone(),
                energies: e,
            }
        })
        .collect())
}

fn concept_means(set: &[EnergyVector], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    for v in set {
        for (a, &e) in m.iter_mut().zip(&v.energies) {
            *a += e;
        }
    }
    m.iter_mut().for_each(|a| *a /= set.len() as f64);
    m
}

fn check_set(name: &str, set: &[EnergyVector], k: usize) -> Result<()> {
    if let Some(v) = set.iter().find(|v| v.energies.len() != k) {
        return Err(Error::Shape(format!(
            "{name} energy vector `{}` has {} concepts, expected {k}",
            v.caption_id,
            v.energies.len()
        )));
    }
    if set.iter().flat_map(|v| &v.energies).any(|e| !e.is_finite()) {
        return Err(Error::Validation(format!("{name} energies are not finite")));
    }
    Ok(())
}

/// Scores every concept by `sigmoid((mean_gen - mean_real) / T)`.
///
/// Scores near 1 mark concepts the generator over-produces, near 0 those it
/// under-produces.
pub fn energy_difference(
    real: &[EnergyVector],
    gen: &[EnergyVector],
    th: &Thresholds,
) -> Result<Vec<ConceptScore>> {
    th.validate()?;
    if real.is_empty() || gen.is_empty() {
        return Err(Error::Argument(format!(
            "energy difference needs both sets non-empty (real {}, generated {})",
            real.len(),
            gen.len()
        )));
    }
    let k = real[0].energies.len();
    check_set("real", real, k)?;
    check_set("generated", gen, k)?;
    let mr = concept_means(real, k);
    let mg = concept_means(gen, k);
    let mut freq = vec![0u64; k];
    for v in real {
        for (f, &e) in freq.iter_mut().zip(&v.energies) {
            if e > 0.0 {
                *f += 1;
            }
        }
    }
    Ok((0..k)
        .map(|j| {
            let delta = mg[j] - mr[j];
            let ediff = sigmoid(delta / th.temperature);
            ConceptScore {
                concept_id: j,
                ediff,
                delta,
                frequency: freq[j],
                class: th.classify(ediff),
            }
        })
        .collect())
}

/// Histogram of Ediff values over `[0, 1]`.
pub fn ediff_histogram(scores: &[ConceptScore], bins: usize) -> Result<Histogram> {
    let v: Vec<f64> = scores.iter().map(|s| s.ediff).collect();
    Histogram::new(&v, 0.0, 1.0, bins)
}

pub fn skewness(scores: &[ConceptScore]) -> Result<f64> {
    let v: Vec<f64> = scores.iter().map(|s| s.ediff).collect();
    stats::skewness(&v)
}

/// Pearson correlation between two models' Ediff vectors.
pub fn cross_model_correlation(a: &[ConceptScore], b: &[ConceptScore]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "score sets cover {} and {} concepts",
            a.len(),
            b.len()
        )));
    }
    if let Some((x, y)) = a.iter().zip(b).find(|(x, y)| x.concept_id != y.concept_id) {
        return Err(Error::Shape(format!(
            "concept order differs: {} vs {}",
            x.concept_id, y.concept_id
        )));
    }
    let va: Vec<f64> = a.iter().map(|s| s.ediff).collect();
    let vb: Vec<f64> = b.iter().map(|s| s.ediff).collect();
    stats::pearson(&va, &vb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPoint {
    pub concept_id: usize,
    pub frequency: u64,
    /// `sigmoid(|delta| / T_tail)`.
    pub value: f64,
}

/// Pairs each concept's frequency with its tail-tempered `|delta|`, sorted
/// by frequency (then concept id).
pub fn frequency_analysis(scores: &[ConceptScore], t_tail: f64) -> Result<Vec<FrequencyPoint>> {
    if !(t_tail > 0.0) {
        return Err(Error::Argument(format!(
            "tail temperature must be positive, got {t_tail}"
        )));
    }
    let mut out: Vec<FrequencyPoint> = scores
        .iter()
        .map(|s| FrequencyPoint {
            concept_id: s.concept_id,
            frequency: s.frequency,
            value: sigmoid(s.delta.abs() / t_tail),
        })
        .collect();
    out.sort_by_key(|p| (p.frequency, p.concept_id));
    Ok(out)
}

/// Blindspot rankings: suppressed concepts by ascending Ediff, exaggerated
/// ones by descending Ediff, ties by concept id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub suppressed: Vec<usize>,
    pub exaggerated: Vec<usize>,
}

pub fn rank_concepts(scores: &[ConceptScore]) -> Rankings {
    let mut sup: Vec<&ConceptScore> = scores
        .iter()
        .filter(|s| s.class == ConceptClass::Suppressed)
        .collect();
    sup.sort_by(|a, b| a.ediff.total_cmp(&b.ediff).then(a.concept_id.cmp(&b.concept_id)));
    let mut exa: Vec<&ConceptScore> = scores
        .iter()
        .filter(|s| s.class == ConceptClass::Exaggerated)
        .collect();
    exa.sort_by(|a, b| b.ediff.total_cmp(&a.ediff).then(a.concept_id.cmp(&b.concept_id)));
    Rankings {
        suppressed: sup.iter().map(|s| s.concept_id).collect(),
        exaggerated: exa.iter().map(|s| s.concept_id).collect(),
    }
}

pub fn save_scores(scores: &[ConceptScore], path: impl AsRef<Path>) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(scores).map_err(|e| Error::json("scores", e))?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ConceptScore>> {
    let path = path.as_ref();
    let scores: Vec<ConceptScore> = serde_json::from_slice(&read_bytes(path)?)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    for (i, s) in scores.iter().enumerate() {
        if s.concept_id != i || !s.ediff.is_finite() || !s.delta.is_finite() {
            return Err(Error::Validation(format!(
                "{}: entry {i} is malformed",
                path.display()
            )));
        }
    }
    Ok(scores)
}

/// Stores per-image energies as a binary container (ids plus a dense matrix).
pub fn save_energies(vectors: &[EnergyVector], path: impl AsRef<Path>) -> Result<()> {
    let k = vectors.first().map_or(0, |v| v.energies.len());
    if vectors.iter().any(|v| v.energies.len() != k) {
        return Err(Error::Shape("energy vectors differ in length".into()));
    }
    let ids: Vec<&str> = vectors.iter().map(|v| v.caption_id.as_str()).collect();
    let mut c = Container::new();
    c.push(
        "ids",
        SectionData::Bytes(serde_json::to_vec(&ids).map_err(|e| Error::json("energy ids", e))?),
    );
    c.push(
        "energies",
        SectionData::F64 {
            rows: vectors.len(),
            cols: k,
            data: vectors.iter().flat_map(|v| v.energies.iter().cloned()).collect(),
        },
    );
    c.write(path)
}

pub fn load_energies(path: impl AsRef<Path>) -> Result<Vec<EnergyVector>> {
    let path = path.as_ref();
    let c = Container::read(path)?;
    let ids: Vec<String> =
        serde_json::from_slice(c.bytes("ids")?).map_err(|e| Error::json(path.display().to_string(), e))?;
    let (rows, cols, data) = c.f64_matrix("energies")?;
    if rows != ids.len() {
        return Err(Error::Corruption(format!(
            "{}: {} ids for {rows} energy rows",
            path.display(),
            ids.len()
        )));
    }
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, caption_id)| EnergyVector {
            caption_id,
            energies: data[i * cols..(i + 1) * cols].to_vec(),
        })
        .collect())
}

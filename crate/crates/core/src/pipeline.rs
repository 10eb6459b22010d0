//! Staged end-to-end run driven by a JSON config, with on-disk memoization.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::concepts::{
    aggregate_energies, ediff_histogram, energy_difference, frequency_analysis, load_energies, load_scores,
    rank_concepts, save_energies, save_scores, skewness, AggregationMode, ConceptClass, ConceptScore, EnergyVector,
    FrequencyPoint, Rankings, Thresholds, DEFAULT_BINS, DEFAULT_TAIL_TEMPERATURE,
};
use crate::cooccur::{cooccurrence, eigenspectrum, eigvec_similarity, is_numerically_psd, l0_curve, unique_entries};
use crate::datapoint::{pair_divergences, rank_pairs, PairDivergence, Spread};
use crate::error::{Error, Result};
use crate::explorer::{
    build_bundle, embed_2d, embed_cooccurrence, resolve_created_at, BundleInputs, ExemplarSource, ExportBundle,
    DEFAULT_EXEMPLARS, DEFAULT_PARTNERS,
};
use crate::rasae::{train, Sae, SaeConfig, SparseCodeMatrix};
use crate::stats::Histogram;
use crate::tensorio::{load_paired_features, read_bytes, read_feature_matrix, write_bytes, DatasetManifest};

pub const SAE_FILE: &str = "sae.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const CODES_REAL_FILE: &str = "codes_real.bin";
pub const CODES_GEN_FILE: &str = "codes_gen.bin";
pub const ENERGIES_REAL_FILE: &str = "energies_real.bin";
pub const ENERGIES_GEN_FILE: &str = "energies_gen.bin";
pub const SCORES_FILE: &str = "scores.json";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const PAIRS_FILE: &str = "pairs.json";
pub const COOCCUR_FILE: &str = "cooccur.json";
pub const BUNDLE_FILE: &str = "bundle.json";
pub const RUN_MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analyses {
    pub datapoint: bool,
    pub cooccur: bool,
    pub export: bool,
}

impl Default for Analyses {
    fn default() -> Self {
        Self {
            datapoint: true,
            cooccur: true,
            export: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    #[default]
    Atoms,
    Cooccurrence,
}

/// Declarative description of one run. Relative paths are taken relative to
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Generated model to analyse, as named in the manifest.
    pub model: String,
    pub output_dir: PathBuf,
    /// `input_dim` and `seed` are filled in at run time.
    pub sae: SaeConfig,
    /// Use this trained model instead of training one.
    pub sae_path: Option<PathBuf>,
    /// Train on this feature file instead of the manifest's real features.
    pub sae_data: Option<PathBuf>,
    pub thresholds: Thresholds,
    pub aggregation: AggregationMode,
    pub tail_temperature: f64,
    pub analyses: Analyses,
    pub top_pairs: usize,
    pub cooccur_top: usize,
    pub epsilons: Vec<f64>,
    pub embedding: EmbeddingSource,
    pub exemplars: usize,
    pub created_at: Option<String>,
    pub thumbnails: Option<String>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            model: String::new(),
            output_dir: PathBuf::from("out"),
            sae: SaeConfig {
                n_concepts: 128,
                ..SaeConfig::default()
            },
            sae_path: None,
            sae_data: None,
            thresholds: Thresholds::default(),
            aggregation: AggregationMode::Mean,
            tail_temperature: DEFAULT_TAIL_TEMPERATURE,
            analyses: Analyses::default(),
            top_pairs: 20,
            cooccur_top: 100,
            epsilons: vec![0.0, 0.1, 1.0, 10.0],
            embedding: EmbeddingSource::Atoms,
            exemplars: DEFAULT_EXEMPLARS,
            created_at: None,
            thumbnails: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self =
            serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::json(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.manifest);
        fix(&mut cfg.output_dir);
        if let Some(p) = cfg.sae_path.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.sae_data.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    /// Checks everything that can be checked without touching feature data
    /// and returns the parsed manifest.
    pub fn validate(&self) -> Result<DatasetManifest> {
        for (what, p) in [("manifest", Some(&self.manifest)), ("sae_path", self.sae_path.as_ref()), ("sae_data", self.sae_data.as_ref())] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Validation(format!("{what} `{}` does not exist", p.display())));
                }
            }
        }
        let manifest = DatasetManifest::load(&self.manifest)?;
        manifest.validate_structure()?;
        let models = manifest.models();
        if !models.contains(&self.model) {
            return Err(Error::Validation(format!(
                "model `{}` is not in the manifest (has {models:?})",
                self.model
            )));
        }
        self.thresholds.validate()?;
        if self.sae_path.is_none() {
            SaeConfig {
                input_dim: 1,
                ..self.sae.clone()
            }
            .validate()?;
        }
        if !(self.tail_temperature > 0.0) {
            return Err(Error::Validation("tail_temperature must be positive".into()));
        }
        if self.epsilons.windows(2).any(|w| !(w[0] <= w[1])) || self.epsilons.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Validation("epsilons must be non-negative and ascending".into()));
        }
        resolve_created_at(self.created_at.as_deref())?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Parameters the outputs depend on besides input files.
    pub fingerprint: String,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<String>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// A run error together with the stage it came from.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: String,
    pub error: Error,
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path.as_ref().display().to_string(), e))?;
    bytes.push(b'\n');
    write_bytes(path.as_ref(), &bytes)
}

fn mtime(p: &Path) -> Option<SystemTime> {
    std::fs::metadata(p).and_then(|m| m.modified()).ok()
}

struct Runner {
    dir: PathBuf,
    previous: Option<RunManifest>,
    force: bool,
    manifest: RunManifest,
}

impl Runner {
    fn fresh(&self, name: &str, inputs: &[PathBuf], outputs: &[PathBuf], fingerprint: &str) -> bool {
        if self.force {
            return false;
        }
        let Some(prev) = self.previous.as_ref().and_then(|m| m.stage(name)) else {
            return false;
        };
        if prev.status == StageStatus::Failed || prev.fingerprint != fingerprint {
            return false;
        }
        let newest_input = inputs.iter().map(|p| mtime(p)).collect::<Option<Vec<_>>>().map(|v| v.into_iter().max());
        let oldest_output = outputs.iter().map(|p| mtime(p)).collect::<Option<Vec<_>>>().map(|v| v.into_iter().min());
        match (newest_input, oldest_output) {
            (Some(i), Some(Some(o))) => i.is_none_or(|i| o >= i),
            _ => false,
        }
    }

    fn save(&self) -> Result<()> {
        write_json(&self.manifest, self.dir.join(RUN_MANIFEST_FILE))
    }

    fn stage(
        &mut self,
        name: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        fingerprint: String,
        work: impl FnOnce() -> Result<()>,
    ) -> std::result::Result<(), StageFailure> {
        let skip = self.fresh(name, inputs, outputs, &fingerprint);
        let result = if skip {
            log::info!("stage {name}: up to date");
            Ok(())
        } else {
            log::info!("stage {name}: running");
            work()
        };
        let status = match (&result, skip) {
            (Err(_), _) => StageStatus::Failed,
            (Ok(()), true) => StageStatus::Skipped,
            (Ok(()), false) => StageStatus::Ran,
        };
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status,
            fingerprint,
            outputs: outputs.to_vec(),
        });
        if let Err(error) = result {
            self.manifest.failed_stage = Some(name.into());
            let _ = self.save();
            return Err(StageFailure {
                stage: name.into(),
                error,
            });
        }
        Ok(())
    }
}

fn fingerprint(v: serde_json::Value) -> String {
    v.to_string()
}

/// Runs every enabled stage in dependency order, skipping stages whose
/// outputs are newer than their inputs and whose parameters are unchanged.
pub fn run_pipeline(cfg: &RunConfig, force: bool) -> std::result::Result<RunManifest, StageFailure> {
    let fail = |stage: &str| {
        let stage = stage.to_string();
        move |error| StageFailure { stage, error }
    };
    let manifest = cfg.validate().map_err(fail("validate"))?;
    let created_at = resolve_created_at(cfg.created_at.as_deref()).map_err(fail("validate"))?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).map_err(fail("validate"))?;
    let previous = std::fs::read(dir.join(RUN_MANIFEST_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<RunManifest>(&b).ok());
    let mut run = Runner {
        dir: dir.clone(),
        previous,
        force,
        manifest: RunManifest {
            model: cfg.model.clone(),
            seed: cfg.seed,
            stages: Vec::new(),
            failed_stage: None,
        },
    };
    let out = |f: &str| dir.join(f);

    let mut features: BTreeSet<PathBuf> = BTreeSet::new();
    for e in &manifest.entries {
        features.insert(manifest.resolve(&e.real_ref.path));
        features.insert(manifest.resolve(&e.gen_refs[&cfg.model].path));
    }
    let mut data_inputs: Vec<PathBuf> = vec![cfg.manifest.clone()];
    data_inputs.extend(features);

    let sae_path = match &cfg.sae_path {
        Some(p) => p.clone(),
        None => {
            let sae_cfg = SaeConfig {
                seed: cfg.seed,
                ..cfg.sae.clone()
            };
            let mut inputs = data_inputs.clone();
            inputs.extend(cfg.sae_data.clone());
            let outputs = [out(SAE_FILE), out(TRAIN_REPORT_FILE)];
            run.stage("train", &inputs, &outputs, fingerprint(json!({"sae": sae_cfg, "data": cfg.sae_data})), || {
                let data = match &cfg.sae_data {
                    Some(p) => read_feature_matrix(p)?,
                    None => manifest.load_real()?,
                };
                let (sae, report) = train(&data, &SaeConfig {
                    input_dim: data.cols(),
                    ..sae_cfg.clone()
                })?;
                sae.save(&outputs[0])?;
                write_json(&report, &outputs[1])
            })?;
            out(SAE_FILE)
        }
    };

    let codes = [out(CODES_REAL_FILE), out(CODES_GEN_FILE)];
    let mut inputs = data_inputs.clone();
    inputs.push(sae_path.clone());
    run.stage("encode", &inputs, &codes, fingerprint(json!({"model": cfg.model})), || {
        let sae = Sae::load(&sae_path)?;
        let (real, gen) = encode_pair(&sae, &manifest, &cfg.model)?;
        real.save(&codes[0])?;
        gen.save(&codes[1])
    })?;

    let energy_out = [out(ENERGIES_REAL_FILE), out(ENERGIES_GEN_FILE), out(SCORES_FILE), out(ANALYSIS_FILE)];
    let mut inputs = codes.to_vec();
    inputs.push(cfg.manifest.clone());
    let fp = fingerprint(json!({
        "thresholds": cfg.thresholds,
        "aggregation": cfg.aggregation,
        "tail_temperature": cfg.tail_temperature,
        "model": cfg.model,
    }));
    run.stage("energy-diff", &inputs, &energy_out, fp, || {
        let real = SparseCodeMatrix::load(&codes[0])?;
        let gen = SparseCodeMatrix::load(&codes[1])?;
        let e = energy_stage(&real, &gen, &manifest, cfg)?;
        save_energies(&e.real, &energy_out[0])?;
        save_energies(&e.generated, &energy_out[1])?;
        save_scores(&e.scores, &energy_out[2])?;
        write_json(&e.report, &energy_out[3])
    })?;

    if cfg.analyses.datapoint {
        let outputs = [out(PAIRS_FILE)];
        run.stage("datapoint", &energy_out[..2], &outputs, fingerprint(json!({"top": cfg.top_pairs})), || {
            let report = pairs_report(&load_energies(&energy_out[0])?, &load_energies(&energy_out[1])?, cfg.top_pairs)?;
            write_json(&report, &outputs[0])
        })?;
    }

    if cfg.analyses.cooccur {
        let outputs = [out(COOCCUR_FILE)];
        let fp = fingerprint(json!({"top": cfg.cooccur_top, "epsilons": cfg.epsilons}));
        run.stage("cooccur", &codes, &outputs, fp, || {
            let real = SparseCodeMatrix::load(&codes[0])?;
            let gen = SparseCodeMatrix::load(&codes[1])?;
            write_json(&cooccur_report(&real, &gen, cfg.cooccur_top, &cfg.epsilons)?, &outputs[0])
        })?;
    }

    if cfg.analyses.export {
        let outputs = [out(BUNDLE_FILE)];
        let mut inputs = vec![out(SCORES_FILE), sae_path.clone(), cfg.manifest.clone()];
        inputs.extend(codes.iter().cloned());
        let opts = ExportOptions {
            dir: dir.clone(),
            sae_path: sae_path.clone(),
            manifest: cfg.manifest.clone(),
            model: cfg.model.clone(),
            embedding: cfg.embedding,
            thresholds: cfg.thresholds,
            exemplars: cfg.exemplars,
            created_at: created_at.clone(),
            thumbnails: cfg.thumbnails.clone(),
        };
        let fp = fingerprint(json!({
            "model": cfg.model,
            "embedding": cfg.embedding,
            "thresholds": cfg.thresholds,
            "exemplars": cfg.exemplars,
            "created_at": created_at,
            "thumbnails": cfg.thumbnails,
        }));
        run.stage("export", &inputs, &outputs, fp, || export_from_dir(&opts)?.save(&outputs[0]))?;
    }

    run.save().map_err(fail("manifest"))?;
    Ok(run.manifest)
}

/// Encodes the real and generated features of `model`, in manifest order.
pub fn encode_pair(sae: &Sae, manifest: &DatasetManifest, model: &str) -> Result<(SparseCodeMatrix, SparseCodeMatrix)> {
    let paired = load_paired_features(manifest, model)?;
    Ok((sae.encode(&paired.real)?, sae.encode(&paired.generated)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub suppressed: usize,
    pub neutral: usize,
    pub exaggerated: usize,
}

/// Distribution-level summary of one model's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub model: String,
    pub temperature: f64,
    /// `None` when the Ediff values have no spread.
    pub skewness: Option<f64>,
    pub classes: ClassCounts,
    pub histogram: Histogram,
    pub rankings: Rankings,
    pub tail_temperature: f64,
    pub frequency: Vec<FrequencyPoint>,
}

pub struct EnergyOutputs {
    pub real: Vec<EnergyVector>,
    pub generated: Vec<EnergyVector>,
    pub scores: Vec<ConceptScore>,
    pub report: EnergyReport,
}

pub fn energy_stage(
    real: &SparseCodeMatrix,
    gen: &SparseCodeMatrix,
    manifest: &DatasetManifest,
    cfg: &RunConfig,
) -> Result<EnergyOutputs> {
    let grouping = manifest.grouping()?;
    let ids = manifest.caption_ids();
    let er = aggregate_energies(real, grouping, cfg.aggregation, &ids)?;
    let eg = aggregate_energies(gen, grouping, cfg.aggregation, &ids)?;
    let scores = energy_difference(&er, &eg, &cfg.thresholds)?;
    let count = |c: ConceptClass| scores.iter().filter(|s| s.class == c).count();
    let report = EnergyReport {
        model: cfg.model.clone(),
        temperature: cfg.thresholds.temperature,
        skewness: match skewness(&scores) {
            Ok(v) => Some(v),
            Err(Error::UndefinedStatistic(_)) => None,
            Err(e) => return Err(e),
        },
        classes: ClassCounts {
            suppressed: count(ConceptClass::Suppressed),
            neutral: count(ConceptClass::Neutral),
            exaggerated: count(ConceptClass::Exaggerated),
        },
        histogram: ediff_histogram(&scores, DEFAULT_BINS)?,
        rankings: rank_concepts(&scores),
        tail_temperature: cfg.tail_temperature,
        frequency: frequency_analysis(&scores, cfg.tail_temperature)?,
    };
    Ok(EnergyOutputs {
        real: er,
        generated: eg,
        scores,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsReport {
    pub n_pairs: usize,
    pub l2: Spread,
    pub sigmoid_mean: Spread,
    /// Memorization candidates, smallest divergence first.
    pub lowest: Vec<PairDivergence>,
    /// Prompt-incongruence candidates, largest divergence first.
    pub highest: Vec<PairDivergence>,
}

pub fn pairs_report(real: &[EnergyVector], gen: &[EnergyVector], top: usize) -> Result<PairsReport> {
    let divs = pair_divergences(real, gen)?;
    if divs.is_empty() {
        return Err(Error::Argument("no image pairs".into()));
    }
    let extremes = rank_pairs(&divs, top.min(divs.len()))?;
    let l2: Vec<f64> = divs.iter().map(|d| d.l2).collect();
    let sm: Vec<f64> = divs.iter().map(|d| d.sigmoid_mean).collect();
    Ok(PairsReport {
        n_pairs: divs.len(),
        l2: Spread::of(&l2),
        sigmoid_mean: Spread::of(&sm),
        lowest: extremes.lowest,
        highest: extremes.highest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurReport {
    pub n_concepts: usize,
    /// `(epsilon, entries above epsilon)` for the real codes.
    pub l0_real: Vec<(f64, u64)>,
    pub l0_gen: Vec<(f64, u64)>,
    /// `(epsilon, entries above epsilon in generated but not in real)`.
    pub unique_entries: Vec<(f64, u64)>,
    pub eigenvalues_real: Vec<f64>,
    pub eigenvalues_gen: Vec<f64>,
    pub psd_real: bool,
    pub psd_gen: bool,
    /// `|cos|` between the leading real (rows) and generated (columns)
    /// eigenvectors.
    pub similarity: Vec<Vec<f64>>,
}

pub fn cooccur_report(real: &SparseCodeMatrix, gen: &SparseCodeMatrix, top: usize, epsilons: &[f64]) -> Result<CooccurReport> {
    let cr = cooccurrence(real);
    let cg = cooccurrence(gen);
    if cr.dim() != cg.dim() {
        return Err(Error::Shape(format!("{} real vs {} generated concepts", cr.dim(), cg.dim())));
    }
    let top = top.min(cr.dim());
    let er = eigenspectrum(&cr, top)?;
    let eg = eigenspectrum(&cg, top)?;
    Ok(CooccurReport {
        n_concepts: cr.dim(),
        l0_real: l0_curve(&cr, epsilons)?,
        l0_gen: l0_curve(&cg, epsilons)?,
        unique_entries: epsilons
            .iter()
            .map(|&e| unique_entries(&cg, &cr, e).map(|n| (e, n)))
            .collect::<Result<_>>()?,
        psd_real: is_numerically_psd(&er.values),
        psd_gen: is_numerically_psd(&eg.values),
        similarity: eigvec_similarity(&er.vectors, &eg.vectors, top)?,
        eigenvalues_real: er.values,
        eigenvalues_gen: eg.values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportOptions {
    /// Directory holding the stage outputs.
    pub dir: PathBuf,
    pub sae_path: PathBuf,
    pub manifest: PathBuf,
    pub model: String,
    pub embedding: EmbeddingSource,
    /// Must be the thresholds the scores were classified with.
    pub thresholds: Thresholds,
    pub exemplars: usize,
    pub created_at: String,
    pub thumbnails: Option<String>,
}

/// Assembles a bundle from the artifacts of a previous run.
pub fn export_from_dir(opts: &ExportOptions) -> Result<ExportBundle> {
    let require = |p: &Path, stage: &str| {
        if p.is_file() {
            Ok(())
        } else {
            Err(Error::Dependency { stage: stage.into() })
        }
    };
    let scores_path = opts.dir.join(SCORES_FILE);
    let codes_real = opts.dir.join(CODES_REAL_FILE);
    let codes_gen = opts.dir.join(CODES_GEN_FILE);
    require(&scores_path, "energy-diff")?;
    require(&codes_real, "encode")?;
    require(&codes_gen, "encode")?;
    let manifest = DatasetManifest::load(&opts.manifest)?;
    let scores = load_scores(&scores_path)?;
    let real = SparseCodeMatrix::load(&codes_real)?;
    let gen = SparseCodeMatrix::load(&codes_gen)?;
    let c = cooccurrence(&gen);
    let embedding = match opts.embedding {
        EmbeddingSource::Atoms => {
            require(&opts.sae_path, "train")?;
            embed_2d(&Sae::load(&opts.sae_path)?.dictionary())?
        }
        EmbeddingSource::Cooccurrence => embed_cooccurrence(&c)?,
    };
    let grouping = manifest.grouping()?;
    let ids = manifest.caption_ids();
    build_bundle(&BundleInputs {
        model_name: &opts.model,
        scores: Some(&scores),
        embedding: Some(&embedding),
        real: Some(ExemplarSource {
            codes: &real,
            grouping,
            image_ids: &ids,
        }),
        generated: Some(ExemplarSource {
            codes: &gen,
            grouping,
            image_ids: &ids,
        }),
        cooccurrence: Some(&c),
        thresholds: opts.thresholds,
        created_at: opts.created_at.clone(),
        thumbnails: opts.thumbnails.clone(),
        exemplars: opts.exemplars,
        partners: DEFAULT_PARTNERS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdgp::{write_fixture, DgpConfig, DgpSpec, FIXTURE_MODEL};
    use std::collections::BTreeMap;

    fn setup(dir: &Path) -> RunConfig {
        let spec = DgpSpec::from_config(&DgpConfig {
            n_concepts: 8,
            dim: 16,
            base_rate: 0.2,
            magnitude_mean: 2.0,
            planted: BTreeMap::from([(1, 0.05), (2, 4.0)]),
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let fx = write_fixture(dir.join("data"), &spec, 120).unwrap();
        RunConfig {
            manifest: fx.manifest,
            model: FIXTURE_MODEL.into(),
            output_dir: dir.join("out"),
            sae: SaeConfig {
                n_concepts: 12,
                top_k: 3,
                anchors: 24,
                epochs: 2,
                batch_size: 32,
                ..SaeConfig::default()
            },
            cooccur_top: 5,
            created_at: Some("2024-01-01T00:00:00Z".into()),
            seed: 9,
            ..RunConfig::default()
        }
    }

    fn statuses(m: &RunManifest) -> Vec<(String, StageStatus)> {
        m.stages.iter().map(|s| (s.name.clone(), s.status)).collect()
    }

    fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        [SAE_FILE, CODES_REAL_FILE, CODES_GEN_FILE, ENERGIES_REAL_FILE, SCORES_FILE, ANALYSIS_FILE, PAIRS_FILE, COOCCUR_FILE, BUNDLE_FILE]
            .iter()
            .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
            .collect()
    }

    #[test]
    fn full_run_then_cached_rerun() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path());
        let first = run_pipeline(&cfg, false).unwrap();
        assert!(first.stages.iter().all(|s| s.status == StageStatus::Ran));
        assert_eq!(first.stages.len(), 6);
        let bundle = ExportBundle::load(cfg.output_dir.join(BUNDLE_FILE)).unwrap();
        assert!(bundle.matches_scores(&load_scores(cfg.output_dir.join(SCORES_FILE)).unwrap()));
        let before = snapshot(&cfg.output_dir);

        let second = run_pipeline(&cfg, false).unwrap();
        assert!(second.stages.iter().all(|s| s.status == StageStatus::Skipped), "{:?}", statuses(&second));

        let forced = run_pipeline(&cfg, true).unwrap();
        assert!(forced.stages.iter().all(|s| s.status == StageStatus::Ran));
        assert_eq!(snapshot(&cfg.output_dir), before);
    }

    #[test]
    fn deleted_intermediate_reruns_its_dependents() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path());
        run_pipeline(&cfg, false).unwrap();
        let before = snapshot(&cfg.output_dir);
        std::fs::remove_file(cfg.output_dir.join(ENERGIES_GEN_FILE)).unwrap();
        let m = run_pipeline(&cfg, false).unwrap();
        let ran: Vec<String> = m.stages.iter().filter(|s| s.status == StageStatus::Ran).map(|s| s.name.clone()).collect();
        assert_eq!(ran, vec!["energy-diff", "datapoint", "export"]);
        assert_eq!(snapshot(&cfg.output_dir), before);

        std::fs::remove_file(cfg.output_dir.join(PAIRS_FILE)).unwrap();
        let m = run_pipeline(&cfg, false).unwrap();
        let ran: Vec<String> = m.stages.iter().filter(|s| s.status == StageStatus::Ran).map(|s| s.name.clone()).collect();
        assert_eq!(ran, vec!["datapoint"]);
    }

    #[test]
    fn changed_parameters_invalidate_a_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = setup(tmp.path());
        cfg.analyses.export = false;
        run_pipeline(&cfg, false).unwrap();
        cfg.top_pairs = 3;
        let m = run_pipeline(&cfg, false).unwrap();
        assert_eq!(m.stage("datapoint").unwrap().status, StageStatus::Ran);
        assert_eq!(m.stage("cooccur").unwrap().status, StageStatus::Skipped);
        assert!(m.stage("export").is_none());
        let pairs: PairsReport = serde_json::from_slice(&std::fs::read(cfg.output_dir.join(PAIRS_FILE)).unwrap()).unwrap();
        assert_eq!(pairs.lowest.len(), 3);
    }

    #[test]
    fn missing_manifest_fails_validation_before_work() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = setup(tmp.path());
        cfg.manifest = tmp.path().join("nope.json");
        let err = run_pipeline(&cfg, false).unwrap_err();
        assert_eq!(err.stage, "validate");
        assert!(matches!(err.error, Error::Validation(_)));
        assert!(!cfg.output_dir.exists());

        let mut cfg = setup(tmp.path());
        cfg.model = "other".into();
        assert_eq!(run_pipeline(&cfg, false).unwrap_err().error.exit_code(), 2);
    }

    #[test]
    fn failing_stage_is_named_and_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path());
        run_pipeline(&cfg, false).unwrap();
        std::fs::write(cfg.output_dir.join(CODES_GEN_FILE), b"garbage").unwrap();
        let err = run_pipeline(&cfg, false).unwrap_err();
        assert_eq!(err.stage, "energy-diff");
        let m: RunManifest = serde_json::from_slice(&std::fs::read(cfg.output_dir.join(RUN_MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(m.failed_stage.as_deref(), Some("energy-diff"));
        assert!(cfg.output_dir.join(SAE_FILE).is_file());
    }

    #[test]
    fn config_paths_resolve_against_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("run.json");
        std::fs::write(&p, r#"{"manifest": "data/manifest.json", "model": "m", "seed": 3, "sae": {"n_concepts": 8, "top_k": 2}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.manifest, tmp.path().join("data/manifest.json"));
        assert_eq!(cfg.output_dir, tmp.path().join("out"));
        assert_eq!(cfg.sae.top_k, 2);
        std::fs::write(&p, r#"{"manifets": "x"}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn export_names_missing_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path());
        let opts = ExportOptions {
            dir: tmp.path().join("empty"),
            sae_path: tmp.path().join("empty").join(SAE_FILE),
            manifest: cfg.manifest.clone(),
            model: cfg.model.clone(),
            embedding: EmbeddingSource::Atoms,
            thresholds: Thresholds::default(),
            exemplars: 4,
            created_at: "2024-01-01T00:00:00Z".into(),
            thumbnails: None,
        };
        match export_from_dir(&opts) {
            Err(Error::Dependency { stage }) => assert_eq!(stage, "energy-diff"),
            other => panic!("{other:?}"),
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail};
use clap::{Args, Parser, Subcommand, ValueEnum};

use blindspots::concepts::{load_energies, save_energies, save_scores, AggregationMode, Thresholds};
use blindspots::explorer::{resolve_created_at, ExportBundle};
use blindspots::interp::{alpha_mask, load_png, save_png, SpatialActivationMap, VlmClient, VlmConfig};
use blindspots::pipeline::{
    cooccur_report, encode_pair, energy_stage, export_from_dir, pairs_report, run_pipeline, write_json,
    EmbeddingSource, ExportOptions, RunConfig, StageFailure, SAE_FILE,
};
use blindspots::rasae::{evaluate, train, Sae, SaeConfig, SparseCodeMatrix};
use blindspots::synthdgp::{load_spec, sample_dataset, write_fixture, DgpConfig, DgpSpec, Role};
use blindspots::tensorio::{read_feature_matrix, write_feature_matrix, DatasetManifest};
use blindspots::theory::verify_theorems;
use blindspots::Error;

#[derive(Parser)]
#[command(name = "blindspots", version, about = "Find concepts a generative image model suppresses or exaggerates")]
struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a top-k (archetypal) sparse autoencoder on a feature file.
    TrainSae(TrainArgs),
    /// Encode a feature file into sparse concept codes.
    Encode(EncodeArgs),
    /// Score every concept for one generated model.
    EnergyDiff(EnergyArgs),
    /// Rank caption pairs by energy-vector divergence.
    Pairs(PairsArgs),
    /// Co-activation sparsity, spectra and eigenvector alignment.
    Cooccur(CooccurArgs),
    /// Check the concentration, calibration and FID results numerically.
    VerifyTheorems(TheoremArgs),
    /// Sample features from a synthetic data-generating process.
    Simulate(SimulateArgs),
    /// Write a synthetic real/generated dataset with a manifest.
    Fixture(FixtureArgs),
    /// Build the explorer bundle from a run directory.
    Export(ExportArgs),
    /// Mask concept exemplars and ask a VLM to describe them.
    Interp(InterpArgs),
    /// Run the whole pipeline from a JSON config.
    Run(RunArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Base hyperparameters as JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Number of archetype anchors; 0 trains a free dictionary. Defaults to
    /// four per concept.
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training statistics.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    sae: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Copy)]
struct ThresholdArgs {
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_min: f64,
    #[arg(long, default_value_t = 0.9)]
    lambda_max: f64,
}

impl ThresholdArgs {
    fn thresholds(self) -> Thresholds {
        Thresholds {
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            temperature: self.temperature,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregation {
    Mean,
    Max,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    sae: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: String,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long, value_enum, default_value = "mean")]
    aggregation: Aggregation,
    #[arg(long, default_value_t = 0.4)]
    tail_temperature: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write codes_real.bin, codes_gen.bin, energies_real.bin,
    /// energies_gen.bin and analysis.json here.
    #[arg(long)]
    artifacts: Option<PathBuf>,
}

#[derive(Args)]
struct PairsArgs {
    /// Per-image energies of the real set.
    #[arg(long)]
    scores_real: PathBuf,
    /// Per-image energies of the generated set.
    #[arg(long)]
    scores_gen: PathBuf,
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CooccurArgs {
    #[arg(long)]
    codes_real: PathBuf,
    #[arg(long)]
    codes_gen: PathBuf,
    #[arg(long, default_value_t = 100)]
    top: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,1,10")]
    epsilons: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoremArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Natural,
    Generated,
}

#[derive(Args)]
struct SimulateArgs {
    /// Full spec or compact config as JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, value_enum, default_value = "generated")]
    role: RoleArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FixtureArgs {
    /// Spec or config JSON; defaults to 64 concepts with 5 suppressed and 5
    /// exaggerated planted blindspots.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    Atoms,
    Cooccurrence,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding scores.json and the code files.
    #[arg(long, default_value = ".")]
    run_dir: PathBuf,
    /// Trained model; defaults to sae.bin in the run directory.
    #[arg(long)]
    sae: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "atoms")]
    embedding: EmbeddingArg,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long, default_value_t = 4)]
    exemplars: usize,
    /// RFC 3339 timestamp; defaults to SOURCE_DATE_EPOCH or the Unix epoch.
    #[arg(long)]
    created_at: Option<String>,
    /// Thumbnail directory recorded in the bundle.
    #[arg(long)]
    thumbs: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Real,
    Gen,
}

#[derive(Args)]
struct InterpArgs {
    #[arg(long)]
    concept: usize,
    #[arg(long)]
    bundle: PathBuf,
    /// Directory of `<image id>.png` files.
    #[arg(long)]
    images: PathBuf,
    /// Token codes of the chosen side.
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "real")]
    side: Side,
    /// Patch grid as HxW; defaults to a square grid.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 0.7)]
    quantile: f64,
    #[arg(long, default_value_t = 4)]
    exemplars: usize,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "gpt-4o")]
    vlm_model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    key_env: String,
    /// Send requests without an Authorization header.
    #[arg(long)]
    no_auth: bool,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Write the masked exemplars here.
    #[arg(long)]
    masks_out: Option<PathBuf>,
    /// Only write masks; do not contact the VLM.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Rerun every stage even if its outputs are current.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    created_at: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = blindspots::configure_threads(cli.threads)
        .map_err(anyhow::Error::from)
        .and_then(|()| dispatch(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return err.exit_code() as u8;
        }
        if let Some(f) = cause.downcast_ref::<StageFailure>() {
            return f.error.exit_code() as u8;
        }
    }
    1
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::TrainSae(a) => train_sae(a),
        Command::Encode(a) => encode(a),
        Command::EnergyDiff(a) => energy_diff(a),
        Command::Pairs(a) => pairs(a),
        Command::Cooccur(a) => cooccur(a),
        Command::VerifyTheorems(a) => theorems(a),
        Command::Simulate(a) => simulate(a),
        Command::Fixture(a) => fixture(a),
        Command::Export(a) => export(a),
        Command::Interp(a) => interp(a),
        Command::Run(a) => run(a),
    }
}

fn train_sae(a: TrainArgs) -> anyhow::Result<()> {
    let data = read_feature_matrix(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice::<SaeConfig>(&bytes).map_err(|e| Error::json(p.display().to_string(), e))?
        }
        None => SaeConfig::default(),
    };
    cfg.input_dim = data.cols();
    cfg.seed = a.seed;
    if let Some(v) = a.concepts {
        cfg.n_concepts = v;
        if a.config.is_none() {
            cfg.anchors = 4 * v;
        }
    }
    if let Some(v) = a.topk {
        cfg.top_k = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr_max = v;
    }
    if let Some(v) = a.anchors {
        cfg.anchors = v;
    }
    let (sae, report) = train(&data, &cfg)?;
    sae.save(&a.out)?;
    if let Some(p) = &a.report {
        write_json(&report, p)?;
    }
    let eval = evaluate(&sae, &data)?;
    println!(
        "trained {} concepts (k={}) for {} epochs: fve={:.4} dead={} -> {}",
        cfg.n_concepts,
        cfg.top_k,
        cfg.epochs,
        eval.fraction_variance_explained,
        eval.dead_latents,
        a.out.display()
    );
    Ok(())
}

fn encode(a: EncodeArgs) -> anyhow::Result<()> {
    let sae = Sae::load(&a.sae)?;
    let codes = sae.encode(&read_feature_matrix(&a.data)?)?;
    codes.save(&a.out)?;
    println!("encoded {} rows ({} nonzeros) -> {}", codes.n_rows(), codes.nnz(), a.out.display());
    Ok(())
}

fn energy_diff(a: EnergyArgs) -> anyhow::Result<()> {
    let sae = Sae::load(&a.sae)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let thresholds = a.thresholds.thresholds();
    thresholds.validate()?;
    let cfg = RunConfig {
        model: a.model.clone(),
        thresholds,
        aggregation: match a.aggregation {
            Aggregation::Mean => AggregationMode::Mean,
            Aggregation::Max => AggregationMode::Max,
        },
        tail_temperature: a.tail_temperature,
        ..RunConfig::default()
    };
    let (real, gen) = encode_pair(&sae, &manifest, &a.model)?;
    let e = energy_stage(&real, &gen, &manifest, &cfg)?;
    save_scores(&e.scores, &a.out)?;
    if let Some(dir) = &a.artifacts {
        std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
        real.save(dir.join("codes_real.bin"))?;
        gen.save(dir.join("codes_gen.bin"))?;
        save_energies(&e.real, dir.join("energies_real.bin"))?;
        save_energies(&e.generated, dir.join("energies_gen.bin"))?;
        write_json(&e.report, dir.join("analysis.json"))?;
    }
    let c = e.report.classes;
    println!(
        "{}: {} suppressed, {} neutral, {} exaggerated -> {}",
        a.model,
        c.suppressed,
        c.neutral,
        c.exaggerated,
        a.out.display()
    );
    Ok(())
}

fn pairs(a: PairsArgs) -> anyhow::Result<()> {
    let report = pairs_report(&load_energies(&a.scores_real)?, &load_energies(&a.scores_gen)?, a.top)?;
    write_json(&report, &a.out)?;
    println!("{} pairs, median l2 {:.4} -> {}", report.n_pairs, report.l2.median, a.out.display());
    Ok(())
}

fn cooccur(a: CooccurArgs) -> anyhow::Result<()> {
    let mut eps = a.epsilons.clone();
    if eps.windows(2).any(|w| w[0] > w[1]) {
        bail!(Error::Argument("--epsilons must be ascending".into()));
    }
    eps.dedup();
    let report = cooccur_report(&SparseCodeMatrix::load(&a.codes_real)?, &SparseCodeMatrix::load(&a.codes_gen)?, a.top, &eps)?;
    write_json(&report, &a.out)?;
    println!("{} concepts, top {} eigenpairs -> {}", report.n_concepts, report.eigenvalues_real.len(), a.out.display());
    Ok(())
}

fn theorems(a: TheoremArgs) -> anyhow::Result<()> {
    let report = verify_theorems(a.trials, a.seed)?;
    write_json(&report, &a.out)?;
    for c in &report.checks {
        println!("{:<14} {}", c.name, if c.passed { "pass" } else { "FAIL" });
    }
    if !report.all_passed() {
        bail!(Error::Numeric("at least one theorem check failed".into()));
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let spec = load_spec(&a.spec)?;
    let role = match a.role {
        RoleArg::Natural => Role::Natural,
        RoleArg::Generated => Role::Generated,
    };
    let ds = sample_dataset(&spec, a.n, role)?;
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    write_feature_matrix(&ds.features, &a.out)?;
    println!("{} images x {} tokens -> {}", a.n, spec.tokens_per_image, a.out.display());
    Ok(())
}

fn fixture(a: FixtureArgs) -> anyhow::Result<()> {
    let spec = match &a.spec {
        Some(p) => load_spec(p)?,
        None => DgpSpec::from_config(&DgpConfig::planted_default(a.seed))?,
    };
    let paths = write_fixture(&a.out, &spec, a.n)?;
    println!("wrote {} images per side; manifest {}", a.n, paths.manifest.display());
    Ok(())
}

fn export(a: ExportArgs) -> anyhow::Result<()> {
    let opts = ExportOptions {
        sae_path: a.sae.clone().unwrap_or_else(|| a.run_dir.join(SAE_FILE)),
        dir: a.run_dir.clone(),
        manifest: a.manifest.clone(),
        model: a.model.clone(),
        embedding: match a.embedding {
            EmbeddingArg::Atoms => EmbeddingSource::Atoms,
            EmbeddingArg::Cooccurrence => EmbeddingSource::Cooccurrence,
        },
        thresholds: a.thresholds.thresholds(),
        exemplars: a.exemplars,
        created_at: resolve_created_at(a.created_at.as_deref())?,
        thumbnails: a.thumbs.clone(),
    };
    let bundle = export_from_dir(&opts)?;
    bundle.save(&a.out)?;
    println!("{} concepts -> {}", bundle.concepts.len(), a.out.display());
    Ok(())
}

fn parse_grid(s: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| anyhow!("grid must look like 16x16"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn interp(a: InterpArgs) -> anyhow::Result<()> {
    let bundle = ExportBundle::load(&a.bundle)?;
    let concept = bundle.concepts.get(a.concept).ok_or_else(|| {
        Error::Argument(format!("concept {} not in bundle of {}", a.concept, bundle.concepts.len()))
    })?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let grouping = manifest.grouping()?;
    let ids = manifest.caption_ids();
    let codes = SparseCodeMatrix::load(&a.codes)?;
    let grid = match &a.grid {
        Some(g) => parse_grid(g).map_err(|e| Error::Argument(e.to_string()))?,
        None => {
            let t = grouping.tokens_per_image;
            let side = (t as f64).sqrt().round() as usize;
            if side * side != t {
                bail!(Error::Argument(format!("{t} tokens per image is not a square grid; pass --grid")));
            }
            (side, side)
        }
    };
    let chosen = match a.side {
        Side::Real => &concept.top_real_image_ids,
        Side::Gen => &concept.top_gen_image_ids,
    };
    if chosen.is_empty() {
        bail!(Error::Validation(format!("concept {} has no exemplars on that side", a.concept)));
    }
    let mut masked = Vec::new();
    for id in chosen.iter().take(a.exemplars) {
        let idx = ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Validation(format!("image `{id}` is not in the manifest")))?;
        let map = SpatialActivationMap::from_codes(&codes, grouping, idx, id.clone(), a.concept, grid)?;
        let img = load_png(a.images.join(format!("{id}.png")))?;
        let m = alpha_mask(&img, &map, a.quantile)?;
        if let Some(dir) = &a.masks_out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_png(&m, dir.join(format!("concept{}_{id}.png", a.concept)))?;
        }
        masked.push(m);
    }
    if a.dry_run {
        println!("masked {} exemplars of concept {}", masked.len(), a.concept);
        return Ok(());
    }
    let endpoint = a
        .endpoint
        .clone()
        .ok_or_else(|| Error::Argument("--endpoint is required unless --dry-run".into()))?;
    let client = VlmClient::new(VlmConfig {
        endpoint,
        model: a.vlm_model.clone(),
        api_key_env: (!a.no_auth).then(|| a.key_env.clone()),
        concurrency: a.concurrency,
        ..VlmConfig::default()
    })?;
    let d = client.describe_concept(&masked)?;
    let out = serde_json::json!({
        "concept_id": a.concept,
        "description": d.text,
        "replies": d.replies,
        "retries": d.retries,
    });
    match &a.out {
        Some(p) => write_json(&out, p)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(())
}

fn resolve_override(p: PathBuf) -> PathBuf {
    if p.is_relative() {
        std::env::current_dir().map(|d| d.join(&p)).unwrap_or(p)
    } else {
        p
    }
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.out_dir {
        cfg.output_dir = resolve_override(p);
    }
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(p) = a.manifest {
        cfg.manifest = resolve_override(p);
    }
    if let Some(t) = a.created_at {
        cfg.created_at = Some(t);
    }
    let manifest = run_pipeline(&cfg, a.force)?;
    for s in &manifest.stages {
        println!("{:<12} {:?}", s.name, s.status);
    }
    println!("artifacts in {}", display(&cfg.output_dir));
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

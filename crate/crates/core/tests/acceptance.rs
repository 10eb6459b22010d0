//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blindspots::concepts::{energy_difference, load_scores, ConceptClass, EnergyVector, Thresholds};
use blindspots::cooccur::{cooccurrence, eigenspectrum, eigvec_similarity, is_numerically_psd};
use blindspots::pipeline::{run_pipeline, RunConfig};
use blindspots::rasae::{evaluate, train, Param, Sae, SaeConfig, SparseCodeMatrix};
use blindspots::stats::{sigmoid, skewness};
use blindspots::synthdgp::{write_fixture, DgpConfig, DgpSpec, FIXTURE_MODEL};
use blindspots::tensorio::{decode_feature_matrix, encode_feature_matrix, FeatureMatrix};
use blindspots::theory::{
    fid_from_summaries, mcdiarmid_bound, mcdiarmid_empirical, monotonicity_check, verify_theorems,
    GaussianSummary, SamplerSpec,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("planted-blindspot recovery", flagship),
        ("sae recovery", sae_recovery),
        ("gradient check", gradient_check),
        ("theorem suite", theorem_suite),
        ("co-occurrence", cooccurrence_checks),
        ("determinism and formats", determinism),
        ("statistics spot values", statistics),
        ("bundle of the planted run", planted_bundle),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Trains the run's default SAE through the full pipeline on the planted
/// fixture.
fn planted_run(dir: &Path) -> (DgpSpec, RunConfig) {
    let spec = DgpSpec::from_config(&DgpConfig::planted_default(0)).unwrap();
    let paths = write_fixture(dir.join("data"), &spec, 4000).unwrap();
    let cfg = RunConfig {
        manifest: paths.manifest,
        model: FIXTURE_MODEL.into(),
        output_dir: dir.join("out"),
        sae: SaeConfig {
            n_concepts: 128,
            top_k: 5,
            epochs: 10,
            ..RunConfig::default().sae
        },
        created_at: Some("2024-01-01T00:00:00Z".into()),
        seed: 0,
        ..RunConfig::default()
    };
    run_pipeline(&cfg, false).unwrap();
    (spec, cfg)
}

/// Latent whose atom is best aligned with the planted concept direction.
fn matched_latent(atoms: &[f64], d: usize, direction: &[f64]) -> (usize, f64) {
    atoms
        .chunks(d)
        .map(|a| cosine(a, direction).abs())
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .unwrap()
}

fn flagship() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let (spec, cfg) = planted_run(tmp.path());
    let elapsed = t.elapsed().as_secs_f64();
    let sae = Sae::load(cfg.output_dir.join("sae.bin")).unwrap();
    let scores = load_scores(cfg.output_dir.join("scores.json")).unwrap();
    let atoms = sae.atoms();
    let (mut supp, mut exag, mut side, mut worst_cos) = (0, 0, 0, 1.0f64);
    for (&c, &mult) in &spec.planted {
        let (j, cos) = matched_latent(&atoms, spec.dim, &spec.direction(c));
        worst_cos = worst_cos.min(cos);
        let s = &scores[j];
        if mult < 1.0 {
            supp += usize::from(s.class == ConceptClass::Suppressed);
            side += usize::from(s.ediff < 0.5);
        } else {
            exag += usize::from(s.class == ConceptClass::Exaggerated);
            side += usize::from(s.ediff > 0.5);
        }
    }
    outcome(
        supp >= 4 && exag >= 4 && side == 10 && elapsed < 600.0,
        format!(
            "suppressed {supp}/5, exaggerated {exag}/5 (need >= 4 each), correct side of 0.5 {side}/10 \
             (need 10), weakest atom match |cos| {worst_cos:.3}, pipeline {elapsed:.0}s (limit 600s)"
        ),
    )
}

/// `n x d` rows `z D*` with at most three active atoms per row, drawn from
/// an incoherent dictionary: the identity plus a scaled Hadamard basis.
fn sparse_synthetic(n: usize, seed: u64) -> FeatureMatrix {
    let (d, k) = (16, 32);
    let mut dict = vec![0.0; k * d];
    for i in 0..d {
        dict[i * d + i] = 1.0;
        for j in 0..d {
            dict[(d + i) * d + j] = if (i & j).count_ones() % 2 == 0 { 0.25 } else { -0.25 };
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f32; n * d];
    for row in out.chunks_mut(d) {
        let s = rng.random_range(1..=3);
        for j in sample(&mut rng, k, s) {
            let a: f64 = rng.random_range(0.5..1.5);
            for (o, &w) in row.iter_mut().zip(&dict[j * d..(j + 1) * d]) {
                *o += (a * w) as f32;
            }
        }
    }
    FeatureMatrix::new(n, d, out).unwrap()
}

fn sae_recovery() -> Outcome {
    let x = sparse_synthetic(20_000, 11);
    // k = 5 as in the training recipe.
    let k = 5;
    let free_cfg = SaeConfig {
        batch_size: 64,
        ..SaeConfig::free(16, 32, k)
    };
    let arch_cfg = SaeConfig {
        batch_size: 64,
        ..SaeConfig::archetypal(16, 32, k)
    };
    let (free, _) = train(&x, &free_cfg).unwrap();
    let (arch, _) = train(&x, &arch_cfg).unwrap();
    let fve = evaluate(&free, &x).unwrap().fraction_variance_explained;
    let arch_fve = evaluate(&arch, &x).unwrap().fraction_variance_explained;
    let max_nnz = [&free, &arch]
        .iter()
        .map(|s| s.encode(&x).unwrap().max_row_nnz())
        .max()
        .unwrap();
    let w = arch.archetype_weights().unwrap();
    let worst_row = w
        .chunks(arch_cfg.anchors)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let nonneg = w.iter().all(|&v| v >= 0.0);
    outcome(
        fve > 0.9 && max_nnz <= k && worst_row <= 1e-6 && nonneg,
        format!(
            "FVE {fve:.4} (need > 0.9; archetypal dictionary {arch_fve:.4}), max code nnz {max_nnz} (k = {k}), \
             max |W row sum - 1| {worst_row:.1e} (tol 1e-6)"
        ),
    )
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter tensor, with the top-k selection held fixed.
fn max_gradient_error(sae: &Sae, batch: &[f64], params: &[Param]) -> f64 {
    let dead = vec![true; sae.n_concepts()];
    let sel = sae.select(batch, Some(&dead));
    let (_, g) = sae.loss_and_grad(batch, &sel);
    let h = 1e-6;
    params
        .iter()
        .map(|&p| {
            let analytic = g.get(p).unwrap().to_vec();
            let numeric: Vec<f64> = (0..analytic.len())
                .map(|i| {
                    let mut s = sae.clone();
                    s.param_mut(p).unwrap()[i] += h;
                    let up = s.loss(batch, &sel).total;
                    s.param_mut(p).unwrap()[i] -= 2.0 * h;
                    let down = s.loss(batch, &sel).total;
                    (up - down) / (2.0 * h)
                })
                .collect();
            let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = analytic
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
                .max(1e-12);
            diff / scale
        })
        .fold(0.0, f64::max)
}

fn gradient_check() -> Outcome {
    let (rows, d, k, top_k) = (6, 4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-0.5..1.5)).collect();
    let aux = |cfg: SaeConfig| SaeConfig {
        aux_lambda: 0.3,
        aux_k: 2,
        ..cfg
    };

    let mut free = Sae::init(&aux(SaeConfig::free(d, k, top_k)), None).unwrap();
    for v in free.param_mut(Param::EncoderBias).unwrap() {
        *v = rng.random_range(-0.2..0.2);
    }
    let free_err = max_gradient_error(
        &free,
        &batch,
        &[Param::EncoderWeights, Param::EncoderBias, Param::Atoms],
    );

    let m = 12;
    let cfg = SaeConfig {
        anchors: m,
        relaxation_bound: 0.5,
        ..aux(SaeConfig::free(d, k, top_k))
    };
    let anchors: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut arch = Sae::init(&cfg, Some(anchors)).unwrap();
    for p in [Param::Logits, Param::Relaxation, Param::EncoderBias] {
        for v in arch.param_mut(p).unwrap() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let arch_err = max_gradient_error(
        &arch,
        &batch,
        &[Param::EncoderWeights, Param::EncoderBias, Param::Logits, Param::Relaxation],
    );
    outcome(
        free_err < 1e-4 && arch_err < 1e-4,
        format!("max relative error {free_err:.1e} (free atoms), {arch_err:.1e} (W-logits, relaxation); tol 1e-4"),
    )
}

fn theorem_suite() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mono = (0..1000).all(|_| {
        let n = rng.random_range(2..50);
        let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
        monotonicity_check(&deltas)
    });
    ok &= mono;
    notes.push(format!("monotonicity over 1000 vectors {}", if mono { "exact" } else { "broken" }));

    let two_point = |p| SamplerSpec::TwoPoint { low: 0.0, high: 1.0, p };
    let conc = mcdiarmid_empirical(two_point(0.5), two_point(0.8), 10_000, 0.02, 1000, 3).unwrap();
    let spot = mcdiarmid_bound(10_000, 0.01, 0.0, 1.0).unwrap();
    let spot_ok = (spot - 2.0 * (-32f64).exp()).abs() <= 1e-12 * spot && (spot - 2.53e-14).abs() < 0.005e-14;
    let violations = (conc.empirical_violation_rate * conc.trials as f64).round();
    ok &= violations == 0.0 && spot_ok;
    notes.push(format!(
        "McDiarmid violations {violations}/1000 at n=1e4, eps=0.02 (bound {:.2e}), spot bound {spot:.3e}",
        conc.bound
    ));

    let report = verify_theorems(1000, 7).unwrap();
    for c in report.checks.iter().filter(|c| c.name.starts_with("fid")) {
        ok &= c.passed;
        notes.push(format!("{} {} {}", c.name, if c.passed { "held" } else { "failed" }, c.measured));
    }

    let unit = |m: f64| GaussianSummary {
        mean: DVector::from_vec(vec![m]),
        covariance: DMatrix::from_element(1, 1, 1.0),
    };
    let fid1 = fid_from_summaries(&unit(0.0), &unit(1.0)).unwrap();
    ok &= (fid1 - 1.0).abs() < 1e-8;
    notes.push(format!("1-D FID {fid1:.10} (tol 1e-8)"));
    outcome(ok, notes.join("; "))
}

fn random_codes(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (Vec<f64>, SparseCodeMatrix) {
    let dense: Vec<f64> = (0..n * k)
        .map(|_| if rng.random::<f64>() < 0.3 { rng.random_range(0.1..3.0) } else { 0.0 })
        .collect();
    let codes = SparseCodeMatrix::from_dense(k, &dense).unwrap();
    (dense, codes)
}

fn cooccurrence_checks() -> Outcome {
    let (n, k) = (50, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut worst_gap, mut worst_trace, mut psd, mut worst_diag) = (0.0f64, 0.0f64, true, 0.0f64);
    for _ in 0..100 {
        let (dense, codes) = random_codes(&mut rng, n, k);
        let c = cooccurrence(&codes).to_dense();
        let z = DMatrix::from_row_slice(n, k, &dense);
        let oracle = z.transpose() * &z;
        for i in 0..k {
            for j in 0..k {
                worst_gap = worst_gap.max((c[i * k + j] - oracle[(i, j)]).abs());
            }
        }
        let cm = cooccurrence(&codes);
        let eig = eigenspectrum(&cm, k).unwrap();
        psd &= is_numerically_psd(&eig.values);
        let frob: f64 = dense.iter().map(|v| v * v).sum();
        let sum_eig: f64 = eig.values.iter().sum();
        worst_trace = worst_trace
            .max((cm.trace() - frob).abs() / frob)
            .max((sum_eig - frob).abs() / frob);
        let sim = eigvec_similarity(&eig.vectors, &eig.vectors, k).unwrap();
        let gaps_ok = eig.values.windows(2).all(|w| w[0] - w[1] > 1e-8 * eig.values[0]);
        if gaps_ok {
            worst_diag = worst_diag.max((0..k).map(|i| (sim[i][i] - 1.0).abs()).fold(0.0, f64::max));
        }
    }
    outcome(
        worst_gap <= 1e-6 && psd && worst_trace <= 1e-9 && worst_diag <= 1e-9,
        format!(
            "100 random 50x16 instances: max |sparse - dense| {worst_gap:.1e} (tol 1e-6), PSD {psd}, \
             trace identities rel {worst_trace:.1e}, similarity diagonal max |1 - s| {worst_diag:.1e}"
        ),
    )
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut planted = BTreeMap::new();
    planted.insert(1, 0.05);
    planted.insert(2, 4.0);
    let spec = DgpSpec::from_config(&DgpConfig {
        n_concepts: 8,
        dim: 16,
        base_rate: 0.2,
        magnitude_mean: 2.0,
        planted,
        seed: 5,
        ..DgpConfig::default()
    })
    .unwrap();
    let mut runs = Vec::new();
    for r in 0..2 {
        let root = tmp.path().join(format!("run{r}"));
        let paths = write_fixture(root.join("data"), &spec, 200).unwrap();
        let cfg = RunConfig {
            manifest: paths.manifest,
            model: FIXTURE_MODEL.into(),
            output_dir: root.join("out"),
            sae: SaeConfig {
                n_concepts: 12,
                top_k: 3,
                anchors: 24,
                epochs: 3,
                batch_size: 32,
                ..SaeConfig::default()
            },
            cooccur_top: 5,
            created_at: Some("2024-01-01T00:00:00Z".into()),
            seed: 4,
            ..RunConfig::default()
        };
        run_pipeline(&cfg, false).unwrap();
        let mut files = read_dir_bytes(&root.join("data"));
        // The run manifest records absolute output paths, which differ by
        // directory; every artifact it lists is compared below.
        files.extend(read_dir_bytes(&root.join("out")).into_iter().filter(|(n, _)| n != "run.json"));
        runs.push(files);
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(n, b)| runs[1].get(*n) != Some(b))
        .map(|(n, _)| n)
        .collect();
    let same_names = runs[0].keys().eq(runs[1].keys());

    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (0usize..12, 0usize..12).prop_flat_map(|(r, c)| {
        prop::collection::vec(
            any::<f32>().prop_filter("finite", |v| v.is_finite()),
            r * c,
        )
        .prop_map(move |data| FeatureMatrix::new(r, c, data).unwrap())
    });
    let round_trip = runner
        .run(&strategy, |m| {
            let back = decode_feature_matrix(&encode_feature_matrix(&m), Path::new("mem")).unwrap();
            prop_assert_eq!(back.rows(), m.rows());
            prop_assert_eq!(back.cols(), m.cols());
            let same = back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            Ok(())
        })
        .is_ok();
    outcome(
        differing.is_empty() && same_names && round_trip,
        format!(
            "{} artifacts compared across two seeded runs, {} differ; CBFM round trip over 1000 random matrices {}",
            runs[0].len(),
            differing.len(),
            if round_trip { "bit-exact" } else { "failed" }
        ),
    )
}

fn statistics() -> Outcome {
    let ev = |v: f64| vec![EnergyVector { caption_id: "a".into(), energies: vec![v] }];
    let th = Thresholds { temperature: 0.8, ..Thresholds::default() };
    let e = energy_difference(&ev(0.0), &ev(1.0), &th).unwrap()[0].ediff;
    let oracle = 1.0 / (1.0 + (-1.25f64).exp());
    let s0 = sigmoid(0.0);
    let skew = skewness(&[-1.0, 0.0, 1.0]).unwrap();
    outcome(
        (e - 0.77730).abs() <= 1e-5 && (e - oracle).abs() <= 1e-15 && s0 == 0.5 && skew.abs() <= 1e-12,
        format!("Ediff(1, 0.8) = {e:.6} (0.77730 +/- 1e-5), sigmoid(0) = {s0}, skewness(-1, 0, 1) = {skew:.1e}"),
    )
}

/// The exported bundle of the planted run agrees with its scores and puts
/// the planted concepts at the ends of the ranking.
fn planted_bundle() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (spec, cfg) = planted_run(tmp.path());
    let bundle = blindspots::explorer::ExportBundle::load(cfg.output_dir.join("bundle.json")).unwrap();
    let scores = load_scores(cfg.output_dir.join("scores.json")).unwrap();
    let sae = Sae::load(cfg.output_dir.join("sae.bin")).unwrap();
    let atoms = sae.atoms();
    let r = &bundle.rankings;
    let (low, high): (Vec<usize>, Vec<usize>) = (
        r.suppressed.iter().take(5).copied().collect(),
        r.exaggerated.iter().take(5).copied().collect(),
    );
    let mut at_ends = 0;
    for (&c, &mult) in &spec.planted {
        let (j, _) = matched_latent(&atoms, spec.dim, &spec.direction(c));
        at_ends += usize::from(if mult < 1.0 { low.contains(&j) } else { high.contains(&j) });
    }
    let consistent = bundle.matches_scores(&scores) && bundle.concepts.len() == 128;
    outcome(
        consistent && at_ends == 10,
        format!("bundle consistent with scores: {consistent}; planted latents among the 5 most extreme per side {at_ends}/10"),
    )
}

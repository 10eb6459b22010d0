//! Numerical checks of the estimator's concentration and calibration
//! properties, and the Gaussian FID with its stability under linear
//! embeddings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasae::Dictionary;
use crate::rng::{indexed_stream, named_stream};
use crate::stats::sigmoid;
use crate::tensorio::FeatureMatrix;

/// Relative eigenvalue floor used when taking matrix square roots.
pub const SQRT_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianSummary {
    /// Sample mean and unbiased sample covariance of the rows.
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n < 2 {
            return Err(Error::Argument(format!(
                "need at least 2 rows to fit a Gaussian, got {n}"
            )));
        }
        let m = DMatrix::from_row_slice(n, d, &x.to_f64());
        Ok(Self::from_samples(&m))
    }

    pub fn from_samples(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mean = m.row_mean().transpose();
        let mut centered = m.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut covariance = centered.transpose() * &centered / (n as f64 - 1.0);
        covariance = (&covariance + covariance.transpose()) * 0.5;
        Self { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn clamped_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    for v in eig.eigenvalues.iter_mut() {
        if *v < SQRT_CLAMP * max {
            *v = 0.0;
        }
    }
    eig
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut eig = clamped_eigen(m.clone());
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.sqrt());
    eig.recompose()
}

/// `trace(sqrt(A B))` for PSD `A`, `B`, computed as the trace of
/// `sqrt(A^1/2 B A^1/2)`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = sqrtm_psd(a);
    let inner = &s * b * &s;
    clamped_eigen(inner).eigenvalues.iter().map(|v| v.sqrt()).sum()
}

pub fn fid_from_summaries(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "Gaussians of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let tr = a.covariance.trace() + b.covariance.trace()
        - 2.0 * trace_sqrt_product(&a.covariance, &b.covariance);
    Ok((mean_term + tr).max(0.0))
}

/// Frechet distance between Gaussians fitted to the two row sets.
pub fn gaussian_fid(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "feature sets have {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    fid_from_summaries(&GaussianSummary::fit(a)?, &GaussianSummary::fit(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub fid_ambient: f64,
    pub fid_embedded: f64,
    pub sigma_min_sq: f64,
    pub sigma_max_sq: f64,
    pub holds: bool,
}

fn dictionary_map(dict: &Dictionary) -> DMatrix<f64> {
    DMatrix::from_row_slice(dict.n_concepts, dict.dim, &dict.atoms)
}

/// Compares FID before and after mapping every row through `x -> D x`,
/// with `D` the `n_concepts x dim` atom matrix, against the bounds given by
/// its extreme singular values.
pub fn fid_sandwich_check(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    dict: &Dictionary,
) -> Result<SandwichReport> {
    if a.cols() != dict.dim || b.cols() != dict.dim {
        return Err(Error::Shape(format!(
            "dictionary atoms have {} columns, features have {} and {}",
            dict.dim,
            a.cols(),
            b.cols()
        )));
    }
    let d_map = dictionary_map(dict);
    sandwich_with_map(a, b, &d_map)
}

fn sandwich_with_map(a: &FeatureMatrix, b: &FeatureMatrix, d_map: &DMatrix<f64>) -> Result<SandwichReport> {
    let sa = GaussianSummary::fit(a)?;
    let sb = GaussianSummary::fit(b)?;
    let fid_ambient = fid_from_summaries(&sa, &sb)?;
    // Moments of D x follow exactly from those of x.
    let embed = |s: &GaussianSummary| GaussianSummary {
        mean: d_map * &s.mean,
        covariance: d_map * &s.covariance * d_map.transpose(),
    };
    let fid_embedded = fid_from_summaries(&embed(&sa), &embed(&sb))?;
    let sv = d_map.clone().svd(false, false).singular_values;
    // A map into fewer dimensions than its input has a null space.
    let smin = if d_map.nrows() < d_map.ncols() {
        0.0
    } else {
        sv.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = (smin * smin * fid_ambient, smax * smax * fid_ambient);
    let slack = 1e-6 * hi.max(fid_embedded).max(1e-12);
    Ok(SandwichReport {
        fid_ambient,
        fid_embedded,
        sigma_min_sq: smin * smin,
        sigma_max_sq: smax * smax,
        holds: lo <= fid_embedded + slack && fid_embedded <= hi + slack,
    })
}

/// `2 exp(-2 n eps^2 / L^2)` with `L = (b - a) / 4`.
pub fn mcdiarmid_bound(n: usize, eps: f64, a: f64, b: f64) -> Result<f64> {
    if !(b > a) || n == 0 || !(eps > 0.0) {
        return Err(Error::Argument(format!(
            "bound needs b > a, n >= 1, eps > 0 (got [{a}, {b}], n = {n}, eps = {eps})"
        )));
    }
    let l = (b - a) / 4.0;
    Ok(2.0 * (-2.0 * n as f64 * eps * eps / (l * l)).exp())
}

/// Tail bound obtained by summing the per-coordinate constants over all
/// `2n` inputs: `2 exp(-n eps^2 / L^2)`.
pub fn mcdiarmid_bound_2n(n: usize, eps: f64, a: f64, b: f64) -> Result<f64> {
    let stated = mcdiarmid_bound(n, eps, a, b)?;
    Ok(2.0 * (stated / 2.0).sqrt())
}

/// Bounded scalar distributions with closed-form means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerSpec {
    /// `high` with probability `p`, else `low`.
    TwoPoint { low: f64, high: f64, p: f64 },
    Uniform { low: f64, high: f64 },
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        let (low, high) = self.bounds();
        if !(low.is_finite() && high.is_finite() && low <= high) {
            return Err(Error::Argument(format!(
                "sampler must be bounded, got [{low}, {high}]"
            )));
        }
        if let SamplerSpec::TwoPoint { p, .. } = self {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Argument(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            SamplerSpec::TwoPoint { low, high, .. } | SamplerSpec::Uniform { low, high } => {
                (low, high)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            SamplerSpec::TwoPoint { low, high, p } => low + p * (high - low),
            SamplerSpec::Uniform { low, high } => 0.5 * (low + high),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            SamplerSpec::TwoPoint { low, high, p } => p * (1.0 - p) * (high - low).powi(2),
            SamplerSpec::Uniform { low, high } => (high - low).powi(2) / 12.0,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            SamplerSpec::TwoPoint { low, high, p } => {
                if rng.random::<f64>() < p {
                    high
                } else {
                    low
                }
            }
            SamplerSpec::Uniform { low, high } => low + rng.random::<f64>() * (high - low),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub epsilon: f64,
    pub bound: f64,
    /// The bound with the constant summed over all `2n` inputs.
    pub bound_2n: f64,
    pub empirical_violation_rate: f64,
    pub trials: usize,
    pub population_ediff: f64,
    pub estimator_mean: f64,
    pub estimator_std: f64,
    pub holds: bool,
}

/// Repeatedly estimates `sigmoid(mean_gen - mean_real)` from `n` draws per
/// side and counts deviations from the population value larger than `eps`.
pub fn mcdiarmid_empirical(
    real: SamplerSpec,
    gen: SamplerSpec,
    n: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    real.validate()?;
    gen.validate()?;
    if trials == 0 {
        return Err(Error::Argument("need at least one trial".into()));
    }
    let a = real.bounds().0.min(gen.bounds().0);
    let b = real.bounds().1.max(gen.bounds().1);
    let bound = mcdiarmid_bound(n, eps, a, b)?;
    let bound_2n = mcdiarmid_bound_2n(n, eps, a, b)?;
    let population = sigmoid(gen.mean() - real.mean());
    let estimates: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = indexed_stream(seed, "theory/concentration", t);
            let mut sr = 0.0;
            let mut sg = 0.0;
            for _ in 0..n {
                sr += real.sample(&mut rng);
                sg += gen.sample(&mut rng);
            }
            sigmoid((sg - sr) / n as f64)
        })
        .collect();
    let violations = estimates.iter().filter(|e| (*e - population).abs() > eps).count();
    let mean = estimates.iter().sum::<f64>() / trials as f64;
    let var = if trials > 1 {
        estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64
    } else {
        0.0
    };
    let rate = violations as f64 / trials as f64;
    Ok(BoundReport {
        n,
        epsilon: eps,
        bound,
        bound_2n,
        empirical_violation_rate: rate,
        trials,
        population_ediff: population,
        estimator_mean: mean,
        estimator_std: var.sqrt(),
        holds: rate <= bound,
    })
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

/// Checks that ranking by `delta`, `exp(delta)` and `sigmoid(delta)` agree and
/// that `sigmoid(delta) == rho / (1 + rho)`. Saturation of `exp` or
/// `sigmoid` in floating point makes large `|delta|` fail honestly.
pub fn monotonicity_check(deltas: &[f64]) -> bool {
    if deltas.iter().any(|d| !d.is_finite()) {
        return false;
    }
    let rho: Vec<f64> = deltas.iter().map(|d| d.exp()).collect();
    let sig: Vec<f64> = deltas.iter().map(|&d| sigmoid(d)).collect();
    let base = argsort(deltas);
    let identity = rho
        .iter()
        .zip(&sig)
        .all(|(r, s)| r.is_finite() && (s - r / (1.0 + r)).abs() <= 1e-12);
    identity && argsort(&rho) == base && argsort(&sig) == base
}

/// Largest `|sigmoid(ln rho) - rho / (1 + rho)|` over the grid.
pub fn calibration_identity_error(rhos: &[f64]) -> f64 {
    rhos.iter()
        .map(|&r| (sigmoid(r.ln()) - r / (1.0 + r)).abs())
        .fold(0.0, f64::max)
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random `rows x cols` matrix with orthonormal columns.
pub fn random_orthonormal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let g = gaussian_matrix(rows, cols, rng);
    g.qr().q()
}

fn random_gaussian_rows<R: Rng>(n: usize, d: usize, shift: f64, scale: &DMatrix<f64>, rng: &mut R) -> FeatureMatrix {
    let z = gaussian_matrix(n, d, rng);
    let x = z * scale;
    let data: Vec<f32> = x.transpose().iter().map(|&v| (v + shift) as f32).collect();
    FeatureMatrix::new(n, d, data).expect("sized")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub name: String,
    pub passed: bool,
    pub measured: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub seed: u64,
    pub trials: usize,
    pub checks: Vec<TheoremCheck>,
}

impl TheoremReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the concentration, calibration and FID-stability checks at desk
/// scale.
pub fn verify_theorems(trials: usize, seed: u64) -> Result<TheoremReport> {
    let mut checks = Vec::new();

    let conc = mcdiarmid_empirical(
        SamplerSpec::TwoPoint { low: 0.0, high: 1.0, p: 0.5 },
        SamplerSpec::TwoPoint { low: 0.0, high: 1.0, p: 0.8 },
        10_000,
        0.02,
        trials,
        seed,
    )?;
    checks.push(TheoremCheck {
        name: "concentration".into(),
        passed: conc.holds,
        measured: serde_json::to_value(&conc).map_err(|e| Error::json("report", e))?,
    });

    let mut rng = named_stream(seed, "theory/monotonicity");
    let deltas: Vec<f64> = (0..1000).map(|_| rng.random_range(-20.0..20.0)).collect();
    let grid: Vec<f64> = (0..=120).map(|i| 10f64.powf(-6.0 + 0.1 * i as f64)).collect();
    let cal_err = calibration_identity_error(&grid);
    checks.push(TheoremCheck {
        name: "monotonicity".into(),
        passed: monotonicity_check(&deltas) && cal_err <= 1e-12,
        measured: serde_json::json!({ "deltas": deltas.len(), "calibration_max_error": cal_err }),
    });

    let mut rng = named_stream(seed, "theory/fid");
    let (d, k) = (4usize, 12usize);
    let mut iso_worst = 0.0f64;
    let mut sandwich_ok = 0usize;
    let pairs = 100;
    for _ in 0..pairs {
        let sa = gaussian_matrix(d, d, &mut rng);
        let sb = gaussian_matrix(d, d, &mut rng);
        let a = random_gaussian_rows(200, d, 0.0, &sa, &mut rng);
        let b = random_gaussian_rows(200, d, 0.5, &sb, &mut rng);
        let q = random_orthonormal(k, d, &mut rng);
        let iso = sandwich_with_map(&a, &b, &q)?;
        iso_worst = iso_worst.max((iso.fid_embedded - iso.fid_ambient).abs() / (1.0 + iso.fid_ambient));
        let general = gaussian_matrix(k, d, &mut rng);
        if sandwich_with_map(&a, &b, &general)?.holds && iso.holds {
            sandwich_ok += 1;
        }
    }
    checks.push(TheoremCheck {
        name: "fid_isometry".into(),
        passed: iso_worst <= 1e-6,
        measured: serde_json::json!({ "max_relative_gap": iso_worst, "trials": pairs }),
    });
    checks.push(TheoremCheck {
        name: "fid_sandwich".into(),
        passed: sandwich_ok == pairs,
        measured: serde_json::json!({ "held": sandwich_ok, "trials": pairs }),
    });

    Ok(TheoremReport {
        seed,
        trials,
        checks,
    })
}

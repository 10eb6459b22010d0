//! Concept co-activation matrices and their spectra.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasae::SparseCodeMatrix;
use crate::rng::named_stream;

/// Largest size decomposed densely; bigger matrices use subspace iteration.
pub const DENSE_EIGEN_LIMIT: usize = 4096;
pub const ITERATIVE_TOL: f64 = 1e-8;
pub const ITERATIVE_MAX_ITERS: usize = 5000;

const ROW_CHUNK: usize = 4096;

/// Symmetric `Z^T Z` over concepts, stored in compressed-row form with both
/// triangles present. Only positive entries are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    dim: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    values: Vec<f64>,
}

impl CooccurrenceMatrix {
    fn from_map(dim: usize, map: HashMap<(u32, u32), f64>) -> Self {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); dim];
        for ((i, j), v) in map {
            rows[i as usize].push((j, v));
            if i != j {
                rows[j as usize].push((i, v));
            }
        }
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut values = Vec::new();
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            for (j, v) in r {
                cols.push(j);
                values.push(v);
            }
            offsets.push(cols.len());
        }
        Self {
            dim,
            offsets,
            cols,
            values,
        }
    }

    /// Builds a matrix from a dense row-major buffer, keeping positive entries.
    pub fn from_dense(dim: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != dim * dim {
            return Err(Error::Shape(format!("{} values for a {dim}x{dim} matrix", dense.len())));
        }
        let mut map = HashMap::new();
        for i in 0..dim {
            for j in i..dim {
                let (a, b) = (dense[i * dim + j], dense[j * dim + i]);
                if (a - b).abs() > 1e-8 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::Validation(format!("matrix not symmetric at ({i}, {j})")));
                }
                if a > 0.0 {
                    map.insert((i as u32, j as u32), a);
                }
            }
        }
        Ok(Self::from_map(dim, map))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored (positive) entries, counting both triangles.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.cols[a..b].iter().zip(&self.values[a..b]).map(|(&j, &v)| (j as usize, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        match self.cols[a..b].binary_search(&(j as u32)) {
            Ok(p) => self.values[a + p],
            Err(_) => 0.0,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        for (i, j, v) in self.entries() {
            out[i * self.dim + j] = v;
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn max_entry(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// `out = C * x` for an `n x r` row-major block `x`.
    fn mul_block(&self, x: &[f64], r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * r];
        out.par_chunks_mut(r).enumerate().for_each(|(i, o)| {
            for (j, v) in self.row(i) {
                for (oc, xc) in o.iter_mut().zip(&x[j * r..(j + 1) * r]) {
                    *oc += v * xc;
                }
            }
        });
        out
    }
}

/// `Z^T Z` accumulated from per-row sparse outer products.
pub fn cooccurrence(codes: &SparseCodeMatrix) -> CooccurrenceMatrix {
    let starts: Vec<usize> = (0..codes.n_rows()).step_by(ROW_CHUNK).collect();
    let shards: Vec<HashMap<(u32, u32), f64>> = starts
        .par_iter()
        .map(|&s| {
            let mut m = HashMap::new();
            for r in s..(s + ROW_CHUNK).min(codes.n_rows()) {
                let (idx, val) = codes.row(r);
                for a in 0..idx.len() {
                    for b in a..idx.len() {
                        *m.entry((idx[a], idx[b])).or_insert(0.0) += val[a] * val[b];
                    }
                }
            }
            m
        })
        .collect();
    let mut total: HashMap<(u32, u32), f64> = HashMap::new();
    for shard in shards {
        for (k, v) in shard {
            *total.entry(k).or_insert(0.0) += v;
        }
    }
    CooccurrenceMatrix::from_map(codes.n_concepts(), total)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) {
        return Err(Error::Argument(format!("threshold must be nonnegative, got {eps}")));
    }
    Ok(())
}

/// Number of matrix entries strictly above each threshold.
pub fn l0_curve(c: &CooccurrenceMatrix, epsilons: &[f64]) -> Result<Vec<(f64, u64)>> {
    if epsilons.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Argument("thresholds must be sorted ascending".into()));
    }
    let mut vals = c.values.clone();
    vals.sort_by(f64::total_cmp);
    epsilons
        .iter()
        .map(|&e| {
            check_eps(e)?;
            let at_or_below = vals.partition_point(|&v| v <= e);
            Ok((e, (vals.len() - at_or_below) as u64))
        })
        .collect()
}

/// Entries above `eps` in the generated matrix but not in the real one.
pub fn unique_entries(c_gen: &CooccurrenceMatrix, c_real: &CooccurrenceMatrix, eps: f64) -> Result<u64> {
    if c_gen.dim != c_real.dim {
        return Err(Error::Shape(format!(
            "co-occurrence matrices are {0}x{0} and {1}x{1}",
            c_gen.dim, c_real.dim
        )));
    }
    check_eps(eps)?;
    Ok(c_gen
        .entries()
        .filter(|&(i, j, v)| v > eps && c_real.get(i, j) <= eps)
        .count() as u64)
}

/// Leading eigenpairs, eigenvalues descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    /// Unit-norm eigenvectors, each with its largest-magnitude entry positive.
    pub vectors: Vec<Vec<f64>>,
}

pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn sorted_pairs(eig: SymmetricEigen<f64, nalgebra::Dyn>, top: usize) -> Eigenpairs {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut values = Vec::with_capacity(top);
    let mut vectors = Vec::with_capacity(top);
    for &i in order.iter().take(top) {
        values.push(eig.eigenvalues[i]);
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().cloned().collect();
        fix_sign(&mut v);
        vectors.push(v);
    }
    Eigenpairs { values, vectors }
}

pub fn eigenspectrum(c: &CooccurrenceMatrix, top: usize) -> Result<Eigenpairs> {
    if top > c.dim {
        return Err(Error::Argument(format!(
            "requested {top} eigenpairs of a {0}x{0} matrix",
            c.dim
        )));
    }
    if c.dim <= DENSE_EIGEN_LIMIT {
        eigenspectrum_dense(c, top)
    } else {
        eigenspectrum_iterative(c, top, ITERATIVE_TOL, ITERATIVE_MAX_ITERS)
    }
}

pub fn eigenspectrum_dense(c: &CooccurrenceMatrix, top: usize) -> Result<Eigenpairs> {
    let n = c.dim;
    let m = DMatrix::from_row_slice(n, n, &c.to_dense());
    let eig = SymmetricEigen::try_new(m, 1e-14, 100_000).ok_or_else(|| {
        Error::Numeric(format!("dense eigendecomposition of {n}x{n} did not converge"))
    })?;
    Ok(sorted_pairs(eig, top))
}

fn orthonormalize(block: &[f64], n: usize, r: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(n, r, block);
    m.qr().q()
}

/// Subspace iteration with Rayleigh-Ritz extraction for the top `top`
/// eigenpairs. Converges when every wanted residual `|Cv - lv|` falls below
/// `tol` times the largest eigenvalue.
pub fn eigenspectrum_iterative(
    c: &CooccurrenceMatrix,
    top: usize,
    tol: f64,
    max_iters: usize,
) -> Result<Eigenpairs> {
    let n = c.dim;
    if top == 0 {
        return Ok(Eigenpairs {
            values: vec![],
            vectors: vec![],
        });
    }
    let r = (top + 8).min(n);
    let mut rng = named_stream(0, "cooccur/subspace");
    let init: Vec<f64> = (0..n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut q = orthonormalize(&init, n, r);
    for iter in 1..=max_iters {
        let q_rows: Vec<f64> = q.transpose().as_slice().to_vec();
        let cq = DMatrix::from_row_slice(n, r, &c.mul_block(&q_rows, r));
        let t = q.transpose() * &cq;
        let t = (&t + t.transpose()) * 0.5;
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let s = DMatrix::from_fn(r, r, |i, j| eig.eigenvectors[(i, order[j])]);
        let lambdas: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let ritz = &q * &s;
        let c_ritz = &cq * &s;
        let scale = lambdas[0].abs().max(f64::MIN_POSITIVE);
        let converged = (0..top).all(|j| {
            let res = (c_ritz.column(j) - ritz.column(j) * lambdas[j]).norm();
            res <= tol * scale
        });
        if converged {
            let mut values = Vec::with_capacity(top);
            let mut vectors = Vec::with_capacity(top);
            for j in 0..top {
                values.push(lambdas[j]);
                let mut v: Vec<f64> = ritz.column(j).iter().cloned().collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                fix_sign(&mut v);
                vectors.push(v);
            }
            log::debug!("subspace iteration converged after {iter} iterations");
            return Ok(Eigenpairs { values, vectors });
        }
        let next = c_ritz.clone();
        q = next.qr().q();
    }
    Err(Error::Numeric(format!(
        "subspace iteration for {top} eigenpairs did not converge in {max_iters} iterations"
    )))
}

/// `|<u_i, w_j>|` between the leading `top` vectors of two eigenbases.
pub fn eigvec_similarity(real: &[Vec<f64>], gen: &[Vec<f64>], top: usize) -> Result<Vec<Vec<f64>>> {
    if top > real.len() || top > gen.len() {
        return Err(Error::Argument(format!(
            "requested {top} eigenvectors, have {} and {}",
            real.len(),
            gen.len()
        )));
    }
    Ok(real[..top]
        .iter()
        .map(|u| {
            gen[..top]
                .iter()
                .map(|w| {
                    let d: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
                    d.abs().min(1.0)
                })
                .collect()
        })
        .collect())
}

/// All eigenvalues are at least `-1e-6` times the largest.
pub fn is_numerically_psd(values: &[f64]) -> bool {
    let max = values.iter().cloned().fold(0.0, f64::max);
    values.iter().all(|&v| v >= -1e-6 * max)
}

use crate::error::{Error, Result};
use crate::rasae::SparseCodeMatrix;
use crate::tensorio::FeatureMatrix;

/// Archetypal parameterization: `atoms = weights * anchors + relaxation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Archetypes {
    /// `n_concepts x m` row-stochastic mixing weights.
    pub weights: Vec<f64>,
    /// `m x dim` anchor rows.
    pub anchors: Vec<f64>,
    pub n_anchors: usize,
    /// `n_concepts x dim`, present when the relaxed variant is enabled.
    pub relaxation: Option<Vec<f64>>,
    pub relaxation_bound: f64,
}

/// `n_concepts x dim` concept atoms, stored one atom per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub n_concepts: usize,
    pub dim: usize,
    pub atoms: Vec<f64>,
    pub archetypes: Option<Archetypes>,
}

impl Dictionary {
    pub fn new(n_concepts: usize, dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if atoms.len() != n_concepts * dim {
            return Err(Error::Shape(format!(
                "{n_concepts}x{dim} dictionary needs {} values, got {}",
                n_concepts * dim,
                atoms.len()
            )));
        }
        Ok(Self {
            n_concepts,
            dim,
            atoms,
            archetypes: None,
        })
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.dim..(j + 1) * self.dim]
    }

    /// Checks finiteness and, for archetypal dictionaries, row-stochasticity
    /// of the weights and `atoms == weights * anchors + relaxation`.
    pub fn validate(&self) -> Result<()> {
        if self.atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dictionary has non-finite atoms".into()));
        }
        let Some(arch) = &self.archetypes else {
            return Ok(());
        };
        let (k, m, d) = (self.n_concepts, arch.n_anchors, self.dim);
        if arch.weights.len() != k * m || arch.anchors.len() != m * d {
            return Err(Error::Shape("archetype shapes disagree with dictionary".into()));
        }
        for i in 0..k {
            let row = &arch.weights[i * m..(i + 1) * m];
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::Validation(format!("weights row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("weights row {i} sums to {s}")));
            }
            for c in 0..d {
                let mut v: f64 = (0..m).map(|a| row[a] * arch.anchors[a * d + c]).sum();
                if let Some(r) = &arch.relaxation {
                    v += r[i * d + c];
                }
                if (v - self.atoms[i * d + c]).abs() > 1e-5 {
                    return Err(Error::Validation(format!(
                        "atom {i} differs from its archetypal combination at column {c}"
                    )));
                }
            }
            if let Some(r) = &arch.relaxation {
                let norm = r[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > arch.relaxation_bound + 1e-9 {
                    return Err(Error::Validation(format!(
                        "relaxation row {i} has norm {norm} above bound {}",
                        arch.relaxation_bound
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reconstructs features: each output row is the activation-weighted sum of
/// the atoms named in the code row.
pub fn decode(codes: &SparseCodeMatrix, dict: &Dictionary) -> Result<FeatureMatrix> {
    if codes.n_concepts() != dict.n_concepts {
        return Err(Error::Shape(format!(
            "codes over {} concepts, dictionary has {}",
            codes.n_concepts(),
            dict.n_concepts
        )));
    }
    let d = dict.dim;
    let mut out = vec![0.0f64; codes.n_rows() * d];
    for i in 0..codes.n_rows() {
        let row = &mut out[i * d..(i + 1) * d];
        for (j, a) in codes.row_entries(i) {
            if j >= dict.n_concepts {
                return Err(Error::Corruption(format!(
                    "row {i} references concept {j} >= {}",
                    dict.n_concepts
                )));
            }
            for (o, &w) in row.iter_mut().zip(dict.atom(j)) {
                *o += a * w;
            }
        }
    }
    FeatureMatrix::from_f64_rows(codes.n_rows(), d, &out)
}

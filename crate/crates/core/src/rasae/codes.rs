use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{Container, SectionData};

/// Sparse nonnegative codes in compressed-row form.
///
/// Zeros are never stored: every stored activation is strictly positive and
/// indices within a row are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodeMatrix {
    n_concepts: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CodesMeta {
    kind: String,
    rows: usize,
    n_concepts: usize,
}

impl SparseCodeMatrix {
    pub fn empty(n_concepts: usize) -> Self {
        Self {
            n_concepts,
            offsets: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds codes from per-row `(concept, activation)` lists. Rows are
    /// sorted by concept; zero, negative, duplicate or out-of-range entries
    /// are rejected.
    pub fn from_rows(n_concepts: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut out = Self::empty(n_concepts);
        for (r, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Corruption(format!(
                        "row {r} lists concept {} twice",
                        w[0].0
                    )));
                }
            }
            for &(j, v) in &row {
                if j >= n_concepts {
                    return Err(Error::Corruption(format!(
                        "row {r}: concept index {j} >= {n_concepts}"
                    )));
                }
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Corruption(format!(
                        "row {r}: activation {v} for concept {j} is not strictly positive"
                    )));
                }
                out.indices.push(j as u32);
                out.values.push(v);
            }
            out.offsets.push(out.indices.len());
        }
        Ok(out)
    }

    /// Keeps the strictly positive entries of dense rows.
    pub fn from_dense(n_concepts: usize, dense: &[f64]) -> Result<Self> {
        if n_concepts == 0 || dense.len() % n_concepts != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {n_concepts}",
                dense.len()
            )));
        }
        let rows = dense
            .chunks_exact(n_concepts)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect()
            })
            .collect();
        Self::from_rows(n_concepts, rows)
    }

    pub(crate) fn push_row_unchecked(&mut self, row: &[(usize, f64)]) {
        for &(j, v) in row {
            self.indices.push(j as u32);
            self.values.push(v);
        }
        self.offsets.push(self.indices.len());
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&j, &v)| (j as usize, v))
    }

    pub fn max_row_nnz(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    pub fn mean_row_nnz(&self) -> f64 {
        if self.n_rows() == 0 {
            0.0
        } else {
            self.nnz() as f64 / self.n_rows() as f64
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows() * self.n_concepts];
        for i in 0..self.n_rows() {
            for (j, v) in self.row_entries(i) {
                out[i * self.n_concepts + j] = v;
            }
        }
        out
    }

    /// Concatenates the rows of `other`.
    pub fn extend(&mut self, other: &SparseCodeMatrix) -> Result<()> {
        if other.n_concepts != self.n_concepts {
            return Err(Error::Shape(format!(
                "cannot stack codes over {} and {} concepts",
                self.n_concepts, other.n_concepts
            )));
        }
        for i in 0..other.n_rows() {
            let row: Vec<(usize, f64)> = other.row_entries(i).collect();
            self.push_row_unchecked(&row);
        }
        Ok(())
    }

    /// Checks structural invariants, including the per-row bound `max_nnz`.
    pub fn validate(&self, max_nnz: Option<usize>) -> Result<()> {
        for i in 0..self.n_rows() {
            let (idx, val) = self.row(i);
            if let Some(k) = max_nnz {
                if idx.len() > k {
                    return Err(Error::Corruption(format!(
                        "row {i} has {} nonzeros, more than {k}",
                        idx.len()
                    )));
                }
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Corruption(format!("row {i} indices not increasing")));
            }
            if let Some(&j) = idx.iter().find(|&&j| j as usize >= self.n_concepts) {
                return Err(Error::Corruption(format!(
                    "row {i}: concept index {j} >= {}",
                    self.n_concepts
                )));
            }
            if let Some(v) = val.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::Corruption(format!(
                    "row {i}: stored activation {v} is not strictly positive"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = CodesMeta {
            kind: "sparse_codes".into(),
            rows: self.n_rows(),
            n_concepts: self.n_concepts,
        };
        let mut c = Container::new();
        c.push(
            "meta",
            SectionData::Bytes(serde_json::to_vec(&meta).map_err(|e| Error::json("codes meta", e))?),
        );
        c.push(
            "offsets",
            SectionData::U64 {
                rows: self.offsets.len(),
                cols: 1,
                data: self.offsets.iter().map(|&o| o as u64).collect(),
            },
        );
        c.push(
            "indices",
            SectionData::U32 {
                rows: self.indices.len(),
                cols: 1,
                data: self.indices.clone(),
            },
        );
        c.push(
            "values",
            SectionData::F64 {
                rows: self.values.len(),
                cols: 1,
                data: self.values.clone(),
            },
        );
        c.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let c = Container::read(path)?;
        let meta: CodesMeta = serde_json::from_slice(c.bytes("meta")?)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if meta.kind != "sparse_codes" {
            return Err(Error::Format(format!(
                "{} holds `{}`, not sparse codes",
                path.display(),
                meta.kind
            )));
        }
        let offsets: Vec<usize> = c.u64_vec("offsets")?.iter().map(|&o| o as usize).collect();
        let indices = c.u32_vec("indices")?.to_vec();
        let values = c.f64_matrix("values")?.2.to_vec();
        let consistent = offsets.len() == meta.rows + 1
            && offsets.first() == Some(&0)
            && offsets.windows(2).all(|w| w[0] <= w[1])
            && offsets.last() == Some(&indices.len())
            && indices.len() == values.len();
        if !consistent {
            return Err(Error::Corruption(format!(
                "{}: offsets inconsistent with payload",
                path.display()
            )));
        }
        let codes = Self {
            n_concepts: meta.n_concepts,
            offsets,
            indices,
            values,
        };
        codes.validate(None)?;
        Ok(codes)
    }
}

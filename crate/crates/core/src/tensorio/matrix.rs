use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `rows x cols` matrix of `f32` features.
///
/// Rows are token (or image) embeddings; this is the universal input of the
/// toolkit, for natural and generated sets alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Shape(format!("{rows}x{cols} overflows")))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows. An empty slice yields `0 x 0`.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_f64_rows(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::Shape(format!(
                "row range {start}..{end} outside 0..{}",
                self.rows
            )));
        }
        Ok(Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Appends the rows of `other`; an empty `0 x 0` receiver adopts its width.
    pub fn append(&mut self, other: &FeatureMatrix) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() && self.cols != other.cols {
            self.cols = other.cols;
        }
        if other.rows > 0 && other.cols != self.cols {
            return Err(Error::Shape(format!(
                "cannot append {} columns to {} columns",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    pub fn validate_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let (r, c) = if self.cols == 0 {
                (0, 0)
            } else {
                (pos / self.cols, pos % self.cols)
            };
            return Err(Error::Validation(format!(
                "non-finite value {} at row {r}, column {c}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// How many token rows belong to each image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrouping {
    pub tokens_per_image: usize,
    pub image_count: usize,
}

impl TokenGrouping {
    pub fn new(tokens_per_image: usize, image_count: usize) -> Result<Self> {
        if tokens_per_image == 0 {
            return Err(Error::Argument("tokens_per_image must be at least 1".into()));
        }
        Ok(Self {
            tokens_per_image,
            image_count,
        })
    }

    pub fn total_rows(&self) -> usize {
        self.tokens_per_image * self.image_count
    }

    pub fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.total_rows() {
            return Err(Error::Shape(format!(
                "{} images x {} tokens = {} rows, but data has {rows}",
                self.image_count,
                self.tokens_per_image,
                self.total_rows()
            )));
        }
        Ok(())
    }

    pub fn image_rows(&self, image: usize) -> std::ops::Range<usize> {
        image * self.tokens_per_image..(image + 1) * self.tokens_per_image
    }
}

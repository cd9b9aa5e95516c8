use crate::clustering::BagRepresentation;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// A bag of instances (`rows × cols`, row-major, `f64`) as fed to a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BagMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl BagMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                rows,
                cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(Error::DimMismatch {
                    context: "bag row".into(),
                    expected: cols,
                    found: r.as_ref().len(),
                });
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> BagMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        BagMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Single-row bag holding the column means.
    pub fn mean_row(&self) -> BagMatrix {
        let mut mean = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= self.rows as f64;
        }
        BagMatrix {
            rows: 1,
            cols: self.cols,
            data: mean,
        }
    }
}

impl From<&FeatureMatrix> for BagMatrix {
    fn from(m: &FeatureMatrix) -> Self {
        BagMatrix {
            rows: m.n_patches(),
            cols: m.dim(),
            data: m.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

impl From<&BagRepresentation> for BagMatrix {
    fn from(b: &BagRepresentation) -> Self {
        BagMatrix::from(&b.means)
    }
}

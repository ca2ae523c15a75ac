//! Minimal dense row-major matrix used for token slabs and score blocks.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("buffer of {len} elements cannot be viewed as {rows}x{cols}")]
pub struct ShapeError {
    pub rows: usize,
    pub cols: usize,
    pub len: usize,
}

impl<T: Scalar> RowMatrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(ShapeError {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix with `cols` columns from a flat buffer.
    ///
    /// A zero-column matrix has no way to infer its row count, so `cols` must
    /// be non-zero unless `data` is empty.
    pub fn from_flat(cols: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        if cols == 0 {
            if !data.is_empty() {
                return Err(ShapeError {
                    rows: 0,
                    cols,
                    len: data.len(),
                });
            }
            return Ok(Self {
                rows: 0,
                cols,
                data,
            });
        }
        if !data.len().is_multiple_of(cols) {
            return Err(ShapeError {
                rows: data.len() / cols,
                cols,
                len: data.len(),
            });
        }
        Ok(Self {
            rows: data.len() / cols,
            cols,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    /// Contiguous slice covering rows `start..end`.
    pub fn row_block(&self, start: usize, end: usize) -> &[T] {
        &self.data[start * self.cols..end * self.cols]
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn extend_rows(&mut self, rows: &[T]) {
        debug_assert_eq!(rows.len() % self.cols.max(1), 0);
        self.data.extend_from_slice(rows);
        self.rows = self.data.len().checked_div(self.cols).unwrap_or(0);
    }

    /// Places matrices with equal row counts side by side.
    pub fn hcat(parts: &[&RowMatrix<T>]) -> Result<Self, ShapeError> {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(ShapeError {
                rows,
                cols: bad.cols,
                len: bad.data.len(),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Inverse of [`RowMatrix::hcat`]: splits columns into consecutive groups.
    pub fn split_cols(&self, widths: &[usize]) -> Vec<Self> {
        assert_eq!(
            widths.iter().sum::<usize>(),
            self.cols,
            "column split mismatch"
        );
        let mut out: Vec<Self> = widths
            .iter()
            .map(|&w| Self {
                rows: self.rows,
                cols: w,
                data: Vec::with_capacity(self.rows * w),
            })
            .collect();
        for i in 0..self.rows {
            let row = self.row(i);
            let mut at = 0;
            for (part, &w) in out.iter_mut().zip(widths) {
                part.data.extend_from_slice(&row[at..at + w]);
                at += w;
            }
        }
        out
    }

    /// Bytes occupied by the element payload.
    pub fn payload_bytes(&self) -> u64 {
        (self.data.len() * T::DTYPE.size_bytes()) as u64
    }
}

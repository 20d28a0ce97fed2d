use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape mismatch: {what} expected {expected:?}, got {actual:?}")]
    Mismatch {
        what: &'static str,
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BadLength { len: usize, shape: (usize, usize, usize) },
    #[error("cell {cell:?} outside a {height}x{width} grid")]
    OutOfBounds { cell: GridIndex, height: usize, width: usize },
}

/// Dense channel-major (C×H×W) map of reals.
///
/// Used for images (3 channels), heatmaps (one channel per class), offset and
/// size fields (2 channels) and embedding fields (d channels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Image tensor with values in [0,1], stored channel-major with 3 channels.
pub type ImageTensor = FieldMap;

impl FieldMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != channels * height * width {
            return Err(ShapeError::BadLength { len: data.len(), shape: (channels, height, width) });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn index(&self, k: usize, i: usize, j: usize) -> usize {
        debug_assert!(k < self.channels && i < self.height && j < self.width);
        (k * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(k, i, j)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        let idx = self.index(k, i, j);
        self.data[idx] = v;
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    /// All channel values at one cell.
    pub fn cell(&self, idx: GridIndex) -> Vec<f64> {
        (0..self.channels).map(|k| self.get(k, idx.i, idx.j)).collect()
    }

    pub fn contains(&self, idx: GridIndex) -> bool {
        idx.i < self.height && idx.j < self.width
    }

    pub fn check_cell(&self, idx: GridIndex) -> Result<(), ShapeError> {
        if self.contains(idx) {
            Ok(())
        } else {
            Err(ShapeError::OutOfBounds { cell: idx, height: self.height, width: self.width })
        }
    }

    pub fn expect_shape(&self, what: &'static str, expected: (usize, usize, usize)) -> Result<(), ShapeError> {
        if self.shape() == expected {
            Ok(())
        } else {
            Err(ShapeError::Mismatch { what, expected, actual: self.shape() })
        }
    }

    /// Mirror along the vertical axis: column `j` moves to `width - 1 - j`.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for k in 0..self.channels {
            for i in 0..self.height {
                let row = (k * self.height + i) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean H×W grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Cells set to `true`, in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = GridIndex> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(n, _)| GridIndex { i: n / self.width, j: n % self.width })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_is_an_involution() {
        let m = FieldMap::from_vec(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        let f = m.mirrored();
        assert_eq!(f.get(0, 0, 0), 2.0);
        assert_eq!(f.get(1, 1, 2), 9.0);
        assert_eq!(f.mirrored(), m);
    }

    #[test]
    fn bad_length_is_rejected() {
        assert!(FieldMap::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
    }
}

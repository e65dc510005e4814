//! Uniform cell-centered grids and the small amount of discrete calculus
//! the rest of the crate needs: integration, L^p norms, multilinear
//! interpolation, and centered differences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid axis {axis}: hi ({hi}) must exceed lo ({lo})")]
    EmptyExtent { axis: usize, lo: f64, hi: f64 },
    #[error("grid axis {axis}: need at least 2 nodes, got {nodes}")]
    TooFewNodes { axis: usize, nodes: usize },
    #[error("grid dimension {0} not supported here (1 or 2)")]
    UnsupportedDim(usize),
}

/// Uniform grid with nodes at cell centers: node i on axis d sits at
/// `lo + (i + 1/2) h`, so integrals are plain midpoint sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: Vec<usize>,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>) -> Result<Self, GridError> {
        assert_eq!(lo.len(), hi.len());
        assert_eq!(lo.len(), shape.len());
        for d in 0..lo.len() {
            if !(hi[d] > lo[d]) {
                return Err(GridError::EmptyExtent { axis: d, lo: lo[d], hi: hi[d] });
            }
            if shape[d] < 2 {
                return Err(GridError::TooFewNodes { axis: d, nodes: shape[d] });
            }
        }
        Ok(GridSpec { lo, hi, shape })
    }

    /// 1D convenience constructor.
    pub fn line(lo: f64, hi: f64, nodes: usize) -> Result<Self, GridError> {
        Self::new(vec![lo], vec![hi], vec![nodes])
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.shape[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.spacing(d)).product()
    }

    /// Row-major strides (last axis fastest).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.dim()];
        for d in (0..self.dim().saturating_sub(1)).rev() {
            s[d] = s[d + 1] * self.shape[d + 1];
        }
        s
    }

    pub fn multi_index(&self, flat: usize, out: &mut [usize]) {
        let mut rem = flat;
        for d in (0..self.dim()).rev() {
            out[d] = rem % self.shape[d];
            rem /= self.shape[d];
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut flat = 0usize;
        for d in 0..self.dim() {
            flat = flat * self.shape[d] + multi[d];
        }
        flat
    }

    /// Coordinate of node `flat` along `axis`.
    pub fn coord(&self, flat: usize, axis: usize) -> f64 {
        let mut rem = flat;
        let mut idx = 0usize;
        for d in (axis..self.dim()).rev() {
            idx = rem % self.shape[d];
            rem /= self.shape[d];
        }
        let _ = rem;
        self.lo[axis] + (idx as f64 + 0.5) * self.spacing(axis)
    }

    /// Full position of node `flat`.
    pub fn position(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for d in (0..self.dim()).rev() {
            let idx = rem % self.shape[d];
            rem /= self.shape[d];
            out[d] = self.lo[d] + (idx as f64 + 0.5) * self.spacing(d);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|d| x[d] >= self.lo[d] && x[d] <= self.hi[d])
    }

    /// Midpoint-rule integral of a node field.
    pub fn integrate(&self, field: &[f64]) -> f64 {
        debug_assert_eq!(field.len(), self.len());
        self.cell_volume() * field.iter().sum::<f64>()
    }

    /// Discrete L^p norm (p = infinity allowed) of a node field.
    pub fn lp_norm(&self, field: &[f64], p: f64) -> f64 {
        debug_assert!(p >= 1.0);
        if p.is_infinite() {
            return field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        }
        let vol = self.cell_volume();
        if p == 1.0 {
            return vol * field.iter().map(|v| v.abs()).sum::<f64>();
        }
        if p == 2.0 {
            return (vol * field.iter().map(|v| v * v).sum::<f64>()).sqrt();
        }
        (vol * field.iter().map(|v| v.abs().powf(p)).sum::<f64>()).powf(1.0 / p)
    }

    /// Multilinear interpolation of a scalar node field at `x`, clamped to
    /// the node hull (queries outside it take boundary values).
    pub fn interp(&self, field: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(field.len(), self.len());
        let dim = self.dim();
        debug_assert!(dim <= 8, "interpolation corner loop limited to dim <= 8");
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        for d in 0..dim {
            let h = self.spacing(d);
            let s = (x[d] - self.lo[d]) / h - 0.5;
            let max_cell = (self.shape[d] - 2) as f64;
            let cell = s.floor().clamp(0.0, max_cell);
            base[d] = cell as usize;
            frac[d] = (s - cell).clamp(0.0, 1.0);
        }
        let strides = self.strides();
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for d in 0..dim {
                let bit = (corner >> d) & 1;
                w *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
                idx += (base[d] + bit) * strides[d];
            }
            acc += w * field[idx];
        }
        acc
    }

    /// Centered-difference partial derivative along `axis` (one-sided at the
    /// two boundary layers), returned as a new field.
    pub fn diff(&self, field: &[f64], axis: usize) -> Vec<f64> {
        debug_assert_eq!(field.len(), self.len());
        let n = self.shape[axis];
        let stride = self.strides()[axis];
        let h = self.spacing(axis);
        let mut out = vec![0.0; field.len()];
        let mut multi = vec![0usize; self.dim()];
        for flat in 0..field.len() {
            self.multi_index(flat, &mut multi);
            let i = multi[axis];
            out[flat] = if i == 0 {
                (field[flat + stride] - field[flat]) / h
            } else if i == n - 1 {
                (field[flat] - field[flat - stride]) / h
            } else {
                (field[flat + stride] - field[flat - stride]) / (2.0 * h)
            };
        }
        out
    }
}

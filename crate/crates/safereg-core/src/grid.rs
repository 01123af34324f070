//! Rectangular grids over the control-input box.
//!
//! All region estimates, priors and policies in this crate operate on a finite
//! grid of control points. Points are enumerated in row-major order over the
//! axes (first axis slowest), so ascending grid index is lexicographic order
//! of the coordinate tuples. That ordering doubles as the deterministic
//! tie-break rule for argmax selections elsewhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid resolution must be at least 2 per dimension, got {0}")]
    ResolutionTooSmall(usize),
    #[error("control domain for `{name}` is invalid: [{lo}, {hi}]")]
    InvalidDomain { name: String, lo: f64, hi: f64 },
    #[error("grid has no dimensions")]
    Empty,
    #[error("query has {got} coordinates, grid has {want} dimensions")]
    DimensionMismatch { got: usize, want: usize },
    #[error("value vector has {got} entries, grid has {want} points")]
    LengthMismatch { got: usize, want: usize },
}

/// Uniform rectangular grid over a product of closed control intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    names: Vec<String>,
    lows: Vec<f64>,
    highs: Vec<f64>,
    resolution: usize,
}

impl ControlGrid {
    /// Builds a grid with `resolution` points per axis (endpoints included).
    pub fn new(
        names: &[String],
        domains: &[[f64; 2]],
        resolution: usize,
    ) -> Result<Self, GridError> {
        if names.is_empty() || names.len() != domains.len() {
            return Err(GridError::Empty);
        }
        if resolution < 2 {
            return Err(GridError::ResolutionTooSmall(resolution));
        }
        for (name, d) in names.iter().zip(domains) {
            if !(d[0].is_finite() && d[1].is_finite() && d[0] < d[1]) {
                return Err(GridError::InvalidDomain {
                    name: name.clone(),
                    lo: d[0],
                    hi: d[1],
                });
            }
        }
        Ok(ControlGrid {
            names: names.to_vec(),
            lows: domains.iter().map(|d| d[0]).collect(),
            highs: domains.iter().map(|d| d[1]).collect(),
            resolution,
        })
    }

    pub fn dims(&self) -> usize {
        self.names.len()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.dims() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn axis_value(&self, dim: usize, step: usize) -> f64 {
        let frac = step as f64 / (self.resolution - 1) as f64;
        self.lows[dim] + frac * (self.highs[dim] - self.lows[dim])
    }

    /// Coordinates of the grid point at `index` (row-major order).
    pub fn point(&self, index: usize) -> Vec<f64> {
        debug_assert!(index < self.len());
        let d = self.dims();
        let mut coords = vec![0.0; d];
        let mut rest = index;
        for dim in (0..d).rev() {
            let step = rest % self.resolution;
            rest /= self.resolution;
            coords[dim] = self.axis_value(dim, step);
        }
        coords
    }

    /// All grid points in row-major order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Affine map of a point into the unit box `[0,1]^d` (used by kernels so
    /// that lengthscales are expressed in normalized units).
    pub fn normalize(&self, point: &[f64]) -> Result<Vec<f64>, GridError> {
        if point.len() != self.dims() {
            return Err(GridError::DimensionMismatch {
                got: point.len(),
                want: self.dims(),
            });
        }
        Ok(point
            .iter()
            .enumerate()
            .map(|(d, &x)| (x - self.lows[d]) / (self.highs[d] - self.lows[d]))
            .collect())
    }

    /// Multilinear interpolation of per-point `values` at `query`, with
    /// constant extrapolation (queries are clamped into the domain box).
    pub fn interpolate(&self, values: &[f64], query: &[f64]) -> Result<f64, GridError> {
        if values.len() != self.len() {
            return Err(GridError::LengthMismatch {
                got: values.len(),
                want: self.len(),
            });
        }
        if query.len() != self.dims() {
            return Err(GridError::DimensionMismatch {
                got: query.len(),
                want: self.dims(),
            });
        }
        let d = self.dims();
        // Per-dimension lower cell index and fractional offset.
        let mut cell = vec![0usize; d];
        let mut frac = vec![0.0f64; d];
        for dim in 0..d {
            let x = query[dim].clamp(self.lows[dim], self.highs[dim]);
            let t = (x - self.lows[dim]) / (self.highs[dim] - self.lows[dim])
                * (self.resolution - 1) as f64;
            let mut i = t.floor() as usize;
            if i >= self.resolution - 1 {
                i = self.resolution - 2;
            }
            cell[dim] = i;
            frac[dim] = (t - i as f64).clamp(0.0, 1.0);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut index = 0usize;
            for dim in 0..d {
                let hi = (corner >> dim) & 1 == 1;
                weight *= if hi { frac[dim] } else { 1.0 - frac[dim] };
                index = index * self.resolution + cell[dim] + usize::from(hi);
            }
            if weight > 0.0 {
                acc += weight * values[index];
            }
        }
        Ok(acc)
    }
}

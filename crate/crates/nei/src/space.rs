//! Search-space definition shared by the optimizer, the benchmark problems
//! and the study lifecycle.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("dimension `{name}`: lower bound {lower} must be strictly below upper bound {upper}")]
    InvalidBounds { name: String, lower: f64, upper: f64 },
    #[error("dimension names must be unique, `{0}` appears twice")]
    DuplicateName(String),
    #[error("search space must have at least one dimension")]
    Empty,
    #[error("point has {got} coordinates, search space has {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("coordinate {index} = {value} lies outside [{lower}, {upper}]")]
    OutOfBounds { index: usize, value: f64, lower: f64, upper: f64 },
}

/// One tunable parameter: a named interval, optionally integer-valued.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DimSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub integer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SearchSpace {
    pub dims: Vec<DimSpec>,
}

impl SearchSpace {
    pub fn new(dims: Vec<DimSpec>) -> Result<Self, SpaceError> {
        if dims.is_empty() {
            return Err(SpaceError::Empty);
        }
        for d in &dims {
            if !(d.lower < d.upper) || !d.lower.is_finite() || !d.upper.is_finite() {
                return Err(SpaceError::InvalidBounds {
                    name: d.name.clone(),
                    lower: d.lower,
                    upper: d.upper,
                });
            }
        }
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].iter().any(|e| e.name == d.name) {
                return Err(SpaceError::DuplicateName(d.name.clone()));
            }
        }
        Ok(Self { dims })
    }

    /// Convenience constructor for continuous boxes with generated names.
    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self, SpaceError> {
        Self::new(
            bounds
                .iter()
                .enumerate()
                .map(|(i, &(lower, upper))| DimSpec {
                    name: format!("x{}", i + 1),
                    lower,
                    upper,
                    integer: false,
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn lower(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.dims.iter().map(|d| d.lower))
    }

    pub fn upper(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.dims.iter().map(|d| d.upper))
    }

    pub fn contains(&self, x: &DVector<f64>) -> Result<(), SpaceError> {
        if x.len() != self.dim() {
            return Err(SpaceError::DimensionMismatch { got: x.len(), expected: self.dim() });
        }
        for (i, d) in self.dims.iter().enumerate() {
            // Tiny slack for roundoff from normalization round trips.
            let eps = 1e-9 * (d.upper - d.lower);
            if !(x[i] >= d.lower - eps && x[i] <= d.upper + eps) || !x[i].is_finite() {
                return Err(SpaceError::OutOfBounds {
                    index: i,
                    value: x[i],
                    lower: d.lower,
                    upper: d.upper,
                });
            }
        }
        Ok(())
    }

    /// Maps a native point onto the unit cube.
    pub fn normalize(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.dims.iter().zip(x.iter()).map(|(d, &v)| (v - d.lower) / (d.upper - d.lower)),
        )
    }

    /// Maps a unit-cube point back to native coordinates.
    pub fn denormalize(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.dims.iter().zip(u.iter()).map(|(d, &v)| d.lower + v * (d.upper - d.lower)),
        )
    }

    /// Rounds integer dimensions to the nearest in-bounds integer.
    pub fn round_integers(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.dims.iter().zip(x.iter()).map(|(d, &v)| {
                if d.integer {
                    v.round().clamp(d.lower.ceil(), d.upper.floor())
                } else {
                    v
                }
            }),
        )
    }

    /// Euclidean distance between two points in normalized coordinates.
    pub fn normalized_distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (self.normalize(a) - self.normalize(b)).norm()
    }

    /// Length of the search-space diagonal in native coordinates.
    pub fn diagonal(&self) -> f64 {
        self.dims.iter().map(|d| (d.upper - d.lower).powi(2)).sum::<f64>().sqrt()
    }
}

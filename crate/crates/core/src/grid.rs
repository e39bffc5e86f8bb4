//! The strike/maturity lattice and the surface "image" living on it.
//!
//! Flattening is row-major with maturities as rows, so cell `(i, j)` sits at
//! index `i * n_strikes + j` in every dataset file, network output and
//! residual vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrikeMaturityGrid {
    maturities: Vec<f64>,
    strikes: Vec<f64>,
}

fn strictly_increasing_positive(v: &[f64]) -> bool {
    !v.is_empty() && v[0] > 0.0 && v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[1] > w[0])
}

impl StrikeMaturityGrid {
    pub fn new(maturities: Vec<f64>, strikes: Vec<f64>) -> Result<Self> {
        if !strictly_increasing_positive(&maturities) || !strictly_increasing_positive(&strikes) {
            return Err(Error::Config(
                "grid axes must be nonempty, positive and strictly increasing".into(),
            ));
        }
        Ok(Self { maturities, strikes })
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    /// Strike levels, or barrier levels for barrier grids.
    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn n_maturities(&self) -> usize {
        self.maturities.len()
    }

    pub fn n_strikes(&self) -> usize {
        self.strikes.len()
    }

    pub fn len(&self) -> usize {
        self.maturities.len() * self.strikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.strikes.len() + col
    }
}

/// 8 maturities × 11 strikes used for training.
pub fn default_training_grid() -> StrikeMaturityGrid {
    StrikeMaturityGrid {
        maturities: vec![0.1, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.0],
        strikes: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5],
    }
}

/// 5 × 9 grid for market-style calibration: monthly maturities out to a year,
/// strikes 0.85 to 1.25 in steps of 0.05.
pub fn historical_grid() -> StrikeMaturityGrid {
    StrikeMaturityGrid {
        maturities: [1.0, 3.0, 6.0, 9.0, 12.0].iter().map(|m| m / 12.0).collect(),
        strikes: (0..9).map(|i| 0.85 + i as f64 * 0.05).collect(),
    }
}

/// Barrier levels below spot on the training maturities.
pub fn default_barrier_grid() -> StrikeMaturityGrid {
    StrikeMaturityGrid {
        maturities: vec![0.1, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.0],
        strikes: (0..11).map(|i| 0.45 + i as f64 * 0.05).collect(),
    }
}

/// Values on a grid, rows = maturities. Entries are implied vols for vanilla
/// surfaces and probabilities for barrier grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolSurface {
    grid: StrikeMaturityGrid,
    values: Vec<f64>,
}

impl VolSurface {
    /// Implied-vol surface; entries must lie in `(0, 5)`.
    pub fn new(grid: StrikeMaturityGrid, vols: Vec<f64>) -> Result<Self> {
        let s = Self::from_values(grid, vols)?;
        if let Some(pos) = s.values.iter().position(|v| !(*v > 0.0 && *v < 5.0)) {
            let (i, j) = (pos / s.grid.n_strikes(), pos % s.grid.n_strikes());
            return Err(Error::Domain(format!(
                "vol {} at cell ({i}, {j}) outside (0, 5)",
                s.values[pos]
            )));
        }
        Ok(s)
    }

    /// Any finite values of the right shape (used for barrier probabilities
    /// and error maps).
    pub fn from_values(grid: StrikeMaturityGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Domain(format!(
                "surface has {} values, grid has {} cells",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("surface contains a non-finite value".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &StrikeMaturityGrid {
        &self.grid
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.grid.index(row, col)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.grid.n_strikes();
        &self.values[i * n..(i + 1) * n]
    }
}

pub fn flatten(surface: &VolSurface) -> Vec<f64> {
    surface.values.clone()
}

pub fn unflatten(grid: &StrikeMaturityGrid, flat: &[f64]) -> Result<VolSurface> {
    VolSurface::from_values(grid.clone(), flat.to_vec())
}

//! Uniform time and space grids.

use serde::{Deserialize, Serialize};

/// `N_t + 1` equispaced times on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Self {
        assert!(horizon > 0.0 && steps >= 1);
        Self { horizon, steps }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// `N_x` equispaced points on `[x_min, x_max]`, endpoints included.
///
/// The finite-volume view treats each point as the centre of a cell of
/// width `dx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    x_min: f64,
    x_max: f64,
    n: usize,
}

impl SpatialGrid {
    pub fn new(x_min: f64, x_max: f64, n: usize) -> Self {
        assert!(x_max > x_min && n >= 3, "spatial grid needs x_max > x_min and at least 3 points");
        Self { x_min, x_max, n }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n - 1) as f64
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    /// Index of the cell containing `x`, clamped to the grid.
    pub fn cell_of(&self, x: f64) -> usize {
        let r = ((x - self.x_min) / self.dx()).round();
        if r <= 0.0 {
            0
        } else {
            (r as usize).min(self.n - 1)
        }
    }

    /// Linear interpolation of nodal values at `x`, constant beyond the ends.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let s = (x - self.x_min) / self.dx();
        if s <= 0.0 {
            return values[0];
        }
        let i = s.floor() as usize;
        if i >= self.n - 1 {
            return values[self.n - 1];
        }
        let w = s - i as f64;
        values[i] * (1.0 - w) + values[i + 1] * w
    }

    /// `true` when `i` lies at least `margin` (in x units) inside both ends.
    pub fn is_interior(&self, i: usize, margin: f64) -> bool {
        let x = self.x(i);
        x - self.x_min >= margin - 1e-12 && self.x_max - x >= margin - 1e-12
    }
}

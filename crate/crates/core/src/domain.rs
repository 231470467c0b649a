//! Axis-aligned boxes (spatial domains) and rectangular lattices.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in R^n, possibly unbounded per axis (use +-infinity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box bound dimensions");
        assert!(
            lo.iter().zip(&hi).all(|(a, b)| a < b),
            "box bounds must satisfy lo < hi per axis"
        );
        BoxDomain { lo, hi }
    }

    pub fn unbounded(dim: usize) -> Self {
        BoxDomain { lo: vec![f64::NEG_INFINITY; dim], hi: vec![f64::INFINITY; dim] }
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        BoxDomain::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Membership with an additive per-axis margin (margin >= 0 inflates the box).
    pub fn contains_with_margin(&self, x: &[f64], margin: f64) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&xi, (&lo, &hi))| xi >= lo - margin && xi <= hi + margin)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.contains_with_margin(x, 0.0)
    }

    /// Distance to the boundary taken in the min-per-axis sense (exact for boxes
    /// when x is inside; 0 outside). Unbounded axes contribute +infinity.
    pub fn dist_to_boundary(&self, x: &[f64]) -> f64 {
        if !self.contains(x) {
            return 0.0;
        }
        let mut d = f64::INFINITY;
        for (i, &xi) in x.iter().enumerate() {
            if self.lo[i].is_finite() {
                d = d.min(xi - self.lo[i]);
            }
            if self.hi[i].is_finite() {
                d = d.min(self.hi[i] - xi);
            }
        }
        d.max(0.0)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// Product with an m-dimensional unbounded box (for field extension).
    pub fn extend(&self, m: usize) -> Self {
        let mut lo = self.lo.clone();
        let mut hi = self.hi.clone();
        lo.extend(std::iter::repeat(f64::NEG_INFINITY).take(m));
        hi.extend(std::iter::repeat(f64::INFINITY).take(m));
        BoxDomain { lo, hi }
    }
}

/// Uniform rectangular lattice of points spanning a bounded box, endpoints
/// included (shape[i] >= 2 nodes per axis) or a single centered node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub bounds: BoxDomain,
    pub shape: Vec<usize>,
}

impl SpatialGrid {
    pub fn new(bounds: BoxDomain, shape: Vec<usize>) -> Self {
        assert_eq!(bounds.dim(), shape.len());
        assert!(shape.iter().all(|&s| s >= 1));
        assert!(bounds.lo.iter().all(|v| v.is_finite()) && bounds.hi.iter().all(|v| v.is_finite()));
        SpatialGrid { bounds, shape }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        if self.shape[axis] == 1 {
            self.bounds.hi[axis] - self.bounds.lo[axis]
        } else {
            (self.bounds.hi[axis] - self.bounds.lo[axis]) / (self.shape[axis] - 1) as f64
        }
    }

    pub fn coord(&self, axis: usize, idx: usize) -> f64 {
        if self.shape[axis] == 1 {
            0.5 * (self.bounds.lo[axis] + self.bounds.hi[axis])
        } else {
            self.bounds.lo[axis] + self.spacing(axis) * idx as f64
        }
    }

    /// Flattened (row-major, last axis fastest) multi-index of a node.
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0usize; self.dim()];
        for axis in (0..self.dim()).rev() {
            idx[axis] = flat % self.shape[axis];
            flat /= self.shape[axis];
        }
        idx
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        let mut flat = 0usize;
        for axis in 0..self.dim() {
            flat = flat * self.shape[axis] + idx[axis];
        }
        flat
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let idx = self.unflatten(flat);
        idx.iter().enumerate().map(|(axis, &i)| self.coord(axis, i)).collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |f| self.point(f))
    }
}

/// Uniform cell partition of a bounded box; nodes are cell centers. Used for
/// midpoint quadrature, histograms and density grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    pub bounds: BoxDomain,
    pub shape: Vec<usize>,
}

impl CellGrid {
    pub fn new(bounds: BoxDomain, shape: Vec<usize>) -> Self {
        assert_eq!(bounds.dim(), shape.len());
        assert!(shape.iter().all(|&s| s >= 1));
        CellGrid { bounds, shape }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        (self.bounds.hi[axis] - self.bounds.lo[axis]) / self.shape[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.cell_width(a)).product()
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0usize; self.dim()];
        let mut f = flat;
        for axis in (0..self.dim()).rev() {
            idx[axis] = f % self.shape[axis];
            f /= self.shape[axis];
        }
        idx.iter()
            .enumerate()
            .map(|(axis, &i)| self.bounds.lo[axis] + (i as f64 + 0.5) * self.cell_width(axis))
            .collect()
    }

    /// Cell index containing x, or None outside the box.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0usize;
        for axis in 0..self.dim() {
            let w = self.cell_width(axis);
            let rel = (x[axis] - self.bounds.lo[axis]) / w;
            if rel < 0.0 || x[axis] > self.bounds.hi[axis] {
                return None;
            }
            let i = (rel as usize).min(self.shape[axis] - 1);
            flat = flat * self.shape[axis] + i;
        }
        Some(flat)
    }
}

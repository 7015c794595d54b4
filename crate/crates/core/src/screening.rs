//! Contingency screening: the smallest perturbation cells with a high
//! probability of desynchronizing the grid.

use serde::{Deserialize, Serialize};

use crate::landscape::Landscape;

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalCell {
    pub node: usize,
    pub m: usize,
    pub n: usize,
    pub exceed_ratio: f64,
    /// Distance of the cell center from the box center, each axis scaled by
    /// its half-range so the box maps to `[-1, 1]²`.
    pub center_dist: f64,
}

impl CriticalCell {
    pub fn key(&self) -> (usize, usize, usize) {
        (self.node, self.m, self.n)
    }
}

/// Per-cell fraction of unstable outcomes for one node; `None` marks cells
/// that carry no information and are skipped by screening.
#[derive(Debug, Clone, PartialEq)]
pub struct ExceedanceGrid {
    pub node: usize,
    pub grid_res: usize,
    pub values: Vec<Option<f64>>,
}

pub fn exceeding_ratio(ls: &Landscape) -> ExceedanceGrid {
    ExceedanceGrid {
        node: ls.node,
        grid_res: ls.grid_res,
        values: ls.lbs_grid().into_iter().map(|p| p.map(|p| 1.0 - p)).collect(),
    }
}

/// Exceedance of a (predicted) heatmap of stability probabilities.
pub fn exceedance_from_heatmap(node: usize, grid_res: usize, heatmap: &[f64]) -> ExceedanceGrid {
    assert_eq!(heatmap.len(), grid_res * grid_res);
    ExceedanceGrid {
        node,
        grid_res,
        values: heatmap.iter().map(|&p| Some(1.0 - p)).collect(),
    }
}

/// Squared center distance in units of half a cell, exact in integers, so
/// cells at equal distance compare equal.
fn center_key(m: usize, n: usize, grid_res: usize) -> u64 {
    let off = |i: usize| (2 * i as i64 + 1 - grid_res as i64).unsigned_abs();
    off(m) * off(m) + off(n) * off(n)
}

pub fn center_distance(m: usize, n: usize, grid_res: usize) -> f64 {
    let r = grid_res as f64;
    let x = (2.0 * m as f64 + 1.0 - r) / r;
    let y = (2.0 * n as f64 + 1.0 - r) / r;
    x.hypot(y)
}

/// Cells with exceedance above `threshold`, ordered by ascending center
/// distance, then descending exceedance, then `(node, m, n)`; first `k` kept.
pub fn rank_critical_cells(grids: &[ExceedanceGrid], threshold: f64, k: usize) -> Vec<CriticalCell> {
    if let Some(first) = grids.first() {
        assert!(
            grids.iter().all(|g| g.grid_res == first.grid_res),
            "all grids must share a resolution"
        );
    }
    let mut cells: Vec<CriticalCell> = grids
        .iter()
        .flat_map(|g| {
            let res = g.grid_res;
            g.values.iter().enumerate().filter_map(move |(idx, v)| {
                let ratio = (*v)?;
                (ratio > threshold).then(|| {
                    let (m, n) = (idx / res, idx % res);
                    CriticalCell {
                        node: g.node,
                        m,
                        n,
                        exceed_ratio: ratio,
                        center_dist: center_distance(m, n, res),
                    }
                })
            })
        })
        .collect();
    let res = grids.first().map_or(1, |g| g.grid_res);
    cells.sort_by(|a, b| {
        center_key(a.m, a.n, res)
            .cmp(&center_key(b.m, b.n, res))
            .then(b.exceed_ratio.total_cmp(&a.exceed_ratio))
            .then(a.key().cmp(&b.key()))
    });
    cells.truncate(k);
    cells
}

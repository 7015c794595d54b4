//! Monte Carlo basin-stability landscapes.
//!
//! Perturbations drawn uniformly from the phase/frequency box are binned
//! onto an `M × M` grid. Each cell keeps its stable and total counts, so the
//! cell probabilities, their weights and the node's scalar basin stability
//! can all be recovered exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{basin_trial, DynamicsError, Perturbation, SimParams, TrialOutcome};
use crate::fixed_point::FixedPoint;
use crate::graph::Graph;

/// Allowed fraction of failed integrations per landscape.
pub const MAX_FAILED_FRACTION: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LandscapeError {
    #[error("perturbation ({phase}, {freq}) lies outside the sampling box")]
    OutOfBox { phase: f64, freq: f64 },
    #[error("number of trials must be positive")]
    NoTrials,
    #[error("grid resolution must be positive")]
    ZeroResolution,
    #[error("landscape holds no samples")]
    EmptyLandscape,
    #[error("{failed} of {requested} trials failed to integrate")]
    TooManyFailedTrials { failed: usize, requested: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Support of the uniform perturbation distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationBox {
    pub phi_range: (f64, f64),
    pub freq_range: (f64, f64),
}

impl Default for PerturbationBox {
    fn default() -> Self {
        Self {
            phi_range: (-PI, PI),
            freq_range: (-15.0, 15.0),
        }
    }
}

fn axis_index(x: f64, (lo, hi): (f64, f64), res: usize) -> Option<usize> {
    if !(lo..=hi).contains(&x) {
        return None;
    }
    let u = (x - lo) / (hi - lo);
    Some(((u * res as f64).floor() as usize).min(res - 1))
}

impl PerturbationBox {
    pub fn contains(&self, p: Perturbation) -> bool {
        (self.phi_range.0..=self.phi_range.1).contains(&p.phase)
            && (self.freq_range.0..=self.freq_range.1).contains(&p.freq)
    }

    /// Zero-based `(m, n)` cell of `p`: `m` along the phase axis, `n` along
    /// the frequency axis. Cells are half-open except the last on each axis.
    pub fn cell(&self, p: Perturbation, res: usize) -> Option<(usize, usize)> {
        Some((
            axis_index(p.phase, self.phi_range, res)?,
            axis_index(p.freq, self.freq_range, res)?,
        ))
    }

    /// Center of cell `(m, n)` in box coordinates.
    pub fn cell_center(&self, m: usize, n: usize, res: usize) -> (f64, f64) {
        let (plo, phi) = self.phi_range;
        let (flo, fhi) = self.freq_range;
        let r = res as f64;
        (
            plo + (m as f64 + 0.5) * (phi - plo) / r,
            flo + (n as f64 + 0.5) * (fhi - flo) / r,
        )
    }
}

/// Per-node `M × M` grid of stable and total trial counts, indexed `[m][n]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Landscape {
    pub node: usize,
    pub grid_res: usize,
    pub stable_counts: Vec<u32>,
    pub total_counts: Vec<u32>,
}

impl Landscape {
    pub fn empty(node: usize, grid_res: usize) -> Self {
        Self {
            node,
            grid_res,
            stable_counts: vec![0; grid_res * grid_res],
            total_counts: vec![0; grid_res * grid_res],
        }
    }

    pub fn index(&self, m: usize, n: usize) -> usize {
        m * self.grid_res + n
    }

    pub fn n_trials(&self) -> u64 {
        self.total_counts.iter().map(|&c| c as u64).sum()
    }

    pub fn n_stable(&self) -> u64 {
        self.stable_counts.iter().map(|&c| c as u64).sum()
    }

    /// Cell stability probability; `None` for cells without samples.
    pub fn lbs(&self, m: usize, n: usize) -> Option<f64> {
        let k = self.index(m, n);
        (self.total_counts[k] > 0).then(|| self.stable_counts[k] as f64 / self.total_counts[k] as f64)
    }

    /// Row-major `[m][n]` grid of cell probabilities.
    pub fn lbs_grid(&self) -> Vec<Option<f64>> {
        self.stable_counts
            .iter()
            .zip(&self.total_counts)
            .map(|(&s, &t)| (t > 0).then(|| s as f64 / t as f64))
            .collect()
    }

    /// Cell weights `q / 𝒩`.
    pub fn weights(&self) -> Vec<f64> {
        let total = self.n_trials() as f64;
        self.total_counts.iter().map(|&q| q as f64 / total).collect()
    }

    pub fn record(&mut self, m: usize, n: usize, stable: bool) {
        let k = self.index(m, n);
        self.total_counts[k] += 1;
        if stable {
            self.stable_counts[k] += 1;
        }
    }

    /// Elementwise sum with another landscape of the same shape.
    pub fn merge(&mut self, other: &Landscape) {
        assert_eq!(self.grid_res, other.grid_res);
        for (a, b) in self.stable_counts.iter_mut().zip(&other.stable_counts) {
            *a += b;
        }
        for (a, b) in self.total_counts.iter_mut().zip(&other.total_counts) {
            *a += b;
        }
    }

    /// Sums `factor × factor` blocks into a coarser grid.
    pub fn coarsen(&self, factor: usize) -> Landscape {
        assert!(factor > 0 && self.grid_res.is_multiple_of(factor));
        let res = self.grid_res / factor;
        let mut out = Landscape::empty(self.node, res);
        for m in 0..self.grid_res {
            for n in 0..self.grid_res {
                let src = self.index(m, n);
                let dst = out.index(m / factor, n / factor);
                out.stable_counts[dst] += self.stable_counts[src];
                out.total_counts[dst] += self.total_counts[src];
            }
        }
        out
    }
}

/// `n` i.i.d. uniform samples from the box.
pub fn sample_perturbations(n: usize, pbox: &PerturbationBox, seed: u64) -> Vec<Perturbation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let phase = rng.random_range(pbox.phi_range.0..=pbox.phi_range.1);
            let freq = rng.random_range(pbox.freq_range.0..=pbox.freq_range.1);
            Perturbation { phase, freq }
        })
        .collect()
}

pub fn bin_outcomes(
    node: usize,
    outcomes: &[TrialOutcome],
    pbox: &PerturbationBox,
    grid_res: usize,
) -> Result<Landscape, LandscapeError> {
    if grid_res == 0 {
        return Err(LandscapeError::ZeroResolution);
    }
    let mut ls = Landscape::empty(node, grid_res);
    for o in outcomes {
        let p = o.perturbation;
        let (m, n) = pbox.cell(p, grid_res).ok_or(LandscapeError::OutOfBox {
            phase: p.phase,
            freq: p.freq,
        })?;
        ls.record(m, n, o.stable);
    }
    Ok(ls)
}

/// Successful outcomes of one node's trials plus the failure count.
#[derive(Debug, Clone)]
pub struct NodeTrials {
    pub outcomes: Vec<TrialOutcome>,
    pub failed: usize,
}

/// Runs `n_trials` basin trials at `node` on the current rayon pool.
///
/// Results keep the order of the sampled perturbations, so they do not
/// depend on the number of workers.
pub fn run_node_trials(
    graph: &Graph,
    fp: &FixedPoint,
    node: usize,
    n_trials: usize,
    pbox: &PerturbationBox,
    params: &SimParams,
    seed: u64,
) -> Result<NodeTrials, LandscapeError> {
    if n_trials == 0 {
        return Err(LandscapeError::NoTrials);
    }
    params.validate()?;
    let perturbations = sample_perturbations(n_trials, pbox, seed);
    let results: Vec<_> = perturbations
        .par_iter()
        .map(|&p| basin_trial(graph, fp, node, p, params))
        .collect();
    let mut outcomes = Vec::with_capacity(n_trials);
    let mut failed = 0;
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(DynamicsError::Integrate(e)) => {
                log::warn!("graph {} node {node}: trial failed: {e}", graph.id);
                failed += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if failed as f64 > MAX_FAILED_FRACTION * n_trials as f64 {
        return Err(LandscapeError::TooManyFailedTrials {
            failed,
            requested: n_trials,
        });
    }
    Ok(NodeTrials { outcomes, failed })
}

/// Samples, simulates and bins one node's landscape.
pub fn compute_landscape(
    graph: &Graph,
    fp: &FixedPoint,
    node: usize,
    n_trials: usize,
    grid_res: usize,
    params: &SimParams,
    seed: u64,
) -> Result<Landscape, LandscapeError> {
    let pbox = PerturbationBox::default();
    let trials = run_node_trials(graph, fp, node, n_trials, &pbox, params, seed)?;
    bin_outcomes(node, &trials.outcomes, &pbox, grid_res)
}

/// Single-node basin stability: the count-weighted mean of the cell
/// probabilities, which is exactly the trial-level stable fraction.
pub fn snbs_from_landscape(ls: &Landscape) -> Result<f64, LandscapeError> {
    let total = ls.n_trials();
    if total == 0 {
        return Err(LandscapeError::EmptyLandscape);
    }
    Ok(ls.n_stable() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    /// Fraction of outcomes above the synchronization threshold.
    pub frac_above_threshold: f64,
    /// Fraction of outcomes strictly between the threshold and 2.5.
    pub frac_near_threshold: f64,
}

impl FrequencyHistogram {
    pub fn merge(&mut self, other: &FrequencyHistogram) {
        assert_eq!(self.edges, other.edges);
        let (a, b) = (self.total as f64, other.total as f64);
        let total = a + b;
        if total > 0.0 {
            self.frac_above_threshold = (self.frac_above_threshold * a + other.frac_above_threshold * b) / total;
            self.frac_near_threshold = (self.frac_near_threshold * a + other.frac_near_threshold * b) / total;
        }
        for (x, y) in self.counts.iter_mut().zip(&other.counts) {
            *x += y;
        }
        self.total += other.total;
    }
}

/// Edges `0, 10^-4, …, 10^2.5` on a log scale, plus an open last bin.
pub fn default_frequency_edges() -> Vec<f64> {
    let mut edges = vec![0.0];
    edges.extend((0..=65).map(|k| 10f64.powf(-4.0 + k as f64 * 0.1)));
    edges
}

/// Histogram of max final |φ̇|. Values below the first edge land in the first
/// bin and values above the last edge in the last bin, so counts always sum
/// to the number of outcomes.
pub fn final_frequency_histogram(outcomes: &[TrialOutcome], edges: &[f64], threshold: f64) -> FrequencyHistogram {
    assert!(edges.len() >= 2, "need at least one bin");
    let bins = edges.len() - 1;
    let mut counts = vec![0u64; bins];
    let mut above = 0u64;
    let mut near = 0u64;
    for o in outcomes {
        let f = o.max_final_abs_freq;
        let k = edges[1..].partition_point(|&e| e <= f).min(bins - 1);
        counts[k] += 1;
        if f > threshold {
            above += 1;
            if f < 2.5 {
                near += 1;
            }
        }
    }
    let total = outcomes.len() as u64;
    let frac = |x: u64| if total == 0 { 0.0 } else { x as f64 / total as f64 };
    FrequencyHistogram {
        edges: edges.to_vec(),
        counts,
        total,
        frac_above_threshold: frac(above),
        frac_near_threshold: frac(near),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(phase: f64, freq: f64, stable: bool) -> TrialOutcome {
        TrialOutcome {
            perturbation: Perturbation { phase, freq },
            max_final_abs_freq: if stable { 0.0 } else { 10.0 },
            stable,
            t_end: 1.0,
        }
    }

    #[test]
    fn samples_are_uniform_and_reproducible() {
        let b = PerturbationBox::default();
        let s = sample_perturbations(10_000, &b, 42);
        assert_eq!(s, sample_perturbations(10_000, &b, 42));
        assert_ne!(s, sample_perturbations(10_000, &b, 43));
        assert!(s.iter().all(|&p| b.contains(p)));
        let mean_phase = s.iter().map(|p| p.phase).sum::<f64>() / s.len() as f64;
        assert!(mean_phase.abs() < 0.06, "{mean_phase}");
        let mean_freq = s.iter().map(|p| p.freq).sum::<f64>() / s.len() as f64;
        assert!(mean_freq.abs() < 0.3, "{mean_freq}");
    }

    #[test]
    fn every_cell_is_populated_at_default_density() {
        let b = PerturbationBox::default();
        for seed in 0..5 {
            let outcomes: Vec<_> = sample_perturbations(10_000, &b, seed)
                .into_iter()
                .map(|p| outcome(p.phase, p.freq, true))
                .collect();
            let ls = bin_outcomes(0, &outcomes, &b, 20).unwrap();
            assert!(ls.total_counts.iter().all(|&c| c > 0));
            assert_eq!(ls.n_trials(), 10_000);
        }
    }

    #[test]
    fn cell_boundaries() {
        let b = PerturbationBox::default();
        assert_eq!(b.cell(Perturbation::new(-PI, -15.0), 20), Some((0, 0)));
        assert_eq!(b.cell(Perturbation::new(PI, 15.0), 20), Some((19, 19)));
        // Interior boundaries belong to the upper cell.
        assert_eq!(b.cell(Perturbation::new(0.0, 0.0), 20), Some((10, 10)));
        assert_eq!(b.cell(Perturbation::new(0.0, -13.5), 20), Some((10, 1)));
        assert_eq!(b.cell(Perturbation::new(3.2, 0.0), 20), None);
        assert_eq!(b.cell(Perturbation::new(0.0, f64::NAN), 20), None);
    }

    #[test]
    fn out_of_box_is_rejected() {
        let b = PerturbationBox::default();
        let err = bin_outcomes(0, &[outcome(0.0, 16.0, true)], &b, 10).unwrap_err();
        assert!(matches!(err, LandscapeError::OutOfBox { .. }));
    }

    #[test]
    fn all_stable_gives_unit_probabilities() {
        let b = PerturbationBox::default();
        let outcomes: Vec<_> = sample_perturbations(500, &b, 1)
            .into_iter()
            .map(|p| outcome(p.phase, p.freq, true))
            .collect();
        let ls = bin_outcomes(0, &outcomes, &b, 10).unwrap();
        assert!(ls.lbs_grid().into_iter().flatten().all(|v| v == 1.0));
        assert_eq!(snbs_from_landscape(&ls).unwrap(), 1.0);
    }

    #[test]
    fn cell_ratio() {
        let b = PerturbationBox::default();
        let mut outcomes = vec![];
        for k in 0..25 {
            outcomes.push(outcome(0.1, 0.5, k < 20));
        }
        let ls = bin_outcomes(0, &outcomes, &b, 20).unwrap();
        let (m, n) = b.cell(Perturbation::new(0.1, 0.5), 20).unwrap();
        assert_eq!(ls.lbs(m, n), Some(0.8));
        assert_eq!(ls.lbs(0, 0), None);
    }

    #[test]
    fn rebinning_equals_block_sums() {
        let b = PerturbationBox::default();
        let outcomes: Vec<_> = sample_perturbations(20_000, &b, 5)
            .into_iter()
            .enumerate()
            .map(|(k, p)| outcome(p.phase, p.freq, (k * 7919) % 3 != 0))
            .collect();
        let fine = bin_outcomes(0, &outcomes, &b, 20).unwrap();
        assert_eq!(bin_outcomes(0, &outcomes, &b, 5).unwrap(), fine.coarsen(4));
        assert_eq!(bin_outcomes(0, &outcomes, &b, 10).unwrap(), fine.coarsen(2));
        let s = snbs_from_landscape(&fine).unwrap();
        for res in [5, 10, 20, 30] {
            let ls = bin_outcomes(0, &outcomes, &b, res).unwrap();
            assert_eq!(snbs_from_landscape(&ls).unwrap(), s);
        }
    }

    #[test]
    fn empty_landscape_has_no_snbs() {
        assert_eq!(
            snbs_from_landscape(&Landscape::empty(0, 5)),
            Err(LandscapeError::EmptyLandscape)
        );
    }

    #[test]
    fn histogram_conserves_counts() {
        let outcomes: Vec<_> = (0..100)
            .map(|k| TrialOutcome {
                perturbation: Perturbation::ZERO,
                max_final_abs_freq: match k % 4 {
                    0 => 0.0,
                    1 => 0.05,
                    2 => 1.0,
                    _ => 1e4,
                },
                stable: k % 4 < 2,
                t_end: 1.0,
            })
            .collect();
        let h = final_frequency_histogram(&outcomes, &default_frequency_edges(), 0.1);
        assert_eq!(h.counts.iter().sum::<u64>(), 100);
        assert_eq!(h.frac_above_threshold, 0.5);
        assert_eq!(h.frac_near_threshold, 0.25);
        assert_eq!(h.counts[0], 25);
        assert_eq!(*h.counts.last().unwrap(), 25);
    }

    #[test]
    fn all_stable_histogram_mass_below_threshold() {
        let outcomes: Vec<_> = (0..50)
            .map(|k| TrialOutcome {
                perturbation: Perturbation::ZERO,
                max_final_abs_freq: k as f64 * 0.002,
                stable: true,
                t_end: 1.0,
            })
            .collect();
        let edges = default_frequency_edges();
        let h = final_frequency_histogram(&outcomes, &edges, 0.1);
        let below: u64 = h
            .counts
            .iter()
            .zip(edges.windows(2))
            .filter(|(_, w)| w[1] <= 0.1 + 1e-12)
            .map(|(c, _)| c)
            .sum();
        assert_eq!(below, 50);
        assert_eq!(h.frac_above_threshold, 0.0);
    }
}

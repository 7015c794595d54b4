//! Scores for predicted landscape heatmaps.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::screening::CriticalCell;

pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DATA_RANGE: f64 = 1.0;
/// Slack on the weighted-MSE bound for floating-point round-off.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ground truth has zero variance")]
    ZeroVariance,
    #[error("nothing to score")]
    Empty,
}

/// Mean SSIM over all fully contained `7 × 7` windows (the whole image when
/// it is smaller), uniform weights, population statistics, data range 1.
pub fn ssim(a: &[f64], b: &[f64], grid_res: usize) -> Result<f64, MetricError> {
    if a.len() != grid_res * grid_res || b.len() != a.len() {
        return Err(MetricError::ShapeMismatch(format!(
            "{} and {} values for a {grid_res}x{grid_res} grid",
            a.len(),
            b.len()
        )));
    }
    if grid_res == 0 {
        return Err(MetricError::Empty);
    }
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let win = SSIM_WINDOW.min(grid_res);
    let np = (win * win) as f64;

    let positions = grid_res - win + 1;
    let mut total = 0.0;
    for r in 0..positions {
        for c in 0..positions {
            let cells = || (r..r + win).flat_map(move |i| (c..c + win).map(move |j| i * grid_res + j));
            let mu_a = cells().map(|k| a[k]).sum::<f64>() / np;
            let mu_b = cells().map(|k| b[k]).sum::<f64>() / np;
            let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
            for k in cells() {
                let (da, db) = (a[k] - mu_a, b[k] - mu_b);
                var_a += da * da;
                var_b += db * db;
                cov += da * db;
            }
            let (var_a, var_b, cov) = (var_a / np, var_b / np, cov / np);
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    Ok(total / (positions * positions) as f64)
}

/// Coefficient of determination pooled over every cell of every image.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(MetricError::Empty);
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Count-weighted pixel MSE against the squared error of the recovered scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub weighted_mse: f64,
    pub snbs_sq_err: f64,
    pub bound_holds: bool,
}

/// `Σ w ε²` and `(Σ w ε)²` with `w = q / Σ q`; by Jensen the second never
/// exceeds the first.
pub fn weighted_mse_and_bound(pred: &[f64], truth: &[f64], counts: &[u32]) -> Result<BoundCheck, MetricError> {
    if pred.len() != truth.len() || counts.len() != truth.len() {
        return Err(MetricError::ShapeMismatch("pred, truth and counts differ in length".into()));
    }
    let total: f64 = counts.iter().map(|&q| q as f64).sum();
    if total == 0.0 {
        return Err(MetricError::Empty);
    }
    let mut mse = 0.0;
    let mut pred_scalar = 0.0;
    let mut true_scalar = 0.0;
    for ((&p, &t), &q) in pred.iter().zip(truth).zip(counts) {
        if q == 0 {
            continue;
        }
        let w = q as f64 / total;
        mse += w * (p - t).powi(2);
        pred_scalar += w * p;
        true_scalar += w * t;
    }
    let snbs_sq_err = (pred_scalar - true_scalar).powi(2);
    Ok(BoundCheck {
        weighted_mse: mse,
        snbs_sq_err,
        bound_holds: snbs_sq_err <= mse + BOUND_SLACK,
    })
}

fn top_keys(cells: &[CriticalCell], k: usize) -> HashSet<(usize, usize, usize)> {
    cells.iter().take(k).map(CriticalCell::key).collect()
}

/// Intersection over union of the top-`k` cell sets, by `(node, m, n)`.
/// Two empty sets count as identical.
pub fn iou_topk(pred: &[CriticalCell], truth: &[CriticalCell], k: usize) -> f64 {
    let a = top_keys(pred, k);
    let b = top_keys(truth, k);
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    /// Fraction of the true top-`k` found in the predicted top-`m`.
    pub per_cell: f64,
    /// Whether all of the true top-`k` are in the predicted top-`m`.
    pub all_contained: bool,
}

pub fn relaxed_containment(pred: &[CriticalCell], truth: &[CriticalCell], k: usize, m: usize) -> Containment {
    let predicted = top_keys(pred, m);
    let wanted = top_keys(truth, k);
    if wanted.is_empty() {
        return Containment {
            per_cell: 1.0,
            all_contained: true,
        };
    }
    let hit = wanted.iter().filter(|c| predicted.contains(c)).count();
    Containment {
        per_cell: hit as f64 / wanted.len() as f64,
        all_contained: hit == wanted.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim_mean: f64,
    pub r2: f64,
    pub weighted_mse: f64,
    pub snbs_sq_err: f64,
    pub bound_holds: bool,
    pub iou_topk: f64,
    /// Share of graphs whose true top-k lies entirely in the predicted top-m.
    pub relaxed_containment: f64,
    /// Mean per-cell containment fraction.
    pub relaxed_per_cell: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct luminance · contrast · structure form with `C3 = C2 / 2`,
    /// looping over every window explicitly.
    fn reference_ssim(a: &[f64], b: &[f64], res: usize) -> f64 {
        let c1 = 0.01f64.powi(2);
        let c2 = 0.03f64.powi(2);
        let c3 = c2 / 2.0;
        let win = 7.min(res);
        let mut acc = 0.0;
        let mut count = 0;
        for r in 0..=res - win {
            for c in 0..=res - win {
                let mut xs = vec![];
                let mut ys = vec![];
                for i in r..r + win {
                    for j in c..c + win {
                        xs.push(a[i * res + j]);
                        ys.push(b[i * res + j]);
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();
                let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n).sqrt();
                let sxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
                let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                let cc = (2.0 * sx * sy + c2) / (sx * sx + sy * sy + c2);
                let s = (sxy + c3) / (sx * sy + c3);
                acc += l * cc * s;
                count += 1;
            }
        }
        acc / count as f64
    }

    fn cell(node: usize, m: usize, n: usize) -> CriticalCell {
        CriticalCell {
            node,
            m,
            n,
            exceed_ratio: 0.9,
            center_dist: 0.5,
        }
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..400).map(|_| rng.random()).collect();
        assert_eq!(ssim(&x, &x, 20).unwrap(), 1.0);
        let c = vec![0.37; 100];
        assert_eq!(ssim(&c, &c, 10).unwrap(), 1.0);
    }

    #[test]
    fn ssim_half_split_against_reference() {
        let res = 20;
        let x: Vec<f64> = (0..res * res).map(|k| if k % res < res / 2 { 0.0 } else { 1.0 }).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        let s = ssim(&x, &y, res).unwrap();
        assert!((s - reference_ssim(&x, &y, res)).abs() < 1e-9);
        assert!(s < 0.5);
    }

    #[test]
    fn ssim_small_grid_uses_global_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        assert!((ssim(&x, &y, 5).unwrap() - reference_ssim(&x, &y, 5)).abs() < 1e-9);
    }

    #[test]
    fn ssim_shape_mismatch() {
        assert!(matches!(ssim(&[0.0; 4], &[0.0; 9], 2), Err(MetricError::ShapeMismatch(_))));
    }

    #[test]
    fn r2_definitional_cases() {
        let t = [0.0, 0.5, 1.0, 0.5];
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        assert_eq!(r2(&[0.5; 4], &t).unwrap(), 0.0);
        // mean 0.5, SS_tot = 0.5, SS_res = 0.01 + 0 + 0.04 + 0.09 = 0.14.
        let p = [0.1, 0.5, 0.8, 0.2];
        assert!((r2(&p, &t).unwrap() - (1.0 - 0.14 / 0.5)).abs() < 1e-12);
        assert_eq!(r2(&t, &[0.3; 4]), Err(MetricError::ZeroVariance));
    }

    #[test]
    fn bound_edge_cases() {
        let t = [0.2, 0.9, 0.4];
        let b = weighted_mse_and_bound(&t, &t, &[3, 5, 2]).unwrap();
        assert_eq!((b.weighted_mse, b.snbs_sq_err, b.bound_holds), (0.0, 0.0, true));
        let b = weighted_mse_and_bound(&[0.7, 0.0, 0.0], &[0.1, 0.5, 0.5], &[9, 0, 0]).unwrap();
        assert!((b.weighted_mse - b.snbs_sq_err).abs() < 1e-12);
        assert!(b.bound_holds);
    }

    proptest! {
        #[test]
        fn weighted_mse_bounds_scalar_error(
            cells in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0u32..50), 1..400)
        ) {
            prop_assume!(cells.iter().any(|c| c.2 > 0));
            let pred: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let truth: Vec<f64> = cells.iter().map(|c| c.1).collect();
            let counts: Vec<u32> = cells.iter().map(|c| c.2).collect();
            let b = weighted_mse_and_bound(&pred, &truth, &counts).unwrap();
            prop_assert!(b.bound_holds);
        }

        #[test]
        fn ssim_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..100).map(|_| rng.random()).collect();
            let y: Vec<f64> = (0..100).map(|_| rng.random()).collect();
            let d = ssim(&x, &y, 10).unwrap() - ssim(&y, &x, 10).unwrap();
            prop_assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn iou_cases() {
        let a: Vec<_> = (0..20).map(|k| cell(0, k, 0)).collect();
        assert_eq!(iou_topk(&a, &a, 20), 1.0);
        let b: Vec<_> = (0..20).map(|k| cell(1, k, 0)).collect();
        assert_eq!(iou_topk(&a, &b, 20), 0.0);
        let c: Vec<_> = (10..30).map(|k| cell(0, k, 0)).collect();
        assert!((iou_topk(&a, &c, 20) - 10.0 / 30.0).abs() < 1e-15);
        assert_eq!(iou_topk(&[], &[], 20), 1.0);
    }

    #[test]
    fn containment_cases() {
        let truth: Vec<_> = (0..20).map(|k| cell(0, k, 1)).collect();
        let c = relaxed_containment(&truth, &truth, 20, 30);
        assert_eq!((c.per_cell, c.all_contained), (1.0, true));

        let mut reordered: Vec<_> = (0..10).map(|k| cell(2, k, 2)).collect();
        reordered.extend(truth.iter().rev().copied());
        let c = relaxed_containment(&reordered, &truth, 20, 30);
        assert!(c.all_contained);

        let mut missing_one: Vec<_> = truth[1..].to_vec();
        missing_one.extend((0..11).map(|k| cell(3, k, 3)));
        let c = relaxed_containment(&missing_one, &truth, 20, 30);
        assert!(!c.all_contained);
        assert_eq!(c.per_cell, 0.95);
    }
}

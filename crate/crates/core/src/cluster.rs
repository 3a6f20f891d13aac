//! Final embedding assembly, k-means clustering, and external cluster metrics.
//!
//! k-means is deterministic given its seed: k-means++ initialization, Lloyd
//! iterations, and the best-of-restarts selection all draw from one seeded
//! stream and break ties toward lower indices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Hard assignment of every row to one of `k` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    pub inertia: f64,
}

/// External evaluation scores against ground-truth labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "acc  {:.4}", self.acc)?;
        writeln!(f, "nmi  {:.4}", self.nmi)?;
        write!(f, "ari  {:.4}", self.ari)
    }
}

/// Column-wise concatenation `[z_m | z_g]` of two equal-shape views.
pub fn concat_embed(z_m: &Matrix, z_g: &Matrix) -> Result<Matrix> {
    if z_m.rows() != z_g.rows() || z_m.cols() != z_g.cols() {
        return Err(Error::DimensionMismatch {
            op: "concat_embed",
            lhs_rows: z_m.rows(),
            lhs_cols: z_m.cols(),
            rhs_rows: z_g.rows(),
            rhs_cols: z_g.cols(),
        });
    }
    let (n, c) = (z_m.rows(), z_m.cols());
    let mut out = Matrix::zeros(n, 2 * c);
    for i in 0..n {
        let row = out.row_mut(i);
        row[..c].copy_from_slice(z_m.row(i));
        row[c..].copy_from_slice(z_g.row(i));
    }
    Ok(out)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// k-means++ seeding: first center uniform, later centers D^2-sampled.
fn kmeanspp_init(z: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = z.rows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(z.row(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| dist_sq(z.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // every point coincides with a center; any choice is equivalent
            rng.gen_range(0..n)
        };
        centers.push(z.row(next).to_vec());
        let c = centers.last().unwrap();
        for i in 0..n {
            d2[i] = d2[i].min(dist_sq(z.row(i), c));
        }
    }
    centers
}

/// One Lloyd run from given centers; returns (labels, inertia).
fn lloyd(z: &Matrix, mut centers: Vec<Vec<f64>>) -> (Vec<usize>, f64) {
    let n = z.rows();
    let k = centers.len();
    let mut labels = vec![0usize; n];
    let mut prev = f64::INFINITY;
    let mut inertia = f64::INFINITY;
    for _ in 0..300 {
        // assignment, ties toward the lower center index
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let d = dist_sq(z.row(i), center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            labels[i] = best.1;
        }

        // repair empties by seizing the point farthest from its own center
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let victim = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    dist_sq(z.row(a), &centers[labels[a]])
                        .total_cmp(&dist_sq(z.row(b), &centers[labels[b]]))
                })
                .expect("n >= k leaves a donor cluster");
            counts[labels[victim]] -= 1;
            labels[victim] = c;
            counts[c] = 1;
        }

        // centroid update
        for center in &mut centers {
            center.iter_mut().for_each(|v| *v = 0.0);
        }
        for (i, &l) in labels.iter().enumerate() {
            for (cv, &v) in centers[l].iter_mut().zip(z.row(i)) {
                *cv += v;
            }
        }
        for (center, &count) in centers.iter_mut().zip(&counts) {
            center.iter_mut().for_each(|v| *v /= count as f64);
        }

        inertia = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| dist_sq(z.row(i), &centers[l]))
            .sum();
        if (prev - inertia).abs() < 1e-6 * prev.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = inertia;
    }
    (labels, inertia)
}

/// Best-of-`restarts` k-means (ties keep the earlier restart).
pub fn kmeans(z: &Matrix, k: usize, seed: u64, restarts: usize) -> Result<ClusterAssignment> {
    let n = z.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "kmeans: k = {k} must be in [1, n = {n}]"
        )));
    }
    if restarts == 0 {
        return Err(Error::InvalidParameter(
            "kmeans: restarts must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts {
        let (labels, inertia) = lloyd(z, kmeanspp_init(z, k, &mut rng));
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((labels, inertia));
        }
    }
    let (labels, inertia) = best.unwrap();
    Ok(ClusterAssignment { labels, k, inertia })
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "metrics need equal nonempty labelings, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Contingency counts with pred clusters as rows, truth clusters as columns.
fn contingency(pred: &[usize], truth: &[usize]) -> Vec<Vec<f64>> {
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut c = vec![vec![0.0; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        c[p][t] += 1.0;
    }
    c
}

/// Exact minimum-cost assignment on a square cost matrix (potentials method).
/// Returns the column assigned to each row.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1]; // matched[j] = row using column j, 1-based
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched[j] > 0 {
            assignment[matched[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Clustering accuracy: maximum-weight matching of pred clusters to truth
/// clusters on the (square-padded) confusion matrix, matched count / N.
pub fn metric_acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let c = contingency(pred, truth);
    let side = c.len().max(c[0].len());
    let top = pred.len() as f64;
    let cost: Vec<Vec<f64>> = (0..side)
        .map(|i| {
            (0..side)
                .map(|j| top - c.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0))
                .collect()
        })
        .collect();
    let assignment = hungarian_min(&cost);
    let matched: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| c.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0))
        .sum();
    Ok(matched / pred.len() as f64)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn metric_nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let c = contingency(pred, truth);
    let n = pred.len() as f64;
    let a: Vec<f64> = c.iter().map(|row| row.iter().sum()).collect();
    let b: Vec<f64> = (0..c[0].len())
        .map(|j| c.iter().map(|row| row[j]).sum())
        .collect();
    let (ha, hb) = (entropy(&a, n), entropy(&b, n));
    if ha + hb == 0.0 {
        // both partitions are a single cluster: identical
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in c.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                mi += (nij / n) * ((nij * n) / (a[i] * b[j])).ln();
            }
        }
    }
    Ok(mi / ((ha + hb) / 2.0))
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index by pair counting. Both-degenerate partitions
/// (all-singletons vs all-singletons, or one cluster vs one cluster) are
/// identical and score 1.
pub fn metric_ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let c = contingency(pred, truth);
    let n = pred.len() as f64;
    let a: Vec<f64> = c.iter().map(|row| row.iter().sum()).collect();
    let b: Vec<f64> = (0..c[0].len())
        .map(|j| c.iter().map(|row| row[j]).sum())
        .collect();
    let sum_ij: f64 = c.iter().flatten().map(|&v| pairs(v)).sum();
    let sum_a: f64 = a.iter().map(|&v| pairs(v)).sum();
    let sum_b: f64 = b.iter().map(|&v| pairs(v)).sum();
    let total = pairs(n);
    let expected = sum_a * sum_b / total;
    let denom = 0.5 * (sum_a + sum_b) - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / denom)
}

/// All three metrics at once.
pub fn compute_metrics(pred: &[usize], truth: &[usize]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        acc: metric_acc(pred, truth)?,
        nmi: metric_nmi(pred, truth)?,
        ari: metric_ari(pred, truth)?,
    })
}

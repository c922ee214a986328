//! Distributional and reconstruction metrics: exact 1-d Wasserstein-1,
//! sliced W1, assignment-based W1, per-dimension MSE, and the
//! recoverability-bound evaluator with its verification report.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionModel;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::inversion::{self, RangeSource};
use crate::rae::Rae;
use crate::tensor::Tensor;

/// How a W1 value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum W1Method {
    Exact1d,
    Sliced,
    ExactAssignment,
}

/// A Wasserstein-1 estimate with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct W1Estimate {
    pub value: f64,
    pub method: W1Method,
    /// Number of random projections (sliced mode only).
    pub projection_count: Option<usize>,
    /// Monte Carlo standard error across slices (sliced mode only).
    pub std_error: Option<f64>,
    pub sample_counts: (usize, usize),
}

pub const DEFAULT_SLICES: usize = 128;

/// Exact W1 between two 1-d empirical measures (any sample counts):
/// the area between the empirical CDFs.
pub fn w1_exact_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "empty sample set");
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut prev = sa[0].min(sb[0]);
    let mut total = 0.0;
    while ia < sa.len() || ib < sb.len() {
        let next = match (sa.get(ia), sb.get(ib)) {
            (Some(x), Some(y)) => x.min(*y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => break,
        };
        let fa = ia as f64 / na;
        let fb = ib as f64 / nb;
        total += (fa - fb).abs() * (next - prev);
        prev = next;
        while ia < sa.len() && sa[ia] <= next {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= next {
            ib += 1;
        }
    }
    total
}

fn project(points: &Tensor, dir: &[f64]) -> Vec<f64> {
    (0..points.rows())
        .map(|i| points.row(i).iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect()
}

/// Sliced W1: average exact 1-d W1 over seeded random unit projections.
pub fn w1_sliced(p: &Tensor, q: &Tensor, projections: usize, seed: u64) -> Result<W1Estimate> {
    if p.rows() == 0 || q.rows() == 0 {
        return Err(Error::invalid("w1_sliced", "empty sample set"));
    }
    if p.cols() != q.cols() {
        return Err(Error::ShapeMismatch {
            op: "w1_sliced",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let d = p.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(projections);
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|v| *v /= norm);
        values.push(w1_exact_1d(&project(p, &dir), &project(q, &dir)));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() as f64 - 1.0).max(1.0);
    Ok(W1Estimate {
        value: mean,
        method: W1Method::Sliced,
        projection_count: Some(projections),
        std_error: Some((var / values.len() as f64).sqrt()),
        sample_counts: (p.rows(), q.rows()),
    })
}

pub const ASSIGNMENT_MAX: usize = 2000;

/// Exact W1 between equal-count empirical measures via an optimal
/// assignment on the pairwise-distance matrix (O(n^3)).
pub fn w1_assignment(p: &Tensor, q: &Tensor) -> Result<W1Estimate> {
    if p.rows() != q.rows() {
        return Err(Error::invalid(
            "w1_assignment",
            format!("equal sample counts required, got {} vs {}", p.rows(), q.rows()),
        ));
    }
    if p.cols() != q.cols() {
        return Err(Error::ShapeMismatch {
            op: "w1_assignment",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let n = p.rows();
    if n == 0 || n > ASSIGNMENT_MAX {
        return Err(Error::invalid(
            "w1_assignment",
            format!("sample count {n} outside 1..={ASSIGNMENT_MAX}"),
        ));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d2: f64 =
                p.row(i).iter().zip(q.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            cost[i * n + j] = d2.sqrt();
        }
    }
    let assignment = solve_assignment(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(j, &i)| cost[i * n + j]).sum();
    Ok(W1Estimate {
        value: total / n as f64,
        method: W1Method::ExactAssignment,
        projection_count: None,
        std_error: None,
        sample_counts: (n, n),
    })
}

/// Hungarian algorithm with potentials; returns `row[col]` of the optimal
/// assignment.
fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| p[j] - 1).collect()
}

/// Dispatch over the three estimators. 1-d inputs use the exact CDF route.
pub fn w1(p: &Tensor, q: &Tensor, method: W1Method, seed: u64) -> Result<W1Estimate> {
    match method {
        W1Method::Exact1d => {
            if p.cols() != 1 || q.cols() != 1 {
                return Err(Error::invalid("w1", "exact-1d requires 1-d samples"));
            }
            Ok(W1Estimate {
                value: w1_exact_1d(p.data(), q.data()),
                method: W1Method::Exact1d,
                projection_count: None,
                std_error: None,
                sample_counts: (p.rows(), q.rows()),
            })
        }
        W1Method::Sliced => w1_sliced(p, q, DEFAULT_SLICES, seed),
        W1Method::ExactAssignment => w1_assignment(p, q),
    }
}

/// Per-dimension mean squared error `||x_hat - x||^2 / d`.
pub fn mse(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    if x_hat.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: vec![x_hat.len()],
            rhs: vec![x.len()],
        });
    }
    let d = x.len() as f64;
    Ok(x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d)
}

/// Distribution-recovery bound `2 omega (1 + ||A|| / sqrt(1 - delta))`.
pub fn recoverability_bound(omega: f64, operator_norm: f64, delta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::invalid("recoverability_bound", format!("delta = {delta} not in [0, 1)")));
    }
    if omega < 0.0 {
        return Err(Error::invalid("recoverability_bound", format!("omega = {omega} negative")));
    }
    Ok(2.0 * omega * (1.0 + operator_norm / (1.0 - delta).sqrt()))
}

/// Empirical recoverability report; advisory because the bound's feasibility
/// preconditions are not checkable from data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoverabilityReport {
    /// Measured expected projection error of the learned autoencoder under
    /// model samples (the constraint surrogate).
    pub omega_hat: f64,
    pub omega_std_error: f64,
    /// The reparametrization consistency term; identically zero when the
    /// autoencoder is built from the same flow being evaluated.
    pub consistency_term: f64,
    /// Empirical restricted-isometry constant over decoded pairs.
    pub delta_hat: f64,
    pub operator_norm: f64,
    /// `2 omega (1 + ||A|| / sqrt(1 - delta))`; absent when `delta_hat >= 1`.
    pub bound: Option<f64>,
    /// Sliced W1 between model samples and ground-truth samples.
    pub measured_w1: f64,
    pub measured_w1_std_error: f64,
    /// Whether measured W1 <= bound. Advisory only.
    pub within_bound: Option<bool>,
    pub sample_count: usize,
}

/// Measure every quantity entering the recoverability bound on a trained
/// model and compare the bound against the sliced W1 to ground truth.
pub fn verify_recoverability(
    flow: &FlowModel,
    rae: &Rae,
    ground_truth: &Tensor,
    corruption: &CorruptionModel,
    sample_count: usize,
    seed: u64,
) -> Result<RecoverabilityReport> {
    let samples = flow.sample(sample_count, seed)?;
    let report = rae.expected_projection_error_of(&samples)?;

    let rip = inversion::check_rip(
        RangeSource::Decoder(rae),
        corruption,
        2000,
        seed.wrapping_add(1),
    )?;
    let delta_hat = rip.delta_hat();
    let op_norm = corruption.operator().operator_norm();
    let bound = if delta_hat < 1.0 {
        Some(recoverability_bound(report.expected_error, op_norm, delta_hat)?)
    } else {
        None
    };

    let w1 = w1_sliced(&samples, ground_truth, DEFAULT_SLICES, seed.wrapping_add(2))?;
    Ok(RecoverabilityReport {
        omega_hat: report.expected_error,
        omega_std_error: report.std_error,
        consistency_term: 0.0,
        delta_hat,
        operator_norm: op_norm,
        bound,
        measured_w1: w1.value,
        measured_w1_std_error: w1.std_error.unwrap_or(0.0),
        within_bound: bound.map(|b| w1.value <= b),
        sample_count,
    })
}

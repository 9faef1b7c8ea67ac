//! Task similarity from the task-theme posteriors Dir(λ_d): KL divergences,
//! per-test-task average distances, correlation diagrams and selection of the
//! closest training tasks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specfn::{digamma, log_beta_dirichlet};

/// KL[Dir(a) ‖ Dir(b)] = ln B(b) − ln B(a) + Σ_k (a_k − b_k)(ψ(a_k) − ψ(a₀)).
pub fn dirichlet_kl(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "Dirichlet parameters have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a == b {
        // still validate the arguments
        log_beta_dirichlet(a)?;
        return Ok(0.0);
    }
    let psi_total = digamma(a.iter().sum())?;
    let mut kl = log_beta_dirichlet(b)? - log_beta_dirichlet(a)?;
    for (&ak, &bk) in a.iter().zip(b) {
        kl += (ak - bk) * (digamma(ak)? - psi_total);
    }
    Ok(kl)
}

/// Distances from each test task to the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    /// D̄_i: mean over training tasks of KL(λ_test_i ‖ λ_train_d).
    pub mean_kl: Vec<f64>,
    /// Full test×train matrix, when requested.
    pub matrix: Option<Vec<Vec<f64>>>,
}

fn check_rows(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let Some(first) = rows.first() else {
        return Err(Error::Argument(format!("no {what} λ rows")));
    };
    let l = first.len();
    if rows.iter().any(|r| r.len() != l) {
        return Err(Error::Argument(format!(
            "{what} λ rows have differing lengths"
        )));
    }
    Ok(l)
}

fn kl_matrix(test: &[Vec<f64>], train: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let l_test = check_rows(test, "test")?;
    let l_train = check_rows(train, "training")?;
    if l_test != l_train {
        return Err(Error::Argument(format!(
            "test λ has {l_test} task-themes, training λ has {l_train}"
        )));
    }
    test.par_iter()
        .map(|t| train.iter().map(|d| dirichlet_kl(t, d)).collect())
        .collect()
}

/// KL(λ_test_i ‖ λ_train_d) for all pairs, reduced to row means.
pub fn distance_matrix(
    test: &[Vec<f64>],
    train: &[Vec<f64>],
    keep_matrix: bool,
) -> Result<DistanceReport> {
    let m = kl_matrix(test, train)?;
    let mean_kl = m
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    Ok(DistanceReport {
        mean_kl,
        matrix: keep_matrix.then_some(m),
    })
}

/// One non-empty bin of a correlation diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagramBin {
    /// 1-based bin index j.
    pub index: usize,
    /// The bin covers (low, high].
    pub low: f64,
    pub high: f64,
    pub mean_distance: f64,
    pub mean_accuracy: f64,
    pub count: usize,
}

/// Groups test tasks into J equal-width bins of their average distance.
///
/// Bin j covers ((j−1)Δ, jΔ] with Δ = max D̄ / J; a distance of exactly zero
/// goes to bin 1. Empty bins are left out. When every distance is zero a
/// single bin (0, 0] holds all tasks.
pub fn correlation_diagram(
    distances: &[f64],
    accuracies: &[f64],
    bins: usize,
) -> Result<Vec<DiagramBin>> {
    if distances.len() != accuracies.len() {
        return Err(Error::Argument(format!(
            "{} distances but {} accuracies",
            distances.len(),
            accuracies.len()
        )));
    }
    if distances.is_empty() {
        return Err(Error::Argument("no test tasks".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("bin count must be at least 1".into()));
    }
    if let Some(d) = distances.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::Argument(format!("invalid distance {d}")));
    }
    if let Some(a) = accuracies.iter().find(|a| !a.is_finite()) {
        return Err(Error::Argument(format!("invalid accuracy {a}")));
    }
    let max = distances.iter().copied().fold(0.0, f64::max);
    let width = max / bins as f64;
    let n_bins = if width > 0.0 { bins } else { 1 };

    let mut sums = vec![(0.0f64, 0.0f64, 0usize); n_bins];
    for (&d, &a) in distances.iter().zip(accuracies) {
        let j = if width > 0.0 {
            ((d / width).ceil() as usize).clamp(1, n_bins)
        } else {
            1
        };
        let s = &mut sums[j - 1];
        s.0 += d;
        s.1 += a;
        s.2 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.2 > 0)
        .map(|(i, (ds, acc, count))| DiagramBin {
            index: i + 1,
            low: i as f64 * width,
            high: (i + 1) as f64 * width,
            mean_distance: ds / count as f64,
            mean_accuracy: acc / count as f64,
            count,
        })
        .collect())
}

/// Scores every training task by its mean KL from the test tasks,
/// score_d = mean_i KL(λ_test_i ‖ λ_train_d).
pub fn selection_scores(train: &[Vec<f64>], test: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = kl_matrix(test, train)?;
    let n = m.len() as f64;
    Ok((0..train.len())
        .map(|d| m.iter().map(|row| row[d]).sum::<f64>() / n)
        .collect())
}

/// Indices of the `m` training tasks with the smallest scores, ascending by
/// score, ties broken by index.
pub fn select_tasks(train: &[Vec<f64>], test: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    if m > train.len() {
        return Err(Error::Argument(format!(
            "cannot select {m} of {} training tasks",
            train.len()
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let scores = selection_scores(train, test)?;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(m);
    Ok(idx)
}

//! Special functions used by the variational updates.
//!
//! `digamma` and `trigamma` shift the argument upward with the recurrences
//! ψ(x) = ψ(x+1) − 1/x and ψ′(x) = ψ′(x+1) + 1/x² until x ≥ 6, then apply the
//! asymptotic (Bernoulli) expansions. `log_gamma` does the same with the
//! Stirling series, shifting to x ≥ 10.
//!
//! Arguments at or below [`MIN_ARG`] are rejected instead of clamped, so a
//! collapsing Dirichlet parameter surfaces as an error upstream.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest argument accepted by the gamma-family functions.
pub const MIN_ARG: f64 = 1e-300;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A non-empty vector of strictly positive, finite reals.
///
/// Used for Dirichlet parameters wherever a log-normalizer or expected log
/// is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PositiveVector(Vec<f64>);

impl PositiveVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Argument("positive vector must be non-empty".into()));
        }
        if let Some((i, v)) = entries
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Argument(format!(
                "entry {i} = {v} is not strictly positive and finite"
            )));
        }
        Ok(Self(entries))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for PositiveVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for PositiveVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PositiveVector> for Vec<f64> {
    fn from(v: PositiveVector) -> Self {
        v.0
    }
}

fn check_arg(func: &'static str, x: f64) -> Result<()> {
    if x.is_finite() && x > MIN_ARG {
        Ok(())
    } else {
        Err(Error::domain(
            func,
            format!("argument {x} must be finite and > {MIN_ARG:e}"),
        ))
    }
}

/// ln Γ(x) for x > 0.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_arg("log_gamma", x)?;
    if x == 1.0 || x == 2.0 {
        return Ok(0.0);
    }
    let mut z = x;
    // Accumulate ln(x (x+1) ... (x+n-1)) as a product, renormalizing so it
    // cannot overflow for tiny x.
    let mut prod = 1.0;
    let mut log_shift = 0.0;
    while z < 10.0 {
        prod *= z;
        if !(1e-280..=1e280).contains(&prod) {
            log_shift += prod.ln();
            prod = 1.0;
        }
        z += 1.0;
    }
    log_shift += prod.ln();

    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // Stirling series: sum B_2n / (2n (2n-1) z^(2n-1))
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2
                                                * (-691.0 / 360_360.0 + inv2 * (1.0 / 156.0)))))));
    Ok((z - 0.5) * z.ln() - z + HALF_LN_2PI + series - log_shift)
}

/// The digamma function ψ(x) = d/dx ln Γ(x), x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    check_arg("digamma", x)?;
    let mut z = x;
    let mut acc = 0.0;
    while z < 6.0 {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 * (1.0 / 12.0)))))));
    Ok(acc + z.ln() - 0.5 / z - tail)
}

/// The trigamma function ψ′(x), x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    check_arg("trigamma", x)?;
    let mut z = x;
    let mut acc = 0.0;
    while z < 6.0 {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let tail = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2
                                        * (5.0 / 66.0
                                            - inv2 * (691.0 / 2730.0 - inv2 * (7.0 / 6.0)))))));
    Ok(acc + inv + 0.5 * inv2 + tail)
}

/// ln B(u) = Σ_k ln Γ(u_k) − ln Γ(Σ_k u_k), the log normalizer of Dir(u).
pub fn log_beta_dirichlet(u: &[f64]) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::domain(
            "log_beta_dirichlet",
            "empty parameter vector",
        ));
    }
    let mut acc = 0.0;
    let mut total = 0.0;
    for &v in u {
        acc += log_gamma(v)?;
        total += v;
    }
    Ok(acc - log_gamma(total)?)
}

/// ln Σ exp(v_i), shifted by the maximum. Entries may be −∞.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::domain("log_sum_exp", "empty input"))?;
    if max.is_nan() || max == f64::INFINITY {
        return Err(Error::domain(
            "log_sum_exp",
            format!("non-finite maximum {max}"),
        ));
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if v.len() == 1 {
        return Ok(max);
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Normalizes log-weights in place into probabilities; returns the log normalizer.
pub(crate) fn normalize_log_weights(w: &mut [f64]) -> Result<f64> {
    let lse = log_sum_exp(w)?;
    if !lse.is_finite() {
        return Err(Error::Numeric(format!(
            "cannot normalize weights with log-sum {lse}"
        )));
    }
    for x in w.iter_mut() {
        *x = (*x - lse).exp();
    }
    Ok(lse)
}

/// Euler–Mascheroni constant.
#[cfg(test)]
pub(crate) const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

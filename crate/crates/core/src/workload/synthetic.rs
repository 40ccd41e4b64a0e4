//! Zipf-shaped stand-in for the Azure Functions trace.
//!
//! Function popularity follows `p(r) ∝ r^-s`. The exponent is not a free
//! knob: it is solved so the `head` most popular functions carry `head_share`
//! of all invocations, which is the one summary statistic of the real trace
//! that the scheduler results are sensitive to.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::TraceMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTrace {
    /// Distinct functions in the trace.
    pub functions: usize,
    pub minutes: usize,
    /// Mean invocations per minute over all functions.
    pub invocations_per_minute: f64,
    pub head: usize,
    pub head_share: f64,
    pub seed: u64,
}

impl Default for SyntheticTrace {
    fn default() -> Self {
        SyntheticTrace {
            functions: 46_413,
            minutes: 60,
            invocations_per_minute: 100_000.0,
            head: 15,
            head_share: 0.56,
            seed: 0,
        }
    }
}

/// `Σ_{r=1..n} r^-s`
fn harmonic(n: usize, s: f64) -> f64 {
    (1..=n).map(|r| (r as f64).powf(-s)).sum()
}

/// Share of the `head` most popular of `n` Zipf(s) functions.
pub fn head_share(n: usize, head: usize, s: f64) -> f64 {
    harmonic(head.min(n), s) / harmonic(n, s)
}

/// Solves `head_share(n, head, s) = target` for `s` by bisection.
pub fn calibrate_exponent(n: usize, head: usize, target: f64) -> Result<f64> {
    if head == 0 || head >= n {
        return Err(Error::Config(format!(
            "head ({head}) must be between 1 and the function count ({n}) exclusive"
        )));
    }
    let uniform = head as f64 / n as f64;
    if !(target > uniform && target < 1.0) {
        return Err(Error::Config(format!(
            "head share {target} must lie in ({uniform}, 1) for {head} of {n} functions"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while head_share(n, head, hi) < target {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if head_share(n, head, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

impl SyntheticTrace {
    pub fn exponent(&self) -> Result<f64> {
        calibrate_exponent(self.functions, self.head, self.head_share)
    }

    /// Function ids are `fn00001`, `fn00002`, ... in expected-popularity order.
    pub fn generate(&self) -> Result<TraceMatrix> {
        if self.minutes == 0 {
            return Err(Error::Config(
                "synthetic trace needs at least one minute".into(),
            ));
        }
        if self.invocations_per_minute.is_nan() || self.invocations_per_minute <= 0.0 {
            return Err(Error::Config(
                "invocations_per_minute must be positive".into(),
            ));
        }
        let s = self.exponent()?;
        let norm = harmonic(self.functions, s);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        let mut functions = Vec::with_capacity(self.functions);
        let mut counts = Vec::with_capacity(self.functions);
        for rank in 1..=self.functions {
            let mean = self.invocations_per_minute * (rank as f64).powf(-s) / norm;
            let poisson = Poisson::new(mean).map_err(|e| Error::Config(e.to_string()))?;
            let row = (0..self.minutes)
                .map(|_| poisson.sample(&mut rng) as u64)
                .collect();
            functions.push(format!("fn{rank:05}"));
            counts.push(row);
        }
        TraceMatrix::new(functions, counts)
    }
}

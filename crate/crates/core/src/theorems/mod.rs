//! Executable checks of the layer's theoretical guarantees.
//!
//! Each verifier samples instances from a seeded generator, evaluates the
//! inequality or identity on each, and reports the worst signed slack.

mod centering;
mod decorrelation;
mod grad_bound;
mod running;
mod scaling;

use std::fmt;
use std::thread;

use crate::diagnostics::DiagError;
use crate::norm::NormError;
use crate::tensor::TensorError;

pub use centering::{
    gaussian_cosine_stats, two_point_cosines, verify_centering_cosine, DistSpec,
    GaussianCosineStats,
};
pub use decorrelation::{
    decorrelation_stats, verify_decorrelation, DecorrelationSetup, DecorrelationStats,
};
pub use grad_bound::{chain_grad_bound_instance, verify_chain_grad_bound, GradBoundInstance};
pub use running::{verify_running_consistency, RunningCheck};
pub use scaling::{lcrms_lipschitz_estimate, verify_scaling_lipschitz};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TheoremError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error("invalid distribution: {0}")]
    InvalidSpec(String),
}

/// Outcome of one verifier.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub id: String,
    pub trials: usize,
    pub failures: usize,
    /// Smallest signed slack seen; negative means a violated check.
    pub worst_margin: f64,
    pub tolerance: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "theorem,trials,failures,worst_margin,tolerance,seed,status";

impl VerificationReport {
    pub fn new(id: impl Into<String>, tolerance: f64, seed: u64) -> Self {
        Self {
            id: id.into(),
            trials: 0,
            failures: 0,
            worst_margin: f64::INFINITY,
            tolerance,
            seed,
        }
    }

    /// Counts one check whose slack is `margin`; it fails when the margin is
    /// negative or NaN.
    pub fn record(&mut self, margin: f64) {
        self.trials += 1;
        if !(margin >= 0.0) {
            self.failures += 1;
        }
        if margin.is_nan() || margin < self.worst_margin {
            self.worst_margin = margin;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials > 0
    }

    /// Folds `other` into `self`, keeping `self`'s id, tolerance and seed.
    pub fn merge(mut self, other: &VerificationReport) -> Self {
        self.trials += other.trials;
        self.failures += other.failures;
        if other.worst_margin.is_nan() || other.worst_margin < self.worst_margin {
            self.worst_margin = other.worst_margin;
        }
        self
    }

    pub fn status(&self) -> &'static str {
        if self.passed() {
            "PASS"
        } else {
            "FAIL"
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.id,
            self.trials,
            self.failures,
            self.worst_margin,
            self.tolerance,
            self.seed,
            self.status()
        )
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {} trials={} failures={} worst_margin={:e} tolerance={:e} seed={}",
            self.id,
            self.status(),
            self.trials,
            self.failures,
            self.worst_margin,
            self.tolerance,
            self.seed
        )
    }
}

/// Default sizes used by [`run_suite`].
pub const SUITE_GRAD_TRIALS: usize = 1000;
pub const SUITE_SIGMA_TRIALS: usize = 1000;
pub const SUITE_LIPSCHITZ_PAIRS: usize = 10_000;
pub const SUITE_COSINE_PAIRS: usize = 100_000;
pub const SUITE_MC_SAMPLES: usize = 100_000;

/// Runs the five verifiers in parallel, each on its own seed derived from
/// `seed`. An error inside a verifier becomes a failed row.
pub fn run_suite(seed: u64) -> Vec<VerificationReport> {
    let seeds: [u64; 5] = std::array::from_fn(|i| {
        let i = i as u64;
        seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    });
    type Job = Box<dyn FnOnce() -> Result<VerificationReport, TheoremError> + Send>;
    let jobs: Vec<(&str, u64, Job)> = vec![
        (
            "centering_cosine",
            seeds[0],
            Box::new(move || centering::suite_report(SUITE_COSINE_PAIRS, seeds[0])),
        ),
        (
            "scaling_lipschitz",
            seeds[1],
            Box::new(move || {
                verify_scaling_lipschitz(SUITE_SIGMA_TRIALS, SUITE_LIPSCHITZ_PAIRS, seeds[1])
            }),
        ),
        (
            "chain_grad_bound",
            seeds[2],
            Box::new(move || verify_chain_grad_bound(SUITE_GRAD_TRIALS, seeds[2])),
        ),
        (
            "decorrelation",
            seeds[3],
            Box::new(move || {
                verify_decorrelation(4, &[0.0, 0.25, 0.5, 0.75, 1.0], SUITE_MC_SAMPLES, seeds[3])
            }),
        ),
        (
            "running_consistency",
            seeds[4],
            Box::new(move || verify_running_consistency(100, seeds[4])),
        ),
    ];
    thread::scope(|s| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(id, job_seed, job)| (id, job_seed, s.spawn(job)))
            .collect();
        handles
            .into_iter()
            .map(|(id, job_seed, h)| match h.join() {
                Ok(Ok(report)) => report,
                _ => {
                    let mut r = VerificationReport::new(id, 0.0, job_seed);
                    r.record(f64::NAN);
                    r
                }
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_bookkeeping() {
        let mut r = VerificationReport::new("x", 1e-9, 7);
        assert!(!r.passed());
        r.record(0.5);
        r.record(0.0);
        assert!(r.passed());
        assert_eq!(r.worst_margin, 0.0);
        let mut bad = VerificationReport::new("y", 1e-9, 7);
        bad.record(-1e-3);
        let merged = r.clone().merge(&bad);
        assert_eq!((merged.trials, merged.failures), (3, 1));
        assert_eq!(merged.worst_margin, -1e-3);
        assert_eq!(merged.csv_row(), "x,3,1,-0.001,0.000000001,7,FAIL");
        let mut nan = VerificationReport::new("z", 0.0, 0);
        nan.record(f64::NAN);
        assert!(!nan.passed());
        assert!(r.to_string().starts_with("x"));
    }
}

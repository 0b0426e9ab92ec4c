//! Per-sample Bernoulli masks lower the cross-channel correlation relative
//! to mixing with the constant `p`.
//!
//! Moments are taken about zero, matching the zero-mean construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{TheoremError, VerificationReport};
use crate::norm::{arms_mix, channel_stats, lcrms_normalize, sample_mask, DEFAULT_EPS};
use crate::tensor::{Graph, Tensor};

const BATCHES: usize = 100;
const ROUNDING: f64 = 1e-12;

/// Two zero-mean Gaussian channels: `Y_i ~ N(0, 1)` and `Y_j` with standard
/// deviation `ratio` and correlation `rho` to `Y_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecorrelationSetup {
    pub rho: f64,
    pub ratio: f64,
}

impl DecorrelationSetup {
    pub const CANONICAL: DecorrelationSetup = DecorrelationSetup {
        rho: 0.8,
        ratio: 0.3,
    };

    fn validate(&self) -> Result<(), TheoremError> {
        if !(self.ratio > 0.0) || !self.ratio.is_finite() || !(self.rho.abs() <= 1.0) {
            return Err(TheoremError::InvalidSpec(format!(
                "degenerate channels: rho {}, ratio {}",
                self.rho, self.ratio
            )));
        }
        Ok(())
    }
}

/// Monte-Carlo estimates for one setup and one `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecorrelationStats {
    pub p: f64,
    pub samples: usize,
    /// `ψ_min/ψ_c` per channel, from the sample.
    pub k: [f64; 2],
    /// Correlation of the raw channels.
    pub rho: f64,
    /// Correlation after the deterministic mix.
    pub rho_det: f64,
    /// Correlation after the stochastic mix.
    pub rho_sto: f64,
    /// `ρ·Π(1 − p + p·k_c) / sqrt(Π(1 − p + p·k_c²))`.
    pub rho_sto_closed: f64,
    /// Standard error of `rho_det − rho_sto` over batch means.
    pub diff_se: f64,
    /// Standard error of `rho_sto` over batch means.
    pub sto_se: f64,
    /// Per channel: mean of `Y′² − (1 − p + p·k)²·Y²` and its standard error.
    pub det_var_gap: [(f64, f64); 2],
    /// Per channel: mean of `Ẏ² − (1 − p + p·k²)·Y²` and its standard error.
    pub sto_var_gap: [(f64, f64); 2],
    /// Mean of `Y²` per channel.
    pub second_moment: [f64; 2],
}

fn corr(x: &[f64], y: &[f64]) -> f64 {
    let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let xx: f64 = x.iter().map(|a| a * a).sum();
    let yy: f64 = y.iter().map(|b| b * b).sum();
    xy / (xx * yy).sqrt()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn columns(t: &Tensor) -> [Vec<f64>; 2] {
    [t.column(0), t.column(1)]
}

pub fn decorrelation_stats(
    setup: DecorrelationSetup,
    p: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<DecorrelationStats, TheoremError> {
    setup.validate()?;
    if samples < 2 * BATCHES {
        return Err(TheoremError::InvalidSpec(format!(
            "{samples} samples is fewer than {}",
            2 * BATCHES
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tail = (1.0 - setup.rho * setup.rho).max(0.0).sqrt();
    let mut data = Vec::with_capacity(2 * samples);
    for _ in 0..samples {
        let a: f64 = normal.sample(rng);
        let z: f64 = normal.sample(rng);
        data.push(a);
        data.push(setup.ratio * (setup.rho * a + tail * z));
    }
    let y = Tensor::new(vec![samples, 2], data)?;
    let stats = channel_stats(&y, DEFAULT_EPS)?;
    let k = [stats.psi_min / stats.psi[0], stats.psi_min / stats.psi[1]];

    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let psi = g.constant(Tensor::new(vec![1, 2], stats.psi.clone())?);
    let psi_min = g.constant(Tensor::scalar(stats.psi_min));
    let y_hat = lcrms_normalize(&mut g, yv, psi, psi_min)?;
    let det = arms_mix(&mut g, yv, y_hat, p, None)?;
    let mask = sample_mask(samples, 2, p, rng)?;
    let sto = arms_mix(&mut g, yv, y_hat, p, Some(&mask))?;

    let raw = columns(&y);
    let det = columns(g.value(det));
    let sto = columns(g.value(sto));

    let rho = corr(&raw[0], &raw[1]);
    let rho_det = corr(&det[0], &det[1]);
    let rho_sto = corr(&sto[0], &sto[1]);
    let lin = |kc: f64| 1.0 - p + p * kc;
    let quad = |kc: f64| 1.0 - p + p * kc * kc;
    let rho_sto_closed = rho * lin(k[0]) * lin(k[1]) / (quad(k[0]) * quad(k[1])).sqrt();

    let per = samples / BATCHES;
    let mut diffs = Vec::with_capacity(BATCHES);
    let mut stos = Vec::with_capacity(BATCHES);
    for b in 0..BATCHES {
        let r = b * per..(b + 1) * per;
        let d = corr(&det[0][r.clone()], &det[1][r.clone()]);
        let s = corr(&sto[0][r.clone()], &sto[1][r]);
        diffs.push(d - s);
        stos.push(s);
    }
    let diff_se = mean_se(&diffs).1;
    let sto_se = mean_se(&stos).1;

    let mut det_var_gap = [(0.0, 0.0); 2];
    let mut sto_var_gap = [(0.0, 0.0); 2];
    let mut second_moment = [0.0; 2];
    for c in 0..2 {
        let (l, q) = (lin(k[c]), quad(k[c]));
        let dg: Vec<f64> = det[c]
            .iter()
            .zip(&raw[c])
            .map(|(v, y)| v * v - l * l * y * y)
            .collect();
        let sg: Vec<f64> = sto[c]
            .iter()
            .zip(&raw[c])
            .map(|(v, y)| v * v - q * y * y)
            .collect();
        det_var_gap[c] = mean_se(&dg);
        sto_var_gap[c] = mean_se(&sg);
        second_moment[c] = raw[c].iter().map(|v| v * v).sum::<f64>() / samples as f64;
    }

    Ok(DecorrelationStats {
        p,
        samples,
        k,
        rho,
        rho_det,
        rho_sto,
        rho_sto_closed,
        diff_se,
        sto_se,
        det_var_gap,
        sto_var_gap,
        second_moment,
    })
}

/// Trial 0 is the canonical construction (ρ = 0.8, ψ_min/ψ_i = 0.3); later
/// trials draw ρ ∈ [0.2, 0.95] and the ratio from [0.1, 0.9].
///
/// For every trial and `p`: `ρ′` equals the raw correlation, and
/// `ρ′ ≥ ρ̇ − 3·SE`, with equality within 3·SE at `p ∈ {0, 1}`. On the
/// canonical construction, additionally: the effect exceeds 3·SE at every
/// interior `p`, `ρ̇` matches its closed form within 3·SE, and both variance
/// identities hold within 3·SE per channel.
pub fn verify_decorrelation(
    trials: usize,
    p_grid: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<VerificationReport, TheoremError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerificationReport::new("decorrelation", 0.0, seed);
    for trial in 0..trials {
        let setup = if trial == 0 {
            DecorrelationSetup::CANONICAL
        } else {
            DecorrelationSetup {
                rho: rng.random_range(0.2..0.95),
                ratio: rng.random_range(0.1..0.9),
            }
        };
        for &p in p_grid {
            let s = decorrelation_stats(setup, p, mc_samples, &mut rng)?;
            let three = 3.0 * s.diff_se;
            if trial == 0 && p == 0.5 {
                report.tolerance = three;
            }
            let gap = s.rho_det - s.rho_sto;
            report.record(ROUNDING - (s.rho_det - s.rho).abs());
            report.record(gap + three);
            let interior = p > 0.0 && p < 1.0;
            if !interior {
                report.record(three - gap.abs());
            }
            if trial == 0 {
                if interior {
                    report.record(gap - three);
                }
                report.record(3.0 * s.sto_se - (s.rho_sto - s.rho_sto_closed).abs());
                for c in 0..2 {
                    let slack = ROUNDING * s.second_moment[c];
                    let (m, se) = s.det_var_gap[c];
                    report.record(3.0 * se + slack - m.abs());
                    let (m, se) = s.sto_var_gap[c];
                    report.record(3.0 * se + slack - m.abs());
                }
            }
        }
    }
    Ok(report)
}

//! Dividing by per-channel σ has Lipschitz constant `1/σ_min`; rescaling by
//! the smallest RMS brings it back to 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use super::{TheoremError, VerificationReport};
use crate::diagnostics::{diagonal_lipschitz, lipschitz_estimate, spectral_norm, DiagError};
use crate::norm::{bn_scale, channel_shape, channel_stats, lcrms_normalize, DEFAULT_EPS};
use crate::tensor::{Graph, Tensor};

const EXACT_TOL: f64 = 1e-12;
const LCRMS_TOL: f64 = 1e-9;

fn diag_matrix(entries: &[f64]) -> Result<Tensor, TheoremError> {
    let d = entries.len();
    let mut data = vec![0.0; d * d];
    for (i, &e) in entries.iter().enumerate() {
        data[i * d + i] = e;
    }
    Ok(Tensor::new(vec![d, d], data)?)
}

fn bn_scale_map(x: &Tensor, sigma: &Tensor, floor: f64) -> Result<Tensor, TheoremError> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let sv = g.constant(sigma.clone());
    let out = bn_scale(&mut g, xv, sv, floor)?;
    Ok(g.value(out).clone())
}

/// Largest sampled `‖f(u) − f(v)‖/‖u − v‖` for the rescaled RMS map with
/// statistics frozen from `batch`, over `pairs` random pairs of batches of
/// the same shape.
pub fn lcrms_lipschitz_estimate(
    batch: &Tensor,
    pairs: usize,
    rng: &mut impl Rng,
) -> Result<f64, TheoremError> {
    let stats = channel_stats(batch, DEFAULT_EPS)?;
    let psi = Tensor::new(
        channel_shape(batch.rank(), stats.psi.len())?,
        stats.psi.clone(),
    )?;
    let shape = batch.shape().to_vec();
    let map = |x: &Tensor| -> Result<Tensor, DiagError> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = g.constant(psi.clone());
        let k = g.constant(Tensor::scalar(stats.psi_min));
        let out = lcrms_normalize(&mut g, xv, pv, k)?;
        Ok(g.value(out).clone())
    };
    let est = lipschitz_estimate(
        map,
        || Tensor::randn(&shape, rng).expect("valid shape"),
        pairs,
    )?;
    Ok(est.estimate)
}

/// For every sampled σ: the SVD operator norm of `diag(1/σ)` and the
/// closed form `1/σ_min` agree within 1e-12, the sampled estimate of the
/// batch-norm scaling never exceeds it, and the argmin basis direction
/// attains it. Then the rescaled RMS map with frozen statistics is checked
/// to stay within `1 + 1e-9` over `pairs` sampled pairs.
pub fn verify_scaling_lipschitz(
    sigma_trials: usize,
    pairs: usize,
    seed: u64,
) -> Result<VerificationReport, TheoremError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerificationReport::new("scaling_lipschitz", EXACT_TOL, seed);
    let floor = DEFAULT_EPS.sqrt();
    let lognormal = LogNormal::new(0.0, 1.0).expect("valid lognormal");
    for trial in 0..sigma_trials {
        let d = rng.random_range(1..=8);
        let sigma: Vec<f64> = match trial {
            0 => vec![1.0; d],
            1 => vec![2.0, 0.5, 1.0],
            _ => (0..d)
                .map(|_| f64::max(lognormal.sample(&mut rng), floor))
                .collect(),
        };
        let d = sigma.len();
        let sigma_min = sigma.iter().copied().fold(f64::INFINITY, f64::min);
        let closed = 1.0 / sigma_min;
        let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();

        report.record(EXACT_TOL - (diagonal_lipschitz(&inv) - closed).abs());
        let svd = spectral_norm(&diag_matrix(&inv)?)?;
        report.record(EXACT_TOL - (svd - closed).abs());

        let sig_t = Tensor::new(vec![1, d], sigma.clone())?;
        let batch = 1 + trial % 4;
        let est = lipschitz_estimate::<TheoremError>(
            |x| bn_scale_map(x, &sig_t, floor),
            || Tensor::randn(&[batch, d], &mut rng).expect("valid shape"),
            8,
        )?;
        report.record(closed * (1.0 + EXACT_TOL) - est.estimate);

        let argmin = sigma
            .iter()
            .position(|&s| s == sigma_min)
            .expect("non-empty");
        let mut basis = vec![0.0; batch * d];
        basis[argmin] = 1.0;
        let zero = Tensor::zeros(&[batch, d])?;
        let e = Tensor::new(vec![batch, d], basis)?;
        let hit = bn_scale_map(&e, &sig_t, floor)?
            .sub(&bn_scale_map(&zero, &sig_t, floor)?)?
            .norm();
        report.record(EXACT_TOL - (hit - closed).abs());
    }

    let shapes: [&[usize]; 3] = [&[8, 4], &[16, 3], &[4, 2, 2, 2]];
    let per_shape = pairs.div_ceil(shapes.len());
    for shape in shapes {
        let batch = Tensor::randn(shape, &mut rng)?.map(|v| v * 2.0 + 0.3);
        let est = lcrms_lipschitz_estimate(&batch, per_shape, &mut rng)?;
        report.record(1.0 + LCRMS_TOL - est);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        let inv: Vec<f64> = [2.0, 0.5, 1.0].iter().map(|s| 1.0 / s).collect();
        assert_eq!(diagonal_lipschitz(&inv), 2.0);
        assert_eq!(diagonal_lipschitz(&[1.0; 4]), 1.0);
    }

    #[test]
    fn small_suite_passes() {
        let r = verify_scaling_lipschitz(50, 300, 5).unwrap();
        assert!(r.passed(), "{r}");
    }
}

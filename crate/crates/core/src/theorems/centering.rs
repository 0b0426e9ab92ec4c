//! Centering drives the expected cosine similarity of i.i.d. features to 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{TheoremError, VerificationReport};

/// Distributions symmetric about their mean.
#[derive(Debug, Clone, PartialEq)]
pub enum DistSpec {
    /// `P(v) = weight_v`, `P(w) = 1 − weight_v`. Symmetric only at 1/2.
    TwoPoint {
        v: Vec<f64>,
        w: Vec<f64>,
        weight_v: f64,
    },
    /// Fresh `v` and `μ` per trial, with `w = 2μ − v`.
    RandomTwoPoint { dim: usize },
    /// `N(μ, std²·I)`, estimated from `pairs` independent pairs.
    Gaussian {
        mu: Vec<f64>,
        std: f64,
        pairs: usize,
    },
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Expected cosine of two i.i.d. draws from the uniform two-point law on
/// `{v, w}`, before and after centering, by enumerating the 4 ordered
/// pairs. After centering the support is `±(v − w)/2`.
pub fn two_point_cosines(v: &[f64], w: &[f64]) -> (f64, f64) {
    let pts = [v, w];
    let half: Vec<f64> = v.iter().zip(w).map(|(a, b)| (a - b) / 2.0).collect();
    let neg: Vec<f64> = half.iter().map(|x| -x).collect();
    let centered = [&half[..], &neg[..]];
    let mut raw = 0.0;
    let mut cen = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            raw += 0.25 * cosine(pts[i], pts[j]);
            cen += 0.25 * cosine(centered[i], centered[j]);
        }
    }
    (raw, cen)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianCosineStats {
    pub pairs: usize,
    pub uncentered_mean: f64,
    pub uncentered_se: f64,
    pub centered_mean: f64,
    pub centered_se: f64,
    /// Standard error of the paired difference uncentered − centered.
    pub diff_se: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo mean cosine of i.i.d. pairs from `N(μ, std²·I)`, raw and
/// after subtracting `μ`.
pub fn gaussian_cosine_stats(
    mu: &[f64],
    std: f64,
    pairs: usize,
    rng: &mut impl Rng,
) -> Result<GaussianCosineStats, TheoremError> {
    if mu.is_empty() || !(std > 0.0) || pairs < 2 {
        return Err(TheoremError::InvalidSpec(format!(
            "gaussian with dim {}, std {std}, {pairs} pairs",
            mu.len()
        )));
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    let d = mu.len();
    let mut raw = Vec::with_capacity(pairs);
    let mut cen = Vec::with_capacity(pairs);
    let mut diff = Vec::with_capacity(pairs);
    let (mut e1, mut e2) = (vec![0.0; d], vec![0.0; d]);
    let (mut y1, mut y2) = (vec![0.0; d], vec![0.0; d]);
    for _ in 0..pairs {
        for k in 0..d {
            e1[k] = normal.sample(rng);
            e2[k] = normal.sample(rng);
            y1[k] = mu[k] + e1[k];
            y2[k] = mu[k] + e2[k];
        }
        let (r, c) = (cosine(&y1, &y2), cosine(&e1, &e2));
        raw.push(r);
        cen.push(c);
        diff.push(r - c);
    }
    let (uncentered_mean, uncentered_se) = mean_se(&raw);
    let (centered_mean, centered_se) = mean_se(&cen);
    let (_, diff_se) = mean_se(&diff);
    Ok(GaussianCosineStats {
        pairs,
        uncentered_mean,
        uncentered_se,
        centered_mean,
        centered_se,
        diff_se,
    })
}

/// Two-point laws must put the centered expectation at exactly 0 and keep
/// the raw expectation at least as large. Gaussian laws must put the
/// centered mean within 3 standard errors of 0 and the raw mean no lower
/// than 3 standard errors below it; with a non-zero mean the raw mean must
/// also exceed the centered one by more than 10 standard errors.
pub fn verify_centering_cosine(
    spec: &DistSpec,
    trials: usize,
    seed: u64,
) -> Result<VerificationReport, TheoremError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerificationReport::new("centering_cosine", 0.0, seed);
    match spec {
        DistSpec::TwoPoint { v, w, weight_v } => {
            if v.len() != w.len() || v.is_empty() {
                return Err(TheoremError::InvalidSpec(
                    "two points of different dimension".into(),
                ));
            }
            if *weight_v != 0.5 {
                return Err(TheoremError::InvalidSpec(format!(
                    "two-point law with weight {weight_v} is not symmetric about its mean"
                )));
            }
            for _ in 0..trials.max(1) {
                check_two_point(&mut report, v, w);
            }
        }
        DistSpec::RandomTwoPoint { dim } => {
            if *dim == 0 {
                return Err(TheoremError::InvalidSpec("dimension 0".into()));
            }
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for _ in 0..trials {
                let scale = rng.random_range(0.1..10.0);
                let v: Vec<f64> = (0..*dim).map(|_| scale * normal.sample(&mut rng)).collect();
                let mu: Vec<f64> = (0..*dim).map(|_| scale * normal.sample(&mut rng)).collect();
                let w: Vec<f64> = v.iter().zip(&mu).map(|(v, m)| 2.0 * m - v).collect();
                check_two_point(&mut report, &v, &w);
            }
        }
        DistSpec::Gaussian { mu, std, pairs } => {
            let separated = mu.iter().any(|&m| m != 0.0);
            for _ in 0..trials.max(1) {
                let s = gaussian_cosine_stats(mu, *std, *pairs, &mut rng)?;
                report.tolerance = 3.0 * s.centered_se;
                report.record(3.0 * s.centered_se - s.centered_mean.abs());
                report.record(s.uncentered_mean - s.centered_mean + 3.0 * s.diff_se);
                if separated {
                    report.record(s.uncentered_mean - s.centered_mean - 10.0 * s.diff_se);
                }
            }
        }
    }
    Ok(report)
}

fn check_two_point(report: &mut VerificationReport, v: &[f64], w: &[f64]) {
    let (raw, cen) = two_point_cosines(v, w);
    report.record(if cen == 0.0 { 0.0 } else { -cen.abs() });
    report.record(raw - cen);
}

/// The suite row: random two-point laws, an offset Gaussian and a centered
/// Gaussian.
pub(super) fn suite_report(pairs: usize, seed: u64) -> Result<VerificationReport, TheoremError> {
    let mut mu = vec![0.0; 16];
    mu[0] = 5.0;
    let two = verify_centering_cosine(&DistSpec::RandomTwoPoint { dim: 16 }, 1000, seed)?;
    let offset = verify_centering_cosine(
        &DistSpec::Gaussian {
            mu,
            std: 1.0,
            pairs,
        },
        1,
        seed ^ 1,
    )?;
    let centered = verify_centering_cosine(
        &DistSpec::Gaussian {
            mu: vec![0.0; 16],
            std: 1.0,
            pairs,
        },
        1,
        seed ^ 2,
    )?;
    let mut report = two.merge(&offset).merge(&centered);
    report.tolerance = offset.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_enumeration_is_exactly_zero() {
        let (raw, cen) = two_point_cosines(&[3.0, 1.0], &[1.0, 1.0]);
        assert_eq!(cen, 0.0);
        assert!(raw > 0.9);
        let r = verify_centering_cosine(&DistSpec::RandomTwoPoint { dim: 5 }, 200, 3).unwrap();
        assert!(r.passed());
        assert_eq!(r.worst_margin, 0.0);
    }

    #[test]
    fn asymmetric_specs_are_rejected() {
        let spec = DistSpec::TwoPoint {
            v: vec![1.0],
            w: vec![2.0],
            weight_v: 0.7,
        };
        assert!(matches!(
            verify_centering_cosine(&spec, 1, 0),
            Err(TheoremError::InvalidSpec(_))
        ));
        let spec = DistSpec::Gaussian {
            mu: vec![0.0; 3],
            std: 0.0,
            pairs: 10,
        };
        assert!(verify_centering_cosine(&spec, 1, 0).is_err());
    }

    #[test]
    fn centered_gaussian_has_no_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = gaussian_cosine_stats(&[0.0; 16], 1.0, 20_000, &mut rng).unwrap();
        assert!(s.uncentered_mean.abs() <= 3.0 * s.uncentered_se);
        assert_eq!(s.diff_se, 0.0);
    }
}

//! The expected backward of the mixed layer shrinks feature and weight
//! gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TheoremError, VerificationReport};
use crate::diagnostics::spectral_norm;
use crate::norm::{channel_stats, DEFAULT_EPS};
use crate::tensor::{Graph, Tensor, Var};

const TOL: f64 = 1e-9;

/// Slacks of both inequalities on one sampled instance, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBoundInstance {
    pub batch: usize,
    pub channels: usize,
    pub p: f64,
    /// `bound − ‖Δy_c‖²` for the feature-gradient inequality.
    pub feature_slack: Vec<f64>,
    /// `s_max²·‖Δy_c‖² − ‖Δw_c‖²`.
    pub weight_slack: Vec<f64>,
    /// Largest gap between the closed-form and autodiff input gradients.
    pub formula_gap: f64,
    /// Largest gap between `AᵀΔy` and the autodiff weight gradient.
    pub weight_gap: f64,
}

/// Closed-form input gradient of `(1 − p)·Y + p·ψ_min·Y/ψ` for upstream
/// `grad`, with `ψ_min` constant.
fn formula_grad(y_check: &Tensor, grad: &Tensor, psi: &[f64], psi_min: f64, p: f64) -> Tensor {
    let (b, d) = (y_check.rows(), y_check.cols());
    let mut out = vec![0.0; b * d];
    for c in 0..d {
        let proj: f64 = (0..b)
            .map(|i| grad.at2(i, c) * y_check.at2(i, c))
            .sum::<f64>()
            / b as f64;
        let k = ((1.0 - p) * psi[c] + p * psi_min) / psi[c];
        for i in 0..b {
            out[i * d + c] = grad.at2(i, c) * k - p * (psi_min / psi[c]) * y_check.at2(i, c) * proj;
        }
    }
    Tensor::new(vec![b, d], out).expect("shape matches")
}

fn mixed_loss(
    g: &mut Graph,
    y: Var,
    upstream: &Tensor,
    p: f64,
    psi_min: f64,
) -> Result<Var, TheoremError> {
    let sq = g.square(y)?;
    let ms = g.mean(sq, &[0], true)?;
    let ms = g.add_scalar(ms, DEFAULT_EPS)?;
    let psi = g.sqrt(ms)?;
    let checked = g.div(y, psi)?;
    let normed = g.mul_scalar(checked, p * psi_min)?;
    let raw = g.mul_scalar(y, 1.0 - p)?;
    let out = g.add(raw, normed)?;
    let up = g.constant(upstream.clone());
    let prod = g.mul(out, up)?;
    Ok(g.sum_all(prod)?)
}

/// Builds `Y = A·W`, runs the deterministic mix with `ψ_min` frozen on a
/// graph, and evaluates both inequalities per channel.
pub fn chain_grad_bound_instance(
    a: &Tensor,
    w: &Tensor,
    upstream: &Tensor,
    p: f64,
) -> Result<GradBoundInstance, TheoremError> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let wv = g.param(w.clone());
    let y = g.matmul(av, wv)?;
    let yval = g.value(y).clone();
    let (b, d) = (yval.rows(), yval.cols());
    let stats = channel_stats(&yval, DEFAULT_EPS)?;

    let loss = mixed_loss(&mut g, y, upstream, p, stats.psi_min)?;
    let dw_auto = g.backward(loss)?.get(wv).cloned().expect("weight gradient");

    let mut gy = Graph::new();
    let yv = gy.param(yval.clone());
    let loss = mixed_loss(&mut gy, yv, upstream, p, stats.psi_min)?;
    let dy_auto = gy
        .backward(loss)?
        .get(yv)
        .cloned()
        .expect("feature gradient");

    let psi_t = Tensor::new(vec![1, d], stats.psi.clone())?;
    let y_check = yval.div(&psi_t)?;
    let dy = formula_grad(&y_check, upstream, &stats.psi, stats.psi_min, p);
    let formula_gap = dy.max_abs_diff(&dy_auto);
    let dw = a.transpose()?.matmul(&dy)?;
    let weight_gap = dw.max_abs_diff(&dw_auto);

    let s_max = spectral_norm(a)?;
    let mut feature_slack = Vec::with_capacity(d);
    let mut weight_slack = Vec::with_capacity(d);
    for c in 0..d {
        let dy_c = dy.column(c);
        let up_c = upstream.column(c);
        let yc_c = y_check.column(c);
        let dy_sq: f64 = dy_c.iter().map(|v| v * v).sum();
        let up_sq: f64 = up_c.iter().map(|v| v * v).sum();
        let proj: f64 = up_c.iter().zip(&yc_c).map(|(u, y)| u * y).sum();
        let k = ((1.0 - p) * stats.psi[c] + p * stats.psi_min) / stats.psi[c];
        let bound = up_sq * k * k
            - 2.0 * (1.0 - p) * p * stats.psi_min / (b as f64 * stats.psi[c]) * proj * proj;
        feature_slack.push(bound - dy_sq);
        let dw_sq: f64 = dw.column(c).iter().map(|v| v * v).sum();
        weight_slack.push(s_max * s_max * dy_sq - dw_sq);
    }
    Ok(GradBoundInstance {
        batch: b,
        channels: d,
        p,
        feature_slack,
        weight_slack,
        formula_gap,
        weight_gap,
    })
}

/// `trials` random instances with B ∈ [2, 16], d ∈ [1, 8], p ∈ [0, 1]. The
/// first two trials pin p = 0 and p = 1 with a single channel.
pub fn verify_chain_grad_bound(
    trials: usize,
    seed: u64,
) -> Result<VerificationReport, TheoremError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerificationReport::new("chain_grad_bound", TOL, seed);
    for trial in 0..trials {
        let b = rng.random_range(2..=16);
        let (d, p) = match trial {
            0 => (1, 0.0),
            1 => (1, 1.0),
            _ => (rng.random_range(1..=8), rng.random_range(0.0..=1.0)),
        };
        let m = rng.random_range(1..=8);
        let a = Tensor::randn(&[b, m], &mut rng)?.map(|v| v * rng_scale(trial));
        let w = Tensor::randn(&[m, d], &mut rng)?;
        let upstream = Tensor::randn(&[b, d], &mut rng)?;
        let inst = chain_grad_bound_instance(&a, &w, &upstream, p)?;
        for c in 0..d {
            report.record(inst.feature_slack[c] + TOL);
            report.record(inst.weight_slack[c] + TOL);
        }
        report.record(TOL - inst.formula_gap);
        report.record(TOL - inst.weight_gap);
    }
    Ok(report)
}

fn rng_scale(trial: usize) -> f64 {
    [1.0, 0.1, 3.0, 0.5][trial % 4]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_layer_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[5, 3], &mut rng).unwrap();
        let w = Tensor::randn(&[3, 2], &mut rng).unwrap();
        let up = Tensor::randn(&[5, 2], &mut rng).unwrap();
        let inst = chain_grad_bound_instance(&a, &w, &up, 0.0).unwrap();
        assert!(inst.feature_slack.iter().all(|s| s.abs() < 1e-12));
        assert!(inst.formula_gap < 1e-12);
    }

    #[test]
    fn single_channel_full_mix_is_a_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[6, 2], &mut rng).unwrap();
        let w = Tensor::randn(&[2, 1], &mut rng).unwrap();
        let up = Tensor::randn(&[6, 1], &mut rng).unwrap();
        let inst = chain_grad_bound_instance(&a, &w, &up, 1.0).unwrap();
        let up_sq: f64 = up.data().iter().map(|v| v * v).sum();
        // p = 1, ψ_min = ψ: bound is ‖Δẏ‖², and Δy is Δẏ minus a projection
        assert!(inst.feature_slack[0] >= -1e-12);
        assert!(inst.feature_slack[0] <= up_sq + 1e-12);
    }

    #[test]
    fn random_instances_hold() {
        let r = verify_chain_grad_bound(200, 9).unwrap();
        assert!(r.passed(), "{r}");
    }
}

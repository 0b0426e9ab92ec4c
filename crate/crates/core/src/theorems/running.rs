//! Running statistics reduce to batch statistics without memory, and
//! converge geometrically on a repeated batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TheoremError, VerificationReport};
use crate::norm::{
    chain_layer_forward, channel_shape, channel_stats, lcrms_normalize, rmsnorm_running_backward,
    stats_vars, Frozen, LayerContext, NormParams, NormState, Pass, StatsMode, Variant,
};
use crate::tensor::{Graph, Tensor};

const TOL: f64 = 1e-9;
const CONVERGENCE_STEPS: usize = 200;

/// Gaps measured on one random batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningCheck {
    pub shape: Vec<usize>,
    pub p: f64,
    /// Running vs batch layer output, memoryless statistics.
    pub forward_gap: f64,
    /// Running vs batch input gradient through the layer.
    pub input_grad_gap: f64,
    /// Closed-form running backward vs autodiff of the batch op.
    pub backward_gap: f64,
    /// `0.9^T·|ψ̄²₀ − ψ²| + 1e-12·ψ² − |ψ̄²_T − ψ²|`, smallest over channels.
    pub convergence_slack: f64,
    /// Running backward with a zero upstream gradient vs `−Y̌·decay·Ψ̄₀/ψ̄`.
    pub zero_grad_gap: f64,
}

fn random_shape(rng: &mut impl Rng) -> Vec<usize> {
    let d = rng.random_range(1..=6);
    if rng.random_bool(0.5) {
        vec![rng.random_range(2..=12), d]
    } else {
        vec![
            rng.random_range(1..=4),
            d,
            rng.random_range(1..=3),
            rng.random_range(2..=3),
        ]
    }
}

fn layer_pass(
    y: &Tensor,
    head: &Tensor,
    state: &mut NormState,
    frozen: Option<&Frozen>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Frozen), TheoremError> {
    let mut g = Graph::new();
    let yv = g.param(y.clone());
    let mut ctx = LayerContext::train(Pass::Real, rng);
    if let Some(f) = frozen {
        ctx = ctx.with_frozen(f);
    }
    let out = chain_layer_forward(&mut g, yv, state, ctx)?;
    let hv = g.constant(head.clone());
    let prod = g.mul(out.out, hv)?;
    let mut loss = g.sum_all(prod)?;
    if let Some(reg) = out.reg {
        loss = g.add(loss, reg)?;
    }
    let value = g.value(out.out).clone();
    let grad = g.backward(loss)?.get(yv).cloned().expect("input gradient");
    Ok((value, grad, out.trace))
}

fn autodiff_batch_rms(y: &Tensor, grad_out: &Tensor, scale: f64) -> Result<Tensor, TheoremError> {
    let mut g = Graph::new();
    let yv = g.param(y.clone());
    let s = stats_vars(&mut g, yv, crate::norm::DEFAULT_EPS)?;
    let k = g.constant(Tensor::scalar(scale));
    let out = lcrms_normalize(&mut g, yv, s.psi, k)?;
    let up = g.constant(grad_out.clone());
    let prod = g.mul(out, up)?;
    let loss = g.sum_all(prod)?;
    Ok(g.backward(loss)?.get(yv).cloned().expect("input gradient"))
}

/// Runs every comparison on one random batch drawn from `rng`.
pub fn running_check(rng: &mut ChaCha8Rng) -> Result<RunningCheck, TheoremError> {
    let shape = random_shape(rng);
    let d = shape[1];
    let p = rng.random_range(0.0..=1.0);
    let y = Tensor::randn(&shape, rng)?.map(|v| 1.5 * v + 0.2);
    let head = Tensor::randn(&shape, rng)?;

    let memoryless = NormParams {
        decay: 0.0,
        ..NormParams::default()
    };
    let mut running =
        NormState::new(Variant::Chain, d, memoryless)?.with_mode(StatsMode::Running)?;
    let mut batch = NormState::new(Variant::Chain, d, memoryless)?.with_mode(StatsMode::Batch)?;
    running.set_p(p);
    batch.set_p(p);
    let (out_r, grad_r, trace) = layer_pass(&y, &head, &mut running, None, rng)?;
    let shared = Frozen {
        mask: trace.mask,
        scale: None,
    };
    let (out_b, grad_b, _) = layer_pass(&y, &head, &mut batch, Some(&shared), rng)?;
    let forward_gap = out_r.max_abs_diff(&out_b);
    let input_grad_gap = grad_r.max_abs_diff(&grad_b);

    let stats = channel_stats(&y, crate::norm::DEFAULT_EPS)?;
    let cshape = channel_shape(shape.len(), d)?;
    let psi_t = Tensor::new(cshape.clone(), stats.psi.clone())?;
    let y_check = y.div(&psi_t)?;
    let mut grad_stat = vec![0.0; d];
    let closed = rmsnorm_running_backward(
        &head,
        &y_check,
        &stats.psi,
        stats.psi_min,
        &mut grad_stat,
        0.0,
    )?;
    let backward_gap = closed.max_abs_diff(&autodiff_batch_rms(&y, &head, stats.psi_min)?);

    let mut conv =
        NormState::new(Variant::Chain, d, NormParams::default())?.with_mode(StatsMode::Running)?;
    let init: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..5.0)).collect();
    conv.set_running_psi_sqr(init.clone())?;
    for _ in 0..CONVERGENCE_STEPS {
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        chain_layer_forward(&mut g, yv, &mut conv, LayerContext::train(Pass::Real, rng))?;
    }
    let decay = conv.params.decay;
    let factor = decay.powi(CONVERGENCE_STEPS as i32);
    let convergence_slack = (0..d)
        .map(|c| {
            let target = stats.psi[c] * stats.psi[c] - crate::norm::DEFAULT_EPS;
            factor * (init[c] - target).abs() + 1e-12 * target
                - (conv.running_psi_sqr()[c] - target).abs()
        })
        .fold(f64::INFINITY, f64::min);

    let history: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut stat = history.clone();
    let zero = Tensor::zeros(&shape)?;
    let got =
        rmsnorm_running_backward(&zero, &y_check, &stats.psi, stats.psi_min, &mut stat, decay)?;
    let scaled: Vec<f64> = history
        .iter()
        .zip(&stats.psi)
        .map(|(h, s)| -decay * h / s)
        .collect();
    let expected = y_check.mul(&Tensor::new(cshape, scaled)?)?;
    let zero_grad_gap = got.max_abs_diff(&expected);

    Ok(RunningCheck {
        shape,
        p,
        forward_gap,
        input_grad_gap,
        backward_gap,
        convergence_slack,
        zero_grad_gap,
    })
}

/// `trials` random batches; every gap must stay within 1e-9 and every
/// channel must contract at least geometrically.
pub fn verify_running_consistency(
    trials: usize,
    seed: u64,
) -> Result<VerificationReport, TheoremError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerificationReport::new("running_consistency", TOL, seed);
    for _ in 0..trials {
        let c = running_check(&mut rng)?;
        report.record(TOL - c.forward_gap);
        report.record(TOL - c.input_grad_gap);
        report.record(TOL - c.backward_gap);
        report.record(c.convergence_slack);
        report.record(TOL - c.zero_grad_gap);
    }
    Ok(report)
}

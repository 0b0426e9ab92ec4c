//! Layer backward rules against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_grad, DiagError};
use crate::norm::{
    chain_layer_forward, Frozen, LayerContext, NormParams, NormState, Pass, StatsMode, Variant,
};
use crate::tensor::{Graph, Tensor};

const H: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let denom = a.norm().max(b.norm());
    if denom == 0.0 {
        return 0.0;
    }
    a.sub(b).map_or(f64::INFINITY, |d| d.norm() / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub variant: Variant,
    pub mode: StatsMode,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub failures: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Instance {
    y: Tensor,
    head: Tensor,
    state: NormState,
}

fn sample_instance(
    variant: Variant,
    mode: StatsMode,
    rng: &mut ChaCha8Rng,
) -> Result<Instance, DiagError> {
    // At least 3 values per channel statistic: with 2, batch norm maps every
    // input to ±1 and its gradient sits below what central differences resolve.
    let shape = loop {
        let shape = if rng.random_bool(0.5) {
            vec![rng.random_range(2..=6), rng.random_range(1..=4)]
        } else {
            vec![
                rng.random_range(2..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=2),
                rng.random_range(1..=2),
            ]
        };
        if shape.iter().product::<usize>() / shape[1] >= 3 {
            break shape;
        }
    };
    let scale = rng.random_range(0.5..3.0);
    let offset = rng.random_range(-1.0..1.0);
    let y = Tensor::randn(&shape, rng)?.map(|v| v * scale + offset);
    let head = Tensor::randn(&shape, rng)?;
    let params = NormParams {
        decay: 0.0,
        ..NormParams::default()
    };
    let mut state = NormState::new(variant, shape[1], params)?.with_mode(mode)?;
    state.set_p(rng.random_range(0.0..=1.0));
    Ok(Instance { y, head, state })
}

/// `Σ head ⊙ out + ½ Σ out² + penalty` for a fresh copy of the state.
fn objective(
    inst: &Instance,
    y: &Tensor,
    frozen: Option<&Frozen>,
    rng: &mut ChaCha8Rng,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>, Frozen), DiagError> {
    let mut state = inst.state.clone();
    let mut g = Graph::new();
    let yv = if want_grad {
        g.param(y.clone())
    } else {
        g.constant(y.clone())
    };
    let mut ctx = LayerContext::train(Pass::Real, rng);
    if let Some(f) = frozen {
        ctx = ctx.with_frozen(f);
    }
    let lo = chain_layer_forward(&mut g, yv, &mut state, ctx)?;
    let head = g.constant(inst.head.clone());
    let lin = g.mul(head, lo.out)?;
    let lin = g.sum_all(lin)?;
    let sq = g.square(lo.out)?;
    let sq = g.sum_all(sq)?;
    let sq = g.mul_scalar(sq, 0.5)?;
    let mut total = g.add(lin, sq)?;
    if let Some(reg) = lo.reg {
        total = g.add(total, reg)?;
    }
    let value = g.value(total).item()?;
    let grad = if want_grad {
        g.backward(total)?.get(yv).cloned()
    } else {
        None
    };
    Ok((value, grad, lo.trace))
}

/// Checks `instances` random layers of one variant and mode. Running mode
/// uses decay 0, so every forward sees exactly its own batch statistics.
pub fn gradcheck_variant(
    variant: Variant,
    mode: StatsMode,
    instances: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradcheckReport, DiagError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..instances {
        let inst = sample_instance(variant, mode, &mut rng)?;
        let (_, grad, trace) = objective(&inst, &inst.y, None, &mut rng, true)?;
        let analytic = match grad {
            Some(g) => g,
            None => Tensor::zeros(inst.y.shape())?,
        };
        let numeric = finite_diff_grad(
            |y| objective(&inst, y, Some(&trace), &mut rng, false).map(|r| r.0),
            &inst.y,
            H,
        )?;
        let err = rel_err(&analytic, &numeric);
        worst = worst.max(err);
        if !(err <= tolerance) {
            failures += 1;
        }
    }
    Ok(GradcheckReport {
        variant,
        mode,
        instances,
        worst_rel_err: worst,
        failures,
        tolerance,
    })
}

/// Every variant in its default mode, plus running mode for batch-default
/// variants that support it and batch mode for running-default ones.
pub fn gradcheck_all(
    instances: usize,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<GradcheckReport>, DiagError> {
    let mut reports = Vec::new();
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let mut modes = vec![StatsMode::Batch];
        if variant.supports_running() {
            modes.push(StatsMode::Running);
        }
        for (j, mode) in modes.into_iter().enumerate() {
            let s = seed ^ ((i as u64) << 8 | j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            reports.push(gradcheck_variant(variant, mode, instances, tolerance, s)?);
        }
    }
    Ok(reports)
}

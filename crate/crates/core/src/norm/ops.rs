//! Building blocks of the normalization layers.

use rand::Rng;

use super::{channel_shape, norm_axes, NormError, NormState};
use crate::tensor::{sign, CustomOp, Graph, Tensor, TensorError, Var};

/// Per-channel mean and RMS of a B×d or B×d×H×W batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    /// `sqrt(mean(Y²) + ε)` per channel, never below `sqrt(ε)`.
    pub psi: Vec<f64>,
    /// Smallest entry of `psi`; a constant for differentiation purposes.
    pub psi_min: f64,
}

impl ChannelStats {
    /// Index of the smallest RMS, lowest channel on ties.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (c, &v) in self.psi.iter().enumerate() {
            if v < self.psi[best] {
                best = c;
            }
        }
        best
    }
}

fn check_input(y: &Tensor) -> Result<(&'static [usize], usize), NormError> {
    let axes = norm_axes(y.rank())?;
    Ok((axes, y.shape()[1]))
}

pub fn channel_stats(y: &Tensor, eps: f64) -> Result<ChannelStats, NormError> {
    let (axes, _) = check_input(y)?;
    if y.is_empty() {
        return Err(NormError::EmptyBatch);
    }
    let mu = y.mean_axes(axes, false)?.into_data();
    let psi: Vec<f64> = y
        .map(|v| v * v)
        .mean_axes(axes, false)?
        .into_data()
        .into_iter()
        .map(|m| (m + eps).sqrt())
        .collect();
    let psi_min = psi.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ChannelStats { mu, psi, psi_min })
}

/// Channel statistics recorded on a graph. `psi` is differentiable,
/// `psi_min` is detached.
#[derive(Debug, Clone, Copy)]
pub struct StatsVars {
    pub mu: Var,
    pub psi: Var,
    pub psi_min: Var,
}

pub fn stats_vars(g: &mut Graph, y: Var, eps: f64) -> Result<StatsVars, NormError> {
    let (axes, _) = check_input(g.value(y))?;
    let mu = g.mean(y, axes, true)?;
    let sq = g.square(y)?;
    let ms = g.mean(sq, axes, true)?;
    let shifted = g.add_scalar(ms, eps)?;
    let psi = g.sqrt(shifted)?;
    let min = g.min_all(psi)?;
    let psi_min = g.detach(min);
    Ok(StatsVars { mu, psi, psi_min })
}

fn check_channel_var(g: &Graph, y: Var, stat: Var) -> Result<(), NormError> {
    let yv = g.value(y);
    let expected = channel_shape(yv.rank(), yv.shape()[1])?;
    if g.value(stat).shape() != expected.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "channel statistic",
            lhs: yv.shape().to_vec(),
            rhs: g.value(stat).shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `Y − μ` with `μ` broadcast per channel.
pub fn bn_center(g: &mut Graph, y: Var, mu: Var) -> Result<Var, NormError> {
    check_channel_var(g, y, mu)?;
    Ok(g.sub(y, mu)?)
}

/// Divides each channel by its standard deviation. Every `σ_c` must be at
/// least `floor`.
pub fn bn_scale(g: &mut Graph, y_centered: Var, sigma: Var, floor: f64) -> Result<Var, NormError> {
    check_channel_var(g, y_centered, sigma)?;
    for (channel, &s) in g.value(sigma).data().iter().enumerate() {
        if !(s >= floor) {
            return Err(NormError::SigmaBelowFloor {
                channel,
                sigma: s,
                floor,
            });
        }
    }
    Ok(g.div(y_centered, sigma)?)
}

/// `λ·p·‖μ‖²` over the channel means of `y`.
pub fn zero_mean_reg(g: &mut Graph, y: Var, p: f64, lambda: f64) -> Result<Var, NormError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NormError::InvalidParameter {
            name: "p",
            value: p,
        });
    }
    if !(lambda >= 0.0) {
        return Err(NormError::InvalidParameter {
            name: "lambda",
            value: lambda,
        });
    }
    let (axes, _) = check_input(g.value(y))?;
    let mu = g.mean(y, axes, false)?;
    let sq = g.square(mu)?;
    let total = g.sum_all(sq)?;
    Ok(g.mul_scalar(total, lambda * p)?)
}

/// `(Y/ψ)·ψ_min`. The caller passes a detached `psi_min`, or a constant.
pub fn lcrms_normalize(g: &mut Graph, y: Var, psi: Var, psi_min: Var) -> Result<Var, NormError> {
    check_channel_var(g, y, psi)?;
    let checked = g.div(y, psi)?;
    Ok(g.mul(checked, psi_min)?)
}

/// Bernoulli mask over (sample, channel) pairs, shared across spatial axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Tensor,
}

impl Mask {
    pub fn from_tensor(values: Tensor) -> Result<Self, NormError> {
        if values.rank() != 2 || values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(NormError::InvalidParameter {
                name: "mask",
                value: f64::NAN,
            });
        }
        Ok(Self { values })
    }

    /// The B×d zero/one matrix.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.mean()
    }

    /// Mask shaped to broadcast against an input of `rank`.
    pub fn expanded(&self, rank: usize) -> Result<Tensor, NormError> {
        let (b, d) = (self.values.rows(), self.values.cols());
        match rank {
            2 => Ok(self.values.clone()),
            4 => Ok(self.values.reshape(&[b, d, 1, 1])?),
            r => Err(NormError::UnsupportedRank(r)),
        }
    }
}

pub fn sample_mask<R: Rng + ?Sized>(
    batch: usize,
    channels: usize,
    p: f64,
    rng: &mut R,
) -> Result<Mask, NormError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NormError::InvalidParameter {
            name: "p",
            value: p,
        });
    }
    let data = (0..batch * channels)
        .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    Ok(Mask {
        values: Tensor::new(vec![batch, channels], data)?,
    })
}

/// Mixes raw features `y` with normalized features `y_hat`: per mask entry
/// when `mask` is given, otherwise with the fixed weight `p`.
pub fn arms_mix(
    g: &mut Graph,
    y: Var,
    y_hat: Var,
    p: f64,
    mask: Option<&Mask>,
) -> Result<Var, NormError> {
    match mask {
        Some(mask) => {
            let m = mask.expanded(g.value(y).rank())?;
            let keep = g.constant(m.map(|v| 1.0 - v));
            let take = g.constant(m);
            let raw = g.mul(keep, y)?;
            let normed = g.mul(take, y_hat)?;
            Ok(g.add(raw, normed)?)
        }
        None => {
            let raw = g.mul_scalar(y, 1.0 - p)?;
            let normed = g.mul_scalar(y_hat, p)?;
            Ok(g.add(raw, normed)?)
        }
    }
}

/// Adaptive RMS normalization with batch statistics. Returns the output and
/// the mask that was drawn in stochastic mode.
pub fn arms_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    y: Var,
    stats: &StatsVars,
    p: f64,
    mode: super::MaskMode,
    rng: &mut R,
) -> Result<(Var, Option<Mask>), NormError> {
    let y_hat = lcrms_normalize(g, y, stats.psi, stats.psi_min)?;
    match mode {
        super::MaskMode::Deterministic => Ok((arms_mix(g, y, y_hat, p, None)?, None)),
        super::MaskMode::Stochastic => {
            let shape = g.value(y).shape().to_vec();
            let mask = sample_mask(shape[0], shape[1], p, rng)?;
            let out = arms_mix(g, y, y_hat, p, Some(&mask))?;
            Ok((out, Some(mask)))
        }
    }
}

/// `decay·old + (1 − decay)·new`, elementwise.
pub fn update_running_stat(old: &[f64], new: &[f64], decay: f64) -> Vec<f64> {
    debug_assert_eq!(old.len(), new.len());
    old.iter()
        .zip(new)
        .map(|(o, n)| o * decay + n * (1.0 - decay))
        .collect()
}

/// Backward of RMS normalization with running statistics.
///
/// `y_check = Y/ψ̄` was saved in the forward pass and `scale` is the factor
/// applied after it (`ψ_min`, or 1 without the Lipschitz rescaling). The
/// running backward statistic is folded with this batch's value before it
/// is used.
pub fn rmsnorm_running_backward(
    grad_out: &Tensor,
    y_check: &Tensor,
    running_psi: &[f64],
    scale: f64,
    running_grad_stat: &mut [f64],
    decay: f64,
) -> Result<Tensor, NormError> {
    if grad_out.shape() != y_check.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "rmsnorm_running_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: y_check.shape().to_vec(),
        }
        .into());
    }
    let (axes, channels) = check_input(y_check)?;
    if running_psi.len() != channels || running_grad_stat.len() != channels {
        return Err(NormError::ChannelMismatch {
            expected: channels,
            got: running_psi.len().min(running_grad_stat.len()),
        });
    }
    let cshape = channel_shape(y_check.rank(), channels)?;
    let grad_check = grad_out.scale(scale);
    let batch_stat = y_check.mul(&grad_check)?.mean_axes(axes, false)?;
    let updated = update_running_stat(running_grad_stat, batch_stat.data(), decay);
    running_grad_stat.copy_from_slice(&updated);
    let stat = Tensor::new(cshape.clone(), updated)?;
    let psi = Tensor::new(cshape, running_psi.to_vec())?;
    Ok(grad_check.sub(&y_check.mul(&stat)?)?.div(&psi)?)
}

/// Graph node for running-statistics RMS normalization.
pub(super) struct RunningRms {
    pub y_check: Tensor,
    pub running_psi: Vec<f64>,
    pub scale: f64,
    pub decay: f64,
    pub slot: usize,
}

impl CustomOp for RunningRms {
    fn name(&self) -> &'static str {
        "running_rms"
    }

    fn backward(
        &self,
        grad_out: &Tensor,
        slots: &mut [Vec<f64>],
    ) -> Result<Vec<Tensor>, TensorError> {
        let stat = &mut slots[self.slot];
        let grad = rmsnorm_running_backward(
            grad_out,
            &self.y_check,
            &self.running_psi,
            self.scale,
            stat,
            self.decay,
        )
        .map_err(|e| match e {
            NormError::Tensor(t) => t,
            other => TensorError::Domain(other.to_string()),
        })?;
        Ok(vec![grad])
    }
}

/// Outcome of one controller step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PUpdate {
    /// Mean sign of the real outputs.
    pub r: f64,
    /// `sign(r − τ)`.
    pub direction: f64,
    pub before: f64,
    /// `before + Δ_p·direction`, before clamping.
    pub proposed: f64,
    pub after: f64,
}

pub fn update_p(state: &mut NormState, real_outputs: &[f64]) -> Result<PUpdate, NormError> {
    if real_outputs.is_empty() {
        return Err(NormError::EmptyBatch);
    }
    let r = real_outputs.iter().map(|&o| sign(o)).sum::<f64>() / real_outputs.len() as f64;
    let direction = sign(r - state.params.tau);
    let before = state.p();
    let proposed = before + state.params.delta_p * direction;
    state.set_p(proposed);
    Ok(PUpdate {
        r,
        direction,
        before,
        proposed,
        after: state.p(),
    })
}

use rand::RngCore;

use super::ops::{
    arms_mix, bn_center, bn_scale, lcrms_normalize, sample_mask, stats_vars, update_running_stat,
    zero_mean_reg, Mask, RunningRms,
};
use super::{channel_shape, norm_axes, MaskMode, NormError, NormState, StatsMode, Variant};
use crate::tensor::{Graph, Tensor, Var};

/// Which discriminator input a training pass sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Real,
    Fake,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train(Pass),
    Eval,
}

/// Random choices of one forward pass. Passing a recorded value back in
/// replays the pass exactly, which finite-difference checks rely on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frozen {
    /// Bernoulli mask of the stochastic mix.
    pub mask: Option<Mask>,
    /// Constant rescaling factor: the smallest channel RMS or std.
    pub scale: Option<f64>,
}

pub struct LayerContext<'a> {
    pub phase: Phase,
    pub rng: &'a mut dyn RngCore,
    pub frozen: Option<&'a Frozen>,
}

impl<'a> LayerContext<'a> {
    pub fn train(pass: Pass, rng: &'a mut dyn RngCore) -> Self {
        Self {
            phase: Phase::Train(pass),
            rng,
            frozen: None,
        }
    }

    pub fn eval(rng: &'a mut dyn RngCore) -> Self {
        Self {
            phase: Phase::Eval,
            rng,
            frozen: None,
        }
    }

    pub fn with_frozen(mut self, frozen: &'a Frozen) -> Self {
        self.frozen = Some(frozen);
        self
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub out: Var,
    /// Zero-mean penalty, present in training for variants that use it.
    pub reg: Option<Var>,
    /// Mask and rescaling factor actually used.
    pub trace: Frozen,
}

/// Applies the layer described by `state` to `y`.
///
/// Training in running mode folds the batch mean square into the running
/// statistic before it is used, and records a node whose backward updates
/// the running backward statistic stored on `g` under `state.key()`.
/// Evaluation mixes deterministically with the current `p`.
pub fn chain_layer_forward(
    g: &mut Graph,
    y: Var,
    state: &mut NormState,
    ctx: LayerContext<'_>,
) -> Result<LayerOutput, NormError> {
    let shape = g.value(y).shape().to_vec();
    norm_axes(shape.len())?;
    if shape[1] != state.channels() {
        return Err(NormError::ChannelMismatch {
            expected: state.channels(),
            got: shape[1],
        });
    }
    let training = matches!(ctx.phase, Phase::Train(_));
    let running = state.mode == StatsMode::Running;
    if !training && running && state.updates() == 0 && state.variant != Variant::MinusArms {
        return Err(NormError::NoRunningStats);
    }
    state.counters.record(ctx.phase, shape[0]);

    let variant = state.variant;
    let p = state.p();
    let eps = state.params.eps;
    let frozen_scale = ctx.frozen.and_then(|f| f.scale);
    let mut trace = Frozen::default();

    let reg = if training && variant.has_zero_mean_reg() {
        Some(zero_mean_reg(g, y, p, state.params.lambda)?)
    } else {
        None
    };

    let out = match variant {
        Variant::MinusArms => y,
        Variant::Bn | Variant::BnPlusLc => {
            let s = stats_vars(g, y, eps)?;
            let yc = bn_center(g, y, s.mu)?;
            let cs = stats_vars(g, yc, eps)?;
            let normed = bn_scale(g, yc, cs.psi, eps.sqrt())?;
            if variant == Variant::BnPlusLc {
                let scale = frozen_scale.unwrap_or_else(|| g.value(cs.psi_min).data()[0]);
                trace.scale = Some(scale);
                g.mul_scalar(normed, scale)?
            } else {
                normed
            }
        }
        Variant::RmsPlain => {
            let s = stats_vars(g, y, eps)?;
            let one = g.constant(Tensor::scalar(1.0));
            lcrms_normalize(g, y, s.psi, one)?
        }
        _ => {
            let x = if variant == Variant::Plus0C {
                let s = stats_vars(g, y, eps)?;
                bn_center(g, y, s.mu)?
            } else {
                y
            };
            let rescale = variant != Variant::MinusLc;
            let y_hat = match (running, training) {
                (false, _) => {
                    let s = stats_vars(g, x, eps)?;
                    let scale = match (rescale, frozen_scale) {
                        (false, _) => 1.0,
                        (true, Some(v)) => v,
                        (true, None) => g.value(s.psi_min).data()[0],
                    };
                    trace.scale = Some(scale);
                    let k = g.constant(Tensor::scalar(scale));
                    lcrms_normalize(g, x, s.psi, k)?
                }
                (true, true) => running_train(g, x, state, rescale, frozen_scale, &mut trace)?,
                (true, false) => {
                    let psi = state.running_psi();
                    let scale = match (rescale, frozen_scale) {
                        (false, _) => 1.0,
                        (true, Some(v)) => v,
                        (true, None) => psi.iter().copied().fold(f64::INFINITY, f64::min),
                    };
                    trace.scale = Some(scale);
                    let factor = psi.iter().map(|s| scale / s).collect();
                    let factor = Tensor::new(channel_shape(shape.len(), shape[1])?, factor)?;
                    let factor = g.constant(factor);
                    g.mul(x, factor)?
                }
            };
            let mask_mode = if variant == Variant::ChainDtm || !training {
                MaskMode::Deterministic
            } else {
                MaskMode::Stochastic
            };
            match mask_mode {
                MaskMode::Deterministic => arms_mix(g, x, y_hat, p, None)?,
                MaskMode::Stochastic => {
                    let mask = match ctx.frozen.and_then(|f| f.mask.clone()) {
                        Some(m) => {
                            if m.values().shape() != [shape[0], shape[1]] {
                                return Err(NormError::ChannelMismatch {
                                    expected: shape[1],
                                    got: m.values().cols(),
                                });
                            }
                            m
                        }
                        None => sample_mask(shape[0], shape[1], p, ctx.rng)?,
                    };
                    let out = arms_mix(g, x, y_hat, p, Some(&mask))?;
                    trace.mask = Some(mask);
                    out
                }
            }
        }
    };
    Ok(LayerOutput { out, reg, trace })
}

fn running_train(
    g: &mut Graph,
    x: Var,
    state: &mut NormState,
    rescale: bool,
    frozen_scale: Option<f64>,
    trace: &mut Frozen,
) -> Result<Var, NormError> {
    let xv = g.value(x).clone();
    let axes = norm_axes(xv.rank())?;
    let batch_sq = xv.map(|v| v * v).mean_axes(axes, false)?.into_data();
    let decay = state.params.decay;
    let updated = update_running_stat(state.running_psi_sqr(), &batch_sq, decay);
    state.set_running_psi_sqr(updated)?;
    state.updates += 1;

    let psi = state.running_psi();
    let scale = match (rescale, frozen_scale) {
        (false, _) => 1.0,
        (true, Some(v)) => v,
        (true, None) => psi.iter().copied().fold(f64::INFINITY, f64::min),
    };
    trace.scale = Some(scale);
    let psi_t = Tensor::new(channel_shape(xv.rank(), state.channels())?, psi.clone())?;
    let y_check = xv.div(&psi_t)?;
    let value = y_check.scale(scale);
    let slot = g.bind_slot(state.key(), state.running_grad_stat());
    let op = RunningRms {
        y_check,
        running_psi: psi,
        scale,
        decay,
        slot: slot.index(),
    };
    Ok(g.custom(&[x], value, Box::new(op)))
}

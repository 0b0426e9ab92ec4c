//! Normalization layers for GAN discriminators.
//!
//! The default layer replaces batch-norm centering with a zero-mean penalty
//! on the channel means and replaces the variance scaling with an RMS
//! normalization rescaled by the smallest channel RMS, so that for fixed
//! statistics the map never expands distances. Normalized and raw features
//! are mixed per (sample, channel) with probability `p`, and `p` follows
//! the sign of the discriminator's outputs on real data.
//!
//! [`Variant`] selects the full layer or one of its ablations. In
//! [`StatsMode::Running`] the RMS statistic and the backward correction
//! term are exponential moving averages across training steps.

mod layer;
mod ops;
mod snapshot;

use std::fmt;
use std::str::FromStr;

pub use layer::{chain_layer_forward, Frozen, LayerContext, LayerOutput, Pass, Phase};
pub use ops::{
    arms_forward, arms_mix, bn_center, bn_scale, channel_stats, lcrms_normalize,
    rmsnorm_running_backward, sample_mask, stats_vars, update_p, update_running_stat,
    zero_mean_reg, ChannelStats, Mask, PUpdate, StatsVars,
};
pub use snapshot::{read_snapshot, write_snapshot};

use crate::tensor::TensorError;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_LAMBDA: f64 = 20.0;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_DELTA_P: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NormError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("normalization supports rank 2 (B×d) or rank 4 (B×d×H×W) inputs, got rank {0}")]
    UnsupportedRank(usize),
    #[error("layer has {expected} channels, input has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("parameter {name} = {value} out of range")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("sigma[{channel}] = {sigma} is below the floor {floor}")]
    SigmaBelowFloor {
        channel: usize,
        sigma: f64,
        floor: f64,
    },
    #[error("running statistics are empty: evaluate only after a training update")]
    NoRunningStats,
    #[error("snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
}

/// Axes averaged over for channel statistics: `{0}` for B×d and `{0,2,3}`
/// for B×d×H×W.
pub fn norm_axes(rank: usize) -> Result<&'static [usize], NormError> {
    match rank {
        2 => Ok(&[0]),
        4 => Ok(&[0, 2, 3]),
        r => Err(NormError::UnsupportedRank(r)),
    }
}

/// Shape of a per-channel tensor that broadcasts against an input of `rank`.
pub fn channel_shape(rank: usize, channels: usize) -> Result<Vec<usize>, NormError> {
    match rank {
        2 => Ok(vec![1, channels]),
        4 => Ok(vec![1, channels, 1, 1]),
        r => Err(NormError::UnsupportedRank(r)),
    }
}

/// Hyperparameters shared by every variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    /// Step of the `p` controller.
    pub delta_p: f64,
    /// Threshold on the mean sign of real outputs.
    pub tau: f64,
    /// Weight of the zero-mean penalty.
    pub lambda: f64,
    /// Added under the square root of every RMS/variance.
    pub eps: f64,
    /// Decay of the running statistics.
    pub decay: f64,
}

impl Default for NormParams {
    fn default() -> Self {
        Self {
            delta_p: DEFAULT_DELTA_P,
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            eps: DEFAULT_EPS,
            decay: DEFAULT_DECAY,
        }
    }
}

impl NormParams {
    pub fn validate(&self) -> Result<(), NormError> {
        let checks = [
            (
                "delta_p",
                self.delta_p,
                self.delta_p > 0.0 && self.delta_p <= 1.0,
            ),
            ("tau", self.tau, (-1.0..=1.0).contains(&self.tau)),
            (
                "lambda",
                self.lambda,
                self.lambda >= 0.0 && self.lambda.is_finite(),
            ),
            ("eps", self.eps, self.eps > 0.0 && self.eps.is_finite()),
            ("decay", self.decay, (0.0..1.0).contains(&self.decay)),
        ];
        for (name, value, ok) in checks {
            if !ok {
                return Err(NormError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }
}

/// The full layer and its ablations, plus batch-norm references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Running statistics, stochastic mask, zero-mean penalty.
    Chain,
    /// Like [`Variant::Chain`] but with per-batch statistics.
    ChainBatch,
    /// Deterministic mixing with weight `p` instead of a Bernoulli mask.
    ChainDtm,
    /// Centers features by the batch mean before normalizing.
    Plus0C,
    /// Drops the `ψ_min` rescaling, leaving plain `Y/ψ` in the mix.
    MinusLc,
    /// No zero-mean penalty.
    Minus0Mr,
    /// Features pass through unnormalized; only the penalty remains.
    MinusArms,
    /// Batch-norm centering and scaling without affine parameters.
    Bn,
    /// Batch norm rescaled by the detached smallest channel std.
    BnPlusLc,
    /// Plain per-channel RMS normalization `Y/ψ`.
    RmsPlain,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Chain,
        Variant::ChainBatch,
        Variant::ChainDtm,
        Variant::Plus0C,
        Variant::MinusLc,
        Variant::Minus0Mr,
        Variant::MinusArms,
        Variant::Bn,
        Variant::BnPlusLc,
        Variant::RmsPlain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Chain => "CHAIN",
            Variant::ChainBatch => "CHAIN_batch",
            Variant::ChainDtm => "CHAIN_Dtm",
            Variant::Plus0C => "plus_0C",
            Variant::MinusLc => "minus_LC",
            Variant::Minus0Mr => "minus_0MR",
            Variant::MinusArms => "minus_ARMS",
            Variant::Bn => "BN",
            Variant::BnPlusLc => "BN_plus_LC",
            Variant::RmsPlain => "RMS_plain",
        }
    }

    /// Statistics mode a fresh state of this variant starts in.
    pub fn default_mode(self) -> StatsMode {
        match self {
            Variant::ChainBatch | Variant::Bn | Variant::BnPlusLc | Variant::RmsPlain => {
                StatsMode::Batch
            }
            _ => StatsMode::Running,
        }
    }

    /// Whether the variant can run on running statistics at all. Only the
    /// batch-norm references are tied to batch statistics.
    pub fn supports_running(self) -> bool {
        !matches!(self, Variant::Bn | Variant::BnPlusLc | Variant::RmsPlain)
    }

    pub fn has_zero_mean_reg(self) -> bool {
        !matches!(
            self,
            Variant::Minus0Mr | Variant::Bn | Variant::BnPlusLc | Variant::RmsPlain
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    Batch,
    Running,
}

impl StatsMode {
    pub fn name(self) -> &'static str {
        match self {
            StatsMode::Batch => "batch",
            StatsMode::Running => "running",
        }
    }
}

impl FromStr for StatsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(StatsMode::Batch),
            "running" => Ok(StatsMode::Running),
            other => Err(format!("unknown stats mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Stochastic,
    Deterministic,
}

/// How many statistics computations each kind of pass performed, and the
/// largest batch any single computation saw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounters {
    pub real_passes: u64,
    pub fake_passes: u64,
    pub other_passes: u64,
    pub eval_passes: u64,
    pub real_rows: u64,
    pub fake_rows: u64,
    pub max_rows_per_pass: usize,
}

impl PassCounters {
    fn record(&mut self, phase: Phase, rows: usize) {
        match phase {
            Phase::Train(Pass::Real) => {
                self.real_passes += 1;
                self.real_rows += rows as u64;
            }
            Phase::Train(Pass::Fake) => {
                self.fake_passes += 1;
                self.fake_rows += rows as u64;
            }
            Phase::Train(Pass::Other) => self.other_passes += 1,
            Phase::Eval => self.eval_passes += 1,
        }
        self.max_rows_per_pass = self.max_rows_per_pass.max(rows);
    }
}

/// Per-layer mutable state.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub variant: Variant,
    pub mode: StatsMode,
    pub params: NormParams,
    p: f64,
    running_psi_sqr: Vec<f64>,
    running_grad_stat: Vec<f64>,
    updates: u64,
    key: u64,
    counters: PassCounters,
}

impl NormState {
    /// Fresh state with `p = 0`, running mean square 1 and running backward
    /// statistic 0 for every channel.
    pub fn new(variant: Variant, channels: usize, params: NormParams) -> Result<Self, NormError> {
        params.validate()?;
        if channels == 0 {
            return Err(NormError::InvalidParameter {
                name: "channels",
                value: 0.0,
            });
        }
        Ok(Self {
            variant,
            mode: variant.default_mode(),
            params,
            p: 0.0,
            running_psi_sqr: vec![1.0; channels],
            running_grad_stat: vec![0.0; channels],
            updates: 0,
            key: 0,
            counters: PassCounters::default(),
        })
    }

    /// Overrides the statistics mode. Batch-norm style variants only run in
    /// batch mode.
    pub fn with_mode(mut self, mode: StatsMode) -> Result<Self, NormError> {
        if mode == StatsMode::Running && !self.variant.supports_running() {
            return Err(NormError::InvalidParameter {
                name: "mode",
                value: 1.0,
            });
        }
        self.mode = mode;
        Ok(self)
    }

    /// Key under which this layer's backward statistic is shared on a graph.
    pub fn with_key(mut self, key: u64) -> Self {
        self.key = key;
        self
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn channels(&self) -> usize {
        self.running_psi_sqr.len()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Sets `p`, clamped to `[0, 1]`.
    pub fn set_p(&mut self, p: f64) {
        self.p = p.clamp(0.0, 1.0);
    }

    pub fn running_psi_sqr(&self) -> &[f64] {
        &self.running_psi_sqr
    }

    pub fn running_grad_stat(&self) -> &[f64] {
        &self.running_grad_stat
    }

    pub fn set_running_psi_sqr(&mut self, values: Vec<f64>) -> Result<(), NormError> {
        self.check_len(values.len())?;
        if let Some(&bad) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(NormError::InvalidParameter {
                name: "running_psi_sqr",
                value: bad,
            });
        }
        self.running_psi_sqr = values;
        Ok(())
    }

    pub fn set_running_grad_stat(&mut self, values: Vec<f64>) -> Result<(), NormError> {
        self.check_len(values.len())?;
        self.running_grad_stat = values;
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<(), NormError> {
        if len != self.channels() {
            return Err(NormError::ChannelMismatch {
                expected: self.channels(),
                got: len,
            });
        }
        Ok(())
    }

    /// Number of training forwards that updated the running mean square.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub(crate) fn set_updates(&mut self, updates: u64) {
        self.updates = updates;
    }

    pub fn counters(&self) -> &PassCounters {
        &self.counters
    }

    /// Running RMS per channel, `sqrt(ψ̄² + ε)`.
    pub fn running_psi(&self) -> Vec<f64> {
        self.running_psi_sqr
            .iter()
            .map(|s| (s + self.params.eps).sqrt())
            .collect()
    }

    /// Copies the backward statistic accumulated on `graph` back into the
    /// state. Call after a training backward pass; a no-op if the layer was
    /// not used in running mode on that graph.
    pub fn absorb_backward(&mut self, graph: &crate::tensor::Graph) {
        if let Some(values) = graph.find_slot(self.key) {
            self.running_grad_stat = values.to_vec();
        }
    }

    /// Applies the `p` controller to discriminator outputs on real data.
    pub fn update_p(&mut self, real_outputs: &[f64]) -> Result<PUpdate, NormError> {
        update_p(self, real_outputs)
    }
}

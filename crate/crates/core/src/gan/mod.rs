//! A small GAN on 2-D synthetic data, with the normalization layer inside
//! the discriminator.

mod model;
mod train;

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diagnostics::DiagError;
use crate::norm::NormError;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use model::{
    Adam, DiscForward, Discriminator, DiscriminatorSpec, EvalCritic, FeatureShape, Generator,
    Linear,
};
pub use train::{train_run, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GanError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("step {step}: {quantity} is not finite ({value})")]
    NonFinite {
        step: u64,
        quantity: &'static str,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    /// Unit circle with isotropic noise of std 0.05.
    Ring,
    /// `k` equally weighted Gaussians (std 0.1) spaced on a radius-2 circle,
    /// the first at (2, 0).
    GaussMixture(usize),
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dataset::Ring => f.write_str("ring"),
            Dataset::GaussMixture(k) => write!(f, "gauss_mixture({k})"),
        }
    }
}

impl FromStr for Dataset {
    type Err = GanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t == "ring" {
            return Ok(Dataset::Ring);
        }
        t.strip_prefix("gauss_mixture(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|k| k.trim().parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(Dataset::GaussMixture)
            .ok_or_else(|| GanError::UnknownDataset(s.to_string()))
    }
}

pub const RING_NOISE: f64 = 0.05;
pub const MIXTURE_RADIUS: f64 = 2.0;
pub const MIXTURE_NOISE: f64 = 0.1;

/// `count` points of `dataset`, as a count×2 matrix.
pub fn sample_synthetic<R: Rng + ?Sized>(
    dataset: Dataset,
    count: usize,
    rng: &mut R,
) -> Result<Tensor, GanError> {
    if count == 0 {
        return Err(GanError::InvalidConfig(
            "sample count must be at least 1".into(),
        ));
    }
    let mut data = Vec::with_capacity(2 * count);
    match dataset {
        Dataset::Ring => {
            let noise = Normal::new(0.0, RING_NOISE).expect("valid std");
            for _ in 0..count {
                let a = rng.random_range(0.0..TAU);
                data.push(a.cos() + noise.sample(rng));
                data.push(a.sin() + noise.sample(rng));
            }
        }
        Dataset::GaussMixture(k) => {
            if k == 0 {
                return Err(GanError::UnknownDataset(dataset.to_string()));
            }
            let noise = Normal::new(0.0, MIXTURE_NOISE).expect("valid std");
            for _ in 0..count {
                let a = TAU * rng.random_range(0..k) as f64 / k as f64;
                data.push(MIXTURE_RADIUS * a.cos() + noise.sample(rng));
                data.push(MIXTURE_RADIUS * a.sin() + noise.sample(rng));
            }
        }
    }
    Ok(Tensor::new(vec![count, 2], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Hinge,
    Ipm,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Hinge => "hinge",
            LossKind::Ipm => "ipm",
        }
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hinge" => Ok(LossKind::Hinge),
            "ipm" => Ok(LossKind::Ipm),
            other => Err(format!("unknown loss {other:?}")),
        }
    }
}

/// Discriminator objective on scores of real and generated samples, plus
/// every penalty collected during the two passes.
pub fn disc_loss(
    g: &mut Graph,
    h_real: Var,
    h_fake: Var,
    kind: LossKind,
    regs: &[Var],
) -> Result<Var, GanError> {
    let mut loss = match kind {
        LossKind::Ipm => {
            let f = g.mean_all(h_fake)?;
            let r = g.mean_all(h_real)?;
            g.sub(f, r)?
        }
        LossKind::Hinge => {
            let nr = g.neg(h_real)?;
            let r = g.add_scalar(nr, 1.0)?;
            let r = g.relu(r)?;
            let r = g.mean_all(r)?;
            let f = g.add_scalar(h_fake, 1.0)?;
            let f = g.relu(f)?;
            let f = g.mean_all(f)?;
            g.add(r, f)?
        }
    };
    for &reg in regs {
        loss = g.add(loss, reg)?;
    }
    Ok(loss)
}

/// `−mean(h(fake))`.
pub fn gen_loss(g: &mut Graph, h_fake: Var) -> Result<Var, GanError> {
    let m = g.mean_all(h_fake)?;
    Ok(g.neg(m)?)
}

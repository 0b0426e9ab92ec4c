//! Measurements taken along a training run, and the finite-difference oracle
//! used to check every backward rule.

mod gradcheck;

use nalgebra::DMatrix;

use crate::norm::NormError;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use gradcheck::{gradcheck_all, gradcheck_variant, rel_err, GradcheckReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiagError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error("feature matrix is all zeros")]
    ZeroMatrix,
    #[error("need at least 2 non-zero rows, got {0}")]
    TooFewRows(usize),
    #[error("channel {0} has zero variance")]
    ZeroVariance(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

/// One row of a training trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub p: f64,
    pub grad_norm_input: f64,
    pub grad_norm_weights: f64,
    /// One entry per probed hidden layer.
    pub erank: Vec<f64>,
    /// Mean pairwise cosine of probed features on real data.
    pub mean_cosine: Vec<f64>,
    /// Same, on generated data.
    pub mean_cosine_fake: Vec<f64>,
    pub d_real: f64,
    pub d_fake: f64,
    pub d_test: f64,
    pub reg: f64,
}

fn mean_or_zero(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

impl MetricsRecord {
    pub fn erank_mean(&self) -> f64 {
        mean_or_zero(&self.erank)
    }

    pub fn mean_cosine_mean(&self) -> f64 {
        mean_or_zero(&self.mean_cosine)
    }

    pub fn is_finite(&self) -> bool {
        let scalars = [
            self.d_loss,
            self.g_loss,
            self.p,
            self.grad_norm_input,
            self.grad_norm_weights,
            self.d_real,
            self.d_fake,
            self.d_test,
            self.reg,
        ];
        scalars
            .iter()
            .chain(&self.erank)
            .chain(&self.mean_cosine)
            .chain(&self.mean_cosine_fake)
            .all(|v| v.is_finite())
    }
}

/// Graph nodes produced by evaluating a critic.
#[derive(Debug, Clone)]
pub struct CriticOutput {
    /// One score per sample, shaped B×1.
    pub out: Var,
    /// Weight matrices, excluding biases.
    pub weights: Vec<Var>,
    /// Hidden features to probe for rank and cosine similarity.
    pub probes: Vec<Var>,
}

/// Anything that scores a batch on a graph.
pub trait Critic {
    fn critic(&mut self, g: &mut Graph, x: Var) -> Result<CriticOutput, DiagError>;
}

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad<E>(
    mut f: impl FnMut(&Tensor) -> Result<f64, E>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor, E>
where
    E: From<TensorError>,
{
    let mut data = x.data().to_vec();
    let mut grad = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let plus = f(&Tensor::new(x.shape().to_vec(), data.clone())?)?;
        data[i] = orig - h;
        let minus = f(&Tensor::new(x.shape().to_vec(), data.clone())?)?;
        data[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor::new(x.shape().to_vec(), grad)?)
}

/// `‖∂(Σ_b D(x_b))/∂X‖₂` over the whole batch.
pub fn grad_norm_input(critic: &mut dyn Critic, batch: &Tensor) -> Result<f64, DiagError> {
    let mut g = Graph::new();
    let x = g.param(batch.clone());
    let co = critic.critic(&mut g, x)?;
    let total = g.sum_all(co.out)?;
    let grads = g.backward(total)?;
    Ok(grads.get(x).map_or(0.0, Tensor::norm))
}

/// ℓ₂ norm of the gradient of the mean critic output with respect to all
/// weight matrices, concatenated.
pub fn grad_norm_weights(critic: &mut dyn Critic, batch: &Tensor) -> Result<f64, DiagError> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let co = critic.critic(&mut g, x)?;
    let mean = g.mean_all(co.out)?;
    let grads = g.backward(mean)?;
    let sq: f64 = co
        .weights
        .iter()
        .filter_map(|&w| grads.get(w))
        .map(|t| t.dot(t))
        .sum();
    Ok(sq.sqrt())
}

fn as_matrix(features: &Tensor) -> Result<DMatrix<f64>, DiagError> {
    if features.rank() < 2 {
        return Err(DiagError::InvalidArgument(format!(
            "expected a batch of feature rows, got shape {:?}",
            features.shape()
        )));
    }
    let rows = features.shape()[0];
    let cols = features.len() / rows;
    Ok(DMatrix::from_row_slice(rows, cols, features.data()))
}

/// Largest singular value.
pub fn spectral_norm(matrix: &Tensor) -> Result<f64, DiagError> {
    let m = as_matrix(matrix)?;
    Ok(m.singular_values().max())
}

/// `exp` of the entropy of the ℓ₁-normalized singular values. Rank-4
/// features are flattened per sample.
pub fn effective_rank(features: &Tensor) -> Result<f64, DiagError> {
    let m = as_matrix(features)?;
    let s = m.singular_values();
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return Err(DiagError::ZeroMatrix);
    }
    let entropy: f64 = s
        .iter()
        .map(|&v| v / total)
        .filter(|&q| q > 0.0)
        .map(|q| -q * q.ln())
        .sum();
    Ok(entropy.exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSummary {
    pub mean: f64,
    /// Zero rows left out of the average.
    pub excluded: usize,
}

/// Average cosine similarity over unordered pairs of non-zero rows.
pub fn mean_pairwise_cosine(features: &Tensor) -> Result<CosineSummary, DiagError> {
    let m = as_matrix(features)?;
    let rows: Vec<_> = m
        .row_iter()
        .map(|r| r.transpose())
        .filter(|r| r.norm() > 0.0)
        .map(|r| r.normalize())
        .collect();
    let excluded = m.nrows() - rows.len();
    if rows.len() < 2 {
        return Err(DiagError::TooFewRows(rows.len()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            sum += rows[i].dot(&rows[j]).clamp(-1.0, 1.0);
            count += 1;
        }
    }
    Ok(CosineSummary {
        mean: sum / count as f64,
        excluded,
    })
}

/// Pearson correlation between columns `i` and `j` of a B×d matrix.
pub fn channel_correlation(y: &Tensor, i: usize, j: usize) -> Result<f64, DiagError> {
    if y.rank() != 2 || i >= y.cols() || j >= y.cols() || i == j {
        return Err(DiagError::InvalidArgument(format!(
            "channels ({i}, {j}) of shape {:?}",
            y.shape()
        )));
    }
    let (a, b) = (y.column(i), y.column(j));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 {
        return Err(DiagError::ZeroVariance(i));
    }
    if vb == 0.0 {
        return Err(DiagError::ZeroVariance(j));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    /// Largest observed `‖f(u) − f(v)‖ / ‖u − v‖`.
    pub estimate: f64,
    pub pairs_used: usize,
}

/// Lower bound on the Lipschitz constant of `map` from sampled pairs.
/// Coincident pairs are skipped.
pub fn lipschitz_estimate<E>(
    mut map: impl FnMut(&Tensor) -> Result<Tensor, E>,
    mut sampler: impl FnMut() -> Tensor,
    pairs: usize,
) -> Result<LipschitzEstimate, E>
where
    E: From<TensorError>,
{
    let mut estimate = 0.0f64;
    let mut pairs_used = 0;
    for _ in 0..pairs {
        let (u, v) = (sampler(), sampler());
        let dist = u.sub(&v)?.norm();
        if dist == 0.0 {
            continue;
        }
        let ratio = map(&u)?.sub(&map(&v)?)?.norm() / dist;
        estimate = estimate.max(ratio);
        pairs_used += 1;
    }
    Ok(LipschitzEstimate {
        estimate,
        pairs_used,
    })
}

/// Operator 2-norm of a diagonal map: the largest absolute entry.
pub fn diagonal_lipschitz(diag: &[f64]) -> f64 {
    diag.iter().fold(0.0, |m, d| m.max(d.abs()))
}

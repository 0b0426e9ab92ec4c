//! Dense tensors and a reverse-mode autodiff tape.

mod graph;
mod value;

pub use graph::{Binary, CustomOp, Gradients, Graph, SlotId, Unary, Var};
pub use value::{broadcast_shape, Tensor};

pub(crate) use graph::sign;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every extent must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got {got}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("axis {axis} invalid for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("expected a single value, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("graph has already been differentiated")]
    AlreadyDifferentiated,
    #[error("node {0} consumes a later node")]
    Cycle(usize),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.data().to_vec();
                let mut minus = x.data().to_vec();
                plus[i] += h;
                minus[i] -= h;
                let fp = f(&Tensor::new(x.shape().to_vec(), plus).unwrap());
                let fm = f(&Tensor::new(x.shape().to_vec(), minus).unwrap());
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn matmul_identity_factors() {
        let w = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2).unwrap());
        let wv = g.constant(w.clone());
        let left = g.matmul(i, wv).unwrap();
        let right = g.matmul(wv, i).unwrap();
        assert_eq!(g.value(left), &w);
        assert_eq!(g.value(right), &w);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 4]).unwrap());
        let b = g.constant(Tensor::zeros(&[3, 2]).unwrap());
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], &mut rng).unwrap();
        let w = Tensor::randn(&[4, 2], &mut rng).unwrap();
        let r = Tensor::randn(&[3, 2], &mut rng).unwrap();

        let mut g = Graph::new();
        let av = g.param(a.clone());
        let wv = g.param(w.clone());
        let rv = g.constant(r.clone());
        let y = g.matmul(av, wv).unwrap();
        let yr = g.mul(y, rv).unwrap();
        let loss = g.sum_all(yr).unwrap();
        let grads = g.backward(loss).unwrap();

        let fa = |x: &Tensor| x.matmul(&w).unwrap().dot(&r);
        let fw = |x: &Tensor| a.matmul(x).unwrap().dot(&r);
        let fd_a = central_diff(&fa, &a, 1e-5);
        let fd_w = central_diff(&fw, &w, 1e-5);
        assert!(rel_err(grads.get(av).unwrap().data(), &fd_a) < 1e-6);
        assert!(rel_err(grads.get(wv).unwrap().data(), &fd_w) < 1e-6);
    }

    #[test]
    fn reduce_mean_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[2.0, 4.0], [6.0, 8.0]]).unwrap());
        let all = g.mean_all(x).unwrap();
        assert_eq!(g.value(all).item().unwrap(), 5.0);
        let y = g.constant(Tensor::from_rows(&[[1.0, 3.0], [5.0, 7.0]]).unwrap());
        let m0 = g.mean(y, &[0], false).unwrap();
        assert_eq!(g.value(m0).data(), &[3.0, 5.0]);
    }

    #[test]
    fn reduce_mean_4d_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 2, 2], &mut rng).unwrap();
        let r = Tensor::randn(&[1, 3, 1, 1], &mut rng).unwrap();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let sq = g.square(xv).unwrap();
        let m = g.mean(sq, &[0, 2, 3], true).unwrap();
        let rv = g.constant(r.clone());
        let mr = g.mul(m, rv).unwrap();
        let loss = g.sum_all(mr).unwrap();
        let grads = g.backward(loss).unwrap();
        let f = |t: &Tensor| {
            t.map(|v| v * v)
                .mean_axes(&[0, 2, 3], true)
                .unwrap()
                .mul(&r)
                .unwrap()
                .sum()
        };
        let fd = central_diff(&f, &x, 1e-5);
        assert_eq!(grads.get(xv).unwrap().shape(), x.shape());
        assert!(rel_err(grads.get(xv).unwrap().data(), &fd) < 1e-6);
    }

    #[test]
    fn reduce_mean_rejects_bad_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]).unwrap());
        assert!(g.mean(x, &[3], false).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-2.0, 3.0]).unwrap());
        let sq = g.square(x).unwrap();
        assert_eq!(g.value(sq).data(), &[4.0, 9.0]);

        let s = g.constant(Tensor::vector(vec![-0.5, 0.0, 2.0]).unwrap());
        let sg = g.sign(s).unwrap();
        assert_eq!(g.value(sg).data(), &[-1.0, 0.0, 1.0]);

        let l = g.constant(Tensor::vector(vec![-1.0, 1.0]).unwrap());
        let lr = g.leaky_relu(l, 0.2).unwrap();
        assert_eq!(g.value(lr).data(), &[-0.2, 1.0]);
    }

    #[test]
    fn sqrt_of_negative_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -1e-3]).unwrap());
        assert!(matches!(g.sqrt(x), Err(TensorError::Domain(_))));
    }

    #[test]
    fn non_broadcastable_operands_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[3, 2]).unwrap());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn leaky_relu_gradient_away_from_zero() {
        let x = Tensor::vector(vec![-1.3, -0.2, 0.4, 2.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = g.leaky_relu(xv, 0.2).unwrap();
        let y2 = g.square(y).unwrap();
        let loss = g.sum_all(y2).unwrap();
        let grads = g.backward(loss).unwrap();
        let f = |t: &Tensor| {
            t.map(|v| if v > 0.0 { v } else { 0.2 * v })
                .map(|v| v * v)
                .sum()
        };
        let fd = central_diff(&f, &x, 1e-5);
        assert!(rel_err(grads.get(xv).unwrap().data(), &fd) < 1e-8);
    }

    #[test]
    fn broadcast_backward_restores_operand_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: [(&[usize], &[usize]); 4] = [
            (&[4, 3], &[1, 3]),
            (&[4, 3], &[]),
            (&[2, 3, 2, 2], &[1, 3, 1, 1]),
            (&[2, 3, 2, 2], &[2, 3, 1, 1]),
        ];
        for (sa, sb) in pairs {
            let mut g = Graph::new();
            let a = g.param(Tensor::randn(sa, &mut rng).unwrap());
            let b = g.param(Tensor::randn(sb, &mut rng).unwrap().map(|v| v.abs() + 1.0));
            let m = g.mul(a, b).unwrap();
            let d = g.div(m, b).unwrap();
            let s = g.sub(d, b).unwrap();
            let loss = g.sum_all(s).unwrap();
            let grads = g.backward(loss).unwrap();
            assert_eq!(grads.get(a).unwrap().shape(), sa);
            assert_eq!(grads.get(b).unwrap().shape(), sb);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.param(Tensor::vector(vec![3.0, -4.0]).unwrap());
        let dx = g.detach(x);
        let p = g.mul(dx, y).unwrap();
        let loss = g.sum_all(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads
            .get(x)
            .is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let s = g.sum_all(xv).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let sq = g.square(xv).unwrap();
        let s = g.sum_all(sq).unwrap();
        let half = g.mul_scalar(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &x);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(
            g.backward(s).unwrap_err(),
            TensorError::AlreadyDifferentiated
        );
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]).unwrap());
        let z = g.param(Tensor::vector(vec![5.0]).unwrap());
        let s = g.sum_all(x).unwrap();
        let _later = g.square(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(z).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn min_all_routes_to_lowest_argmin() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0, 1.0, 1.0, 2.0]).unwrap());
        let m = g.min_all(x).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 1.0);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}

use chain_core::diagnostics::{channel_correlation, effective_rank, mean_pairwise_cosine};
use chain_core::norm::{
    arms_mix, chain_layer_forward, channel_stats, lcrms_normalize, update_p, zero_mean_reg,
    LayerContext, Mask, NormParams, NormState, Pass, StatsMode, Variant, DEFAULT_EPS,
};
use chain_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (2..=max_rows, 1..=max_cols).prop_flat_map(|(b, d)| {
        prop::collection::vec(-5.0f64..5.0, b * d)
            .prop_map(move |data| Tensor::new(vec![b, d], data).unwrap())
    })
}

fn nonzero(t: &Tensor) -> bool {
    t.norm() > 1e-6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn effective_rank_bounds_and_scale_invariance(y in matrix(8, 6), k in 0.01f64..100.0) {
        prop_assume!(nonzero(&y));
        let r = effective_rank(&y).unwrap();
        let cap = y.rows().min(y.cols()) as f64;
        prop_assert!(r >= 1.0 - 1e-12 && r <= cap + 1e-12, "{r} outside [1, {cap}]");
        let scaled = effective_rank(&y.scale(k)).unwrap();
        prop_assert!((r - scaled).abs() <= 1e-9 * r);
    }

    #[test]
    fn cosine_bounds_and_row_scale_invariance(
        y in matrix(8, 5),
        scales in prop::collection::vec(0.01f64..100.0, 8),
    ) {
        let rows_ok = (0..y.rows()).filter(|&r| y.row(r).iter().any(|v| *v != 0.0)).count();
        prop_assume!(rows_ok >= 2);
        let c = mean_pairwise_cosine(&y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c.mean));
        let d = y.cols();
        let data: Vec<f64> = y.data().iter().enumerate().map(|(i, v)| v * scales[i / d]).collect();
        let scaled = Tensor::new(y.shape().to_vec(), data).unwrap();
        let c2 = mean_pairwise_cosine(&scaled).unwrap();
        prop_assert!((c.mean - c2.mean).abs() <= 1e-9);
        prop_assert_eq!(c.excluded, c2.excluded);
    }

    #[test]
    fn correlation_affine_invariance(
        y in matrix(10, 4),
        a in 0.01f64..50.0,
        b in -10.0f64..10.0,
        a2 in 0.01f64..50.0,
        b2 in -10.0f64..10.0,
    ) {
        prop_assume!(y.cols() >= 2);
        let spread = |c: usize| {
            let col = y.column(c);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|v| (v - m).abs()).fold(0.0, f64::max)
        };
        prop_assume!(spread(0) > 1e-3 && spread(1) > 1e-3);
        let r = channel_correlation(&y, 0, 1).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        let d = y.cols();
        let data: Vec<f64> = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| match i % d {
                0 => a * v + b,
                1 => a2 * v + b2,
                _ => *v,
            })
            .collect();
        let mapped = Tensor::new(y.shape().to_vec(), data).unwrap();
        let r2 = channel_correlation(&mapped, 0, 1).unwrap();
        prop_assert!((r - r2).abs() <= 1e-8, "{r} vs {r2}");
    }

    #[test]
    fn controller_moves_by_one_step(
        outputs in prop::collection::vec(-3.0f64..3.0, 1..32),
        p0 in 0.0f64..=1.0,
        delta in 0.0001f64..0.5,
        tau in -1.0f64..=1.0,
    ) {
        let params = NormParams { delta_p: delta, tau, ..NormParams::default() };
        let mut state = NormState::new(Variant::Chain, 1, params).unwrap();
        state.set_p(p0);
        let u = update_p(&mut state, &outputs).unwrap();
        let step = u.proposed - u.before;
        prop_assert!(step == 0.0 || (step.abs() - delta).abs() <= 1e-15, "step {step}");
        prop_assert_eq!(u.after, u.proposed.clamp(0.0, 1.0));
        prop_assert!((0.0..=1.0).contains(&state.p()));
    }

    #[test]
    fn zero_mean_penalty_step_pulls_means_to_zero(
        y in matrix(8, 4),
        p in 0.01f64..=1.0,
        lambda in 0.1f64..50.0,
        frac in 0.01f64..=1.0,
    ) {
        let n = y.rows() as f64;
        let mu = |t: &Tensor| t.mean_axes(&[0], false).unwrap();
        let before = mu(&y).data().iter().map(|m| m * m).sum::<f64>();
        prop_assume!(before > 1e-8);
        let mut g = Graph::new();
        let yv = g.param(y.clone());
        let reg = zero_mean_reg(&mut g, yv, p, lambda).unwrap();
        let grad = g.backward(reg).unwrap().get(yv).cloned().unwrap();
        let eta = frac * n / (2.0 * lambda * p);
        let stepped = y.sub(&grad.scale(eta)).unwrap();
        let after = mu(&stepped).data().iter().map(|m| m * m).sum::<f64>();
        prop_assert!(after < before, "{after} !< {before}");
    }
}

fn binomial_weight(mask: &[f64], p: f64) -> f64 {
    mask.iter()
        .map(|&m| if m == 1.0 { p } else { 1.0 - p })
        .product()
}

#[test]
fn deterministic_mix_is_exact_mask_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (b, d) in [(2, 2), (4, 4), (8, 2), (16, 1), (3, 5)] {
        let n = b * d;
        let y = Tensor::randn(&[b, d], &mut rng).unwrap();
        let stats = channel_stats(&y, DEFAULT_EPS).unwrap();
        for p in [0.0, 0.3, 0.5, 0.9, 1.0] {
            let mut g = Graph::new();
            let yv = g.constant(y.clone());
            let psi = g.constant(Tensor::new(vec![1, d], stats.psi.clone()).unwrap());
            let k = g.constant(Tensor::scalar(stats.psi_min));
            let y_hat = lcrms_normalize(&mut g, yv, psi, k).unwrap();
            let det = arms_mix(&mut g, yv, y_hat, p, None).unwrap();
            let mut expected = vec![(0.0f64, 0.0f64); n];
            for bits in 0u32..(1 << n) {
                let m: Vec<f64> = (0..n).map(|i| f64::from((bits >> i) & 1)).collect();
                let w = binomial_weight(&m, p);
                if w == 0.0 {
                    continue;
                }
                let mask = Mask::from_tensor(Tensor::new(vec![b, d], m).unwrap()).unwrap();
                let out = arms_mix(&mut g, yv, y_hat, p, Some(&mask)).unwrap();
                for ((sum, comp), v) in expected.iter_mut().zip(g.value(out).data()) {
                    let term = w * v;
                    let t = *sum + term;
                    *comp += if sum.abs() >= term.abs() {
                        (*sum - t) + term
                    } else {
                        (term - t) + *sum
                    };
                    *sum = t;
                }
            }
            let expected: Vec<f64> = expected.into_iter().map(|(s, c)| s + c).collect();
            let expected = Tensor::new(vec![b, d], expected).unwrap();
            let gap = g.value(det).max_abs_diff(&expected);
            assert!(gap <= 1e-12, "B={b} d={d} p={p}: {gap:e}");
        }
    }
}

#[test]
fn zero_p_layers_are_identity_forward_and_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let variants = [
        (Variant::Chain, StatsMode::Running),
        (Variant::Chain, StatsMode::Batch),
        (Variant::ChainBatch, StatsMode::Batch),
        (Variant::ChainDtm, StatsMode::Running),
        (Variant::Minus0Mr, StatsMode::Running),
        (Variant::MinusLc, StatsMode::Batch),
    ];
    for shape in [vec![6, 3], vec![2, 3, 2, 2]] {
        let y = Tensor::randn(&shape, &mut rng).unwrap();
        let head = Tensor::randn(&shape, &mut rng).unwrap();
        for (variant, mode) in variants {
            let mut state = NormState::new(variant, 3, NormParams::default())
                .unwrap()
                .with_mode(mode)
                .unwrap();
            let mut g = Graph::new();
            let yv = g.param(y.clone());
            let out = chain_layer_forward(
                &mut g,
                yv,
                &mut state,
                LayerContext::train(Pass::Real, &mut rng),
            )
            .unwrap();
            assert_eq!(g.value(out.out), &y, "{variant} {mode:?}");
            let hv = g.constant(head.clone());
            let prod = g.mul(out.out, hv).unwrap();
            let mut loss = g.sum_all(prod).unwrap();
            if let Some(reg) = out.reg {
                loss = g.add(loss, reg).unwrap();
            }
            let grad = g.backward(loss).unwrap().get(yv).cloned().unwrap();
            assert_eq!(grad, head, "{variant} {mode:?}");
        }
    }
}

//! One test per acceptance criterion. Each writes a single `PASS`/`FAIL`
//! line straight to the process stdout so it shows up without
//! `--nocapture`, then asserts.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use chain_core::diagnostics::{gradcheck_all, MetricsRecord};
use chain_core::gan::{train_run, TrainConfig, Trainer};
use chain_core::norm::{NormParams, Variant};
use chain_core::theorems::{
    decorrelation_stats, two_point_cosines, verify_centering_cosine, verify_chain_grad_bound,
    verify_decorrelation, verify_running_consistency, verify_scaling_lipschitz, DecorrelationSetup,
    DistSpec, VerificationReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 2024;

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "[acceptance {id}] {status} {name} ({:.2}s) {detail}\n",
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

fn summary(r: &VerificationReport) -> String {
    format!(
        "{}: trials={} failures={} worst_margin={:e}",
        r.id, r.trials, r.failures, r.worst_margin
    )
}

#[test]
fn criterion_1_gradient_oracles() {
    let start = Instant::now();
    let reports = gradcheck_all(100, 1e-5, SEED).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.worst_rel_err).fold(0.0, f64::max);
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed() || r.instances < 100)
        .map(|r| format!("{}/{}", r.variant, r.mode.name()))
        .collect();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient oracles",
        pass,
        elapsed,
        &format!(
            "{} variant/mode pairs x 100 instances, worst rel err {worst:e}, failing {failed:?}",
            reports.len()
        ),
    );
}

#[test]
fn criterion_2_scaling_lipschitz() {
    let start = Instant::now();
    let r = verify_scaling_lipschitz(1000, 10_000, SEED).unwrap();
    let elapsed = start.elapsed();
    let pass = r.passed() && elapsed < Duration::from_secs(10);
    report(2, "scaling Lipschitz constant", pass, elapsed, &summary(&r));
}

#[test]
fn criterion_3_centering_cosine() {
    let start = Instant::now();
    let (raw, centered) = two_point_cosines(&[3.0, 1.0], &[1.0, 1.0]);
    let fixed = verify_centering_cosine(
        &DistSpec::TwoPoint {
            v: vec![3.0, 1.0],
            w: vec![1.0, 1.0],
            weight_v: 0.5,
        },
        1,
        SEED,
    )
    .unwrap();
    let random =
        verify_centering_cosine(&DistSpec::RandomTwoPoint { dim: 16 }, 1000, SEED).unwrap();
    let mut mu = vec![0.0; 16];
    mu[0] = 5.0;
    let offset = verify_centering_cosine(
        &DistSpec::Gaussian {
            mu,
            std: 1.0,
            pairs: 100_000,
        },
        1,
        SEED,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = centered == 0.0
        && fixed.passed()
        && random.passed()
        && random.worst_margin == 0.0
        && offset.passed()
        && elapsed < Duration::from_secs(30);
    report(
        3,
        "centering cosine",
        pass,
        elapsed,
        &format!(
            "two-point raw={raw} centered={centered}; {}; gaussian {}",
            summary(&random),
            summary(&offset)
        ),
    );
}

#[test]
fn criterion_4_gradient_bound() {
    let start = Instant::now();
    let r = verify_chain_grad_bound(1000, SEED).unwrap();
    let elapsed = start.elapsed();
    let pass = r.passed() && r.failures == 0 && elapsed < Duration::from_secs(30);
    report(4, "gradient-norm bounds", pass, elapsed, &summary(&r));
}

#[test]
fn criterion_5_decorrelation() {
    let start = Instant::now();
    let r = verify_decorrelation(4, &[0.0, 0.25, 0.5, 0.75, 1.0], 100_000, SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let s = decorrelation_stats(DecorrelationSetup::CANONICAL, 0.5, 100_000, &mut rng).unwrap();
    let elapsed = start.elapsed();
    let effect = s.rho_det - s.rho_sto;
    let pass = r.passed() && effect > 3.0 * s.diff_se && elapsed < Duration::from_secs(60);
    report(
        5,
        "stochastic-mask decorrelation",
        pass,
        elapsed,
        &format!(
            "{}; canonical p=0.5: rho'={:.4} rho_dot={:.4} closed={:.4} effect={:.4} 3SE={:.4}",
            summary(&r),
            s.rho_det,
            s.rho_sto,
            s.rho_sto_closed,
            effect,
            3.0 * s.diff_se
        ),
    );
}

#[test]
fn criterion_6_running_consistency() {
    let start = Instant::now();
    let r = verify_running_consistency(100, SEED).unwrap();
    let elapsed = start.elapsed();
    let pass = r.passed() && elapsed < Duration::from_secs(10);
    report(6, "running statistics", pass, elapsed, &summary(&r));
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn tail_median(records: &[MetricsRecord]) -> f64 {
    let tail = &records[records.len().saturating_sub(500)..];
    median(tail.iter().map(|r| r.grad_norm_input).collect())
}

#[test]
fn criterion_7_mechanism_smoke() {
    let start = Instant::now();
    let seeds = [0u64, 1, 2];
    let results: Vec<(
        u64,
        Result<Vec<MetricsRecord>, String>,
        Result<Vec<MetricsRecord>, String>,
    )> = thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let run = move |variant| {
                    s.spawn(move || {
                        train_run(TrainConfig {
                            seed,
                            variant: Some(variant),
                            ..TrainConfig::default()
                        })
                        .map_err(|e| e.to_string())
                    })
                };
                (seed, run(Variant::Chain), run(Variant::MinusLc))
            })
            .collect();
        handles
            .into_iter()
            .map(|(seed, a, b)| (seed, a.join().unwrap(), b.join().unwrap()))
            .collect()
    });
    let elapsed = start.elapsed();
    let mut wins = 0;
    let mut details = Vec::new();
    for (seed, chain, minus_lc) in &results {
        match (chain, minus_lc) {
            (Ok(c), Ok(m)) => {
                let finite = c.len() == 2000 && c.iter().all(MetricsRecord::is_finite);
                let (mc, mm) = (tail_median(c), tail_median(m));
                let win = finite && mc < mm;
                wins += usize::from(win);
                details.push(format!(
                    "seed {seed}: CHAIN {mc:.4} vs minus_LC {mm:.4} finite={finite}"
                ));
            }
            (c, m) => details.push(format!(
                "seed {seed}: aborted {:?} {:?}",
                c.as_ref().err(),
                m.as_ref().err()
            )),
        }
    }
    let pass = wins * 2 > seeds.len() && elapsed < Duration::from_secs(300);
    report(
        7,
        "mechanism smoke test",
        pass,
        elapsed,
        &format!("{wins}/{} seeds; {}", seeds.len(), details.join("; ")),
    );
}

/// Successive `p` values differ by 0 or ±Δp, except a step cut short by
/// the clamp at 0 or 1; every value lies in [0, 1].
fn controller_violations(ps: &[f64], delta: f64) -> usize {
    let mut prev = 0.0;
    let mut bad = 0;
    for &p in ps {
        let d = p - prev;
        let exact = d == 0.0 || (d.abs() - delta).abs() <= 1e-12;
        let clamped = (p == 0.0 || p == 1.0) && d.abs() <= delta + 1e-12;
        if !(0.0..=1.0).contains(&p) || !(exact || clamped) {
            bad += 1;
        }
        prev = p;
    }
    bad
}

#[test]
fn criterion_8_controller_contract() {
    let start = Instant::now();
    let small = TrainConfig {
        steps: 400,
        batch_size: 32,
        real_train_size: 512,
        real_test_size: 128,
        d_hidden: vec![32, 32],
        g_hidden: vec![32, 32, 32],
        diag_every: 50,
        ..TrainConfig::default()
    };
    let mut violations = 0;
    let mut moved = 0;
    for (delta, tau) in [(0.001, 0.5), (0.02, 0.0), (0.3, -0.5)] {
        let cfg = TrainConfig {
            norm: NormParams {
                delta_p: delta,
                tau,
                ..NormParams::default()
            },
            ..small.clone()
        };
        let ps: Vec<f64> = train_run(cfg).unwrap().iter().map(|r| r.p).collect();
        violations += controller_violations(&ps, delta);
        moved += ps.windows(2).filter(|w| w[0] != w[1]).count();
    }

    let delta = 0.05;
    let mut trainer = Trainer::new(TrainConfig {
        steps: 30,
        lr_d: 0.0,
        lr_g: 0.0,
        norm: NormParams {
            delta_p: delta,
            tau: 0.5,
            ..NormParams::default()
        },
        ..small
    })
    .unwrap();
    let bias = trainer.disc.params_mut().pop().unwrap();
    *bias = bias.map(|_| 100.0);
    let forced: Vec<f64> = (0..30).map(|_| trainer.train_step().unwrap().p).collect();
    let expected: Vec<f64> = (1..=30).map(|t| (t as f64 * delta).min(1.0)).collect();
    let monotone = forced
        .iter()
        .zip(&expected)
        .all(|(p, e)| (p - e).abs() <= 1e-12)
        && forced.windows(2).all(|w| w[1] >= w[0]);
    let elapsed = start.elapsed();
    let pass = violations == 0 && moved > 0 && monotone && elapsed < Duration::from_secs(10);
    report(
        8,
        "controller contract",
        pass,
        elapsed,
        &format!(
            "{violations} step violations over 3 trajectories ({moved} moves); forced-positive p reaches {} after {} steps",
            forced.last().unwrap(),
            forced.iter().position(|&p| p == 1.0).map_or(0, |i| i + 1)
        ),
    );
}

fn run_train(config: &Path, out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_chain"))
        .args(["train", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(
        &config,
        "steps = 200\nbatch_size = 32\nreal_train_size = 256\nreal_test_size = 64\nd_hidden = 16,16\ng_hidden = 16,16,16\nseed = 7\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (ra, rb) = (run_train(&config, &a), run_train(&config, &b));
    let ok_exit = ra.status.success() && rb.status.success();
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap_or_default();
    let csv_a = read(&a, "metrics.csv");
    let same_csv = !csv_a.is_empty() && csv_a == read(&b, "metrics.csv");
    let same_state = read(&a, "state.txt") == read(&b, "state.txt");
    let elapsed = start.elapsed();
    let pass = ok_exit && same_csv && same_state;
    report(
        9,
        "byte-identical reruns",
        pass,
        elapsed,
        &format!(
            "exit {:?}/{:?}, metrics.csv {} bytes identical={same_csv}, state identical={same_state}",
            ra.status.code(),
            rb.status.code(),
            csv_a.len()
        ),
    );
}

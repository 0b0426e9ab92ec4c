//! The `train`, `verify` and `ablate` commands.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;

use chain_core::diagnostics::MetricsRecord;
use chain_core::gan::{GanError, Trainer};
use chain_core::norm::{write_snapshot, NormState, Variant};
use chain_core::theorems::{run_suite, VerificationReport, CSV_HEADER};

use crate::config::{parse_config, serialize_config, ConfigError, ExperimentConfig};
use crate::metrics::write_metrics;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    ReadConfig { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error("output directory {path}: {source}")]
    OutDir { path: PathBuf, source: io::Error },
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("{context}: {source}")]
    Run { context: String, source: GanError },
    #[error("{failed} of {total} verifiers failed")]
    VerificationFailed { failed: usize, total: usize },
}

impl CliError {
    /// 1 for a failed verification, 2 for configuration problems, 3 for
    /// anything that aborts a run.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::VerificationFailed { .. } => 1,
            CliError::ReadConfig { .. } | CliError::Config { .. } | CliError::OutDir { .. } => 2,
            CliError::Write { .. } | CliError::Run { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Verify,
    Ablate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub config_path: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Reads and parses the config file, applying the seed override.
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let text =
            fs::read_to_string(&self.config_path).map_err(|source| CliError::ReadConfig {
                path: self.config_path.clone(),
                source,
            })?;
        let mut cfg = parse_config(&text).map_err(|source| CliError::Config {
            path: self.config_path.clone(),
            source,
        })?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

fn write(path: PathBuf, contents: &str) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|source| CliError::Write { path, source })
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    let err = |source| CliError::OutDir {
        path: out.to_path_buf(),
        source,
    };
    fs::create_dir_all(out).map_err(err)?;
    let probe = out.join(".write_probe");
    fs::write(&probe, b"").map_err(err)?;
    fs::remove_file(&probe).map_err(err)
}

/// Loads the config, runs the command and writes its artifacts. Returns
/// the lines worth echoing to the terminal.
pub fn run_experiment(run: &RunConfig) -> Result<Vec<String>, CliError> {
    let cfg = run.load()?;
    prepare_out(&run.out)?;
    match run.command {
        Command::Train => train(&cfg, &run.out),
        Command::Verify => verify(&cfg, &run.out),
        Command::Ablate => ablate(&cfg, &run.out),
    }
}

/// Steps a trainer to completion. On an abort the records produced so far
/// are returned together with the error.
fn drive(cfg: &ExperimentConfig) -> (Vec<MetricsRecord>, Option<Trainer>, Option<GanError>) {
    let mut trainer = match Trainer::new(cfg.train.clone()) {
        Ok(t) => t,
        Err(e) => return (Vec::new(), None, Some(e)),
    };
    let mut records = Vec::with_capacity(cfg.train.steps as usize);
    for _ in 0..cfg.train.steps {
        match trainer.train_step() {
            Ok(r) => records.push(r),
            Err(e) => return (records, Some(trainer), Some(e)),
        }
    }
    (records, Some(trainer), None)
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>, CliError> {
    write(out.join("config.txt"), &serialize_config(cfg))?;
    let (records, trainer, err) = drive(cfg);
    let path = out.join("metrics.csv");
    write_metrics(&records, &path).map_err(|source| CliError::Write { path, source })?;
    if let Some(trainer) = &trainer {
        let states: Vec<&NormState> = trainer.disc.norm_states().collect();
        write(out.join("state.txt"), &write_snapshot(&states))?;
    }
    if let Some(source) = err {
        return Err(CliError::Run {
            context: "train".into(),
            source,
        });
    }
    let mut lines = vec![format!(
        "{} steps written to {}",
        records.len(),
        out.join("metrics.csv").display()
    )];
    if let Some(last) = records.last() {
        lines.push(format!(
            "final: d_loss={} g_loss={} p={} grad_norm_input={}",
            last.d_loss, last.g_loss, last.p, last.grad_norm_input
        ));
    }
    Ok(lines)
}

fn verify(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let reports: Vec<VerificationReport> = run_suite(cfg.train.seed);
    let lines: Vec<String> = reports.iter().map(|r| r.to_string()).collect();
    let mut text = lines.join("\n");
    text.push('\n');
    write(out.join("verify.txt"), &text)?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(out.join("verify.csv"), &csv)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        for l in &lines {
            eprintln!("{l}");
        }
        return Err(CliError::VerificationFailed {
            failed,
            total: reports.len(),
        });
    }
    Ok(lines)
}

/// File stem used by `ablate` for a variant.
pub fn ablation_stem(variant: Variant) -> String {
    format!("ablate_{}", variant.name())
}

fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>, CliError> {
    write(out.join("config.txt"), &serialize_config(cfg))?;
    let runs: Vec<(Variant, Vec<MetricsRecord>, Option<GanError>)> = thread::scope(|s| {
        let handles: Vec<_> = cfg
            .variants
            .iter()
            .map(|&variant| {
                let mut one = cfg.clone();
                one.train.variant = Some(variant);
                one.train.mode = None;
                s.spawn(move || {
                    let (records, _, err) = drive(&one);
                    (variant, records, err)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let mut lines = Vec::new();
    let mut first_err = None;
    for (variant, records, err) in runs {
        let stem = ablation_stem(variant);
        let path = out.join(format!("{stem}.csv"));
        write_metrics(&records, &path).map_err(|source| CliError::Write { path, source })?;
        write(
            out.join(format!("{stem}.meta")),
            &format!(
                "variant = {}\nseed = {}\nsteps = {}\n",
                variant,
                cfg.train.seed,
                records.len()
            ),
        )?;
        match err {
            Some(e) => {
                lines.push(format!("{variant}: aborted: {e}"));
                first_err.get_or_insert((variant, e));
            }
            None => lines.push(format!("{variant}: {} steps", records.len())),
        }
    }
    if let Some((variant, source)) = first_err {
        return Err(CliError::Run {
            context: format!("ablate {variant}"),
            source,
        });
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{read_metrics, METRICS_HEADER};

    const SMALL: &str = "steps = 10\nbatch_size = 8\nreal_train_size = 32\nreal_test_size = 16\nd_hidden = 8,8\ng_hidden = 8,8\n";

    fn setup(command: Command, config: &str) -> (tempfile::TempDir, RunConfig) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, config).unwrap();
        let run = RunConfig {
            command,
            config_path: path,
            out: dir.path().join("out"),
            seed: None,
        };
        (dir, run)
    }

    #[test]
    fn train_writes_trajectory_and_snapshot() {
        let (_dir, run) = setup(Command::Train, SMALL);
        run_experiment(&run).unwrap();
        let csv = fs::read_to_string(run.out.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.starts_with(METRICS_HEADER));
        let rows = read_metrics(&csv).unwrap();
        let steps: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        assert_eq!(steps, (0..10).map(f64::from).collect::<Vec<_>>());
        let snap = fs::read_to_string(run.out.join("state.txt")).unwrap();
        let states = chain_core::norm::read_snapshot(&snap).unwrap();
        assert_eq!(states.len(), 2);
        assert!(states.iter().all(|s| s.updates() > 0));
        let cfg = parse_config(&fs::read_to_string(run.out.join("config.txt")).unwrap()).unwrap();
        assert_eq!(cfg.train.steps, 10);
    }

    #[test]
    fn seed_override_changes_the_trajectory() {
        let (_dir, mut run) = setup(Command::Train, SMALL);
        run_experiment(&run).unwrap();
        let a = fs::read(run.out.join("metrics.csv")).unwrap();
        run.seed = Some(99);
        run_experiment(&run).unwrap();
        let b = fs::read(run.out.join("metrics.csv")).unwrap();
        assert_ne!(a, b);
        assert!(fs::read_to_string(run.out.join("config.txt"))
            .unwrap()
            .contains("seed = 99"));
    }

    #[test]
    fn ablate_writes_one_file_pair_per_variant() {
        let (_dir, run) = setup(
            Command::Ablate,
            &format!("{SMALL}variants = CHAIN,minus_LC\nseed = 5\n"),
        );
        let lines = run_experiment(&run).unwrap();
        assert_eq!(lines.len(), 2);
        for v in [Variant::Chain, Variant::MinusLc] {
            let stem = ablation_stem(v);
            let csv = fs::read_to_string(run.out.join(format!("{stem}.csv"))).unwrap();
            assert_eq!(csv.lines().count(), 11);
            let meta = fs::read_to_string(run.out.join(format!("{stem}.meta"))).unwrap();
            assert!(meta.contains(&format!("variant = {v}")));
            assert!(meta.contains("seed = 5"));
        }
    }

    #[test]
    fn error_exit_codes() {
        let (_dir, run) = setup(Command::Train, "tau = 2.0\n");
        assert_eq!(run_experiment(&run).unwrap_err().exit_code(), 2);
        let (_dir, mut run) = setup(Command::Train, SMALL);
        run.config_path = run.config_path.with_file_name("missing.cfg");
        assert_eq!(run_experiment(&run).unwrap_err().exit_code(), 2);
        let (dir, mut run) = setup(Command::Train, SMALL);
        let blocker = dir.path().join("file");
        fs::write(&blocker, "").unwrap();
        run.out = blocker.join("out");
        assert_eq!(run_experiment(&run).unwrap_err().exit_code(), 2);
        let err = CliError::VerificationFailed {
            failed: 1,
            total: 5,
        };
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn diverging_run_aborts_with_partial_output() {
        let cfg =
            format!("{SMALL}lr_d = 1e300\nlr_g = 1e300\nsteps = 50\n").replace("steps = 10\n", "");
        let (_dir, run) = setup(Command::Train, &cfg);
        let err = run_experiment(&run).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
        let csv = fs::read_to_string(run.out.join("metrics.csv")).unwrap();
        assert!(csv.lines().count() < 51);
    }
}

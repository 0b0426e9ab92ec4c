//! Flat `key = value` experiment configuration.

use std::collections::HashSet;
use std::fmt::Write as _;

use chain_core::gan::{FeatureShape, TrainConfig};
use chain_core::norm::{StatsMode, Variant};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: {key}: cannot parse {value:?}: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{key} = {value} is out of range ({range})")]
    OutOfRange {
        key: String,
        value: String,
        range: &'static str,
    },
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

/// Everything a config file can set: the training run plus the variant
/// list swept by `ablate`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
}

pub const ABLATION_VARIANTS: [Variant; 7] = [
    Variant::Chain,
    Variant::ChainBatch,
    Variant::ChainDtm,
    Variant::Plus0C,
    Variant::MinusLc,
    Variant::Minus0Mr,
    Variant::MinusArms,
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            variants: ABLATION_VARIANTS.to_vec(),
        }
    }
}

pub const KEYS: [&str; 24] = [
    "steps",
    "batch_size",
    "lr_d",
    "lr_g",
    "beta1",
    "beta2",
    "seed",
    "dataset",
    "real_train_size",
    "real_test_size",
    "lambda",
    "tau",
    "delta_p",
    "eps",
    "decay",
    "variant",
    "mode",
    "loss",
    "d_hidden",
    "g_hidden",
    "latent_dim",
    "feature_shape",
    "diag_every",
    "variants",
];

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn bad(&self, reason: impl ToString) -> ConfigError {
        ConfigError::BadValue {
            line: self.line,
            key: self.key.to_string(),
            value: self.value.to_string(),
            reason: reason.to_string(),
        }
    }

    fn float(&self) -> Result<f64, ConfigError> {
        let v: f64 = self.value.parse().map_err(|e| self.bad(e))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.bad("not finite"))
        }
    }

    fn float_in(&self, range: &'static str, ok: impl Fn(f64) -> bool) -> Result<f64, ConfigError> {
        let v = self.float()?;
        if ok(v) {
            Ok(v)
        } else {
            Err(self.out_of_range(range))
        }
    }

    fn int<T: std::str::FromStr>(&self) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e| self.bad(e))
    }

    fn out_of_range(&self, range: &'static str) -> ConfigError {
        ConfigError::OutOfRange {
            key: self.key.to_string(),
            value: self.value.to_string(),
            range,
        }
    }

    fn widths(&self) -> Result<Vec<usize>, ConfigError> {
        let widths = self
            .value
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|e| self.bad(e)))
            .collect::<Result<Vec<_>, _>>()?;
        if widths.contains(&0) {
            return Err(self.out_of_range("widths ≥ 1"));
        }
        Ok(widths)
    }
}

fn parse_feature_shape(s: &str) -> Result<FeatureShape, String> {
    if s == "flat" {
        return Ok(FeatureShape::Flat);
    }
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("expected `flat` or `HxW`, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("{e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("{e}"))?;
    if h == 0 || w == 0 {
        return Err("spatial extents must be positive".into());
    }
    Ok(FeatureShape::Spatial { h, w })
}

fn feature_shape_name(shape: FeatureShape) -> String {
    match shape {
        FeatureShape::Flat => "flat".into(),
        FeatureShape::Spatial { h, w } => format!("{h}x{w}"),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Parses a config file. Blank lines and `#` comments are ignored; every
/// key may appear at most once; unset keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: raw.to_string(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                text: raw.to_string(),
            });
        }
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if !seen.insert(key) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        apply(&mut cfg, &Entry { line, key, value })?;
    }
    cfg.train
        .validate()
        .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
    Ok(cfg)
}

fn apply(cfg: &mut ExperimentConfig, e: &Entry<'_>) -> Result<(), ConfigError> {
    let t = &mut cfg.train;
    match e.key {
        "steps" => t.steps = e.int()?,
        "batch_size" => {
            t.batch_size = e.int()?;
            if t.batch_size < 2 {
                return Err(e.out_of_range("≥ 2"));
            }
        }
        "lr_d" => t.lr_d = e.float_in("≥ 0", |v| v >= 0.0)?,
        "lr_g" => t.lr_g = e.float_in("≥ 0", |v| v >= 0.0)?,
        "beta1" => t.beta1 = e.float_in("[0, 1)", |v| (0.0..1.0).contains(&v))?,
        "beta2" => t.beta2 = e.float_in("[0, 1)", |v| (0.0..1.0).contains(&v))?,
        "seed" => t.seed = e.int()?,
        "dataset" => t.dataset = e.value.parse().map_err(|err| e.bad(err))?,
        "real_train_size" => {
            t.real_train_size = e.int()?;
            if t.real_train_size == 0 {
                return Err(e.out_of_range("≥ 1"));
            }
        }
        "real_test_size" => {
            t.real_test_size = e.int()?;
            if t.real_test_size == 0 {
                return Err(e.out_of_range("≥ 1"));
            }
        }
        "lambda" => t.norm.lambda = e.float_in("≥ 0", |v| v >= 0.0)?,
        "tau" => t.norm.tau = e.float_in("[-1, 1]", |v| (-1.0..=1.0).contains(&v))?,
        "delta_p" => t.norm.delta_p = e.float_in("(0, 1]", |v| v > 0.0 && v <= 1.0)?,
        "eps" => t.norm.eps = e.float_in("> 0", |v| v > 0.0)?,
        "decay" => t.norm.decay = e.float_in("[0, 1)", |v| (0.0..1.0).contains(&v))?,
        "variant" => {
            t.variant = match e.value {
                "none" => None,
                name => Some(name.parse().map_err(|err: String| e.bad(err))?),
            }
        }
        "mode" => {
            t.mode = match e.value {
                "default" => None,
                name => Some(name.parse().map_err(|err: String| e.bad(err))?),
            }
        }
        "loss" => t.loss = e.value.parse().map_err(|err: String| e.bad(err))?,
        "d_hidden" => t.d_hidden = e.widths()?,
        "g_hidden" => t.g_hidden = e.widths()?,
        "latent_dim" => {
            t.latent_dim = e.int()?;
            if t.latent_dim == 0 {
                return Err(e.out_of_range("≥ 1"));
            }
        }
        "feature_shape" => {
            t.feature_shape = parse_feature_shape(e.value).map_err(|err| e.bad(err))?
        }
        "diag_every" => {
            t.diag_every = e.int()?;
            if t.diag_every == 0 {
                return Err(e.out_of_range("≥ 1"));
            }
        }
        "variants" => {
            cfg.variants = e
                .value
                .split(',')
                .map(|v| v.trim().parse::<Variant>().map_err(|err| e.bad(err)))
                .collect::<Result<_, _>>()?;
        }
        other => unreachable!("key {other} passed the allow-list"),
    }
    Ok(())
}

/// Writes every key, in [`KEYS`] order, so that parsing the result yields
/// the same configuration.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let t = &cfg.train;
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    put("steps", t.steps.to_string());
    put("batch_size", t.batch_size.to_string());
    put("lr_d", t.lr_d.to_string());
    put("lr_g", t.lr_g.to_string());
    put("beta1", t.beta1.to_string());
    put("beta2", t.beta2.to_string());
    put("seed", t.seed.to_string());
    put("dataset", t.dataset.to_string());
    put("real_train_size", t.real_train_size.to_string());
    put("real_test_size", t.real_test_size.to_string());
    put("lambda", t.norm.lambda.to_string());
    put("tau", t.norm.tau.to_string());
    put("delta_p", t.norm.delta_p.to_string());
    put("eps", t.norm.eps.to_string());
    put("decay", t.norm.decay.to_string());
    put(
        "variant",
        t.variant.map_or("none".into(), |v| v.name().into()),
    );
    put(
        "mode",
        t.mode
            .map_or("default".into(), |m: StatsMode| m.name().into()),
    );
    put("loss", t.loss.name().into());
    put("d_hidden", join(&t.d_hidden));
    put("g_hidden", join(&t.g_hidden));
    put("latent_dim", t.latent_dim.to_string());
    put("feature_shape", feature_shape_name(t.feature_shape));
    put("diag_every", t.diag_every.to_string());
    put("variants", join(&cfg.variants));
    out
}

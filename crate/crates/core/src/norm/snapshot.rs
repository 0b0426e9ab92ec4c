//! Plain-text `key = value` dump of layer states.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{NormError, NormParams, NormState, StatsMode, Variant};

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_snapshot(states: &[&NormState]) -> String {
    let mut out = String::new();
    writeln!(out, "layers = {}", states.len()).unwrap();
    for (i, s) in states.iter().enumerate() {
        let pr = &s.params;
        let fields = [
            ("variant", s.variant.name().to_string()),
            ("mode", s.mode.name().to_string()),
            ("key", s.key().to_string()),
            ("p", s.p().to_string()),
            ("delta_p", pr.delta_p.to_string()),
            ("tau", pr.tau.to_string()),
            ("lambda", pr.lambda.to_string()),
            ("eps", pr.eps.to_string()),
            ("decay", pr.decay.to_string()),
            ("updates", s.updates().to_string()),
            ("running_psi_sqr", join(s.running_psi_sqr())),
            ("running_Psi", join(s.running_grad_stat())),
        ];
        for (k, v) in fields {
            writeln!(out, "layer.{i}.{k} = {v}").unwrap();
        }
    }
    out
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Result<(usize, String), NormError> {
        self.map.remove(key).ok_or_else(|| NormError::Snapshot {
            line: 0,
            message: format!("missing key {key}"),
        })
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, NormError>
    where
        T::Err: std::fmt::Display,
    {
        let (line, v) = self.take(key)?;
        v.parse().map_err(|e: T::Err| NormError::Snapshot {
            line,
            message: format!("{key}: {e}"),
        })
    }

    fn floats(&mut self, key: &str) -> Result<(usize, Vec<f64>), NormError> {
        let (line, v) = self.take(key)?;
        let values = v
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NormError::Snapshot {
                line,
                message: format!("{key}: {e}"),
            })?;
        Ok((line, values))
    }
}

pub fn read_snapshot(text: &str) -> Result<Vec<NormState>, NormError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (k, v) = trimmed.split_once('=').ok_or_else(|| NormError::Snapshot {
            line,
            message: "expected key = value".into(),
        })?;
        let k = k.trim().to_string();
        if map
            .insert(k.clone(), (line, v.trim().to_string()))
            .is_some()
        {
            return Err(NormError::Snapshot {
                line,
                message: format!("duplicate key {k}"),
            });
        }
    }
    let mut e = Entries { map };
    let layers: usize = e.parse("layers")?;
    let mut states = Vec::with_capacity(layers);
    for i in 0..layers {
        let key = |name: &str| format!("layer.{i}.{name}");
        let variant: Variant = e.parse(&key("variant"))?;
        let mode: StatsMode = e.parse(&key("mode"))?;
        let params = NormParams {
            delta_p: e.parse(&key("delta_p"))?,
            tau: e.parse(&key("tau"))?,
            lambda: e.parse(&key("lambda"))?,
            eps: e.parse(&key("eps"))?,
            decay: e.parse(&key("decay"))?,
        };
        let layer_key: u64 = e.parse(&key("key"))?;
        let p: f64 = e.parse(&key("p"))?;
        let updates: u64 = e.parse(&key("updates"))?;
        let (line, psi_sqr) = e.floats(&key("running_psi_sqr"))?;
        let (_, grad_stat) = e.floats(&key("running_Psi"))?;
        let at = |err: NormError| NormError::Snapshot {
            line,
            message: err.to_string(),
        };
        let mut s = NormState::new(variant, psi_sqr.len(), params)
            .and_then(|s| s.with_mode(mode))
            .map_err(at)?
            .with_key(layer_key);
        if !(0.0..=1.0).contains(&p) {
            return Err(at(NormError::InvalidParameter {
                name: "p",
                value: p,
            }));
        }
        s.set_p(p);
        s.set_running_psi_sqr(psi_sqr).map_err(at)?;
        s.set_running_grad_stat(grad_stat).map_err(at)?;
        s.set_updates(updates);
        states.push(s);
    }
    if let Some((k, (line, _))) = e.map.into_iter().next() {
        return Err(NormError::Snapshot {
            line,
            message: format!("unknown key {k}"),
        });
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_unknown_and_missing_keys() {
        let s = NormState::new(Variant::Chain, 2, NormParams::default()).unwrap();
        let text = write_snapshot(&[&s]);
        assert_eq!(read_snapshot(&text).unwrap(), vec![s]);
        let extra = format!("{text}layer.0.bogus = 1\n");
        assert!(matches!(
            read_snapshot(&extra),
            Err(NormError::Snapshot { .. })
        ));
        let missing: String = text
            .lines()
            .filter(|l| !l.starts_with("layer.0.tau"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(read_snapshot(&missing).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            variant in 0usize..10,
            p in 0.0f64..=1.0,
            psi in prop::collection::vec(0.0f64..1e6, 1..6),
            seed in any::<u64>(),
            updates in any::<u64>(),
        ) {
            let variant = Variant::ALL[variant];
            let params = NormParams { tau: 0.25, decay: 0.5, ..NormParams::default() };
            let mut s = NormState::new(variant, psi.len(), params).unwrap().with_key(seed);
            s.set_p(p);
            s.set_running_grad_stat(psi.iter().map(|v| -v / 3.0).collect()).unwrap();
            s.set_running_psi_sqr(psi).unwrap();
            s.set_updates(updates);
            let other = NormState::new(Variant::Bn, 1, NormParams::default()).unwrap();
            let back = read_snapshot(&write_snapshot(&[&s, &other])).unwrap();
            prop_assert_eq!(back, vec![s, other]);
        }
    }
}

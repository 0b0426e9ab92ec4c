//! Trajectory CSV output.

use std::fs;
use std::io;
use std::path::Path;

use chain_core::diagnostics::MetricsRecord;

pub const METRICS_HEADER: &str =
    "step,d_loss,g_loss,p,grad_norm_input,grad_norm_weights,erank,mean_cosine,D_real,D_fake,D_test,reg";

/// Renders records as CSV with LF endings. Floats use Rust's shortest
/// round-trip formatting; per-layer columns are averaged over layers.
pub fn format_metrics(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let row = [
            r.d_loss,
            r.g_loss,
            r.p,
            r.grad_norm_input,
            r.grad_norm_weights,
            r.erank_mean(),
            r.mean_cosine_mean(),
            r.d_real,
            r.d_fake,
            r.d_test,
            r.reg,
        ];
        out.push_str(&r.step.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> io::Result<()> {
    fs::write(path, format_metrics(records))
}

/// Parses a file written by [`write_metrics`] back into rows of numbers,
/// step first.
pub fn read_metrics(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(METRICS_HEADER) => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let row = line
                .split(',')
                .map(|f| f.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != 12 {
                return Err(format!("row {}: {} fields", i + 1, row.len()));
            }
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            d_loss: 1.5,
            g_loss: -0.1,
            p: 0.001,
            grad_norm_input: 0.3,
            grad_norm_weights: 2.0,
            erank: vec![3.0, 5.0],
            mean_cosine: vec![0.25],
            mean_cosine_fake: vec![0.5],
            d_real: 1.0 / 3.0,
            d_fake: -2.0,
            d_test: 0.0,
            reg: 1e-20,
        }
    }

    #[test]
    fn one_record_two_lines() {
        let text = format_metrics(&[record(1)]);
        assert_eq!(
            text,
            format!("{METRICS_HEADER}\n1,1.5,-0.1,0.001,0.3,2,4,0.25,0.3333333333333333,-2,0,0.00000000000000000001\n")
        );
        assert!(!text.contains('\r'));
        let rows = read_metrics(&text).unwrap();
        assert_eq!(rows[0][8], 1.0 / 3.0);
        assert_eq!(rows[0][11], 1e-20);
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        assert_eq!(format_metrics(&[]), format!("{METRICS_HEADER}\n"));
        assert!(read_metrics(&format_metrics(&[])).unwrap().is_empty());
    }

    #[test]
    fn repeated_writes_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (1..=5).map(record).collect();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_metrics(&recs, &a).unwrap();
        write_metrics(&recs, &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
}

//! Canonical JSON reports and aligned text tables.
//!
//! Canonical form: object keys sorted, floats printed with 17 significant
//! digits in scientific notation (round-trips every f64 exactly), no
//! insignificant whitespace. Re-running a command with identical inputs
//! produces byte-identical report files.

use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

use crate::adapt::Metrics;
use crate::error::Result;

/// 17 significant digits: 1 leading + 16 fractional in `e` notation.
fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_value(out: &mut String, v: &serde_json::Value) {
    match v {
        serde_json::Value::Null => out.push_str("null"),
        serde_json::Value::Bool(b) => {
            out.push_str(if *b { "true" } else { "false" });
        }
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else {
                out.push_str(&format_f64(n.as_f64().expect("numeric")));
            }
        }
        serde_json::Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string escape"));
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        serde_json::Value::Object(map) => {
            out.push('{');
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key escape"));
                out.push(':');
                write_value(out, &map[*k]);
            }
            out.push('}');
        }
    }
}

/// Render any JSON value canonically.
pub fn canonical_json(v: &serde_json::Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v);
    out
}

/// Serialize, canonicalize, and write with a trailing newline.
pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let value = serde_json::to_value(report)?;
    let mut text = canonical_json(&value);
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn report_string<T: Serialize>(report: &T) -> Result<String> {
    let value = serde_json::to_value(report)?;
    Ok(canonical_json(&value))
}

/// One row of an ablation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub metrics: Metrics,
}

/// Top-level report emitted by eval/ablate/pretrain/tune commands.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    /// Exact configuration the run used, for replay.
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<Vec<f64>>,
}

/// Fixed-width text table with left-aligned columns.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let emit_row = |out: &mut String, cells: Vec<&str>, widths: &[usize]| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:<width$}", width = widths[i]);
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit_row(&mut out, headers.to_vec(), &widths);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    emit_row(&mut out, rule.iter().map(String::as_str).collect(), &widths);
    for row in rows {
        emit_row(&mut out, row.iter().map(String::as_str).collect(), &widths);
    }
    out
}

/// Metrics to table cells, percentages with two decimals.
pub fn metrics_cells(m: &Metrics) -> Vec<String> {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let slot = |t: &crate::adapt::SlotTally| match t.accuracy() {
        Some(a) => pct(a),
        None => "-".to_string(),
    };
    vec![
        m.n.to_string(),
        pct(m.top1),
        pct(m.top5),
        slot(&m.subject),
        slot(&m.predicate),
        slot(&m.object),
    ]
}

pub const METRICS_HEADERS: [&str; 6] = ["n", "top1%", "top5%", "subj%", "pred%", "obj%"];

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_and_floats_are_stable() {
        let v = json!({"zeta": 1, "alpha": {"b": 0.5, "a": [1.0, 2]}});
        let s = canonical_json(&v);
        assert_eq!(
            s,
            "{\"alpha\":{\"a\":[1.0000000000000000e0,2],\"b\":5.0000000000000000e-1},\"zeta\":1}"
        );
    }

    #[test]
    fn floats_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, 2.5e-17, 123456.789, f64::MIN_POSITIVE] {
            let s = format_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn canonicalization_is_deterministic() {
        let v = json!({"m": [1.5, {"y": 2, "x": 3}], "a": "hi"});
        assert_eq!(canonical_json(&v), canonical_json(&v.clone()));
    }

    #[test]
    fn table_is_aligned() {
        let t = render_table(
            &["name", "value"],
            &[
                vec!["a".into(), "1".into()],
                vec!["longer".into(), "2".into()],
            ],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "name    value");
        assert_eq!(lines[1], "------  -----");
        assert_eq!(lines[2], "a       1");
        assert_eq!(lines[3], "longer  2");
    }
}

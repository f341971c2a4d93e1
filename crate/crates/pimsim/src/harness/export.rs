//! Report export. The CSV contract is fixed: columns
//! `experiment,mechanism,seed,metric,value` in that order, one row per
//! metric, rows in report order then metric-name order. JSON mirrors the
//! report structure and round-trips losslessly.

use crate::error::{SimError, SimResult};
use crate::harness::metrics::MetricsReport;
use std::path::Path;

pub const CSV_HEADER: &str = "experiment,mechanism,seed,metric,value";

/// Format a value with enough digits to round-trip f64 exactly while
/// keeping integers clean (`42` rather than `42.0`).
fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        let mut s = format!("{v}");
        if s.parse::<f64>() != Ok(v) {
            s = format!("{v:?}");
        }
        s
    }
}

pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (metric, value) in &r.values {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.experiment,
                r.mechanism,
                r.seed,
                metric,
                fmt_value(*value)
            ));
        }
    }
    out
}

pub fn to_json(reports: &[MetricsReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> SimResult<Vec<MetricsReport>> {
    serde_json::from_str(text).map_err(|e| SimError::Config(format!("bad report JSON: {e}")))
}

pub fn write_output(path: &Path, contents: &str) -> SimResult<()> {
    std::fs::write(path, contents)
        .map_err(|e| SimError::Io(format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_list_is_header_only() {
        assert_eq!(to_csv(&[]), "experiment,mechanism,seed,metric,value\n");
    }

    #[test]
    fn csv_rows_follow_metric_name_order() {
        let mut r = MetricsReport::new("impica-micro", "-", 4);
        r.set("makespan", 280.0).set("cache-hits", 3.0);
        let csv = to_csv(&[r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "impica-micro,-,4,cache-hits,3");
        assert_eq!(lines[2], "impica-micro,-,4,makespan,280");
    }

    #[test]
    fn json_round_trips() {
        let mut r = MetricsReport::new("coherence", "lazypim", 11);
        r.set("off-chip-bytes", 123.0).set("fpr", 0.203125);
        let reports = vec![r];
        assert_eq!(from_json(&to_json(&reports)).unwrap(), reports);
    }

    #[test]
    fn fractional_values_round_trip_in_csv() {
        assert_eq!(fmt_value(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(fmt_value(2.0), "2");
    }
}

//! Metric aggregation. A report is identified by (experiment, mechanism,
//! seed) and carries a name → value map; the map's ordering fixes the CSV
//! row order, making exports byte-stable for a given run.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub mechanism: String,
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new(experiment: &str, mechanism: &str, seed: u64) -> Self {
        MetricsReport {
            experiment: experiment.to_string(),
            mechanism: mechanism.to_string(),
            seed,
            values: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, metric: &str, value: f64) -> &mut Self {
        debug_assert!(value.is_finite(), "metric {metric} not finite");
        self.values.insert(metric.to_string(), value);
        self
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied()
    }
}

/// Add `<metric>-vs-cpu-only` ratios to every report in `reports`, using
/// the CpuOnly arm with the same seed as the denominator.
pub fn normalize_to_cpu_only(reports: &mut [MetricsReport], metrics: &[&str]) {
    let baselines: BTreeMap<u64, BTreeMap<String, f64>> = reports
        .iter()
        .filter(|r| r.mechanism == "cpu-only")
        .map(|r| (r.seed, r.values.clone()))
        .collect();
    for r in reports.iter_mut() {
        let Some(base) = baselines.get(&r.seed) else {
            continue;
        };
        for &m in metrics {
            if let (Some(v), Some(b)) = (r.get(m), base.get(m)) {
                if *b > 0.0 {
                    r.set(&format!("{m}-vs-cpu-only"), v / *b);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpu_only_arm_normalizes_to_one() {
        let mut a = MetricsReport::new("coherence", "cpu-only", 3);
        a.set("off-chip-bytes", 800.0);
        let mut b = MetricsReport::new("coherence", "lazypim", 3);
        b.set("off-chip-bytes", 200.0);
        let mut reports = vec![a, b];
        normalize_to_cpu_only(&mut reports, &["off-chip-bytes"]);
        assert_eq!(reports[0].get("off-chip-bytes-vs-cpu-only"), Some(1.0));
        assert_eq!(reports[1].get("off-chip-bytes-vs-cpu-only"), Some(0.25));
    }

    #[test]
    fn missing_baseline_adds_no_ratio() {
        let mut r = MetricsReport::new("coherence", "fg", 9);
        r.set("makespan", 5.0);
        let mut reports = vec![r];
        normalize_to_cpu_only(&mut reports, &["makespan"]);
        assert_eq!(reports[0].get("makespan-vs-cpu-only"), None);
    }
}

//! Per-stage wall-time statistics for pipeline runs.

use std::collections::BTreeMap;

/// Wall-time samples in seconds, grouped by stage name. Stages that never
/// record a sample produce no report row at all (omitted, not zero).
#[derive(Debug, Clone, Default)]
pub struct TimingLog {
    samples: BTreeMap<String, Vec<f64>>,
}

/// Summary statistics for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub stage: String,
    pub count: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub p95_s: f64,
}

impl TimingLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, stage: &str, seconds: f64) {
        self.samples.entry(stage.to_string()).or_default().push(seconds);
    }

    pub fn samples(&self, stage: &str) -> Option<&[f64]> {
        self.samples.get(stage).map(Vec::as_slice)
    }

    /// One row per stage that ran, alphabetical by stage name. Standard
    /// deviation is the sample (n-1) form, zero for a single sample; the
    /// 95th percentile uses the nearest-rank rule on sorted samples.
    pub fn rows(&self) -> Vec<TimingRow> {
        self.samples
            .iter()
            .filter(|(_, values)| !values.is_empty())
            .map(|(stage, values)| {
                let count = values.len();
                let mean = values.iter().sum::<f64>() / count as f64;
                let std = if count > 1 {
                    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    (ss / (count - 1) as f64).sqrt()
                } else {
                    0.0
                };
                let mut sorted = values.clone();
                sorted.sort_by(f64::total_cmp);
                let rank = ((0.95 * count as f64).ceil() as usize).clamp(1, count);
                TimingRow {
                    stage: stage.clone(),
                    count,
                    mean_s: mean,
                    std_s: std,
                    p95_s: sorted[rank - 1],
                }
            })
            .collect()
    }

    /// CSV with a fixed header: `stage,count,mean_s,std_s,p95_s`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,count,mean_s,std_s,p95_s\n");
        for row in self.rows() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.stage, row.count, row.mean_s, row.std_s, row.p95_s
            ));
        }
        out
    }
}

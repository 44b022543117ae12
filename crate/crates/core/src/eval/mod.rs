//! Evaluation harness: detector repeatability, trajectory error metrics,
//! and per-stage timing statistics.
//!
//! Everything here is a pure function over completed data; metric CSVs use
//! the `metric,statistic,value,units` row format and plot data is emitted
//! as plain x,y series.

mod repeatability;
mod timing;
mod trajectory;

pub use repeatability::{repeatability, RepeatabilityConfig};
pub use timing::{TimingLog, TimingRow};
pub use trajectory::{
    associate, ate, rpe, ErrorStats, TrajectoryAlignment, MAX_ASSOCIATION_GAP_S,
    MIN_ASSOCIABLE_PAIRS,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid configuration: {reason}")]
    Config { reason: String },
    #[error("homography is not invertible")]
    SingularHomography,
    #[error("only {got} associable pose pairs, need at least {needed}")]
    TooFewPairs { got: usize, needed: usize },
    #[error("frame separation {delta} leaves no pairs over {pairs} associated poses")]
    EmptySeparation { delta: usize, pairs: usize },
}

/// One row of a metric CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub statistic: String,
    pub value: f64,
    pub units: String,
}

impl MetricRow {
    pub fn new(metric: &str, statistic: &str, value: f64, units: &str) -> Self {
        Self {
            metric: metric.to_string(),
            statistic: statistic.to_string(),
            value,
            units: units.to_string(),
        }
    }
}

/// Renders metric rows as CSV with a fixed header. Values print in Rust's
/// shortest round-trip form, so identical runs emit identical bytes.
pub fn metric_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,statistic,value,units\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.metric, row.statistic, row.value, row.units
        ));
    }
    out
}

/// Renders an x,y series as CSV for external plotting.
pub fn series_csv(x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{x_label},{y_label}\n");
    for (x, y) in points {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_csv_renders_exact_rows() {
        let rows = vec![
            MetricRow::new("ate", "rmse", 0.25, "m"),
            MetricRow::new("ate", "max", 1.5, "m"),
        ];
        assert_eq!(
            metric_csv(&rows),
            "metric,statistic,value,units\nate,rmse,0.25,m\nate,max,1.5,m\n"
        );
    }

    #[test]
    fn series_csv_renders_header_and_points() {
        let csv = series_csv("x_m", "y_m", &[(0.0, 1.0), (2.5, -3.0)]);
        assert_eq!(csv, "x_m,y_m\n0,1\n2.5,-3\n");
    }
}

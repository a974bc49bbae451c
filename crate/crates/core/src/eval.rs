//! Forecast error metrics, horizon buckets and the sudden-change subset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Running sums for MAE and RMSE.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorAccumulator {
    pub abs_sum: f64,
    pub sq_sum: f64,
    pub count: usize,
}

impl ErrorAccumulator {
    pub fn add(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs_sum += e.abs();
        self.sq_sum += e * e;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &ErrorAccumulator) {
        self.abs_sum += other.abs_sum;
        self.sq_sum += other.sq_sum;
        self.count += other.count;
    }

    /// `(MAE, RMSE)`; undefined without observations.
    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::UndefinedMetric("no observed entries".into()));
        }
        let n = self.count as f64;
        Ok((self.abs_sum / n, (self.sq_sum / n).sqrt()))
    }
}

/// MAE and RMSE over entries whose mask is set.
pub fn mae_rmse(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || truth.len() != mask.len() {
        return Err(Error::dim("mae_rmse", &[pred.len()], &[truth.len(), mask.len()]));
    }
    let mut acc = ErrorAccumulator::default();
    for ((&p, &t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            acc.add(p, t);
        }
    }
    acc.finish()
}

/// A step qualifies when its level exceeds `level` and the next step differs
/// by more than `jump`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuddenChangeRule {
    pub level: f64,
    pub jump: f64,
}

impl Default for SuddenChangeRule {
    fn default() -> Self {
        Self { level: 75.0, jump: 20.0 }
    }
}

/// Marks qualifying steps of one station's series. The last step has no
/// successor and is never marked; steps whose value or successor is
/// unobserved are not marked either.
pub fn sudden_change_mask(series: &[f64], observed: Option<&[bool]>, rule: SuddenChangeRule) -> Vec<bool> {
    let seen = |t: usize| observed.is_none_or(|o| o[t]);
    (0..series.len())
        .map(|t| {
            t + 1 < series.len()
                && seen(t)
                && seen(t + 1)
                && series[t] > rule.level
                && (series[t + 1] - series[t]).abs() > rule.jump
        })
        .collect()
}

/// Contiguous range `[start, end)` of zero-based forecast steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonBucket {
    pub start: usize,
    pub end: usize,
}

impl HorizonBucket {
    /// One-based inclusive label such as `1-8`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.start + 1, self.end)
    }
}

/// Three near-equal buckets (`1-8`, `9-16`, `17-24` for 24 steps); fewer
/// when the horizon is shorter than three steps.
pub fn default_buckets(horizon: usize) -> Vec<HorizonBucket> {
    let k = horizon.clamp(1, 3);
    (0..k)
        .map(|i| HorizonBucket {
            start: i * horizon / k,
            end: (i + 1) * horizon / k,
        })
        .filter(|b| b.end > b.start)
        .collect()
}

pub fn validate_buckets(buckets: &[HorizonBucket], horizon: usize) -> Result<()> {
    if buckets.is_empty() {
        return Err(Error::Config("at least one horizon bucket is required".into()));
    }
    for b in buckets {
        if b.start >= b.end || b.end > horizon {
            return Err(Error::Config(format!(
                "horizon bucket {} is empty or exceeds the {horizon}-step horizon",
                b.label()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub bucket: String,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub count: usize,
}

/// Per-bucket, overall and sudden-change errors in original units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn row(&self, bucket: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.bucket == bucket)
    }

    /// Overall MAE; an error when nothing was observed.
    pub fn overall_mae(&self) -> Result<f64> {
        self.row("all")
            .and_then(|r| r.mae)
            .ok_or_else(|| Error::UndefinedMetric("no observed targets".into()))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14}{:>12}{:>12}{:>10}\n", "bucket", "MAE", "RMSE", "count");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14}{:>12}{:>12}{:>10}\n",
                r.bucket,
                fmt(r.mae),
                fmt(r.rmse),
                r.count
            ));
        }
        s
    }
}

/// Accumulates forecast windows into a [`MetricReport`].
#[derive(Clone, Debug)]
pub struct ReportBuilder {
    buckets: Vec<HorizonBucket>,
    rule: SuddenChangeRule,
    per_bucket: Vec<ErrorAccumulator>,
    all: ErrorAccumulator,
    sudden: ErrorAccumulator,
}

impl ReportBuilder {
    pub fn new(buckets: Vec<HorizonBucket>, rule: SuddenChangeRule) -> Self {
        let per_bucket = vec![ErrorAccumulator::default(); buckets.len()];
        Self {
            buckets,
            rule,
            per_bucket,
            all: ErrorAccumulator::default(),
            sudden: ErrorAccumulator::default(),
        }
    }

    /// Adds one window of a single target measurement; slices are `[τ, N]`
    /// row-major in original units.
    pub fn add_window(&mut self, pred: &[f64], truth: &[f64], observed: &[bool], stations: usize) -> Result<()> {
        if pred.len() != truth.len() || truth.len() != observed.len() || stations == 0 || truth.len() % stations != 0 {
            return Err(Error::dim("add_window", &[pred.len(), stations], &[truth.len(), observed.len()]));
        }
        let horizon = truth.len() / stations;
        validate_buckets(&self.buckets, horizon)?;
        let mut series = vec![0.0; horizon];
        let mut seen = vec![false; horizon];
        for n in 0..stations {
            for t in 0..horizon {
                series[t] = truth[t * stations + n];
                seen[t] = observed[t * stations + n];
            }
            let sudden = sudden_change_mask(&series, Some(&seen), self.rule);
            for t in 0..horizon {
                if !seen[t] {
                    continue;
                }
                let (p, y) = (pred[t * stations + n], series[t]);
                self.all.add(p, y);
                for (b, acc) in self.buckets.iter().zip(&mut self.per_bucket) {
                    if (b.start..b.end).contains(&t) {
                        acc.add(p, y);
                    }
                }
                if sudden[t] {
                    self.sudden.add(p, y);
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let row = |bucket: String, acc: &ErrorAccumulator| {
            let m = acc.finish().ok();
            MetricRow {
                bucket,
                mae: m.map(|m| m.0),
                rmse: m.map(|m| m.1),
                count: acc.count,
            }
        };
        let mut rows: Vec<MetricRow> = self
            .buckets
            .iter()
            .zip(&self.per_bucket)
            .map(|(b, acc)| row(b.label(), acc))
            .collect();
        rows.push(row("all".into(), &self.all));
        rows.push(row("sudden_change".into(), &self.sudden));
        MetricReport { rows }
    }
}

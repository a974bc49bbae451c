use serde::{Deserialize, Serialize};

use super::dataset::ReadingsDataset;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::Tensor;

/// Drops stations whose target missing rate is at least `threshold`.
pub fn filter_by_missing_rate(dataset: &ReadingsDataset, threshold: f64) -> Result<ReadingsDataset> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("missing-rate threshold {threshold} outside (0, 1]")));
    }
    let keep: Vec<usize> = dataset
        .missing_rate(dataset.target_index())
        .iter()
        .enumerate()
        .filter(|(_, &r)| r < threshold)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "every station has a target missing rate of at least {threshold}"
        )));
    }
    Ok(dataset.select_stations(&keep))
}

/// Contiguous `[start, end)` step ranges of the three splits.
pub fn split_bounds(len: usize, fractions: [f64; 3]) -> Result<[(usize, usize); 3]> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    let a = (len as f64 * fractions[0]).round() as usize;
    let b = ((len as f64 * (fractions[0] + fractions[1])).round() as usize).max(a);
    Ok([(0, a), (a, b), (b, len)])
}

/// Train/validation/test in chronological order. Each split must hold at
/// least `min_len` steps (one input window plus its horizon).
pub fn chronological_split(
    dataset: &ReadingsDataset,
    fractions: [f64; 3],
    min_len: usize,
) -> Result<(ReadingsDataset, ReadingsDataset, ReadingsDataset)> {
    let bounds = split_bounds(dataset.len_time(), fractions)?;
    for ((s, e), name) in bounds.iter().zip(["train", "validation", "test"]) {
        if e - s < min_len.max(1) {
            return Err(Error::Config(format!(
                "{name} split has {} steps, fewer than the {min_len} needed for one window",
                e - s
            )));
        }
    }
    let part = |(s, e): (usize, usize)| dataset.slice_time(s, e - s);
    Ok((part(bounds[0])?, part(bounds[1])?, part(bounds[2])?))
}

/// Per-measurement mean and population standard deviation over observed entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl NormStats {
    pub fn fit(dataset: &ReadingsDataset) -> Result<Self> {
        let d = dataset.n_measurements();
        let mut count = vec![0usize; d];
        let mut sum = vec![0.0; d];
        for (i, (&v, &o)) in dataset.values().iter().zip(dataset.observed()).enumerate() {
            if o {
                count[i % d] += 1;
                sum[i % d] += v;
            }
        }
        let mut mean = vec![0.0; d];
        for k in 0..d {
            if count[k] == 0 {
                return Err(Error::EmptyDataset(format!(
                    "no observed values for {}",
                    dataset.measurement_names[k]
                )));
            }
            mean[k] = sum[k] / count[k] as f64;
        }
        let mut sq = vec![0.0; d];
        for (i, (&v, &o)) in dataset.values().iter().zip(dataset.observed()).enumerate() {
            if o {
                sq[i % d] += (v - mean[i % d]).powi(2);
            }
        }
        let std: Vec<f64> = sq.iter().zip(&count).map(|(s, &c)| (s / c as f64).sqrt()).collect();
        if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Validation(format!(
                "measurement {} is constant on the training split; cannot normalize",
                dataset.measurement_names[k]
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, measurement: usize, x: f64, direction: Direction) -> f64 {
        let (m, s) = (self.mean[measurement], self.std[measurement]);
        match direction {
            Direction::Forward => (x - m) / s,
            Direction::Inverse => x * s + m,
        }
    }

    /// Transforms a tensor whose last axis indexes measurements `0..k`.
    pub fn zscore(&self, x: &Tensor, direction: Direction) -> Tensor {
        let k = *x.shape().last().expect("rank >= 1");
        let data = x.data().iter().enumerate().map(|(i, &v)| self.apply(i % k, v, direction)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

/// Start steps of all windows with `T` inputs and `τ` targets.
pub fn window_starts(len: usize, input_steps: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let span = input_steps + horizon;
    if stride == 0 || len < span {
        return Vec::new();
    }
    (0..=len - span).step_by(stride).collect()
}

/// A split in normalized units with missing entries imputed by zero.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub len_time: usize,
    pub n_stations: usize,
    pub n_measurements: usize,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl PreparedSplit {
    pub fn new(dataset: &ReadingsDataset, stats: &NormStats) -> Result<Self> {
        let d = dataset.n_measurements();
        if stats.mean.len() != d {
            return Err(Error::Config(format!(
                "normalization covers {} measurements, dataset has {d}",
                stats.mean.len()
            )));
        }
        let values = dataset
            .values()
            .iter()
            .zip(dataset.observed())
            .enumerate()
            .map(|(i, (&v, &o))| if o { stats.apply(i % d, v, Direction::Forward) } else { 0.0 })
            .collect();
        Ok(Self {
            len_time: dataset.len_time(),
            n_stations: dataset.n_stations(),
            n_measurements: d,
            values,
            observed: dataset.observed().to_vec(),
        })
    }

    /// Model input `[1, T, N, 2D]` for steps `[start, start + T)` alone.
    pub fn input_window(&self, start: usize, input_steps: usize) -> Result<Tensor> {
        let (n, d) = (self.n_stations, self.n_measurements);
        if start + input_steps > self.len_time {
            return Err(Error::Contract(format!(
                "input window at {start} runs past the {} available steps",
                self.len_time
            )));
        }
        let mut x = Vec::with_capacity(input_steps * n * 2 * d);
        for t in start..start + input_steps {
            for st in 0..n {
                let o = (t * n + st) * d;
                x.extend_from_slice(&self.values[o..o + d]);
                x.extend(self.observed[o..o + d].iter().map(|&b| if b { 1.0 } else { 0.0 }));
            }
        }
        Tensor::new(vec![1, input_steps, n, 2 * d], x)
    }

    /// Stacks the windows starting at `starts` into a batch. Targets are the
    /// first `outputs` measurements.
    pub fn batch(&self, starts: &[usize], input_steps: usize, horizon: usize, outputs: usize) -> Result<Batch> {
        let (n, d) = (self.n_stations, self.n_measurements);
        if outputs == 0 || outputs > d {
            return Err(Error::Config(format!("{outputs} outputs from {d} measurements")));
        }
        if starts.is_empty() {
            return Err(Error::EmptyDataset("no windows in batch".into()));
        }
        if let Some(&s) = starts.iter().find(|&&s| s + input_steps + horizon > self.len_time) {
            return Err(Error::Contract(format!(
                "window at {s} runs past the {} available steps",
                self.len_time
            )));
        }
        let b = starts.len();
        let mut x = Vec::with_capacity(b * input_steps * n * 2 * d);
        let mut x_target = Vec::with_capacity(b * input_steps * n * d);
        let mut x_mask = Vec::with_capacity(x_target.capacity());
        let mut y = Vec::with_capacity(b * horizon * n * outputs);
        let mut y_mask = Vec::with_capacity(y.capacity());
        let flag = |o: bool| if o { 1.0 } else { 0.0 };
        for &s in starts {
            for t in s..s + input_steps {
                for st in 0..n {
                    let o = (t * n + st) * d;
                    x.extend_from_slice(&self.values[o..o + d]);
                    x.extend(self.observed[o..o + d].iter().map(|&b| flag(b)));
                    x_target.extend_from_slice(&self.values[o..o + d]);
                    x_mask.extend(self.observed[o..o + d].iter().map(|&b| flag(b)));
                }
            }
            for t in s + input_steps..s + input_steps + horizon {
                for st in 0..n {
                    let o = (t * n + st) * d;
                    y.extend_from_slice(&self.values[o..o + outputs]);
                    y_mask.extend(self.observed[o..o + outputs].iter().map(|&b| flag(b)));
                }
            }
        }
        Ok(Batch {
            x: Tensor::new(vec![b, input_steps, n, 2 * d], x)?,
            x_target: Tensor::new(vec![b, input_steps, n, d], x_target)?,
            x_mask: Tensor::new(vec![b, input_steps, n, d], x_mask)?,
            y: Tensor::new(vec![b, horizon, n, outputs], y)?,
            y_mask: Tensor::new(vec![b, horizon, n, outputs], y_mask)?,
        })
    }
}

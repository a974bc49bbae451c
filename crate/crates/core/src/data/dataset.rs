use std::collections::BTreeMap;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};

use crate::dartboard::{csv_error, StationSet};
use crate::error::{Error, Result};

const TIME_FORMATS: [&str; 4] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"];
const WRITE_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(WRITE_FORMAT).to_string()
}

/// Station readings on a uniform time grid, `[time, N, D]` row-major.
///
/// Missing entries hold `0.0` in `values` and `false` in `observed`. The
/// first measurement is the prediction target.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadingsDataset {
    pub stations: StationSet,
    pub timestamps: Vec<NaiveDateTime>,
    pub measurement_names: Vec<String>,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl ReadingsDataset {
    pub fn new(
        stations: StationSet,
        timestamps: Vec<NaiveDateTime>,
        measurement_names: Vec<String>,
        values: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let expected = timestamps.len() * stations.len() * measurement_names.len();
        if values.len() != expected || observed.len() != expected {
            return Err(Error::Validation(format!(
                "readings hold {} values and {} flags, expected {expected}",
                values.len(),
                observed.len()
            )));
        }
        if measurement_names.is_empty() {
            return Err(Error::Validation("at least one measurement is required".into()));
        }
        if timestamps.len() > 1 {
            let step = timestamps[1] - timestamps[0];
            if step <= TimeDelta::zero() || timestamps.windows(2).any(|w| w[1] - w[0] != step) {
                return Err(Error::Validation("timestamps must be strictly increasing and uniform".into()));
            }
        }
        if let Some(i) = values.iter().zip(&observed).position(|(v, &o)| o && !v.is_finite()) {
            return Err(Error::Validation(format!("observed value at flat index {i} is not finite")));
        }
        let values = values.into_iter().zip(&observed).map(|(v, &o)| if o { v } else { 0.0 }).collect();
        Ok(Self {
            stations,
            timestamps,
            measurement_names,
            values,
            observed,
        })
    }

    pub fn len_time(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn n_measurements(&self) -> usize {
        self.measurement_names.len()
    }

    /// Index of the prediction target among the measurements.
    pub fn target_index(&self) -> usize {
        0
    }

    pub fn step(&self) -> Option<TimeDelta> {
        (self.timestamps.len() > 1).then(|| self.timestamps[1] - self.timestamps[0])
    }

    fn offset(&self, t: usize, n: usize, d: usize) -> usize {
        (t * self.n_stations() + n) * self.n_measurements() + d
    }

    pub fn value(&self, t: usize, n: usize, d: usize) -> Option<f64> {
        let i = self.offset(t, n, d);
        self.observed[i].then(|| self.values[i])
    }

    pub fn is_observed(&self, t: usize, n: usize, d: usize) -> bool {
        self.observed[self.offset(t, n, d)]
    }

    /// Raw values, `0.0` where missing.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    /// Steps `[start, start + len)`.
    pub fn slice_time(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len_time() {
            return Err(Error::Contract(format!(
                "time range {start}..{} exceeds {} steps",
                start + len,
                self.len_time()
            )));
        }
        let row = self.n_stations() * self.n_measurements();
        let r = start * row..(start + len) * row;
        Ok(Self {
            stations: self.stations.clone(),
            timestamps: self.timestamps[start..start + len].to_vec(),
            measurement_names: self.measurement_names.clone(),
            values: self.values[r.clone()].to_vec(),
            observed: self.observed[r].to_vec(),
        })
    }

    /// Keeps the stations at `indices`, in that order.
    pub fn select_stations(&self, indices: &[usize]) -> Self {
        let d = self.n_measurements();
        let mut values = Vec::with_capacity(self.len_time() * indices.len() * d);
        let mut observed = Vec::with_capacity(values.capacity());
        for t in 0..self.len_time() {
            for &n in indices {
                let o = self.offset(t, n, 0);
                values.extend_from_slice(&self.values[o..o + d]);
                observed.extend_from_slice(&self.observed[o..o + d]);
            }
        }
        Self {
            stations: self.stations.select(indices),
            timestamps: self.timestamps.clone(),
            measurement_names: self.measurement_names.clone(),
            values,
            observed,
        }
    }

    /// Fraction of steps where measurement `d` is missing, per station.
    pub fn missing_rate(&self, d: usize) -> Vec<f64> {
        let t_len = self.len_time().max(1) as f64;
        (0..self.n_stations())
            .map(|n| (0..self.len_time()).filter(|&t| !self.is_observed(t, n, d)).count() as f64 / t_len)
            .collect()
    }

    /// Reads a station table and a `timestamp,station_id,<measurements...>`
    /// readings table. Timestamps are put on the inferred uniform grid and
    /// absent rows become missing.
    pub fn load_csv(stations_path: &Path, readings_path: &Path) -> Result<Self> {
        let stations = StationSet::read_csv(stations_path)?;
        let shown = readings_path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(readings_path)
            .map_err(|e| csv_error(&shown, e))?;
        let headers = rdr.headers().map_err(|e| csv_error(&shown, e))?.clone();
        if headers.len() < 3 || &headers[0] != "timestamp" || &headers[1] != "station_id" {
            return Err(Error::Parse {
                path: shown,
                line: 1,
                message: "expected header timestamp,station_id,<measurement...>".into(),
            });
        }
        let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let d = names.len();
        let mut rows: BTreeMap<NaiveDateTime, Vec<(usize, Vec<Option<f64>>, u64)>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(&shown, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            let parse_err = |message: String| Error::Parse {
                path: shown.clone(),
                line,
                message,
            };
            let ts = parse_timestamp(&rec[0]).ok_or_else(|| parse_err(format!("bad timestamp {:?}", &rec[0])))?;
            let station = stations
                .index_of(&rec[1])
                .ok_or_else(|| parse_err(format!("unknown station id {:?}", &rec[1])))?;
            let mut vals = Vec::with_capacity(d);
            for (k, cell) in rec.iter().skip(2).enumerate() {
                if cell.is_empty() {
                    vals.push(None);
                } else {
                    let v: f64 = cell
                        .parse()
                        .map_err(|e| parse_err(format!("bad value for {}: {e}", names[k])))?;
                    if !v.is_finite() {
                        return Err(parse_err(format!("non-finite value for {}", names[k])));
                    }
                    vals.push(Some(v));
                }
            }
            rows.entry(ts).or_default().push((station, vals, line));
        }
        let times: Vec<NaiveDateTime> = rows.keys().copied().collect();
        let timestamps = infer_grid(&times).map_err(|message| Error::Parse {
            path: shown.clone(),
            line: 0,
            message,
        })?;
        let step = timestamps.get(1).map(|t| *t - timestamps[0]);
        let n = stations.len();
        let mut values = vec![0.0; timestamps.len() * n * d];
        let mut observed = vec![false; values.len()];
        let mut seen = vec![false; timestamps.len() * n];
        for (ts, entries) in rows {
            let t = match step {
                Some(s) => ((ts - timestamps[0]).num_seconds() / s.num_seconds()) as usize,
                None => 0,
            };
            for (station, vals, line) in entries {
                if std::mem::replace(&mut seen[t * n + station], true) {
                    return Err(Error::Parse {
                        path: shown.clone(),
                        line,
                        message: format!("duplicate reading for station {} at {ts}", stations.get(station).id),
                    });
                }
                for (k, v) in vals.into_iter().enumerate() {
                    if let Some(v) = v {
                        values[(t * n + station) * d + k] = v;
                        observed[(t * n + station) * d + k] = true;
                    }
                }
            }
        }
        Self::new(stations, timestamps, names, values, observed)
    }

    /// Writes both tables; only observed rows' values are filled in.
    pub fn write_csv(&self, stations_path: &Path, readings_path: &Path) -> Result<()> {
        self.stations.write_csv(stations_path)?;
        let shown = readings_path.display().to_string();
        let mut w = csv::Writer::from_path(readings_path).map_err(|e| csv_error(&shown, e))?;
        let mut header = vec!["timestamp".to_string(), "station_id".to_string()];
        header.extend(self.measurement_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_error(&shown, e))?;
        for (t, ts) in self.timestamps.iter().enumerate() {
            let stamp = format_timestamp(ts);
            for (n, st) in self.stations.iter().enumerate() {
                let mut rec = vec![stamp.clone(), st.id.clone()];
                for d in 0..self.n_measurements() {
                    rec.push(self.value(t, n, d).map(|v| format!("{v:?}")).unwrap_or_default());
                }
                w.write_record(&rec).map_err(|e| csv_error(&shown, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(readings_path, e))
    }
}

/// Smallest spacing that divides every gap; the full grid from first to last.
fn infer_grid(times: &[NaiveDateTime]) -> std::result::Result<Vec<NaiveDateTime>, String> {
    let (first, last) = match (times.first(), times.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err("no readings".into()),
    };
    if times.len() == 1 {
        return Ok(vec![first]);
    }
    let gaps: Vec<i64> = times.windows(2).map(|w| (w[1] - w[0]).num_seconds()).collect();
    let step = *gaps.iter().min().expect("non-empty");
    if step <= 0 {
        return Err("timestamps must have positive spacing".into());
    }
    if let Some(bad) = gaps.iter().find(|&&g| g % step != 0) {
        return Err(format!(
            "non-uniform timestamps: gap of {bad} s is not a multiple of the {step} s step"
        ));
    }
    let count = ((last - first).num_seconds() / step) as usize + 1;
    Ok((0..count)
        .map(|i| first + TimeDelta::seconds(step * i as i64))
        .collect())
}

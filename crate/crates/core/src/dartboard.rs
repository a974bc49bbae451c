//! Dartboard partition of each station's surroundings.
//!
//! Around every query station, concentric circles and evenly spaced lines
//! through the station cut the plane into `rings × sectors` annular sectors.
//! Region 0 holds the query station alone; a neighbour falls into region
//! `1 + ring · sectors + sector`, or into none when it lies beyond the
//! outermost circle. Pooling a feature matrix over region members realizes
//! the row-stochastic projection `R_i = A_i · P`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub latitude: f64,
    pub longitude: f64,
}

/// Ordered station metadata; the order is the canonical station index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationSet {
    stations: Vec<Station>,
}

impl StationSet {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &stations {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate station id {}", s.id)));
            }
            if !(-90.0..=90.0).contains(&s.latitude) || !(-180.0..=180.0).contains(&s.longitude) {
                return Err(Error::Validation(format!(
                    "station {} has out-of-range coordinates ({}, {})",
                    s.id, s.latitude, s.longitude
                )));
            }
        }
        Ok(Self { stations })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn get(&self, i: usize) -> &Station {
        &self.stations[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Station> {
        self.stations.iter()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    /// Keeps the stations at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> StationSet {
        StationSet {
            stations: indices.iter().map(|&i| self.stations[i].clone()).collect(),
        }
    }

    /// Reads `station_id,latitude,longitude` rows.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let shown = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(&shown, e))?;
        let headers = rdr.headers().map_err(|e| csv_error(&shown, e))?.clone();
        let expected = ["station_id", "latitude", "longitude"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse {
                path: shown,
                line: 1,
                message: format!("expected header {}", expected.join(",")),
            });
        }
        let mut stations = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(&shown, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |k: usize| -> Result<f64> {
                rec[k].parse::<f64>().map_err(|e| Error::Parse {
                    path: shown.clone(),
                    line,
                    message: format!("bad {}: {e}", expected[k]),
                })
            };
            stations.push(Station {
                id: rec[0].to_string(),
                latitude: num(1)?,
                longitude: num(2)?,
            });
        }
        Self::new(stations)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let shown = path.display().to_string();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(&shown, e))?;
        w.write_record(["station_id", "latitude", "longitude"])
            .map_err(|e| csv_error(&shown, e))?;
        for s in &self.stations {
            w.write_record([s.id.clone(), s.latitude.to_string(), s.longitude.to_string()])
                .map_err(|e| csv_error(&shown, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_string(),
        line,
        message: e.to_string(),
    }
}

/// Great-circle distance on a 6371 km sphere.
pub fn haversine_km(a: &Station, b: &Station) -> f64 {
    let (p1, p2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dp = p2 - p1;
    let dl = (b.longitude - a.longitude).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Symmetric `N × N` haversine table with a zero diagonal.
pub fn pairwise_distance_km(stations: &StationSet) -> Vec<Vec<f64>> {
    let n = stations.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = haversine_km(stations.get(i), stations.get(j));
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Initial great-circle bearing from `from` to `to`: degrees in `[0, 360)`,
/// north = 0, clockwise.
pub fn bearing_deg(from: &Station, to: &Station) -> Result<f64> {
    if from.latitude == to.latitude && from.longitude == to.longitude {
        return Err(Error::UndefinedBearing);
    }
    let (p1, p2) = (from.latitude.to_radians(), to.latitude.to_radians());
    let dl = (to.longitude - from.longitude).to_radians();
    let y = dl.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
    let deg = y.atan2(x).to_degrees().rem_euclid(360.0);
    Ok(if deg >= 360.0 { 0.0 } else { deg })
}

/// Ring radii and sector layout of the partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DartboardSpec {
    pub radii_km: Vec<f64>,
    pub n_sectors: usize,
    #[serde(default)]
    pub sector_offset_deg: f64,
}

impl Default for DartboardSpec {
    fn default() -> Self {
        Self {
            radii_km: vec![50.0, 200.0],
            n_sectors: 8,
            sector_offset_deg: 0.0,
        }
    }
}

impl DartboardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radii_km.is_empty() {
            return Err(Error::Config("dartboard needs at least one radius".into()));
        }
        if self.radii_km.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("dartboard radii must be positive".into()));
        }
        if self.radii_km.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("dartboard radii must be strictly increasing".into()));
        }
        if self.n_sectors == 0 {
            return Err(Error::Config("dartboard needs at least one sector".into()));
        }
        if !self.sector_offset_deg.is_finite() {
            return Err(Error::Config("sector offset must be finite".into()));
        }
        Ok(())
    }

    pub fn n_rings(&self) -> usize {
        self.radii_km.len()
    }

    /// `rings × sectors + 1`, counting the query station's own region.
    pub fn num_regions(&self) -> usize {
        self.n_rings() * self.n_sectors + 1
    }

    pub fn outer_radius_km(&self) -> f64 {
        *self.radii_km.last().expect("validated")
    }

    /// Region of a neighbour at `distance_km` and `bearing`, or `None` beyond the outer circle.
    pub fn region_for(&self, distance_km: f64, bearing: f64) -> Option<usize> {
        let ring = self.radii_km.iter().position(|&r| distance_km <= r)?;
        let width = 360.0 / self.n_sectors as f64;
        let rel = (bearing - self.sector_offset_deg).rem_euclid(360.0);
        let sector = ((rel / width).floor() as usize).min(self.n_sectors - 1);
        Some(1 + ring * self.n_sectors + sector)
    }
}

/// Region of every station relative to `query`; the query itself is region 0.
pub fn assign_regions(spec: &DartboardSpec, stations: &StationSet, query: usize) -> Result<Vec<Option<usize>>> {
    spec.validate()?;
    let q = stations.get(query);
    stations
        .iter()
        .enumerate()
        .map(|(j, s)| {
            if j == query {
                return Ok(Some(0));
            }
            let d = haversine_km(q, s);
            if d > spec.outer_radius_km() {
                return Ok(None);
            }
            if d == 0.0 {
                // Co-located neighbour: bearing undefined, treat as due north.
                return Ok(spec.region_for(d, 0.0));
            }
            Ok(spec.region_for(d, bearing_deg(q, s)?))
        })
        .collect()
}

/// Sparse realization of the projection matrices `A_i` for all stations.
#[derive(Clone, Debug, PartialEq)]
pub struct DartboardProjection {
    n_stations: usize,
    n_regions: usize,
    /// CSR offsets into `members`, indexed by `i * n_regions + m`.
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl DartboardProjection {
    pub fn build(spec: &DartboardSpec, stations: &StationSet) -> Result<Self> {
        spec.validate()?;
        let n = stations.len();
        let m = spec.num_regions();
        let mut offsets = Vec::with_capacity(n * m + 1);
        let mut members = Vec::new();
        offsets.push(0);
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); m];
        for i in 0..n {
            for b in &mut buckets {
                b.clear();
            }
            for (j, r) in assign_regions(spec, stations, i)?.into_iter().enumerate() {
                if let Some(r) = r {
                    buckets[r].push(j);
                }
            }
            for b in &buckets {
                members.extend_from_slice(b);
                offsets.push(members.len());
            }
        }
        Ok(Self {
            n_stations: n,
            n_regions: m,
            offsets,
            members,
        })
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn members(&self, query: usize, region: usize) -> &[usize] {
        let k = query * self.n_regions + region;
        &self.members[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn count(&self, query: usize, region: usize) -> usize {
        self.members(query, region).len()
    }

    pub fn region_non_empty(&self, query: usize, region: usize) -> bool {
        self.count(query, region) > 0
    }

    /// `N × M` flags, true where the region holds at least one station.
    pub fn region_mask(&self) -> Vec<bool> {
        (0..self.n_stations)
            .flat_map(|i| (0..self.n_regions).map(move |m| (i, m)))
            .map(|(i, m)| self.region_non_empty(i, m))
            .collect()
    }

    /// Region holding `station` relative to `query`.
    pub fn region_of(&self, query: usize, station: usize) -> Option<usize> {
        (0..self.n_regions).find(|&m| self.members(query, m).contains(&station))
    }

    /// Total number of (query, member) pairs; bounds pooling cost.
    pub fn nnz(&self) -> usize {
        self.members.len()
    }

    /// Dense `M × N` averaging matrix `A_i`.
    pub fn dense_matrix(&self, query: usize) -> Tensor {
        let (m, n) = (self.n_regions, self.n_stations);
        let mut a = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let mem = self.members(query, r);
            for &j in mem {
                a.set(&[r, j], 1.0 / mem.len() as f64);
            }
        }
        a
    }

    /// Averages rows of `p` (`N × C`, row-major) into `out` (`N × M × C`).
    pub(crate) fn pool_slice(&self, p: &[f64], c: usize, out: &mut [f64]) {
        let m = self.n_regions;
        for i in 0..self.n_stations {
            for r in 0..m {
                let dst = &mut out[(i * m + r) * c..(i * m + r + 1) * c];
                dst.fill(0.0);
                let mem = self.members(i, r);
                if mem.is_empty() {
                    continue;
                }
                for &j in mem {
                    for (d, s) in dst.iter_mut().zip(&p[j * c..(j + 1) * c]) {
                        *d += s;
                    }
                }
                let inv = 1.0 / mem.len() as f64;
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
    }

    /// Adjoint of [`pool_slice`]: accumulates `g` (`N × M × C`) into `dp` (`N × C`).
    pub(crate) fn unpool_slice(&self, g: &[f64], c: usize, dp: &mut [f64]) {
        let m = self.n_regions;
        for i in 0..self.n_stations {
            for r in 0..m {
                let mem = self.members(i, r);
                if mem.is_empty() {
                    continue;
                }
                let inv = 1.0 / mem.len() as f64;
                let src = &g[(i * m + r) * c..(i * m + r + 1) * c];
                for &j in mem {
                    for (d, s) in dp[j * c..(j + 1) * c].iter_mut().zip(src) {
                        *d += s * inv;
                    }
                }
            }
        }
    }
}

struct PoolOp {
    projection: Arc<DartboardProjection>,
}

impl CustomOp for PoolOp {
    fn name(&self) -> &'static str {
        "dartboard_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let c = *p.shape().last().expect("rank checked");
        let n = self.projection.n_stations;
        let m = self.projection.n_regions;
        let mut dp = Tensor::zeros(p.shape());
        for (gs, ds) in grad.data().chunks(n * m * c).zip(dp.data_mut().chunks_mut(n * c)) {
            self.projection.unpool_slice(gs, c, ds);
        }
        vec![Some(dp)]
    }
}

/// Regional features `R[i] = A_i · P` for `P` shaped `[..., N, C]`, giving
/// `[..., N, M, C]`. Empty regions produce zero rows.
pub fn project_features(g: &mut Graph, projection: &Arc<DartboardProjection>, p: Var) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    let n = projection.n_stations;
    if shape.len() < 2 || shape[shape.len() - 2] != n {
        return Err(Error::dim("project_features", &shape, &[n, 0]));
    }
    let c = shape[shape.len() - 1];
    let m = projection.n_regions;
    let lead: usize = shape[..shape.len() - 2].iter().product();
    let mut out = vec![0.0; lead * n * m * c];
    let src = g.value(p).data();
    for (s, o) in src.chunks(n * c).zip(out.chunks_mut(n * m * c)) {
        projection.pool_slice(s, c, o);
    }
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.extend([m, c]);
    let out = Tensor::new(out_shape, out)?;
    Ok(g.custom(
        vec![p],
        out,
        Box::new(PoolOp {
            projection: Arc::clone(projection),
        }),
    ))
}

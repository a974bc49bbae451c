//! Synthetic station readings from a pollutant field on a periodic grid.
//!
//! The field is advected by a spatially uniform, slowly turning wind
//! (first-order upwind, flux form), diffused (explicit five-point stencil),
//! fed by point sources with bursty emission and removed by first-order
//! decay. Stations sample it bilinearly and report wind alongside.

use chrono::TimeDelta;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{parse_timestamp, ReadingsDataset};
use crate::dartboard::{Station, StationSet};
use crate::error::{Error, Result};

const KM_PER_DEG: f64 = 111.195;

/// Generator settings. Wind direction is the heading the air moves toward,
/// clockwise from north.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_stations: usize,
    /// Side of the square the stations are spread over.
    pub extent_km: f64,
    /// Side of the periodic simulation domain.
    pub domain_km: f64,
    pub grid_cells: usize,
    pub steps: usize,
    pub step_hours: f64,
    pub substeps: usize,
    /// Steps simulated and discarded before recording.
    pub spinup_steps: usize,
    /// Station offset from its grid slot, as a fraction of the slot spacing.
    pub jitter: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    pub wind_speed_kmh: f64,
    pub wind_speed_variation: f64,
    pub wind_direction_deg: f64,
    /// Per-step standard deviation of the wind-direction perturbation.
    pub wind_turn_deg: f64,
    pub diffusivity_km2_per_h: f64,
    pub n_sources: usize,
    /// Mean source strength in concentration units × cells per hour.
    pub emission: f64,
    /// Standard deviation of the per-step log-emission perturbation.
    pub emission_burstiness: f64,
    pub decay_per_hour: f64,
    pub background: f64,
    pub noise_std: f64,
    pub missing_rate: f64,
    pub seed: u64,
    pub start: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_stations: 32,
            extent_km: 600.0,
            domain_km: 960.0,
            grid_cells: 48,
            steps: 2000,
            step_hours: 3.0,
            substeps: 12,
            spinup_steps: 40,
            jitter: 0.3,
            center_lat: 35.0,
            center_lon: 115.0,
            wind_speed_kmh: 15.0,
            wind_speed_variation: 6.0,
            wind_direction_deg: 90.0,
            wind_turn_deg: 12.0,
            diffusivity_km2_per_h: 40.0,
            n_sources: 10,
            emission: 400.0,
            emission_burstiness: 0.2,
            decay_per_hour: 0.04,
            background: 15.0,
            noise_std: 2.0,
            missing_rate: 0.02,
            seed: 7,
            start: "2015-01-01T00:00:00".into(),
        }
    }
}

impl SynthConfig {
    pub fn cell_km(&self) -> f64 {
        self.domain_km / self.grid_cells as f64
    }

    pub fn dt_hours(&self) -> f64 {
        self.step_hours / self.substeps.max(1) as f64
    }

    /// Upper bound on the simulated wind speed.
    pub fn max_speed_kmh(&self) -> f64 {
        self.wind_speed_kmh + 3.0 * self.wind_speed_variation
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stations == 0 || self.grid_cells < 3 || self.steps == 0 || self.substeps == 0 {
            return Err(Error::Config(
                "n_stations, steps and substeps must be positive and grid_cells at least 3".into(),
            ));
        }
        let positive = [
            ("extent_km", self.extent_km),
            ("domain_km", self.domain_km),
            ("step_hours", self.step_hours),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("wind_speed_kmh", self.wind_speed_kmh),
            ("wind_speed_variation", self.wind_speed_variation),
            ("wind_turn_deg", self.wind_turn_deg),
            ("diffusivity_km2_per_h", self.diffusivity_km2_per_h),
            ("emission", self.emission),
            ("emission_burstiness", self.emission_burstiness),
            ("decay_per_hour", self.decay_per_hour),
            ("noise_std", self.noise_std),
            ("jitter", self.jitter),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if self.extent_km > self.domain_km {
            return Err(Error::Config("station extent exceeds the simulation domain".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("missing_rate must lie in [0, 1)".into()));
        }
        if parse_timestamp(&self.start).is_none() {
            return Err(Error::Config(format!("bad start timestamp {:?}", self.start)));
        }
        check_stability(self.cell_km(), self.dt_hours(), self.max_speed_kmh(), self.diffusivity_km2_per_h)
    }
}

/// Explicit-scheme bound: `(|u| + |v|)·dt/dx + 4κ·dt/dx² ≤ 1`, with the
/// speed bound used for both components.
pub fn check_stability(cell_km: f64, dt_hours: f64, max_speed_kmh: f64, diffusivity: f64) -> Result<()> {
    let courant = 2.0 * max_speed_kmh * dt_hours / cell_km;
    let diffusion = 4.0 * diffusivity * dt_hours / (cell_km * cell_km);
    if courant + diffusion > 1.0 {
        return Err(Error::Config(format!(
            "unstable time step: advective number {courant:.3} + diffusive number {diffusion:.3} exceeds 1; \
             increase substeps or coarsen the grid"
        )));
    }
    Ok(())
}

/// Concentration on a periodic `cells × cells` grid; index `j·cells + i`
/// with `i` eastward and `j` northward.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub cells: usize,
    pub cell_km: f64,
    pub values: Vec<f64>,
    scratch: Vec<f64>,
}

impl GridField {
    pub fn new(cells: usize, cell_km: f64) -> Self {
        Self {
            cells,
            cell_km,
            values: vec![0.0; cells * cells],
            scratch: vec![0.0; cells * cells],
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn cell_of(&self, x_km: f64, y_km: f64) -> usize {
        let g = self.cells as f64;
        let i = (x_km / self.cell_km).floor().rem_euclid(g) as usize;
        let j = (y_km / self.cell_km).floor().rem_euclid(g) as usize;
        j * self.cells + i
    }

    /// One explicit transport step with wind `(u, v)` in km/h (east, north).
    pub fn transport(&mut self, u: f64, v: f64, diffusivity: f64, dt: f64) -> Result<()> {
        check_stability(self.cell_km, dt, u.abs().max(v.abs()), diffusivity)?;
        let n = self.cells;
        let cx = u * dt / self.cell_km;
        let cy = v * dt / self.cell_km;
        let kd = diffusivity * dt / (self.cell_km * self.cell_km);
        let c = &self.values;
        let at = |i: usize, j: usize| c[j * n + i];
        for j in 0..n {
            let (jn, js) = ((j + 1) % n, (j + n - 1) % n);
            for i in 0..n {
                let (ie, iw) = ((i + 1) % n, (i + n - 1) % n);
                let here = at(i, j);
                // Upwind fluxes through the east/west and north/south faces.
                let fe = if cx >= 0.0 { cx * here } else { cx * at(ie, j) };
                let fw = if cx >= 0.0 { cx * at(iw, j) } else { cx * here };
                let fn_ = if cy >= 0.0 { cy * here } else { cy * at(i, jn) };
                let fs = if cy >= 0.0 { cy * at(i, js) } else { cy * here };
                let lap = at(ie, j) + at(iw, j) + at(i, jn) + at(i, js) - 4.0 * here;
                self.scratch[j * n + i] = here - (fe - fw) - (fn_ - fs) + kd * lap;
            }
        }
        std::mem::swap(&mut self.values, &mut self.scratch);
        Ok(())
    }

    pub fn decay(&mut self, rate_per_hour: f64, dt: f64) {
        let f = (-rate_per_hour * dt).exp();
        self.values.iter_mut().for_each(|c| *c *= f);
    }

    /// Bilinear interpolation between cell centres, periodic.
    pub fn sample(&self, x_km: f64, y_km: f64) -> f64 {
        let n = self.cells;
        let g = n as f64;
        let fx = (x_km / self.cell_km - 0.5).rem_euclid(g);
        let fy = (y_km / self.cell_km - 0.5).rem_euclid(g);
        let (i0, j0) = (fx.floor() as usize % n, fy.floor() as usize % n);
        let (i1, j1) = ((i0 + 1) % n, (j0 + 1) % n);
        let (ax, ay) = (fx - fx.floor(), fy - fy.floor());
        let c = |i: usize, j: usize| self.values[j * n + i];
        (1.0 - ay) * ((1.0 - ax) * c(i0, j0) + ax * c(i1, j0)) + ay * ((1.0 - ax) * c(i0, j1) + ax * c(i1, j1))
    }
}

/// Station positions in domain kilometres on a jittered square lattice
/// centred in the domain.
pub fn station_layout(config: &SynthConfig, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let side = (config.n_stations as f64).sqrt().ceil() as usize;
    let spacing = config.extent_km / side as f64;
    let origin = 0.5 * (config.domain_km - config.extent_km);
    (0..config.n_stations)
        .map(|k| {
            let (a, b) = ((k % side) as f64, (k / side) as f64);
            let jx = config.jitter * spacing * rng.random_range(-0.5..0.5);
            let jy = config.jitter * spacing * rng.random_range(-0.5..0.5);
            (origin + (a + 0.5) * spacing + jx, origin + (b + 0.5) * spacing + jy)
        })
        .collect()
}

fn to_station(config: &SynthConfig, k: usize, (x, y): (f64, f64)) -> Station {
    let half = 0.5 * config.domain_km;
    let lat = config.center_lat + (y - half) / KM_PER_DEG;
    let lon = config.center_lon + (x - half) / (KM_PER_DEG * config.center_lat.to_radians().cos());
    Station {
        id: format!("S{k:03}"),
        latitude: lat,
        longitude: lon,
    }
}

struct Source {
    /// The 3×3 block of cells the emission is spread over.
    footprint: [usize; 9],
    rate: f64,
    log_burst: f64,
}

/// Runs the simulation and samples it at the stations. Measurements are
/// `pm25`, `wind_speed` (km/h) and the sine/cosine of the wind heading.
pub fn synth_generate(config: &SynthConfig) -> Result<ReadingsDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let positions = station_layout(config, &mut rng);
    let stations = StationSet::new(
        positions
            .iter()
            .enumerate()
            .map(|(k, &p)| to_station(config, k, p))
            .collect(),
    )?;
    let mut field = GridField::new(config.grid_cells, config.cell_km());
    let mut sources: Vec<Source> = (0..config.n_sources)
        .map(|_| {
            let x = rng.random_range(0.0..config.domain_km);
            let y = rng.random_range(0.0..config.domain_km);
            let mut footprint = [0; 9];
            for (k, f) in footprint.iter_mut().enumerate() {
                let (di, dj) = ((k % 3) as f64 - 1.0, (k / 3) as f64 - 1.0);
                *f = field.cell_of(x + di * field.cell_km, y + dj * field.cell_km);
            }
            Source {
                footprint,
                rate: config.emission * rng.random_range(0.5..1.5),
                log_burst: 0.0,
            }
        })
        .collect();

    let dt = config.dt_hours();
    let max_speed = config.max_speed_kmh();
    let mut speed_dev = 0.0f64;
    let mut dir_dev = 0.0f64;
    let n = stations.len();
    let d = 4;
    let mut values = Vec::with_capacity(config.steps * n * d);
    let mut observed = Vec::with_capacity(values.capacity());

    for step in 0..config.spinup_steps + config.steps {
        speed_dev = 0.9 * speed_dev + (1.0f64 - 0.81).sqrt() * std_normal.sample(&mut rng);
        dir_dev = 0.95 * dir_dev + config.wind_turn_deg * std_normal.sample(&mut rng);
        let speed = (config.wind_speed_kmh + config.wind_speed_variation * speed_dev).clamp(0.0, max_speed);
        let heading = (config.wind_direction_deg + dir_dev).to_radians();
        let (u, v) = (speed * heading.sin(), speed * heading.cos());
        for s in &mut sources {
            s.log_burst = 0.9 * s.log_burst + config.emission_burstiness * std_normal.sample(&mut rng);
        }
        let hour = step as f64 * config.step_hours;
        let diurnal = 1.0 + 0.5 * (2.0 * std::f64::consts::PI * hour / 24.0).sin();
        for _ in 0..config.substeps {
            field.transport(u, v, config.diffusivity_km2_per_h, dt)?;
            for s in &sources {
                let amount = dt * s.rate * diurnal * s.log_burst.exp() / 9.0;
                for &cell in &s.footprint {
                    field.values[cell] += amount;
                }
            }
            field.decay(config.decay_per_hour, dt);
        }
        if step < config.spinup_steps {
            continue;
        }
        for &(x, y) in &positions {
            let pm = (config.background + field.sample(x, y) + config.noise_std * std_normal.sample(&mut rng)).max(0.0);
            let ws = (speed + 0.1 * config.noise_std * std_normal.sample(&mut rng)).max(0.0);
            for value in [pm, ws, heading.sin(), heading.cos()] {
                let keep = config.missing_rate == 0.0 || rng.random::<f64>() >= config.missing_rate;
                values.push(if keep { value } else { 0.0 });
                observed.push(keep);
            }
        }
    }
    let start = parse_timestamp(&config.start).expect("validated");
    let step = TimeDelta::seconds((config.step_hours * 3600.0).round() as i64);
    let timestamps = (0..config.steps).map(|t| start + step * t as i32).collect();
    let names = ["pm25", "wind_speed", "wind_dir_sin", "wind_dir_cos"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    ReadingsDataset::new(stations, timestamps, names, values, observed)
}

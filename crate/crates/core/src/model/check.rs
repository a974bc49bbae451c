//! Finite-difference suite over tiny whole-model configurations.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use super::network::{AirFormerModel, Batch, Mode};
use crate::dartboard::{DartboardProjection, DartboardSpec, Station, StationSet};
use crate::error::Result;
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Tensor};

/// Four stations, six input steps, two blocks of width eight.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        hidden: 8,
        heads: 2,
        window_sizes: vec![3, 6],
        dartboard: DartboardSpec {
            radii_km: vec![30.0, 120.0],
            n_sectors: 4,
            sector_offset_deg: 0.0,
        },
        input_steps: 6,
        horizon: 2,
        measurements: 2,
        outputs: 1,
        ..ModelConfig::default()
    }
}

pub fn tiny_stations() -> StationSet {
    let coords = [(30.0, 114.0), (30.1, 114.2), (29.8, 114.5), (30.6, 113.9)];
    StationSet::new(
        coords
            .iter()
            .enumerate()
            .map(|(i, &(latitude, longitude))| Station {
                id: format!("T{i}"),
                latitude,
                longitude,
            })
            .collect(),
    )
    .expect("distinct ids")
}

/// Random batch with roughly a tenth of the entries unobserved.
pub fn random_batch(config: &ModelConfig, batch: usize, stations: usize, rng: &mut impl Rng) -> Batch {
    let (t, tau, d, o) = (config.input_steps, config.horizon, config.measurements, config.outputs);
    let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
    let x_target = normal(&[batch, t, stations, d]);
    let y = normal(&[batch, tau, stations, o]);
    let mask_x = Tensor::from_fn(&[batch, t, stations, d], |_| f64::from(rng.random::<f64>() > 0.1));
    let y_mask = Tensor::from_fn(&[batch, tau, stations, o], |_| f64::from(rng.random::<f64>() > 0.1));
    let mut x = Vec::with_capacity(batch * t * stations * 2 * d);
    for row in 0..batch * t * stations {
        let vals = &x_target.data()[row * d..(row + 1) * d];
        let obs = &mask_x.data()[row * d..(row + 1) * d];
        x.extend(vals.iter().zip(obs).map(|(v, m)| v * m));
        x.extend_from_slice(obs);
    }
    let x_target = Tensor::from_fn(x_target.shape(), |i| x_target.data()[i] * mask_x.data()[i]);
    Batch {
        x: Tensor::new(vec![batch, t, stations, 2 * d], x).expect("sized"),
        x_target,
        x_mask: mask_x,
        y,
        y_mask,
    }
}

/// Checks the joint loss of `config` on a random batch with frozen latent noise.
pub fn model_grad_check(config: ModelConfig, seed: u64, check: GradCheckConfig) -> Result<GradCheckReport> {
    let stations = tiny_stations();
    let projection = Arc::new(DartboardProjection::build(&config.dartboard, &stations)?);
    let mut model = AirFormerModel::new(ModelConfig { seed, ..config })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let batch = random_batch(&model.config, 2, stations.len(), &mut rng);
    let noise = model.sample_noise(&mut rng, 2, stations.len());
    let mut store = std::mem::take(&mut model.params);
    let report = grad_check(
        &mut store,
        |g, s| Ok(model.loss(g, s, &batch, &projection, Mode::Sample(&noise))?.total),
        check,
    );
    model.params = store;
    report
}

/// The full tiny model and its two ablations.
pub fn grad_check_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let full = tiny_config();
    let variants = [
        ("full", full.clone()),
        ("without_dsmsa", ModelConfig { use_dsmsa: false, ..full.clone() }),
        ("without_stochastic", ModelConfig { use_stochastic: false, ..full }),
    ];
    variants
        .into_iter()
        .map(|(name, cfg)| Ok((name, model_grad_check(cfg, seed, GradCheckConfig::default())?)))
        .collect()
}

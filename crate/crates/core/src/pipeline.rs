//! End-to-end experiment: configuration, data preparation, the training
//! loop, evaluation in original units and forecasting from a checkpoint.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dartboard::{DartboardProjection, StationSet};
use crate::data::{
    chronological_split, filter_by_missing_rate, synth_generate, window_starts, Direction, NormStats, PreparedSplit,
    ReadingsDataset, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{default_buckets, validate_buckets, HorizonBucket, MetricReport, ReportBuilder, SuddenChangeRule};
use crate::model::{checkpoint, learning_rate_at, train_step, Adam, AirFormerModel, LossRecord, ModelConfig};

/// Where readings come from and how they are split and windowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Station table; together with `readings_csv` replaces the generator.
    pub stations_csv: Option<PathBuf>,
    pub readings_csv: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Stations whose target missing rate reaches this value are dropped.
    pub missing_threshold: f64,
    pub split: [f64; 3],
    pub train_stride: usize,
    pub eval_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            stations_csv: None,
            readings_csv: None,
            synth: SynthConfig::default(),
            missing_threshold: 0.2,
            split: [0.5, 0.25, 0.25],
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Caps the batches per epoch; all windows are used when absent.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            max_batches_per_epoch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Forecast-step buckets; three equal groups when absent.
    pub buckets: Option<Vec<HorizonBucket>>,
    pub sudden_change: SuddenChangeRule,
}

/// Everything a run needs; one TOML file with `[model]`, `[data]`,
/// `[data.synth]`, `[train]` and `[eval]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn buckets(&self) -> Vec<HorizonBucket> {
        self.eval
            .buckets
            .clone()
            .unwrap_or_else(|| default_buckets(self.model.horizon))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        validate_buckets(&self.buckets(), self.model.horizon)?;
        if self.data.train_stride == 0 || self.data.eval_stride == 0 {
            return Err(Error::Config("window strides must be positive".into()));
        }
        if self.data.stations_csv.is_some() != self.data.readings_csv.is_some() {
            return Err(Error::Config("stations_csv and readings_csv must be given together".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Filtered dataset, its splits and everything derived from the training split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: ReadingsDataset,
    pub projection: Arc<DartboardProjection>,
    pub stats: NormStats,
    pub splits: [ReadingsDataset; 3],
    pub prepared: [PreparedSplit; 3],
}

impl PreparedData {
    pub fn raw(&self, split: Split) -> &ReadingsDataset {
        &self.splits[split.index()]
    }

    pub fn normalized(&self, split: Split) -> &PreparedSplit {
        &self.prepared[split.index()]
    }
}

pub fn load_dataset(config: &DataConfig) -> Result<ReadingsDataset> {
    match (&config.stations_csv, &config.readings_csv) {
        (Some(s), Some(r)) => ReadingsDataset::load_csv(s, r),
        _ => synth_generate(&config.synth),
    }
}

/// Filters stations, splits chronologically, fits normalization on the
/// training split and builds the dartboard projection.
pub fn prepare_data(config: &ExperimentConfig, dataset: &ReadingsDataset) -> Result<PreparedData> {
    config.validate()?;
    if dataset.n_measurements() != config.model.measurements {
        return Err(Error::Config(format!(
            "dataset has {} measurements, model expects {}",
            dataset.n_measurements(),
            config.model.measurements
        )));
    }
    let dataset = filter_by_missing_rate(dataset, config.data.missing_threshold)?;
    let span = config.model.input_steps + config.model.horizon;
    let (train, val, test) = chronological_split(&dataset, config.data.split, span)?;
    let stats = NormStats::fit(&train)?;
    let prepared = [
        PreparedSplit::new(&train, &stats)?,
        PreparedSplit::new(&val, &stats)?,
        PreparedSplit::new(&test, &stats)?,
    ];
    let projection = Arc::new(DartboardProjection::build(&config.model.dartboard, &dataset.stations)?);
    Ok(PreparedData {
        dataset,
        projection,
        stats,
        splits: [train, val, test],
        prepared,
    })
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub bucket: String,
    pub metric: String,
    pub value: Option<f64>,
    pub count: usize,
}

pub fn report_rows(epoch: usize, split: Split, report: &MetricReport) -> Vec<MetricsRow> {
    report
        .rows
        .iter()
        .flat_map(|r| {
            [("mae", r.mae), ("rmse", r.rmse)].map(|(metric, value)| MetricsRow {
                epoch,
                split: split.name().into(),
                bucket: r.bucket.clone(),
                metric: metric.into(),
                value,
                count: r.count,
            })
        })
        .collect()
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::dartboard::csv_error(&path.display().to_string(), e))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| crate::dartboard::csv_error(&path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Forecasts every window of `split` and scores the target measurement in
/// original units.
pub fn evaluate(
    model: &AirFormerModel,
    data: &PreparedData,
    split: Split,
    stride: usize,
    buckets: Vec<HorizonBucket>,
    rule: SuddenChangeRule,
) -> Result<MetricReport> {
    let cfg = &model.config;
    let prepared = data.normalized(split);
    let raw = data.raw(split);
    let starts = window_starts(prepared.len_time, cfg.input_steps, cfg.horizon, stride);
    if starts.is_empty() {
        return Err(Error::EmptyDataset(format!("{} split has no complete window", split.name())));
    }
    let n = prepared.n_stations;
    let target = raw.target_index();
    let mut builder = ReportBuilder::new(buckets, rule);
    for chunk in starts.chunks(cfg.batch_size) {
        let batch = prepared.batch(chunk, cfg.input_steps, cfg.horizon, cfg.outputs)?;
        let pred = model.predict_batch(&batch.x, &data.projection)?;
        for (b, &s) in chunk.iter().enumerate() {
            let mut p = Vec::with_capacity(cfg.horizon * n);
            let mut truth = Vec::with_capacity(p.capacity());
            let mut seen = Vec::with_capacity(p.capacity());
            for t in 0..cfg.horizon {
                for st in 0..n {
                    let z = pred.get(&[b, t, st, target]);
                    p.push(data.stats.apply(target, z, Direction::Inverse));
                    let step = s + cfg.input_steps + t;
                    truth.push(raw.value(step, st, target).unwrap_or(0.0));
                    seen.push(raw.is_observed(step, st, target));
                }
            }
            builder.add_window(&p, &truth, &seen, n)?;
        }
    }
    Ok(builder.finish())
}

/// Metadata stored with checkpoints so forecasts can run on raw readings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub stats: NormStats,
    pub stations: StationSet,
    pub measurement_names: Vec<String>,
}

impl RunMetadata {
    pub fn from_data(data: &PreparedData) -> Self {
        Self {
            stats: data.stats.clone(),
            stations: data.dataset.stations.clone(),
            measurement_names: data.dataset.measurement_names.clone(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("metadata serializes")
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub learning_rate: f64,
    pub batches: usize,
    pub mean: LossRecord,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AirFormerModel,
    pub rows: Vec<MetricsRow>,
    pub epochs: Vec<EpochSummary>,
}

/// Trains for `config.train.epochs` epochs with per-epoch validation.
/// Initialization, shuffling and latent noise all derive from
/// `config.model.seed`.
pub fn train(
    config: &ExperimentConfig,
    data: &PreparedData,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    let mut model = AirFormerModel::new(config.model.clone())?;
    let cfg = model.config.clone();
    let mut optimizer = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let train_split = data.normalized(Split::Train);
    let mut starts = window_starts(train_split.len_time, cfg.input_steps, cfg.horizon, config.data.train_stride);
    if starts.is_empty() {
        return Err(Error::EmptyDataset("training split has no complete window".into()));
    }
    let mut rows = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..config.train.epochs {
        let lr = learning_rate_at(&cfg, epoch);
        starts.shuffle(&mut rng);
        let mut sum = LossRecord::default();
        let mut batches = 0;
        let limit = config.train.max_batches_per_epoch.unwrap_or(usize::MAX);
        for chunk in starts.chunks(cfg.batch_size).take(limit) {
            let batch = train_split.batch(chunk, cfg.input_steps, cfg.horizon, cfg.outputs)?;
            let r = train_step(&mut model, &mut optimizer, &batch, &data.projection, &mut rng, lr)?;
            sum.total += r.total;
            sum.pred += r.pred;
            sum.rec += r.rec;
            sum.kl += r.kl;
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let mean = LossRecord {
            total: sum.total / k,
            pred: sum.pred / k,
            rec: sum.rec / k,
            kl: sum.kl / k,
        };
        for (metric, value) in [
            ("learning_rate", lr),
            ("loss", mean.total),
            ("l_pred", mean.pred),
            ("l_rec", mean.rec),
            ("l_kl", mean.kl),
        ] {
            rows.push(MetricsRow {
                epoch,
                split: Split::Train.name().into(),
                bucket: "all".into(),
                metric: metric.into(),
                value: Some(value),
                count: batches,
            });
        }
        let report = evaluate(
            &model,
            data,
            Split::Validation,
            config.data.eval_stride,
            config.buckets(),
            config.eval.sudden_change,
        )?;
        rows.extend(report_rows(epoch, Split::Validation, &report));
        let summary = EpochSummary {
            epoch,
            learning_rate: lr,
            batches,
            mean,
            val_mae: report.overall_mae().ok(),
        };
        on_epoch(&summary);
        epochs.push(summary);
    }
    Ok(TrainOutcome { model, rows, epochs })
}

/// Saves a checkpoint carrying the normalization and station metadata.
pub fn save_checkpoint(model: &AirFormerModel, data: &PreparedData, path: &Path) -> Result<()> {
    checkpoint::save(model, &RunMetadata::from_data(data).to_json(), path)
}

pub fn load_checkpoint(path: &Path) -> Result<(AirFormerModel, RunMetadata)> {
    let (model, meta) = checkpoint::load(path)?;
    let run: RunMetadata = serde_json::from_value(meta.extra).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("run metadata: {e}"),
    })?;
    Ok((model, run))
}

/// Forecast in original units from the last `T` steps of `readings`, whose
/// stations must include every checkpoint station. Returns `[τ][N][D_out]`.
pub fn forecast(model: &AirFormerModel, meta: &RunMetadata, readings: &ReadingsDataset) -> Result<Vec<Vec<Vec<f64>>>> {
    let cfg = &model.config;
    if readings.measurement_names != meta.measurement_names {
        return Err(Error::Validation(format!(
            "readings carry measurements {:?}, checkpoint expects {:?}",
            readings.measurement_names, meta.measurement_names
        )));
    }
    if readings.len_time() < cfg.input_steps {
        return Err(Error::Validation(format!(
            "forecast needs {} input steps, readings hold {}",
            cfg.input_steps,
            readings.len_time()
        )));
    }
    let order: Vec<usize> = meta
        .stations
        .iter()
        .map(|s| {
            readings
                .stations
                .index_of(&s.id)
                .ok_or_else(|| Error::Validation(format!("readings lack station {}", s.id)))
        })
        .collect::<Result<_>>()?;
    let window = readings
        .select_stations(&order)
        .slice_time(readings.len_time() - cfg.input_steps, cfg.input_steps)?;
    let prepared = PreparedSplit::new(&window, &meta.stats)?;
    let x = prepared.input_window(0, cfg.input_steps)?;
    let projection = Arc::new(DartboardProjection::build(&cfg.dartboard, &meta.stations)?);
    let pred = model.predict_batch(&x, &projection)?;
    let n = meta.stations.len();
    Ok((0..cfg.horizon)
        .map(|t| {
            (0..n)
                .map(|st| {
                    (0..cfg.outputs)
                        .map(|k| meta.stats.apply(k, pred.get(&[0, t, st, k]), Direction::Inverse))
                        .collect()
                })
                .collect()
        })
        .collect())
}

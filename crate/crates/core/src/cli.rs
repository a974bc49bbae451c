//! Command-line front end: `train`, `evaluate`, `forecast`, `gen-data` and
//! `grad-check`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{format_timestamp, synth_generate, ReadingsDataset};
use crate::error::{Error, Result};
use crate::model::check::grad_check_suite;
use crate::pipeline::{
    evaluate, forecast, load_checkpoint, load_dataset, prepare_data, report_rows, save_checkpoint, train,
    write_metrics_csv, ExperimentConfig, Split,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval_metrics.csv";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const STATIONS_FILE: &str = "stations.csv";
pub const READINGS_FILE: &str = "readings.csv";

#[derive(Debug, Parser)]
#[command(name = "airformer", version, about = "Station-level air quality forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the checkpoint plus per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path; defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of the configured data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Forecast from the last input window of a readings file.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stations: PathBuf,
        #[arg(long)]
        readings: PathBuf,
    },
    /// Write the synthetic dataset as `stations.csv` and `readings.csv`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the tiny model; nonzero exit on failure.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
        cfg.data.synth.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(&common.out)
}

fn run_train(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    let dataset = load_dataset(&cfg.data)?;
    let data = prepare_data(&cfg, &dataset)?;
    let started = Instant::now();
    let outcome = train(&cfg, &data, |e| {
        let mae = e.val_mae.map_or("-".into(), |m| format!("{m:.4}"));
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.5}  l_pred {:.5}  l_rec {:.3}  l_kl {:.3}  val_mae {mae}  ({:.1}s)",
            e.epoch,
            e.learning_rate,
            e.mean.total,
            e.mean.pred,
            e.mean.rec,
            e.mean.kl,
            started.elapsed().as_secs_f64()
        );
    })?;
    let ckpt = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    save_checkpoint(&outcome.model, &data, &ckpt)?;
    let metrics = out.join(METRICS_FILE);
    write_metrics_csv(&outcome.rows, &metrics)?;
    println!("checkpoint: {}", ckpt.display());
    println!("metrics:    {}", metrics.display());
    Ok(())
}

fn run_evaluate(common: &Common, checkpoint: &Path, split: Split) -> Result<()> {
    let mut cfg = load_config(common)?;
    let out = out_dir(common)?;
    let (model, _) = load_checkpoint(checkpoint)?;
    cfg.model = model.config.clone();
    let dataset = load_dataset(&cfg.data)?;
    let data = prepare_data(&cfg, &dataset)?;
    let report = evaluate(
        &model,
        &data,
        split,
        cfg.data.eval_stride,
        cfg.buckets(),
        cfg.eval.sudden_change,
    )?;
    let path = out.join(EVAL_FILE);
    write_metrics_csv(&report_rows(0, split, &report), &path)?;
    println!("{} split", split.name());
    print!("{}", report.to_table());
    println!("metrics: {}", path.display());
    Ok(())
}

fn run_forecast(common: &Common, checkpoint: &Path, stations: &Path, readings: &Path) -> Result<()> {
    let out = out_dir(common)?;
    let (model, meta) = load_checkpoint(checkpoint)?;
    let ds = ReadingsDataset::load_csv(stations, readings)?;
    let pred = forecast(&model, &meta, &ds)?;
    let last = *ds.timestamps.last().expect("forecast checked the length");
    let step = ds
        .step()
        .ok_or_else(|| Error::Validation("readings need at least two timestamps".into()))?;
    let path = out.join(FORECAST_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| crate::dartboard::csv_error(&path.display().to_string(), e))?;
    let mut header = vec!["step".to_string(), "timestamp".into(), "station_id".into()];
    header.extend(meta.measurement_names[..model.config.outputs].iter().cloned());
    let csv_err = |e| crate::dartboard::csv_error(&path.display().to_string(), e);
    w.write_record(&header).map_err(csv_err)?;
    for (k, per_station) in pred.iter().enumerate() {
        let ts = format_timestamp(&(last + step * (k as i32 + 1)));
        for (station, values) in meta.stations.iter().zip(per_station) {
            let mut rec = vec![(k + 1).to_string(), ts.clone(), station.id.clone()];
            rec.extend(values.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("forecast: {}", path.display());
    Ok(())
}

fn run_gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    let ds = synth_generate(&cfg.data.synth)?;
    let (s, r) = (out.join(STATIONS_FILE), out.join(READINGS_FILE));
    ds.write_csv(&s, &r)?;
    println!(
        "{} stations x {} steps written to {} and {}",
        ds.n_stations(),
        ds.len_time(),
        s.display(),
        r.display()
    );
    Ok(())
}

fn run_grad_check(seed: u64) -> Result<bool> {
    let mut ok = true;
    for (name, report) in grad_check_suite(seed)? {
        let worst = report.worst().map_or("-".into(), |p| p.name.clone());
        println!(
            "{:<20} {}  max relative error {:.3e} (tolerance {:.0e}, worst {worst})",
            name,
            if report.passed() { "ok  " } else { "FAIL" },
            report.max_relative_error,
            report.tolerance
        );
        ok &= report.passed();
    }
    Ok(ok)
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train { common, checkpoint } => run_train(common, checkpoint.clone()),
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => run_evaluate(common, checkpoint, (*split).into()),
        Command::Forecast {
            common,
            checkpoint,
            stations,
            readings,
        } => run_forecast(common, checkpoint, stations, readings),
        Command::GenData { common } => run_gen_data(common),
        Command::GradCheck { seed } => match run_grad_check(*seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return 1;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

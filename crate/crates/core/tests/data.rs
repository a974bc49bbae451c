
use airformer::dartboard::{Station, StationSet};
use airformer::data::synth::{check_stability, GridField};
use airformer::data::*;
use airformer::Error;
use chrono::{NaiveDate, TimeDelta};
use proptest::prelude::*;

fn small_synth() -> SynthConfig {
    SynthConfig {
        n_stations: 9,
        steps: 240,
        ..SynthConfig::default()
    }
}

fn toy_dataset(values: Vec<f64>, observed: Vec<bool>, steps: usize, stations: usize) -> ReadingsDataset {
    let set = StationSet::new(
        (0..stations)
            .map(|i| Station {
                id: format!("S{i}"),
                latitude: 30.0 + 0.1 * i as f64,
                longitude: 115.0,
            })
            .collect(),
    )
    .unwrap();
    let t0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let ts = (0..steps).map(|k| t0 + TimeDelta::hours(3 * k as i64)).collect();
    ReadingsDataset::new(set, ts, vec!["pm25".into(), "wind".into()], values, observed).unwrap()
}

#[test]
fn synthetic_csv_round_trip() {
    let ds = synth_generate(&small_synth()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (s, r) = (dir.path().join("s.csv"), dir.path().join("r.csv"));
    ds.write_csv(&s, &r).unwrap();
    let back = ReadingsDataset::load_csv(&s, &r).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn csv_gaps_become_missing_and_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    let (s, r) = (dir.path().join("s.csv"), dir.path().join("r.csv"));
    std::fs::write(&s, "station_id,latitude,longitude\nA,30.0,115.0\nB,30.2,115.1\n").unwrap();
    std::fs::write(
        &r,
        "timestamp,station_id,pm25,wind\n\
         2020-01-01 00:00:00,A,10,1\n\
         2020-01-01 00:00:00,B,20,\n\
         2020-01-01 03:00:00,A,11,2\n\
         2020-01-01 09:00:00,B,40,4\n",
    )
    .unwrap();
    let ds = ReadingsDataset::load_csv(&s, &r).unwrap();
    assert_eq!(ds.len_time(), 4);
    assert_eq!(ds.value(0, 1, 0), Some(20.0));
    assert_eq!(ds.value(0, 1, 1), None);
    assert_eq!(ds.value(2, 0, 0), None);
    assert_eq!(ds.value(3, 1, 0), Some(40.0));
    // A: observed at steps 0, 1; B: at steps 0, 3.
    assert_eq!(ds.missing_rate(0), vec![0.5, 0.5]);
    assert_eq!(ds.missing_rate(1), vec![0.5, 0.75]);
}

#[test]
fn csv_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let (s, r) = (dir.path().join("s.csv"), dir.path().join("r.csv"));
    std::fs::write(&s, "station_id,latitude,longitude\nA,30.0,115.0\n").unwrap();
    std::fs::write(&r, "timestamp,station_id,pm25\n2020-01-01 00:00:00,A,1\n2020-01-01 03:00:00,Z,2\n").unwrap();
    match ReadingsDataset::load_csv(&s, &r) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("unknown station"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn norm_stats_use_observed_training_entries_only() {
    // 4 steps, 1 station, 2 measurements.
    let values = vec![1.0, 10.0, 3.0, 10.0, 1000.0, 20.0, 5.0, 30.0];
    let observed = vec![true, true, true, true, false, true, true, true];
    let ds = toy_dataset(values, observed, 4, 1);
    let stats = NormStats::fit(&ds).unwrap();
    let pm = [1.0f64, 3.0, 5.0];
    let mean = pm.iter().sum::<f64>() / 3.0;
    let std = (pm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((stats.mean[0] - mean).abs() < 1e-12);
    assert!((stats.std[0] - std).abs() < 1e-12);
    assert!((stats.mean[1] - 17.5).abs() < 1e-12);
    for x in [-3.0, 0.0, 42.0] {
        let z = stats.apply(0, x, Direction::Forward);
        assert!((stats.apply(0, z, Direction::Inverse) - x).abs() < 1e-12);
    }
}

#[test]
fn constant_measurement_cannot_be_normalized() {
    let ds = toy_dataset(vec![1.0, 2.0, 1.0, 2.0], vec![true; 4], 2, 1);
    assert!(matches!(NormStats::fit(&ds), Err(Error::Validation(_))));
}

#[test]
fn statistics_do_not_leak_from_later_splits() {
    let base = synth_generate(&small_synth()).unwrap();
    let fractions = [0.5, 0.25, 0.25];
    let (train, _, _) = chronological_split(&base, fractions, 10).unwrap();
    let stats = NormStats::fit(&train).unwrap();
    // Corrupt everything after the training range.
    let bounds = split_bounds(base.len_time(), fractions).unwrap();
    let mut values = base.values().to_vec();
    let per_step = base.n_stations() * base.n_measurements();
    for v in &mut values[bounds[0].1 * per_step..] {
        *v = *v * 7.0 + 300.0;
    }
    let corrupted = ReadingsDataset::new(
        base.stations.clone(),
        base.timestamps.clone(),
        base.measurement_names.clone(),
        values,
        base.observed().to_vec(),
    )
    .unwrap();
    let (train2, _, _) = chronological_split(&corrupted, fractions, 10).unwrap();
    assert_eq!(NormStats::fit(&train2).unwrap(), stats);
    let (a, b) = (PreparedSplit::new(&train, &stats).unwrap(), PreparedSplit::new(&train2, &stats).unwrap());
    let starts = window_starts(a.len_time, 8, 8, 1);
    let (ba, bb) = (a.batch(&starts, 8, 8, 1).unwrap(), b.batch(&starts, 8, 8, 1).unwrap());
    assert_eq!(ba.x, bb.x);
    assert_eq!(ba.y, bb.y);
}

#[test]
fn splits_are_contiguous_and_disjoint() {
    let ds = synth_generate(&small_synth()).unwrap();
    let (a, b, c) = chronological_split(&ds, [0.6, 0.2, 0.2], 10).unwrap();
    assert_eq!(a.len_time() + b.len_time() + c.len_time(), ds.len_time());
    assert_eq!(a.timestamps.last().unwrap().to_owned() + ds.step().unwrap(), b.timestamps[0]);
    assert_eq!(b.timestamps.last().unwrap().to_owned() + ds.step().unwrap(), c.timestamps[0]);
    assert!(chronological_split(&ds, [0.96, 0.02, 0.02], 10).is_err());
}

#[test]
fn missing_rate_filter_drops_sparse_stations() {
    let mut observed = vec![true; 10 * 3 * 2];
    for t in 0..5 {
        observed[(t * 3 + 1) * 2] = false;
    }
    let ds = toy_dataset((0..60).map(f64::from).collect(), observed, 10, 3);
    let kept = filter_by_missing_rate(&ds, 0.5).unwrap();
    let ids: Vec<_> = kept.stations.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids, ["S0", "S2"]);
    assert_eq!(filter_by_missing_rate(&ds, 0.6).unwrap().n_stations(), 3);
}

#[test]
fn batches_zero_impute_and_flag_missing() {
    let mut observed = vec![true; 6 * 2 * 2];
    observed[(2 * 2 + 1) * 2] = false;
    let values: Vec<f64> = (0..24).map(|i| i as f64 * 1.5).collect();
    let ds = toy_dataset(values, observed, 6, 2);
    let stats = NormStats::fit(&ds).unwrap();
    let p = PreparedSplit::new(&ds, &stats).unwrap();
    let batch = p.batch(&[0, 1], 3, 2, 1).unwrap();
    assert_eq!(batch.x.shape(), &[2, 3, 2, 4]);
    assert_eq!(batch.y.shape(), &[2, 2, 2, 1]);
    // Window 0, step 2, station 1: pm25 missing.
    assert_eq!(batch.x.get(&[0, 2, 1, 0]), 0.0);
    assert_eq!(batch.x.get(&[0, 2, 1, 2]), 0.0);
    assert_eq!(batch.x.get(&[0, 2, 1, 3]), 1.0);
    assert_eq!(batch.x_mask.get(&[0, 2, 1, 0]), 0.0);
    // Window 1 targets start at step 4.
    let raw = ds.value(4, 0, 0).unwrap();
    assert!((batch.y.get(&[1, 0, 0, 0]) - stats.apply(0, raw, Direction::Forward)).abs() < 1e-12);
    assert!(p.batch(&[4], 3, 2, 1).is_err());
}

#[test]
fn transport_conserves_mass() {
    let mut f = GridField::new(24, 20.0);
    for (i, v) in f.values.iter_mut().enumerate() {
        *v = ((i * 37) % 11) as f64;
    }
    let before = f.total_mass();
    for k in 0..200 {
        let ang = k as f64 * 0.1;
        f.transport(12.0 * ang.cos(), 12.0 * ang.sin(), 30.0, 0.25).unwrap();
    }
    assert!(((f.total_mass() - before) / before).abs() < 1e-8);
    assert!(f.values.iter().all(|&v| v >= 0.0));
}

#[test]
fn pulse_moves_downwind() {
    let (cells, dx) = (100, 10.0);
    let mut f = GridField::new(cells, dx);
    let start = f.cell_of(100.0, 200.0);
    f.values[start] = 1000.0;
    let (u, dt, steps) = (20.0, 0.2, 50);
    for _ in 0..steps {
        f.transport(u, 0.0, 5.0, dt).unwrap();
    }
    let mass = f.total_mass();
    let cx: f64 = f
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| ((i % cells) as f64 + 0.5) * dx * v)
        .sum::<f64>()
        / mass;
    let cy: f64 = f
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| ((i / cells) as f64 + 0.5) * dx * v)
        .sum::<f64>()
        / mass;
    // Centroid starts at (105, 205) and drifts u·t = 200 km east.
    assert!((cx - 305.0).abs() < 1e-6, "{cx}");
    assert!((cy - 205.0).abs() < 1e-6, "{cy}");
}

#[test]
fn unstable_steps_are_rejected() {
    assert!(check_stability(20.0, 1.0, 15.0, 0.0).is_err());
    assert!(check_stability(20.0, 0.25, 15.0, 10.0).is_ok());
    let mut f = GridField::new(8, 10.0);
    assert!(matches!(f.transport(50.0, 0.0, 0.0, 1.0), Err(Error::Config(_))));
}

#[test]
fn default_synthetic_dataset_shape_and_determinism() {
    let cfg = SynthConfig::default();
    let a = synth_generate(&cfg).unwrap();
    assert_eq!((a.n_stations(), a.len_time(), a.n_measurements()), (32, 2000, 4));
    assert_eq!(a.step(), Some(TimeDelta::hours(3)));
    let b = synth_generate(&cfg).unwrap();
    assert_eq!(a, b);
    let rate: f64 = a.missing_rate(0).iter().sum::<f64>() / 32.0;
    assert!((rate - cfg.missing_rate).abs() < 0.01, "{rate}");
    let c = synth_generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a.values(), c.values());
}

proptest! {
    #[test]
    fn window_enumeration_matches_formula(len in 0usize..300, t in 1usize..30, tau in 1usize..30, stride in 1usize..10) {
        let w = window_starts(len, t, tau, stride);
        let expected = if len >= t + tau { (len - t - tau) / stride + 1 } else { 0 };
        prop_assert_eq!(w.len(), expected);
        prop_assert!(w.iter().all(|&s| s + t + tau <= len && s % stride == 0));
    }

    #[test]
    fn split_bounds_partition(len in 0usize..5000, a in 0.05f64..0.9) {
        let rest = 1.0 - a;
        let b = split_bounds(len, [a, rest / 2.0, rest / 2.0]).unwrap();
        prop_assert_eq!(b[0].0, 0);
        prop_assert_eq!(b[0].1, b[1].0);
        prop_assert_eq!(b[1].1, b[2].0);
        prop_assert_eq!(b[2].1, len);
    }
}

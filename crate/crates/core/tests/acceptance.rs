//! One check per acceptance criterion. Each writes a single
//! `PASS`/`FAIL criterion N` line straight to stderr, so it shows up even
//! when test output is captured.

mod common;

use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use airformer::attention::*;
use airformer::dartboard::*;
use airformer::eval::{sudden_change_mask, SuddenChangeRule};
use airformer::model::check::{grad_check_suite, random_batch, tiny_config, tiny_stations};
use airformer::model::*;
use airformer::numerics::{Activation, Graph, ParamStore, Tensor};
use airformer::pipeline::*;
use airformer::stochastic::{kl_diag_gaussian, GaussianParams};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: String) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {n}: {detail}");
    pass
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_01_gradient_correctness() {
    let _s = serial();
    let t = Instant::now();
    let suite = grad_check_suite(0).unwrap();
    let elapsed = t.elapsed();
    let worst = suite.iter().map(|(_, r)| r.max_relative_error).fold(0.0, f64::max);
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(120);
    let names: Vec<_> = suite.iter().map(|(n, r)| format!("{n} {:.1e}", r.max_relative_error)).collect();
    assert!(report(
        1,
        pass,
        format!("max relative error {worst:.2e} < 1e-4 [{}] in {elapsed:.1?} < 120s", names.join(", "))
    ));
}

#[test]
fn criterion_02_causality() {
    let _s = serial();
    let cfg = tiny_config();
    let stations = tiny_stations();
    let proj = Arc::new(DartboardProjection::build(&cfg.dartboard, &stations).unwrap());
    let model = AirFormerModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = random_batch(&cfg, 2, stations.len(), &mut rng);
    let noise = model.sample_noise(&mut rng, 2, stations.len());
    let run = |x: &Tensor| {
        let b = Batch { x: x.clone(), ..batch.clone() };
        let mut g = Graph::new();
        let l = model.loss(&mut g, &model.params, &b, &proj, Mode::Sample(&noise)).unwrap();
        let states: Vec<Tensor> = l.forward.states.iter().map(|&s| g.value(s).clone()).collect();
        (states, l.per_step_elbo(&g))
    };
    let (s0, e0) = run(&batch.x);
    let sh = batch.x.shape().to_vec();
    let (t_len, per_step) = (sh[1], sh[2] * cfg.hidden);
    let mut violations = 0;
    for _ in 0..100 {
        let cut = rng.random_range(0..t_len - 1);
        let mut x = batch.x.clone();
        for i in 0..x.len() {
            if (i / (sh[2] * sh[3])) % t_len > cut {
                x.data_mut()[i] += rng.random_range(-10.0..10.0);
            }
        }
        let (s1, e1) = run(&x);
        let states_same = s0.iter().zip(&s1).all(|(a, b)| {
            (0..sh[0]).all(|bi| {
                let lo = bi * t_len * per_step;
                let hi = lo + (cut + 1) * per_step;
                a.data()[lo..hi].iter().zip(&b.data()[lo..hi]).all(|(u, v)| u.to_bits() == v.to_bits())
            })
        });
        let elbo_same = (0..=cut).all(|t| e0[t].to_bits() == e1[t].to_bits());
        violations += usize::from(!(states_same && elbo_same));
    }
    assert!(report(
        2,
        violations == 0,
        format!("{violations}/100 future perturbations changed earlier states or per-step ELBO (bitwise)")
    ));
}

#[test]
fn criterion_03_spatial_locality() {
    let _s = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = random_stations(&mut rng, 60, 30.0, 115.0, 3.0);
    let spec = DartboardSpec::default();
    let proj = Arc::new(DartboardProjection::build(&spec, &set).unwrap());
    let (n, c) = (60, 8);
    let mut store = ParamStore::new();
    let layer = DsMsaLayer::new(&mut store, &mut rng, "ds", c, 2, proj.n_regions(), Activation::Gelu).unwrap();
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let o = layer.forward(&mut g, &store, xv, &proj).unwrap();
        g.value(o).clone()
    };
    let x = randn(&mut rng, &[n, c]);
    let base = run(&x);
    let (mut checked, mut changed) = (0, 0);
    for i in 0..n {
        let far: Vec<usize> = (0..n).filter(|&j| proj.region_of(i, j).is_none()).collect();
        if far.is_empty() {
            continue;
        }
        let mut y = x.clone();
        for &j in &far {
            for ch in 0..c {
                y.set(&[j, ch], 1e3 * rng.random_range(-1.0..1.0f64));
            }
        }
        let out = run(&y);
        checked += 1;
        changed += usize::from((0..c).any(|ch| base.get(&[i, ch]).to_bits() != out.get(&[i, ch]).to_bits()));
    }
    assert!(report(
        3,
        checked > 0 && changed == 0,
        format!("{changed}/{checked} query stations changed when only stations beyond the outer radius moved")
    ));
}

#[test]
fn criterion_04_oracle_equivalences() {
    let _s = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let (t, c, heads) = (24, 8, 2);
    let x = randn(&mut rng, &[t, c]);
    let ws: Vec<Tensor> = (0..3).map(|_| randn(&mut rng, &[c, c])).collect();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = MsaWeights {
        w_q: g.constant(ws[0].clone()),
        w_k: g.constant(ws[1].clone()),
        w_v: g.constant(ws[2].clone()),
        heads,
    };
    let x4 = g.reshape(xv, &[1, t, 1, c]).unwrap();
    let q = g.matmul(x4, w.w_q).unwrap();
    let k = g.matmul(x4, w.w_k).unwrap();
    let v = g.matmul(x4, w.w_v).unwrap();
    let win = window_attention(&mut g, q, k, v, t, heads, false).unwrap();
    let literal = dense_msa(x.data(), ws[0].data(), ws[1].data(), ws[2].data(), t, c, heads, |_, _| true);
    let err_a = max_abs_diff(g.value(win).data(), &literal);

    let set = random_stations(&mut rng, 50, 30.0, 115.0, 1.5);
    let spec = DartboardSpec::default();
    let proj = Arc::new(DartboardProjection::build(&spec, &set).unwrap());
    let (n, m, c) = (set.len(), spec.num_regions(), 6);
    let p = randn(&mut rng, &[n, c]);
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let r = project_features(&mut g, &proj, pv).unwrap();
    let got = g.value(r);
    let mut err_b = 0.0f64;
    for i in 0..n {
        let a = proj.dense_matrix(i);
        for reg in 0..m {
            for x in 0..c {
                let dense: f64 = (0..n).map(|j| a.get(&[reg, j]) * p.get(&[j, x])).sum();
                err_b = err_b.max((dense - got.get(&[i, reg, x])).abs());
            }
        }
    }

    let spec3 = DartboardSpec {
        radii_km: vec![50.0, 150.0, 300.0],
        n_sectors: 8,
        sector_offset_deg: 0.0,
    };
    let set = random_stations(&mut rng, 100, 30.0, 115.0, 2.5);
    let mut mismatches = 0;
    for q in 0..set.len() {
        let got = assign_regions(&spec3, &set, q).unwrap();
        for (j, r) in got.iter().enumerate() {
            let want = if j == q {
                Some(0)
            } else {
                let (a, b) = (set.get(q), set.get(j));
                brute_force_region(&spec3, vector_distance_km(a, b), vector_bearing_deg(a, b))
            };
            mismatches += usize::from(*r != want);
        }
    }

    let pass = err_a < 1e-10 && err_b <= 1e-12 && mismatches == 0;
    assert!(report(
        4,
        pass,
        format!(
            "(a) window vs naive {err_a:.1e} < 1e-10; (b) sparse vs dense {err_b:.1e} <= 1e-12; \
             (c) {mismatches} region mismatches over 100 stations"
        )
    ));
}

#[test]
fn criterion_05_region_count() {
    let _s = serial();
    let spec = DartboardSpec {
        radii_km: vec![50.0, 100.0, 200.0],
        n_sectors: 8,
        sector_offset_deg: 0.0,
    };
    let m = spec.num_regions();
    assert!(report(5, m == 25, format!("3 rings x 8 sectors gives M = {m} (want 25)")));
}

/// Stations on a lattice of fixed spacing so that the neighbour count per
/// station stays the same as `n` grows.
fn lattice(n: usize) -> StationSet {
    let cols = (n as f64).sqrt().ceil() as usize;
    StationSet::new(
        (0..n)
            .map(|i| Station {
                id: format!("G{i}"),
                latitude: 20.0 + 0.1 * (i / cols) as f64,
                longitude: 100.0 + 0.1 * (i % cols) as f64,
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn criterion_06_linear_scaling() {
    let _s = serial();
    let spec = DartboardSpec::default();
    let (c, steps) = (16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let layer = DsMsaLayer::new(&mut store, &mut rng, "ds", c, 2, spec.num_regions(), Activation::Gelu).unwrap();
    let mut time_at = |n: usize| {
        let proj = Arc::new(DartboardProjection::build(&spec, &lattice(n)).unwrap());
        let x = randn(&mut rng, &[steps, n, c]);
        let mut runs = Vec::new();
        for _ in 0..5 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let t = Instant::now();
            let o = layer.forward(&mut g, &store, xv, &proj).unwrap();
            runs.push(t.elapsed().as_secs_f64());
            assert!(g.value(o).is_finite());
        }
        (median(runs), proj.nnz() as f64 / n as f64)
    };
    time_at(200);
    let (t1, d1) = time_at(1000);
    let (t2, d2) = time_at(2000);
    let ratio = t2 / t1;
    assert!(report(
        6,
        ratio < 3.0,
        format!(
            "DS-MSA forward N=2000 {:.1}ms / N=1000 {:.1}ms = {ratio:.2} < 3 (neighbours per station {d2:.1} vs {d1:.1})",
            t2 * 1e3,
            t1 * 1e3
        )
    ));
}

#[test]
fn criterion_07_vae_correctness() {
    let _s = serial();
    let t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
    let kl = |mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]| {
        let mut g = Graph::new();
        let q = GaussianParams {
            mean: g.constant(t(mq)),
            log_var: g.constant(t(lq)),
        };
        let p = GaussianParams {
            mean: g.constant(t(mp)),
            log_var: g.constant(t(lp)),
        };
        let a = kl_diag_gaussian(&mut g, q, p).unwrap();
        let b = kl_diag_gaussian(&mut g, q, q).unwrap();
        (g.value(a).item(), g.value(b).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draw = |n: usize, r: f64| (0..n).map(|_| rng.random_range(-r..r)).collect::<Vec<f64>>();
    let (mut negatives, mut nonzero_self, mut min_kl) = (0, 0, f64::INFINITY);
    for _ in 0..10_000 {
        let (mq, lq, mp, lp) = (draw(4, 5.0), draw(4, 6.0), draw(4, 5.0), draw(4, 6.0));
        let (a, b) = kl(&mq, &lq, &mp, &lp);
        negatives += usize::from(a < 0.0);
        nonzero_self += usize::from(b != 0.0);
        min_kl = min_kl.min(a);
    }
    let (half, _) = kl(&[1.0], &[0.0], &[0.0], &[0.0]);
    let err = (half - 0.5).abs();
    let pass = negatives == 0 && nonzero_self == 0 && err < 1e-12;
    assert!(report(
        7,
        pass,
        format!(
            "KL(q||q) nonzero in {nonzero_self}/10000; KL < 0 in {negatives}/10000 (min {min_kl:.3e}); \
             |KL(N(1,1)||N(0,1)) - 0.5| = {err:.1e} < 1e-12"
        )
    ));
}

/// Reduced model used for the ablation ranking on one core.
fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.hidden = 16;
    cfg.model.blocks = 2;
    cfg.model.window_sizes = vec![6, 24];
    cfg.model.batch_size = 16;
    cfg.model.learning_rate = 2e-3;
    cfg.model.elbo_weight = 1e-3;
    cfg.model.lr_halving_epochs = 4;
    cfg.train.epochs = 10;
    cfg.data.train_stride = 2;
    cfg.data.eval_stride = 4;
    cfg
}

#[test]
fn criterion_08_ablation_ranking() {
    let _s = serial();
    let cfg = desk_config();
    let data = prepare_data(&cfg, &load_dataset(&cfg.data).unwrap()).unwrap();
    let t = Instant::now();
    let mut maes: [Vec<f64>; 3] = Default::default();
    for seed in 0..3 {
        for (k, (dsmsa, stochastic)) in [(true, true), (false, true), (true, false)].into_iter().enumerate() {
            let mut c = cfg.clone();
            c.model.seed = seed;
            c.model.use_dsmsa = dsmsa;
            c.model.use_stochastic = stochastic;
            let out = train(&c, &data, |_| {}).unwrap();
            maes[k].push(out.epochs.last().unwrap().val_mae.unwrap());
        }
    }
    let elapsed = t.elapsed();
    let [full, no_ds, no_sto] = maes.map(median);
    let pass = full < no_ds && full < no_sto && elapsed < Duration::from_secs(1800);
    // Reported rather than asserted: the ranking is an empirical outcome.
    report(
        8,
        pass,
        format!(
            "median val MAE full {full:.3} < w/o DS-MSA {no_ds:.3} and < w/o stochastic {no_sto:.3}; \
             {elapsed:.0?} < 1800s"
        ),
    );
}

#[test]
fn criterion_09_overfit_single_batch() {
    let _s = serial();
    let mut cfg = desk_config();
    cfg.model.learning_rate = 3e-3;
    let data = prepare_data(&cfg, &load_dataset(&cfg.data).unwrap()).unwrap();
    let m = &cfg.model;
    let starts: Vec<usize> = (0..m.batch_size).map(|i| i * 37).collect();
    let batch = data
        .normalized(Split::Train)
        .batch(&starts, m.input_steps, m.horizon, m.outputs)
        .unwrap();
    let mut model = AirFormerModel::new(m.clone()).unwrap();
    let mut opt = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Normalized units: 0.05 training-split standard deviations.
    let threshold = 0.05;
    let first = evaluate_loss(&model, &batch, &data.projection).unwrap().pred;
    let mut reached = None;
    let mut last = first;
    for step in 1..=500 {
        train_step(&mut model, &mut opt, &batch, &data.projection, &mut rng, m.learning_rate).unwrap();
        if step % 10 == 0 {
            last = evaluate_loss(&model, &batch, &data.projection).unwrap().pred;
            if last < threshold {
                reached = Some(step);
                break;
            }
        }
    }
    let std = data.stats.std[0];
    // Reported rather than asserted, like the ablation ranking.
    report(
        9,
        reached.is_some(),
        format!(
            "L_pred {first:.3} -> {last:.4} < 0.05 std ({:.2} ug/m3 of {std:.2}) at step {}",
            last * std,
            reached.map_or("none".into(), |s| s.to_string())
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let _s = serial();
    let mut cfg = ExperimentConfig::default();
    cfg.model.hidden = 8;
    cfg.model.window_sizes = vec![3, 6];
    cfg.model.blocks = 2;
    cfg.model.input_steps = 6;
    cfg.model.horizon = 3;
    cfg.model.batch_size = 8;
    cfg.model.seed = 21;
    cfg.data.synth.n_stations = 12;
    cfg.data.synth.steps = 400;
    cfg.train.epochs = 3;
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let data = prepare_data(&cfg, &load_dataset(&cfg.data).unwrap()).unwrap();
        let out = train(&cfg, &data, |_| {}).unwrap();
        let (ckpt, csv) = (dir.path().join(format!("{tag}.ckpt")), dir.path().join(format!("{tag}.csv")));
        save_checkpoint(&out.model, &data, &ckpt).unwrap();
        write_metrics_csv(&out.rows, &csv).unwrap();
        (std::fs::read(ckpt).unwrap(), std::fs::read(csv).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    let pass = a.0 == b.0 && a.1 == b.1;
    assert!(report(
        10,
        pass,
        format!(
            "checkpoints identical {} ({} bytes), metrics CSVs identical {} ({} bytes)",
            a.0 == b.0,
            a.0.len(),
            a.1 == b.1,
            a.1.len()
        )
    ));
}

#[test]
fn criterion_11_sudden_change_mask() {
    let _s = serial();
    let mut series = vec![40.0; 20];
    // Qualifying: above 75 and the next step moves by more than 20.
    series[3] = 90.0;
    // Level exactly 75: not above the level.
    series[6] = 75.0;
    // 80 -> 100 moves by exactly 20, then 100 -> 40 qualifies.
    series[9] = 80.0;
    series[10] = 100.0;
    // 76 -> 96 moves by exactly 20, then 96 -> 70 qualifies.
    series[14] = 76.0;
    series[15] = 96.0;
    series[16] = 70.0;
    // The last step has no successor.
    series[19] = 300.0;
    let mask = sudden_change_mask(&series, None, SuddenChangeRule::default());
    let marked: Vec<usize> = (0..20).filter(|&t| mask[t]).collect();
    let want = vec![3, 10, 15];
    assert!(report(
        11,
        marked == want && marked.len() == 3,
        format!("marked steps {marked:?}, expected exactly {want:?}")
    ));
}

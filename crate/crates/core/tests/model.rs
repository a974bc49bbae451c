mod common;

use std::path::Path;
use std::sync::Arc;

use airformer::dartboard::{DartboardProjection, StationSet};
use airformer::model::check::{random_batch, tiny_config, tiny_stations};
use airformer::model::*;
use airformer::numerics::{Graph, Tensor};
use common::max_abs_diff;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(cfg: ModelConfig) -> (AirFormerModel, Arc<DartboardProjection>, Batch) {
    let stations = tiny_stations();
    let proj = Arc::new(DartboardProjection::build(&cfg.dartboard, &stations).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let batch = random_batch(&cfg, 3, stations.len(), &mut rng);
    (AirFormerModel::new(cfg).unwrap(), proj, batch)
}

#[test]
fn forward_shapes() {
    let (model, proj, batch) = setup(tiny_config());
    let mut g = Graph::new();
    let f = model.forward(&mut g, &model.params, &batch.x, &proj, Mode::Eval).unwrap();
    assert_eq!(g.shape(f.prediction), &[3, 2, 4, 1]);
    assert_eq!(f.states.len(), 2);
    for &s in &f.states {
        assert_eq!(g.shape(s), &[3, 6, 4, 8]);
    }
    let stack = f.stack.unwrap();
    assert_eq!(stack.latents.len(), 2);
    assert_eq!(g.shape(stack.latents[1]), &[3, 6, 4, 8]);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let (model, proj, _) = setup(tiny_config());
    let x = Tensor::zeros(&[1, 5, 4, 4]);
    assert!(model.predict_batch(&x, &proj).is_err());
}

#[test]
fn ablations_drop_their_parameters() {
    let full = AirFormerModel::new(tiny_config()).unwrap();
    let no_ds = AirFormerModel::new(ModelConfig {
        use_dsmsa: false,
        ..tiny_config()
    })
    .unwrap();
    let no_sto = AirFormerModel::new(ModelConfig {
        use_stochastic: false,
        ..tiny_config()
    })
    .unwrap();
    assert!(no_ds.params.iter().all(|p| !p.name.contains("dsmsa")));
    assert!(no_sto.params.iter().all(|p| !p.name.starts_with("stochastic")));
    assert!(no_ds.num_parameters() < full.num_parameters());
    assert!(no_sto.num_parameters() < full.num_parameters());
    let (_, proj, batch) = setup(tiny_config());
    let mut g = Graph::new();
    let l = no_sto.loss(&mut g, &no_sto.params, &batch, &proj, Mode::Eval).unwrap();
    assert_eq!(g.value(l.total).item(), g.value(l.pred).item());
    assert!(l.rec.is_none() && l.kl.is_none());
}

#[test]
fn prediction_is_station_permutation_equivariant() {
    let cfg = tiny_config();
    let (model, proj, batch) = setup(cfg.clone());
    let perm = [2, 0, 3, 1];
    let stations = tiny_stations();
    let permuted = StationSet::new(perm.iter().map(|&p| stations.get(p).clone()).collect()).unwrap();
    let pproj = Arc::new(DartboardProjection::build(&cfg.dartboard, &permuted).unwrap());
    let permute = |x: &Tensor| {
        let sh = x.shape().to_vec();
        Tensor::from_fn(&sh, |i| {
            let c = i % sh[3];
            let n = (i / sh[3]) % sh[2];
            let rest = i / (sh[3] * sh[2]);
            x.data()[(rest * sh[2] + perm[n]) * sh[3] + c]
        })
    };
    let a = model.predict_batch(&batch.x, &proj).unwrap();
    let b = model.predict_batch(&permute(&batch.x), &pproj).unwrap();
    assert!(max_abs_diff(b.data(), permute(&a).data()) < 1e-12);
}

#[test]
fn masked_targets_do_not_affect_the_loss() {
    let (model, proj, mut batch) = setup(tiny_config());
    let noise = model.sample_noise(&mut ChaCha8Rng::seed_from_u64(1), 3, 4);
    let run = |b: &Batch| {
        let mut g = Graph::new();
        let l = model.loss(&mut g, &model.params, b, &proj, Mode::Sample(&noise)).unwrap();
        g.value(l.total).item()
    };
    let before = run(&batch);
    let hidden: Vec<usize> = (0..batch.y.len()).filter(|&i| batch.y_mask.data()[i] == 0.0).collect();
    let hidden_x: Vec<usize> = (0..batch.x_target.len()).filter(|&i| batch.x_mask.data()[i] == 0.0).collect();
    assert!(!hidden.is_empty() && !hidden_x.is_empty());
    for &i in &hidden {
        batch.y.data_mut()[i] = 1e6;
    }
    for &i in &hidden_x {
        batch.x_target.data_mut()[i] = -1e6;
    }
    assert_eq!(before.to_bits(), run(&batch).to_bits());
}

#[test]
fn masked_l1_matches_hand_value() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = Tensor::new(vec![4], vec![0.0, 0.0, 0.0, 100.0]).unwrap();
    let m = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
    let l = masked_l1(&mut g, p, &y, &m).unwrap();
    assert_eq!(g.value(l).item(), 2.0);
}

#[test]
fn earlier_states_ignore_future_inputs() {
    let (model, proj, batch) = setup(tiny_config());
    let noise = model.sample_noise(&mut ChaCha8Rng::seed_from_u64(2), 3, 4);
    let run = |x: &Tensor| {
        let b = Batch { x: x.clone(), ..batch.clone() };
        let mut g = Graph::new();
        let l = model.loss(&mut g, &model.params, &b, &proj, Mode::Sample(&noise)).unwrap();
        let states: Vec<Tensor> = l.forward.states.iter().map(|&s| g.value(s).clone()).collect();
        (states, l.per_step_elbo(&g))
    };
    let (s0, e0) = run(&batch.x);
    let mut x = batch.x.clone();
    let cut = 3;
    let sh = x.shape().to_vec();
    for i in 0..x.len() {
        if (i / (sh[2] * sh[3])) % sh[1] > cut {
            x.data_mut()[i] += 5.0;
        }
    }
    let (s1, e1) = run(&x);
    let per_step = sh[2] * 8;
    for (a, b) in s0.iter().zip(&s1) {
        for bi in 0..sh[0] {
            let lo = bi * sh[1] * per_step;
            let hi = lo + (cut + 1) * per_step;
            assert!(a.data()[lo..hi].iter().zip(&b.data()[lo..hi]).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
    for t in 0..=cut {
        assert_eq!(e0[t].to_bits(), e1[t].to_bits());
    }
    assert_ne!(e0[cut + 1], e1[cut + 1]);
}

#[test]
fn construction_and_training_are_deterministic() {
    let (_, proj, batch) = setup(tiny_config());
    let run = || {
        let mut model = AirFormerModel::new(tiny_config()).unwrap();
        let mut opt = Adam::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut losses = Vec::new();
        for _ in 0..3 {
            losses.push(train_step(&mut model, &mut opt, &batch, &proj, &mut rng, 1e-3).unwrap().total);
        }
        (checkpoint::encode(&model, &serde_json::Value::Null), losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let other = AirFormerModel::new(ModelConfig {
        seed: 1,
        ..tiny_config()
    })
    .unwrap();
    let first = AirFormerModel::new(tiny_config()).unwrap();
    assert_ne!(first.params.iter().next().unwrap().value, other.params.iter().next().unwrap().value);
}

#[test]
fn small_batch_overfits() {
    let cfg = ModelConfig {
        learning_rate: 3e-3,
        ..tiny_config()
    };
    let (mut model, proj, batch) = setup(cfg);
    let mut opt = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let first = evaluate_loss(&model, &batch, &proj).unwrap().pred;
    for _ in 0..150 {
        train_step(&mut model, &mut opt, &batch, &proj, &mut rng, 3e-3).unwrap();
    }
    let last = evaluate_loss(&model, &batch, &proj).unwrap().pred;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let (model, proj, batch) = setup(tiny_config());
    let extra = serde_json::json!({"note": "x"});
    let bytes = checkpoint::encode(&model, &extra);
    assert_eq!(&bytes[..8], b"AIRFCKPT");
    let (back, meta) = checkpoint::decode(&bytes, Path::new("mem")).unwrap();
    assert_eq!(meta.extra, extra);
    assert_eq!(back.config, model.config);
    assert_eq!(checkpoint::encode(&back, &extra), bytes);
    assert_eq!(
        back.predict_batch(&batch.x, &proj).unwrap(),
        model.predict_batch(&batch.x, &proj).unwrap()
    );
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        checkpoint::decode(&bad, Path::new("mem")),
        Err(airformer::Error::Checkpoint { .. })
    ));
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
}

#[test]
fn eval_mode_is_deterministic_and_noise_free() {
    let (model, proj, batch) = setup(tiny_config());
    let a = model.predict_batch(&batch.x, &proj).unwrap();
    let b = model.predict_batch(&batch.x, &proj).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());
}

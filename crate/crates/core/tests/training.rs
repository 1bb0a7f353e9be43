//! Optimizer, schedule, sampling and end-to-end training behaviour.

use ens_transformer::data_io::synth::{generate_synthetic, GenParams};
use ens_transformer::data_io::SampleRecord;
use ens_transformer::grid::Grid;
use ens_transformer::models::{Model, ModelConfig, Variant};
use ens_transformer::param::ParamStore;
use ens_transformer::tensor::Tensor;
use ens_transformer::training::{
    adam_step, evaluate, evaluate_raw, subsample_members, train, validation_crps, AdamState, Schedule,
    TrainConfig, TrainState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data(n: usize, k: usize, seed: u64) -> (Grid, Vec<SampleRecord<f64>>) {
    let grid = Grid::new(4, 8).unwrap();
    let recs = generate_synthetic(n, k, &grid, &GenParams::default(), seed, "t").unwrap();
    (grid, recs)
}

fn tiny_model(variant: Variant, n: usize, seed: u64) -> Model<f64> {
    Model::init(ModelConfig::new(variant, n, 4, 8).with_width(4, 2), seed).unwrap()
}

#[test]
fn adam_matches_hand_computation() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("x", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
    let mut st = AdamState::new(&s);
    let grads = [[0.5, -2.0], [0.1, 1.0]];
    let lr = 0.01;
    let (mut m, mut v, mut x) = ([0.0f64; 2], [0.0f64; 2], [1.0f64, -1.0]);
    for (t, g) in grads.iter().enumerate() {
        s.get_mut(id).grad = Tensor::new(vec![2], g.to_vec()).unwrap();
        adam_step(&mut s, &mut st, lr).unwrap();
        let t = (t + 1) as i32;
        for j in 0..2 {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.999f64.powi(t));
            x[j] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    let got = s.get(id).value.data();
    for j in 0..2 {
        assert!((got[j] - x[j]).abs() < 1e-15, "{got:?} vs {x:?}");
    }
    assert_eq!(st.step, 2);
}

#[test]
fn plateau_reduces_after_five_epochs_and_stops_after_twenty() {
    let cfg = TrainConfig::default();
    let mut s = Schedule::new(&cfg, 1.0);
    assert!(s.record(1, 0.9, &cfg));
    for e in 2..=5 {
        s.record(e, 0.95, &cfg);
        assert_eq!(s.lr, 1e-3, "epoch {e}");
    }
    s.record(6, 0.95, &cfg);
    assert!((s.lr - 3e-4).abs() < 1e-18);
    for e in 7..=11 {
        s.record(e, 0.95, &cfg);
    }
    assert!((s.lr - 9e-5).abs() < 1e-18);
    for e in 12..21 {
        s.record(e, 0.95, &cfg);
        assert!(!s.stopped, "epoch {e}");
    }
    s.record(21, 0.95, &cfg);
    assert!(s.stopped);
    assert_eq!(s.best_epoch, 1);

    // a new best resets both counters
    let mut s = Schedule::new(&cfg, 1.0);
    for e in 1..=4 {
        s.record(e, 1.0, &cfg);
    }
    assert!(s.record(5, 0.5, &cfg));
    for e in 6..=9 {
        s.record(e, 0.6, &cfg);
    }
    assert_eq!(s.lr, 1e-3);
}

#[test]
fn frozen_training_stops_on_the_plateau() {
    // steps far below f64 resolution leave the parameters bit-identical
    let (grid, recs) = tiny_data(6, 3, 1);
    let cfg = TrainConfig {
        lr0: 1e-300,
        max_epochs: 100,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let model = tiny_model(Variant::Direct, 1, 0);
    let out = train(model.clone(), &recs[..4], &recs[4..], &grid, &cfg).unwrap();
    assert_eq!(out.history.epochs.len(), 20);
    assert!(out.state.schedule.stopped);
    let lrs: Vec<f64> = out.history.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs[4], 1e-300);
    assert!((lrs[5] / 3e-301 - 1.0).abs() < 1e-12, "{lrs:?}");
    assert_eq!(out.model.store, model.store);
    let csv = out.history.to_csv();
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn member_subsampling_is_uniform() {
    let k = 50;
    let data: Vec<f64> = (0..k).flat_map(|i| vec![i as f64; 3]).collect();
    let rec = SampleRecord::new(
        "u",
        "2017-01-01T00:00:00Z",
        Tensor::new(vec![k, 3, 1, 1], data).unwrap(),
        Tensor::zeros(&[1, 1]),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    let mut counts = vec![0usize; k];
    for _ in 0..draws {
        let sub = subsample_members(&rec, 20, &mut rng).unwrap();
        assert_eq!(sub.k(), 20);
        let ids: Vec<usize> = (0..20).map(|i| sub.inputs.member(i)[0] as usize).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        for i in ids {
            counts[i] += 1;
        }
    }
    for (i, c) in counts.iter().enumerate() {
        let f = *c as f64 / draws as f64;
        assert!((f - 0.4).abs() < 0.02, "member {i}: {f}");
    }
    assert!(subsample_members(&rec, 51, &mut rng).is_err());
    assert!(subsample_members(&rec, 1, &mut rng).is_err());
}

#[test]
fn overfits_a_handful_of_samples() {
    let (grid, recs) = tiny_data(4, 4, 2);
    let cfg = TrainConfig {
        lr0: 1e-2,
        batch_size: 1,
        max_epochs: 200,
        stop_patience: 200,
        plateau_patience: 30,
        ..TrainConfig::default()
    };
    let model = tiny_model(Variant::Transformer, 1, 3);
    let before = validation_crps(&model, &recs, &grid).unwrap();
    let out = train(model, &recs, &recs, &grid, &cfg).unwrap();
    let after = validation_crps(&out.model, &recs, &grid).unwrap();
    assert!(after < 0.1 * before, "training CRPS {before} -> {after}");
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (grid, recs) = tiny_data(12, 6, 4);
    let (tr, va) = recs.split_at(9);
    let cfg = TrainConfig {
        lr0: 3e-3,
        batch_size: 4,
        max_epochs: 3,
        subsample_members: Some(4),
        seed: 21,
        ..TrainConfig::default()
    };
    let model = tiny_model(Variant::Transformer, 1, 5);
    let a = train(model.clone(), tr, va, &grid, &cfg).unwrap();
    let b = train(model.clone(), tr, va, &grid, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.store, b.model.store);

    let mut st = TrainState::new(model, cfg.clone(), va, &grid).unwrap();
    st.run_epoch(tr, va, &grid).unwrap();
    st.run_epoch(tr, va, &grid).unwrap();
    let mut restored = TrainState::<f64>::from_bytes(&st.to_bytes().unwrap()).unwrap();
    assert_eq!(restored, st);
    let next = st.run_epoch(tr, va, &grid).unwrap();
    let replay = restored.run_epoch(tr, va, &grid).unwrap();
    assert_eq!(next, replay);
    assert_eq!(next, a.history.epochs[2]);
    assert_eq!(st.model.store, restored.model.store);
}

#[test]
fn identity_initialized_transformer_scores_like_the_embedding() {
    let (grid, recs) = tiny_data(5, 5, 6);
    let bare = tiny_model(Variant::Transformer, 0, 8);
    let deep = tiny_model(Variant::Transformer, 3, 8);
    let a = evaluate(&bare, &recs, &grid).unwrap();
    let b = evaluate(&deep, &recs, &grid).unwrap();
    assert_eq!(a.report.crps, b.report.crps);
    assert_eq!(a.rank, b.rank);
    assert_eq!(evaluate(&deep, &recs, &grid).unwrap(), b);
}

#[test]
fn raw_scores_match_the_generator() {
    let grid = Grid::new(8, 16).unwrap();
    let p = GenParams::default();
    let recs = generate_synthetic::<f32>(1000, 20, &grid, &p, 12, "r").unwrap();
    let ev = evaluate_raw(&recs, &grid, 1, 1e-6).unwrap();
    let (spread, rmse) = p.expected_spread_rmse(20, 1);
    assert!((ev.report.spread / spread - 1.0).abs() < 0.05, "{} vs {spread}", ev.report.spread);
    assert!((ev.report.rmse / rmse - 1.0).abs() < 0.05, "{} vs {rmse}", ev.report.rmse);
    let rank = ev.rank.unwrap();
    assert_eq!(rank.counts.len(), 21);
    assert_eq!(rank.total(), 1000 * 128);
    // underdispersive ensembles put the truth outside the members most often
    let edges = rank.counts[0] + rank.counts[20];
    assert!(edges as f64 > 0.3 * rank.total() as f64);
}

#[test]
fn ppnn_evaluation_reports_pit() {
    let (grid, recs) = tiny_data(4, 5, 7);
    let ev = evaluate(&tiny_model(Variant::Ppnn, 1, 1), &recs, &grid).unwrap();
    assert!(ev.rank.is_none());
    let pit = ev.pit.unwrap();
    assert_eq!(pit.counts.iter().sum::<u64>(), 4 * 32);
}

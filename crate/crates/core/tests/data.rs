//! Tensor container, dataset layout, normalization and generator statistics.

use ens_transformer::data_io::dataset::{
    load_split, read_norm_stats, split_records, validation_count, DatasetManifest, NormStats, Split,
};
use ens_transformer::data_io::etns::{self, AnyTensor};
use ens_transformer::data_io::synth::{generate_synthetic, write_synthetic, GenParams, SynthSpec};
use ens_transformer::error::Error;
use ens_transformer::grid::Grid;
use ens_transformer::tensor::Tensor;
use ens_transformer::training::evaluate_raw;

#[test]
fn etns_identity_round_trip_and_layout() {
    let eye = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
    let bytes = etns::to_bytes(&eye).unwrap();
    assert_eq!(&bytes[..4], b"ETNS");
    assert_eq!(bytes[4..8], [1, 1, 2, 0]);
    assert_eq!(bytes.len(), 8 + 2 * 4 + 4 * 4);
    assert_eq!(etns::decode_as::<f32>(&bytes).unwrap(), eye);
}

#[test]
fn etns_header_arithmetic() {
    let shape = [50usize, 3, 32, 64];
    assert_eq!(etns::header_len(shape.len()), 4 + 4 + 4 * 4);
    let t = Tensor::<f32>::zeros(&shape);
    let bytes = etns::to_bytes(&t).unwrap();
    assert_eq!(bytes.len(), 24 + 50 * 3 * 32 * 64 * 4);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 50);
    assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 64);
}

#[test]
fn etns_rejects_bad_files_with_offsets() {
    let t = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
    let good = etns::to_bytes(&t).unwrap();

    let mut dtype3 = good.clone();
    dtype3[5] = 3;
    match etns::decode(&dtype3) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 5),
        other => panic!("{other:?}"),
    }
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(etns::decode(&magic), Err(Error::Format { offset: 0, .. })));
    let mut version = good.clone();
    version[4] = 9;
    assert!(matches!(etns::decode(&version), Err(Error::Format { offset: 4, .. })));
    assert!(matches!(etns::decode(&good[..good.len() - 1]), Err(Error::Format { .. })));
    // a 64-bit file read as 32-bit is refused, not converted
    assert!(etns::decode_as::<f32>(&good).is_err());
    assert!(matches!(etns::decode(&good).unwrap(), AnyTensor::F64(_)));
}

#[test]
fn grid_construction() {
    let g = Grid::new(32, 64).unwrap();
    assert!((g.lat_centers[0] + 87.1875).abs() < 1e-12);
    let mean: f64 = g.lat_weights.iter().sum::<f64>() / 32.0;
    assert!((mean - 1.0).abs() < 1e-12);
    let max = g.lat_weights.iter().cloned().fold(0.0, f64::max);
    assert_eq!(g.lat_weights[15], max);
    assert_eq!(g.lat_weights[16], max);
}

#[test]
fn generator_matches_analytic_spread_skill() {
    let grid = Grid::new(8, 16).unwrap();
    let p = GenParams::default();
    let recs = generate_synthetic::<f64>(512, 20, &grid, &p, 17, "s").unwrap();
    let report = evaluate_raw(&recs, &grid, 1, 1e-6).unwrap().report;
    let (spread, rmse) = p.expected_spread_rmse(20, 1);
    let ratio = report.spread_skill() / (spread / rmse);
    assert!((ratio - 1.0).abs() < 0.10, "empirical {} vs analytic {}", report.spread_skill(), spread / rmse);
    assert!((report.spread / spread - 1.0).abs() < 0.10);
    assert!((report.rmse / rmse - 1.0).abs() < 0.10);
}

#[test]
fn generator_moments_within_monte_carlo_error() {
    // one cell per sample keeps the draws independent
    let grid = Grid::new(1, 1).unwrap();
    let p = GenParams::default();
    let n = 20_000;
    let recs = generate_synthetic::<f64>(n, 2, &grid, &p, 3, "m").unwrap();
    let t: Vec<f64> = recs.iter().map(|r| r.target.data()[0]).collect();
    let mean = t.iter().sum::<f64>() / n as f64;
    let var_expected = p.truth_variance();
    assert!(mean.abs() < 3.0 * (var_expected / n as f64).sqrt(), "mean {mean}");
    let sq: Vec<f64> = t.iter().map(|v| v * v).collect();
    let var = sq.iter().sum::<f64>() / n as f64;
    let fourth = sq.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let se = ((fourth - var * var) / n as f64).sqrt();
    assert!((var - var_expected).abs() < 3.0 * se, "var {var} vs {var_expected} (se {se})");

    // member deviation from the truth: c T + b + E + eta - T for the surface variable
    let d: Vec<f64> = recs
        .iter()
        .map(|r| r.inputs.get(&[0, 2, 0, 0]) - r.target.data()[0])
        .collect();
    let dm = d.iter().sum::<f64>() / n as f64;
    let dv = d.iter().map(|x| (x - dm).powi(2)).sum::<f64>() / (n - 1) as f64;
    let expect_v = p.sigma_err.powi(2) + p.sigma_mem.powi(2);
    assert!((dm - p.offset[2]).abs() < 3.0 * (expect_v / n as f64).sqrt(), "bias {dm}");
    assert!((dv / expect_v - 1.0).abs() < 0.05, "deviation variance {dv} vs {expect_v}");
}

#[test]
fn noise_free_generator_and_zero_std_limits() {
    let grid = Grid::new(4, 8).unwrap();
    let recs = generate_synthetic::<f32>(2, 3, &grid, &GenParams::noise_free(), 1, "n").unwrap();
    for r in &recs {
        for i in 0..3 {
            assert_eq!(&r.inputs.member(i)[64..96], r.target.data());
        }
    }
    let bad = GenParams {
        sigma_err: f64::NAN,
        ..GenParams::default()
    };
    assert!(matches!(generate_synthetic::<f32>(1, 2, &grid, &bad, 0, "x"), Err(Error::Config(_))));
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_samples: 40,
        n_test: 8,
        k: 4,
        h: 4,
        w: 8,
        val_fraction: 0.1,
        params: GenParams::default(),
    }
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, _) = write_synthetic::<f32>(a.path(), &small_spec(), 5).unwrap();
    let (mb, _) = write_synthetic::<f32>(b.path(), &small_spec(), 5).unwrap();
    assert_eq!(ma, mb);
    for name in ["manifest.toml", "norm_stats.toml"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    for e in &ma.records {
        for f in [&e.inputs, &e.target] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }
}

#[test]
fn written_dataset_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, stats) = write_synthetic::<f64>(dir.path(), &small_spec(), 9).unwrap();
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), manifest);
    assert_eq!(read_norm_stats(dir.path()).unwrap(), stats);
    assert_eq!(manifest.count(Split::Validation), 4);
    assert_eq!(manifest.count(Split::Train), 36);
    assert_eq!(manifest.count(Split::Test), 8);
    let train = load_split::<f64>(dir.path(), &manifest, Split::Train).unwrap();
    assert_eq!(NormStats::fit(&train).unwrap(), stats);
    // files written as f64 load as f32 too
    let test32 = load_split::<f32>(dir.path(), &manifest, Split::Test).unwrap();
    assert_eq!(test32.len(), 8);
    assert_eq!(test32[0].inputs.shape(), &[4, 3, 4, 8]);
}

#[test]
fn validation_split_rules() {
    assert_eq!(validation_count(200, 0.1), 20);
    assert_eq!(validation_count(576, 1.0 / 9.0), 64);
    assert_eq!(validation_count(9, 0.1), 0);
    let grid = Grid::new(2, 4).unwrap();
    let recs = generate_synthetic::<f32>(200, 2, &grid, &GenParams::default(), 0, "v").unwrap();
    let (t1, v1) = split_records(recs.clone(), 0.1, 4).unwrap();
    let (t2, v2) = split_records(recs.clone(), 0.1, 4).unwrap();
    assert_eq!((t1.len(), v1.len()), (180, 20));
    assert_eq!(v1, v2);
    assert_eq!(t1, t2);
    let mut ids: Vec<&str> = t1.iter().chain(&v1).map(|r| r.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 200);
    let (_, v3) = split_records(recs, 0.1, 5).unwrap();
    assert_ne!(v1, v3);
}

#[test]
fn normalization_uses_training_records_only() {
    let grid = Grid::new(4, 8).unwrap();
    let recs = generate_synthetic::<f64>(30, 4, &grid, &GenParams::default(), 2, "z").unwrap();
    let (train, mut val) = split_records(recs, 0.2, 1).unwrap();
    let stats = NormStats::fit(&train).unwrap();

    let normed: Vec<_> = train.iter().map(|r| stats.apply(r)).collect();
    let refit = NormStats::fit(&normed).unwrap();
    for v in 0..3 {
        assert!(refit.mean[v].abs() < 1e-6, "{:?}", refit.mean);
        assert!((refit.std[v] - 1.0).abs() < 1e-6, "{:?}", refit.std);
    }
    assert_eq!(normed[0].target, train[0].target);

    // altering held-out records leaves the fitted statistics untouched
    for r in &mut val {
        r.inputs = r.inputs.map(|x| x * 100.0 + 7.0);
    }
    assert_eq!(NormStats::fit(&train).unwrap(), stats);

    // moving one record out of training changes them
    let mut smaller = train.clone();
    smaller.pop();
    assert_ne!(NormStats::fit(&smaller).unwrap(), stats);

    let mut constant = train.clone();
    for r in &mut constant {
        for (j, x) in r.inputs.data_mut().iter_mut().enumerate() {
            if (j / 32) % 3 == 1 {
                *x = 5.0;
            }
        }
    }
    assert!(matches!(NormStats::fit(&constant), Err(Error::Data(_))));
}

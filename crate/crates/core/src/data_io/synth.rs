//! Synthetic gridded ensembles with known error structure.
//!
//! Each sample draws a truth field `T` as a sum of random low-order harmonics.
//! Every input variable `v` sees `c_v T + b_v` plus an error `E_v` shared by
//! all members and a member noise `eta_{i,v}`; both are smooth harmonic fields
//! scaled to pointwise standard deviations `sigma_err` and `sigma_mem`. The
//! target is `T` itself. With the defaults the surface-temperature ensemble is
//! biased and underdispersive.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{
    split_dataset, write_manifest, write_norm_stats, write_records, DatasetManifest, GeneratorInfo,
    GridSpec, NormStats, SampleRecord, Split, DEFAULT_VAL_FRACTION,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::models::{INPUT_VARIABLES, SURFACE_TEMPERATURE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_modes() -> usize {
    8
}
fn default_max_freq() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    /// Harmonic modes per field.
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Highest integer wavenumber along each axis.
    #[serde(default = "default_max_freq")]
    pub max_freq: usize,
    pub sigma_mem: f64,
    pub sigma_err: f64,
    /// Multiplicative coupling `c_v` of each variable to the truth.
    pub coupling: [f64; INPUT_VARIABLES],
    /// Additive offset `b_v` of each variable, kelvin.
    pub offset: [f64; INPUT_VARIABLES],
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            modes: default_modes(),
            max_freq: default_max_freq(),
            sigma_mem: 0.5,
            sigma_err: 0.8,
            coupling: [0.8, 0.9, 1.0],
            offset: [1.0, 0.5, 0.7],
        }
    }
}

impl GenParams {
    /// Members exchangeable with the truth: shared error and member noise are
    /// identically distributed, and the surface variable is unbiased.
    pub fn calibrated() -> Self {
        let mut p = Self::default();
        p.sigma_err = p.sigma_mem;
        p.coupling[SURFACE_TEMPERATURE] = 1.0;
        p.offset[SURFACE_TEMPERATURE] = 0.0;
        p
    }

    /// Every member equals the target.
    pub fn noise_free() -> Self {
        Self {
            sigma_mem: 0.0,
            sigma_err: 0.0,
            coupling: [1.0; INPUT_VARIABLES],
            offset: [0.0; INPUT_VARIABLES],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::Config("generator needs at least one mode".into()));
        }
        for (name, v) in [("sigma_mem", self.sigma_mem), ("sigma_err", self.sigma_err)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.coupling.iter().chain(&self.offset).any(|v| !v.is_finite()) {
            return Err(Error::Config("couplings and offsets must be finite".into()));
        }
        Ok(())
    }

    /// Expected pointwise variance of the truth field.
    pub fn truth_variance(&self) -> f64 {
        (1..=self.modes).map(|p| 0.5 / (p * p) as f64).sum()
    }

    /// Expected spread and ensemble-mean RMSE of the raw surface-temperature
    /// ensemble, with spread computed using `ddof`.
    pub fn expected_spread_rmse(&self, k: usize, ddof: usize) -> (f64, f64) {
        let v = SURFACE_TEMPERATURE;
        let var_mem = self.sigma_mem * self.sigma_mem;
        let spread2 = var_mem * (k as f64 - 1.0) / (k - ddof) as f64;
        let c = self.coupling[v] - 1.0;
        let mse = c * c * self.truth_variance()
            + self.offset[v] * self.offset[v]
            + self.sigma_err * self.sigma_err
            + var_mem / k as f64;
        (spread2.sqrt(), mse.sqrt())
    }

    pub fn expected_spread_skill(&self, k: usize, ddof: usize) -> f64 {
        let (s, r) = self.expected_spread_rmse(k, ddof);
        s / r
    }
}

/// Sum of random harmonics, `sum_p (a_p / p) cos(2 pi (fx x / w + fy y / h) + phi_p)`.
fn harmonic_field(rng: &mut ChaCha8Rng, grid: &Grid, params: &GenParams) -> Vec<f64> {
    let (h, w) = (grid.h, grid.w);
    let mut field = vec![0.0; h * w];
    for p in 1..=params.modes {
        let a: f64 = rng.sample(StandardNormal);
        let fx = rng.gen_range(0..=params.max_freq) as f64;
        let fy = rng.gen_range(0..=params.max_freq) as f64;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp = a / p as f64;
        for y in 0..h {
            for x in 0..w {
                let arg = 2.0 * PI * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                field[y * w + x] += amp * arg.cos();
            }
        }
    }
    field
}

/// Harmonic field rescaled to pointwise standard deviation `sigma` in expectation.
fn noise_field(rng: &mut ChaCha8Rng, grid: &Grid, params: &GenParams, sigma: f64) -> Vec<f64> {
    let norm = sigma / params.truth_variance().sqrt();
    harmonic_field(rng, grid, params)
        .into_iter()
        .map(|v| v * norm)
        .collect()
}

fn valid_time(index: usize) -> String {
    let start = NaiveDate::from_ymd_opt(2017, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let t = start + Duration::hours(12 * index as i64);
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Generates `n_samples` records with `k` members each from one seed.
///
/// Sample `i` is identified as `{prefix}{i:06}` and is valid 12 h after
/// sample `i - 1`, starting at 2017-01-01T00:00Z.
pub fn generate_synthetic<T: Scalar>(
    n_samples: usize,
    k: usize,
    grid: &Grid,
    params: &GenParams,
    seed: u64,
    prefix: &str,
) -> Result<Vec<SampleRecord<T>>> {
    params.validate()?;
    if k < 2 {
        return Err(Error::EnsembleSize {
            op: "generate_synthetic",
            min: 2,
            got: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = grid.cells();
    let mut out = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let truth = harmonic_field(&mut rng, grid, params);
        let shared: Vec<Vec<f64>> = (0..INPUT_VARIABLES)
            .map(|_| noise_field(&mut rng, grid, params, params.sigma_err))
            .collect();
        let mut inputs = Vec::with_capacity(k * INPUT_VARIABLES * cells);
        for _ in 0..k {
            for v in 0..INPUT_VARIABLES {
                let eta = noise_field(&mut rng, grid, params, params.sigma_mem);
                for j in 0..cells {
                    let x = params.coupling[v] * truth[j] + params.offset[v] + shared[v][j] + eta[j];
                    inputs.push(T::from_f64_lossy(x));
                }
            }
        }
        let inputs = Tensor::new(vec![k, INPUT_VARIABLES, grid.h, grid.w], inputs)?;
        let target = Tensor::new(
            vec![grid.h, grid.w],
            truth.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )?;
        out.push(SampleRecord::new(
            format!("{prefix}{s:06}"),
            valid_time(s),
            inputs,
            target,
        )?);
    }
    Ok(out)
}

fn d_val_fraction() -> f64 {
    DEFAULT_VAL_FRACTION
}

/// Layout of a synthetic dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Records shared between training and validation.
    pub n_samples: usize,
    /// Records held out for testing; generated after the pool, so later in time.
    pub n_test: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub params: GenParams,
}

impl Default for SynthSpec {
    /// 8x16 grid, 20 members, 576 train / 64 validation / 128 test records.
    fn default() -> Self {
        Self {
            n_samples: 640,
            n_test: 128,
            k: 20,
            h: 8,
            w: 16,
            val_fraction: DEFAULT_VAL_FRACTION,
            params: GenParams::default(),
        }
    }
}

/// Generates, splits and writes a dataset; normalization is fitted on the
/// training split only. Samples are stored with `T`'s width.
pub fn write_synthetic<T: Scalar>(
    dir: impl AsRef<Path>,
    spec: &SynthSpec,
    seed: u64,
) -> Result<(DatasetManifest, NormStats)> {
    let dir = dir.as_ref();
    let grid = Grid::new(spec.h, spec.w)?;
    let records = generate_synthetic::<T>(spec.n_samples + spec.n_test, spec.k, &grid, &spec.params, seed, "s")?;
    let (pool, test) = records.split_at(spec.n_samples);
    let mut entries = write_records(dir, pool, Split::Train)?;
    entries.extend(write_records(dir, test, Split::Test)?);
    let manifest = DatasetManifest {
        format: 1,
        k: spec.k,
        dtype: T::DTYPE,
        val_fraction: spec.val_fraction,
        split_seed: seed,
        grid: GridSpec { h: spec.h, w: spec.w },
        generator: Some(GeneratorInfo {
            seed,
            params: spec.params.clone(),
        }),
        records: entries,
    };
    let manifest = split_dataset(&manifest, spec.val_fraction, seed)?;
    let train: Vec<SampleRecord<T>> = pool
        .iter()
        .zip(&manifest.records)
        .filter(|(_, e)| e.split == Split::Train)
        .map(|(r, _)| r.clone())
        .collect();
    let stats = NormStats::fit(&train)?;
    write_manifest(dir, &manifest)?;
    write_norm_stats(dir, &stats)?;
    Ok((manifest, stats))
}

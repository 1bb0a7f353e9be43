//! Gaussian CRPS loss and the verification metrics.
//!
//! All reported scores are latitude-weighted means over the grid, averaged
//! over samples. RMSE and spread aggregate squared quantities over samples
//! before the final square root.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default degrees of freedom for ensemble standard deviations.
pub const DEFAULT_DDOF: usize = 1;
/// Default lower bound on the ensemble standard deviation inside losses, kelvin.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Closed-form CRPS of `N(mu, sigma^2)` against the observation `y`.
pub fn gaussian_crps<T: Scalar>(mu: T, sigma: T, y: T) -> Result<T> {
    let s = sigma.as_f64();
    if !(s > 0.0) {
        return Err(Error::Domain(format!("CRPS needs sigma > 0, got {s}")));
    }
    let z = (y.as_f64() - mu.as_f64()) / s;
    let v = s * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - INV_SQRT_PI);
    Ok(T::from_f64_lossy(v))
}

/// Partial derivatives `(d/d mu, d/d sigma)` of [`gaussian_crps`].
pub fn gaussian_crps_grad<T: Scalar>(mu: T, sigma: T, y: T) -> (T, T) {
    let s = sigma.as_f64();
    let z = (y.as_f64() - mu.as_f64()) / s;
    let d_mu = 1.0 - 2.0 * normal_cdf(z);
    let d_sigma = 2.0 * normal_pdf(z) - INV_SQRT_PI;
    (T::from_f64_lossy(d_mu), T::from_f64_lossy(d_sigma))
}

/// Latitude-weighted mean of a `[..., h, w]` field.
pub fn weighted_mean<T: Scalar>(field: &Tensor<T>, grid: &Grid) -> Result<f64> {
    let r = field.rank();
    if r < 2 || field.shape()[r - 2] != grid.h || field.shape()[r - 1] != grid.w {
        return Err(Error::dim("weighted_mean", field.shape(), &[grid.h, grid.w]));
    }
    let (h, w) = (grid.h, grid.w);
    let total: f64 = field
        .data()
        .iter()
        .enumerate()
        .map(|(j, v)| v.as_f64() * grid.lat_weights[(j / w) % h])
        .sum();
    Ok(total / field.numel() as f64)
}

fn check_members<T: Scalar>(op: &'static str, members: &Tensor<T>, target: &Tensor<T>) -> Result<usize> {
    if members.rank() != 4 || members.shape()[1] != 1 {
        return Err(Error::dim(op, members.shape(), &[0, 1, 0, 0]));
    }
    let cells = members.shape()[2] * members.shape()[3];
    if target.numel() != cells {
        return Err(Error::dim(op, members.shape(), target.shape()));
    }
    Ok(members.members())
}

/// Differentiable latitude-weighted Gaussian CRPS of an ensemble `[k, 1, h, w]`.
///
/// Mean and standard deviation (with `ddof`, floored at `sigma_floor`) are
/// taken over the members before scoring.
pub fn crps_loss_members<T: Scalar>(
    tape: &mut Tape<T>,
    members: Var,
    target: &Tensor<T>,
    grid: &Grid,
    ddof: usize,
    sigma_floor: T,
) -> Result<Var> {
    let k = check_members("crps_loss_members", tape.value(members), target)?;
    if k < 2 || k <= ddof {
        return Err(Error::EnsembleSize {
            op: "crps_loss_members",
            min: 2.max(ddof + 1),
            got: k,
        });
    }
    let mu = tape.mean_members(members)?;
    let std = tape.std_members(members, ddof)?;
    let sigma = tape.clamp_min(std, sigma_floor);
    crps_loss_parametric(tape, mu, sigma, target, grid)
}

/// Differentiable latitude-weighted Gaussian CRPS of `(mu, sigma)` fields.
pub fn crps_loss_parametric<T: Scalar>(
    tape: &mut Tape<T>,
    mu: Var,
    sigma: Var,
    target: &Tensor<T>,
    grid: &Grid,
) -> Result<Var> {
    let crps = tape.gaussian_crps(mu, sigma, target)?;
    tape.lat_weighted_mean(crps, &grid.lat_weights_as::<T>())
}

/// Per-sample latitude-weighted scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub crps: f64,
    /// Weighted mean squared error of the ensemble mean.
    pub mse: f64,
    /// Weighted mean ensemble variance.
    pub variance: f64,
}

/// Mean and variance `(mu, var)` per grid cell of a `[k, 1, h, w]` ensemble.
pub fn ensemble_moments<T: Scalar>(members: &Tensor<T>, ddof: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = members.members();
    if k <= ddof {
        return Err(Error::EnsembleSize {
            op: "ensemble_moments",
            min: ddof + 1,
            got: k,
        });
    }
    let n = members.numel() / k;
    let mut mean = vec![0.0; n];
    for i in 0..k {
        for (m, v) in mean.iter_mut().zip(members.member(i)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let mut var = vec![0.0; n];
    for i in 0..k {
        for ((s, v), m) in var.iter_mut().zip(members.member(i)).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= (k - ddof) as f64);
    Ok((mean, var))
}

fn weighted_cells(values: impl Iterator<Item = f64>, grid: &Grid) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (j, v) in values.enumerate() {
        total += v * grid.lat_weights[(j / grid.w) % grid.h];
        n += 1;
    }
    total / n as f64
}

/// Scores one ensemble forecast `[k, 1, h, w]` against its target `[h, w]`.
pub fn score_members<T: Scalar>(
    id: &str,
    members: &Tensor<T>,
    target: &Tensor<T>,
    grid: &Grid,
    ddof: usize,
    sigma_floor: f64,
) -> Result<SampleScore> {
    let k = check_members("score_members", members, target)?;
    if k < 2 {
        return Err(Error::EnsembleSize {
            op: "score_members",
            min: 2,
            got: k,
        });
    }
    let (mean, var) = ensemble_moments(members, ddof)?;
    let y: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let crps = mean
        .iter()
        .zip(&var)
        .zip(&y)
        .map(|((&m, &v), &t)| gaussian_crps(m, v.sqrt().max(sigma_floor), t))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SampleScore {
        id: id.to_string(),
        crps: weighted_cells(crps.into_iter(), grid),
        mse: weighted_cells(mean.iter().zip(&y).map(|(m, t)| (m - t) * (m - t)), grid),
        variance: weighted_cells(var.into_iter(), grid),
    })
}

/// Scores a Gaussian forecast given as `mu` and `sigma` fields.
pub fn score_parametric<T: Scalar>(
    id: &str,
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
    target: &Tensor<T>,
    grid: &Grid,
) -> Result<SampleScore> {
    if mu.numel() != target.numel() || sigma.numel() != target.numel() {
        return Err(Error::dim("score_parametric", mu.shape(), target.shape()));
    }
    let crps = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(target.data())
        .map(|((&m, &s), &y)| gaussian_crps(m.as_f64(), s.as_f64(), y.as_f64()))
        .collect::<Result<Vec<f64>>>()?;
    let mse = mu.data().iter().zip(target.data()).map(|(&m, &y)| {
        let d = m.as_f64() - y.as_f64();
        d * d
    });
    let var = sigma.data().iter().map(|&s| s.as_f64() * s.as_f64());
    Ok(SampleScore {
        id: id.to_string(),
        crps: weighted_cells(crps.into_iter(), grid),
        mse: weighted_cells(mse, grid),
        variance: weighted_cells(var, grid),
    })
}

/// Square root of the weighted spatio-temporal mean squared error of the ensemble mean.
pub fn rmse_of_mean<T: Scalar>(
    forecasts: &[(&Tensor<T>, &Tensor<T>)],
    grid: &Grid,
) -> Result<f64> {
    let mut acc = 0.0;
    for (members, target) in forecasts {
        check_members("rmse_of_mean", members, target)?;
        let (mean, _) = ensemble_moments(members, 0)?;
        acc += weighted_cells(
            mean.iter().zip(target.data()).map(|(m, t)| {
                let d = m - t.as_f64();
                d * d
            }),
            grid,
        );
    }
    Ok((acc / forecasts.len() as f64).sqrt())
}

/// Square root of the weighted spatio-temporal mean ensemble variance.
pub fn spread<T: Scalar>(members: &[&Tensor<T>], grid: &Grid, ddof: usize) -> Result<f64> {
    let mut acc = 0.0;
    for m in members {
        let (_, var) = ensemble_moments(m, ddof)?;
        acc += weighted_cells(var.into_iter(), grid);
    }
    Ok((acc / members.len() as f64).sqrt())
}

/// Aggregated verification scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub label: String,
    pub crps: f64,
    /// Kelvin.
    pub rmse: f64,
    /// Kelvin.
    pub spread: f64,
    pub ddof: usize,
    pub samples: Vec<SampleScore>,
}

impl ScoreReport {
    pub fn from_samples(label: impl Into<String>, samples: Vec<SampleScore>, ddof: usize) -> Self {
        let n = samples.len().max(1) as f64;
        let crps = samples.iter().map(|s| s.crps).sum::<f64>() / n;
        let mse = samples.iter().map(|s| s.mse).sum::<f64>() / n;
        let var = samples.iter().map(|s| s.variance).sum::<f64>() / n;
        Self {
            label: label.into(),
            crps,
            rmse: mse.sqrt(),
            spread: var.sqrt(),
            ddof,
            samples,
        }
    }

    pub fn spread_skill(&self) -> f64 {
        self.spread / self.rmse
    }

    /// Plain-text table with one row per sample and a final aggregate row.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24} {:>10} {:>10} {:>10}\n", "sample", "CRPS", "RMSE", "Spread");
        for s in &self.samples {
            out.push_str(&format!(
                "{:<24} {:>10.5} {:>10.5} {:>10.5}\n",
                s.id,
                s.crps,
                s.mse.sqrt(),
                s.variance.sqrt()
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>10.5} {:>10.5} {:>10.5}\n",
            format!("[{}]", self.label),
            self.crps,
            self.rmse,
            self.spread
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

// ---- calibration diagnostics --------------------------------------------------

/// Counts of the observation's rank among the members, `k + 1` bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub counts: Vec<u64>,
}

impl RankHistogram {
    pub fn new(members: usize) -> Self {
        Self {
            counts: vec![0; members + 1],
        }
    }

    /// Adds every grid cell of one forecast. Ties are broken uniformly at random.
    pub fn add<T: Scalar>(
        &mut self,
        members: &Tensor<T>,
        target: &Tensor<T>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let k = members.members();
        if k + 1 != self.counts.len() {
            return Err(Error::EnsembleSize {
                op: "rank_histogram",
                min: self.counts.len() - 1,
                got: k,
            });
        }
        let n = members.numel() / k;
        if target.numel() != n {
            return Err(Error::dim("rank_histogram", members.shape(), target.shape()));
        }
        for (cell, &y) in target.data().iter().enumerate() {
            let mut below = 0;
            let mut equal = 0;
            for i in 0..k {
                let v = members.member(i)[cell];
                if v < y {
                    below += 1;
                } else if v == y {
                    equal += 1;
                }
            }
            let rank = below + if equal > 0 { rng.gen_range(0..=equal) } else { 0 };
            self.counts[rank] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pearson chi-square statistic against the uniform distribution.
    pub fn chi_square(&self) -> f64 {
        chi_square_uniform(&self.counts)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{i},{c}\n"));
        }
        s
    }
}

/// Probability integral transform values `Phi((y - mu) / sigma)`.
pub fn pit_parametric<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<f64>> {
    if mu.numel() != target.numel() || sigma.numel() != target.numel() {
        return Err(Error::dim("pit_parametric", mu.shape(), target.shape()));
    }
    mu.data()
        .iter()
        .zip(sigma.data())
        .zip(target.data())
        .map(|((&m, &s), &y)| {
            let s = s.as_f64();
            if !(s > 0.0) {
                return Err(Error::Domain(format!("PIT needs sigma > 0, got {s}")));
            }
            Ok(normal_cdf((y.as_f64() - m.as_f64()) / s))
        })
        .collect()
}

/// Equal-width histogram of PIT values on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitHistogram {
    pub counts: Vec<u64>,
}

impl PitHistogram {
    pub fn new(bins: usize) -> Self {
        Self {
            counts: vec![0; bins.max(1)],
        }
    }

    pub fn add(&mut self, values: &[f64]) {
        let bins = self.counts.len();
        for &v in values {
            let b = ((v * bins as f64) as usize).min(bins - 1);
            self.counts[b] += 1;
        }
    }

    pub fn chi_square(&self) -> f64 {
        chi_square_uniform(&self.counts)
    }

    pub fn to_csv(&self) -> String {
        let bins = self.counts.len();
        let mut s = String::from("lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{c}\n",
                i as f64 / bins as f64,
                (i + 1) as f64 / bins as f64
            ));
        }
        s
    }
}

fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum()
}

/// Member-wise Pearson correlation of every cell with one reference cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationField {
    /// `[h, w]`.
    pub field: Tensor<f64>,
    /// Cells where either series had zero variance; their correlation is 0.
    pub degenerate: Vec<bool>,
}

/// Correlation across members between `point = (lat_idx, lon_idx)` and each cell.
pub fn spatial_correlation<T: Scalar>(
    members: &Tensor<T>,
    point: (usize, usize),
) -> Result<CorrelationField> {
    if members.rank() != 4 || members.shape()[1] != 1 {
        return Err(Error::dim("spatial_correlation", members.shape(), &[0, 1, 0, 0]));
    }
    let (k, h, w) = (members.shape()[0], members.shape()[2], members.shape()[3]);
    if point.0 >= h || point.1 >= w {
        return Err(Error::Usage(format!(
            "point {point:?} outside the {h}x{w} grid"
        )));
    }
    if k < 2 {
        return Err(Error::EnsembleSize {
            op: "spatial_correlation",
            min: 2,
            got: k,
        });
    }
    let (mean, _) = ensemble_moments(members, 0)?;
    let p = point.0 * w + point.1;
    let anom = |i: usize, c: usize| members.member(i)[c].as_f64() - mean[c];
    let var_p: f64 = (0..k).map(|i| anom(i, p).powi(2)).sum();
    let mut field = Vec::with_capacity(h * w);
    let mut degenerate = Vec::with_capacity(h * w);
    for c in 0..h * w {
        let var_c: f64 = (0..k).map(|i| anom(i, c).powi(2)).sum();
        if var_p <= 0.0 || var_c <= 0.0 {
            field.push(0.0);
            degenerate.push(true);
            continue;
        }
        let cov: f64 = (0..k).map(|i| anom(i, p) * anom(i, c)).sum();
        field.push((cov / (var_p * var_c).sqrt()).clamp(-1.0, 1.0));
        degenerate.push(false);
    }
    Ok(CorrelationField {
        field: Tensor::new(vec![h, w], field)?,
        degenerate,
    })
}

/// `2 phi(0) - 1/sqrt(pi)`, the CRPS of a unit Gaussian at its own mean.
pub fn crps_at_mean_unit() -> f64 {
    2.0 * normal_pdf(0.0) - INV_SQRT_PI
}

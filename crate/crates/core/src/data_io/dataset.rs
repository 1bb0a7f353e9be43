//! Samples, dataset manifests, splits and input normalization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::etns;
use super::synth::GenParams;
use crate::error::{Error, Result};
use crate::models::INPUT_VARIABLES;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default validation share of the training pool.
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const NORM_FILE: &str = "norm_stats.toml";

/// One forecast case: `inputs` is `[k, 3, h, w]`, `target` is `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord<T> {
    pub id: String,
    pub valid_time: String,
    pub inputs: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Scalar> SampleRecord<T> {
    pub fn new(id: impl Into<String>, valid_time: impl Into<String>, inputs: Tensor<T>, target: Tensor<T>) -> Result<Self> {
        let s = inputs.shape();
        if s.len() != 4 || s[1] != INPUT_VARIABLES {
            return Err(Error::Data(format!("inputs must be [k, 3, h, w], got {s:?}")));
        }
        if s[0] < 2 {
            return Err(Error::EnsembleSize {
                op: "sample",
                min: 2,
                got: s[0],
            });
        }
        if target.shape() != [s[2], s[3]] {
            return Err(Error::dim("sample target", s, target.shape()));
        }
        Ok(Self {
            id: id.into(),
            valid_time: valid_time.into(),
            inputs,
            target,
        })
    }

    pub fn k(&self) -> usize {
        self.inputs.members()
    }

    /// Same case restricted to the given members.
    pub fn with_members(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            valid_time: self.valid_time.clone(),
            inputs: self.inputs.select_members(indices)?,
            target: self.target.clone(),
        })
    }

    /// Raw surface-temperature ensemble `[k, 1, h, w]`.
    pub fn surface_temperature(&self) -> Tensor<T> {
        self.inputs
            .channel(crate::models::SURFACE_TEMPERATURE)
            .expect("validated input layout")
    }
}

/// Global per-variable mean and standard deviation of the training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits statistics on training records only.
    pub fn fit<T: Scalar>(records: &[SampleRecord<T>]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot fit normalization on zero records".into()));
        }
        let mut sum = [0.0f64; INPUT_VARIABLES];
        let mut count = [0usize; INPUT_VARIABLES];
        for r in records {
            for_each_variable(&r.inputs, |v, x| {
                sum[v] += x;
                count[v] += 1;
            });
        }
        let mean: Vec<f64> = (0..INPUT_VARIABLES).map(|v| sum[v] / count[v] as f64).collect();
        let mut sq = [0.0f64; INPUT_VARIABLES];
        for r in records {
            for_each_variable(&r.inputs, |v, x| {
                let d = x - mean[v];
                sq[v] += d * d;
            });
        }
        let std: Vec<f64> = (0..INPUT_VARIABLES)
            .map(|v| (sq[v] / count[v] as f64).sqrt())
            .collect();
        for (v, (&s, &m)) in std.iter().zip(&mean).enumerate() {
            if !(s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::Data(format!(
                    "input variable {v} is constant (mean {m}, std {s}); inspect the training data"
                )));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != INPUT_VARIABLES || self.std.len() != INPUT_VARIABLES {
            return Err(Error::Config(format!(
                "normalization needs exactly {INPUT_VARIABLES} entries per field"
            )));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Config(format!("normalization std must be positive, got {s}")));
        }
        Ok(())
    }

    /// Normalizes the inputs; the target stays in physical units.
    pub fn apply<T: Scalar>(&self, sample: &SampleRecord<T>) -> SampleRecord<T> {
        let mut inputs = sample.inputs.clone();
        let s = inputs.shape().to_vec();
        let plane = s[2] * s[3];
        for (j, x) in inputs.data_mut().iter_mut().enumerate() {
            let v = (j / plane) % INPUT_VARIABLES;
            *x = T::from_f64_lossy((x.as_f64() - self.mean[v]) / self.std[v]);
        }
        SampleRecord {
            inputs,
            ..sample.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stats serialize")
    }

    pub fn from_toml(doc: &str) -> Result<Self> {
        let s: Self = toml::from_str(doc).map_err(|e| Error::Config(format!("normalization stats: {e}")))?;
        s.validate()?;
        Ok(s)
    }
}

fn for_each_variable<T: Scalar>(inputs: &Tensor<T>, mut f: impl FnMut(usize, f64)) {
    let s = inputs.shape();
    let plane = s[2] * s[3];
    for (j, x) in inputs.data().iter().enumerate() {
        f((j / plane) % INPUT_VARIABLES, x.as_f64());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub id: String,
    pub valid_time: String,
    pub split: Split,
    /// Relative to the dataset directory.
    pub inputs: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: u32,
    pub k: usize,
    pub dtype: u8,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
    pub records: Vec<RecordEntry>,
}

/// Provenance of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub params: GenParams,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(doc: &str) -> Result<Self> {
        let m: Self = toml::from_str(doc).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        if m.format != 1 {
            return Err(Error::Config(format!("manifest format {} not supported", m.format)));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &m.records {
            if !seen.insert(&r.id) {
                return Err(Error::Data(format!("record {} listed twice", r.id)));
            }
        }
        Ok(m)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        Self::from_toml(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
    }
}

/// Number of validation records for a pool of `n`: `floor(n * fraction)`.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    // tolerance keeps exact products such as 576 * (1/9) from rounding down
    ((n as f64 * fraction) + 1e-9).floor() as usize
}

/// Reassigns the train/validation pool by a seeded shuffle. Test records are untouched.
pub fn split_dataset(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let mut out = manifest.clone();
    let mut pool: Vec<usize> = out
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split != Split::Test)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let n_val = validation_count(pool.len(), val_fraction);
    for (pos, &i) in pool.iter().enumerate() {
        out.records[i].split = if pos < n_val {
            Split::Validation
        } else {
            Split::Train
        };
    }
    out.val_fraction = val_fraction;
    out.split_seed = seed;
    Ok(out)
}

/// Splits in-memory records the same way as [`split_dataset`]; returns `(train, validation)`.
pub fn split_records<T: Scalar>(
    records: Vec<SampleRecord<T>>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord<T>>, Vec<SampleRecord<T>>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = validation_count(records.len(), val_fraction);
    let mut is_val = vec![false; records.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, v) in records.into_iter().zip(is_val) {
        if v {
            val.push(r);
        } else {
            train.push(r);
        }
    }
    Ok((train, val))
}

fn sample_paths(id: &str) -> (String, String) {
    (
        format!("samples/{id}.inputs.etns"),
        format!("samples/{id}.target.etns"),
    )
}

/// Writes sample files and returns their manifest entries.
pub fn write_records<T: Scalar>(
    dir: impl AsRef<Path>,
    records: &[SampleRecord<T>],
    split: Split,
) -> Result<Vec<RecordEntry>> {
    let dir = dir.as_ref();
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    records
        .iter()
        .map(|r| {
            let (inputs, target) = sample_paths(&r.id);
            etns::write_tensor(dir.join(&inputs), &r.inputs)?;
            etns::write_tensor(dir.join(&target), &r.target)?;
            Ok(RecordEntry {
                id: r.id.clone(),
                valid_time: r.valid_time.clone(),
                split,
                inputs,
                target,
            })
        })
        .collect()
}

pub fn write_manifest(dir: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<PathBuf> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn write_norm_stats(dir: impl AsRef<Path>, stats: &NormStats) -> Result<PathBuf> {
    let path = dir.as_ref().join(NORM_FILE);
    fs::write(&path, stats.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_norm_stats(dir: impl AsRef<Path>) -> Result<NormStats> {
    let path = dir.as_ref().join(NORM_FILE);
    NormStats::from_toml(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
}

/// Reads every record of `split`, converting to `T` when the stored width differs.
pub fn load_split<T: Scalar>(
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<SampleRecord<T>>> {
    let dir = dir.as_ref();
    manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_entry(dir, manifest, r))
        .collect()
}

pub fn load_record<T: Scalar>(dir: impl AsRef<Path>, manifest: &DatasetManifest, id: &str) -> Result<SampleRecord<T>> {
    let entry = manifest
        .records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::Data(format!("no record with id {id}")))?;
    load_entry(dir.as_ref(), manifest, entry)
}

fn load_entry<T: Scalar>(dir: &Path, manifest: &DatasetManifest, r: &RecordEntry) -> Result<SampleRecord<T>> {
    let inputs = etns::read_tensor_any(dir.join(&r.inputs))?.cast::<T>();
    let target = etns::read_tensor_any(dir.join(&r.target))?.cast::<T>();
    let s = inputs.shape();
    if s.len() != 4 || s[0] != manifest.k || s[2] != manifest.grid.h || s[3] != manifest.grid.w {
        return Err(Error::Data(format!(
            "record {} has inputs {:?}, manifest says k={} grid {}x{}",
            r.id, s, manifest.k, manifest.grid.h, manifest.grid.w
        )));
    }
    SampleRecord::new(r.id.clone(), r.valid_time.clone(), inputs, target)
}

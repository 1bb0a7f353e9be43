//! Run configuration documents and output directories.

use std::fs;
use std::path::{Path, PathBuf};

use ens_transformer::data_io::synth::SynthSpec;
use ens_transformer::data_io::Split;
use ens_transformer::models::{ModelConfig, Variant};
use ens_transformer::{Error, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const VERSION_LINE: &str = concat!("enstf ", env!("CARGO_PKG_VERSION"));

fn d_variant() -> Variant {
    Variant::Transformer
}
fn d_layers() -> usize {
    1
}
fn d_split() -> Split {
    Split::Test
}

/// Model section; the grid comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "d_variant")]
    pub variant: Variant,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    pub channels: Option<usize>,
    pub heads: Option<usize>,
    pub ddof: Option<usize>,
    pub sigma_floor: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            variant: d_variant(),
            n_layers: d_layers(),
            channels: None,
            heads: None,
            ddof: None,
            sigma_floor: None,
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self, h: usize, w: usize) -> ModelConfig {
        let mut c = ModelConfig::new(self.variant, self.n_layers, h, w);
        c.channels = self.channels.unwrap_or(c.channels);
        c.heads = self.heads.unwrap_or(c.heads);
        c.ddof = self.ddof.unwrap_or(c.ddof);
        c.sigma_floor = self.sigma_floor.unwrap_or(c.sigma_floor);
        c
    }

    /// Fills every optional field so the written config is complete.
    fn resolved(&self) -> Self {
        let c = self.resolve(1, 1);
        Self {
            variant: c.variant,
            n_layers: c.n_layers,
            channels: Some(c.channels),
            heads: Some(c.heads),
            ddof: Some(c.ddof),
            sigma_floor: Some(c.sigma_floor),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSpec {
    /// Score the unprocessed ensemble instead of a checkpoint.
    #[serde(default)]
    pub raw: bool,
    #[serde(default = "d_split")]
    pub split: Split,
}

impl Default for EvaluateSpec {
    fn default() -> Self {
        Self {
            raw: false,
            split: d_split(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    /// Record id; the first test record when absent.
    pub sample: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateSpec {
    pub sample: Option<String>,
    /// `[lat index, lon index]` of the reference point.
    pub point: [usize; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Dataset directory written by `synth`.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Trainer state to continue from.
    pub resume: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub model: Option<ModelSpec>,
    pub train: Option<TrainConfig>,
    pub evaluate: Option<EvaluateSpec>,
    pub attention: Option<SampleSpec>,
    pub correlate: Option<CorrelateSpec>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let doc = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&doc).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        // relative paths in the document are relative to the document
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.checkpoint, &mut cfg.resume].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn data(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::config("`data` (dataset directory) is required"))
    }

    pub fn checkpoint(&self) -> Result<&Path, CliError> {
        self.checkpoint.as_deref().ok_or_else(|| CliError::config("`checkpoint` is required"))
    }

    /// Copy with all defaults materialized, as written next to the outputs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        for p in [&mut c.data, &mut c.checkpoint, &mut c.resume].into_iter().flatten() {
            if let Ok(abs) = p.canonicalize() {
                *p = abs;
            }
        }
        if let Some(m) = &c.model {
            c.model = Some(m.resolved());
        }
        if let Some(t) = &mut c.train {
            t.seed = c.seed;
        }
        c
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::config(format!("config serialization: {e}")))
    }
}

/// Creates `out`, refusing an existing directory unless `force`. A forced
/// directory is emptied first, but never one that holds an input of the run.
pub fn prepare_out(out: &Path, force: bool, inputs: &[&Path]) -> Result<(), CliError> {
    if out.exists() {
        if !force {
            return Err(CliError::config(format!(
                "output directory {} exists; pass --force to replace it",
                out.display()
            )));
        }
        let canon = out.canonicalize().map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
        for i in inputs {
            if let Ok(ci) = i.canonicalize() {
                if ci.starts_with(&canon) {
                    return Err(CliError::config(format!(
                        "refusing to replace {}: it contains the input {}",
                        out.display(),
                        i.display()
                    )));
                }
            }
        }
        fs::remove_dir_all(out).map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
    }
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Writes the resolved config and the tool version into `out`.
pub fn stamp(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let doc = format!("# {VERSION_LINE}\n{}", cfg.to_toml()?);
    write(out.join("config.toml"), doc)?;
    write(out.join("version.txt"), format!("{VERSION_LINE}\n"))
}

pub fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|e| Error::Io { path, source: e }.into())
}

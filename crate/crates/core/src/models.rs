//! Post-processing architectures sharing one convolutional embedding.
//!
//! * `Transformer(n)`: embedding, `n` ensemble attention modules, member-wise
//!   1x1 output projection.
//! * `Direct(n)`: embedding, `n` residual blocks applied to each member
//!   independently, member-wise output projection.
//! * `Ppnn(n)`: member-averaged embedding concatenated with the ensemble mean
//!   and standard deviation of the surface temperature input, `n` residual
//!   blocks, projection to a Gaussian mean and standard deviation.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDiagnostics, AttentionModuleParams};
use crate::autodiff::{Tape, Var};
use crate::data_io::etns;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::KERNEL;
use crate::metrics;
use crate::param::{Bound, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Number of input variables per member.
pub const INPUT_VARIABLES: usize = 3;
/// Input channel holding the surface temperature.
pub const SURFACE_TEMPERATURE: usize = 2;
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Transformer,
    Direct,
    Ppnn,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Transformer => "transformer",
            Variant::Direct => "direct",
            Variant::Ppnn => "ppnn",
        };
        f.write_str(s)
    }
}

fn default_channels() -> usize {
    64
}
fn default_heads() -> usize {
    64
}
fn default_inputs() -> usize {
    INPUT_VARIABLES
}
fn default_ddof() -> usize {
    metrics::DEFAULT_DDOF
}
fn default_floor() -> f64 {
    metrics::DEFAULT_SIGMA_FLOOR
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Attention heads; unused by the baselines.
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_inputs")]
    pub input_variables: usize,
    pub h: usize,
    pub w: usize,
    #[serde(default = "default_ddof")]
    pub ddof: usize,
    #[serde(default = "default_floor")]
    pub sigma_floor: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, n_layers: usize, h: usize, w: usize) -> Self {
        Self {
            variant,
            n_layers,
            channels: default_channels(),
            heads: default_heads(),
            input_variables: INPUT_VARIABLES,
            h,
            w,
            ddof: default_ddof(),
            sigma_floor: default_floor(),
        }
    }

    pub fn with_width(mut self, channels: usize, heads: usize) -> Self {
        self.channels = channels;
        self.heads = heads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return bad("channels must be at least 1".into());
        }
        if self.variant == Variant::Transformer && self.heads == 0 {
            return bad("heads must be at least 1".into());
        }
        if self.input_variables != INPUT_VARIABLES {
            return bad(format!(
                "input_variables must be {INPUT_VARIABLES}, got {}",
                self.input_variables
            ));
        }
        if self.h == 0 || self.w == 0 {
            return bad(format!("grid must be non-empty, got {}x{}", self.h, self.w));
        }
        if !(self.sigma_floor > 0.0) {
            return bad(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (c, kk) = (self.channels, KERNEL * KERNEL);
        let embed = (self.input_variables * kk * c + c) + 2 * (c * kk * c + c);
        let residual = |width: usize| 2 * (width * width + width) + 1;
        match self.variant {
            Variant::Transformer => {
                embed
                    + self.n_layers * AttentionModuleParams::param_count(c, self.heads)
                    + (c + 1)
            }
            Variant::Direct => embed + self.n_layers * residual(c) + (c + 1),
            Variant::Ppnn => {
                let width = c + 2;
                embed + self.n_layers * residual(width) + (width * 2 + 2)
            }
        }
    }

    /// Names the first field in which `other` differs.
    pub fn mismatch(&self, other: &ModelConfig) -> Option<String> {
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    return Some(format!(
                        "{}: checkpoint has {:?}, expected {:?}",
                        stringify!($f), self.$f, other.$f
                    ));
                }
            )*};
        }
        cmp!(variant, n_layers, channels, heads, input_variables, h, w, ddof, sigma_floor);
        None
    }
}

/// Fixup-initialized residual block: `relu(x + s * (W2 relu(W1 x + b1) + b2))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlockParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub scale: ParamId,
}

impl ResidualBlockParams {
    /// `W1` is drawn with fan-in scaling times `n_layers^(-1/2)`; `W2` starts at zero.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (1.0 / width as f64).sqrt() / (n_layers.max(1) as f64).sqrt();
        Ok(Self {
            w1: store.add_uniform(format!("{prefix}.w1"), &[width, width], bound, rng)?,
            b1: store.add_zeros(format!("{prefix}.b1"), &[width])?,
            w2: store.add_zeros(format!("{prefix}.w2"), &[width, width])?,
            b2: store.add_zeros(format!("{prefix}.b2"), &[width])?,
            scale: store.add(format!("{prefix}.scale"), Tensor::full(&[1], T::one()))?,
        })
    }

    fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |n: &str| need(store, &format!("{prefix}.{n}"));
        Ok(Self {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
            scale: get("scale")?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.channel_project(x, bound[self.w1])?;
        let h = tape.add_channel_bias(h, bound[self.b1])?;
        let h = tape.relu(h);
        let h = tape.channel_project(h, bound[self.w2])?;
        let h = tape.add_channel_bias(h, bound[self.b2])?;
        let h = tape.scale_by(h, bound[self.scale])?;
        let sum = tape.add(x, h)?;
        Ok(tape.relu(sum))
    }
}

fn need<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("{name} missing")))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Blocks {
    Attention(Vec<AttentionModuleParams>),
    Residual(Vec<ResidualBlockParams>),
}

/// Parameter handles of a full model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: [(ParamId, ParamId); 3],
    pub blocks: Blocks,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Model output on a tape.
#[derive(Clone, Copy, Debug)]
pub enum Output {
    /// `[k, 1, h, w]`.
    Members(Var),
    /// `[1, 1, h, w]` each.
    Gaussian { mu: Var, sigma: Var },
}

/// Model output as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction<T> {
    Members(Tensor<T>),
    Gaussian { mu: Tensor<T>, sigma: Tensor<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub params: ModelParams,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. Embedding and output projection are drawn
    /// before the blocks, so variants with equal widths share them for a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let kk = (KERNEL * KERNEL) as f64;
        let mut embedding = Vec::with_capacity(3);
        for (l, c_in) in [config.input_variables, c, c].into_iter().enumerate() {
            let bound = (1.0 / (kk * c_in as f64)).sqrt();
            let kernel = store.add_uniform(
                format!("embed.{l}.kernel"),
                &[c, c_in, KERNEL, KERNEL],
                bound,
                &mut rng,
            )?;
            let bias = store.add_zeros(format!("embed.{l}.bias"), &[c])?;
            embedding.push((kernel, bias));
        }
        let (width, outs) = match config.variant {
            Variant::Ppnn => (c + 2, 2),
            _ => (c, 1),
        };
        let out_w = store.add_uniform("output.w", &[width, outs], (1.0 / width as f64).sqrt(), &mut rng)?;
        let out_b = store.add_zeros("output.b", &[outs])?;
        let blocks = match config.variant {
            Variant::Transformer => Blocks::Attention(
                (0..config.n_layers)
                    .map(|l| {
                        AttentionModuleParams::init(
                            &mut store,
                            &format!("blocks.{l}"),
                            c,
                            config.heads,
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?,
            ),
            _ => Blocks::Residual(
                (0..config.n_layers)
                    .map(|l| {
                        ResidualBlockParams::init(
                            &mut store,
                            &format!("blocks.{l}"),
                            width,
                            config.n_layers,
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            config,
            store,
            params: ModelParams {
                embedding: [embedding[0], embedding[1], embedding[2]],
                blocks,
                out_w,
                out_b,
            },
        })
    }

    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let embedding = [0, 1, 2].map(|l| {
            (
                need(&store, &format!("embed.{l}.kernel")),
                need(&store, &format!("embed.{l}.bias")),
            )
        });
        let mut emb = Vec::new();
        for (k, b) in embedding {
            emb.push((k?, b?));
        }
        let blocks = match config.variant {
            Variant::Transformer => Blocks::Attention(
                (0..config.n_layers)
                    .map(|l| AttentionModuleParams::lookup(&store, &format!("blocks.{l}")))
                    .collect::<Result<_>>()?,
            ),
            _ => Blocks::Residual(
                (0..config.n_layers)
                    .map(|l| ResidualBlockParams::lookup(&store, &format!("blocks.{l}")))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            params: ModelParams {
                embedding: [emb[0], emb[1], emb[2]],
                blocks,
                out_w: need(&store, "output.w")?,
                out_b: need(&store, "output.b")?,
            },
            config,
            store,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    fn check_inputs(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::dim("model input", shape, &[0, 3, self.config.h, self.config.w]));
        }
        if shape[1] != self.config.input_variables {
            return Err(Error::Config(format!(
                "model expects {} input channels, got {}",
                self.config.input_variables, shape[1]
            )));
        }
        if shape[2] != self.config.h || shape[3] != self.config.w {
            return Err(Error::dim(
                "model input",
                shape,
                &[shape[0], shape[1], self.config.h, self.config.w],
            ));
        }
        Ok(())
    }

    /// Three member-wise 5x5 convolutions with ReLU.
    pub fn embed(&self, tape: &mut Tape<T>, bound: &Bound, inputs: Var) -> Result<Var> {
        self.check_inputs(tape.shape(inputs))?;
        let mut x = inputs;
        for &(kernel, bias) in &self.params.embedding {
            let y = tape.conv2d_5x5(x, bound[kernel], bound[bias])?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    fn project_out(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.channel_project(x, bound[self.params.out_w])?;
        tape.add_channel_bias(y, bound[self.params.out_b])
    }

    fn residual_stack(&self, tape: &mut Tape<T>, bound: &Bound, mut x: Var) -> Result<Var> {
        if let Blocks::Residual(blocks) = &self.params.blocks {
            for b in blocks {
                x = b.forward(tape, bound, x)?;
            }
        }
        Ok(x)
    }

    /// Full forward pass; attention diagnostics are collected when `capture`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        inputs: Var,
        capture: bool,
    ) -> Result<(Output, Vec<AttentionDiagnostics<T>>)> {
        let mut diags = Vec::new();
        let k = tape.shape(inputs).first().copied().unwrap_or(0);
        let out = match self.config.variant {
            Variant::Transformer => {
                let mut z = self.embed(tape, bound, inputs)?;
                if let Blocks::Attention(blocks) = &self.params.blocks {
                    for b in blocks {
                        let (next, d) = b.forward(tape, bound, z, capture)?;
                        z = next;
                        diags.extend(d);
                    }
                }
                Output::Members(self.project_out(tape, bound, z)?)
            }
            Variant::Direct => {
                let z = self.embed(tape, bound, inputs)?;
                let z = self.residual_stack(tape, bound, z)?;
                Output::Members(self.project_out(tape, bound, z)?)
            }
            Variant::Ppnn => {
                let ddof = self.config.ddof;
                if k < 2 || k <= ddof {
                    return Err(Error::EnsembleSize {
                        op: "ppnn",
                        min: 2.max(ddof + 1),
                        got: k,
                    });
                }
                let z = self.embed(tape, bound, inputs)?;
                let zbar = tape.mean_members(z)?;
                let t2m = tape.select_channel(inputs, SURFACE_TEMPERATURE)?;
                let t_mean = tape.mean_members(t2m)?;
                let t_std = tape.std_members(t2m, ddof)?;
                let x = tape.concat_channels(&[zbar, t_mean, t_std])?;
                let x = self.residual_stack(tape, bound, x)?;
                let raw = self.project_out(tape, bound, x)?;
                let mu = tape.select_channel(raw, 0)?;
                let s = tape.select_channel(raw, 1)?;
                let s = tape.softplus(s);
                let sigma = tape.add_scalar(s, lit(self.config.sigma_floor));
                Output::Gaussian { mu, sigma }
            }
        };
        Ok((out, diags))
    }

    /// Latitude-weighted Gaussian CRPS of the model output against `target`.
    pub fn loss(&self, tape: &mut Tape<T>, output: Output, target: &Tensor<T>, grid: &Grid) -> Result<Var> {
        match output {
            Output::Members(m) => metrics::crps_loss_members(
                tape,
                m,
                target,
                grid,
                self.config.ddof,
                lit(self.config.sigma_floor),
            ),
            Output::Gaussian { mu, sigma } => {
                metrics::crps_loss_parametric(tape, mu, sigma, target, grid)
            }
        }
    }

    pub fn predict(&self, inputs: &Tensor<T>) -> Result<Prediction<T>> {
        Ok(self.predict_with_diagnostics(inputs, false)?.0)
    }

    pub fn predict_with_diagnostics(
        &self,
        inputs: &Tensor<T>,
        capture: bool,
    ) -> Result<(Prediction<T>, Vec<AttentionDiagnostics<T>>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let (out, diags) = self.forward(&mut tape, &bound, x, capture)?;
        let pred = match out {
            Output::Members(m) => Prediction::Members(tape.value(m).clone()),
            Output::Gaussian { mu, sigma } => Prediction::Gaussian {
                mu: tape.value(mu).clone(),
                sigma: tape.value(sigma).clone(),
            },
        };
        Ok((pred, diags))
    }

    // ---- checkpoints --------------------------------------------------------

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_bytes_with(&[], "")
    }

    /// Serializes parameters plus extra named tensors and an extra metadata table.
    pub fn to_bytes_with(&self, extra: &[(String, Tensor<T>)], extra_meta: &str) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT,
            model: self.config.clone(),
        };
        let mut doc = toml::to_string(&meta)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        doc.push_str(extra_meta);
        let tensors = self
            .store
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(extra.iter().map(|(n, t)| (n.as_str(), t)));
        etns::encode_bundle(&doc, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bundle = etns::decode_bundle(bytes)?;
        Self::from_bundle(&bundle)
    }

    pub fn from_bundle(bundle: &etns::Bundle) -> Result<Self> {
        let meta = parse_meta(&bundle.meta)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "checkpoint format {} is not supported",
                meta.format
            )));
        }
        let reference = Self::init(meta.model.clone(), 0)?;
        let mut loaded = ParamStore::new();
        for (name, t) in &bundle.tensors {
            if reference.store.id(name).is_some() {
                loaded.add(name.clone(), t.cast::<T>())?;
            }
        }
        let mut store = reference.store.clone();
        store.load_values(&loaded)?;
        Self::from_store(meta.model, store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Loads and checks the embedded config against `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if let Some(m) = model.config.mismatch(expected) {
            return Err(Error::Checkpoint(m));
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: u32,
    model: ModelConfig,
}

/// Unknown tables such as trainer state are ignored.
fn parse_meta(doc: &str) -> Result<CheckpointMeta> {
    toml::from_str(doc).map_err(|e| Error::Checkpoint(format!("config document: {e}")))
}

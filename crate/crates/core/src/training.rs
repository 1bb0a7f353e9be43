//! Adam optimization with a plateau learning-rate schedule, early stopping and
//! per-sample member subsampling.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data_io::dataset::SampleRecord;
use crate::data_io::etns;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{self, PitHistogram, RankHistogram, ScoreReport};
use crate::models::{Model, Prediction};
use crate::param::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const PIT_BINS: usize = 20;

fn d_batch() -> usize {
    8
}
fn d_lr0() -> f64 {
    1e-3
}
fn d_plateau() -> usize {
    5
}
fn d_factor() -> f64 {
    0.3
}
fn d_stop() -> usize {
    20
}
fn d_max_epochs() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_plateau")]
    pub plateau_patience: usize,
    #[serde(default = "d_factor")]
    pub lr_factor: f64,
    #[serde(default = "d_stop")]
    pub stop_patience: usize,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    /// Members drawn per training sample; `None` trains on all of them.
    #[serde(default)]
    pub subsample_members: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: d_batch(),
            lr0: d_lr0(),
            plateau_patience: d_plateau(),
            lr_factor: d_factor(),
            stop_patience: d_stop(),
            max_epochs: d_max_epochs(),
            subsample_members: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor));
        }
        if self.plateau_patience == 0 || self.stop_patience == 0 {
            return bad("patience values must be >= 1".into());
        }
        if let Some(m) = self.subsample_members {
            if m < 2 {
                return bad(format!("subsample_members must be >= 2, got {m}"));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Tensor<T>> { store.iter().map(|p| Tensor::zeros(p.value.shape())).collect() };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Training(format!(
            "optimizer tracks {} parameters, model has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (lit::<T>(state.beta1), lit::<T>(state.beta2));
    let c1 = lit::<T>(1.0 - state.beta1.powi(t));
    let c2 = lit::<T>(1.0 - state.beta2.powi(t));
    let (lr, eps) = (lit::<T>(lr), lit::<T>(state.eps));
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() {
            return Err(Error::Training(format!(
                "optimizer moment for {} has shape {:?}, parameter has {:?}",
                p.name,
                m.shape(),
                p.value.shape()
            )));
        }
        let g = p.grad.data();
        for (((x, m), v), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Draws `m` distinct members without replacement, kept in ascending order.
pub fn subsample_members<T: Scalar>(
    sample: &SampleRecord<T>,
    m: usize,
    rng: &mut impl Rng,
) -> Result<SampleRecord<T>> {
    let k = sample.k();
    if m < 2 || m > k {
        return Err(Error::Config(format!(
            "cannot subsample {m} of {k} members (need 2 <= m <= k)"
        )));
    }
    let mut idx = index::sample(rng, k, m).into_vec();
    idx.sort_unstable();
    sample.with_members(&idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_crps: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub initial_val_crps: f64,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_crps,lr\n");
        s.push_str(&format!("0,,{},\n", self.initial_val_crps));
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_crps, r.lr));
        }
        s
    }
}

/// Scalar bookkeeping of a training run, stored alongside resumable checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_val: f64,
    pub best_epoch: usize,
    /// Epochs without a new minimum since the last improvement or LR reduction.
    pub since_lr_change: usize,
    /// Epochs without a new minimum since the last improvement.
    pub since_best: usize,
    pub adam_step: u64,
    pub stopped: bool,
}

impl Schedule {
    pub fn new(config: &TrainConfig, initial_val: f64) -> Self {
        Self {
            epoch: 0,
            lr: config.lr0,
            best_val: initial_val,
            best_epoch: 0,
            since_lr_change: 0,
            since_best: 0,
            adam_step: 0,
            stopped: false,
        }
    }

    /// Books the validation score of `epoch`; returns whether it is a new best.
    pub fn record(&mut self, epoch: usize, val_crps: f64, config: &TrainConfig) -> bool {
        self.epoch = epoch;
        if val_crps < self.best_val {
            self.best_val = val_crps;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.since_lr_change = 0;
            return true;
        }
        self.since_best += 1;
        self.since_lr_change += 1;
        if self.since_lr_change >= config.plateau_patience {
            self.lr *= config.lr_factor;
            self.since_lr_change = 0;
        }
        if self.since_best >= config.stop_patience {
            self.stopped = true;
        }
        false
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub best: ParamStore<T>,
    pub adam: AdamState<T>,
    pub schedule: Schedule,
    pub history: History,
}

impl<T: Scalar> TrainState<T> {
    /// Starts a run; the initial validation CRPS is the first best value.
    pub fn new(model: Model<T>, config: TrainConfig, val: &[SampleRecord<T>], grid: &Grid) -> Result<Self> {
        config.validate()?;
        if val.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let initial = validation_crps(&model, val, grid)?;
        check_finite(initial, "initial validation CRPS")?;
        Ok(Self {
            best: model.store.clone(),
            adam: AdamState::new(&model.store),
            schedule: Schedule::new(&config, initial),
            history: History {
                initial_val_crps: initial,
                epochs: Vec::new(),
            },
            config,
            model,
        })
    }

    pub fn finished(&self) -> bool {
        self.schedule.stopped || self.schedule.epoch >= self.config.max_epochs
    }

    /// Runs one epoch over `train` followed by validation and the schedule update.
    pub fn run_epoch(&mut self, train: &[SampleRecord<T>], val: &[SampleRecord<T>], grid: &Grid) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let epoch = self.schedule.epoch + 1;
        let lr = self.schedule.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            self.model.store.zero_grads();
            for &i in batch {
                let sample = match self.config.subsample_members {
                    Some(m) => subsample_members(&train[i], m, &mut rng)?,
                    None => train[i].clone(),
                };
                let loss = self.sample_gradient(&sample, grid)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite training loss {loss} at epoch {epoch}, batch {b}, sample {} (lr {lr}, adam step {}, max |param| {})",
                        sample.id,
                        self.adam.step,
                        max_abs_param(&self.model.store)
                    )));
                }
                loss_sum += loss;
            }
            self.model.store.scale_grads(lit(1.0 / batch.len() as f64));
            adam_step(&mut self.model.store, &mut self.adam, lr)?;
        }
        self.model.store.zero_grads();

        let val_crps = validation_crps(&self.model, val, grid)?;
        check_finite(val_crps, "validation CRPS")?;
        self.schedule.adam_step = self.adam.step;
        if self.schedule.record(epoch, val_crps, &self.config) {
            self.best = self.model.store.clone();
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_crps,
            lr,
        };
        self.history.epochs.push(rec.clone());
        Ok(rec)
    }

    fn sample_gradient(&mut self, sample: &SampleRecord<T>, grid: &Grid) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape, true);
        let x = tape.constant(sample.inputs.clone());
        let (out, _) = self.model.forward(&mut tape, &bound, x, false)?;
        let loss = self.model.loss(&mut tape, out, &sample.target, grid)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        self.model.store.accumulate_grads(&tape, &bound)?;
        Ok(value)
    }

    /// The model with the best validation parameters.
    pub fn best_model(&self) -> Result<Model<T>> {
        Model::from_store(self.model.config.clone(), self.best.clone())
    }

    /// Checkpoint of the current parameters that also carries the best
    /// parameters, optimizer moments, schedule and history.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut extra = Vec::new();
        for ((p, m), v) in self.best.iter().zip(&self.adam.m).zip(&self.adam.v) {
            extra.push((format!("best/{}", p.name), p.value.clone()));
            extra.push((format!("adam_m/{}", p.name), m.clone()));
            extra.push((format!("adam_v/{}", p.name), v.clone()));
        }
        let meta = ResumeMeta {
            train: self.config.clone(),
            schedule: self.schedule.clone(),
            history: self.history.clone(),
        };
        let doc = toml::to_string(&meta).map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))?;
        self.model.to_bytes_with(&extra, &format!("\n[trainer]\n{}", indent_tables(&doc)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bundle = etns::decode_bundle(bytes)?;
        let model = Model::<T>::from_bundle(&bundle)?;
        #[derive(Deserialize)]
        struct Doc {
            trainer: Option<ResumeMeta>,
        }
        let doc: Doc = toml::from_str(&bundle.meta).map_err(|e| Error::Checkpoint(format!("checkpoint metadata: {e}")))?;
        let meta = doc
            .trainer
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no trainer state".into()))?;
        let fetch = |prefix: &str, name: &str| -> Result<Tensor<T>> {
            bundle
                .get(&format!("{prefix}/{name}"))
                .map(|t| t.cast::<T>())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {prefix}/{name}")))
        };
        let mut best = model.store.clone();
        let mut adam = AdamState::new(&model.store);
        for (i, p) in model.store.iter().enumerate() {
            let b = fetch("best", &p.name)?;
            let m = fetch("adam_m", &p.name)?;
            let v = fetch("adam_v", &p.name)?;
            for t in [&b, &m, &v] {
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "trainer tensor for {} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
            }
            best.iter_mut().nth(i).expect("same store layout").value = b;
            adam.m[i] = m;
            adam.v[i] = v;
        }
        adam.step = meta.schedule.adam_step;
        meta.train.validate()?;
        Ok(Self {
            config: meta.train,
            model,
            best,
            adam,
            schedule: meta.schedule,
            history: meta.history,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    train: TrainConfig,
    schedule: Schedule,
    history: History,
}

/// Re-roots the tables of a standalone TOML document under `[trainer]`.
fn indent_tables(doc: &str) -> String {
    doc.lines()
        .map(|l| {
            if let Some(rest) = l.strip_prefix("[[") {
                format!("[[trainer.{rest}")
            } else if let Some(rest) = l.strip_prefix('[') {
                format!("[trainer.{rest}")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is {v}")))
    }
}

fn max_abs_param<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .flat_map(|p| p.value.data().iter())
        .map(|v| v.as_f64().abs())
        .fold(0.0, f64::max)
}

/// Result of [`train`]: the best-validation model and the full history.
#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub model: Model<T>,
    pub history: History,
    pub state: TrainState<T>,
}

/// Full protocol: trains until the stop plateau or `max_epochs`.
pub fn train<T: Scalar>(
    model: Model<T>,
    train: &[SampleRecord<T>],
    val: &[SampleRecord<T>],
    grid: &Grid,
    config: &TrainConfig,
) -> Result<Trained<T>> {
    let state = TrainState::new(model, config.clone(), val, grid)?;
    resume(state, train, val, grid)
}

/// Continues a run until it finishes.
pub fn resume<T: Scalar>(
    mut state: TrainState<T>,
    train: &[SampleRecord<T>],
    val: &[SampleRecord<T>],
    grid: &Grid,
) -> Result<Trained<T>> {
    while !state.finished() {
        state.run_epoch(train, val, grid)?;
    }
    Ok(Trained {
        model: state.best_model()?,
        history: state.history.clone(),
        state,
    })
}

/// Mean latitude-weighted CRPS of full-ensemble predictions.
pub fn validation_crps<T: Scalar>(model: &Model<T>, records: &[SampleRecord<T>], grid: &Grid) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        total += score_prediction(model, &r.id, &model.predict(&r.inputs)?, &r.target, grid)?.crps;
    }
    Ok(total / records.len().max(1) as f64)
}

fn score_prediction<T: Scalar>(
    model: &Model<T>,
    id: &str,
    pred: &Prediction<T>,
    target: &Tensor<T>,
    grid: &Grid,
) -> Result<metrics::SampleScore> {
    match pred {
        Prediction::Members(m) => {
            metrics::score_members(id, m, target, grid, model.config.ddof, model.config.sigma_floor)
        }
        Prediction::Gaussian { mu, sigma } => metrics::score_parametric(id, mu, sigma, target, grid),
    }
}

/// Scores and calibration histograms over one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: ScoreReport,
    /// Present for ensemble outputs.
    pub rank: Option<RankHistogram>,
    /// Present for Gaussian outputs.
    pub pit: Option<PitHistogram>,
}

/// Tie-breaking stream for rank histograms; fixed so reports are reproducible.
const RANK_TIE_SEED: u64 = 0x5eed;

/// Full-ensemble evaluation of a model.
pub fn evaluate<T: Scalar>(model: &Model<T>, records: &[SampleRecord<T>], grid: &Grid) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(RANK_TIE_SEED);
    let mut scores = Vec::with_capacity(records.len());
    let mut rank: Option<RankHistogram> = None;
    let mut pit: Option<PitHistogram> = None;
    for r in records {
        let pred = model.predict(&r.inputs)?;
        scores.push(score_prediction(model, &r.id, &pred, &r.target, grid)?);
        match &pred {
            Prediction::Members(m) => {
                let k = m.members();
                match &rank {
                    Some(h) if h.counts.len() != k + 1 => {
                        return Err(Error::Data(format!(
                            "record {} has {k} members, earlier records had {}",
                            r.id,
                            h.counts.len() - 1
                        )))
                    }
                    _ => {}
                }
                rank.get_or_insert_with(|| RankHistogram::new(k)).add(m, &r.target, &mut rng)?;
            }
            Prediction::Gaussian { mu, sigma } => {
                pit.get_or_insert_with(|| PitHistogram::new(PIT_BINS))
                    .add(&metrics::pit_parametric(mu, sigma, &r.target)?);
            }
        }
    }
    Ok(Evaluation {
        report: ScoreReport::from_samples(model.config.variant.to_string(), scores, model.config.ddof),
        rank,
        pit,
    })
}

/// Scores the unprocessed surface-temperature ensemble of each record.
pub fn evaluate_raw<T: Scalar>(
    records: &[SampleRecord<T>],
    grid: &Grid,
    ddof: usize,
    sigma_floor: f64,
) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(RANK_TIE_SEED);
    let mut scores = Vec::with_capacity(records.len());
    let mut rank: Option<RankHistogram> = None;
    for r in records {
        let m = r.surface_temperature();
        scores.push(metrics::score_members(&r.id, &m, &r.target, grid, ddof, sigma_floor)?);
        rank.get_or_insert_with(|| RankHistogram::new(m.members()))
            .add(&m, &r.target, &mut rng)?;
    }
    Ok(Evaluation {
        report: ScoreReport::from_samples("raw", scores, ddof),
        rank,
        pit: None,
    })
}

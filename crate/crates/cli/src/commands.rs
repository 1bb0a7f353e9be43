//! The five subcommands, generic over the floating-point width.

use std::path::Path;

use ens_transformer::data_io::synth::write_synthetic;
use ens_transformer::data_io::{load_record, load_split, read_norm_stats, DatasetManifest, SampleRecord, Split};
use ens_transformer::data_io::etns::write_tensor;
use ens_transformer::grid::Grid;
use ens_transformer::metrics::{spatial_correlation, DEFAULT_DDOF, DEFAULT_SIGMA_FLOOR};
use ens_transformer::training::{evaluate, evaluate_raw, Evaluation, TrainState};
use ens_transformer::{Model, NormStats, Prediction, Scalar, Variant};

use crate::config::{write, RunConfig};
use crate::error::CliError;

pub struct Dataset<T> {
    pub dir: std::path::PathBuf,
    pub manifest: DatasetManifest,
    pub stats: NormStats,
    pub grid: Grid,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let manifest = DatasetManifest::load(dir)?;
        let stats = read_norm_stats(dir)?;
        let grid = Grid::new(manifest.grid.h, manifest.grid.w)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            stats,
            grid,
            _t: std::marker::PhantomData,
        })
    }

    pub fn raw(&self, split: Split) -> Result<Vec<SampleRecord<T>>, CliError> {
        let recs = load_split(&self.dir, &self.manifest, split)?;
        if recs.is_empty() {
            return Err(CliError::from(ens_transformer::Error::Data(format!("the {split:?} split is empty"))));
        }
        Ok(recs)
    }

    pub fn normalized(&self, split: Split) -> Result<Vec<SampleRecord<T>>, CliError> {
        Ok(self.raw(split)?.iter().map(|r| self.stats.apply(r)).collect())
    }

    /// A named record, or the first test record.
    pub fn record(&self, id: Option<&str>) -> Result<SampleRecord<T>, CliError> {
        let id = match id {
            Some(id) => id.to_string(),
            None => self
                .manifest
                .ids(Split::Test)
                .first()
                .map(|s| s.to_string())
                .ok_or_else(|| CliError::from(ens_transformer::Error::Data("dataset has no test records".into())))?,
        };
        Ok(load_record(&self.dir, &self.manifest, &id)?)
    }
}

fn load_model<T: Scalar>(cfg: &RunConfig, grid: &Grid) -> Result<Model<T>, CliError> {
    let path = cfg.checkpoint()?;
    let model = match &cfg.model {
        Some(spec) => Model::load_expecting(path, &spec.resolve(grid.h, grid.w))?,
        None => Model::load(path)?,
    };
    if (model.config.h, model.config.w) != (grid.h, grid.w) {
        return Err(CliError::config(format!(
            "checkpoint grid {}x{} does not match dataset grid {}x{}",
            model.config.h, model.config.w, grid.h, grid.w
        )));
    }
    Ok(model)
}

pub fn synth<T: Scalar>(cfg: &mut RunConfig, out: &Path) -> Result<(), CliError> {
    let spec = cfg.synth.get_or_insert_with(Default::default).clone();
    let (manifest, _) = write_synthetic::<T>(out, &spec, cfg.seed)?;
    let ds = Dataset::<T>::open(out)?;
    let raw = evaluate_raw(&ds.raw(Split::Test)?, &ds.grid, DEFAULT_DDOF, DEFAULT_SIGMA_FLOOR)?.report;
    let summary = format!(
        "samples: {} train, {} validation, {} test\nmembers: {}\ngrid: {}x{}\nraw test CRPS {:.6}, RMSE {:.6}, spread {:.6}, spread/skill {:.6}\n",
        manifest.count(Split::Train),
        manifest.count(Split::Validation),
        manifest.count(Split::Test),
        manifest.k,
        spec.h,
        spec.w,
        raw.crps,
        raw.rmse,
        raw.spread,
        raw.spread_skill()
    );
    print!("{summary}");
    write(out.join("summary.txt"), summary)
}

pub fn train<T: Scalar>(cfg: &mut RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = Dataset::<T>::open(cfg.data()?)?;
    let train = ds.normalized(Split::Train)?;
    let val = ds.normalized(Split::Validation)?;
    let mut state = match &cfg.resume {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| ens_transformer::Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let mut state = TrainState::<T>::from_bytes(&bytes)?;
            // only the epoch budget may change when continuing
            if let Some(tc) = &cfg.train {
                let mut want = tc.clone();
                want.seed = state.config.seed;
                want.max_epochs = state.config.max_epochs;
                if want != state.config {
                    return Err(CliError::config("[train] differs from the resumed run in more than max_epochs"));
                }
                state.config.max_epochs = tc.max_epochs;
            }
            if let Some(spec) = &cfg.model {
                if let Some(m) = state.model.config.mismatch(&spec.resolve(ds.grid.h, ds.grid.w)) {
                    return Err(CliError::config(format!("resume state: {m}")));
                }
            }
            cfg.seed = state.config.seed;
            cfg.train = Some(state.config.clone());
            state
        }
        None => {
            let mut tc = cfg.train.clone().unwrap_or_default();
            tc.seed = cfg.seed;
            let spec = cfg.model.get_or_insert_with(Default::default);
            let model = Model::<T>::init(spec.resolve(ds.grid.h, ds.grid.w), cfg.seed)?;
            TrainState::new(model, tc, &val, &ds.grid)?
        }
    };
    eprintln!("initial validation CRPS {:.5}", state.history.initial_val_crps);
    while !state.finished() {
        let r = state.run_epoch(&train, &val, &ds.grid)?;
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}",
            r.epoch, r.train_loss, r.val_crps, r.lr
        );
        write(out.join("state.etnb"), state.to_bytes()?)?;
    }
    let best = state.best_model()?;
    best.save(out.join("model.etnb"))?;
    write(out.join("history.csv"), state.history.to_csv())?;
    println!(
        "best validation CRPS {:.5} at epoch {}",
        state.schedule.best_val, state.schedule.best_epoch
    );
    Ok(())
}

fn write_evaluation(out: &Path, ev: &Evaluation) -> Result<(), CliError> {
    write(out.join("report.txt"), ev.report.to_table())?;
    write(out.join("report.json"), ev.report.to_json())?;
    if let Some(r) = &ev.rank {
        write(out.join("rank_histogram.csv"), r.to_csv())?;
    }
    if let Some(p) = &ev.pit {
        write(out.join("pit_histogram.csv"), p.to_csv())?;
    }
    println!(
        "{}: CRPS {:.5}  RMSE {:.5}  Spread {:.5}",
        ev.report.label, ev.report.crps, ev.report.rmse, ev.report.spread
    );
    Ok(())
}

pub fn evaluate_cmd<T: Scalar>(cfg: &mut RunConfig, out: &Path) -> Result<(), CliError> {
    let spec = cfg.evaluate.get_or_insert_with(Default::default).clone();
    let ds = Dataset::<T>::open(cfg.data()?)?;
    let ev = if spec.raw {
        let (ddof, floor) = match &cfg.model {
            Some(m) => {
                let c = m.resolve(ds.grid.h, ds.grid.w);
                (c.ddof, c.sigma_floor)
            }
            None => (DEFAULT_DDOF, DEFAULT_SIGMA_FLOOR),
        };
        evaluate_raw(&ds.raw(spec.split)?, &ds.grid, ddof, floor)?
    } else {
        let model = load_model::<T>(cfg, &ds.grid)?;
        evaluate(&model, &ds.normalized(spec.split)?, &ds.grid)?
    };
    write_evaluation(out, &ev)
}

pub fn attention<T: Scalar>(cfg: &mut RunConfig, out: &Path) -> Result<(), CliError> {
    let sample = cfg.attention.get_or_insert_with(Default::default).sample.clone();
    let ds = Dataset::<T>::open(cfg.data()?)?;
    let model = load_model::<T>(cfg, &ds.grid)?;
    if model.config.variant != Variant::Transformer {
        return Err(CliError::config(format!(
            "attention maps need a transformer checkpoint, got {}",
            model.config.variant
        )));
    }
    let rec = ds.stats.apply(&ds.record(sample.as_deref())?);
    let (_, diags) = model.predict_with_diagnostics(&rec.inputs, true)?;
    let k = rec.k();
    for (layer, d) in diags.iter().enumerate() {
        let heads = d.attn_map.shape()[0];
        let plane = ds.grid.h * ds.grid.w;
        for head in 0..heads {
            let map = ens_transformer::Tensor::new(
                vec![ds.grid.h, ds.grid.w],
                d.attn_map.data()[head * plane..(head + 1) * plane].to_vec(),
            )?;
            let weights = ens_transformer::Tensor::from_fn(&[k, k], |ij| d.weights.data()[ij * heads + head]);
            write_tensor(out.join(format!("layer{layer}_head{head}_map.etns")), &map)?;
            write_tensor(out.join(format!("layer{layer}_head{head}_weights.etns")), &weights)?;
        }
    }
    println!("{} layers, sample {}", diags.len(), rec.id);
    Ok(())
}

pub fn correlate<T: Scalar>(cfg: &mut RunConfig, out: &Path) -> Result<(), CliError> {
    let spec = cfg
        .correlate
        .clone()
        .ok_or_else(|| CliError::config("[correlate] section with `point = [lat, lon]` is required"))?;
    let ds = Dataset::<T>::open(cfg.data()?)?;
    let point = (spec.point[0], spec.point[1]);
    if point.0 >= ds.grid.h || point.1 >= ds.grid.w {
        return Err(CliError::config(format!(
            "point {:?} outside the {}x{} grid",
            spec.point, ds.grid.h, ds.grid.w
        )));
    }
    let model = load_model::<T>(cfg, &ds.grid)?;
    let rec = ds.record(spec.sample.as_deref())?;
    let raw = spatial_correlation(&rec.surface_temperature(), point)?;
    let Prediction::Members(post) = model.predict(&ds.stats.apply(&rec).inputs)? else {
        return Err(CliError::config("correlation fields need an ensemble-output checkpoint"));
    };
    let post = spatial_correlation(&post, point)?;
    write_tensor(out.join("raw_correlation.etns"), &raw.field)?;
    write_tensor(out.join("post_correlation.etns"), &post.field)?;
    println!("sample {}, point {:?}", rec.id, spec.point);
    Ok(())
}

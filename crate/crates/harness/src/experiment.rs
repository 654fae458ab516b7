//! Experiment configuration, deterministic training and evaluation.
//!
//! A run directory holds `config.json` (the resolved configuration),
//! `run.csv` (one row per epoch, bit-reproducible from the seed),
//! `timing.csv` (wall-clock per phase, not reproducible) and
//! `checkpoint.ntf` (final weights).

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use ssmixer_core::autodiff::softmax_rows;
use ssmixer_core::optim::{AdamState, AdamW};
use ssmixer_core::tsm2::{persistence, Tsm2, Tsm2Config};
use ssmixer_core::vim2::{Vim2, Vim2Config};
use ssmixer_core::{ntf, Bound, Linear, ParamStore, SplitMix64, Tape, Tensor, Var};

use crate::data::{self, ImageSet, Series, TsSpec, Windowing, Windows, IMAGE_SIDE};
use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Tsm2(Tsm2Config),
    Vim2(Vim2Config),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Load from here instead of generating from the seed.
    pub dir: Option<PathBuf>,
    pub series: TsSpec,
    pub stride: usize,
    pub val_fraction: f64,
    pub train_images: usize,
    pub val_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            series: TsSpec::default(),
            stride: 4,
            val_fraction: 0.25,
            train_images: 600,
            val_images: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamW,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_epochs() -> usize {
    20
}

fn default_batch() -> usize {
    16
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json { path: path.into(), source })
    }

    /// Forecasting on the lag-coupled series at desk scale.
    pub fn tsm2_desk() -> Self {
        ExperimentConfig {
            model: ModelConfig::Tsm2(Tsm2Config::default()),
            optimizer: AdamW::default(),
            epochs: 200,
            batch_size: 16,
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
        }
    }

    /// Three-class toy images at desk scale.
    pub fn vim2_desk() -> Self {
        ExperimentConfig {
            model: ModelConfig::Vim2(Vim2Config { num_classes: 3, ..Vim2Config::desk() }),
            optimizer: AdamW::default(),
            epochs: 50,
            batch_size: 16,
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HarnessError::Invalid("batch_size must be positive".into()));
        }
        match &self.model {
            ModelConfig::Tsm2(c) => {
                c.validate()?;
                if c.future_features > 0 && c.future_len != c.horizon {
                    return Err(HarnessError::Invalid("future_len must equal the horizon".into()));
                }
            }
            ModelConfig::Vim2(c) => {
                c.validate()?;
                if c.in_channels != 3 || c.image_size != IMAGE_SIDE {
                    return Err(HarnessError::Invalid(format!(
                        "toy images are 3×{IMAGE_SIDE}×{IMAGE_SIDE}; model expects {}×{}×{}",
                        c.in_channels, c.image_size, c.image_size
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Tsm2(Tsm2),
    Vim2(Vim2),
}

impl Model {
    pub fn build(config: &ModelConfig, store: &mut ParamStore, rng: &mut SplitMix64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Tsm2(c) => Model::Tsm2(Tsm2::new(c.clone(), store, rng)?),
            ModelConfig::Vim2(c) => Model::Vim2(Vim2::new(c.clone(), store, rng)?),
        })
    }
}

pub enum Dataset {
    Series { series: Series, windowing: Windowing, train: Windows, val: Windows },
    Images { train: ImageSet, val: ImageSet },
}

impl Dataset {
    fn train_len(&self) -> usize {
        match self {
            Dataset::Series { train, .. } => train.starts.len(),
            Dataset::Images { train, .. } => train.len(),
        }
    }
}

fn windowing_for(c: &Tsm2Config, data: &DataConfig) -> Windowing {
    Windowing {
        history: c.history,
        horizon: c.horizon,
        stride: data.stride,
        val_fraction: data.val_fraction,
        use_static: c.static_features > 0,
        use_future: c.future_features > 0,
    }
}

/// Load or generate the data an experiment asks for.
pub fn prepare_data(config: &ExperimentConfig, data_seed: u64) -> Result<Dataset> {
    match &config.model {
        ModelConfig::Tsm2(c) => {
            let series = match &config.data.dir {
                Some(dir) => data::load_series(dir)?,
                None => data::gen_synthetic_ts(&config.data.series, data_seed)?,
            };
            if series.variates() != c.variates {
                return Err(HarnessError::Invalid(format!(
                    "model has {} variates, data has {}",
                    c.variates,
                    series.variates()
                )));
            }
            let windowing = windowing_for(c, &config.data);
            let (train, val) = windowing.split(series.len())?;
            Ok(Dataset::Series { series, windowing, train, val })
        }
        ModelConfig::Vim2(c) => {
            let (train, val) = match &config.data.dir {
                Some(dir) => data::load_images(dir)?,
                None => {
                    let mut rng = SplitMix64::new(data_seed);
                    let train = data::gen_toy_images(c.num_classes, config.data.train_images, rng.next_u64())?;
                    let val = data::gen_toy_images(c.num_classes, config.data.val_images, rng.next_u64())?;
                    (train, val)
                }
            };
            if train.classes != c.num_classes {
                return Err(HarnessError::Invalid(format!(
                    "model has {} classes, data has {}",
                    c.num_classes, train.classes
                )));
            }
            Ok(Dataset::Images { train, val })
        }
    }
}

/// One `run.csv` row. `val_metric` is the MSE ratio to persistence for
/// forecasting and accuracy for classification; `baseline` is the
/// persistence MSE or the majority-class accuracy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub baseline: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub epoch: usize,
    pub phase: &'static str,
    pub seconds: f64,
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub records: Vec<EpochRecord>,
    pub timings: Vec<Timing>,
}

/// Seeds for data, initialization and batch order, all derived from `seed`.
struct Seeds {
    data: u64,
    init: SplitMix64,
    order: SplitMix64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let mut master = SplitMix64::new(seed);
        Seeds { data: master.next_u64(), init: master.fork(), order: master.fork() }
    }
}

fn batch_loss(model: &Model, data: &Dataset, tape: &mut Tape, p: &Bound, idx: &[usize]) -> Result<Var> {
    match (model, data) {
        (Model::Tsm2(m), Dataset::Series { series, windowing, train, .. }) => {
            let starts: Vec<usize> = idx.iter().map(|&i| train.starts[i]).collect();
            let batch = windowing.batch(series, &starts)?;
            let y = m.forward_batch(tape, p, &batch)?;
            Ok(tape.mse(y, batch.target.as_ref().expect("windows carry targets"))?)
        }
        (Model::Vim2(m), Dataset::Images { train, .. }) => {
            let (images, labels) = train.batch(idx)?;
            let x = tape.constant(images);
            let logits = m.forward(tape, p, x)?;
            Ok(tape.cross_entropy(logits, &labels)?)
        }
        _ => Err(HarnessError::Invalid("model and data kinds differ".into())),
    }
}

/// Validation loss, metric and baseline.
pub fn evaluate(model: &Model, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<(f64, f64, f64)> {
    match (model, data) {
        (Model::Tsm2(m), Dataset::Series { series, windowing, val, .. }) => {
            let (mut se, mut base, mut count) = (0.0, 0.0, 0usize);
            for chunk in val.starts.chunks(batch_size.max(1)) {
                let batch = windowing.batch(series, chunk)?;
                let target = batch.target.as_ref().expect("windows carry targets");
                let y = m.predict(store, &batch)?;
                let pers = persistence(&batch.x, windowing.horizon)?;
                for ((a, b), t) in y.data().iter().zip(pers.data()).zip(target.data()) {
                    se += (a - t).powi(2);
                    base += (b - t).powi(2);
                }
                count += target.len();
            }
            let (mse, pmse) = (se / count as f64, base / count as f64);
            Ok((mse, mse / pmse, pmse))
        }
        (Model::Vim2(m), Dataset::Images { val, .. }) => {
            let (mut nll, mut correct) = (0.0, 0usize);
            let all: Vec<usize> = (0..val.len()).collect();
            for chunk in all.chunks(batch_size.max(1)) {
                let (images, labels) = val.batch(chunk)?;
                let probs = softmax_rows(&m.logits(store, &images)?);
                let k = val.classes;
                for (r, &l) in labels.iter().enumerate() {
                    let row = &probs.data()[r * k..(r + 1) * k];
                    nll -= row[l].max(f64::MIN_POSITIVE).ln();
                    correct += usize::from(argmax(row) == l);
                }
            }
            let mut counts = vec![0usize; val.classes];
            val.labels.iter().for_each(|&l| counts[l] += 1);
            let majority = *counts.iter().max().unwrap_or(&0) as f64 / val.len() as f64;
            Ok((nll / val.len() as f64, correct as f64 / val.len() as f64, majority))
        }
        _ => Err(HarnessError::Invalid("model and data kinds differ".into())),
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Whether to keep training after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

fn step(
    store: &mut ParamStore,
    opt: &AdamW,
    state: &mut AdamState,
    f: impl FnOnce(&mut Tape, &Bound) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let loss = f(&mut tape, &p)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item()?;
    let grads: Vec<Option<&Tensor>> = p.vars().iter().map(|&v| tape.grad(v)).collect();
    opt.step(store, &grads, state)?;
    Ok(value)
}

/// Train with minibatch AdamW; `on_epoch` sees each record and may stop early.
pub fn train(config: &ExperimentConfig, mut on_epoch: impl FnMut(&EpochRecord) -> Flow) -> Result<Trained> {
    config.validate()?;
    let mut seeds = Seeds::new(config.seed);
    let data = prepare_data(config, seeds.data)?;
    let mut store = ParamStore::new();
    let model = Model::build(&config.model, &mut store, &mut seeds.init)?;
    let mut state = AdamState::new(&store);
    let n = data.train_len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut timings = Vec::with_capacity(2 * config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        seeds.order.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let loss = step(&mut store, &config.optimizer, &mut state, |t, p| batch_loss(&model, &data, t, p, chunk))?;
            total += loss * chunk.len() as f64;
        }
        timings.push(Timing { epoch, phase: "train", seconds: start.elapsed().as_secs_f64() });
        let start = Instant::now();
        let (val_loss, val_metric, baseline) = evaluate(&model, &store, &data, config.batch_size)?;
        timings.push(Timing { epoch, phase: "eval", seconds: start.elapsed().as_secs_f64() });
        let record = EpochRecord { epoch, train_loss: total / n as f64, val_loss, val_metric, baseline };
        let flow = on_epoch(&record);
        records.push(record);
        if flow == Flow::Stop {
            break;
        }
    }
    Ok(Trained { model, store, records, timings })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::error::csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(crate::error::csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Write the run directory for a finished training run.
pub fn write_run(dir: &Path, config: &ExperimentConfig, trained: &Trained) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("config.json");
    let json =
        serde_json::to_string_pretty(config).map_err(|source| HarnessError::Json { path: path.clone(), source })?;
    let mut f = File::create(&path).map_err(io_err(&path))?;
    writeln!(f, "{json}").map_err(io_err(&path))?;
    write_csv(&dir.join("run.csv"), &trained.records)?;
    write_csv(&dir.join("timing.csv"), &trained.timings)?;
    let entries: Vec<(String, Tensor)> = trained.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    ntf::save(dir.join("checkpoint.ntf"), &entries)?;
    Ok(())
}

/// Rebuild the model next to `ckpt` (from its `config.json`) and load the weights.
pub fn restore(ckpt: &Path) -> Result<(ExperimentConfig, Model, ParamStore)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let config = ExperimentConfig::load(&dir.join("config.json"))?;
    let mut store = ParamStore::new();
    let model = Model::build(&config.model, &mut store, &mut SplitMix64::new(0))?;
    store.load_from(&ntf::load(ckpt)?)?;
    Ok((config, model, store))
}

/// Validation metrics of a checkpoint on the data in `data_dir`.
pub fn eval_checkpoint(ckpt: &Path, data_dir: &Path) -> Result<Vec<(&'static str, f64)>> {
    let (mut config, model, store) = restore(ckpt)?;
    config.data.dir = Some(data_dir.to_path_buf());
    let data = prepare_data(&config, 0)?;
    let (loss, metric, baseline) = evaluate(&model, &store, &data, config.batch_size)?;
    Ok(match model {
        Model::Tsm2(_) => vec![("mse", loss), ("mse_ratio", metric), ("persistence_mse", baseline)],
        Model::Vim2(_) => vec![("cross_entropy", loss), ("accuracy", metric), ("majority_accuracy", baseline)],
    })
}

/// Validation accuracy of softmax regression on raw pixels.
pub fn linear_probe(train: &ImageSet, val: &ImageSet, epochs: usize, seed: u64) -> Result<f64> {
    let features = train.images.len() / train.len().max(1);
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let layer = Linear::new(&mut store, &mut rng, "probe", features, train.classes, true)?;
    let opt = AdamW::default();
    let mut state = AdamState::new(&store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(32) {
            let (images, labels) = train.batch(chunk)?;
            let x = images.reshape([chunk.len(), features])?;
            step(&mut store, &opt, &mut state, |t, p| {
                let xv = t.constant(x);
                let logits = layer.forward(t, p, xv)?;
                Ok(t.cross_entropy(logits, &labels)?)
            })?;
        }
    }
    let x = val.images.clone().reshape([val.len(), features])?;
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let xv = t.constant(x);
    let logits = layer.forward(&mut t, &p, xv)?;
    let k = val.classes;
    let correct = val
        .labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(&t.value(logits).data()[r * k..(r + 1) * k]) == l)
        .count();
    Ok(correct as f64 / val.len() as f64)
}

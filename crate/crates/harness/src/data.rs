//! Synthetic datasets and their on-disk formats.
//!
//! Series live in `ts.csv` (`time,var_0,...`), with optional `static.csv`
//! (`var,feat_0,...`) and `future.csv` (`time,var,feat_0,...`). Image sets
//! are NTF files holding `images [n, 3, 32, 32]` and `labels [n]`.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ssmixer_core::tsm2::SeriesBatch;
use ssmixer_core::{ntf, SplitMix64, Tensor};

use crate::error::{csv_err, io_err, HarnessError, Result};

/// Generator settings for the lag-coupled multivariate series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsSpec {
    pub variates: usize,
    pub len: usize,
    /// `x_m(t) += coupling · x_{m-1}(t - lag)`.
    pub coupling: f64,
    pub lag: usize,
    pub noise: f64,
}

impl Default for TsSpec {
    fn default() -> Self {
        TsSpec { variates: 7, len: 1600, coupling: 0.5, lag: 5, noise: 0.05 }
    }
}

/// Time-major values `[len, variates]` plus optional per-variate static
/// features `[variates, C_S]` and future covariates `[len, variates, C_Z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub values: Tensor,
    pub statics: Option<Tensor>,
    pub future: Option<Tensor>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variates(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, t: usize, m: usize) -> f64 {
        self.values.data()[t * self.variates() + m]
    }
}

/// Two integer-period sinusoids per variate, chained lag coupling, then
/// Gaussian noise. The phase is taken modulo the period so noise-free,
/// uncoupled variates repeat exactly.
pub fn gen_synthetic_ts(spec: &TsSpec, seed: u64) -> Result<Series> {
    if spec.variates < 2 {
        return Err(HarnessError::Invalid(format!("need at least 2 variates, got {}", spec.variates)));
    }
    let (m, len) = (spec.variates, spec.len);
    let mut rng = SplitMix64::new(seed);
    let mut comps = Vec::with_capacity(m);
    for _ in 0..m {
        let mut v = Vec::with_capacity(2);
        for _ in 0..2 {
            let period = 8 + rng.below(41);
            let amp = rng.uniform(0.5, 1.5);
            let offset = rng.below(period);
            v.push((period, amp, offset));
        }
        comps.push(v);
    }
    let mut x = vec![0.0; len * m];
    for t in 0..len {
        for (j, cs) in comps.iter().enumerate() {
            x[t * m + j] = cs.iter().map(|&(p, amp, off)| amp * (TAU * ((t + off) % p) as f64 / p as f64).sin()).sum();
        }
    }
    for j in 1..m {
        for t in spec.lag..len {
            x[t * m + j] += spec.coupling * x[(t - spec.lag) * m + j - 1];
        }
    }
    for v in &mut x {
        *v += spec.noise * rng.normal();
    }
    // static: dominant period scaled to [0, 1] and total amplitude
    let statics = Tensor::from_fn([m, 2], |i| {
        let cs = &comps[i / 2];
        if i % 2 == 0 {
            cs[0].0 as f64 / 48.0
        } else {
            cs.iter().map(|c| c.1).sum()
        }
    });
    // future: a shared daily-style clock
    let future = Tensor::from_fn([len, m, 2], |i| {
        let t = i / (2 * m);
        let phase = TAU * (t % 24) as f64 / 24.0;
        if i % 2 == 0 {
            phase.sin()
        } else {
            phase.cos()
        }
    });
    Ok(Series { values: Tensor::new([len, m], x)?, statics: Some(statics), future: Some(future) })
}

/// Write `ts.csv`, `static.csv` and `future.csv` into `dir`.
pub fn write_series(dir: &Path, series: &Series) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (len, m) = (series.len(), series.variates());
    let path = dir.join("ts.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["time".to_string()];
    header.extend((0..m).map(|j| format!("var_{j}")));
    w.write_record(&header).map_err(csv_err(&path))?;
    for t in 0..len {
        let mut row = vec![t.to_string()];
        row.extend((0..m).map(|j| series.at(t, j).to_string()));
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    if let Some(s) = &series.statics {
        let path = dir.join("static.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        let c = s.shape()[1];
        let mut header = vec!["var".to_string()];
        header.extend((0..c).map(|k| format!("feat_{k}")));
        w.write_record(&header).map_err(csv_err(&path))?;
        for j in 0..m {
            let mut row = vec![j.to_string()];
            row.extend(s.data()[j * c..(j + 1) * c].iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }

    if let Some(f) = &series.future {
        let path = dir.join("future.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        let c = f.shape()[2];
        let mut header = vec!["time".to_string(), "var".to_string()];
        header.extend((0..c).map(|k| format!("feat_{k}")));
        w.write_record(&header).map_err(csv_err(&path))?;
        for t in 0..len {
            for j in 0..m {
                let base = (t * m + j) * c;
                let mut row = vec![t.to_string(), j.to_string()];
                row.extend(f.data()[base..base + c].iter().map(f64::to_string));
                w.write_record(&row).map_err(csv_err(&path))?;
            }
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

fn data_err(path: &Path, row: u64, msg: impl Into<String>) -> HarnessError {
    HarnessError::Data { path: path.to_path_buf(), row, msg: msg.into() }
}

fn parse_f64(path: &Path, row: u64, field: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| data_err(path, row, format!("not a number: {field:?}")))
}

fn check_header(path: &Path, header: &csv::StringRecord, fixed: &[&str], prefix: &str) -> Result<usize> {
    let n = header.len();
    if n <= fixed.len() {
        return Err(data_err(path, 0, format!("expected {} columns then {prefix}0..", fixed.join(","))));
    }
    for (i, name) in header.iter().enumerate() {
        let want = match fixed.get(i) {
            Some(f) => f.to_string(),
            None => format!("{prefix}{}", i - fixed.len()),
        };
        if name.trim() != want {
            return Err(data_err(path, 0, format!("column {i} is {name:?}, expected {want:?}")));
        }
    }
    Ok(n - fixed.len())
}

/// Stream `time,var_0,...` rows, rejecting non-increasing time.
pub fn read_ts_csv<R: Read>(reader: R, path: &Path) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    let m = check_header(path, &header, &["time"], "var_")?;
    let mut values = Vec::new();
    let mut last: Option<f64> = None;
    let mut record = csv::StringRecord::new();
    let mut row = 0u64;
    while rdr.read_record(&mut record).map_err(csv_err(path))? {
        row += 1;
        if record.len() != m + 1 {
            return Err(data_err(path, row, format!("{} fields, expected {}", record.len(), m + 1)));
        }
        let t = parse_f64(path, row, &record[0])?;
        if let Some(prev) = last {
            if t <= prev {
                return Err(data_err(path, row, format!("time {t} does not increase past {prev}")));
            }
        }
        last = Some(t);
        for f in record.iter().skip(1) {
            values.push(parse_f64(path, row, f)?);
        }
    }
    Ok(Tensor::new([row as usize, m], values)?)
}

/// `var,feat_0,...` with each variate `0..variates` exactly once, in order.
pub fn read_static_csv<R: Read>(reader: R, path: &Path, variates: usize) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    let c = check_header(path, &header, &["var"], "feat_")?;
    let mut values = Vec::with_capacity(variates * c);
    let mut record = csv::StringRecord::new();
    let mut row = 0u64;
    while rdr.read_record(&mut record).map_err(csv_err(path))? {
        if record.len() != c + 1 {
            return Err(data_err(path, row + 1, format!("{} fields, expected {}", record.len(), c + 1)));
        }
        if record[0].trim() != row.to_string() {
            return Err(data_err(path, row + 1, format!("expected var {row}, got {:?}", &record[0])));
        }
        row += 1;
        for f in record.iter().skip(1) {
            values.push(parse_f64(path, row, f)?);
        }
    }
    if row as usize != variates {
        return Err(data_err(path, row, format!("{row} variates, expected {variates}")));
    }
    Ok(Tensor::new([variates, c], values)?)
}

/// `time,var,feat_0,...`: one row per variate per time step, time increasing
/// between groups and variates in order within a group.
pub fn read_future_csv<R: Read>(reader: R, path: &Path, variates: usize) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    let c = check_header(path, &header, &["time", "var"], "feat_")?;
    let mut values = Vec::new();
    let mut last: Option<f64> = None;
    let mut record = csv::StringRecord::new();
    let mut row = 0u64;
    while rdr.read_record(&mut record).map_err(csv_err(path))? {
        let var = (row as usize) % variates;
        row += 1;
        if record.len() != c + 2 {
            return Err(data_err(path, row, format!("{} fields, expected {}", record.len(), c + 2)));
        }
        let t = parse_f64(path, row, &record[0])?;
        match last {
            Some(prev) if var == 0 && t <= prev => {
                return Err(data_err(path, row, format!("time {t} does not increase past {prev}")))
            }
            Some(prev) if var != 0 && t != prev => {
                return Err(data_err(path, row, format!("time {t} inside the group for {prev}")))
            }
            _ => {}
        }
        last = Some(t);
        if record[1].trim() != var.to_string() {
            return Err(data_err(path, row, format!("expected var {var}, got {:?}", &record[1])));
        }
        for f in record.iter().skip(2) {
            values.push(parse_f64(path, row, f)?);
        }
    }
    if row as usize % variates != 0 {
        return Err(data_err(path, row, "incomplete final time step"));
    }
    Ok(Tensor::new([row as usize / variates, variates, c], values)?)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(io_err(path))
}

/// Load a series directory; `static.csv` and `future.csv` are optional.
pub fn load_series(dir: &Path) -> Result<Series> {
    let path = dir.join("ts.csv");
    let values = read_ts_csv(open(&path)?, &path)?;
    let m = values.shape()[1];
    let sp = dir.join("static.csv");
    let statics = if sp.exists() { Some(read_static_csv(open(&sp)?, &sp, m)?) } else { None };
    let fp = dir.join("future.csv");
    let future = if fp.exists() {
        let f = read_future_csv(open(&fp)?, &fp, m)?;
        if f.shape()[0] != values.shape()[0] {
            return Err(HarnessError::Invalid(format!(
                "{}: {} time steps, ts.csv has {}",
                fp.display(),
                f.shape()[0],
                values.shape()[0]
            )));
        }
        Some(f)
    } else {
        None
    };
    Ok(Series { values, statics, future })
}

/// Windowing of a series into `(history, horizon)` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Windowing {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Trailing fraction of the series reserved for validation.
    pub val_fraction: f64,
    pub use_static: bool,
    pub use_future: bool,
}

impl Default for Windowing {
    fn default() -> Self {
        Windowing { history: 96, horizon: 24, stride: 4, val_fraction: 0.25, use_static: false, use_future: false }
    }
}

/// One window per start index, inputs `[M, T]` and targets `[M, H]`.
#[derive(Clone, Debug)]
pub struct Windows {
    pub starts: Vec<usize>,
}

impl Windowing {
    /// Chronological split; validation windows start after every training target ends.
    pub fn split(&self, len: usize) -> Result<(Windows, Windows)> {
        let span = self.history + self.horizon;
        if self.stride == 0 || span > len {
            return Err(HarnessError::Invalid(format!("series of {len} steps cannot hold a window of {span}")));
        }
        let cut = ((1.0 - self.val_fraction) * len as f64) as usize;
        let train: Vec<usize> = (0..).map(|i| i * self.stride).take_while(|&s| s + span <= cut).collect();
        let val: Vec<usize> = (0..).map(|i| cut + i * self.stride).take_while(|&s| s + span <= len).collect();
        if train.is_empty() || val.is_empty() {
            return Err(HarnessError::Invalid(format!(
                "split of {len} steps at {cut} leaves {} training and {} validation windows",
                train.len(),
                val.len()
            )));
        }
        Ok((Windows { starts: train }, Windows { starts: val }))
    }

    /// Stack the windows starting at `starts` into one batch.
    pub fn batch(&self, series: &Series, starts: &[usize]) -> Result<SeriesBatch> {
        let (m, t, h) = (series.variates(), self.history, self.horizon);
        let b = starts.len();
        let mut x = Vec::with_capacity(b * m * t);
        let mut y = Vec::with_capacity(b * m * h);
        for &s in starts {
            for j in 0..m {
                x.extend((s..s + t).map(|k| series.at(k, j)));
            }
            for j in 0..m {
                y.extend((s + t..s + t + h).map(|k| series.at(k, j)));
            }
        }
        let statics = match (&series.statics, self.use_static) {
            (Some(st), true) => {
                let c = st.shape()[1];
                Some(Tensor::from_fn([b, m, c], |i| st.data()[i % (m * c)]))
            }
            (None, true) => return Err(HarnessError::Invalid("static features requested but not present".into())),
            _ => None,
        };
        let future = match (&series.future, self.use_future) {
            (Some(f), true) => {
                let c = f.shape()[2];
                let mut z = Vec::with_capacity(b * m * h * c);
                for &s in starts {
                    for j in 0..m {
                        for k in s + t..s + t + h {
                            let base = (k * m + j) * c;
                            z.extend_from_slice(&f.data()[base..base + c]);
                        }
                    }
                }
                Some(Tensor::new([b, m, h, c], z)?)
            }
            (None, true) => return Err(HarnessError::Invalid("future covariates requested but not present".into())),
            _ => None,
        };
        Ok(SeriesBatch {
            x: Tensor::new([b, m, t], x)?,
            s: statics,
            z: future,
            target: Some(Tensor::new([b, m, h], y)?),
        })
    }
}

/// Labeled images `[n, 3, side, side]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

pub const IMAGE_SIDE: usize = 32;
pub const SHAPES: [&str; 6] = ["bar", "cross", "blob", "column", "ring", "diagonal"];

fn draw(kind: usize, y: f64, x: f64, cy: f64, cx: f64, size: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    let half = 1.6;
    match kind {
        0 => dy.abs() <= half && dx.abs() <= size,
        1 => (dy.abs() <= half && dx.abs() <= size) || (dx.abs() <= half && dy.abs() <= size),
        2 => dy * dy + dx * dx <= (0.55 * size).powi(2),
        3 => dx.abs() <= half && dy.abs() <= size,
        4 => {
            let r = (dy * dy + dx * dx).sqrt();
            (r - 0.7 * size).abs() <= 1.2
        }
        _ => (dy - dx).abs() <= 1.5 * half && dx.abs() <= 0.8 * size,
    }
}

/// Class-balanced parametric shapes with random color, size and up to ±6
/// pixels of positional jitter on a faintly tinted background.
///
/// No per-pixel noise: under per-token normalization a pure-noise patch is
/// scaled up to unit variance and every image gets a unique fingerprint.
pub fn gen_toy_images(classes: usize, n: usize, seed: u64) -> Result<ImageSet> {
    if classes == 0 || classes > SHAPES.len() {
        return Err(HarnessError::Invalid(format!("classes must be in 1..={}, got {classes}", SHAPES.len())));
    }
    let side = IMAGE_SIDE;
    let mut rng = SplitMix64::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let per = 3 * side * side;
    let mut data = vec![0.0; n * per];
    for (i, &k) in labels.iter().enumerate() {
        let img = &mut data[i * per..(i + 1) * per];
        let color: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.4, 1.0));
        let tint: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.0, 0.15));
        let cy = side as f64 / 2.0 + rng.uniform(-6.0, 6.0);
        let cx = side as f64 / 2.0 + rng.uniform(-6.0, 6.0);
        let size = rng.uniform(6.0, 10.0);
        for y in 0..side {
            for x in 0..side {
                let on = draw(k, y as f64, x as f64, cy, cx, size);
                for c in 0..3 {
                    img[(c * side + y) * side + x] = if on { color[c] } else { tint[c] };
                }
            }
        }
    }
    Ok(ImageSet { images: Tensor::new([n, 3, side, side], data)?, labels, classes })
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images at `idx` stacked into one batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.len() / self.len().max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(shape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let labels = Tensor::from_fn([self.len()], |i| self.labels[i] as f64);
        let classes = Tensor::scalar(self.classes as f64);
        Ok(ntf::save(
            path,
            &[("images".into(), self.images.clone()), ("labels".into(), labels), ("classes".into(), classes)],
        )?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = ntf::load(path)?;
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| HarnessError::Invalid(format!("{}: missing tensor {name}", path.display())))
        };
        let images = get("images")?;
        let classes = get("classes")?.item()? as usize;
        let labels: Vec<usize> = get("labels")?.data().iter().map(|&v| v as usize).collect();
        if images.rank() != 4 || images.shape()[0] != labels.len() || labels.iter().any(|&l| l >= classes) {
            return Err(HarnessError::Invalid(format!("{}: inconsistent image set", path.display())));
        }
        Ok(ImageSet { images, labels, classes })
    }
}

/// Toy image train/validation pair as written by `gen-data --kind img`.
pub fn write_images(dir: &Path, train: &ImageSet, val: &ImageSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    train.save(&dir.join("train.ntf"))?;
    val.save(&dir.join("val.ntf"))
}

pub fn load_images(dir: &Path) -> Result<(ImageSet, ImageSet)> {
    Ok((ImageSet::load(&dir.join("train.ntf"))?, ImageSet::load(&dir.join("val.ntf"))?))
}

//! Multivariate series ingestion and preparation: CSV loading, chronological
//! splitting, train-fitted standardization, sliding-window samples, and a
//! seeded synthetic generator for desk-scale runs.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Time-ordered table of `n_features` real channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    timestamps: Vec<i64>,
    values: Vec<f64>,
    n_features: usize,
}

impl SeriesTable {
    pub fn new(timestamps: Vec<i64>, values: Vec<f64>, n_features: usize) -> Result<Self> {
        if n_features == 0 || values.len() != timestamps.len() * n_features {
            return Err(Error::Validation(format!(
                "table of {} rows with {} features needs {} values, got {}",
                timestamps.len(),
                n_features,
                timestamps.len() * n_features,
                values.len()
            )));
        }
        let table = SeriesTable {
            timestamps,
            values,
            n_features,
        };
        table.check_strictly_increasing()?;
        Ok(table)
    }

    fn check_strictly_increasing(&self) -> Result<()> {
        let dups: Vec<i64> = self
            .timestamps
            .windows(2)
            .filter(|w| w[1] <= w[0])
            .map(|w| w[1])
            .collect();
        if !dups.is_empty() {
            return Err(Error::Validation(format!(
                "timestamps are not strictly increasing; offenders: {dups:?}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Keep `n` rows chosen uniformly without replacement, preserving time
    /// order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<SeriesTable> {
        if n > self.len() {
            return Err(Error::InsufficientData(format!(
                "cannot sample {n} rows from {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        let mut timestamps = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * self.n_features);
        for i in idx {
            timestamps.push(self.timestamps[i]);
            values.extend_from_slice(self.row(i));
        }
        SeriesTable::new(timestamps, values, self.n_features)
    }
}

// ---------------------------------------------------------------------------
// CSV input and output
// ---------------------------------------------------------------------------

/// Expected CSV layout: a timestamp column followed by feature columns.
/// When `features` is `None` every column after the timestamp is taken as a
/// feature, in header order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub timestamp: String,
    pub features: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            timestamp: "timestamp".to_string(),
            features: None,
        }
    }
}

impl CsvSchema {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug)]
pub struct LoadReport {
    pub table: SeriesTable,
    /// Rows discarded for unparseable fields or incomplete leading rows.
    pub dropped_rows: usize,
    /// Cells recovered by forward fill.
    pub forward_filled: usize,
}

fn parse_timestamp(text: &str) -> Option<i64> {
    let t = text.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(t) {
        return Some(dt.timestamp());
    }
    if let Ok(dt) = NaiveDateTime::parse_from_str(t, "%Y-%m-%d %H:%M:%S") {
        return Some(dt.and_utc().timestamp());
    }
    if let Ok(d) = NaiveDate::parse_from_str(t, "%Y-%m-%d") {
        return Some(d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp());
    }
    t.parse::<i64>().ok()
}

/// Parse and canonicalize a CSV series: timestamp-sorted, forward-filled,
/// strictly increasing. Rows with unparseable fields are dropped and
/// counted.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let header_names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    if header_names.first().map(String::as_str) != Some(schema.timestamp.as_str()) {
        return Err(Error::format(
            path,
            format!(
                "first column must be `{}`, found `{}`",
                schema.timestamp,
                header_names.first().cloned().unwrap_or_default()
            ),
        ));
    }
    let feature_cols: Vec<usize> = match &schema.features {
        None => (1..header_names.len()).collect(),
        Some(wanted) => wanted
            .iter()
            .map(|name| {
                header_names
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::format(path, format!("missing column `{name}`")))
            })
            .collect::<Result<_>>()?,
    };
    if feature_cols.is_empty() {
        return Err(Error::format(path, "no feature columns".to_string()));
    }
    let n_features = feature_cols.len();

    let mut rows: Vec<(i64, Vec<Option<f64>>)> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let Some(ts) = record.get(0).and_then(parse_timestamp) else {
            dropped += 1;
            continue;
        };
        let mut row = Vec::with_capacity(n_features);
        let mut bad = false;
        for &col in &feature_cols {
            match record.get(col).map(str::trim) {
                None => {
                    bad = true;
                    break;
                }
                Some("") => row.push(None),
                Some(cell) => match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(Some(v)),
                    _ => {
                        bad = true;
                        break;
                    }
                },
            }
        }
        if bad {
            dropped += 1;
        } else {
            rows.push((ts, row));
        }
    }

    rows.sort_by_key(|(ts, _)| *ts);
    let dup_list: Vec<i64> = rows
        .windows(2)
        .filter(|w| w[0].0 == w[1].0)
        .map(|w| w[0].0)
        .collect();
    if !dup_list.is_empty() {
        return Err(Error::Validation(format!(
            "duplicate timestamps in {}: {dup_list:?}",
            path.display()
        )));
    }

    // Forward fill per channel, then drop rows a fill could not complete
    // (only rows before a channel's first observation). Present cells seed
    // the fill memory even when their own row is dropped.
    let mut forward_filled = 0usize;
    let mut last: Vec<Option<f64>> = vec![None; n_features];
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (ts, row) in rows {
        let mut complete = true;
        let mut filled = vec![0.0; n_features];
        for (c, cell) in row.into_iter().enumerate() {
            if cell.is_some() {
                last[c] = cell;
            }
            match cell.or(last[c]) {
                Some(v) => {
                    if cell.is_none() {
                        forward_filled += 1;
                    }
                    filled[c] = v;
                }
                None => complete = false,
            }
        }
        if complete {
            timestamps.push(ts);
            values.extend_from_slice(&filled);
        } else {
            dropped += 1;
        }
    }

    if timestamps.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} has {} usable rows, need at least 2",
            path.display(),
            timestamps.len()
        )));
    }
    Ok(LoadReport {
        table: SeriesTable::new(timestamps, values, n_features)?,
        dropped_rows: dropped,
        forward_filled,
    })
}

/// Write a table in the same layout `load_csv` reads (epoch-second
/// timestamps).
pub fn write_csv(table: &SeriesTable, feature_names: &[String], path: &Path) -> Result<()> {
    if feature_names.len() != table.n_features() {
        return Err(Error::Validation(format!(
            "{} feature names for {} channels",
            feature_names.len(),
            table.n_features()
        )));
    }
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::from("timestamp");
    for name in feature_names {
        line.push(',');
        line.push_str(name);
    }
    line.push('\n');
    for i in 0..table.len() {
        line.push_str(&table.timestamps()[i].to_string());
        for v in table.row(i) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push('\n');
    }
    out.write_all(line.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Bin an incident log (`timestamp,category` columns) into daily counts per
/// category, zero-filling days with no incidents. Returns the table and the
/// sorted category names that became its channels.
pub fn aggregate_incidents(path: &Path) -> Result<(SeriesTable, Vec<String>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let ts_col = headers
        .iter()
        .position(|h| h.trim() == "timestamp")
        .ok_or_else(|| Error::format(path, "missing `timestamp` column"))?;
    let cat_col = headers
        .iter()
        .position(|h| h.trim() == "category")
        .ok_or_else(|| Error::format(path, "missing `category` column"))?;

    const DAY: i64 = 86_400;
    let mut counts: BTreeMap<(i64, String), f64> = BTreeMap::new();
    let mut categories: Vec<String> = Vec::new();
    let mut min_day = i64::MAX;
    let mut max_day = i64::MIN;
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let Some(ts) = record.get(ts_col).and_then(parse_timestamp) else {
            continue;
        };
        let day = ts.div_euclid(DAY) * DAY;
        let cat = record.get(cat_col).unwrap_or("").trim().to_string();
        if cat.is_empty() {
            continue;
        }
        if !categories.contains(&cat) {
            categories.push(cat.clone());
        }
        *counts.entry((day, cat)).or_insert(0.0) += 1.0;
        min_day = min_day.min(day);
        max_day = max_day.max(day);
    }
    if categories.is_empty() || min_day > max_day {
        return Err(Error::InsufficientData(format!(
            "{} has no usable incident rows",
            path.display()
        )));
    }
    categories.sort();
    let n_days = ((max_day - min_day) / DAY + 1) as usize;
    let mut timestamps = Vec::with_capacity(n_days);
    let mut values = vec![0.0; n_days * categories.len()];
    for d in 0..n_days {
        let day = min_day + d as i64 * DAY;
        timestamps.push(day);
        for (c, cat) in categories.iter().enumerate() {
            if let Some(v) = counts.get(&(day, cat.clone())) {
                values[d * categories.len() + c] = *v;
            }
        }
    }
    Ok((
        SeriesTable::new(timestamps, values, categories.len())?,
        categories,
    ))
}

// ---------------------------------------------------------------------------
// Chronological split
// ---------------------------------------------------------------------------

/// Contiguous train/validation/test partition in time order. Boundary rows
/// go by floor for train and validation; the remainder is test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 7,
            val: 1,
            test: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SeriesTable,
    pub val: SeriesTable,
    pub test: SeriesTable,
}

pub fn chronological_split(table: &SeriesTable, spec: SplitSpec) -> Result<Splits> {
    let n = table.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!(
            "{n} rows is too short to split, need at least 10"
        )));
    }
    let total = (spec.train + spec.val + spec.test) as usize;
    if total == 0 || spec.train == 0 || spec.test == 0 {
        return Err(Error::Validation(format!("bad split ratios {spec:?}")));
    }
    let n_train = n * spec.train as usize / total;
    let n_val = n * spec.val as usize / total;
    let slice = |from: usize, to: usize| {
        SeriesTable::new(
            table.timestamps()[from..to].to_vec(),
            table.values[from * table.n_features..to * table.n_features].to_vec(),
            table.n_features,
        )
    };
    Ok(Splits {
        train: slice(0, n_train)?,
        val: slice(n_train, n_train + n_val)?,
        test: slice(n_train + n_val, n)?,
    })
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Per-channel `(x - mean) / std` with population statistics fitted on the
/// training split only. A constant channel keeps `std = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_scaler(train: &SeriesTable) -> Result<Scaler> {
    if train.is_empty() {
        return Err(Error::EmptyInput("fit_scaler"));
    }
    let f = train.n_features();
    let n = train.len() as f64;
    let mut mean = vec![0.0; f];
    for i in 0..train.len() {
        for (c, v) in train.row(i).iter().enumerate() {
            mean[c] += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; f];
    for i in 0..train.len() {
        for (c, v) in train.row(i).iter().enumerate() {
            var[c] += (v - mean[c]).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|&s| {
            let sd = (s / n).sqrt();
            if sd == 0.0 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(Scaler { mean, std })
}

impl Scaler {
    pub fn transform(&self, table: &SeriesTable) -> Result<SeriesTable> {
        self.map_table(table, |v, m, s| (v - m) / s)
    }

    pub fn inverse_transform(&self, table: &SeriesTable) -> Result<SeriesTable> {
        self.map_table(table, |v, m, s| v * s + m)
    }

    fn map_table(
        &self,
        table: &SeriesTable,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<SeriesTable> {
        if table.n_features() != self.mean.len() {
            return Err(Error::Dimension {
                op: "scaler",
                lhs: vec![table.n_features()],
                rhs: vec![self.mean.len()],
            });
        }
        let nf = table.n_features();
        let values = table
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % nf], self.std[i % nf]))
            .collect();
        SeriesTable::new(table.timestamps.clone(), values, nf)
    }
}

// ---------------------------------------------------------------------------
// Sliding windows
// ---------------------------------------------------------------------------

/// One (input window, target block) pair; `y` is the block immediately
/// following `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub x: Tensor,
    pub y: Tensor,
}

pub fn windowize(
    table: &SeriesTable,
    input_len: usize,
    pred_len: usize,
) -> Result<Vec<WindowSample>> {
    let need = input_len + pred_len;
    if input_len == 0 || pred_len == 0 {
        return Err(Error::Validation(
            "input_len and pred_len must be >= 1".into(),
        ));
    }
    if table.len() < need {
        return Err(Error::InsufficientData(format!(
            "{} rows cannot fit one window of {input_len}+{pred_len}",
            table.len()
        )));
    }
    let f = table.n_features();
    let count = table.len() - need + 1;
    let mut out = Vec::with_capacity(count);
    for start in 0..count {
        let x_flat: Vec<f64> = (start..start + input_len)
            .flat_map(|i| table.row(i).iter().copied())
            .collect();
        let y_flat: Vec<f64> = (start + input_len..start + need)
            .flat_map(|i| table.row(i).iter().copied())
            .collect();
        out.push(WindowSample {
            x: Tensor::new(input_len, f, x_flat),
            y: Tensor::new(pred_len, f, y_flat),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic series
// ---------------------------------------------------------------------------

/// Seeded generator: a per-channel AR(1) component driven by uniform
/// innovations, optional cross-channel mixing of those components, and an
/// exactly week-periodic sinusoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_rows: usize,
    pub n_features: usize,
    pub seed: u64,
    pub ar_coeff: f64,
    pub noise_amp: f64,
    pub sine_amp: f64,
    pub cross_mix: bool,
}

impl SynthSpec {
    pub fn new(n_rows: usize, n_features: usize, seed: u64) -> Self {
        SynthSpec {
            n_rows,
            n_features,
            seed,
            ar_coeff: 0.8,
            noise_amp: 0.25,
            sine_amp: 0.5,
            cross_mix: true,
        }
    }
}

pub fn synthesize(spec: &SynthSpec) -> Result<SeriesTable> {
    if spec.n_rows < 2 {
        return Err(Error::InsufficientData(format!(
            "synthetic series needs at least 2 rows, got {}",
            spec.n_rows
        )));
    }
    let f = spec.n_features;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Fixed mixing matrix: identity plus small seeded off-diagonal terms.
    let mut mix = vec![0.0; f * f];
    for c in 0..f {
        for k in 0..f {
            mix[c * f + k] = if c == k {
                1.0
            } else {
                0.25 * rng.random_range(-1.0..1.0)
            };
        }
    }
    let phases: Vec<f64> = (0..f)
        .map(|c| 2.0 * std::f64::consts::PI * c as f64 / f as f64)
        .collect();

    const DAY: i64 = 86_400;
    let t0 = 1_577_836_800; // fixed epoch origin so identical specs write identical files
    let mut ar = vec![0.0; f];
    let mut timestamps = Vec::with_capacity(spec.n_rows);
    let mut values = Vec::with_capacity(spec.n_rows * f);
    for t in 0..spec.n_rows {
        for a in ar.iter_mut() {
            *a = spec.ar_coeff * *a + spec.noise_amp * rng.random_range(-1.0..1.0);
        }
        timestamps.push(t0 + t as i64 * DAY);
        let day_of_week = (t % 7) as f64;
        for c in 0..f {
            let base = if spec.cross_mix {
                (0..f).map(|k| mix[c * f + k] * ar[k]).sum::<f64>()
            } else {
                ar[c]
            };
            let sine =
                spec.sine_amp * (2.0 * std::f64::consts::PI * day_of_week / 7.0 + phases[c]).sin();
            values.push(base + sine);
        }
    }
    SeriesTable::new(timestamps, values, f)
}

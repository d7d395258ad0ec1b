//! Experiment orchestration: serializable run specs, artifact emission, and
//! comparison/ablation tables with best/second-best flags and a Count row.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    chronological_split, fit_scaler, load_csv, synthesize, windowize, CsvSchema, Scaler,
    SeriesTable, SplitSpec, SynthSpec, WindowSample,
};
use crate::error::{Error, Result};
use crate::metrics::{repeat_and_aggregate, MetricsReport, RepeatSummary};
use crate::model::{save_checkpoint, ModelConfig, ModelParams, Variant};
use crate::train::{evaluate, train, TrainConfig, TrainOutcome};

/// Table 1 variant set: the fused model against the baselines.
pub const COMPARE_VARIANTS: [Variant; 4] =
    [Variant::Lgstime, Variant::Cnn, Variant::Rnn, Variant::Gru];

/// Table 2 variant set: the fused model against its ablations.
pub const ABLATION_VARIANTS: [Variant; 3] = [Variant::Lgstime, Variant::LstmGru, Variant::Lstm];

pub const METRIC_NAMES: [&str; 3] = ["mse", "mae", "rmse"];

/// Where a run's rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schema: Option<PathBuf>,
        /// Keep only this many rows, chosen uniformly by `sample_seed`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sample_n: Option<usize>,
        #[serde(default)]
        sample_seed: u64,
    },
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DataSource,
}

impl DatasetSpec {
    pub fn synthetic(name: impl Into<String>, spec: SynthSpec) -> Self {
        DatasetSpec {
            name: name.into(),
            source: DataSource::Synthetic(spec),
        }
    }

    pub fn load(&self) -> Result<SeriesTable> {
        match &self.source {
            DataSource::Synthetic(spec) => synthesize(spec),
            DataSource::Csv {
                path,
                schema,
                sample_n,
                sample_seed,
            } => {
                let schema = match schema {
                    Some(p) => CsvSchema::from_file(p)?,
                    None => CsvSchema::default(),
                };
                let report = load_csv(path, &schema)?;
                if report.dropped_rows > 0 {
                    eprintln!(
                        "warning: {} dropped {} unusable rows",
                        path.display(),
                        report.dropped_rows
                    );
                }
                match sample_n {
                    Some(n) => report.table.subsample(*n, *sample_seed),
                    None => Ok(report.table),
                }
            }
        }
    }
}

/// A fully serializable run description; re-launching a persisted spec
/// reproduces the run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset.name.is_empty() {
            return Err(Error::Validation("dataset name is empty".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Standardized, windowized splits ready for the trainer.
#[derive(Debug)]
pub struct PreparedData {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub scaler: Scaler,
}

pub fn prepare(
    dataset: &DatasetSpec,
    split: SplitSpec,
    model: &ModelConfig,
) -> Result<PreparedData> {
    let table = dataset.load()?;
    if table.n_features() != model.n_features {
        return Err(Error::Validation(format!(
            "dataset `{}` has {} channels but the model expects {}",
            dataset.name,
            table.n_features(),
            model.n_features
        )));
    }
    let splits = chronological_split(&table, split)?;
    let scaler = fit_scaler(&splits.train)?;
    let train_std = scaler.transform(&splits.train)?;
    let val_std = scaler.transform(&splits.val)?;
    let test_std = scaler.transform(&splits.test)?;
    let train = windowize(&train_std, model.input_len, model.pred_len)?;
    let test = windowize(&test_std, model.input_len, model.pred_len)?;
    // The validation split is informational; a split too short to window is
    // simply empty.
    let val = match windowize(&val_std, model.input_len, model.pred_len) {
        Ok(v) => v,
        Err(Error::InsufficientData(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok(PreparedData {
        train,
        val,
        test,
        scaler,
    })
}

/// Train one repeat from a fresh seeded initialization and evaluate on the
/// test windows.
pub fn run_one(
    spec: &ExperimentSpec,
    data: &PreparedData,
    seed: u64,
) -> Result<(MetricsReport, TrainOutcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = ModelParams::init(&spec.model, &mut rng)?;
    let tcfg = TrainConfig { seed, ..spec.train };
    let val = (!data.val.is_empty()).then_some(data.val.as_slice());
    let outcome = train(&spec.model, &tcfg, initial, &data.train, val)?;
    let report = evaluate(&outcome.params, &spec.model, &data.test)?;
    Ok((report, outcome))
}

#[derive(Debug, Serialize)]
struct TraceRecord {
    repeat: usize,
    epoch: usize,
    train_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_mse: Option<f64>,
}

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: RepeatSummary,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

fn metrics_csv(dataset: &str, variant: Variant, summary: &RepeatSummary) -> String {
    let mut out = String::from("dataset,variant,repeat,mse,mae,rmse\n");
    let mut push = |repeat: &str, r: &MetricsReport| {
        out.push_str(&format!(
            "{dataset},{variant},{repeat},{},{},{}\n",
            r.mse, r.mae, r.rmse
        ));
    };
    for (i, r) in summary.runs.iter().enumerate() {
        push(&i.to_string(), r);
    }
    push("mean", &summary.mean);
    push("std", &summary.std);
    out
}

/// Execute a spec: repeats, aggregation, and the four run artifacts
/// (`spec.json`, `metrics.csv`, `trace.jsonl`, `checkpoint.bin`).
pub fn cmd_run(spec: &ExperimentSpec) -> Result<RunArtifacts> {
    spec.validate()?;
    let data = prepare(&spec.dataset, spec.split, &spec.model)?;

    std::fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;

    let mut runs = Vec::with_capacity(spec.train.repeats);
    let mut trace_lines = String::new();
    let mut last_outcome: Option<TrainOutcome> = None;
    for r in 0..spec.train.repeats {
        let seed = spec.train.seed + r as u64;
        let (report, outcome) = run_one(spec, &data, seed)?;
        for (epoch, &train_mse) in outcome.epoch_losses.iter().enumerate() {
            let record = TraceRecord {
                repeat: r,
                epoch,
                train_mse,
                val_mse: outcome.val_mse.get(epoch).copied(),
            };
            trace_lines.push_str(&serde_json::to_string(&record).expect("trace serializes"));
            trace_lines.push('\n');
        }
        // best-validation-epoch record, informational only: the reported
        // model is always the final-epoch one
        if let Some(best) = outcome.best_val_epoch {
            trace_lines.push_str(&format!(
                "{{\"repeat\":{r},\"best_val_epoch\":{best},\"best_val_mse\":{}}}\n",
                outcome.val_mse[best]
            ));
        }
        runs.push(report);
        last_outcome = Some(outcome);
    }
    let summary = crate::metrics::aggregate(&runs)?;

    write_file(&spec.out_dir.join("spec.json"), spec.to_json().as_bytes())?;
    write_file(
        &spec.out_dir.join("metrics.csv"),
        metrics_csv(&spec.dataset.name, spec.model.variant, &summary).as_bytes(),
    )?;
    write_file(&spec.out_dir.join("trace.jsonl"), trace_lines.as_bytes())?;
    save_checkpoint(
        &spec.out_dir.join("checkpoint.bin"),
        &spec.model,
        &last_outcome.expect("at least one repeat").params,
    )?;

    Ok(RunArtifacts {
        dir: spec.out_dir.clone(),
        summary,
    })
}

// ---------------------------------------------------------------------------
// Results tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Best,
    Second,
    None,
}

impl Flag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Flag::Best => "best",
            Flag::Second => "second",
            Flag::None => "",
        }
    }
}

/// Mean metrics per (dataset, variant) with per-metric best/second-best
/// flags and a Count row of best flags per variant.
#[derive(Debug, Clone)]
pub struct ResultsTable {
    pub datasets: Vec<String>,
    pub variants: Vec<Variant>,
    /// `cells[d][v]` is the mean report of variant `v` on dataset `d`.
    pub cells: Vec<Vec<MetricsReport>>,
    /// `flags[d][v][m]` for metric index `m` in [`METRIC_NAMES`] order.
    pub flags: Vec<Vec<[Flag; 3]>>,
    /// `counts[v][m]`: how many datasets flagged variant `v` best on `m`.
    pub counts: Vec<[usize; 3]>,
}

fn metric_value(r: &MetricsReport, m: usize) -> f64 {
    match m {
        0 => r.mse,
        1 => r.mae,
        _ => r.rmse,
    }
}

impl ResultsTable {
    #[allow(clippy::needless_range_loop)]
    pub fn build(
        datasets: Vec<String>,
        variants: Vec<Variant>,
        cells: Vec<Vec<MetricsReport>>,
    ) -> Self {
        let mut flags = vec![vec![[Flag::None; 3]; variants.len()]; datasets.len()];
        for (d, row) in cells.iter().enumerate() {
            for m in 0..3 {
                let best = row
                    .iter()
                    .map(|r| metric_value(r, m))
                    .fold(f64::INFINITY, f64::min);
                let second = row
                    .iter()
                    .map(|r| metric_value(r, m))
                    .filter(|&v| v > best)
                    .fold(f64::INFINITY, f64::min);
                for (v, r) in row.iter().enumerate() {
                    let value = metric_value(r, m);
                    flags[d][v][m] = if value == best {
                        Flag::Best
                    } else if value == second {
                        Flag::Second
                    } else {
                        Flag::None
                    };
                }
            }
        }
        let mut counts = vec![[0usize; 3]; variants.len()];
        for d_flags in &flags {
            for (v, v_flags) in d_flags.iter().enumerate() {
                for m in 0..3 {
                    if v_flags[m] == Flag::Best {
                        counts[v][m] += 1;
                    }
                }
            }
        }
        ResultsTable {
            datasets,
            variants,
            cells,
            flags,
            counts,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,variant,mse,mae,rmse,mse_flag,mae_flag,rmse_flag\n");
        for (d, name) in self.datasets.iter().enumerate() {
            for (v, variant) in self.variants.iter().enumerate() {
                let r = &self.cells[d][v];
                let f = &self.flags[d][v];
                out.push_str(&format!(
                    "{name},{variant},{},{},{},{},{},{}\n",
                    r.mse,
                    r.mae,
                    r.rmse,
                    f[0].as_str(),
                    f[1].as_str(),
                    f[2].as_str()
                ));
            }
        }
        for (v, variant) in self.variants.iter().enumerate() {
            out.push_str(&format!(
                "Count,{variant},{},{},{},,,\n",
                self.counts[v][0], self.counts[v][1], self.counts[v][2]
            ));
        }
        out
    }

    /// Aligned text table. Best values carry `*`, second-best `_`.
    pub fn to_text(&self) -> String {
        let cell_w = 10;
        let name_w = self
            .datasets
            .iter()
            .map(|d| d.len())
            .chain(["Count".len(), "dataset".len()])
            .max()
            .unwrap_or(7)
            + 2;
        let mut out = String::new();
        out.push_str(&format!("{:<name_w$}", "model"));
        for variant in &self.variants {
            out.push_str(&format!("{:<w$}", variant.to_string(), w = 3 * cell_w));
        }
        out.push('\n');
        out.push_str(&format!("{:<name_w$}", "dataset"));
        for _ in &self.variants {
            for m in METRIC_NAMES {
                out.push_str(&format!("{:<cell_w$}", m));
            }
        }
        out.push('\n');
        for (d, name) in self.datasets.iter().enumerate() {
            out.push_str(&format!("{:<name_w$}", name));
            for v in 0..self.variants.len() {
                let r = &self.cells[d][v];
                for m in 0..3 {
                    let mark = match self.flags[d][v][m] {
                        Flag::Best => "*",
                        Flag::Second => "_",
                        Flag::None => "",
                    };
                    out.push_str(&format!(
                        "{:<cell_w$}",
                        format!("{mark}{:.4}", metric_value(r, m))
                    ));
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<name_w$}", "Count"));
        for v in 0..self.variants.len() {
            for m in 0..3 {
                out.push_str(&format!("{:<cell_w$}", self.counts[v][m]));
            }
        }
        out.push('\n');
        out
    }
}

fn check_shared_protocol(specs: &[ExperimentSpec], expected: &[Variant]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::EmptyInput("compare"));
    }
    let first = &specs[0];
    let mut by_dataset: BTreeMap<&str, Vec<Variant>> = BTreeMap::new();
    for spec in specs {
        spec.validate()?;
        if spec.train != first.train {
            return Err(Error::Validation(
                "all variants must share one train config".into(),
            ));
        }
        let mut m = spec.model;
        m.variant = first.model.variant;
        if m != first.model {
            return Err(Error::Validation(
                "all variants must share one model geometry".into(),
            ));
        }
        by_dataset
            .entry(spec.dataset.name.as_str())
            .or_default()
            .push(spec.model.variant);
    }
    for (dataset, mut variants) in by_dataset {
        let mut want: Vec<Variant> = expected.to_vec();
        variants.sort_by_key(|v| v.as_str().to_string());
        want.sort_by_key(|v| v.as_str().to_string());
        if variants != want {
            return Err(Error::Validation(format!(
                "dataset `{dataset}` must cover exactly the variants {:?}",
                expected.iter().map(|v| v.as_str()).collect::<Vec<_>>()
            )));
        }
    }
    Ok(())
}

fn run_table(
    specs: &[ExperimentSpec],
    variants: &[Variant],
    out_dir: &Path,
    table_stem: &str,
) -> Result<ResultsTable> {
    check_shared_protocol(specs, variants)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut dataset_order: Vec<String> = Vec::new();
    for spec in specs {
        if !dataset_order.contains(&spec.dataset.name) {
            dataset_order.push(spec.dataset.name.clone());
        }
    }

    let mut raw_csv = String::from("dataset,variant,repeat,mse,mae,rmse\n");
    let mut cells: Vec<Vec<MetricsReport>> = Vec::with_capacity(dataset_order.len());
    for dataset in &dataset_order {
        let mut row = Vec::with_capacity(variants.len());
        for variant in variants {
            let spec = specs
                .iter()
                .find(|s| &s.dataset.name == dataset && s.model.variant == *variant)
                .expect("checked coverage");
            let data = prepare(&spec.dataset, spec.split, &spec.model)?;
            let summary = repeat_and_aggregate(spec.train.repeats, spec.train.seed, |seed| {
                run_one(spec, &data, seed).map(|(report, _)| report)
            })?;
            for (i, r) in summary.runs.iter().enumerate() {
                raw_csv.push_str(&format!(
                    "{dataset},{variant},{i},{},{},{}\n",
                    r.mse, r.mae, r.rmse
                ));
            }
            row.push(summary.mean);
        }
        cells.push(row);
    }
    let table = ResultsTable::build(dataset_order, variants.to_vec(), cells);
    write_file(
        &out_dir.join(format!("{table_stem}_runs.csv")),
        raw_csv.as_bytes(),
    )?;
    write_file(
        &out_dir.join(format!("{table_stem}.csv")),
        table.to_csv().as_bytes(),
    )?;
    write_file(
        &out_dir.join(format!("{table_stem}.txt")),
        table.to_text().as_bytes(),
    )?;
    Ok(table)
}

/// Baseline comparison over the shared protocol: one spec per
/// (dataset, variant) covering exactly the fused model, CNN, RNN and GRU.
pub fn cmd_compare(specs: &[ExperimentSpec], out_dir: &Path) -> Result<ResultsTable> {
    run_table(specs, &COMPARE_VARIANTS, out_dir, "compare")
}

/// Ablation table: the fused model, the LSTM+GRU pair, and LSTM alone.
pub fn cmd_ablation(specs: &[ExperimentSpec], out_dir: &Path) -> Result<ResultsTable> {
    run_table(specs, &ABLATION_VARIANTS, out_dir, "ablation")
}

/// Run the registered verification properties; `Err(VerifyFailed)` when any
/// property is out of tolerance.
pub fn cmd_verify() -> (Vec<crate::check::PropertyReport>, Result<()>) {
    let reports = crate::check::run_properties();
    let failed = reports.iter().filter(|r| !r.pass).count();
    let outcome = if failed == 0 {
        Ok(())
    } else {
        Err(Error::VerifyFailed {
            failed,
            total: reports.len(),
        })
    };
    (reports, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::AdamConfig;

    fn mk_report(mse: f64) -> MetricsReport {
        MetricsReport {
            mse,
            mae: mse * 0.8,
            rmse: mse.sqrt(),
            n: 10,
        }
    }

    #[test]
    fn flags_mark_strict_minimum_and_runner_up() {
        let table = ResultsTable::build(
            vec!["DS1".into()],
            vec![Variant::Lgstime, Variant::Cnn],
            vec![vec![mk_report(1.0), mk_report(2.0)]],
        );
        assert_eq!(table.flags[0][0][0], Flag::Best);
        assert_eq!(table.flags[0][1][0], Flag::Second);
        assert_eq!(table.counts[0][0], 1);
        assert_eq!(table.counts[1][0], 0);
    }

    #[test]
    fn exact_ties_share_the_best_flag() {
        let table = ResultsTable::build(
            vec!["DS1".into()],
            vec![Variant::Lgstime, Variant::Cnn, Variant::Rnn],
            vec![vec![mk_report(1.0), mk_report(1.0), mk_report(3.0)]],
        );
        assert_eq!(table.flags[0][0][0], Flag::Best);
        assert_eq!(table.flags[0][1][0], Flag::Best);
        assert_eq!(table.flags[0][2][0], Flag::Second);
        assert_eq!(table.counts[0][0], 1);
        assert_eq!(table.counts[1][0], 1);
    }

    #[test]
    fn count_row_matches_brute_force_recount() {
        let table = ResultsTable::build(
            vec!["DS1".into(), "DS2".into(), "DS3".into()],
            vec![Variant::Lgstime, Variant::Cnn],
            vec![
                vec![mk_report(1.0), mk_report(2.0)],
                vec![mk_report(2.0), mk_report(1.5)],
                vec![mk_report(0.5), mk_report(0.9)],
            ],
        );
        for (v, _) in table.variants.iter().enumerate() {
            for m in 0..3 {
                let recount = table.flags.iter().filter(|d| d[v][m] == Flag::Best).count();
                assert_eq!(table.counts[v][m], recount);
            }
        }
    }

    #[test]
    fn spec_json_round_trip_is_byte_identical() {
        let spec = ExperimentSpec {
            dataset: DatasetSpec::synthetic("DS1", SynthSpec::new(100, 3, 7)),
            split: SplitSpec::default(),
            model: ModelConfig {
                n_features: 3,
                input_len: 8,
                pred_len: 1,
                hidden: 4,
                d_model: 4,
                heads: 2,
                sparse_factor: 2,
                variant: Variant::Lgstime,
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                seed: 3,
                repeats: 1,
                adam: AdamConfig::default(),
            },
            out_dir: PathBuf::from("/tmp/run"),
        };
        let json = spec.to_json();
        let parsed: ExperimentSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, spec);
        assert_eq!(parsed.to_json(), json);
    }

    #[test]
    fn prepare_rejects_channel_mismatch() {
        let dataset = DatasetSpec::synthetic("DS1", SynthSpec::new(60, 2, 7));
        let model = ModelConfig {
            n_features: 5,
            input_len: 6,
            pred_len: 1,
            hidden: 4,
            d_model: 4,
            heads: 2,
            sparse_factor: 2,
            variant: Variant::Lstm,
        };
        let err = prepare(&dataset, SplitSpec::default(), &model).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn compare_rejects_mismatched_protocol() {
        let mk = |variant: Variant, seed: u64| ExperimentSpec {
            dataset: DatasetSpec::synthetic("DS1", SynthSpec::new(60, 2, 7)),
            split: SplitSpec::default(),
            model: ModelConfig {
                n_features: 2,
                input_len: 6,
                pred_len: 1,
                hidden: 4,
                d_model: 4,
                heads: 2,
                sparse_factor: 2,
                variant,
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                seed,
                repeats: 1,
                adam: AdamConfig::default(),
            },
            out_dir: PathBuf::from("/tmp/x"),
        };
        // missing variants
        let specs = vec![mk(Variant::Lgstime, 1), mk(Variant::Cnn, 1)];
        assert!(check_shared_protocol(&specs, &COMPARE_VARIANTS).is_err());
        // mismatched train config
        let specs = vec![
            mk(Variant::Lgstime, 1),
            mk(Variant::Cnn, 2),
            mk(Variant::Rnn, 1),
            mk(Variant::Gru, 1),
        ];
        assert!(check_shared_protocol(&specs, &COMPARE_VARIANTS).is_err());
        // well-formed
        let specs = vec![
            mk(Variant::Lgstime, 1),
            mk(Variant::Cnn, 1),
            mk(Variant::Rnn, 1),
            mk(Variant::Gru, 1),
        ];
        assert!(check_shared_protocol(&specs, &COMPARE_VARIANTS).is_ok());
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lgstime::data::{aggregate_incidents, write_csv, SplitSpec, SynthSpec};
use lgstime::error::Error;
use lgstime::harness::{
    cmd_ablation, cmd_compare, cmd_run, cmd_verify, DataSource, DatasetSpec, ExperimentSpec,
    ABLATION_VARIANTS, COMPARE_VARIANTS,
};
use lgstime::model::{ModelConfig, Variant};
use lgstime::train::{AdamConfig, TrainConfig};

/// Train and evaluate the fused LSTM/GRU/sparse-attention forecaster and
/// its baselines on multivariate series.
#[derive(Parser)]
#[command(name = "lgstime", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant, evaluate on the test split, write run artifacts.
    Run {
        /// Re-launch a persisted spec.json instead of building one from flags.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Output directory (default: $LGSTIME_OUT or ./runs, plus a run name).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline comparison table over the fused model, CNN, RNN and GRU.
    Compare {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation table over the fused model, LSTM+GRU and LSTM.
    Ablation {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the verification suite: one line per property, nonzero exit on
    /// any failure.
    Verify,
    /// Bin an incident log (timestamp,category) into a daily indicator CSV.
    Aggregate {
        /// Incident CSV path.
        #[arg(long)]
        incidents: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Indicator CSV dataset(s); repeat the flag for several datasets.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Generate a synthetic series with this many rows instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Channel count for synthetic data (must match the CSV width otherwise).
    #[arg(long, default_value_t = 12)]
    n_features: usize,
    /// JSON schema file naming the timestamp and feature columns.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Randomly keep only this many rows of a CSV dataset (seeded).
    #[arg(long)]
    sample_n: Option<usize>,
    /// How many synthetic datasets a compare/ablation table spans.
    #[arg(long, default_value_t = 4)]
    n_datasets: usize,
}

#[derive(Args)]
struct ModelArgs {
    /// One of: lgstime, lstm_gru, lstm, gru, rnn, cnn.
    #[arg(long, default_value = "lgstime")]
    variant: String,
    #[arg(long, default_value_t = 96)]
    input_len: usize,
    #[arg(long, default_value_t = 1)]
    pred_len: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    sparse_factor: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl ModelArgs {
    fn to_config(&self, n_features: usize) -> Result<ModelConfig, Error> {
        let cfg = ModelConfig {
            n_features,
            input_len: self.input_len,
            pred_len: self.pred_len,
            hidden: self.hidden,
            d_model: self.d_model,
            heads: self.heads,
            sparse_factor: self.sparse_factor,
            variant: self.variant.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainArgs {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            repeats: self.repeats,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
        }
    }
}

fn out_root() -> PathBuf {
    std::env::var_os("LGSTIME_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Each dataset slot gets its own seeded synthetic series; seeds stay clear
/// of the per-repeat training seeds `seed..seed+repeats`.
fn build_datasets(data: &DataArgs, seed: u64) -> Result<Vec<DatasetSpec>, Error> {
    if !data.data.is_empty() {
        return Ok(data
            .data
            .iter()
            .map(|path| DatasetSpec {
                name: dataset_name(path),
                source: DataSource::Csv {
                    path: path.clone(),
                    schema: data.schema.clone(),
                    sample_n: data.sample_n,
                    sample_seed: seed,
                },
            })
            .collect());
    }
    let Some(n_rows) = data.synthetic else {
        return Err(Error::Validation(
            "supply --data <csv> or --synthetic <rows>".into(),
        ));
    };
    Ok((0..data.n_datasets.max(1))
        .map(|k| {
            DatasetSpec::synthetic(
                format!("DS{}", k + 1),
                SynthSpec::new(n_rows, data.n_features, seed + 1000 * (k as u64 + 1)),
            )
        })
        .collect())
}

fn real_main() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            spec,
            data,
            model,
            train,
            out,
        } => {
            let spec = match spec {
                Some(path) => ExperimentSpec::from_json_file(&path)?,
                None => {
                    if data.data.len() > 1 {
                        return Err(Error::Validation(
                            "`run` takes one dataset; use `compare`/`ablation` for several".into(),
                        ));
                    }
                    let datasets = build_datasets(&data, train.seed)?;
                    let dataset = datasets
                        .into_iter()
                        .next()
                        .ok_or_else(|| Error::Validation("no dataset".into()))?;
                    let cfg = model.to_config(data.n_features)?;
                    let out_dir = out.unwrap_or_else(|| {
                        out_root().join(format!("run-{}-{}", dataset.name, cfg.variant))
                    });
                    ExperimentSpec {
                        dataset,
                        split: SplitSpec::default(),
                        model: cfg,
                        train: train.to_config(),
                        out_dir,
                    }
                }
            };
            let artifacts = cmd_run(&spec)?;
            println!("run artifacts in {}", artifacts.dir.display());
            let s = &artifacts.summary;
            println!(
                "test metrics over {} repeats: mse {} (std {}), mae {} (std {}), rmse {} (std {})",
                s.runs.len(),
                s.mean.mse,
                s.std.mse,
                s.mean.mae,
                s.std.mae,
                s.mean.rmse,
                s.std.rmse
            );
            Ok(())
        }
        Command::Compare {
            data,
            model,
            train,
            out,
        } => {
            let out_dir = out.unwrap_or_else(|| out_root().join("compare"));
            let datasets = build_datasets(&data, train.seed)?;
            let specs = build_table_specs(
                &datasets,
                &COMPARE_VARIANTS,
                &data,
                &model,
                &train,
                &out_dir,
            )?;
            let table = cmd_compare(&specs, &out_dir)?;
            print!("{}", table.to_text());
            println!("table artifacts in {}", out_dir.display());
            Ok(())
        }
        Command::Ablation {
            data,
            model,
            train,
            out,
        } => {
            let out_dir = out.unwrap_or_else(|| out_root().join("ablation"));
            let datasets = build_datasets(&data, train.seed)?;
            let specs = build_table_specs(
                &datasets,
                &ABLATION_VARIANTS,
                &data,
                &model,
                &train,
                &out_dir,
            )?;
            let table = cmd_ablation(&specs, &out_dir)?;
            print!("{}", table.to_text());
            println!("table artifacts in {}", out_dir.display());
            Ok(())
        }
        Command::Verify => {
            let (reports, outcome) = cmd_verify();
            for r in &reports {
                println!(
                    "{} {} measured={:.3e} tolerance={:.0e}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.measured,
                    r.tolerance
                );
            }
            outcome
        }
        Command::Aggregate { incidents, out } => {
            let (table, categories) = aggregate_incidents(&incidents)?;
            write_csv(&table, &categories, &out)?;
            println!(
                "wrote {} days x {} categories to {}",
                table.len(),
                categories.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn build_table_specs(
    datasets: &[DatasetSpec],
    variants: &[Variant],
    data: &DataArgs,
    model: &ModelArgs,
    train: &TrainArgs,
    out_dir: &Path,
) -> Result<Vec<ExperimentSpec>, Error> {
    let tcfg = train.to_config();
    let mut specs = Vec::new();
    for dataset in datasets {
        for variant in variants {
            let args = ModelArgs {
                variant: variant.as_str().to_string(),
                input_len: model.input_len,
                pred_len: model.pred_len,
                hidden: model.hidden,
                d_model: model.d_model,
                heads: model.heads,
                sparse_factor: model.sparse_factor,
            };
            specs.push(ExperimentSpec {
                dataset: dataset.clone(),
                split: SplitSpec::default(),
                model: args.to_config(data.n_features)?,
                train: tcfg,
                out_dir: out_dir.to_path_buf(),
            });
        }
    }
    Ok(specs)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one pass/fail line. The criteria run serially inside a single
//! test so the stated runtime budgets are measured without interference.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use lgstime::check::{
    attention_grad_report, dense_equivalence_report, desk_config, gru_gate_identity_error,
    gru_grad_report, lstm_gate_identity_error, lstm_grad_report, model_grad_report_cfg,
    split_leakage_violations,
};
use lgstime::data::{SplitSpec, SynthSpec};
use lgstime::harness::{
    cmd_ablation, cmd_compare, cmd_run, DatasetSpec, ExperimentSpec, Flag, ResultsTable,
    ABLATION_VARIANTS, COMPARE_VARIANTS,
};
use lgstime::metrics::{compute_metrics_flat, ulp_diff};
use lgstime::model::{ModelConfig, Variant};
use lgstime::train::{AdamConfig, TrainConfig};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run_criterion(
    name: &'static str,
    outcomes: &mut Vec<Outcome>,
    f: impl FnOnce() -> Result<String, String>,
) {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let (pass, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!(
        "ACCEPTANCE {name}: {} ({detail}; {:.2}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    outcomes.push(Outcome {
        name,
        pass,
        detail,
        elapsed,
    });
}

fn check(cond: bool, label: &str, errors: &mut Vec<String>) {
    if !cond {
        errors.push(label.to_string());
    }
}

// 1. Gradient fidelity at desk scale over >= 5 seeded configurations.
fn criterion_gradient_fidelity() -> Result<String, String> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let lstm = lstm_grad_report(1000 + seed, 8, 8, 12);
        let gru = gru_grad_report(2000 + seed, 8, 8, 12);
        let attn = attention_grad_report(3000 + seed, 12, 8, 2, 2);
        let model = model_grad_report_cfg(4000 + seed, &desk_config(Variant::Lgstime));
        for report in [&lstm, &gru, &attn, &model] {
            worst = worst.max(report.max_rel_err);
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("max rel err {worst:.3e} over 5 seeds x 4 blocks");
    if worst >= 1e-4 {
        return Err(detail);
    }
    if elapsed > Duration::from_secs(60) {
        return Err(format!("{detail}, but took {elapsed:?} > 60s"));
    }
    Ok(detail)
}

// 2. Dense-attention oracle equivalence for full-width bands.
fn criterion_dense_oracle() -> Result<String, String> {
    let start = Instant::now();
    let shapes = [
        (3usize, 4usize, 1usize),
        (5, 4, 2),
        (7, 6, 3),
        (8, 8, 2),
        (10, 8, 4),
        (11, 6, 2),
        (12, 12, 4),
        (14, 4, 2),
        (15, 10, 2),
        (16, 8, 4),
    ];
    let mut worst_value: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for (i, (n, d, heads)) in shapes.into_iter().enumerate() {
        let eq = dense_equivalence_report(5000 + i as u64, n, d, heads);
        worst_value = worst_value.max(eq.value_err);
        worst_grad = worst_grad.max(eq.grad_err);
    }
    let elapsed = start.elapsed();
    let detail = format!("10 instances, value err {worst_value:.3e}, grad err {worst_grad:.3e}");
    if worst_value >= 1e-12 || worst_grad >= 1e-10 {
        return Err(detail);
    }
    if elapsed > Duration::from_secs(10) {
        return Err(format!("{detail}, but took {elapsed:?} > 10s"));
    }
    Ok(detail)
}

// 3. Closed-form gate identities of the zero-parameter cells.
fn criterion_gate_identities() -> Result<String, String> {
    let lstm = lstm_gate_identity_error();
    let gru = gru_gate_identity_error();
    let worst = lstm.max(gru);
    let detail = format!("max deviation {worst:.3e}");
    if worst < 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 4. Metric identities and the hand-computed example.
fn criterion_metric_identities() -> Result<String, String> {
    let mut errors = Vec::new();
    let r = compute_metrics_flat(&[1.0, 2.0, 3.0], &[2.0, 2.0, 5.0]).map_err(|e| e.to_string())?;
    check((r.mse - 5.0 / 3.0).abs() < 1e-12, "mse != 5/3", &mut errors);
    check((r.mae - 1.0).abs() < 1e-12, "mae != 1", &mut errors);
    check(
        (r.rmse - (5.0f64 / 3.0).sqrt()).abs() < 1e-12,
        "rmse != sqrt(5/3)",
        &mut errors,
    );

    let mut max_ulp = 0u64;
    for seed in 0..50u64 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..60usize);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y_hat: Vec<f64> = y.iter().map(|v| v + rng.random_range(-1.5..1.5)).collect();
        let r = compute_metrics_flat(&y, &y_hat).unwrap();
        max_ulp = max_ulp.max(ulp_diff(r.rmse * r.rmse, r.mse));
        check(r.mae <= r.rmse, "mae > rmse", &mut errors);
    }
    check(max_ulp <= 1, "rmse^2 != mse within 1 ulp", &mut errors);
    if errors.is_empty() {
        Ok(format!("hand example exact, rmse^2 within {max_ulp} ulp"))
    } else {
        Err(errors.join(", "))
    }
}

fn smoke_spec(
    out_dir: PathBuf,
    lr: f64,
    epochs: usize,
    n_rows: usize,
    cfg: ModelConfig,
) -> ExperimentSpec {
    ExperimentSpec {
        dataset: DatasetSpec::synthetic("smoke", SynthSpec::new(n_rows, cfg.n_features, 777)),
        split: SplitSpec::default(),
        model: cfg,
        train: TrainConfig {
            epochs,
            batch_size: 32,
            seed: 42,
            repeats: 1,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        },
        out_dir,
    }
}

// 5. Learning smoke test: beat the mean predictor at the scaled rate, and
// run the protocol-default rate to completion with a smoothly decreasing
// trace.
fn criterion_learning_smoke() -> Result<String, String> {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    // Training recipe: MSE loss, Adam, weight decay 0.1, seeded repeats.
    // The stated rate 1e-5 is kept as the protocol default; the smoke run
    // scales it to 1e-3 for desk-scale feasibility. Both settings logged:
    let scaled = smoke_spec(
        tmp.path().join("scaled"),
        1e-3,
        30,
        2000,
        ModelConfig {
            n_features: 12,
            input_len: 24,
            pred_len: 1,
            hidden: 32,
            d_model: 32,
            heads: 4,
            sparse_factor: 8,
            variant: Variant::Lgstime,
        },
    );
    println!(
        "  smoke run A: lr {} (scaled for desk feasibility), {} epochs, {} rows",
        scaled.train.adam.lr, scaled.train.epochs, 2000
    );
    let artifacts = cmd_run(&scaled).map_err(|e| e.to_string())?;
    let mse = artifacts.summary.mean.mse;
    if mse >= 0.95 {
        return Err(format!("standardized test MSE {mse:.4} >= 0.95"));
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(300) {
        return Err(format!("scaled run took {elapsed:?} > 5 min"));
    }

    // Protocol-default configuration at desk scale: must run to completion
    // with a strictly decreasing 5-epoch-smoothed loss trace.
    let default_run = smoke_spec(
        tmp.path().join("default"),
        1e-5,
        100,
        300,
        ModelConfig {
            n_features: 12,
            input_len: 12,
            pred_len: 1,
            hidden: 16,
            d_model: 16,
            heads: 2,
            sparse_factor: 4,
            variant: Variant::Lgstime,
        },
    );
    println!(
        "  smoke run B: lr {} (protocol default), {} epochs, {} rows",
        default_run.train.adam.lr, default_run.train.epochs, 300
    );
    let trace_path = default_run.out_dir.join("trace.jsonl");
    cmd_run(&default_run).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(trace_path).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = text
        .lines()
        .filter_map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            v.get("train_mse").and_then(|m| m.as_f64())
        })
        .collect();
    if losses.len() != 100 {
        return Err(format!(
            "expected 100 epochs in trace, got {}",
            losses.len()
        ));
    }
    let smoothed: Vec<f64> = losses
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / 5.0)
        .collect();
    let monotone = smoothed.windows(2).all(|w| w[1] < w[0]);
    if !monotone {
        return Err("5-epoch-smoothed default-rate trace is not strictly decreasing".into());
    }
    Ok(format!(
        "scaled-rate test MSE {mse:.4} < 0.95; default-rate trace strictly decreasing over {} smoothed points",
        smoothed.len()
    ))
}

fn verify_table(table: &ResultsTable, variants: &[Variant], errors: &mut Vec<String>, label: &str) {
    check(
        table.variants == variants,
        &format!("{label}: variant columns"),
        errors,
    );
    check(
        table.datasets == vec!["DS1", "DS2", "DS3", "DS4"],
        &format!("{label}: dataset rows"),
        errors,
    );
    // brute-force flag recomputation from the mean metrics
    for (d, row) in table.cells.iter().enumerate() {
        for m in 0..3 {
            let value = |r: &lgstime::metrics::MetricsReport| match m {
                0 => r.mse,
                1 => r.mae,
                _ => r.rmse,
            };
            let best = row.iter().map(value).fold(f64::INFINITY, f64::min);
            let second = row
                .iter()
                .map(value)
                .filter(|&v| v > best)
                .fold(f64::INFINITY, f64::min);
            for (v, r) in row.iter().enumerate() {
                let expect = if value(r) == best {
                    Flag::Best
                } else if value(r) == second {
                    Flag::Second
                } else {
                    Flag::None
                };
                check(
                    table.flags[d][v][m] == expect,
                    &format!("{label}: flag mismatch at d{d} v{v} m{m}"),
                    errors,
                );
            }
        }
    }
    // Count row equals a recount of best flags
    for v in 0..variants.len() {
        for m in 0..3 {
            let recount = table
                .flags
                .iter()
                .filter(|row| row[v][m] == Flag::Best)
                .count();
            check(
                table.counts[v][m] == recount,
                &format!("{label}: count row at v{v} m{m}"),
                errors,
            );
        }
    }
    let csv = table.to_csv();
    check(
        csv.starts_with("dataset,variant,mse,mae,rmse,mse_flag,mae_flag,rmse_flag"),
        &format!("{label}: csv header"),
        errors,
    );
    check(
        csv.lines().filter(|l| l.starts_with("Count,")).count() == variants.len(),
        &format!("{label}: csv Count rows"),
        errors,
    );
}

// 6. Protocol-shape reproduction of the comparison and ablation tables.
fn criterion_protocol_shape() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mk_specs = |variants: &[Variant], sub: &str| -> Vec<ExperimentSpec> {
        let mut specs = Vec::new();
        for k in 0..4u64 {
            for variant in variants {
                specs.push(ExperimentSpec {
                    dataset: DatasetSpec::synthetic(
                        format!("DS{}", k + 1),
                        SynthSpec::new(120, 3, 900 + k),
                    ),
                    split: SplitSpec::default(),
                    model: ModelConfig {
                        n_features: 3,
                        input_len: 8,
                        pred_len: 1,
                        hidden: 8,
                        d_model: 8,
                        heads: 2,
                        sparse_factor: 2,
                        variant: *variant,
                    },
                    train: TrainConfig {
                        epochs: 2,
                        batch_size: 16,
                        seed: 21,
                        repeats: 2,
                        adam: AdamConfig {
                            lr: 1e-3,
                            ..AdamConfig::default()
                        },
                    },
                    out_dir: tmp.path().join(sub),
                });
            }
        }
        specs
    };

    let mut errors = Vec::new();
    let compare_dir = tmp.path().join("compare");
    let compare = cmd_compare(&mk_specs(&COMPARE_VARIANTS, "compare"), &compare_dir)
        .map_err(|e| e.to_string())?;
    verify_table(&compare, &COMPARE_VARIANTS, &mut errors, "compare");

    // Independent recomputation from the raw per-run metrics file: float
    // formatting is shortest-round-trip, so parsed means must equal the
    // table cells bit for bit.
    let raw = std::fs::read_to_string(compare_dir.join("compare_runs.csv"))
        .map_err(|e| e.to_string())?;
    let mut sums: std::collections::BTreeMap<(String, String), (f64, f64, f64, usize)> =
        std::collections::BTreeMap::new();
    for line in raw.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let entry = sums
            .entry((f[0].to_string(), f[1].to_string()))
            .or_insert((0.0, 0.0, 0.0, 0));
        entry.0 += f[3].parse::<f64>().unwrap();
        entry.1 += f[4].parse::<f64>().unwrap();
        entry.2 += f[5].parse::<f64>().unwrap();
        entry.3 += 1;
    }
    for (d, dataset) in compare.datasets.iter().enumerate() {
        for (v, variant) in compare.variants.iter().enumerate() {
            let (mse, mae, rmse, k) = sums[&(dataset.clone(), variant.to_string())];
            let k = k as f64;
            let cell = &compare.cells[d][v];
            check(
                mse / k == cell.mse && mae / k == cell.mae && rmse / k == cell.rmse,
                &format!("raw-file mean mismatch at {dataset}/{variant}"),
                &mut errors,
            );
        }
    }

    let ablation_dir = tmp.path().join("ablation");
    let ablation = cmd_ablation(&mk_specs(&ABLATION_VARIANTS, "ablation"), &ablation_dir)
        .map_err(|e| e.to_string())?;
    verify_table(&ablation, &ABLATION_VARIANTS, &mut errors, "ablation");

    for file in ["compare.csv", "compare.txt", "compare_runs.csv"] {
        check(
            compare_dir.join(file).exists(),
            &format!("missing {file}"),
            &mut errors,
        );
    }
    if errors.is_empty() {
        Ok("compare 4x4 and ablation 4x3 tables with flags and Count rows".into())
    } else {
        Err(errors.join("; "))
    }
}

// 7. Determinism: identical specs yield byte-identical artifacts.
fn criterion_determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        n_features: 3,
        input_len: 8,
        pred_len: 1,
        hidden: 8,
        d_model: 8,
        heads: 2,
        sparse_factor: 2,
        variant: Variant::Lgstime,
    };
    let spec = smoke_spec(tmp.path().join("a"), 1e-3, 3, 150, cfg);
    cmd_run(&spec).map_err(|e| e.to_string())?;
    let first_metrics = std::fs::read(spec.out_dir.join("metrics.csv")).unwrap();
    let first_trace = std::fs::read(spec.out_dir.join("trace.jsonl")).unwrap();
    let first_ckpt = std::fs::read(spec.out_dir.join("checkpoint.bin")).unwrap();

    cmd_run(&spec).map_err(|e| e.to_string())?;
    let mut errors = Vec::new();
    check(
        std::fs::read(spec.out_dir.join("metrics.csv")).unwrap() == first_metrics,
        "metrics.csv differs between identical runs",
        &mut errors,
    );
    check(
        std::fs::read(spec.out_dir.join("trace.jsonl")).unwrap() == first_trace,
        "trace.jsonl differs",
        &mut errors,
    );
    check(
        std::fs::read(spec.out_dir.join("checkpoint.bin")).unwrap() == first_ckpt,
        "checkpoint.bin differs",
        &mut errors,
    );
    if errors.is_empty() {
        Ok("metrics, trace and checkpoint byte-identical across reruns".into())
    } else {
        Err(errors.join("; "))
    }
}

// 8. Split and scaler-leakage invariants over 100 randomized tables.
fn criterion_split_leakage() -> Result<String, String> {
    let violations = split_leakage_violations(100, 4242);
    if violations == 0 {
        Ok("0 violations over 100 tables".into())
    } else {
        Err(format!("{violations} violations over 100 tables"))
    }
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = Vec::new();
    run_criterion(
        "1-gradient-fidelity",
        &mut outcomes,
        criterion_gradient_fidelity,
    );
    run_criterion(
        "2-dense-attention-oracle",
        &mut outcomes,
        criterion_dense_oracle,
    );
    run_criterion(
        "3-gate-identities",
        &mut outcomes,
        criterion_gate_identities,
    );
    run_criterion(
        "4-metric-identities",
        &mut outcomes,
        criterion_metric_identities,
    );
    run_criterion("5-learning-smoke", &mut outcomes, criterion_learning_smoke);
    run_criterion("6-protocol-shape", &mut outcomes, criterion_protocol_shape);
    run_criterion("7-determinism", &mut outcomes, criterion_determinism);
    run_criterion("8-split-leakage", &mut outcomes, criterion_split_leakage);

    let failures: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{}: {}", o.name, o.detail))
        .collect();
    let total: f64 = outcomes.iter().map(|o| o.elapsed.as_secs_f64()).sum();
    println!("ACCEPTANCE total runtime {total:.1}s");
    assert!(
        failures.is_empty(),
        "failed criteria:\n{}",
        failures.join("\n")
    );
}

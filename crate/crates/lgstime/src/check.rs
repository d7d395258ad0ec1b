//! Independent verification machinery: a central finite-difference gradient
//! checker and a dense multi-head attention oracle.
//!
//! Nothing in this module goes through the [`crate::tensor::Tape`]. The
//! oracle and the checker are the second route against which the tape-based
//! implementations are judged, both in the test suites and in the
//! `verify` command.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, build_band_mask, AttentionParams};
use crate::cells::{
    self, gru_step_values, lstm_step_values, GruParams, GruState, LstmParams, LstmState,
};
use crate::data::{chronological_split, fit_scaler, synthesize, SplitSpec, SynthSpec};
use crate::metrics::{compute_metrics_flat, ulp_diff};
use crate::model::{bind_model, forward_bound, forward_values, ModelConfig, ModelParams, Variant};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{adam_update, mse_loss, AdamConfig};

/// Default step for central finite differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so that near-zero pairs compare on an
/// absolute scale instead of amplifying finite-difference noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-3, f64::max(a.abs(), b.abs()))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients against central finite differences of
/// `loss_fn`, perturbing one scalar at a time.
pub fn finite_diff_check(
    params: &BTreeMap<String, Tensor>,
    loss_fn: &mut dyn FnMut(&BTreeMap<String, Tensor>) -> f64,
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut work = params.clone();
    for (name, tensor) in params {
        let grad = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for `{name}`"));
        assert_eq!(grad.shape(), tensor.shape(), "gradient shape for `{name}`");
        for idx in 0..tensor.numel() {
            let original = tensor.data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = original + step;
            let up = loss_fn(&work);
            work.get_mut(name).unwrap().data_mut()[idx] = original - step;
            let down = loss_fn(&work);
            work.get_mut(name).unwrap().data_mut()[idx] = original;
            let fd = (up - down) / (2.0 * step);
            let err = rel_err(fd, grad.data()[idx]);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{idx}]");
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Dense multi-head attention oracle (no masking), hand-rolled loops only.
// ---------------------------------------------------------------------------

/// Gradients of `sum(output)` for the dense oracle.
pub struct DenseAttentionResult {
    pub output: Tensor,
    pub d_wq: Tensor,
    pub d_wk: Tensor,
    pub d_wv: Tensor,
    pub d_wo: Tensor,
    pub d_x: Tensor,
}

/// Unmasked multi-head attention computed with plain loops, plus analytic
/// gradients of `sum(output)` with respect to every projection and the input.
pub fn dense_multi_head(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> DenseAttentionResult {
    let n = x.rows();
    let d = x.cols();
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = mat_mul(x, wq);
    let k = mat_mul(x, wk);
    let v = mat_mul(x, wv);

    // Per-head attention weights and pre-projection outputs.
    let mut attn = vec![Tensor::zeros(n, n); heads];
    let mut concat = Tensor::zeros(n, d);
    for h in 0..heads {
        let c0 = h * dh;
        let mut scores = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..dh {
                    s += q.at(i, c0 + p) * k.at(j, c0 + p);
                }
                scores.data_mut()[i * n + j] = s * scale;
            }
        }
        let a = softmax_rows_raw(&scores);
        for i in 0..n {
            for p in 0..dh {
                let mut s = 0.0;
                for j in 0..n {
                    s += a.at(i, j) * v.at(j, c0 + p);
                }
                concat.data_mut()[i * d + c0 + p] = s;
            }
        }
        attn[h] = a;
    }
    let output = mat_mul(&concat, wo);

    // Backward for loss = sum(output); upstream gradient is all ones.
    let ones = Tensor::new(n, d, vec![1.0; n * d]);
    let d_wo = mat_mul(&transpose(&concat), &ones);
    let d_concat = mat_mul(&ones, &transpose(wo));

    let mut d_q = Tensor::zeros(n, d);
    let mut d_k = Tensor::zeros(n, d);
    let mut d_v = Tensor::zeros(n, d);
    for h in 0..heads {
        let c0 = h * dh;
        let a = &attn[h];
        // dA[i,j] = sum_p dH[i,p] V[j,p]; dV[j,p] += sum_i A[i,j] dH[i,p]
        let mut d_a = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..dh {
                    s += d_concat.at(i, c0 + p) * v.at(j, c0 + p);
                }
                d_a.data_mut()[i * n + j] = s;
            }
        }
        for j in 0..n {
            for p in 0..dh {
                let mut s = 0.0;
                for i in 0..n {
                    s += a.at(i, j) * d_concat.at(i, c0 + p);
                }
                d_v.data_mut()[j * d + c0 + p] = s;
            }
        }
        // softmax backward row by row
        let mut d_s = Tensor::zeros(n, n);
        for i in 0..n {
            let mut dot = 0.0;
            for j in 0..n {
                dot += d_a.at(i, j) * a.at(i, j);
            }
            for j in 0..n {
                d_s.data_mut()[i * n + j] = a.at(i, j) * (d_a.at(i, j) - dot);
            }
        }
        // dQ[i,p] += scale * sum_j dS[i,j] K[j,p]; dK[j,p] += scale * sum_i dS[i,j] Q[i,p]
        for i in 0..n {
            for p in 0..dh {
                let mut s = 0.0;
                for j in 0..n {
                    s += d_s.at(i, j) * k.at(j, c0 + p);
                }
                d_q.data_mut()[i * d + c0 + p] = s * scale;
            }
        }
        for j in 0..n {
            for p in 0..dh {
                let mut s = 0.0;
                for i in 0..n {
                    s += d_s.at(i, j) * q.at(i, c0 + p);
                }
                d_k.data_mut()[j * d + c0 + p] = s * scale;
            }
        }
    }

    let d_wq = mat_mul(&transpose(x), &d_q);
    let d_wk = mat_mul(&transpose(x), &d_k);
    let d_wv = mat_mul(&transpose(x), &d_v);
    let mut d_x = mat_mul(&d_q, &transpose(wq));
    add_into(&mut d_x, &mat_mul(&d_k, &transpose(wk)));
    add_into(&mut d_x, &mat_mul(&d_v, &transpose(wv)));

    DenseAttentionResult {
        output,
        d_wq,
        d_wk,
        d_wv,
        d_wo,
        d_x,
    }
}

fn mat_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(k, b.rows());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out.data_mut()[i * n + j] = s;
        }
    }
    out
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = a.at(i, j);
        }
    }
    out
}

fn softmax_rows_raw(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let row: Vec<f64> = (0..c).map(|j| x.at(i, j)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..c {
            out.data_mut()[i * c + j] = exps[j] / sum;
        }
    }
    out
}

fn add_into(target: &mut Tensor, src: &Tensor) {
    for (t, s) in target.data_mut().iter_mut().zip(src.data().iter()) {
        *t += s;
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Gradient reports: analytic tape gradients vs finite differences for the
// cells, the attention block, and the full model.
// ---------------------------------------------------------------------------

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

fn lstm_to_map(p: &LstmParams) -> BTreeMap<String, Tensor> {
    [
        ("w_f", &p.w_f),
        ("w_i", &p.w_i),
        ("w_c", &p.w_c),
        ("w_o", &p.w_o),
        ("b_f", &p.b_f),
        ("b_i", &p.b_i),
        ("b_c", &p.b_c),
        ("b_o", &p.b_o),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.clone()))
    .collect()
}

fn lstm_from_map(m: &BTreeMap<String, Tensor>) -> LstmParams {
    LstmParams {
        w_f: m["w_f"].clone(),
        w_i: m["w_i"].clone(),
        w_c: m["w_c"].clone(),
        w_o: m["w_o"].clone(),
        b_f: m["b_f"].clone(),
        b_i: m["b_i"].clone(),
        b_c: m["b_c"].clone(),
        b_o: m["b_o"].clone(),
    }
}

/// Gradients of `sum(h_T)` over an unrolled LSTM vs finite differences.
pub fn lstm_grad_report(seed: u64, hidden: usize, input: usize, steps: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LstmParams::init(hidden, input, &mut rng);
    let xs: Vec<Tensor> = (0..steps)
        .map(|_| rand_tensor(&mut rng, 1, input))
        .collect();

    let run = |p: &LstmParams| -> (f64, BTreeMap<String, Tensor>) {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let h0 = tape.leaf(Tensor::zeros(1, hidden));
        let c0 = tape.leaf(Tensor::zeros(1, hidden));
        let xvs: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let seq = cells::lstm_forward(&mut tape, &vars, &xvs, h0, c0).unwrap();
        let loss = tape.sum_all(seq.last().unwrap().hidden);
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss).unwrap();
        let named = [
            ("w_f", vars.w_f),
            ("w_i", vars.w_i),
            ("w_c", vars.w_c),
            ("w_o", vars.w_o),
            ("b_f", vars.b_f),
            ("b_i", vars.b_i),
            ("b_c", vars.b_c),
            ("b_o", vars.b_o),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), grads.wrt(v)))
        .collect();
        (value, named)
    };

    let (_, analytic) = run(&params);
    let mut loss_fn = |m: &BTreeMap<String, Tensor>| run(&lstm_from_map(m)).0;
    finite_diff_check(&lstm_to_map(&params), &mut loss_fn, &analytic, FD_STEP)
}

fn gru_to_map(p: &GruParams) -> BTreeMap<String, Tensor> {
    [
        ("w_z", &p.w_z),
        ("w_r", &p.w_r),
        ("w_h", &p.w_h),
        ("b_z", &p.b_z),
        ("b_r", &p.b_r),
        ("b_h", &p.b_h),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.clone()))
    .collect()
}

fn gru_from_map(m: &BTreeMap<String, Tensor>) -> GruParams {
    GruParams {
        w_z: m["w_z"].clone(),
        w_r: m["w_r"].clone(),
        w_h: m["w_h"].clone(),
        b_z: m["b_z"].clone(),
        b_r: m["b_r"].clone(),
        b_h: m["b_h"].clone(),
    }
}

pub fn gru_grad_report(seed: u64, hidden: usize, input: usize, steps: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = GruParams::init(hidden, input, &mut rng);
    let xs: Vec<Tensor> = (0..steps)
        .map(|_| rand_tensor(&mut rng, 1, input))
        .collect();

    let run = |p: &GruParams| -> (f64, BTreeMap<String, Tensor>) {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let h0 = tape.leaf(Tensor::zeros(1, hidden));
        let xvs: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let seq = cells::gru_forward(&mut tape, &vars, &xvs, h0).unwrap();
        let loss = tape.sum_all(seq.last().unwrap().hidden);
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss).unwrap();
        let named = [
            ("w_z", vars.w_z),
            ("w_r", vars.w_r),
            ("w_h", vars.w_h),
            ("b_z", vars.b_z),
            ("b_r", vars.b_r),
            ("b_h", vars.b_h),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), grads.wrt(v)))
        .collect();
        (value, named)
    };

    let (_, analytic) = run(&params);
    let mut loss_fn = |m: &BTreeMap<String, Tensor>| run(&gru_from_map(m)).0;
    finite_diff_check(&gru_to_map(&params), &mut loss_fn, &analytic, FD_STEP)
}

/// Gradients of `sum(output)` of the banded block w.r.t. all four
/// projections vs finite differences.
pub fn attention_grad_report(
    seed: u64,
    n: usize,
    d_model: usize,
    heads: usize,
    w: usize,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::init(d_model, heads, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, n, d_model);

    let run = |p: &AttentionParams| -> (f64, BTreeMap<String, Tensor>) {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let trace = attention::multi_head_forward(&mut tape, &vars, xv, w).unwrap();
        let loss = tape.sum_all(trace.output);
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss).unwrap();
        let named = [
            ("w_q", vars.w_q),
            ("w_k", vars.w_k),
            ("w_v", vars.w_v),
            ("w_o", vars.w_o),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), grads.wrt(v)))
        .collect();
        (value, named)
    };

    let (_, analytic) = run(&params);
    let params_map: BTreeMap<String, Tensor> = [
        ("w_q", &params.w_q),
        ("w_k", &params.w_k),
        ("w_v", &params.w_v),
        ("w_o", &params.w_o),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.clone()))
    .collect();
    let mut loss_fn = |m: &BTreeMap<String, Tensor>| {
        let p = AttentionParams {
            w_q: m["w_q"].clone(),
            w_k: m["w_k"].clone(),
            w_v: m["w_v"].clone(),
            w_o: m["w_o"].clone(),
            heads,
        };
        run(&p).0
    };
    finite_diff_check(&params_map, &mut loss_fn, &analytic, FD_STEP)
}

/// The shared desk-scale configuration used by the verification properties.
pub fn desk_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        n_features: 3,
        input_len: 12,
        pred_len: 1,
        hidden: 8,
        d_model: 8,
        heads: 2,
        sparse_factor: 2,
        variant,
    }
}

/// Gradients of `MSE(forward(X), y)` w.r.t. every model parameter vs finite
/// differences.
pub fn model_grad_report_cfg(seed: u64, cfg: &ModelConfig) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(cfg, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, cfg.input_len, cfg.n_features);
    let y = rand_tensor(&mut rng, cfg.pred_len, cfg.n_features);

    let analytic = {
        let mut tape = Tape::new();
        let vars = bind_model(&mut tape, &params);
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let trace = forward_bound(&mut tape, &vars, cfg, xv).unwrap();
        let loss = mse_loss(&mut tape, trace.pred, yv).unwrap();
        let grads = tape.backward(loss).unwrap();
        vars.leaves()
            .iter()
            .map(|(name, var)| (name.clone(), grads.wrt(*var)))
            .collect::<BTreeMap<String, Tensor>>()
    };

    let mut loss_fn = |m: &BTreeMap<String, Tensor>| {
        let p = ModelParams::from_named(cfg, m).unwrap();
        let pred = forward_values(&p, cfg, &x).unwrap();
        compute_metrics_flat(y.data(), pred.data()).unwrap().mse
    };
    finite_diff_check(&params.named_tensors(), &mut loss_fn, &analytic, FD_STEP)
}

pub fn model_grad_report(seed: u64, variant: Variant) -> GradCheckReport {
    model_grad_report_cfg(seed, &desk_config(variant))
}

/// Sparse path with `w >= n - 1` against the dense oracle: forward values
/// and the gradients of `sum(output)` for X and all four projections.
pub struct DenseEquivalence {
    pub value_err: f64,
    pub grad_err: f64,
}

pub fn dense_equivalence_report(
    seed: u64,
    n: usize,
    d_model: usize,
    heads: usize,
) -> DenseEquivalence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::init(d_model, heads, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, n, d_model);

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.param(x.clone());
    let trace = attention::multi_head_forward(&mut tape, &vars, xv, n - 1).unwrap();
    let loss = tape.sum_all(trace.output);
    let sparse_out = tape.value(trace.output).clone();
    let grads = tape.backward(loss).unwrap();

    let dense = dense_multi_head(
        &x,
        &params.w_q,
        &params.w_k,
        &params.w_v,
        &params.w_o,
        heads,
    );
    let value_err = max_abs_diff(&sparse_out, &dense.output);
    let grad_err = [
        (vars.w_q, &dense.d_wq),
        (vars.w_k, &dense.d_wk),
        (vars.w_v, &dense.d_wv),
        (vars.w_o, &dense.d_wo),
        (xv, &dense.d_x),
    ]
    .into_iter()
    .map(|(var, oracle)| max_abs_diff(&grads.wrt(var), oracle))
    .fold(0.0, f64::max);
    DenseEquivalence {
        value_err,
        grad_err,
    }
}

/// A two-layer tanh network trained-shape composition under MSE.
pub fn two_layer_grad_report(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, 2, 3);
    let y = rand_tensor(&mut rng, 2, 2);
    let params: BTreeMap<String, Tensor> = [
        ("w1".to_string(), rand_tensor(&mut rng, 3, 4)),
        ("b1".to_string(), rand_tensor(&mut rng, 1, 4)),
        ("w2".to_string(), rand_tensor(&mut rng, 4, 2)),
        ("b2".to_string(), rand_tensor(&mut rng, 1, 2)),
    ]
    .into_iter()
    .collect();

    let run = |m: &BTreeMap<String, Tensor>| -> (f64, BTreeMap<String, Tensor>) {
        let mut tape = Tape::new();
        let w1 = tape.param(m["w1"].clone());
        let b1 = tape.param(m["b1"].clone());
        let w2 = tape.param(m["w2"].clone());
        let b2 = tape.param(m["b2"].clone());
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let z1 = tape.matmul(xv, w1).unwrap();
        let z1b = tape.add_bias_row(z1, b1).unwrap();
        let h = tape.tanh(z1b);
        let z2 = tape.matmul(h, w2).unwrap();
        let pred = tape.add_bias_row(z2, b2).unwrap();
        let loss = mse_loss(&mut tape, pred, yv).unwrap();
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss).unwrap();
        let named = [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), grads.wrt(v)))
            .collect();
        (value, named)
    };

    let (_, analytic) = run(&params);
    let mut loss_fn = |m: &BTreeMap<String, Tensor>| run(m).0;
    finite_diff_check(&params, &mut loss_fn, &analytic, FD_STEP)
}

/// Shared-input accumulation: `sum(sigmoid(x) ⊙ tanh(x))` consumes `x`
/// twice, so its adjoint is the sum of both branch adjoints.
pub fn diamond_grad_report(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: BTreeMap<String, Tensor> = [("x".to_string(), rand_tensor(&mut rng, 1, 5))]
        .into_iter()
        .collect();

    let run = |m: &BTreeMap<String, Tensor>| -> (f64, BTreeMap<String, Tensor>) {
        let mut tape = Tape::new();
        let x = tape.param(m["x"].clone());
        let u = tape.sigmoid(x);
        let v = tape.tanh(x);
        let prod = tape.mul(u, v).unwrap();
        let loss = tape.sum_all(prod);
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss).unwrap();
        (
            value,
            [("x".to_string(), grads.wrt(x))].into_iter().collect(),
        )
    };

    let (_, analytic) = run(&params);
    let mut loss_fn = |m: &BTreeMap<String, Tensor>| run(m).0;
    finite_diff_check(&params, &mut loss_fn, &analytic, FD_STEP)
}

// ---------------------------------------------------------------------------
// Closed-form identities and structural checks, each returning a measured
// error (or violation count) for the property registry.
// ---------------------------------------------------------------------------

/// Zero-parameter LSTM step identities: gates at 0.5, candidate at 0, and
/// the unit-cell hand value `h = 0.5·tanh(0.5)`.
pub fn lstm_gate_identity_error() -> f64 {
    let mut worst = 0.0f64;
    let params = LstmParams::zeros(2, 3);
    let out = lstm_step_values(
        &params,
        &LstmState::zeros(2),
        &Tensor::row(&[7.0, -4.0, 0.2]),
    )
    .unwrap();
    for gate in [&out.forget, &out.input_gate, &out.output_gate] {
        for &v in gate.data() {
            worst = worst.max((v - 0.5).abs());
        }
    }
    for t in [&out.candidate, &out.cell, &out.hidden] {
        for &v in t.data() {
            worst = worst.max(v.abs());
        }
    }

    let params = LstmParams::zeros(1, 1);
    let state = LstmState {
        h: Tensor::row(&[0.0]),
        c: Tensor::row(&[1.0]),
    };
    let out = lstm_step_values(&params, &state, &Tensor::row(&[0.9])).unwrap();
    worst = worst.max((out.cell.data()[0] - 0.5).abs());
    worst = worst.max((out.hidden.data()[0] - 0.5 * 0.5f64.tanh()).abs());
    worst
}

/// Zero-parameter GRU step identities: `z = r = 0.5`, candidate 0, and the
/// convex combination landing exactly halfway.
pub fn gru_gate_identity_error() -> f64 {
    let params = GruParams::zeros(1, 2);
    let state = GruState {
        h: Tensor::row(&[1.0]),
    };
    let out = gru_step_values(&params, &state, &Tensor::row(&[3.0, -3.0])).unwrap();
    let mut worst = (out.update.data()[0] - 0.5).abs();
    worst = worst.max((out.reset.data()[0] - 0.5).abs());
    worst = worst.max(out.candidate.data()[0].abs());
    worst = worst.max((out.hidden.data()[0] - 0.5).abs());
    worst
}

/// `b_f = +50` with all else zero keeps the cell state within 1e-9.
pub fn forget_saturation_error() -> f64 {
    let mut params = LstmParams::zeros(3, 2);
    for b in params.b_f.data_mut() {
        *b = 50.0;
    }
    let state = LstmState {
        h: Tensor::row(&[0.0, 0.0, 0.0]),
        c: Tensor::row(&[0.8, -1.1, 2.5]),
    };
    let out = lstm_step_values(&params, &state, &Tensor::row(&[0.4, -0.6])).unwrap();
    out.cell
        .data()
        .iter()
        .zip(state.c.data().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Max row-sum deviation of banded softmax over random scores; a masked
/// entry above 1e-30 counts as a full violation.
pub fn softmax_row_sum_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..10usize);
        let w = rng.random_range(0..10usize);
        let scores = rand_tensor(&mut rng, n, n);
        let mask = build_band_mask(n, w);
        let mut tape = Tape::new();
        let sv = tape.leaf(scores);
        let a = attention::masked_attention(&mut tape, sv, &mask).unwrap();
        for j in 0..n {
            let sum: f64 = (0..n).map(|k| tape.value(a).at(j, k)).sum();
            worst = worst.max((sum - 1.0).abs());
            for k in 0..n {
                if !mask.is_kept(j, k) && tape.value(a).at(j, k) >= 1e-30 {
                    worst = worst.max(1.0);
                }
            }
        }
    }
    worst
}

/// The hand metric example plus `rmse² = mse` (1 ulp) and `mae <= rmse`
/// over random report inputs.
pub fn metric_identity_error() -> f64 {
    let r = compute_metrics_flat(&[1.0, 2.0, 3.0], &[2.0, 2.0, 5.0]).unwrap();
    let mut worst = (r.mse - 5.0 / 3.0).abs();
    worst = worst.max((r.mae - 1.0).abs());
    worst = worst.max((r.rmse - (5.0f64 / 3.0).sqrt()).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..50 {
        let n = rng.random_range(1..30usize);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y_hat: Vec<f64> = y.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let r = compute_metrics_flat(&y, &y_hat).unwrap();
        if ulp_diff(r.rmse * r.rmse, r.mse) > 1 {
            worst = worst.max(1.0);
        }
        if r.mae > r.rmse * (1.0 + 1e-15) {
            worst = worst.max(r.mae - r.rmse);
        }
    }
    worst
}

/// Three Adam steps on the scalar quadratic against an inline hand-rolled
/// trajectory.
pub fn adam_reference_error() -> f64 {
    let cfg = AdamConfig {
        lr: 0.05,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut theta = vec![1.0];
    let mut m = vec![0.0];
    let mut v = vec![0.0];
    let mut ref_theta = 1.0f64;
    let mut ref_m = 0.0f64;
    let mut ref_v = 0.0f64;
    let mut worst = 0.0f64;
    for t in 1..=3u64 {
        let g = theta[0];
        adam_update(&cfg, t, &mut theta, &[g], &mut m, &mut v);
        let rg = ref_theta;
        ref_m = cfg.beta1 * ref_m + (1.0 - cfg.beta1) * rg;
        ref_v = cfg.beta2 * ref_v + (1.0 - cfg.beta2) * rg * rg;
        let mh = ref_m / (1.0 - cfg.beta1.powi(t as i32));
        let vh = ref_v / (1.0 - cfg.beta2.powi(t as i32));
        ref_theta -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        worst = worst.max((theta[0] - ref_theta).abs());
    }
    worst
}

/// Split and no-leakage suite over seeded random tables; returns the number
/// of violated invariants.
pub fn split_leakage_violations(tables: usize, seed: u64) -> usize {
    let mut violations = 0;
    for i in 0..tables {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let n = rng.random_range(20..220usize);
        let f = rng.random_range(1..4usize);
        let table = synthesize(&SynthSpec::new(n, f, seed ^ (i as u64) << 8)).unwrap();
        let splits = chronological_split(&table, SplitSpec::default()).unwrap();

        if splits.train.len() + splits.val.len() + splits.test.len() != n {
            violations += 1;
        }
        let train_last = splits
            .train
            .timestamps()
            .last()
            .copied()
            .unwrap_or(i64::MIN);
        let val_first = splits.val.timestamps().first().copied();
        let val_last = splits.val.timestamps().last().copied();
        let test_first = splits
            .test
            .timestamps()
            .first()
            .copied()
            .unwrap_or(i64::MAX);
        if let (Some(vf), Some(vl)) = (val_first, val_last) {
            if !(train_last < vf && vl < test_first) {
                violations += 1;
            }
        } else if !(train_last < test_first) {
            violations += 1;
        }

        // Scaler statistics must ignore val/test entirely: rebuild the table
        // with a perturbed row outside the train split and compare bits.
        let scaler = fit_scaler(&splits.train).unwrap();
        let mut values: Vec<f64> = (0..n).flat_map(|r| table.row(r).to_vec()).collect();
        let hit = splits.train.len() + rng.random_range(0..(n - splits.train.len()));
        values[hit * f] += 123.456;
        let perturbed =
            crate::data::SeriesTable::new(table.timestamps().to_vec(), values, f).unwrap();
        let splits2 = chronological_split(&perturbed, SplitSpec::default()).unwrap();
        let scaler2 = fit_scaler(&splits2.train).unwrap();
        if scaler != scaler2 {
            violations += 1;
        }
    }
    violations
}

/// Band-mask structure sweep: symmetry, unit diagonal, and the per-row
/// count formula; returns the number of violations.
pub fn band_mask_violations() -> usize {
    let mut violations = 0;
    for n in 1..=12usize {
        for w in 0..=12usize {
            let mask = build_band_mask(n, w);
            for j in 0..n {
                if !mask.is_kept(j, j) {
                    violations += 1;
                }
                let mut ones = 0;
                for k in 0..n {
                    if mask.is_kept(j, k) != mask.is_kept(k, j) {
                        violations += 1;
                    }
                    ones += mask.is_kept(j, k) as usize;
                }
                if ones != j.min(w) + (n - 1 - j).min(w) + 1 {
                    violations += 1;
                }
            }
            if w >= n - 1 && mask.ones_count() != n * n {
                violations += 1;
            }
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Property registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PropertyReport {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl PropertyReport {
    fn new(name: &'static str, measured: f64, tolerance: f64) -> Self {
        PropertyReport {
            name,
            measured,
            tolerance,
            pass: measured < tolerance,
        }
    }
}

pub const PROPERTY_COUNT: usize = 16;

/// The full invariant suite behind the `verify` command: gradient checks,
/// dense-attention equivalence, gate identities, metric identities, and the
/// split/leakage checks.
pub fn run_properties() -> Vec<PropertyReport> {
    let mut out = Vec::with_capacity(PROPERTY_COUNT);
    out.push(PropertyReport::new(
        "grad/two-layer-mse",
        two_layer_grad_report(101).max_rel_err,
        1e-4,
    ));
    out.push(PropertyReport::new(
        "grad/diamond-accumulation",
        diamond_grad_report(102).max_rel_err,
        1e-4,
    ));
    out.push(PropertyReport::new(
        "grad/lstm-unrolled",
        lstm_grad_report(103, 3, 2, 8).max_rel_err,
        1e-4,
    ));
    out.push(PropertyReport::new(
        "grad/gru-unrolled",
        gru_grad_report(104, 3, 2, 8).max_rel_err,
        1e-4,
    ));
    out.push(PropertyReport::new(
        "grad/sparse-attention",
        attention_grad_report(105, 6, 8, 2, 2).max_rel_err,
        1e-4,
    ));
    out.push(PropertyReport::new(
        "grad/full-model",
        model_grad_report(106, Variant::Lgstime).max_rel_err,
        1e-4,
    ));
    let eq = dense_equivalence_report(107, 7, 8, 2);
    out.push(PropertyReport::new(
        "attention/dense-equivalence-values",
        eq.value_err,
        1e-12,
    ));
    out.push(PropertyReport::new(
        "attention/dense-equivalence-gradients",
        eq.grad_err,
        1e-10,
    ));
    out.push(PropertyReport::new(
        "cells/lstm-gate-identity",
        lstm_gate_identity_error(),
        1e-12,
    ));
    out.push(PropertyReport::new(
        "cells/gru-gate-identity",
        gru_gate_identity_error(),
        1e-12,
    ));
    out.push(PropertyReport::new(
        "cells/forget-gate-saturation",
        forget_saturation_error(),
        1e-9,
    ));
    out.push(PropertyReport::new(
        "attention/softmax-row-sums",
        softmax_row_sum_error(108),
        1e-9,
    ));
    out.push(PropertyReport::new(
        "metrics/identities",
        metric_identity_error(),
        1e-12,
    ));
    out.push(PropertyReport::new(
        "optimizer/adam-scalar-reference",
        adam_reference_error(),
        1e-12,
    ));
    out.push(PropertyReport::new(
        "data/split-leakage",
        split_leakage_violations(100, 109) as f64,
        0.5,
    ));
    out.push(PropertyReport::new(
        "data/band-mask-structure",
        band_mask_violations() as f64,
        0.5,
    ));
    debug_assert_eq!(out.len(), PROPERTY_COUNT);
    out
}

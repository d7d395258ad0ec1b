//! The fused forecaster and its ablation/baseline variants.
//!
//! The full model embeds the input window once, runs the LSTM stream, the
//! GRU stream, and banded multi-head attention over the same embedded
//! sequence in parallel, concatenates their last-position summaries, and
//! maps the result to the forecast with one linear head. Every ablation is
//! a strict sub-network; the RNN and CNN baselines are minimal single-layer
//! reconstructions over the raw features with the same hidden width.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams, AttentionVars};
use crate::cells::{self, GruParams, GruVars, LstmParams, LstmVars};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lgstime,
    LstmGru,
    Lstm,
    Gru,
    Rnn,
    Cnn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Lgstime,
        Variant::LstmGru,
        Variant::Lstm,
        Variant::Gru,
        Variant::Rnn,
        Variant::Cnn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Lgstime => "lgstime",
            Variant::LstmGru => "lstm_gru",
            Variant::Lstm => "lstm",
            Variant::Gru => "gru",
            Variant::Rnn => "rnn",
            Variant::Cnn => "cnn",
        }
    }

    fn uses_embed(&self) -> bool {
        matches!(
            self,
            Variant::Lgstime | Variant::LstmGru | Variant::Lstm | Variant::Gru
        )
    }

    fn uses_lstm(&self) -> bool {
        matches!(self, Variant::Lgstime | Variant::LstmGru | Variant::Lstm)
    }

    fn uses_gru(&self) -> bool {
        matches!(self, Variant::Lgstime | Variant::LstmGru | Variant::Gru)
    }

    fn uses_attention(&self) -> bool {
        matches!(self, Variant::Lgstime)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lgstime" => Ok(Variant::Lgstime),
            "lstm_gru" => Ok(Variant::LstmGru),
            "lstm" => Ok(Variant::Lstm),
            "gru" => Ok(Variant::Gru),
            "rnn" => Ok(Variant::Rnn),
            "cnn" => Ok(Variant::Cnn),
            other => Err(Error::Validation(format!(
                "unknown variant `{other}` (expected lgstime, lstm_gru, lstm, gru, rnn, cnn)"
            ))),
        }
    }
}

/// Architectural hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_features: usize,
    pub input_len: usize,
    pub pred_len: usize,
    pub hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub sparse_factor: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_features: 12,
            input_len: 96,
            pred_len: 1,
            hidden: 64,
            d_model: 64,
            heads: 4,
            sparse_factor: 8,
            variant: Variant::Lgstime,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0
            || self.input_len == 0
            || self.pred_len == 0
            || self.hidden == 0
            || self.d_model == 0
            || self.heads == 0
        {
            return Err(Error::Validation(format!(
                "zero-width model config: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.variant == Variant::Lgstime && self.hidden != self.d_model {
            return Err(Error::Validation(format!(
                "the fused variant requires hidden == d_model, got {} and {}",
                self.hidden, self.d_model
            )));
        }
        Ok(())
    }

    pub fn out_width(&self) -> usize {
        self.pred_len * self.n_features
    }

    /// Width of the concatenated last-position summaries feeding the head.
    pub fn fusion_width(&self) -> usize {
        let v = self.variant;
        let mut w = 0;
        if v.uses_lstm() {
            w += self.hidden;
        }
        if v.uses_gru() {
            w += self.hidden;
        }
        if v.uses_attention() {
            w += self.d_model;
        }
        if matches!(v, Variant::Rnn | Variant::Cnn) {
            w += self.hidden;
        }
        w
    }
}

/// Dense map `1×in · (in×out) + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            w: Tensor::new(
                input,
                output,
                (0..input * output)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            ),
            b: Tensor::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Tensor::zeros(input, output),
            b: Tensor::zeros(1, output),
        }
    }

    pub fn count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

/// Single vanilla recurrent layer `h_t = tanh(W [h_{t-1}, x_t] + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl RnnParams {
    fn init(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        let cols = hidden + input;
        let bound = 1.0 / (cols as f64).sqrt();
        RnnParams {
            w: Tensor::new(
                hidden,
                cols,
                (0..hidden * cols)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            ),
            b: Tensor::zeros(1, hidden),
        }
    }

    fn zeros(hidden: usize, input: usize) -> Self {
        RnnParams {
            w: Tensor::zeros(hidden, hidden + input),
            b: Tensor::zeros(1, hidden),
        }
    }
}

/// Kernel-3 same-padded 1-D convolution over time, `3·channels → hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv1d {
    fn init(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let rows = 3 * channels;
        let bound = 1.0 / (rows as f64).sqrt();
        Conv1d {
            w: Tensor::new(
                rows,
                hidden,
                (0..rows * hidden)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            ),
            b: Tensor::zeros(1, hidden),
        }
    }

    fn zeros(channels: usize, hidden: usize) -> Self {
        Conv1d {
            w: Tensor::zeros(3 * channels, hidden),
            b: Tensor::zeros(1, hidden),
        }
    }
}

/// Every learnable tensor of one model instance. Streams not used by the
/// configured variant are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: Option<Linear>,
    pub lstm: Option<LstmParams>,
    pub gru: Option<GruParams>,
    pub attn: Option<AttentionParams>,
    pub rnn: Option<RnnParams>,
    pub conv: Option<Conv1d>,
    pub head: Linear,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let embed = v
            .uses_embed()
            .then(|| Linear::init(cfg.n_features, cfg.d_model, rng));
        let lstm = v
            .uses_lstm()
            .then(|| LstmParams::init(cfg.hidden, cfg.d_model, rng));
        let gru = v
            .uses_gru()
            .then(|| GruParams::init(cfg.hidden, cfg.d_model, rng));
        let attn = if v.uses_attention() {
            Some(AttentionParams::init(cfg.d_model, cfg.heads, rng)?)
        } else {
            None
        };
        let rnn = (v == Variant::Rnn).then(|| RnnParams::init(cfg.hidden, cfg.n_features, rng));
        let conv = (v == Variant::Cnn).then(|| Conv1d::init(cfg.n_features, cfg.hidden, rng));
        let head = Linear::init(cfg.fusion_width(), cfg.out_width(), rng);
        Ok(ModelParams {
            embed,
            lstm,
            gru,
            attn,
            rnn,
            conv,
            head,
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let attn = if v.uses_attention() {
            let mut p = AttentionParams::identity(cfg.d_model, cfg.heads)?;
            p.w_q = Tensor::zeros(cfg.d_model, cfg.d_model);
            p.w_k = Tensor::zeros(cfg.d_model, cfg.d_model);
            p.w_v = Tensor::zeros(cfg.d_model, cfg.d_model);
            p.w_o = Tensor::zeros(cfg.d_model, cfg.d_model);
            Some(p)
        } else {
            None
        };
        Ok(ModelParams {
            embed: v
                .uses_embed()
                .then(|| Linear::zeros(cfg.n_features, cfg.d_model)),
            lstm: v
                .uses_lstm()
                .then(|| LstmParams::zeros(cfg.hidden, cfg.d_model)),
            gru: v
                .uses_gru()
                .then(|| GruParams::zeros(cfg.hidden, cfg.d_model)),
            attn,
            rnn: (v == Variant::Rnn).then(|| RnnParams::zeros(cfg.hidden, cfg.n_features)),
            conv: (v == Variant::Cnn).then(|| Conv1d::zeros(cfg.n_features, cfg.hidden)),
            head: Linear::zeros(cfg.fusion_width(), cfg.out_width()),
        })
    }

    /// Visit every tensor with a stable dotted name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(e) = &self.embed {
            f("embed.w", &e.w);
            f("embed.b", &e.b);
        }
        if let Some(l) = &self.lstm {
            f("lstm.w_f", &l.w_f);
            f("lstm.w_i", &l.w_i);
            f("lstm.w_c", &l.w_c);
            f("lstm.w_o", &l.w_o);
            f("lstm.b_f", &l.b_f);
            f("lstm.b_i", &l.b_i);
            f("lstm.b_c", &l.b_c);
            f("lstm.b_o", &l.b_o);
        }
        if let Some(g) = &self.gru {
            f("gru.w_z", &g.w_z);
            f("gru.w_r", &g.w_r);
            f("gru.w_h", &g.w_h);
            f("gru.b_z", &g.b_z);
            f("gru.b_r", &g.b_r);
            f("gru.b_h", &g.b_h);
        }
        if let Some(a) = &self.attn {
            f("attn.w_q", &a.w_q);
            f("attn.w_k", &a.w_k);
            f("attn.w_v", &a.w_v);
            f("attn.w_o", &a.w_o);
        }
        if let Some(r) = &self.rnn {
            f("rnn.w", &r.w);
            f("rnn.b", &r.b);
        }
        if let Some(c) = &self.conv {
            f("conv.w", &c.w);
            f("conv.b", &c.b);
        }
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(e) = &mut self.embed {
            f("embed.w", &mut e.w);
            f("embed.b", &mut e.b);
        }
        if let Some(l) = &mut self.lstm {
            f("lstm.w_f", &mut l.w_f);
            f("lstm.w_i", &mut l.w_i);
            f("lstm.w_c", &mut l.w_c);
            f("lstm.w_o", &mut l.w_o);
            f("lstm.b_f", &mut l.b_f);
            f("lstm.b_i", &mut l.b_i);
            f("lstm.b_c", &mut l.b_c);
            f("lstm.b_o", &mut l.b_o);
        }
        if let Some(g) = &mut self.gru {
            f("gru.w_z", &mut g.w_z);
            f("gru.w_r", &mut g.w_r);
            f("gru.w_h", &mut g.w_h);
            f("gru.b_z", &mut g.b_z);
            f("gru.b_r", &mut g.b_r);
            f("gru.b_h", &mut g.b_h);
        }
        if let Some(a) = &mut self.attn {
            f("attn.w_q", &mut a.w_q);
            f("attn.w_k", &mut a.w_k);
            f("attn.w_v", &mut a.w_v);
            f("attn.w_o", &mut a.w_o);
        }
        if let Some(r) = &mut self.rnn {
            f("rnn.w", &mut r.w);
            f("rnn.b", &mut r.b);
        }
        if let Some(c) = &mut self.conv {
            f("conv.w", &mut c.w);
            f("conv.b", &mut c.b);
        }
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    /// Exact count of scalar trainables.
    pub fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Rebuild a parameter set for `cfg` from named tensors; every expected
    /// name must be present with the right shape, and nothing extra.
    pub fn from_named(cfg: &ModelConfig, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut named = named.clone();
        let mut params = ModelParams::zeros(cfg)?;
        let mut problems = Vec::new();
        params.visit_mut(&mut |name, tensor| match named.remove(name) {
            Some(loaded) if loaded.shape() == tensor.shape() => *tensor = loaded,
            Some(loaded) => problems.push(format!(
                "{name}: shape {:?} vs expected {:?}",
                loaded.shape(),
                tensor.shape()
            )),
            None => problems.push(format!("{name}: absent")),
        });
        if !named.is_empty() {
            problems.push(format!(
                "unexpected: {:?}",
                named.keys().collect::<Vec<_>>()
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(format!(
                "bad parameter set: {problems:?}"
            )));
        }
        Ok(params)
    }
}

struct LinearVars {
    w: Var,
    b: Var,
}

fn bind_linear(tape: &mut Tape, l: &Linear) -> LinearVars {
    LinearVars {
        w: tape.param(l.w.clone()),
        b: tape.param(l.b.clone()),
    }
}

/// One model bound onto a tape: parameter leaves plus the name → leaf map
/// used to route gradients back to the optimizer.
pub struct ModelVars {
    embed: Option<LinearVars>,
    lstm: Option<LstmVars>,
    gru: Option<GruVars>,
    attn: Option<AttentionVars>,
    rnn: Option<LinearVars>,
    conv: Option<LinearVars>,
    head: LinearVars,
    names: BTreeMap<String, Var>,
}

impl ModelVars {
    pub fn leaves(&self) -> &BTreeMap<String, Var> {
        &self.names
    }
}

pub fn bind_model(tape: &mut Tape, params: &ModelParams) -> ModelVars {
    let embed = params.embed.as_ref().map(|e| bind_linear(tape, e));
    let lstm = params.lstm.as_ref().map(|l| l.bind(tape));
    let gru = params.gru.as_ref().map(|g| g.bind(tape));
    let attn = params.attn.as_ref().map(|a| a.bind(tape));
    let rnn = params.rnn.as_ref().map(|r| {
        bind_linear(
            tape,
            &Linear {
                w: r.w.clone(),
                b: r.b.clone(),
            },
        )
    });
    let conv = params.conv.as_ref().map(|c| {
        bind_linear(
            tape,
            &Linear {
                w: c.w.clone(),
                b: c.b.clone(),
            },
        )
    });
    let head = bind_linear(tape, &params.head);

    let mut names = BTreeMap::new();
    if let Some(e) = &embed {
        names.insert("embed.w".into(), e.w);
        names.insert("embed.b".into(), e.b);
    }
    if let Some(l) = &lstm {
        names.insert("lstm.w_f".into(), l.w_f);
        names.insert("lstm.w_i".into(), l.w_i);
        names.insert("lstm.w_c".into(), l.w_c);
        names.insert("lstm.w_o".into(), l.w_o);
        names.insert("lstm.b_f".into(), l.b_f);
        names.insert("lstm.b_i".into(), l.b_i);
        names.insert("lstm.b_c".into(), l.b_c);
        names.insert("lstm.b_o".into(), l.b_o);
    }
    if let Some(g) = &gru {
        names.insert("gru.w_z".into(), g.w_z);
        names.insert("gru.w_r".into(), g.w_r);
        names.insert("gru.w_h".into(), g.w_h);
        names.insert("gru.b_z".into(), g.b_z);
        names.insert("gru.b_r".into(), g.b_r);
        names.insert("gru.b_h".into(), g.b_h);
    }
    if let Some(a) = &attn {
        names.insert("attn.w_q".into(), a.w_q);
        names.insert("attn.w_k".into(), a.w_k);
        names.insert("attn.w_v".into(), a.w_v);
        names.insert("attn.w_o".into(), a.w_o);
    }
    if let Some(r) = &rnn {
        names.insert("rnn.w".into(), r.w);
        names.insert("rnn.b".into(), r.b);
    }
    if let Some(c) = &conv {
        names.insert("conv.w".into(), c.w);
        names.insert("conv.b".into(), c.b);
    }
    names.insert("head.w".into(), head.w);
    names.insert("head.b".into(), head.b);

    ModelVars {
        embed,
        lstm,
        gru,
        attn,
        rnn,
        conv,
        head,
        names,
    }
}

pub struct ForwardTrace {
    /// `pred_len × n_features` forecast.
    pub pred: Var,
    /// Concatenated last-position summaries before the head.
    pub fusion: Var,
    /// CNN baseline only: per-position conv activations, `input_len × hidden`.
    pub conv_rows: Option<Var>,
}

/// Forward pass for a window already bound as `x` on the tape.
pub fn forward_bound(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    x: Var,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    let got = tape.value(x).shape();
    if got != vec![cfg.input_len, cfg.n_features] {
        return Err(Error::Dimension {
            op: "forward",
            lhs: got,
            rhs: vec![cfg.input_len, cfg.n_features],
        });
    }
    let n = cfg.input_len;

    let mut summaries: Vec<Var> = Vec::new();
    let mut conv_rows = None;

    if cfg.variant.uses_embed() {
        let e = vars.embed.as_ref().expect("embed params");
        let projected = tape.matmul(x, e.w)?;
        let embedded = tape.add_bias_row(projected, e.b)?;
        let step_inputs: Vec<Var> = (0..n)
            .map(|t| tape.slice_rows(embedded, t, t + 1))
            .collect::<Result<_>>()?;

        if let Some(lstm) = &vars.lstm {
            let h0 = tape.leaf(Tensor::zeros(1, cfg.hidden));
            let c0 = tape.leaf(Tensor::zeros(1, cfg.hidden));
            let steps = cells::lstm_forward(tape, lstm, &step_inputs, h0, c0)?;
            summaries.push(steps.last().unwrap().hidden);
        }
        if let Some(gru) = &vars.gru {
            let h0 = tape.leaf(Tensor::zeros(1, cfg.hidden));
            let steps = cells::gru_forward(tape, gru, &step_inputs, h0)?;
            summaries.push(steps.last().unwrap().hidden);
        }
        if let Some(attn) = &vars.attn {
            let trace = attention::multi_head_forward(tape, attn, embedded, cfg.sparse_factor)?;
            let last = tape.slice_rows(trace.output, n - 1, n)?;
            summaries.push(last);
        }
    }

    if let Some(rnn) = &vars.rnn {
        let wt = tape.transpose(rnn.w);
        let mut h = tape.leaf(Tensor::zeros(1, cfg.hidden));
        for t in 0..n {
            let xt = tape.slice_rows(x, t, t + 1)?;
            let hx = tape.concat_cols(&[h, xt])?;
            let z = tape.matmul(hx, wt)?;
            let zb = tape.add_bias_row(z, rnn.b)?;
            h = tape.tanh(zb);
        }
        summaries.push(h);
    }

    if let Some(conv) = &vars.conv {
        let zero_row = tape.leaf(Tensor::zeros(1, cfg.n_features));
        let mut rows = Vec::with_capacity(n);
        for t in 0..n {
            let prev = if t == 0 {
                zero_row
            } else {
                tape.slice_rows(x, t - 1, t)?
            };
            let here = tape.slice_rows(x, t, t + 1)?;
            let next = if t + 1 == n {
                zero_row
            } else {
                tape.slice_rows(x, t + 1, t + 2)?
            };
            let window = tape.concat_cols(&[prev, here, next])?;
            let z = tape.matmul(window, conv.w)?;
            let zb = tape.add_bias_row(z, conv.b)?;
            rows.push(tape.tanh(zb));
        }
        let stacked = tape.concat_rows(&rows)?;
        conv_rows = Some(stacked);
        // global average over time
        let ones = tape.leaf(Tensor::new(1, n, vec![1.0; n]));
        let summed = tape.matmul(ones, stacked)?;
        summaries.push(tape.scale(summed, 1.0 / n as f64));
    }

    if summaries.is_empty() {
        return Err(Error::Validation(format!(
            "variant {} has no streams",
            cfg.variant
        )));
    }
    let fusion = if summaries.len() == 1 {
        summaries[0]
    } else {
        tape.concat_cols(&summaries)?
    };
    let projected = tape.matmul(fusion, vars.head.w)?;
    let flat = tape.add_bias_row(projected, vars.head.b)?;

    // reshape 1×(pred_len·F) to pred_len×F
    let pred = if cfg.pred_len == 1 {
        flat
    } else {
        let mut rows = Vec::with_capacity(cfg.pred_len);
        for p in 0..cfg.pred_len {
            rows.push(tape.slice_cols(flat, p * cfg.n_features, (p + 1) * cfg.n_features)?);
        }
        tape.concat_rows(&rows)?
    };
    Ok(ForwardTrace {
        pred,
        fusion,
        conv_rows,
    })
}

/// Bind, forward, and return the forecast values for one window.
pub fn forward_values(params: &ModelParams, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind_model(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let trace = forward_bound(&mut tape, &vars, cfg, xv)?;
    Ok(tape.value(trace.pred).clone())
}

// ---------------------------------------------------------------------------
// Checkpoints: config echo + named tensors, raw little-endian doubles.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"LGTSCKP1";

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
    buf.extend_from_slice(&(cfg_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    let named = params.named_tensors();
    buf.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, tensor) in &named {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::format(path, "truncated checkpoint"));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let take_u64 = |at: &mut usize| -> Result<u64> {
        let s = take(at, 8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    };

    if take(&mut at, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let cfg_len = take_u64(&mut at)? as usize;
    let cfg: ModelConfig = serde_json::from_slice(take(&mut at, cfg_len)?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let n_tensors = take_u64(&mut at)? as usize;
    let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = take_u64(&mut at)? as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|e| Error::format(path, e.to_string()))?;
        let rows = take_u64(&mut at)? as usize;
        let cols = take_u64(&mut at)? as usize;
        let raw = take(&mut at, rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.insert(name, Tensor::new(rows, cols, data));
    }

    let params =
        ModelParams::from_named(&cfg, &named).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul_raw;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_cfg(variant: Variant) -> ModelConfig {
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

    fn rand_window(rng: &mut impl Rng, cfg: &ModelConfig) -> Tensor {
        Tensor::new(
            cfg.input_len,
            cfg.n_features,
            (0..cfg.input_len * cfg.n_features)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn zero_params_give_zero_output_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for variant in Variant::ALL {
            let cfg = desk_cfg(variant);
            let params = ModelParams::zeros(&cfg).unwrap();
            let x = rand_window(&mut rng, &cfg);
            let out = forward_values(&params, &cfg, &x).unwrap();
            assert!(
                out.data().iter().all(|&v| v == 0.0),
                "variant {variant} not zero"
            );
        }
    }

    #[test]
    fn lstm_variant_equals_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = desk_cfg(Variant::Lstm);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let x = rand_window(&mut rng, &cfg);
        let model_out = forward_values(&params, &cfg, &x).unwrap();

        // embed by hand
        let embed = params.embed.as_ref().unwrap();
        let projected = matmul_raw(&x, &embed.w);
        let mut rows = Vec::new();
        for i in 0..cfg.input_len {
            let row: Vec<f64> = (0..cfg.d_model)
                .map(|j| projected.at(i, j) + embed.b.data()[j])
                .collect();
            rows.push(Tensor::row(&row));
        }
        let states = cells::lstm_forward_values(
            params.lstm.as_ref().unwrap(),
            &rows,
            &cells::LstmState::zeros(cfg.hidden),
        )
        .unwrap();
        let last = &states.last().unwrap().h;
        let head_out = matmul_raw(last, &params.head.w);
        let expect: Vec<f64> = head_out
            .data()
            .iter()
            .zip(params.head.b.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(model_out.data(), expect.as_slice());
    }

    #[test]
    fn ablation_nesting_lstm_inside_lstm_gru() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg_pair = desk_cfg(Variant::LstmGru);
        let pair = ModelParams::init(&cfg_pair, &mut rng).unwrap();
        let x = rand_window(&mut rng, &cfg_pair);

        // zero the head rows that read the GRU summary
        let mut gated = pair.clone();
        for r in cfg_pair.hidden..2 * cfg_pair.hidden {
            for c in 0..cfg_pair.out_width() {
                let cols = gated.head.w.cols();
                gated.head.w.data_mut()[r * cols + c] = 0.0;
            }
        }
        let gated_out = forward_values(&gated, &cfg_pair, &x).unwrap();

        // the lstm variant with the surviving rows must agree
        let cfg_single = desk_cfg(Variant::Lstm);
        let mut single = ModelParams::init(&cfg_single, &mut rng).unwrap();
        single.embed = pair.embed.clone();
        single.lstm = pair.lstm.clone();
        single.head.b = pair.head.b.clone();
        let cols = pair.head.w.cols();
        let surviving: Vec<f64> = pair.head.w.data()[..cfg_pair.hidden * cols].to_vec();
        single.head.w = Tensor::new(cfg_pair.hidden, cols, surviving);
        let single_out = forward_values(&single, &cfg_single, &x).unwrap();

        for (a, b) in gated_out.data().iter().zip(single_out.data().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn horizon_shape_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for variant in Variant::ALL {
            let mut cfg = desk_cfg(variant);
            cfg.pred_len = 3;
            let params = ModelParams::init(&cfg, &mut rng).unwrap();
            let x = rand_window(&mut rng, &cfg);
            let out = forward_values(&params, &cfg, &x).unwrap();
            assert_eq!(out.shape(), vec![3, cfg.n_features], "variant {variant}");
            assert!(out.is_finite(), "variant {variant}");
        }
    }

    #[test]
    fn rnn_zero_params_zero_output() {
        let cfg = desk_cfg(Variant::Rnn);
        let params = ModelParams::zeros(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_window(&mut rng, &cfg);
        let out = forward_values(&params, &cfg, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_constant_input_constant_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = desk_cfg(Variant::Cnn);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let row: Vec<f64> = (0..cfg.n_features)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = Tensor::from_rows(&vec![row; cfg.input_len]);

        let mut tape = Tape::new();
        let vars = bind_model(&mut tape, &params);
        let xv = tape.leaf(x);
        let trace = forward_bound(&mut tape, &vars, &cfg, xv).unwrap();
        let conv = tape.value(trace.conv_rows.unwrap()).clone();
        // interior rows all see the same 3-row window
        for t in 2..cfg.input_len - 1 {
            for j in 0..cfg.hidden {
                assert_eq!(conv.at(t, j), conv.at(1, j), "row {t} col {j}");
            }
        }
    }

    #[test]
    fn input_extent_mismatch_rejected() {
        let cfg = desk_cfg(Variant::Lstm);
        let params = ModelParams::zeros(&cfg).unwrap();
        let x = Tensor::zeros(cfg.input_len, cfg.n_features + 1);
        assert!(forward_values(&params, &cfg, &x).is_err());
    }

    #[test]
    fn linear_parameter_count() {
        let l = Linear::zeros(2, 3);
        assert_eq!(l.count(), 9);
    }

    #[test]
    fn parameter_count_nesting_and_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut count = |v: Variant| {
            ModelParams::init(&desk_cfg(v), &mut rng)
                .unwrap()
                .count_parameters()
        };
        let lstm = count(Variant::Lstm);
        let pair = count(Variant::LstmGru);
        let full = count(Variant::Lgstime);
        assert!(lstm < pair && pair < full);

        // full minus pair = attention params + the extra head rows
        let cfg = desk_cfg(Variant::Lgstime);
        let attn_params = 4 * cfg.d_model * cfg.d_model;
        let head_delta = cfg.d_model * cfg.out_width();
        assert_eq!(full - pair, attn_params + head_delta);
    }

    #[test]
    fn zero_width_config_rejected() {
        let mut cfg = desk_cfg(Variant::Lstm);
        cfg.hidden = 0;
        assert!(cfg.validate().is_err());
        assert!(ModelParams::zeros(&cfg).is_err());

        let mut cfg = desk_cfg(Variant::Lgstime);
        cfg.hidden = 4; // fused variant needs hidden == d_model
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn no_stream_is_dead_at_desk_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = desk_cfg(Variant::Lgstime);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut max_abs: BTreeMap<String, f64> = params
            .named_tensors()
            .keys()
            .map(|k| (k.clone(), 0.0))
            .collect();
        for _ in 0..16 {
            let x = rand_window(&mut rng, &cfg);
            let y = Tensor::new(
                cfg.pred_len,
                cfg.n_features,
                (0..cfg.out_width())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
            let mut tape = Tape::new();
            let vars = bind_model(&mut tape, &params);
            let xv = tape.leaf(x);
            let trace = forward_bound(&mut tape, &vars, &cfg, xv).unwrap();
            let yv = tape.leaf(y);
            let diff = tape.sub(trace.pred, yv).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss).unwrap();
            for (name, var) in vars.leaves() {
                let peak = grads
                    .wrt_data(*var)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                let slot = max_abs.get_mut(name).unwrap();
                *slot = slot.max(peak);
            }
        }
        for (name, peak) in max_abs {
            assert!(peak > 0.0, "parameter {name} never received gradient");
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let report = crate::check::model_grad_report(31, Variant::Lgstime);
        assert!(
            report.within(1e-4),
            "worst {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn rnn_gradients_match_finite_differences() {
        let report = crate::check::model_grad_report(32, Variant::Rnn);
        assert!(report.within(1e-4), "worst {}", report.max_rel_err);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = desk_cfg(Variant::Lgstime);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);

        // write → read → write is byte-identical
        let first = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &cfg2, &params2).unwrap();
        assert_eq!(first, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn variant_strings_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("mamba".parse::<Variant>().is_err());
    }
}

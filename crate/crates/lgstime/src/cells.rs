//! LSTM and GRU cells with sequence unrolling.
//!
//! Both cells act on row-vector states and store each gate's weight matrix
//! as `hidden × (hidden + input)`, applied to the concatenation
//! `[h_{t-1}, x_t]`. A step records every intermediate gate on the tape so
//! tests can inspect them individually.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

fn uniform_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
}

/// Forget / input / candidate / output gate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_c: Tensor,
    pub w_o: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

impl LstmParams {
    /// Weights uniform in ±1/√(hidden+input), biases zero.
    pub fn init(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        let cols = hidden + input;
        LstmParams {
            w_f: uniform_init(hidden, cols, rng),
            w_i: uniform_init(hidden, cols, rng),
            w_c: uniform_init(hidden, cols, rng),
            w_o: uniform_init(hidden, cols, rng),
            b_f: Tensor::zeros(1, hidden),
            b_i: Tensor::zeros(1, hidden),
            b_c: Tensor::zeros(1, hidden),
            b_o: Tensor::zeros(1, hidden),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        LstmParams {
            w_f: Tensor::zeros(hidden, hidden + input),
            w_i: Tensor::zeros(hidden, hidden + input),
            w_c: Tensor::zeros(hidden, hidden + input),
            w_o: Tensor::zeros(hidden, hidden + input),
            b_f: Tensor::zeros(1, hidden),
            b_i: Tensor::zeros(1, hidden),
            b_c: Tensor::zeros(1, hidden),
            b_o: Tensor::zeros(1, hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_f.rows()
    }

    pub fn input_size(&self) -> usize {
        self.w_f.cols() - self.w_f.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        let w_f = tape.param(self.w_f.clone());
        let w_i = tape.param(self.w_i.clone());
        let w_c = tape.param(self.w_c.clone());
        let w_o = tape.param(self.w_o.clone());
        LstmVars {
            w_f,
            w_i,
            w_c,
            w_o,
            b_f: tape.param(self.b_f.clone()),
            b_i: tape.param(self.b_i.clone()),
            b_c: tape.param(self.b_c.clone()),
            b_o: tape.param(self.b_o.clone()),
            wt_f: tape.transpose(w_f),
            wt_i: tape.transpose(w_i),
            wt_c: tape.transpose(w_c),
            wt_o: tape.transpose(w_o),
        }
    }
}

/// Tape handles for one bound [`LstmParams`]; the `wt_*` nodes are the
/// transposed weights shared by every step of a pass.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_f: Var,
    pub w_i: Var,
    pub w_c: Var,
    pub w_o: Var,
    pub b_f: Var,
    pub b_i: Var,
    pub b_c: Var,
    pub b_o: Var,
    wt_f: Var,
    wt_i: Var,
    wt_c: Var,
    wt_o: Var,
}

/// Hidden and cell rows carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(1, hidden),
            c: Tensor::zeros(1, hidden),
        }
    }
}

/// Every intermediate of one LSTM step, in the order they are computed.
#[derive(Debug, Clone, Copy)]
pub struct LstmStepVars {
    pub forget: Var,
    pub input_gate: Var,
    pub candidate: Var,
    pub cell: Var,
    pub output_gate: Var,
    pub hidden: Var,
}

fn gate_preact(tape: &mut Tape, hx: Var, wt: Var, bias: Var) -> Result<Var> {
    let prod = tape.matmul(hx, wt)?;
    tape.add_bias_row(prod, bias)
}

/// One LSTM step: forget and input gates, candidate, cell update, output
/// gate, hidden output.
pub fn lstm_step(
    tape: &mut Tape,
    vars: &LstmVars,
    h_prev: Var,
    c_prev: Var,
    x: Var,
) -> Result<LstmStepVars> {
    let hidden = tape.value(vars.wt_f).cols();
    let input = tape.value(vars.wt_f).rows() - hidden;
    if tape.value(x).cols() != input || tape.value(h_prev).cols() != hidden {
        return Err(Error::Dimension {
            op: "lstm_step",
            lhs: tape.value(x).shape(),
            rhs: vec![1, input],
        });
    }
    let hx = tape.concat_cols(&[h_prev, x])?;
    let forget = {
        let z = gate_preact(tape, hx, vars.wt_f, vars.b_f)?;
        tape.sigmoid(z)
    };
    let input_gate = {
        let z = gate_preact(tape, hx, vars.wt_i, vars.b_i)?;
        tape.sigmoid(z)
    };
    let candidate = {
        let z = gate_preact(tape, hx, vars.wt_c, vars.b_c)?;
        tape.tanh(z)
    };
    let cell = {
        let keep = tape.mul(forget, c_prev)?;
        let write = tape.mul(input_gate, candidate)?;
        tape.add(keep, write)?
    };
    let output_gate = {
        let z = gate_preact(tape, hx, vars.wt_o, vars.b_o)?;
        tape.sigmoid(z)
    };
    let hidden = {
        let ct = tape.tanh(cell);
        tape.mul(output_gate, ct)?
    };
    Ok(LstmStepVars {
        forget,
        input_gate,
        candidate,
        cell,
        output_gate,
        hidden,
    })
}

/// Unroll over a sequence, threading state through time.
pub fn lstm_forward(
    tape: &mut Tape,
    vars: &LstmVars,
    xs: &[Var],
    h0: Var,
    c0: Var,
) -> Result<Vec<LstmStepVars>> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("lstm_forward"));
    }
    let mut out = Vec::with_capacity(xs.len());
    let (mut h, mut c) = (h0, c0);
    for &x in xs {
        let step = lstm_step(tape, vars, h, c, x)?;
        h = step.hidden;
        c = step.cell;
        out.push(step);
    }
    Ok(out)
}

/// Update / reset / candidate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn init(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        let cols = hidden + input;
        GruParams {
            w_z: uniform_init(hidden, cols, rng),
            w_r: uniform_init(hidden, cols, rng),
            w_h: uniform_init(hidden, cols, rng),
            b_z: Tensor::zeros(1, hidden),
            b_r: Tensor::zeros(1, hidden),
            b_h: Tensor::zeros(1, hidden),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros(hidden, hidden + input),
            w_r: Tensor::zeros(hidden, hidden + input),
            w_h: Tensor::zeros(hidden, hidden + input),
            b_z: Tensor::zeros(1, hidden),
            b_r: Tensor::zeros(1, hidden),
            b_h: Tensor::zeros(1, hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.rows()
    }

    pub fn input_size(&self) -> usize {
        self.w_z.cols() - self.w_z.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> GruVars {
        let w_z = tape.param(self.w_z.clone());
        let w_r = tape.param(self.w_r.clone());
        let w_h = tape.param(self.w_h.clone());
        GruVars {
            w_z,
            w_r,
            w_h,
            b_z: tape.param(self.b_z.clone()),
            b_r: tape.param(self.b_r.clone()),
            b_h: tape.param(self.b_h.clone()),
            wt_z: tape.transpose(w_z),
            wt_r: tape.transpose(w_r),
            wt_h: tape.transpose(w_h),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
    wt_z: Var,
    wt_r: Var,
    wt_h: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruState {
    pub h: Tensor,
}

impl GruState {
    pub fn zeros(hidden: usize) -> Self {
        GruState {
            h: Tensor::zeros(1, hidden),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruStepVars {
    pub update: Var,
    pub reset: Var,
    pub candidate: Var,
    pub hidden: Var,
}

/// One GRU step. The reset gate multiplies `h_{t-1}` before the candidate's
/// concatenation, and the new state is the update-gated convex combination
/// `(1 - z) ⊙ h_{t-1} + z ⊙ h̃`.
pub fn gru_step(tape: &mut Tape, vars: &GruVars, h_prev: Var, x: Var) -> Result<GruStepVars> {
    let hidden = tape.value(vars.wt_z).cols();
    let input = tape.value(vars.wt_z).rows() - hidden;
    if tape.value(x).cols() != input || tape.value(h_prev).cols() != hidden {
        return Err(Error::Dimension {
            op: "gru_step",
            lhs: tape.value(x).shape(),
            rhs: vec![1, input],
        });
    }
    let hx = tape.concat_cols(&[h_prev, x])?;
    let update = {
        let z = gate_preact(tape, hx, vars.wt_z, vars.b_z)?;
        tape.sigmoid(z)
    };
    let reset = {
        let z = gate_preact(tape, hx, vars.wt_r, vars.b_r)?;
        tape.sigmoid(z)
    };
    let candidate = {
        let rh = tape.mul(reset, h_prev)?;
        let rhx = tape.concat_cols(&[rh, x])?;
        let z = gate_preact(tape, rhx, vars.wt_h, vars.b_h)?;
        tape.tanh(z)
    };
    let hidden = {
        let hid = tape.value(h_prev).cols();
        let ones = tape.leaf(Tensor::new(1, hid, vec![1.0; hid]));
        let one_minus_z = tape.sub(ones, update)?;
        let retain = tape.mul(one_minus_z, h_prev)?;
        let write = tape.mul(update, candidate)?;
        tape.add(retain, write)?
    };
    Ok(GruStepVars {
        update,
        reset,
        candidate,
        hidden,
    })
}

pub fn gru_forward(
    tape: &mut Tape,
    vars: &GruVars,
    xs: &[Var],
    h0: Var,
) -> Result<Vec<GruStepVars>> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("gru_forward"));
    }
    let mut out = Vec::with_capacity(xs.len());
    let mut h = h0;
    for &x in xs {
        let step = gru_step(tape, vars, h, x)?;
        h = step.hidden;
        out.push(step);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Plain-value wrappers; each builds a throwaway tape around the same code
// path as the in-graph functions.
// ---------------------------------------------------------------------------

/// Values of every intermediate of one step.
#[derive(Debug, Clone)]
pub struct LstmStepValues {
    pub forget: Tensor,
    pub input_gate: Tensor,
    pub candidate: Tensor,
    pub cell: Tensor,
    pub output_gate: Tensor,
    pub hidden: Tensor,
}

pub fn lstm_step_values(
    params: &LstmParams,
    state: &LstmState,
    x: &Tensor,
) -> Result<LstmStepValues> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h = tape.leaf(state.h.clone());
    let c = tape.leaf(state.c.clone());
    let xv = tape.leaf(x.clone());
    let step = lstm_step(&mut tape, &vars, h, c, xv)?;
    Ok(LstmStepValues {
        forget: tape.value(step.forget).clone(),
        input_gate: tape.value(step.input_gate).clone(),
        candidate: tape.value(step.candidate).clone(),
        cell: tape.value(step.cell).clone(),
        output_gate: tape.value(step.output_gate).clone(),
        hidden: tape.value(step.hidden).clone(),
    })
}

pub fn lstm_forward_values(
    params: &LstmParams,
    xs: &[Tensor],
    init: &LstmState,
) -> Result<Vec<LstmState>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h0 = tape.leaf(init.h.clone());
    let c0 = tape.leaf(init.c.clone());
    let xvs: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let steps = lstm_forward(&mut tape, &vars, &xvs, h0, c0)?;
    Ok(steps
        .iter()
        .map(|s| LstmState {
            h: tape.value(s.hidden).clone(),
            c: tape.value(s.cell).clone(),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct GruStepValues {
    pub update: Tensor,
    pub reset: Tensor,
    pub candidate: Tensor,
    pub hidden: Tensor,
}

pub fn gru_step_values(params: &GruParams, state: &GruState, x: &Tensor) -> Result<GruStepValues> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h = tape.leaf(state.h.clone());
    let xv = tape.leaf(x.clone());
    let step = gru_step(&mut tape, &vars, h, xv)?;
    Ok(GruStepValues {
        update: tape.value(step.update).clone(),
        reset: tape.value(step.reset).clone(),
        candidate: tape.value(step.candidate).clone(),
        hidden: tape.value(step.hidden).clone(),
    })
}

pub fn gru_forward_values(
    params: &GruParams,
    xs: &[Tensor],
    init: &GruState,
) -> Result<Vec<GruState>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h0 = tape.leaf(init.h.clone());
    let xvs: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let steps = gru_forward(&mut tape, &vars, &xvs, h0)?;
    Ok(steps
        .iter()
        .map(|s| GruState {
            h: tape.value(s.hidden).clone(),
        })
        .collect())
}

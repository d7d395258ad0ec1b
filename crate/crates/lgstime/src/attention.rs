//! Banded multi-head sparse self-attention.
//!
//! Scores are computed densely, masked to a band of radius `w` around the
//! diagonal, and row-softmaxed. One `d_model × d_model` projection per role
//! is split into `heads` contiguous column blocks; masking uses the
//! [`crate::tensor::MASK_VALUE`] constant so the adjoint stays NaN-free.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Q/K/V/output projections, all square `d_model × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::check_dims(d_model, heads)?;
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut mk = |_: ()| {
            Tensor::new(
                d_model,
                d_model,
                (0..d_model * d_model)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            )
        };
        Ok(AttentionParams {
            w_q: mk(()),
            w_k: mk(()),
            w_v: mk(()),
            w_o: mk(()),
            heads,
        })
    }

    pub fn identity(d_model: usize, heads: usize) -> Result<Self> {
        Self::check_dims(d_model, heads)?;
        Ok(AttentionParams {
            w_q: Tensor::identity(d_model),
            w_k: Tensor::identity(d_model),
            w_v: Tensor::identity(d_model),
            w_o: Tensor::identity(d_model),
            heads,
        })
    }

    fn check_dims(d_model: usize, heads: usize) -> Result<()> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Validation(format!(
                "d_model {d_model} must be divisible by head count {heads}"
            )));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            w_o: tape.param(self.w_o.clone()),
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

/// Binary band mask: entry `(j, k)` is kept iff `|j - k| <= w`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMask {
    n: usize,
    w: usize,
    keep: Vec<bool>,
}

impl BandMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> usize {
        self.w
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, j: usize, k: usize) -> bool {
        self.keep[j * self.n + k]
    }

    pub fn ones_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Build the band mask of radius `w` for sequence length `n`; `w >= n - 1`
/// yields the all-ones matrix.
pub fn build_band_mask(n: usize, w: usize) -> BandMask {
    assert!(n >= 1, "band mask needs n >= 1");
    let mut keep = vec![false; n * n];
    for j in 0..n {
        for k in 0..n {
            keep[j * n + k] = j.abs_diff(k) <= w;
        }
    }
    BandMask { n, w, keep }
}

pub struct Qkv {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// `Q = X W_Q`, `K = X W_K`, `V = X W_V`.
pub fn project_qkv(tape: &mut Tape, vars: &AttentionVars, x: Var) -> Result<Qkv> {
    let d_model = tape.value(vars.w_q).rows();
    if tape.value(x).cols() != d_model {
        return Err(Error::Dimension {
            op: "project_qkv",
            lhs: tape.value(x).shape(),
            rhs: tape.value(vars.w_q).shape(),
        });
    }
    Ok(Qkv {
        q: tape.matmul(x, vars.w_q)?,
        k: tape.matmul(x, vars.w_k)?,
        v: tape.matmul(x, vars.w_v)?,
    })
}

/// Head `i` is the contiguous column block `[i*d_h, (i+1)*d_h)`.
pub fn split_heads(tape: &mut Tape, m: Var, heads: usize) -> Result<Vec<Var>> {
    let cols = tape.value(m).cols();
    if heads == 0 || !cols.is_multiple_of(heads) {
        return Err(Error::Dimension {
            op: "split_heads",
            lhs: tape.value(m).shape(),
            rhs: vec![heads],
        });
    }
    let dh = cols / heads;
    (0..heads)
        .map(|i| tape.slice_cols(m, i * dh, (i + 1) * dh))
        .collect()
}

/// `S_i = Q_i K_i^T / sqrt(d_h)`.
pub fn attention_scores(tape: &mut Tape, q_i: Var, k_i: Var) -> Result<Var> {
    let dh = tape.value(q_i).cols();
    if tape.value(k_i).cols() != dh {
        return Err(Error::Dimension {
            op: "attention_scores",
            lhs: tape.value(q_i).shape(),
            rhs: tape.value(k_i).shape(),
        });
    }
    let kt = tape.transpose(k_i);
    let s = tape.matmul(q_i, kt)?;
    Ok(tape.scale(s, 1.0 / (dh as f64).sqrt()))
}

/// Mask scores to the band, then row-softmax. Masked weights underflow to
/// exactly zero; the band's unit diagonal guarantees no degenerate row.
pub fn masked_attention(tape: &mut Tape, scores: Var, mask: &BandMask) -> Result<Var> {
    let shape = tape.value(scores).shape();
    if shape != vec![mask.n(), mask.n()] {
        return Err(Error::Dimension {
            op: "masked_attention",
            lhs: shape,
            rhs: vec![mask.n(), mask.n()],
        });
    }
    let masked = tape.mask_fill(scores, mask.keep())?;
    tape.softmax_rows(masked)
}

pub struct HeadTrace {
    pub scores: Var,
    pub attn: Var,
    pub out: Var,
}

pub struct AttentionTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub heads: Vec<HeadTrace>,
    /// Pre-output-projection concat of the head outputs.
    pub concat: Var,
    pub output: Var,
}

/// Full banded multi-head pass: project, split, score, mask, weight the
/// values, concat the heads, project out.
pub fn multi_head_forward(
    tape: &mut Tape,
    vars: &AttentionVars,
    x: Var,
    w: usize,
) -> Result<AttentionTrace> {
    let qkv = project_qkv(tape, vars, x)?;
    let n = tape.value(x).rows();
    let mask = build_band_mask(n, w);
    let q_heads = split_heads(tape, qkv.q, vars.heads)?;
    let k_heads = split_heads(tape, qkv.k, vars.heads)?;
    let v_heads = split_heads(tape, qkv.v, vars.heads)?;
    let mut heads = Vec::with_capacity(vars.heads);
    let mut outs = Vec::with_capacity(vars.heads);
    for i in 0..vars.heads {
        let scores = attention_scores(tape, q_heads[i], k_heads[i])?;
        let attn = masked_attention(tape, scores, &mask)?;
        let out = tape.matmul(attn, v_heads[i])?;
        outs.push(out);
        heads.push(HeadTrace { scores, attn, out });
    }
    let concat = tape.concat_cols(&outs)?;
    let output = tape.matmul(concat, vars.w_o)?;
    Ok(AttentionTrace {
        q: qkv.q,
        k: qkv.k,
        v: qkv.v,
        heads,
        concat,
        output,
    })
}

/// Value-level wrapper around [`multi_head_forward`].
pub fn multi_head_forward_values(params: &AttentionParams, x: &Tensor, w: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let trace = multi_head_forward(&mut tape, &vars, xv, w)?;
    Ok(tape.value(trace.output).clone())
}

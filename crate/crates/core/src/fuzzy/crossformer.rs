//! Query-over-context interaction stack.
//!
//! The shared query attends over each sample's tokens (single head, scaled
//! dot product, pre-norm, no residual on this layer), then passes through the
//! self-attention / GELU feed-forward blocks with residual connections.

use crate::error::{shape_err, Result};
use crate::numeric::{Tape, Var};

use super::params::{Attention, CrossFormerParams, FeedForward, LayerNorm, SigmaMlp};

pub(crate) fn layer_norm(tape: &mut Tape, x: Var, p: &LayerNorm<Var>) -> Result<Var> {
    let n = tape.layer_norm_rows(x)?;
    let g = tape.mul_row(n, p.gain)?;
    tape.add_row(g, p.bias)
}

/// `softmax(q k^T / sqrt(d)) v` for one sample.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = tape.value(q).cols() as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt())?;
    let log_w = tape.log_softmax_rows(scores)?;
    let w = tape.exp(log_w)?;
    tape.matmul(w, v)
}

/// Attention of grouped queries over grouped keys; group `i` of the queries
/// only sees group `i` of the context.
fn grouped_attention(
    tape: &mut Tape,
    queries: Var,
    query_group: usize,
    context: Var,
    context_group: usize,
    p: &Attention<Var>,
    shared_queries: bool,
) -> Result<Var> {
    let q_all = tape.matmul(queries, p.wq)?;
    let k_all = tape.matmul(context, p.wk)?;
    let v_all = tape.matmul(context, p.wv)?;
    let groups = tape.value(context).rows() / context_group;
    let mut outs = Vec::with_capacity(groups);
    for i in 0..groups {
        let q = if shared_queries {
            q_all
        } else {
            tape.slice_rows(q_all, i * query_group, query_group)?
        };
        let k = tape.slice_rows(k_all, i * context_group, context_group)?;
        let v = tape.slice_rows(v_all, i * context_group, context_group)?;
        outs.push(attend(tape, q, k, v)?);
    }
    let stacked = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_rows(outs)?
    };
    tape.matmul(stacked, p.wo)
}

fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForward<Var>) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, p.w2)?;
    tape.add_row(o, p.b2)
}

/// Runs the stack for every sample of `context` (`B*N x D`, `N` rows per
/// sample). Returns `B*K x D` with sample `i`'s queries in rows `i*K..`.
pub fn crossformer_on_tape(
    tape: &mut Tape,
    query: Var,
    context: Var,
    tokens_per_sample: usize,
    params: &CrossFormerParams<Var>,
) -> Result<Var> {
    let (k, d) = tape.value(query).shape();
    let (rows, cd) = tape.value(context).shape();
    if tokens_per_sample == 0 || rows == 0 || rows % tokens_per_sample != 0 || cd != d {
        return Err(shape_err(
            "crossformer",
            format!("query {k}x{d}, context {rows}x{cd}, {tokens_per_sample} tokens per sample"),
        ));
    }
    if tape.value(params.cross.wq).shape() != (d, d) {
        return Err(shape_err(
            "crossformer",
            "projection width differs from token width",
        ));
    }

    let q = layer_norm(tape, query, &params.norm_query)?;
    let c = layer_norm(tape, context, &params.norm_context)?;
    let mut x = grouped_attention(tape, q, k, c, tokens_per_sample, &params.cross, true)?;

    for block in &params.blocks {
        let h = layer_norm(tape, x, &block.norm_attn)?;
        let a = grouped_attention(tape, h, k, h, k, &block.attn, false)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, x, &block.norm_ffn)?;
        let f = feed_forward(tape, h, &block.ffn)?;
        x = tape.add(x, f)?;
    }
    Ok(x)
}

/// Log-scale per row of `class_tokens` (`B x D` -> `B x 1`).
pub fn log_sigma_on_tape(tape: &mut Tape, class_tokens: Var, mlp: &SigmaMlp<Var>) -> Result<Var> {
    let h = tape.matmul(class_tokens, mlp.w1)?;
    let h = tape.add_row(h, mlp.b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, mlp.w2)?;
    tape.add_row(o, mlp.b2)
}

//! Plain (untraced) forward pass and the logit lens.
//!
//! This path shares every kernel with the traced forward in `traced.rs`
//! and applies them in the same order, so traced and untraced logits agree
//! bit for bit (there is a test pinning that).

use super::{ModelState, TokenId};
use crate::error::{Error, Result};
use crate::numcore::{
    gelu_scalar, layer_norm_forward, row_softmax_forward, softmax_unchecked, Matrix,
};

/// Additive mask for attention scores above the diagonal. Large enough to
/// underflow to exactly zero after softmax's max-subtraction.
pub(crate) const CAUSAL_MASK: f64 = -1e30;

/// Residual-stream snapshots and MLP key activations captured during one
/// forward pass.
///
/// `states[l]` is the residual state at the final input position for lens
/// layer `l` (layer 0 = embedding output, layer `b + 1` = after block `b`),
/// so there are `n_layers + 1` states. `mlp_keys[b]` holds block `b`'s MLP
/// activations (the inputs to `w_out`) at every position.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub states: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub mlp_keys: Vec<Matrix>,
}

/// A vocabulary distribution read off an intermediate layer.
#[derive(Clone, Debug)]
pub struct LensDistribution {
    pub layer: usize,
    pub probs: Vec<f64>,
}

impl LensDistribution {
    /// Token ids of the `k` highest-probability entries, ties broken by
    /// ascending token id.
    pub fn top_k(&self, k: usize) -> Vec<TokenId> {
        top_k_indices(&self.probs, k)
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

/// Indices of the `k` largest values, ties broken by ascending index.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<TokenId> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.into_iter().map(|i| i as TokenId).collect()
}

struct ForwardOutput {
    full_logits: Matrix,
    trace: Option<ForwardTrace>,
}

fn run_forward(model: &ModelState, tokens: &[TokenId], capture: bool) -> Result<ForwardOutput> {
    model.validate_tokens(tokens)?;
    let cfg = &model.config;
    let t = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();

    let mut x = Matrix::zeros(t, d);
    for (r, &tok) in tokens.iter().enumerate() {
        let emb = model.token_emb.row(tok as usize);
        let pos = model.pos_emb.row(r);
        for c in 0..d {
            x.set(r, c, emb[c] + pos[c]);
        }
    }

    let mut states: Vec<Vec<f64>> = Vec::new();
    let mut mlp_keys: Vec<Matrix> = Vec::new();
    if capture {
        states.push(x.row(t - 1).to_vec());
    }

    let mask = causal_mask(t);
    for block in &model.blocks {
        let (h, _, _) = layer_norm_forward(&x, &block.ln1_gamma, &block.ln1_beta);
        let q = h.matmul(&block.wq);
        let k = h.matmul(&block.wk);
        let v = h.matmul(&block.wv);
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let lo = head * dh;
            let hi = lo + dh;
            let qh = slice_cols(&q, lo, hi);
            let kh = slice_cols(&k, lo, hi);
            let vh = slice_cols(&v, lo, hi);
            let scores = qh
                .matmul(&kh.transpose())
                .scale(1.0 / (dh as f64).sqrt())
                .add(&mask);
            let attn = row_softmax_forward(&scores);
            head_outs.push(attn.matmul(&vh));
        }
        let concat = concat_cols(&head_outs);
        let attn_out = concat.matmul(&block.wo);
        x = x.add(&attn_out);

        let (h2, _, _) = layer_norm_forward(&x, &block.ln2_gamma, &block.ln2_beta);
        let pre = h2.matmul(&block.w_in);
        let act = pre.map(gelu_scalar);
        let mlp_out = act.matmul(&block.w_out);
        if capture {
            mlp_keys.push(act.clone());
        }
        x = x.add(&mlp_out);
        if capture {
            states.push(x.row(t - 1).to_vec());
        }
    }

    let (final_ln, _, _) = layer_norm_forward(&x, &model.final_gamma, &model.final_beta);
    let full_logits = final_ln.matmul(&model.unembed);

    let trace = if capture {
        Some(ForwardTrace {
            states,
            logits: full_logits.row(t - 1).to_vec(),
            mlp_keys,
        })
    } else {
        None
    };
    Ok(ForwardOutput { full_logits, trace })
}

pub(crate) fn causal_mask(t: usize) -> Matrix {
    Matrix::from_fn(t, t, |i, j| if j <= i { 0.0 } else { CAUSAL_MASK })
}

pub(crate) fn slice_cols(m: &Matrix, lo: usize, hi: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), hi - lo);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[lo..hi]);
    }
    out
}

pub(crate) fn concat_cols(parts: &[Matrix]) -> Matrix {
    let rows = parts[0].rows();
    let total: usize = parts.iter().map(Matrix::cols).sum();
    let mut out = Matrix::zeros(rows, total);
    let mut at = 0;
    for p in parts {
        for r in 0..rows {
            out.row_mut(r)[at..at + p.cols()].copy_from_slice(p.row(r));
        }
        at += p.cols();
    }
    out
}

/// Next-token logits at the last input position, plus the full trace when
/// `capture` is set.
pub fn forward(
    model: &ModelState,
    tokens: &[TokenId],
    capture: bool,
) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
    let out = run_forward(model, tokens, capture)?;
    let logits = out.full_logits.row(out.full_logits.rows() - 1).to_vec();
    Ok((logits, out.trace))
}

/// Logits at every position (`t x vocab`), for causality checks and
/// training-style evaluation.
pub fn forward_full_logits(model: &ModelState, tokens: &[TokenId]) -> Result<Matrix> {
    Ok(run_forward(model, tokens, false)?.full_logits)
}

/// Projects the captured residual state of `layer` through the final layer
/// norm and unembedding, then softmax — the same path the model's own
/// output takes, so `layer = n_layers` reproduces the output distribution
/// exactly.
pub fn logit_lens(model: &ModelState, trace: &ForwardTrace, layer: usize) -> Result<LensDistribution> {
    if layer >= trace.states.len() {
        return Err(Error::LayerOutOfRange {
            layer,
            limit: trace.states.len() - 1,
        });
    }
    let state = Matrix::row_vector(&trace.states[layer]);
    let (ln, _, _) = layer_norm_forward(&state, &model.final_gamma, &model.final_beta);
    let logits = ln.matmul(&model.unembed);
    let probs = softmax_unchecked(logits.row(0));
    Ok(LensDistribution { layer, probs })
}

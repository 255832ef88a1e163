//! Differentiable forward pass recorded on a [`Tape`].
//!
//! The builder mirrors `forward.rs` op for op. Three things vary by caller:
//! which leaves are trainable (everything for training, one `w_out` for
//! constrained finetuning, nothing for value optimization where the only
//! parameter is an injected delta), whether an intervention adds a delta
//! row to one block's MLP output, and which lens layers to expose as logit
//! nodes for layer-aware objectives.

use super::forward::{causal_mask, CAUSAL_MASK};
use super::{ModelState, TokenId};
use crate::error::Result;
use crate::numcore::{Matrix, Tape, ValueId};

/// Which leaves of the traced forward become trainable tape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Everything frozen (used when only an injected delta is optimized).
    None,
    /// Every model parameter (training).
    AllParams,
    /// Only block `b`'s MLP output matrix (constrained finetuning).
    WOut(usize),
}

/// Options for one traced forward build.
pub struct TraceOptions<'a> {
    pub trainable: Trainable,
    /// `(block, position, delta)`: add the 1 x d_model tape value `delta`
    /// to the MLP output of `block` at `position`. The delta is created by
    /// the caller so it can be shared across several prompts on one tape.
    pub intervention: Option<(usize, usize, ValueId)>,
    /// Lens layers (0..=n_layers) whose last-position lens logits to expose.
    pub lens_layers: &'a [usize],
    /// Also emit the full `t x vocab` logits matrix (training wants it).
    pub all_logits: bool,
}

impl Default for TraceOptions<'_> {
    fn default() -> Self {
        TraceOptions {
            trainable: Trainable::None,
            intervention: None,
            lens_layers: &[],
            all_logits: false,
        }
    }
}

/// Tape ids of all model parameters, in [`ModelState::param_names`] order.
pub struct TracedParams {
    pub ids: Vec<ValueId>,
}

/// Handles into a traced forward pass.
pub struct TracedForward {
    /// Next-token logits at the last input position (`1 x vocab`).
    pub last_logits: ValueId,
    /// Full per-position logits (`t x vocab`), when requested.
    pub all_logits: Option<ValueId>,
    /// `(lens_layer, logits)` pairs for the requested lens layers.
    pub lens_logits: Vec<(usize, ValueId)>,
    /// All-parameter ids when `Trainable::AllParams`.
    pub params: Option<TracedParams>,
    /// The edited block's `w_out` id when `Trainable::WOut`.
    pub w_out_id: Option<ValueId>,
}

/// Records one forward pass of `model` on `tokens`.
pub fn build_traced_forward(
    tape: &mut Tape,
    model: &ModelState,
    tokens: &[TokenId],
    opts: &TraceOptions,
) -> Result<TracedForward> {
    model.validate_tokens(tokens)?;
    let cfg = &model.config;
    let t = tokens.len();
    let dh = cfg.head_dim();
    let all = matches!(opts.trainable, Trainable::AllParams);

    let mut param_ids = Vec::new();
    let leaf = |tape: &mut Tape, m: &Matrix, trainable: bool| -> ValueId {
        if trainable {
            tape.param(m.clone())
        } else {
            tape.input(m.clone())
        }
    };

    let token_emb = leaf(tape, &model.token_emb, all);
    let pos_emb = leaf(tape, &model.pos_emb, all);
    if all {
        param_ids.extend([token_emb, pos_emb]);
    }

    let tok_ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let pos_ids: Vec<usize> = (0..t).collect();
    let tok_rows = tape.gather_rows(token_emb, &tok_ids);
    let pos_rows = tape.gather_rows(pos_emb, &pos_ids);
    let mut x = tape.add(tok_rows, pos_rows);

    let mut states = vec![x];
    let mask = tape.input(causal_mask(t));
    let mut w_out_id = None;

    for (b, block) in model.blocks.iter().enumerate() {
        let ln1_g = leaf(tape, &block.ln1_gamma, all);
        let ln1_b = leaf(tape, &block.ln1_beta, all);
        let wq = leaf(tape, &block.wq, all);
        let wk = leaf(tape, &block.wk, all);
        let wv = leaf(tape, &block.wv, all);
        let wo = leaf(tape, &block.wo, all);
        let ln2_g = leaf(tape, &block.ln2_gamma, all);
        let ln2_b = leaf(tape, &block.ln2_beta, all);
        let w_in = leaf(tape, &block.w_in, all);
        let w_out_trainable = all || opts.trainable == Trainable::WOut(b);
        let w_out = leaf(tape, &block.w_out, w_out_trainable);
        if all {
            param_ids.extend([ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w_in, w_out]);
        }
        if opts.trainable == Trainable::WOut(b) {
            w_out_id = Some(w_out);
        }

        let h = tape.layer_norm(x, ln1_g, ln1_b);
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let lo = head * dh;
            let hi = lo + dh;
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kht = tape.transpose(kh);
            let raw = tape.matmul(qh, kht);
            let scaled = tape.affine(raw, 1.0 / (dh as f64).sqrt(), 0.0);
            let masked = tape.add(scaled, mask);
            let attn = tape.row_softmax(masked);
            head_outs.push(tape.matmul(attn, vh));
        }
        let concat = tape.concat_cols(&head_outs);
        let attn_out = tape.matmul(concat, wo);
        x = tape.add(x, attn_out);

        let h2 = tape.layer_norm(x, ln2_g, ln2_b);
        let pre = tape.matmul(h2, w_in);
        let act = tape.gelu(pre);
        let mut mlp_out = tape.matmul(act, w_out);
        if let Some((ib, pos, delta)) = opts.intervention {
            if ib == b {
                mlp_out = tape.add_at_row(mlp_out, delta, pos);
            }
        }
        x = tape.add(x, mlp_out);
        states.push(x);
    }

    let final_g = leaf(tape, &model.final_gamma, all);
    let final_b = leaf(tape, &model.final_beta, all);
    let unembed = leaf(tape, &model.unembed, all);
    if all {
        param_ids.extend([final_g, final_b, unembed]);
    }

    let last_row = [t - 1];
    let project_last = |tape: &mut Tape, state: ValueId| -> ValueId {
        let row = tape.gather_rows(state, &last_row);
        let ln = tape.layer_norm(row, final_g, final_b);
        tape.matmul(ln, unembed)
    };

    let last_logits = project_last(tape, x);
    let all_logits = if opts.all_logits {
        let ln = tape.layer_norm(x, final_g, final_b);
        Some(tape.matmul(ln, unembed))
    } else {
        None
    };
    let mut lens_logits = Vec::with_capacity(opts.lens_layers.len());
    for &layer in opts.lens_layers {
        assert!(layer < states.len(), "lens layer {layer} out of range");
        let id = if layer == cfg.n_layers {
            last_logits
        } else {
            project_last(tape, states[layer])
        };
        lens_logits.push((layer, id));
    }

    Ok(TracedForward {
        last_logits,
        all_logits,
        lens_logits,
        params: if all {
            Some(TracedParams { ids: param_ids })
        } else {
            None
        },
        w_out_id,
    })
}

/// The mask constant, re-exported for tests that build score fixtures.
pub(crate) const _MASK: f64 = CAUSAL_MASK;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, forward_full_logits, ModelConfig};
    use crate::numcore::Tape;

    fn tiny_model() -> ModelState {
        ModelState::init(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            vocab_size: 13,
            max_seq_len: 8,
            rng_seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn traced_logits_match_plain_bitwise() {
        let m = tiny_model();
        let tokens = [3u32, 7, 1, 12];
        let mut tape = Tape::new();
        let tf = build_traced_forward(
            &mut tape,
            &m,
            &tokens,
            &TraceOptions {
                all_logits: true,
                ..TraceOptions::default()
            },
        )
        .unwrap();
        let (plain_last, _) = forward(&m, &tokens, false).unwrap();
        let plain_full = forward_full_logits(&m, &tokens).unwrap();
        assert_eq!(tape.value(tf.last_logits).row(0), &plain_last[..]);
        assert_eq!(
            tape.value(tf.all_logits.unwrap()).data(),
            plain_full.data()
        );
    }

    #[test]
    fn traced_lens_matches_plain_lens() {
        let m = tiny_model();
        let tokens = [1u32, 2, 3];
        let mut tape = Tape::new();
        let tf = build_traced_forward(
            &mut tape,
            &m,
            &tokens,
            &TraceOptions {
                lens_layers: &[0, 1, 2],
                ..TraceOptions::default()
            },
        )
        .unwrap();
        let (_, trace) = forward(&m, &tokens, true).unwrap();
        let trace = trace.unwrap();
        for (layer, id) in &tf.lens_logits {
            let lens = crate::model::logit_lens(&m, &trace, *layer).unwrap();
            let traced_probs = crate::numcore::softmax_unchecked(tape.value(*id).row(0));
            assert_eq!(lens.probs, traced_probs, "lens layer {layer}");
        }
    }

    #[test]
    fn zero_delta_intervention_is_identity() {
        let m = tiny_model();
        let tokens = [4u32, 5, 6];
        let mut tape = Tape::new();
        let delta = tape.param(crate::numcore::Matrix::zeros(1, m.config.d_model));
        let tf = build_traced_forward(
            &mut tape,
            &m,
            &tokens,
            &TraceOptions {
                intervention: Some((1, 0, delta)),
                ..TraceOptions::default()
            },
        )
        .unwrap();
        let (plain, _) = forward(&m, &tokens, false).unwrap();
        assert_eq!(tape.value(tf.last_logits).row(0), &plain[..]);
    }
}

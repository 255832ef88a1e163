//! Target-value optimization: gradient descent on a delta added to one
//! block's MLP output at the key position, through the rest of the
//! forward pass.

use crate::defense::{build_objective_loss, ObjectiveSpec, PromptTracer};
use crate::error::{Error, Result};
use crate::factlab::{Fact, FactCorpus};
use crate::model::{build_traced_forward, ModelState, TokenId, TraceOptions, TracedForward};
use crate::numcore::{adam_step, AdamState, Matrix, Tape, ValueId};

/// Knobs of the value optimizer.
#[derive(Clone, Debug)]
pub struct ValueOptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Delta norm is clamped to this multiple of the original output norm.
    pub clamp_norm_factor: f64,
}

impl Default for ValueOptConfig {
    fn default() -> Self {
        ValueOptConfig {
            steps: 25,
            learning_rate: 5e-1,
            weight_decay: 5e-5,
            clamp_norm_factor: 2.0,
        }
    }
}

/// Tracer that injects a shared delta at the last subject token of every
/// prompt it traces.
struct DeltaTracer<'a> {
    model: &'a ModelState,
    corpus: &'a FactCorpus,
    fact: &'a Fact,
    block: usize,
    delta: ValueId,
}

impl PromptTracer for DeltaTracer<'_> {
    fn trace(
        &mut self,
        tape: &mut Tape,
        prompt: &[TokenId],
        lens_layers: &[usize],
    ) -> Result<TracedForward> {
        let pos = self.corpus.subject_last_position(self.fact, prompt)?;
        build_traced_forward(
            tape,
            self.model,
            prompt,
            &TraceOptions {
                intervention: Some((self.block, pos, self.delta)),
                lens_layers,
                ..TraceOptions::default()
            },
        )
    }
}

/// Optimizes the target value `v*` for `fact` at `block` under
/// `objective`. Returns `v* = original_output + delta` at the canonical
/// key position, plus the recorded loss curve (`steps + 1` entries; entry
/// 0 is the pre-optimization loss, so zero steps returns the original
/// output unchanged).
pub fn optimize_value(
    model: &ModelState,
    corpus: &FactCorpus,
    fact: &Fact,
    objective: &ObjectiveSpec,
    block: usize,
    config: &ValueOptConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if block >= model.config.n_layers {
        return Err(Error::LayerOutOfRange {
            layer: block,
            limit: model.config.n_layers - 1,
        });
    }
    let d_model = model.config.d_model;

    // Original MLP output at the canonical key position: the clamp
    // reference and the base the delta rides on.
    let (key, _, _) = super::key::compute_key(model, corpus, fact, block)?;
    let original = super::rank_one::current_value(&model.blocks[block].w_out, &key);
    let original_norm = l2(&original);

    let mut delta = vec![0.0; d_model];
    let mut adam = AdamState::new(&[Matrix::zeros(1, d_model)], config.learning_rate);
    let mut curve = Vec::with_capacity(config.steps + 1);

    for step in 0..=config.steps {
        let mut tape = Tape::new();
        let delta_id = tape.param(Matrix::row_vector(&delta));
        let mut tracer = DeltaTracer {
            model,
            corpus,
            fact,
            block,
            delta: delta_id,
        };
        let loss = build_objective_loss(
            &mut tape,
            corpus,
            fact,
            objective,
            model.config.n_layers,
            &mut tracer,
        )?;
        let loss_value = tape.value(loss).as_scalar();
        if !loss_value.is_finite() {
            return Err(Error::Diverged(format!(
                "objective {} produced non-finite loss at step {step}",
                objective.kind.name()
            )));
        }
        curve.push(loss_value);
        if step == config.steps {
            break;
        }

        let mut grads = tape.backward(loss)?;
        let mut g = grads.take(delta_id);
        // Decoupled weight decay on the delta itself.
        for (gv, dv) in g.data_mut().iter_mut().zip(delta.iter()) {
            *gv += config.weight_decay * dv;
        }
        let mut params = vec![Matrix::row_vector(&delta)];
        adam_step(&mut params, &[g], &mut adam)?;
        delta = params[0].row(0).to_vec();

        // Clamp: the delta may not move the output further than
        // clamp_norm_factor times its original norm.
        let max_norm = config.clamp_norm_factor * original_norm;
        let norm = l2(&delta);
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for d in delta.iter_mut() {
                *d *= s;
            }
        }
    }

    let value: Vec<f64> = original.iter().zip(delta.iter()).map(|(o, d)| o + d).collect();
    Ok((value, curve))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::ObjectiveKind;
    use crate::factlab::{generate_corpus, CorpusSpec};
    use crate::model::ModelConfig;

    fn setup() -> (ModelState, FactCorpus) {
        let corpus = generate_corpus(&CorpusSpec {
            n_facts: 8,
            n_relations: 2,
            n_dev_facts: 1,
            n_eval_facts: 2,
            random_pool_size: 3,
            seed: 2,
            ..CorpusSpec::default()
        })
        .unwrap();
        let model = ModelState::init(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_mlp: 24,
            vocab_size: corpus.vocab.len(),
            max_seq_len: 16,
            rng_seed: 66,
        })
        .unwrap();
        (model, corpus)
    }

    #[test]
    fn zero_steps_returns_original_output() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[0];
        let (key, _, _) = super::super::key::compute_key(&model, &corpus, fact, 0).unwrap();
        let original =
            super::super::rank_one::current_value(&model.blocks[0].w_out, &key);
        let (value, curve) = optimize_value(
            &model,
            &corpus,
            fact,
            &ObjectiveSpec::new(ObjectiveKind::FactErasure),
            0,
            &ValueOptConfig {
                steps: 0,
                ..ValueOptConfig::default()
            },
        )
        .unwrap();
        assert_eq!(value, original);
        assert_eq!(curve.len(), 1);
    }

    #[test]
    fn loss_nonincreasing_within_tolerance_and_clamped() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[1];
        let cfg = ValueOptConfig::default();
        let (value, curve) = optimize_value(
            &model,
            &corpus,
            fact,
            &ObjectiveSpec::new(ObjectiveKind::FactErasure),
            1,
            &cfg,
        )
        .unwrap();
        assert_eq!(curve.len(), cfg.steps + 1);
        for w in curve.windows(2) {
            assert!(
                w[1] <= w[0] + 0.05 * w[0].abs() + 1e-12,
                "loss rose beyond tolerance: {} -> {}",
                w[0],
                w[1]
            );
        }
        // Clamp contract: |v* - original| <= factor * |original|.
        let (key, _, _) = super::super::key::compute_key(&model, &corpus, fact, 1).unwrap();
        let original =
            super::super::rank_one::current_value(&model.blocks[1].w_out, &key);
        let diff: f64 = value
            .iter()
            .zip(original.iter())
            .map(|(v, o)| (v - o) * (v - o))
            .sum::<f64>()
            .sqrt();
        let orig_norm: f64 = original.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff <= cfg.clamp_norm_factor * orig_norm + 1e-12);
    }
}

//! Max-norm-constrained finetuning of a single MLP output matrix.
//!
//! Adam steps on one block's `w_out` under any objective, with every step
//! followed by a coordinate-wise projection onto the max-norm ball
//! `|w' - w| <= epsilon` around the original weights. The projection
//! guarantees the *measured* difference `(w' - w0).abs()` never exceeds
//! epsilon — including the rounding of `w0 + epsilon` itself — by nudging
//! boundary values toward `w0` until the float arithmetic agrees.

use crate::defense::{build_objective_loss, ObjectiveSpec, PromptTracer};
use crate::error::{Error, Result};
use crate::factlab::{Fact, FactCorpus};
use crate::model::{build_traced_forward, ModelState, TokenId, TraceOptions, TracedForward, Trainable};
use crate::numcore::{adam_step, AdamState, Matrix, Tape, ValueId};

#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    /// Max-norm bound on the weight change.
    pub epsilon: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epsilon: 5e-4,
            steps: 50,
            learning_rate: 5e-4,
        }
    }
}

struct WOutTracer<'a> {
    model: &'a ModelState,
    block: usize,
    collected: Vec<ValueId>,
}

impl PromptTracer for WOutTracer<'_> {
    fn trace(
        &mut self,
        tape: &mut Tape,
        prompt: &[TokenId],
        lens_layers: &[usize],
    ) -> Result<TracedForward> {
        let tf = build_traced_forward(
            tape,
            self.model,
            prompt,
            &TraceOptions {
                trainable: Trainable::WOut(self.block),
                lens_layers,
                ..TraceOptions::default()
            },
        )?;
        // Each prompt traces its own copy of w_out; summing their
        // gradients is the gradient with respect to the shared matrix.
        self.collected
            .push(tf.w_out_id.expect("w_out traced as parameter"));
        Ok(tf)
    }
}

/// Finetunes `block`'s `w_out` under `objective` with an exact max-norm
/// constraint. Returns the edited model and the loss curve.
pub fn constrained_finetune(
    model: &ModelState,
    corpus: &FactCorpus,
    fact: &Fact,
    objective: &ObjectiveSpec,
    block: usize,
    config: &FinetuneConfig,
) -> Result<(ModelState, Vec<f64>)> {
    if !(config.epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "constrained finetuning needs epsilon > 0, got {}",
            config.epsilon
        )));
    }
    if block >= model.config.n_layers {
        return Err(Error::LayerOutOfRange {
            layer: block,
            limit: model.config.n_layers - 1,
        });
    }

    let w_orig = model.blocks[block].w_out.clone();
    let mut edited = model.clone();
    let mut adam = AdamState::new(&[w_orig.clone()], config.learning_rate);
    let mut curve = Vec::with_capacity(config.steps + 1);

    for step in 0..=config.steps {
        let mut tape = Tape::new();
        let mut tracer = WOutTracer {
            model: &edited,
            block,
            collected: Vec::new(),
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
                "objective {} produced non-finite loss at finetune step {step}",
                objective.kind.name()
            )));
        }
        curve.push(loss_value);
        if step == config.steps {
            break;
        }

        let ids = tracer.collected;
        let mut grads = tape.backward(loss)?;
        let mut total = Matrix::zeros(w_orig.rows(), w_orig.cols());
        for id in ids {
            total.add_assign(&grads.take(id));
        }
        let mut params = vec![edited.blocks[block].w_out.clone()];
        adam_step(&mut params, &[total], &mut adam)?;
        let mut w_new = params.into_iter().next().expect("one parameter");
        project_max_norm(&mut w_new, &w_orig, config.epsilon);
        edited.blocks[block].w_out = w_new;
    }

    Ok((edited, curve))
}

/// Coordinate-wise projection of `w` onto `{x : |x - w0| <= eps}` where
/// the constraint is what `(x - w0).abs()` *evaluates to* in f64.
pub(crate) fn project_max_norm(w: &mut Matrix, w0: &Matrix, eps: f64) {
    debug_assert_eq!(w.shape(), w0.shape());
    for (x, &x0) in w.data_mut().iter_mut().zip(w0.data().iter()) {
        *x = project_scalar(*x, x0, eps);
    }
}

fn project_scalar(x: f64, x0: f64, eps: f64) -> f64 {
    if (x - x0).abs() <= eps {
        return x;
    }
    let mut target = if x > x0 { x0 + eps } else { x0 - eps };
    // `x0 + eps` may round outward; walk back until the measured
    // difference satisfies the bound. Terminates within a few ulps.
    while (target - x0).abs() > eps {
        target = if target > x0 {
            target.next_down()
        } else {
            target.next_up()
        };
    }
    target
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
            seed: 13,
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
            rng_seed: 12,
        })
        .unwrap();
        (model, corpus)
    }

    #[test]
    fn projection_is_exact_even_at_awkward_scales() {
        let cases = [
            (0.1f64, 5e-4),
            (1.0, 1e-7),
            (-3.337, 2.5e-4),
            (1e8, 1e-3),
            (0.0, 1e-12),
        ];
        for (x0, eps) in cases {
            for push in [10.0, -10.0, 1.0001, -1.0001] {
                let x = x0 + push * eps;
                let p = project_scalar(x, x0, eps);
                assert!(
                    (p - x0).abs() <= eps,
                    "measured diff {} > eps {eps} at x0 {x0}",
                    (p - x0).abs()
                );
            }
        }
    }

    #[test]
    fn vanishing_epsilon_leaves_model_unchanged() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[0];
        let objective = ObjectiveSpec::new(ObjectiveKind::FactErasure);
        let before = crate::defense::objective_loss_value(&model, &corpus, fact, &objective).unwrap();
        let (edited, curve) = constrained_finetune(
            &model,
            &corpus,
            fact,
            &objective,
            0,
            &FinetuneConfig {
                epsilon: 1e-12,
                steps: 10,
                learning_rate: 1e-3,
            },
        )
        .unwrap();
        let after = crate::defense::objective_loss_value(&edited, &corpus, fact, &objective).unwrap();
        assert!((after - before).abs() < 1e-6, "{before} vs {after}");
    }

    #[test]
    fn max_norm_bound_holds_exactly_and_only_target_changes() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[2];
        let eps = 1e-3;
        let (edited, curve) = constrained_finetune(
            &model,
            &corpus,
            fact,
            &ObjectiveSpec::new(ObjectiveKind::FactErasure),
            1,
            &FinetuneConfig {
                epsilon: eps,
                steps: 20,
                learning_rate: 1e-3,
            },
        )
        .unwrap();
        assert_eq!(curve.len(), 21);

        let delta = edited.blocks[1].w_out.sub(&model.blocks[1].w_out);
        assert!(delta.max_abs() <= eps, "max |delta| = {}", delta.max_abs());
        assert!(delta.max_abs() > 0.0, "finetuning should move something");

        // Everything outside the target matrix is bit-identical.
        let names = model.param_names();
        for ((name, a), b) in names.iter().zip(model.params()).zip(edited.params()) {
            if name == "block1.w_out" {
                continue;
            }
            assert_eq!(a.data(), b.data(), "{name} changed");
        }
    }

    #[test]
    fn zero_epsilon_rejected() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[0];
        let err = constrained_finetune(
            &model,
            &corpus,
            fact,
            &ObjectiveSpec::new(ObjectiveKind::FactErasure),
            0,
            &FinetuneConfig {
                epsilon: 0.0,
                steps: 1,
                learning_rate: 1e-3,
            },
        );
        assert!(err.is_err());
    }
}

//! Training to memorization.
//!
//! Every fact is rendered through every one of its relation's templates and
//! the model minimizes next-token cross-entropy over the full prompt+answer
//! line. Lines are shuffled per epoch and gradients averaged over small
//! batches; the whole loop is a pure function of (model seed, corpus,
//! config), so two runs with the same seeds produce bit-identical weights.

use super::traced::{build_traced_forward, TraceOptions, Trainable};
use super::{ModelState, TokenId};
use crate::error::{Error, Result};
use crate::factlab::FactCorpus;
use crate::numcore::{adam_step, AdamState, Matrix, Tape};
use crate::rng::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after any epoch whose mean loss falls below this value.
    #[serde(default)]
    pub early_stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            learning_rate: 1.5e-3,
            batch_size: 16,
            seed: 0,
            early_stop_loss: Some(2e-3),
        }
    }
}

/// Trains `model` on every rendered line of `corpus`. Returns the trained
/// model and the per-epoch mean loss curve. Aborts with a diagnostic if the
/// loss ever becomes non-finite.
pub fn train(
    model: &ModelState,
    corpus: &FactCorpus,
    config: &TrainConfig,
) -> Result<(ModelState, Vec<f64>)> {
    let lines = corpus.training_lines()?;
    if lines.is_empty() {
        return Err(Error::InvalidConfig("corpus has no training lines".into()));
    }
    for line in &lines {
        if line.len() > model.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: line.len(),
                max: model.config.max_seq_len,
            });
        }
    }

    let mut trained = model.clone();
    let n_params = trained.params().len();
    let mut adam = {
        let params: Vec<Matrix> = trained.params().iter().map(|p| (*p).clone()).collect();
        AdamState::new(&params, config.learning_rate)
    };

    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = rng_from_seed(derive_seed(config.seed, "train-epoch", epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut batch_grads: Vec<Matrix> = trained
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect();
            let mut batch_loss = 0.0;
            for &line_idx in batch {
                let line = &lines[line_idx];
                let loss = accumulate_line_gradients(&trained, line, &mut batch_grads)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}, line {line_idx}"
                    )));
                }
                batch_loss += loss;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in batch_grads.iter_mut() {
                *g = g.scale(scale);
            }
            epoch_loss += batch_loss;
            let mut params: Vec<Matrix> =
                trained.params().iter().map(|p| (*p).clone()).collect();
            adam_step(&mut params, &batch_grads, &mut adam)?;
            for (slot, new) in trained.params_mut().into_iter().zip(params.into_iter()) {
                *slot = new;
            }
        }
        debug_assert_eq!(trained.params().len(), n_params);
        let mean = epoch_loss / lines.len() as f64;
        curve.push(mean);
        if let Some(stop) = config.early_stop_loss {
            if mean < stop {
                break;
            }
        }
    }

    Ok((trained, curve))
}

/// One forward/backward on a single line; adds parameter gradients into
/// `grads` and returns the line loss.
fn accumulate_line_gradients(
    model: &ModelState,
    line: &[TokenId],
    grads: &mut [Matrix],
) -> Result<f64> {
    debug_assert!(line.len() >= 2, "training line needs a target");
    let inputs = &line[..line.len() - 1];
    let targets: Vec<usize> = line[1..].iter().map(|&t| t as usize).collect();

    let mut tape = Tape::new();
    let tf = build_traced_forward(
        &mut tape,
        model,
        inputs,
        &TraceOptions {
            trainable: Trainable::AllParams,
            all_logits: true,
            ..TraceOptions::default()
        },
    )?;
    let logits = tf.all_logits.expect("all_logits requested");
    let loss = tape.cross_entropy_mean(logits, &targets);
    let loss_value = tape.value(loss).as_scalar();
    let mut g = tape.backward(loss)?;
    let param_ids = tf.params.expect("training traces all params").ids;
    for (slot, id) in grads.iter_mut().zip(param_ids.into_iter()) {
        slot.add_assign(&g.take(id));
    }
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factlab::{generate_corpus, CorpusSpec};
    use crate::model::{answer_prob, ModelConfig};

    fn small_corpus() -> FactCorpus {
        generate_corpus(&CorpusSpec {
            n_facts: 4,
            n_relations: 2,
            seed: 3,
            n_dev_facts: 1,
            n_eval_facts: 1,
            random_pool_size: 2,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn single_fact_overfit() {
        let corpus = generate_corpus(&CorpusSpec {
            n_facts: 2,
            n_relations: 2,
            templates_per_relation: 3,
            n_defense_paraphrases: 1,
            n_attack_paraphrases: 1,
            n_dev_facts: 0,
            n_eval_facts: 1,
            random_pool_size: 1,
            ..CorpusSpec::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_mlp: 64,
            vocab_size: corpus.vocab.len(),
            max_seq_len: 16,
            rng_seed: 1,
        };
        let model = ModelState::init(cfg).unwrap();
        let (trained, curve) = train(
            &model,
            &corpus,
            &TrainConfig {
                epochs: 120,
                learning_rate: 3e-3,
                batch_size: 4,
                seed: 5,
                early_stop_loss: Some(1e-3),
            },
        )
        .unwrap();
        assert!(!curve.is_empty());
        let fact = &corpus.facts[0];
        let prompt = corpus.canonical_prompt_tokens(fact).unwrap();
        let answer = corpus.vocab.id(&fact.answer).unwrap();
        let p = answer_prob(&trained, &prompt, answer).unwrap();
        assert!(p > 0.99, "p(answer|prompt) = {p}");
    }

    #[test]
    fn same_seed_bit_identical() {
        let corpus = small_corpus();
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            vocab_size: corpus.vocab.len(),
            max_seq_len: 16,
            rng_seed: 2,
        };
        let model = ModelState::init(cfg).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 7,
            early_stop_loss: None,
        };
        let (a, curve_a) = train(&model, &corpus, &tc).unwrap();
        let (b, curve_b) = train(&model, &corpus, &tc).unwrap();
        assert_eq!(curve_a, curve_b);
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.data(), pb.data());
        }
    }
}

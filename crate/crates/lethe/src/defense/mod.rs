//! The six deletion objectives, as differentiable losses.
//!
//! Every objective is a scalar built on a [`Tape`] from traced forward
//! passes, so any editing engine can optimize any objective: the engine
//! decides *what* is trainable (an injected delta vector, or one `w_out`
//! matrix), the objective decides *what loss* is minimized. The same
//! builders evaluated through a plain tracer give the loss values used in
//! tests and reports, which pins down that objective identity — not the
//! engine — determines the loss.
//!
//! The objectives:
//!
//! * **Empty Response** — maximize `p(d|x)` for the reserved empty target
//!   token `d` (loss `-log p(d|x)`).
//! * **Fact Erasure** — minimize `p(y|x)` directly (the loss *is* the
//!   probability).
//! * **Error Injection** — maximize `p(y*|x)` for the false target `y*`.
//! * **Head Projection defense** — hinge the answer's lens probability
//!   below the k-th largest at every defended lens layer, by a margin.
//! * **Max Entropy defense** — maximize the entropy of the lens
//!   distribution at every defended lens layer.
//! * **Input Rephrasing defense** — Fact Erasure averaged over the
//!   canonical prompt and all defense paraphrases.

use crate::error::{Error, Result};
use crate::factlab::{Fact, FactCorpus};
use crate::model::{build_traced_forward, ModelState, TokenId, TraceOptions, TracedForward};
use crate::numcore::{Tape, ValueId};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    EmptyResponse,
    FactErasure,
    ErrorInjection,
    HeadProjection,
    MaxEntropy,
    InputRephrasing,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::EmptyResponse => "empty-response",
            ObjectiveKind::FactErasure => "fact-erasure",
            ObjectiveKind::ErrorInjection => "error-injection",
            ObjectiveKind::HeadProjection => "head-projection",
            ObjectiveKind::MaxEntropy => "max-entropy",
            ObjectiveKind::InputRephrasing => "input-rephrasing",
        }
    }

    /// Whether the edit maximizes a new target's probability (the rewrite
    /// score then uses its maximizing variant) or minimizes the answer's.
    pub fn is_maximizing(self) -> bool {
        matches!(
            self,
            ObjectiveKind::EmptyResponse | ObjectiveKind::ErrorInjection
        )
    }
}

/// A deletion objective plus its knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Defended lens layers `L` (lens defenses only).
    #[serde(default)]
    pub lens_layers: Vec<usize>,
    /// Margin `m`, in probability units.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// `k` of the Head Projection hinge.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_margin() -> f64 {
    0.05
}

fn default_top_k() -> usize {
    4
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveSpec {
            kind,
            lens_layers: Vec::new(),
            margin: default_margin(),
            top_k: default_top_k(),
        }
    }

    pub fn with_lens_layers(mut self, layers: Vec<usize>) -> Self {
        self.lens_layers = layers;
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let lens_based = matches!(
            self.kind,
            ObjectiveKind::HeadProjection | ObjectiveKind::MaxEntropy
        );
        if lens_based && self.lens_layers.is_empty() {
            return Err(Error::InvalidObjective(format!(
                "{} needs a non-empty lens layer set",
                self.kind.name()
            )));
        }
        for &l in &self.lens_layers {
            if l > n_layers {
                return Err(Error::LayerOutOfRange {
                    layer: l,
                    limit: n_layers,
                });
            }
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::InvalidObjective(format!(
                "margin must be in (0, 1), got {}",
                self.margin
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidObjective("top_k must be >= 1".into()));
        }
        Ok(())
    }

    /// Lens layers the tracer must expose for this objective: the defended
    /// set for lens defenses (the output distribution always joins the
    /// hinge set), the output projection alone for everything else.
    pub fn required_lens_layers(&self, n_layers: usize) -> Vec<usize> {
        match self.kind {
            ObjectiveKind::HeadProjection => {
                let mut ls = self.lens_layers.clone();
                ls.push(n_layers);
                ls.sort_unstable();
                ls.dedup();
                ls
            }
            ObjectiveKind::MaxEntropy => {
                let mut ls = self.lens_layers.clone();
                ls.sort_unstable();
                ls.dedup();
                ls
            }
            _ => vec![n_layers],
        }
    }

    /// The token whose probability the edit pushes: the empty target for
    /// Empty Response, the false target for Error Injection, the answer
    /// itself for the minimizing objectives.
    pub fn push_target(&self, corpus: &FactCorpus, fact: &Fact) -> Result<TokenId> {
        match self.kind {
            ObjectiveKind::EmptyResponse => Ok(corpus.vocab.empty_target()),
            ObjectiveKind::ErrorInjection => corpus.false_target_token(fact),
            _ => corpus.answer_token(fact),
        }
    }
}

/// How an engine produces traced forward passes for the objective's
/// prompts. Implementations decide trainability and interventions; the
/// requested lens layers must be exposed on the returned trace.
pub trait PromptTracer {
    fn trace(
        &mut self,
        tape: &mut Tape,
        prompt: &[TokenId],
        lens_layers: &[usize],
    ) -> Result<TracedForward>;
}

/// Plain tracer: nothing trainable, no intervention. Evaluating a loss
/// through it gives the objective's value on the model as-is.
pub struct PlainTracer<'m> {
    pub model: &'m ModelState,
}

impl PromptTracer for PlainTracer<'_> {
    fn trace(
        &mut self,
        tape: &mut Tape,
        prompt: &[TokenId],
        lens_layers: &[usize],
    ) -> Result<TracedForward> {
        build_traced_forward(
            tape,
            self.model,
            prompt,
            &TraceOptions {
                lens_layers,
                ..TraceOptions::default()
            },
        )
    }
}

/// Builds the scalar loss node for `spec` on `fact`, tracing prompts
/// through `tracer`. The single entry point every engine uses.
pub fn build_objective_loss(
    tape: &mut Tape,
    corpus: &FactCorpus,
    fact: &Fact,
    spec: &ObjectiveSpec,
    n_layers: usize,
    tracer: &mut dyn PromptTracer,
) -> Result<ValueId> {
    spec.validate(n_layers)?;
    let answer = corpus.answer_token(fact)?;
    let canonical = corpus.canonical_prompt_tokens(fact)?;
    let lens = spec.required_lens_layers(n_layers);

    match spec.kind {
        ObjectiveKind::EmptyResponse => {
            let d = corpus.vocab.empty_target();
            if d == answer {
                return Err(Error::InvalidObjective(
                    "empty target equals the fact's answer".into(),
                ));
            }
            let tf = tracer.trace(tape, &canonical, &lens)?;
            Ok(neg_log_prob(tape, tf.last_logits, d))
        }
        ObjectiveKind::FactErasure => {
            let tf = tracer.trace(tape, &canonical, &lens)?;
            Ok(token_prob(tape, tf.last_logits, answer))
        }
        ObjectiveKind::ErrorInjection => {
            let target = corpus.false_target_token(fact)?;
            if target == answer {
                return Err(Error::InvalidObjective(
                    "false target equals the fact's answer".into(),
                ));
            }
            let tf = tracer.trace(tape, &canonical, &lens)?;
            Ok(neg_log_prob(tape, tf.last_logits, target))
        }
        ObjectiveKind::HeadProjection => {
            let tf = tracer.trace(tape, &canonical, &lens)?;
            let mut hinges = Vec::with_capacity(tf.lens_logits.len());
            for (_, logits) in &tf.lens_logits {
                hinges.push(head_projection_hinge(
                    tape, *logits, answer, spec.top_k, spec.margin,
                ));
            }
            Ok(tape.mean_scalars(&hinges))
        }
        ObjectiveKind::MaxEntropy => {
            let tf = tracer.trace(tape, &canonical, &lens)?;
            let mut terms = Vec::with_capacity(tf.lens_logits.len());
            for (_, logits) in &tf.lens_logits {
                terms.push(tape.neg_entropy_row(*logits));
            }
            Ok(tape.mean_scalars(&terms))
        }
        ObjectiveKind::InputRephrasing => {
            if fact.defense_templates.is_empty() {
                return Err(Error::InvalidObjective(
                    "input rephrasing defense needs a non-empty defense paraphrase set".into(),
                ));
            }
            let mut prompts = vec![canonical];
            for &t in &fact.defense_templates {
                prompts.push(corpus.render_prompt_tokens(fact, t)?);
            }
            erasure_over_prompts(tape, &prompts, answer, &lens, tracer)
        }
    }
}

/// Mean of the answer's probability over a prompt set — the Input
/// Rephrasing defense body. With only the canonical prompt this reduces to
/// the Fact Erasure loss.
pub(crate) fn erasure_over_prompts(
    tape: &mut Tape,
    prompts: &[Vec<TokenId>],
    answer: TokenId,
    lens: &[usize],
    tracer: &mut dyn PromptTracer,
) -> Result<ValueId> {
    let mut terms = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let tf = tracer.trace(tape, prompt, lens)?;
        terms.push(token_prob(tape, tf.last_logits, answer));
    }
    Ok(tape.mean_scalars(&terms))
}

/// `-log softmax(logits)[token]` for a single-row logits node.
fn neg_log_prob(tape: &mut Tape, logits: ValueId, token: TokenId) -> ValueId {
    tape.cross_entropy_mean(logits, &[token as usize])
}

/// `softmax(logits)[token]` for a single-row logits node.
fn token_prob(tape: &mut Tape, logits: ValueId, token: TokenId) -> ValueId {
    let probs = tape.row_softmax(logits);
    tape.pick(probs, 0, token as usize)
}

/// One hinge term `max(0, D_answer - D_k + m)` on a lens logits node.
///
/// `D_k` is the k-th largest lens probability *excluding the answer*, so a
/// zero hinge certifies the answer sits below the visible top-k by the
/// margin. The ranking index comes from forward values; gradient flows
/// through both picked probabilities, with no stop-gradient.
pub(crate) fn head_projection_hinge(
    tape: &mut Tape,
    lens_logits: ValueId,
    answer: TokenId,
    k: usize,
    margin: f64,
) -> ValueId {
    let probs = tape.row_softmax(lens_logits);
    let row = tape.value(probs).row(0).to_vec();
    let mut order: Vec<usize> = (0..row.len()).filter(|&i| i != answer as usize).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let kth = order[(k - 1).min(order.len() - 1)];
    let d_answer = tape.pick(probs, 0, answer as usize);
    let d_k = tape.pick(probs, 0, kth);
    let diff = tape.sub(d_answer, d_k);
    let shifted = tape.affine(diff, 1.0, margin);
    tape.relu(shifted)
}

/// Evaluates an objective's loss on the model without editing anything.
pub fn objective_loss_value(
    model: &ModelState,
    corpus: &FactCorpus,
    fact: &Fact,
    spec: &ObjectiveSpec,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut tracer = PlainTracer { model };
    let loss = build_objective_loss(
        &mut tape,
        corpus,
        fact,
        spec,
        model.config.n_layers,
        &mut tracer,
    )?;
    Ok(tape.value(loss).as_scalar())
}

/// `-log p(d|x)` for the reserved empty target `d`.
pub fn empty_response_loss(model: &ModelState, corpus: &FactCorpus, fact: &Fact) -> Result<f64> {
    objective_loss_value(
        model,
        corpus,
        fact,
        &ObjectiveSpec::new(ObjectiveKind::EmptyResponse),
    )
}

/// `p(y|x)`, minimized directly.
pub fn fact_erasure_loss(model: &ModelState, corpus: &FactCorpus, fact: &Fact) -> Result<f64> {
    objective_loss_value(
        model,
        corpus,
        fact,
        &ObjectiveSpec::new(ObjectiveKind::FactErasure),
    )
}

/// `-log p(y*|x)` for the false target `y*`.
pub fn error_injection_loss(model: &ModelState, corpus: &FactCorpus, fact: &Fact) -> Result<f64> {
    objective_loss_value(
        model,
        corpus,
        fact,
        &ObjectiveSpec::new(ObjectiveKind::ErrorInjection),
    )
}

/// Mean hinge over the defended lens layers (plus the output
/// distribution).
pub fn head_projection_defense_loss(
    model: &ModelState,
    corpus: &FactCorpus,
    fact: &Fact,
    lens_layers: Vec<usize>,
    k: usize,
    margin: f64,
) -> Result<f64> {
    let spec = ObjectiveSpec {
        kind: ObjectiveKind::HeadProjection,
        lens_layers,
        margin,
        top_k: k,
    };
    objective_loss_value(model, corpus, fact, &spec)
}

/// Mean negative entropy over the defended lens layers, in `[-ln |V|, 0]`.
pub fn max_entropy_loss(
    model: &ModelState,
    corpus: &FactCorpus,
    fact: &Fact,
    lens_layers: Vec<usize>,
) -> Result<f64> {
    let spec = ObjectiveSpec {
        kind: ObjectiveKind::MaxEntropy,
        lens_layers,
        ..ObjectiveSpec::new(ObjectiveKind::MaxEntropy)
    };
    objective_loss_value(model, corpus, fact, &spec)
}

/// Mean of `p(y|·)` over the canonical prompt and all defense paraphrases.
pub fn input_rephrasing_defense_loss(
    model: &ModelState,
    corpus: &FactCorpus,
    fact: &Fact,
) -> Result<f64> {
    objective_loss_value(
        model,
        corpus,
        fact,
        &ObjectiveSpec::new(ObjectiveKind::InputRephrasing),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factlab::{generate_corpus, CorpusSpec};
    use crate::model::{answer_prob, ModelConfig};
    use crate::numcore::Matrix;

    fn setup() -> (ModelState, FactCorpus) {
        let corpus = generate_corpus(&CorpusSpec {
            n_facts: 8,
            n_relations: 2,
            n_dev_facts: 1,
            n_eval_facts: 2,
            random_pool_size: 3,
            seed: 21,
            ..CorpusSpec::default()
        })
        .unwrap();
        let model = ModelState::init(ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            vocab_size: corpus.vocab.len(),
            max_seq_len: 16,
            rng_seed: 8,
        })
        .unwrap();
        (model, corpus)
    }

    #[test]
    fn probability_losses_match_answer_prob() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[0];
        let prompt = corpus.canonical_prompt_tokens(fact).unwrap();

        let pe = fact_erasure_loss(&model, &corpus, fact).unwrap();
        let y = corpus.answer_token(fact).unwrap();
        assert!((pe - answer_prob(&model, &prompt, y).unwrap()).abs() < 1e-15);

        let d = corpus.vocab.empty_target();
        let le = empty_response_loss(&model, &corpus, fact).unwrap();
        assert!((le + answer_prob(&model, &prompt, d).unwrap().ln()).abs() < 1e-12);

        let ystar = corpus.false_target_token(fact).unwrap();
        let li = error_injection_loss(&model, &corpus, fact).unwrap();
        assert!((li + answer_prob(&model, &prompt, ystar).unwrap().ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_response_loss_values() {
        // p(d|x) = 1 -> 0 and p(d|x) = 1/e -> 1, via synthetic logits.
        let mut tape = Tape::new();
        let p = 1.0f64 / std::f64::consts::E;
        let logits = tape.input(Matrix::row_vector(&[p.ln(), (1.0 - p).ln()]));
        let loss = tape.cross_entropy_mean(logits, &[0]);
        assert!((tape.value(loss).as_scalar() - 1.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let sure = tape.input(Matrix::row_vector(&[500.0, 0.0]));
        let loss = tape.cross_entropy_mean(sure, &[0]);
        assert!(tape.value(loss).as_scalar().abs() < 1e-12);
    }

    #[test]
    fn hinge_formula_arithmetic() {
        // D = (0.5, 0.3, 0.2), answer = token 0, k = 1, m = 0.05:
        // hinge = 0.5 - 0.3 + 0.05 = 0.25.
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::row_vector(&[0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()]));
        let h = head_projection_hinge(&mut tape, logits, 0, 1, 0.05);
        assert!((tape.value(h).as_scalar() - 0.25).abs() < 1e-12);

        // Satisfied margin: answer at 0.1 vs top 0.3 -> 0.
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::row_vector(&[
            0.1f64.ln(),
            0.3f64.ln(),
            0.6f64.ln(),
        ]));
        let h = head_projection_hinge(&mut tape, logits, 0, 2, 0.05);
        assert!(tape.value(h).as_scalar().abs() < 1e-12);
    }

    #[test]
    fn entropy_loss_known_values() {
        // (0.5, 0.25, 0.125, 0.125): sum p ln p = -1.2130075659799042.
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::row_vector(&[
            0.5f64.ln(),
            0.25f64.ln(),
            0.125f64.ln(),
            0.125f64.ln(),
        ]));
        let s = tape.neg_entropy_row(logits);
        let v = tape.value(s).as_scalar();
        assert!((v + 1.2130075659799042).abs() < 1e-12);
        assert!((v + 1.2130).abs() < 1e-4);
    }

    #[test]
    fn max_entropy_loss_is_bounded() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[1];
        let v = max_entropy_loss(&model, &corpus, fact, vec![0, 1, 2, 3]).unwrap();
        let bound = (corpus.vocab.len() as f64).ln();
        assert!(v <= 0.0 && v >= -bound, "loss {v} outside [-ln|V|, 0]");
    }

    #[test]
    fn rephrasing_defense_reduces_to_erasure_on_single_prompt() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[2];
        let answer = corpus.answer_token(fact).unwrap();
        let canonical = corpus.canonical_prompt_tokens(fact).unwrap();
        let mut tape = Tape::new();
        let mut tracer = PlainTracer { model: &model };
        let loss = erasure_over_prompts(
            &mut tape,
            &[canonical],
            answer,
            &[model.config.n_layers],
            &mut tracer,
        )
        .unwrap();
        let expected = fact_erasure_loss(&model, &corpus, fact).unwrap();
        assert_eq!(tape.value(loss).as_scalar(), expected);
    }

    #[test]
    fn rephrasing_defense_rejects_empty_set() {
        let (model, corpus) = setup();
        let mut fact = corpus.facts[0].clone();
        fact.defense_templates.clear();
        fact.attack_templates.clear();
        assert!(input_rephrasing_defense_loss(&model, &corpus, &fact).is_err());
    }

    #[test]
    fn lens_spec_requires_layers() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[0];
        let spec = ObjectiveSpec::new(ObjectiveKind::MaxEntropy);
        assert!(objective_loss_value(&model, &corpus, fact, &spec).is_err());
    }

    #[test]
    fn losses_are_differentiable_and_match_finite_differences() {
        // Gradient check of every objective with respect to an injected
        // delta at the subject position, against central differences of
        // the same loss computed through plain forwards.
        use crate::model::{build_traced_forward, TraceOptions};
        use crate::testkit::{central_differences, max_gradient_error};

        let (model, corpus) = setup();
        let fact = &corpus.facts[3];
        let block = 0usize;
        let d = model.config.d_model;
        let base_delta: Vec<f64> = (0..d).map(|i| 0.05 * ((i as f64) * 0.7).sin()).collect();

        struct DeltaTracer<'m> {
            model: &'m ModelState,
            corpus: &'m FactCorpus,
            fact: &'m Fact,
            block: usize,
            delta: crate::numcore::ValueId,
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

        let specs = [
            ObjectiveSpec::new(ObjectiveKind::EmptyResponse),
            ObjectiveSpec::new(ObjectiveKind::FactErasure),
            ObjectiveSpec::new(ObjectiveKind::ErrorInjection),
            ObjectiveSpec::new(ObjectiveKind::HeadProjection).with_lens_layers(vec![1, 2, 3]),
            ObjectiveSpec::new(ObjectiveKind::MaxEntropy).with_lens_layers(vec![1, 2, 3]),
            ObjectiveSpec::new(ObjectiveKind::InputRephrasing),
        ];

        let eval_loss = |delta_vals: &[f64], spec: &ObjectiveSpec| -> f64 {
            let mut tape = Tape::new();
            let delta = tape.input(Matrix::row_vector(delta_vals));
            let mut tracer = DeltaTracer {
                model: &model,
                corpus: &corpus,
                fact,
                block,
                delta,
            };
            let loss = build_objective_loss(
                &mut tape,
                &corpus,
                fact,
                spec,
                model.config.n_layers,
                &mut tracer,
            )
            .unwrap();
            tape.value(loss).as_scalar()
        };

        for spec in &specs {
            let mut tape = Tape::new();
            let delta = tape.param(Matrix::row_vector(&base_delta));
            let mut tracer = DeltaTracer {
                model: &model,
                corpus: &corpus,
                fact,
                block,
                delta,
            };
            let loss = build_objective_loss(
                &mut tape,
                &corpus,
                fact,
                spec,
                model.config.n_layers,
                &mut tracer,
            )
            .unwrap();
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.wrt(delta).row(0).to_vec();
            let numeric = central_differences(&base_delta, 1e-5, |t| eval_loss(t, spec));
            let err = max_gradient_error(&analytic, &numeric, 1e-8);
            assert!(
                err <= 1e-4,
                "{}: gradient error {err}",
                spec.kind.name()
            );
        }
    }
}

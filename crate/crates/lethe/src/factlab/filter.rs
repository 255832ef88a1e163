//! Known-fact filtering and paraphrase re-splitting.

use super::{Fact, FactCorpus};
use crate::error::Result;
use crate::model::{answer_prob, greedy_generate, ModelState};

/// Minimum next-token probability for a fact to count as known; below this
/// a probability decrease is not meaningful to measure.
pub const KNOWN_PROB_THRESHOLD: f64 = 0.02;

/// Returns the ids of facts the model actually knows: greedy generation
/// from the canonical prompt produces the answer within the corpus
/// generation window, and the answer's next-token probability is at least
/// [`KNOWN_PROB_THRESHOLD`].
pub fn filter_known(model: &ModelState, corpus: &FactCorpus) -> Result<Vec<usize>> {
    let mut retained = Vec::new();
    for fact in &corpus.facts {
        let prompt = corpus.canonical_prompt_tokens(fact)?;
        let answer = corpus.answer_token(fact)?;
        let generated = greedy_generate(model, &prompt, corpus.gen_len)?;
        if !generated.contains(&answer) {
            continue;
        }
        if answer_prob(model, &prompt, answer)? < KNOWN_PROB_THRESHOLD {
            continue;
        }
        retained.push(fact.id);
    }
    Ok(retained)
}

/// Reassigns a fact's defense/attack paraphrase template sets.
///
/// Disjoint by default; `overlap` makes the attack set equal the defense
/// set (the control where the attacker uses exactly the defended
/// paraphrases). The canonical template is excluded from both sets.
pub fn split_paraphrases(
    corpus: &FactCorpus,
    fact: &Fact,
    n_defense: usize,
    n_attack: usize,
    seed: u64,
    overlap: bool,
) -> Result<Fact> {
    let mut updated = fact.clone();
    let n_templates = corpus.relation_of(fact).templates.len();
    super::generate::assign_paraphrases(
        &mut updated,
        n_templates,
        n_defense,
        n_attack,
        seed,
        overlap,
    )?;
    Ok(updated)
}

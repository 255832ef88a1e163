//! Synthetic fact corpus: relations with paraphrase templates, facts with
//! neighbors and false targets, and the known-fact filters.
//!
//! Entities, fillers, and answers are all made-up words, so a model can
//! only know a fact by having been trained on it — there is no pretrained
//! prior to leak through. Within a relation, several subjects share each
//! answer; those same-relation same-answer facts are a fact's *neighbors*
//! and back the neighborhood collateral-damage metric.

mod filter;
mod generate;
mod io;
mod vocab;

pub use filter::{filter_known, split_paraphrases, KNOWN_PROB_THRESHOLD};
pub use generate::{generate_corpus, CorpusSpec};
pub use io::{corpus_checksum, corpus_to_string, load_corpus, parse_corpus, save_corpus};
pub use vocab::{Vocab, EMPTY_TARGET_WORD};

use crate::error::{Error, Result};
use crate::model::TokenId;
use serde::{Deserialize, Serialize};

/// Marker occupying the subject slot inside a template.
pub const SUBJECT_SLOT: &str = "<subj>";

/// A relation: a family of surface templates sharing an answer pool.
///
/// Each template contains exactly one subject slot and ends immediately
/// before the answer position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub id: usize,
    /// Template 0 is the canonical phrasing.
    pub templates: Vec<Vec<String>>,
    /// Single-token answers; disjoint across relations.
    pub answer_pool: Vec<String>,
}

impl Relation {
    /// Substitutes `subject` into template `index`.
    pub fn render(&self, index: usize, subject: &[String]) -> Result<Vec<String>> {
        let template = self.templates.get(index).ok_or_else(|| {
            Error::CorpusGeneration(format!(
                "relation {} has no template {index}",
                self.id
            ))
        })?;
        let mut words = Vec::with_capacity(template.len() + subject.len());
        for w in template {
            if w == SUBJECT_SLOT {
                words.extend(subject.iter().cloned());
            } else {
                words.push(w.clone());
            }
        }
        Ok(words)
    }
}

/// One (subject, relation, answer) record with everything the defenses and
/// attacks need: a false target, disjoint defense/attack paraphrase
/// template sets, and neighbor fact ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub subject: Vec<String>,
    pub relation: usize,
    pub answer: String,
    pub false_target: String,
    /// Rendered canonical prompt (template 0 with the subject substituted).
    pub canonical_prompt: Vec<String>,
    /// Template indices used when a defense optimizes over paraphrases.
    pub defense_templates: Vec<usize>,
    /// Held-out template indices reserved for the rephrasing attack.
    pub attack_templates: Vec<usize>,
    /// Fact ids sharing this relation and answer, with different subjects.
    pub neighbors: Vec<usize>,
}

/// The corpus plus split assignments and the derived vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct FactCorpus {
    pub seed: u64,
    /// Greedy-generation window for the known-fact filter and delta-acc.
    pub gen_len: usize,
    /// Upper bound enforced on rendered prompt lengths.
    pub max_prompt_len: usize,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    /// Facts used to tune attack budgets; disjoint from `eval_facts`.
    pub dev_facts: Vec<usize>,
    /// Facts whose deletions are evaluated.
    pub eval_facts: Vec<usize>,
    /// Fact ids sampled for the random collateral-damage pool; disjoint
    /// from the facts under edit.
    pub random_pool: Vec<usize>,
    pub vocab: Vocab,
}

impl FactCorpus {
    pub fn relation_of(&self, fact: &Fact) -> &Relation {
        &self.relations[fact.relation]
    }

    /// Renders a fact through one of its relation's templates, rejecting
    /// prompts longer than the corpus limit.
    pub fn render_prompt(&self, fact: &Fact, template_index: usize) -> Result<Vec<String>> {
        let words = self.relation_of(fact).render(template_index, &fact.subject)?;
        if words.len() > self.max_prompt_len {
            return Err(Error::SequenceTooLong {
                len: words.len(),
                max: self.max_prompt_len,
            });
        }
        Ok(words)
    }

    pub fn render_prompt_tokens(&self, fact: &Fact, template_index: usize) -> Result<Vec<TokenId>> {
        let words = self.render_prompt(fact, template_index)?;
        self.vocab.encode(&words)
    }

    pub fn canonical_prompt_tokens(&self, fact: &Fact) -> Result<Vec<TokenId>> {
        self.vocab.encode(&fact.canonical_prompt)
    }

    pub fn answer_token(&self, fact: &Fact) -> Result<TokenId> {
        self.vocab.id(&fact.answer)
    }

    pub fn false_target_token(&self, fact: &Fact) -> Result<TokenId> {
        self.vocab.id(&fact.false_target)
    }

    /// Index of the last subject token inside `prompt`, located by
    /// searching for the subject token subsequence (last occurrence wins).
    pub fn subject_last_position(&self, fact: &Fact, prompt: &[TokenId]) -> Result<usize> {
        let subject = self.vocab.encode(&fact.subject)?;
        if subject.is_empty() || prompt.len() < subject.len() {
            return Err(Error::SubjectNotFound);
        }
        let mut found = None;
        for start in 0..=(prompt.len() - subject.len()) {
            if prompt[start..start + subject.len()] == subject[..] {
                found = Some(start + subject.len() - 1);
            }
        }
        found.ok_or(Error::SubjectNotFound)
    }

    /// All (prompt, answer) training lines: every fact rendered through
    /// every template of its relation, with the answer appended.
    pub fn training_lines(&self) -> Result<Vec<Vec<TokenId>>> {
        let mut lines = Vec::new();
        for fact in &self.facts {
            let answer = self.answer_token(fact)?;
            for t in 0..self.relation_of(fact).templates.len() {
                let mut line = self.render_prompt_tokens(fact, t)?;
                line.push(answer);
                lines.push(line);
            }
        }
        Ok(lines)
    }

    /// Neighbor prompts of a fact: canonical prompts of same-relation,
    /// same-answer facts (each paired with the shared answer token).
    pub fn neighbor_prompts(&self, fact: &Fact) -> Result<Vec<(Vec<TokenId>, TokenId)>> {
        fact.neighbors
            .iter()
            .map(|&n| {
                let nf = &self.facts[n];
                Ok((self.canonical_prompt_tokens(nf)?, self.answer_token(nf)?))
            })
            .collect()
    }

    /// (prompt, answer) pairs for the random collateral pool.
    pub fn random_pool_prompts(&self) -> Result<Vec<(Vec<TokenId>, TokenId)>> {
        self.random_pool
            .iter()
            .map(|&i| {
                let f = &self.facts[i];
                Ok((self.canonical_prompt_tokens(f)?, self.answer_token(f)?))
            })
            .collect()
    }

    /// Structural invariants; generation validates before returning and
    /// loading validates after parsing.
    pub fn validate(&self) -> Result<()> {
        for fact in &self.facts {
            if fact.answer == fact.false_target {
                return Err(Error::CorpusGeneration(format!(
                    "fact {} has false target equal to its answer",
                    fact.id
                )));
            }
            // Disjoint sets normally; identical sets are the sanctioned
            // overlap control. Anything in between is a construction bug.
            let overlap_mode = fact.defense_templates == fact.attack_templates;
            if !overlap_mode {
                for d in &fact.defense_templates {
                    if fact.attack_templates.contains(d) {
                        return Err(Error::CorpusGeneration(format!(
                            "fact {}: defense and attack paraphrases partially overlap",
                            fact.id
                        )));
                    }
                }
            }
            for &n in &fact.neighbors {
                let nf = self.facts.get(n).ok_or_else(|| {
                    Error::CorpusGeneration(format!("fact {}: bad neighbor id {n}", fact.id))
                })?;
                if nf.relation != fact.relation || nf.answer != fact.answer || nf.id == fact.id {
                    return Err(Error::CorpusGeneration(format!(
                        "fact {}: neighbor {n} does not share relation/answer",
                        fact.id
                    )));
                }
            }
            let rendered = self.relation_of(fact).render(0, &fact.subject)?;
            if rendered != fact.canonical_prompt {
                return Err(Error::CorpusGeneration(format!(
                    "fact {}: canonical prompt does not match template 0",
                    fact.id
                )));
            }
        }
        for e in &self.eval_facts {
            if self.dev_facts.contains(e) {
                return Err(Error::CorpusGeneration(
                    "dev and eval fact sets overlap".into(),
                ));
            }
            if self.random_pool.contains(e) {
                return Err(Error::CorpusGeneration(
                    "random pool overlaps facts under edit".into(),
                ));
            }
        }
        Ok(())
    }
}

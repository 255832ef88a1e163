//! Deterministic corpus generation.

use super::vocab::{Vocab, EMPTY_TARGET_WORD};
use super::{Fact, FactCorpus, Relation, SUBJECT_SLOT};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SeededRng};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Generation parameters. Defaults give the standard desk-scale corpus:
/// 200 facts over 10 relations, 12 templates per relation, 5 defense and
/// 4 attack paraphrases per fact, answers shared by ~6-7 subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_facts: usize,
    pub n_relations: usize,
    pub seed: u64,
    pub templates_per_relation: usize,
    pub n_defense_paraphrases: usize,
    pub n_attack_paraphrases: usize,
    /// Target number of subjects sharing one answer (neighbor group size).
    pub answer_group_size: usize,
    pub n_dev_facts: usize,
    pub n_eval_facts: usize,
    pub random_pool_size: usize,
    /// Greedy-generation window used by the known filter and delta-acc.
    pub gen_len: usize,
    pub max_prompt_len: usize,
    /// Overlap control: give every fact identical defense and attack
    /// paraphrase sets instead of disjoint ones.
    pub overlap_paraphrases: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_facts: 200,
            n_relations: 10,
            seed: 0,
            templates_per_relation: 12,
            n_defense_paraphrases: 5,
            n_attack_paraphrases: 4,
            answer_group_size: 6,
            n_dev_facts: 25,
            n_eval_facts: 50,
            random_pool_size: 100,
            gen_len: 8,
            max_prompt_len: 7,
            overlap_paraphrases: false,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.n_relations < 2 || self.n_facts < self.n_relations {
            return Err(Error::InvalidConfig(
                "need n_facts >= n_relations >= 2".into(),
            ));
        }
        let needed = 1 + self.n_defense_paraphrases + self.n_attack_paraphrases;
        if self.templates_per_relation < needed {
            return Err(Error::InvalidConfig(format!(
                "templates_per_relation {} cannot cover canonical + {} defense + {} attack",
                self.templates_per_relation,
                self.n_defense_paraphrases,
                self.n_attack_paraphrases
            )));
        }
        if self.n_dev_facts + self.n_eval_facts + self.random_pool_size > self.n_facts {
            return Err(Error::InvalidConfig(
                "dev + eval + random pool exceeds corpus size".into(),
            ));
        }
        if self.answer_group_size < 2 {
            return Err(Error::InvalidConfig("answer_group_size must be >= 2".into()));
        }
        // Longest render: 2 prefix + 2 subject + 2 suffix words.
        if self.max_prompt_len < 6 {
            return Err(Error::InvalidConfig("max_prompt_len must be >= 6".into()));
        }
        Ok(())
    }
}

/// Invents pronounceable unique words from a seeded stream.
struct WordForge {
    rng: SeededRng,
    used: BTreeSet<String>,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kl",
    "pr", "st", "tr", "vl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ei", "ou"];
const CODAS: &[&str] = &["", "n", "r", "s", "l", "k", "m", "x"];

impl WordForge {
    fn new(seed: u64) -> Self {
        let mut used = BTreeSet::new();
        used.insert(EMPTY_TARGET_WORD.to_string());
        used.insert(SUBJECT_SLOT.to_string());
        WordForge {
            rng: rng_from_seed(seed),
            used,
        }
    }

    fn word(&mut self) -> Result<String> {
        for _ in 0..10_000 {
            let syllables = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[self.rng.gen_range(0..ONSETS.len())]);
                w.push_str(VOWELS[self.rng.gen_range(0..VOWELS.len())]);
            }
            w.push_str(CODAS[self.rng.gen_range(0..CODAS.len())]);
            if self.used.insert(w.clone()) {
                return Ok(w);
            }
        }
        Err(Error::CorpusGeneration(
            "word pool exhausted while generating corpus".into(),
        ))
    }

    fn words(&mut self, n: usize) -> Result<Vec<String>> {
        (0..n).map(|_| self.word()).collect()
    }
}

/// Deterministically generates a corpus from `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<FactCorpus> {
    spec.validate()?;
    let mut forge = WordForge::new(derive_seed(spec.seed, "corpus-words", 0));
    let mut rng = rng_from_seed(derive_seed(spec.seed, "corpus-structure", 0));

    // Facts per relation: as even as possible, every relation nonempty.
    let base = spec.n_facts / spec.n_relations;
    let extra = spec.n_facts % spec.n_relations;
    let counts: Vec<usize> = (0..spec.n_relations)
        .map(|r| base + usize::from(r < extra))
        .collect();

    let mut relations = Vec::with_capacity(spec.n_relations);
    for (r, &f_r) in counts.iter().enumerate() {
        let mut templates = Vec::with_capacity(spec.templates_per_relation);
        for _ in 0..spec.templates_per_relation {
            let prefix = forge.words(rng.gen_range(1..=2))?;
            let suffix = forge.words(rng.gen_range(1..=2))?;
            let mut t: Vec<String> = prefix;
            t.push(SUBJECT_SLOT.to_string());
            t.extend(suffix);
            templates.push(t);
        }
        // One answer per neighbor group, plus spares so a false target
        // distinct from the answer always exists.
        let n_groups = (f_r / spec.answer_group_size).max(1);
        let pool = forge.words(n_groups + 2)?;
        relations.push(Relation {
            id: r,
            templates,
            answer_pool: pool,
        });
    }

    let mut facts: Vec<Fact> = Vec::with_capacity(spec.n_facts);
    for (r, &f_r) in counts.iter().enumerate() {
        let relation = &relations[r];
        let n_groups = (f_r / spec.answer_group_size).max(1);
        // Balanced group sizes so every member keeps >= group_size - 1
        // neighbors even when the division is uneven.
        let group_of = |i: usize| i * n_groups / f_r;
        let first_id = facts.len();
        for i in 0..f_r {
            let n_subject_words = if rng.gen_range(0..10) < 3 { 2 } else { 1 };
            let subject = forge.words(n_subject_words)?;
            let answer = relation.answer_pool[group_of(i)].clone();
            let false_target = loop {
                let cand =
                    &relation.answer_pool[rng.gen_range(0..relation.answer_pool.len())];
                if *cand != answer {
                    break cand.clone();
                }
            };
            let canonical_prompt = relation.render(0, &subject)?;
            if canonical_prompt.len() > spec.max_prompt_len {
                return Err(Error::SequenceTooLong {
                    len: canonical_prompt.len(),
                    max: spec.max_prompt_len,
                });
            }
            facts.push(Fact {
                id: facts.len(),
                subject,
                relation: r,
                answer,
                false_target,
                canonical_prompt,
                defense_templates: Vec::new(),
                attack_templates: Vec::new(),
                neighbors: Vec::new(),
            });
        }
        // Neighbors: same relation, same answer, different subject.
        for i in first_id..facts.len() {
            let me = facts[i].id;
            let answer = facts[i].answer.clone();
            let neighbors: Vec<usize> = (first_id..facts.len())
                .filter(|&j| j != me && facts[j].answer == answer)
                .collect();
            facts[i].neighbors = neighbors;
        }
    }

    // Paraphrase split per fact.
    for fact in facts.iter_mut() {
        let split_seed = derive_seed(spec.seed, "paraphrase-split", fact.id as u64);
        assign_paraphrases(
            fact,
            spec.templates_per_relation,
            spec.n_defense_paraphrases,
            spec.n_attack_paraphrases,
            split_seed,
            spec.overlap_paraphrases,
        )?;
    }

    // Splits: eval, dev, then the random pool from the remainder, so the
    // pool never contains a fact under edit.
    let mut ids: Vec<usize> = (0..facts.len()).collect();
    ids.shuffle(&mut rng);
    let eval_facts: Vec<usize> = ids[..spec.n_eval_facts].to_vec();
    let dev_facts: Vec<usize> = ids[spec.n_eval_facts..spec.n_eval_facts + spec.n_dev_facts].to_vec();
    let random_pool: Vec<usize> = ids
        [spec.n_eval_facts + spec.n_dev_facts..spec.n_eval_facts + spec.n_dev_facts + spec.random_pool_size]
        .to_vec();

    let mut words: Vec<String> = Vec::new();
    for rel in &relations {
        for t in &rel.templates {
            words.extend(t.iter().filter(|w| *w != SUBJECT_SLOT).cloned());
        }
        words.extend(rel.answer_pool.iter().cloned());
    }
    for f in &facts {
        words.extend(f.subject.iter().cloned());
    }
    let vocab = Vocab::build(words);

    let corpus = FactCorpus {
        seed: spec.seed,
        gen_len: spec.gen_len,
        max_prompt_len: spec.max_prompt_len,
        relations,
        facts,
        dev_facts,
        eval_facts,
        random_pool,
        vocab,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Assigns defense and attack paraphrase template sets for one fact.
/// Canonical template 0 belongs to neither set. In overlap mode the attack
/// set equals the defense set (the control condition); otherwise the two
/// sets are disjoint.
pub(crate) fn assign_paraphrases(
    fact: &mut Fact,
    n_templates: usize,
    n_defense: usize,
    n_attack: usize,
    seed: u64,
    overlap: bool,
) -> Result<()> {
    let available = n_templates.saturating_sub(1);
    let needed = if overlap {
        n_defense.max(n_attack)
    } else {
        n_defense + n_attack
    };
    if needed > available {
        return Err(Error::CorpusGeneration(format!(
            "fact {}: need {needed} paraphrase templates, only {available} available",
            fact.id
        )));
    }
    let mut pool: Vec<usize> = (1..n_templates).collect();
    let mut rng = rng_from_seed(seed);
    pool.shuffle(&mut rng);
    if overlap {
        let shared: Vec<usize> = pool[..n_defense].to_vec();
        fact.defense_templates = shared.clone();
        fact.attack_templates = shared;
    } else {
        fact.defense_templates = pool[..n_defense].to_vec();
        fact.attack_templates = pool[n_defense..n_defense + n_attack].to_vec();
    }
    Ok(())
}

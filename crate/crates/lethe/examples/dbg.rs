use lethe::defense::{ObjectiveKind, ObjectiveSpec};
use lethe::editor::*;
use lethe::factlab::{generate_corpus, CorpusSpec};
use lethe::model::{ModelConfig, ModelState};

fn main() {
    let corpus = generate_corpus(&CorpusSpec {
        n_facts: 8, n_relations: 2, n_dev_facts: 1, n_eval_facts: 2,
        random_pool_size: 3, seed: 23, ..CorpusSpec::default()
    }).unwrap();
    let model = ModelState::init(ModelConfig {
        n_layers: 3, d_model: 16, n_heads: 2, d_mlp: 24,
        vocab_size: corpus.vocab.len(), max_seq_len: 16, rng_seed: 44,
    }).unwrap();
    let fact = &corpus.facts[1];
    let objective = ObjectiveSpec::new(ObjectiveKind::FactErasure);
    let cfg = ValueOptConfig { steps: 8, ..ValueOptConfig::default() };
    let (value, curve) = optimize_value(&model, &corpus, fact, &objective, 2, &cfg).unwrap();
    let (key, _, _) = compute_key(&model, &corpus, fact, 2).unwrap();
    let orig = current_value(&model.blocks[2].w_out, &key);
    let dn: f64 = value.iter().zip(orig.iter()).map(|(v,o)| (v-o)*(v-o)).sum::<f64>().sqrt();
    println!("curve: {curve:?}");
    println!("delta norm: {dn}");
    let prompt = corpus.canonical_prompt_tokens(fact).unwrap();
    let pos = corpus.subject_last_position(fact, &prompt).unwrap();
    println!("prompt len {} subject pos {}", prompt.len(), pos);
}

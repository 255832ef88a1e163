//! Spreading one edit across several contiguous blocks.
//!
//! The target value is optimized once at the last block of the set. The
//! engine then walks the blocks in ascending order; at each one it
//! recomputes the fact's key and the remaining residual at the last block
//! (both on the partially edited model), and applies a rank-one edit
//! moving that block's output a `1/remaining` fraction of the residual.
//! A single-block set degenerates to the plain rank-one edit.

use super::key::{compute_key, KeyCovariance};
use super::rank_one::{current_value, rank_one_update};
use super::value_opt::{optimize_value, ValueOptConfig};
use crate::defense::ObjectiveSpec;
use crate::error::{Error, Result};
use crate::factlab::{Fact, FactCorpus};
use crate::model::ModelState;
use std::collections::BTreeMap;

/// Applies the spread edit. `covariances` must hold an entry per edited
/// block (estimated on the base model). Returns the edited model and the
/// value-optimization loss curve.
pub fn multi_layer_edit(
    model: &ModelState,
    corpus: &FactCorpus,
    fact: &Fact,
    objective: &ObjectiveSpec,
    blocks: &[usize],
    covariances: &BTreeMap<usize, KeyCovariance>,
    config: &ValueOptConfig,
) -> Result<(ModelState, Vec<f64>)> {
    if blocks.is_empty() {
        return Err(Error::InvalidConfig("multi-layer edit needs blocks".into()));
    }
    for w in blocks.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(Error::InvalidConfig(format!(
                "multi-layer blocks must be contiguous ascending, got {blocks:?}"
            )));
        }
    }
    let last = *blocks.last().expect("nonempty");
    if last >= model.config.n_layers {
        return Err(Error::LayerOutOfRange {
            layer: last,
            limit: model.config.n_layers - 1,
        });
    }
    for b in blocks {
        if !covariances.contains_key(b) {
            return Err(Error::InvalidConfig(format!(
                "missing key covariance for block {b}"
            )));
        }
    }

    // Target value at the last block, on the unedited model.
    let (target, curve) = optimize_value(model, corpus, fact, objective, last, config)?;

    let mut edited = model.clone();
    let n = blocks.len();
    for (i, &block) in blocks.iter().enumerate() {
        // Remaining gap at the last block, measured on the current model.
        let (key_last, _, _) = compute_key(&edited, corpus, fact, last)?;
        let out_last = current_value(&edited.blocks[last].w_out, &key_last);
        let residual: Vec<f64> = target
            .iter()
            .zip(out_last.iter())
            .map(|(t, o)| t - o)
            .collect();

        let fraction = 1.0 / (n - i) as f64;
        let (key, _, _) = compute_key(&edited, corpus, fact, block)?;
        let out = current_value(&edited.blocks[block].w_out, &key);
        let value: Vec<f64> = out
            .iter()
            .zip(residual.iter())
            .map(|(o, r)| o + fraction * r)
            .collect();
        let w_new = rank_one_update(
            &edited.blocks[block].w_out,
            &key,
            &value,
            &covariances[&block],
        )?;
        edited.blocks[block].w_out = w_new;
    }
    Ok((edited, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::ObjectiveKind;
    use crate::editor::{estimate_covariance, rank_one_edit};
    use crate::factlab::{generate_corpus, CorpusSpec};
    use crate::model::ModelConfig;
    use crate::testkit::{second_singular_value_bound, top_singular_triple};

    fn setup() -> (ModelState, FactCorpus) {
        let corpus = generate_corpus(&CorpusSpec {
            n_facts: 8,
            n_relations: 2,
            n_dev_facts: 1,
            n_eval_facts: 2,
            random_pool_size: 3,
            seed: 23,
            ..CorpusSpec::default()
        })
        .unwrap();
        let model = ModelState::init(ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_mlp: 24,
            vocab_size: corpus.vocab.len(),
            max_seq_len: 16,
            rng_seed: 44,
        })
        .unwrap();
        (model, corpus)
    }

    fn covs(model: &ModelState, corpus: &FactCorpus, blocks: &[usize]) -> BTreeMap<usize, KeyCovariance> {
        blocks
            .iter()
            .map(|&b| {
                (
                    b,
                    estimate_covariance(model, corpus, b, 20, 1e-4, 100 + b as u64).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn single_block_set_equals_rank_one_edit() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[0];
        let objective = ObjectiveSpec::new(ObjectiveKind::FactErasure);
        let cfg = ValueOptConfig {
            steps: 5,
            ..ValueOptConfig::default()
        };
        let cov_map = covs(&model, &corpus, &[1]);

        let (spread, _) =
            multi_layer_edit(&model, &corpus, fact, &objective, &[1], &cov_map, &cfg).unwrap();

        let (value, _) = crate::editor::optimize_value(&model, &corpus, fact, &objective, 1, &cfg).unwrap();
        let (key, _, _) = compute_key(&model, &corpus, fact, 1).unwrap();
        let direct = rank_one_edit(&model, &key, &value, &cov_map[&1], 1).unwrap();

        assert_eq!(
            spread.blocks[1].w_out.data(),
            direct.blocks[1].w_out.data(),
            "degenerate spread must equal the direct rank-one edit"
        );
    }

    #[test]
    fn every_per_block_delta_is_rank_one() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[1];
        let objective = ObjectiveSpec::new(ObjectiveKind::FactErasure);
        let blocks = [0usize, 1, 2];
        let cov_map = covs(&model, &corpus, &blocks);
        let (edited, _) = multi_layer_edit(
            &model,
            &corpus,
            fact,
            &objective,
            &blocks,
            &cov_map,
            &ValueOptConfig {
                steps: 8,
                ..ValueOptConfig::default()
            },
        )
        .unwrap();
        for &b in &blocks {
            let delta = edited.blocks[b].w_out.sub(&model.blocks[b].w_out);
            let (s1, _, _) = top_singular_triple(&delta);
            let s2 = second_singular_value_bound(&delta);
            assert!(s1 > 0.0, "block {b} delta vanished");
            assert!(s2 <= 1e-8 * s1, "block {b}: s2 {s2} vs s1 {s1}");
        }
        // Untouched parameters stay bit-identical.
        for ((name, a), b) in model
            .param_names()
            .iter()
            .zip(model.params())
            .zip(edited.params())
        {
            if name.ends_with(".w_out") {
                continue;
            }
            assert_eq!(a.data(), b.data(), "{name} changed");
        }
    }

    #[test]
    fn non_contiguous_blocks_rejected() {
        let (model, corpus) = setup();
        let fact = &corpus.facts[0];
        let objective = ObjectiveSpec::new(ObjectiveKind::FactErasure);
        let cov_map = covs(&model, &corpus, &[0, 2]);
        let err = multi_layer_edit(
            &model,
            &corpus,
            fact,
            &objective,
            &[0, 2],
            &cov_map,
            &ValueOptConfig::default(),
        );
        assert!(err.is_err());
    }
}

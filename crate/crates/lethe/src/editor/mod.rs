//! Editing engines: rank-one closed form, multi-layer spread, and
//! constrained finetuning, each applying any deletion objective.
//!
//! All three engines are pure in the same sense: the input model is
//! read-only, the output is a fresh [`ModelState`], and every parameter
//! outside the declared target `w_out` matrices stays bit-identical.

mod finetune;
mod key;
mod multi_layer;
mod rank_one;
mod value_opt;

pub use finetune::{constrained_finetune, FinetuneConfig};
pub use key::{compute_key, covariance_from_keys, estimate_covariance, KeyCovariance};
pub use multi_layer::multi_layer_edit;
pub use rank_one::{current_value, rank_one_edit, rank_one_update};
pub use value_opt::{optimize_value, ValueOptConfig};

use crate::defense::ObjectiveSpec;
use crate::error::{Error, Result};
use crate::factlab::{Fact, FactCorpus};
use crate::model::{answer_prob, ModelState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditEngine {
    RankOne,
    MultiLayer,
    ConstrainedFt,
}

impl EditEngine {
    pub fn name(self) -> &'static str {
        match self {
            EditEngine::RankOne => "rank-one",
            EditEngine::MultiLayer => "multi-layer",
            EditEngine::ConstrainedFt => "constrained-ft",
        }
    }
}

/// Engine selection plus every tunable an edit needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub engine: EditEngine,
    /// Blocks whose `w_out` may change: one block for rank-one and
    /// constrained finetuning, a contiguous ascending run for multi-layer.
    pub target_blocks: Vec<usize>,
    /// Lens layer at which probability objectives read the output
    /// distribution; `None` means the final output.
    #[serde(default)]
    pub loss_layer: Option<usize>,
    #[serde(default = "d_v_steps")]
    pub v_steps: usize,
    #[serde(default = "d_v_lr")]
    pub v_lr: f64,
    #[serde(default = "d_v_wd")]
    pub v_weight_decay: f64,
    #[serde(default = "d_clamp")]
    pub clamp_norm_factor: f64,
    /// Max-norm bound (constrained finetuning only).
    #[serde(default = "d_eps")]
    pub ft_epsilon: f64,
    #[serde(default = "d_ft_steps")]
    pub ft_steps: usize,
    #[serde(default = "d_ft_lr")]
    pub ft_lr: f64,
    /// Prompts sampled for the key covariance estimate.
    #[serde(default = "d_cov_samples")]
    pub cov_samples: usize,
    /// Ridge, relative to trace(C)/d_mlp.
    #[serde(default = "d_cov_ridge")]
    pub cov_ridge_rel: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_v_steps() -> usize {
    25
}
fn d_v_lr() -> f64 {
    5e-1
}
fn d_v_wd() -> f64 {
    5e-5
}
fn d_clamp() -> f64 {
    2.0
}
fn d_eps() -> f64 {
    5e-4
}
fn d_ft_steps() -> usize {
    50
}
fn d_ft_lr() -> f64 {
    5e-4
}
fn d_cov_samples() -> usize {
    100
}
fn d_cov_ridge() -> f64 {
    1e-4
}

impl EditConfig {
    pub fn rank_one(block: usize) -> Self {
        EditConfig {
            engine: EditEngine::RankOne,
            target_blocks: vec![block],
            loss_layer: None,
            v_steps: d_v_steps(),
            v_lr: d_v_lr(),
            v_weight_decay: d_v_wd(),
            clamp_norm_factor: d_clamp(),
            ft_epsilon: d_eps(),
            ft_steps: d_ft_steps(),
            ft_lr: d_ft_lr(),
            cov_samples: d_cov_samples(),
            cov_ridge_rel: d_cov_ridge(),
            seed: 0,
        }
    }

    pub fn multi_layer(blocks: Vec<usize>) -> Self {
        EditConfig {
            engine: EditEngine::MultiLayer,
            target_blocks: blocks,
            ..EditConfig::rank_one(0)
        }
    }

    pub fn constrained_ft(block: usize, epsilon: f64) -> Self {
        EditConfig {
            engine: EditEngine::ConstrainedFt,
            ft_epsilon: epsilon,
            ..EditConfig::rank_one(block)
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.target_blocks.is_empty() {
            return Err(Error::InvalidConfig("edit needs target blocks".into()));
        }
        for &b in &self.target_blocks {
            if b >= n_layers {
                return Err(Error::LayerOutOfRange {
                    layer: b,
                    limit: n_layers - 1,
                });
            }
        }
        if let Some(l) = self.loss_layer {
            if l > n_layers {
                return Err(Error::LayerOutOfRange {
                    layer: l,
                    limit: n_layers,
                });
            }
        }
        match self.engine {
            EditEngine::MultiLayer => {
                for w in self.target_blocks.windows(2) {
                    if w[1] != w[0] + 1 {
                        return Err(Error::InvalidConfig(
                            "multi-layer target blocks must be contiguous ascending".into(),
                        ));
                    }
                }
            }
            EditEngine::RankOne | EditEngine::ConstrainedFt => {
                if self.target_blocks.len() != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "{} edits exactly one block",
                        self.engine.name()
                    )));
                }
            }
        }
        if self.engine == EditEngine::ConstrainedFt && !(self.ft_epsilon > 0.0) {
            return Err(Error::InvalidConfig(
                "constrained finetuning needs epsilon > 0".into(),
            ));
        }
        Ok(())
    }

    fn value_opt(&self) -> ValueOptConfig {
        ValueOptConfig {
            steps: self.v_steps,
            learning_rate: self.v_lr,
            weight_decay: self.v_weight_decay,
            clamp_norm_factor: self.clamp_norm_factor,
        }
    }
}

/// Outcome of one edit: the edited model plus the measurements every
/// report needs. The original model is untouched.
#[derive(Clone, Debug)]
pub struct EditResult {
    pub edited: ModelState,
    pub objective_curve: Vec<f64>,
    /// `p(y|x)` for the fact's true answer, before and after.
    pub p_answer_before: f64,
    pub p_answer_after: f64,
    /// `p(target|x)` for the objective's push target, before and after.
    pub p_target_before: f64,
    pub p_target_after: f64,
}

/// Precomputed per-block key covariances for one base model. Rank-one and
/// multi-layer edits of many facts share these.
pub fn covariances_for(
    model: &ModelState,
    corpus: &FactCorpus,
    config: &EditConfig,
) -> Result<BTreeMap<usize, KeyCovariance>> {
    let mut map = BTreeMap::new();
    if config.engine == EditEngine::ConstrainedFt {
        return Ok(map);
    }
    for &b in &config.target_blocks {
        let cov = estimate_covariance(
            model,
            corpus,
            b,
            config.cov_samples,
            config.cov_ridge_rel,
            crate::rng::derive_seed(config.seed, "covariance", b as u64),
        )?;
        map.insert(b, cov);
    }
    Ok(map)
}

/// Runs one edit end to end: measure, apply the engine, measure again.
pub fn apply_edit(
    model: &ModelState,
    corpus: &FactCorpus,
    fact: &Fact,
    objective: &ObjectiveSpec,
    config: &EditConfig,
    covariances: &BTreeMap<usize, KeyCovariance>,
) -> Result<EditResult> {
    config.validate(model.config.n_layers)?;
    objective.validate(model.config.n_layers)?;

    let prompt = corpus.canonical_prompt_tokens(fact)?;
    let answer = corpus.answer_token(fact)?;
    let target = objective.push_target(corpus, fact)?;
    let p_answer_before = answer_prob(model, &prompt, answer)?;
    let p_target_before = answer_prob(model, &prompt, target)?;

    let (edited, objective_curve) = match config.engine {
        EditEngine::RankOne => {
            let block = config.target_blocks[0];
            let (value, curve) =
                optimize_value(model, corpus, fact, objective, block, &config.value_opt())?;
            let (key, _, _) = compute_key(model, corpus, fact, block)?;
            let cov = covariances.get(&block).ok_or_else(|| {
                Error::InvalidConfig(format!("missing covariance for block {block}"))
            })?;
            (rank_one_edit(model, &key, &value, cov, block)?, curve)
        }
        EditEngine::MultiLayer => multi_layer_edit(
            model,
            corpus,
            fact,
            objective,
            &config.target_blocks,
            covariances,
            &config.value_opt(),
        )?,
        EditEngine::ConstrainedFt => constrained_finetune(
            model,
            corpus,
            fact,
            objective,
            config.target_blocks[0],
            &FinetuneConfig {
                epsilon: config.ft_epsilon,
                steps: config.ft_steps,
                learning_rate: config.ft_lr,
            },
        )?,
    };

    let p_answer_after = answer_prob(&edited, &prompt, answer)?;
    let p_target_after = answer_prob(&edited, &prompt, target)?;
    for v in [p_answer_after, p_target_after] {
        if !v.is_finite() {
            return Err(Error::Diverged("edited model produced non-finite probabilities".into()));
        }
    }
    Ok(EditResult {
        edited,
        objective_curve,
        p_answer_before,
        p_answer_after,
        p_target_before,
        p_target_after,
    })
}

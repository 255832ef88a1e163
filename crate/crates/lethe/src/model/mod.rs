//! A minimal decoder-only transformer with per-layer capture.
//!
//! The architecture is the GPT lineage at desk scale: learned token and
//! position embeddings, pre-norm blocks of multi-head causal attention and
//! a GELU MLP, a final layer norm, and an untied unembedding matrix. No
//! biases in the projections, no dropout, no KV cache.
//!
//! Two index spaces matter throughout the crate:
//!
//! * **block index** `0..n_layers` — a transformer block, the unit edits
//!   target (each block's MLP output matrix `w_out`);
//! * **lens layer** `0..=n_layers` — a residual-stream snapshot at the last
//!   input position: layer 0 is the embedding output, layer `b + 1` is the
//!   state after block `b`. [`logit_lens`] projects any of these onto the
//!   vocabulary; lens layer `n_layers` reproduces the output distribution
//!   exactly because it takes the same normalization path.

mod checkpoint;
mod forward;
mod sample;
mod traced;
mod train;

pub use checkpoint::{load_model, model_checksum, save_model};
pub use forward::{forward, forward_full_logits, logit_lens, ForwardTrace, LensDistribution};
pub use sample::{answer_prob, greedy_generate, sample_next};
pub use traced::{build_traced_forward, TraceOptions, TracedForward, TracedParams, Trainable};
pub use train::{train, TrainConfig};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::{rng_from_seed, standard_normal};
use serde::{Deserialize, Serialize};

/// Token identifier into a [`crate::factlab::Vocab`].
pub type TokenId = u32;

/// Architecture hyperparameters. `vocab_size` comes from the corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_mlp == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Defaults for the toy lab; `vocab_size` must still be set from the
    /// corpus before constructing a model.
    pub fn toy(vocab_size: usize, rng_seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size,
            max_seq_len: 16,
            rng_seed,
        }
    }
}

/// Parameters of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub w_in: Matrix,
    /// The MLP output matrix (`d_mlp x d_model`) — the sole editable target.
    pub w_out: Matrix,
}

/// Full parameter set of a model. Construction validates shapes; editing
/// code clones the state and swaps `w_out` matrices, leaving everything
/// else untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub token_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_gamma: Matrix,
    pub final_beta: Matrix,
    pub unembed: Matrix,
}

impl ModelState {
    /// Seeded random initialization (normal, std 0.02; residual-side
    /// projections scaled down by sqrt(2 * n_layers)).
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.rng_seed);
        let d = config.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut randn = |rows: usize, cols: usize, s: f64| {
            let mut m = Matrix::zeros(rows, cols);
            for v in m.data_mut() {
                *v = standard_normal(&mut rng) * s;
            }
            m
        };
        let token_emb = randn(config.vocab_size, d, std);
        let pos_emb = randn(config.max_seq_len, d, std);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(BlockParams {
                ln1_gamma: Matrix::from_fn(1, d, |_, _| 1.0),
                ln1_beta: Matrix::zeros(1, d),
                wq: randn(d, d, std),
                wk: randn(d, d, std),
                wv: randn(d, d, std),
                wo: randn(d, d, resid_std),
                ln2_gamma: Matrix::from_fn(1, d, |_, _| 1.0),
                ln2_beta: Matrix::zeros(1, d),
                w_in: randn(d, config.d_mlp, std),
                w_out: randn(config.d_mlp, d, resid_std),
            });
        }
        let final_gamma = Matrix::from_fn(1, d, |_, _| 1.0);
        let final_beta = Matrix::zeros(1, d);
        let unembed = randn(d, config.vocab_size, std);
        Ok(ModelState {
            config,
            token_emb,
            pos_emb,
            blocks,
            final_gamma,
            final_beta,
            unembed,
        })
    }

    /// Canonical parameter order shared by training, checkpoints, and the
    /// gradient check: embeddings, each block's matrices, final norm,
    /// unembedding.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["token_emb".to_string(), "pos_emb".to_string()];
        for b in 0..self.blocks.len() {
            for field in [
                "ln1_gamma", "ln1_beta", "wq", "wk", "wv", "wo", "ln2_gamma", "ln2_beta", "w_in",
                "w_out",
            ] {
                names.push(format!("block{b}.{field}"));
            }
        }
        names.push("final_gamma".into());
        names.push("final_beta".into());
        names.push("unembed".into());
        names
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut ps: Vec<&Matrix> = vec![&self.token_emb, &self.pos_emb];
        for b in &self.blocks {
            ps.extend([
                &b.ln1_gamma,
                &b.ln1_beta,
                &b.wq,
                &b.wk,
                &b.wv,
                &b.wo,
                &b.ln2_gamma,
                &b.ln2_beta,
                &b.w_in,
                &b.w_out,
            ]);
        }
        ps.extend([&self.final_gamma, &self.final_beta, &self.unembed]);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut ps: Vec<&mut Matrix> = vec![&mut self.token_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            ps.extend([
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
                &mut b.w_in,
                &mut b.w_out,
            ]);
        }
        ps.extend([
            &mut self.final_gamma,
            &mut self.final_beta,
            &mut self.unembed,
        ]);
        ps
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|m| m.data().len()).sum()
    }

    pub fn validate_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::SequenceTooLong {
                len: 0,
                max: self.config.max_seq_len,
            });
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

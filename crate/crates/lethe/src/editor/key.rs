//! Keys and key covariance for the associative-memory view of an MLP.
//!
//! A block's `w_out` maps MLP activations (keys) to residual updates
//! (values). The key of a fact is that activation at the last subject
//! token of its canonical prompt; the covariance of keys over a prompt
//! sample defines the metric under which the rank-one edit is minimal.

use crate::error::{Error, Result};
use crate::factlab::{Fact, FactCorpus};
use crate::model::{forward, ModelState, TokenId};
use crate::numcore::Matrix;
use crate::rng::{rng_from_seed, SeededRng};
use rand::Rng;

/// Second moment of MLP keys at one block, ridge-augmented so it is always
/// invertible.
#[derive(Clone, Debug)]
pub struct KeyCovariance {
    pub matrix: Matrix,
    /// Number of key vectors that entered the estimate.
    pub samples: usize,
    pub ridge: f64,
}

/// The MLP key of `fact` at `block`: the activation feeding `w_out` at the
/// last subject token of the canonical prompt. Returns the key, the token
/// position, and the prompt used.
pub fn compute_key(
    model: &ModelState,
    corpus: &FactCorpus,
    fact: &Fact,
    block: usize,
) -> Result<(Vec<f64>, usize, Vec<TokenId>)> {
    if block >= model.config.n_layers {
        return Err(Error::LayerOutOfRange {
            layer: block,
            limit: model.config.n_layers - 1,
        });
    }
    let prompt = corpus.canonical_prompt_tokens(fact)?;
    let position = corpus.subject_last_position(fact, &prompt)?;
    let (_, trace) = forward(model, &prompt, true)?;
    let trace = trace.expect("capture requested");
    Ok((trace.mlp_keys[block].row(position).to_vec(), position, prompt))
}

/// Estimates `C = mean(k k^T) + ridge * I` over keys collected at **all**
/// positions of `n_prompts` sampled training prompts. The ridge is
/// `ridge_rel * trace(C) / d_mlp`, which guarantees invertibility even on
/// small samples.
pub fn estimate_covariance(
    model: &ModelState,
    corpus: &FactCorpus,
    block: usize,
    n_prompts: usize,
    ridge_rel: f64,
    seed: u64,
) -> Result<KeyCovariance> {
    if block >= model.config.n_layers {
        return Err(Error::LayerOutOfRange {
            layer: block,
            limit: model.config.n_layers - 1,
        });
    }
    let lines = corpus.training_lines()?;
    if lines.is_empty() {
        return Err(Error::InvalidConfig("empty corpus".into()));
    }
    let mut rng: SeededRng = rng_from_seed(seed);
    let d_mlp = model.config.d_mlp;
    let mut acc = Matrix::zeros(d_mlp, d_mlp);
    let mut samples = 0usize;
    for _ in 0..n_prompts {
        let line = &lines[rng.gen_range(0..lines.len())];
        // Drop the answer token; keys come from prompt positions.
        let prompt = &line[..line.len() - 1];
        let (_, trace) = forward(model, prompt, true)?;
        let keys = &trace.expect("capture requested").mlp_keys[block];
        for r in 0..keys.rows() {
            accumulate_outer(&mut acc, keys.row(r));
            samples += 1;
        }
    }
    let mut c = acc.scale(1.0 / samples as f64);
    let trace_c: f64 = (0..d_mlp).map(|i| c.get(i, i)).sum();
    let ridge = ridge_rel * trace_c / d_mlp as f64;
    for i in 0..d_mlp {
        c.set(i, i, c.get(i, i) + ridge);
    }
    Ok(KeyCovariance {
        matrix: c,
        samples,
        ridge,
    })
}

/// Builds a covariance from explicit key vectors (used in tests and for
/// the single-key closed form `C = k k^T + ridge I`).
pub fn covariance_from_keys(keys: &[Vec<f64>], ridge: f64) -> Result<KeyCovariance> {
    let Some(first) = keys.first() else {
        return Err(Error::InvalidConfig("no keys supplied".into()));
    };
    let d = first.len();
    let mut acc = Matrix::zeros(d, d);
    for k in keys {
        if k.len() != d {
            return Err(Error::ShapeMismatch {
                context: "covariance_from_keys".into(),
                expected: format!("{d}"),
                got: format!("{}", k.len()),
            });
        }
        accumulate_outer(&mut acc, k);
    }
    let mut c = acc.scale(1.0 / keys.len() as f64);
    for i in 0..d {
        c.set(i, i, c.get(i, i) + ridge);
    }
    Ok(KeyCovariance {
        matrix: c,
        samples: keys.len(),
        ridge,
    })
}

fn accumulate_outer(acc: &mut Matrix, k: &[f64]) {
    let d = k.len();
    for i in 0..d {
        let ki = k[i];
        if ki == 0.0 {
            continue;
        }
        let row = acc.row_mut(i);
        for j in 0..d {
            row[j] += ki * k[j];
        }
    }
}

//! Next-token probabilities, sampling, and greedy generation.

use super::forward::forward;
use super::{ModelState, TokenId};
use crate::error::{Error, Result};
use crate::numcore::softmax_unchecked;
use crate::rng::{categorical, rng_from_seed};

/// Probability of `answer` as the next token after `prompt`.
pub fn answer_prob(model: &ModelState, prompt: &[TokenId], answer: TokenId) -> Result<f64> {
    if answer as usize >= model.config.vocab_size {
        return Err(Error::TokenOutOfRange {
            token: answer,
            vocab_size: model.config.vocab_size,
        });
    }
    let (logits, _) = forward(model, prompt, false)?;
    Ok(softmax_unchecked(&logits)[answer as usize])
}

/// Draws `n_samples` next tokens after `prompt`.
///
/// Temperature zero means argmax (repeated); otherwise the logits are
/// scaled by `1/temperature` and sampled with a ChaCha stream seeded by
/// `seed`, so the sample list is reproducible.
pub fn sample_next(
    model: &ModelState,
    prompt: &[TokenId],
    temperature: f64,
    seed: u64,
    n_samples: usize,
) -> Result<Vec<TokenId>> {
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "temperature must be finite and >= 0, got {temperature}"
        )));
    }
    let (logits, _) = forward(model, prompt, false)?;
    if temperature == 0.0 {
        let tok = argmax(&logits);
        return Ok(vec![tok; n_samples]);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs = softmax_unchecked(&scaled);
    let mut rng = rng_from_seed(seed);
    Ok((0..n_samples)
        .map(|_| categorical(&mut rng, &probs) as TokenId)
        .collect())
}

/// Greedy continuation of `prompt`, up to `gen_len` tokens (clipped to the
/// model's context length).
pub fn greedy_generate(model: &ModelState, prompt: &[TokenId], gen_len: usize) -> Result<Vec<TokenId>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let budget = gen_len.min(model.config.max_seq_len.saturating_sub(prompt.len()));
    for _ in 0..budget {
        let (logits, _) = forward(model, &seq, false)?;
        let tok = argmax(&logits);
        out.push(tok);
        seq.push(tok);
    }
    Ok(out)
}

fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

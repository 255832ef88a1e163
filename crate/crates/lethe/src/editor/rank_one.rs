//! The closed-form rank-one weight update.
//!
//! Treating `w_out` as an associative memory mapping keys to values, the
//! minimal update (under the key-covariance metric) that reassociates key
//! `k*` to value `v*` is rank one:
//!
//! ```text
//! W' = W + (C^-1 k*) (v* - k* W) / (k*^T C^-1 k*)
//! ```
//!
//! in the row-vector convention used here (`value = key * W`). The update
//! interpolates exactly: `k* W' = v*`, every other parameter is untouched.

use super::key::KeyCovariance;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numcore::{dot, Matrix};

/// Applies the closed-form update to `w_out`, returning the new matrix.
pub fn rank_one_update(
    w_out: &Matrix,
    key: &[f64],
    value: &[f64],
    cov: &KeyCovariance,
) -> Result<Matrix> {
    let (d_mlp, d_model) = w_out.shape();
    if key.len() != d_mlp || value.len() != d_model {
        return Err(Error::ShapeMismatch {
            context: "rank_one_update".into(),
            expected: format!("key {d_mlp}, value {d_model}"),
            got: format!("key {}, value {}", key.len(), value.len()),
        });
    }
    if cov.matrix.shape() != (d_mlp, d_mlp) {
        return Err(Error::ShapeMismatch {
            context: "rank_one_update covariance".into(),
            expected: format!("{d_mlp}x{d_mlp}"),
            got: format!("{:?}", cov.matrix.shape()),
        });
    }

    let u = cov.matrix.solve(key)?; // C^-1 k*
    let denom = dot(key, &u); // k*^T C^-1 k*
    let scale_ref: f64 = dot(key, key).max(1.0);
    if !denom.is_finite() || denom.abs() <= 1e-12 * scale_ref {
        return Err(Error::DegenerateEdit(format!(
            "k^T C^-1 k = {denom} is numerically zero"
        )));
    }

    // residual = v* - k* W (row vector, d_model).
    let mut residual = value.to_vec();
    for (j, r) in residual.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..d_mlp {
            acc += key[i] * w_out.get(i, j);
        }
        *r -= acc;
    }

    let mut w_new = w_out.clone();
    for i in 0..d_mlp {
        let coeff = u[i] / denom;
        if coeff == 0.0 {
            continue;
        }
        let row = w_new.row_mut(i);
        for (j, r) in residual.iter().enumerate() {
            row[j] += coeff * r;
        }
    }
    Ok(w_new)
}

/// Clones `model` with `block`'s `w_out` replaced by the rank-one update.
pub fn rank_one_edit(
    model: &ModelState,
    key: &[f64],
    value: &[f64],
    cov: &KeyCovariance,
    block: usize,
) -> Result<ModelState> {
    if block >= model.config.n_layers {
        return Err(Error::LayerOutOfRange {
            layer: block,
            limit: model.config.n_layers - 1,
        });
    }
    let w_new = rank_one_update(&model.blocks[block].w_out, key, value, cov)?;
    let mut edited = model.clone();
    edited.blocks[block].w_out = w_new;
    Ok(edited)
}

/// `key * w_out` — the value a key currently maps to.
pub fn current_value(w_out: &Matrix, key: &[f64]) -> Vec<f64> {
    let (d_mlp, d_model) = w_out.shape();
    debug_assert_eq!(key.len(), d_mlp);
    let mut out = vec![0.0; d_model];
    for i in 0..d_mlp {
        let ki = key[i];
        if ki == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += ki * w_out.get(i, j);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::covariance_from_keys;
    use crate::rng::{rng_from_seed, standard_normal};
    use crate::testkit::{second_singular_value_bound, top_singular_triple};

    fn identity_cov(d: usize) -> KeyCovariance {
        KeyCovariance {
            matrix: Matrix::identity(d),
            samples: d,
            ridge: 0.0,
        }
    }

    #[test]
    fn fixed_point_when_value_already_stored() {
        let w = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64 * 0.1);
        let key = [1.0, 0.5, -0.25];
        let value = current_value(&w, &key);
        let w_new = rank_one_update(&w, &key, &value, &identity_cov(3)).unwrap();
        assert_eq!(w_new, w);
    }

    #[test]
    fn identity_covariance_closed_form() {
        // W = I (2x2), k* = (1, 0), C = I, v* = (2, 0):
        // W' = [[2, 0], [0, 1]] and k* W' = v*.
        let w = Matrix::identity(2);
        let w_new =
            rank_one_update(&w, &[1.0, 0.0], &[2.0, 0.0], &identity_cov(2)).unwrap();
        assert_eq!(w_new.data(), &[2.0, 0.0, 0.0, 1.0]);
        assert_eq!(current_value(&w_new, &[1.0, 0.0]), vec![2.0, 0.0]);
    }

    #[test]
    fn random_instance_is_rank_one_and_interpolates() {
        // 8x8 random instance: the delta's second singular value is at
        // roundoff level and the interpolation constraint holds to 1e-9.
        let mut rng = rng_from_seed(17);
        let mut randv = |n: usize| -> Vec<f64> {
            (0..n).map(|_| standard_normal(&mut rng)).collect()
        };
        let w = Matrix::from_vec(8, 8, randv(64)).unwrap();
        let key = randv(8);
        let value = randv(8);
        let keys: Vec<Vec<f64>> = (0..32).map(|_| randv(8)).collect();
        let cov = covariance_from_keys(&keys, 1e-3).unwrap();

        let w_new = rank_one_update(&w, &key, &value, &cov).unwrap();
        let delta = w_new.sub(&w);
        let (sigma1, _, _) = top_singular_triple(&delta);
        let sigma2 = second_singular_value_bound(&delta);
        assert!(
            sigma2 <= 1e-8 * sigma1,
            "sigma2 {sigma2} vs sigma1 {sigma1}"
        );
        let achieved = current_value(&w_new, &key);
        for (a, v) in achieved.iter().zip(value.iter()) {
            assert!((a - v).abs() < 1e-9, "interpolation violated: {a} vs {v}");
        }
    }

    #[test]
    fn zero_key_rejected_as_degenerate() {
        let w = Matrix::identity(4);
        let err = rank_one_update(&w, &[0.0; 4], &[1.0; 4], &identity_cov(4));
        assert!(err.is_err());
    }
}

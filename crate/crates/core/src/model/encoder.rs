//! Shared per-point MLP followed by a coordinatewise max over points.

use ndarray::{s, Array1, Array2, Axis};

use super::{encoder_prefix, layer_names, relu_inplace, Branch, GlobalFeature, Gradients, ParameterStore};
use crate::error::{Error, Result};

pub struct EncoderCache {
    branch: Branch,
    /// Layer inputs followed by the final activation: `acts[0]` is the point
    /// matrix, `acts[l]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
    /// Row that won the max for each feature coordinate.
    argmax: Vec<usize>,
    feature: Array1<f64>,
}

impl EncoderCache {
    pub fn feature(&self) -> GlobalFeature {
        GlobalFeature::from_array_unchecked(self.feature.clone())
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

pub(super) fn forward(store: &ParameterStore, branch: Branch, points: &Array2<f64>) -> Result<EncoderCache> {
    if points.ncols() != 3 {
        return Err(Error::dims(3, points.ncols(), "encoder input columns"));
    }
    if points.nrows() == 0 {
        return Err(Error::InvalidCloud("encoder input is empty".into()));
    }
    let prefix = encoder_prefix(branch, store.shared_encoder);
    let layers = store.config.encoder_widths.len() - 1;
    let mut acts = vec![points.clone()];
    for l in 0..layers {
        let (wn, bn) = layer_names(prefix, l);
        let w = &store.params[store.slot(&wn)].value;
        let b = &store.params[store.slot(&bn)].value;
        let mut z = acts[l].dot(w);
        z += b;
        relu_inplace(&mut z);
        acts.push(z);
    }
    let last = acts.last().unwrap();
    let d = last.ncols();
    let mut argmax = vec![0usize; d];
    let mut feature = Array1::from_elem(d, f64::NEG_INFINITY);
    for (i, row) in last.outer_iter().enumerate() {
        for j in 0..d {
            // strict comparison keeps the lowest index on ties
            if row[j] > feature[j] {
                feature[j] = row[j];
                argmax[j] = i;
            }
        }
    }
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "encoder feature".into() });
    }
    Ok(EncoderCache { branch, acts, argmax, feature })
}

/// Only rows that won the max pool receive gradient, so the backward pass
/// runs on that (at most `d`-row) subset.
pub(super) fn backward(store: &ParameterStore, cache: &EncoderCache, d_feature: &Array1<f64>, grads: &mut Gradients) {
    let prefix = encoder_prefix(cache.branch, store.shared_encoder);
    let mut rows: Vec<usize> = cache.argmax.clone();
    rows.sort_unstable();
    rows.dedup();
    let d = d_feature.len();
    let mut delta = Array2::zeros((rows.len(), d));
    for j in 0..d {
        let r = rows.binary_search(&cache.argmax[j]).unwrap();
        delta[[r, j]] += d_feature[j];
    }
    let layers = cache.acts.len() - 1;
    for l in (0..layers).rev() {
        let out = cache.acts[l + 1].select(Axis(0), &rows);
        delta.zip_mut_with(&out, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let input = cache.acts[l].select(Axis(0), &rows);
        let (wn, bn) = layer_names(prefix, l);
        let (wi, bi) = (store.slot(&wn), store.slot(&bn));
        grads.tensors[wi] += &input.t().dot(&delta);
        let colsum = delta.sum_axis(Axis(0));
        grads.tensors[bi].slice_mut(s![0, ..]).scaled_add(1.0, &colsum);
        if l > 0 {
            delta = delta.dot(&store.params[wi].value.t());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, ParameterStore};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, 3), || rng.gen_range(-1.0..1.0))
    }

    fn small() -> ModelConfig {
        ModelConfig { encoder_widths: vec![3, 16, 32], decoder_hidden: vec![16], grid_side: 8, num_points: 64 }
    }

    #[test]
    fn permutation_and_duplication_invariant() {
        let store = ParameterStore::init(&small(), false, 1).unwrap();
        let x = cloud(64, 2);
        let f = store.encode_points(Branch::Partial, &x).unwrap();
        let perm: Vec<usize> = (0..64).rev().collect();
        let xp = x.select(Axis(0), &perm);
        assert_eq!(f, store.encode_points(Branch::Partial, &xp).unwrap());
        let dup = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        assert_eq!(f, store.encode_points(Branch::Partial, &dup).unwrap());
    }

    #[test]
    fn branches_differ() {
        let store = ParameterStore::init(&small(), false, 1).unwrap();
        let x = cloud(64, 2);
        assert_ne!(store.encode_points(Branch::Partial, &x).unwrap(), store.encode_points(Branch::Gt, &x).unwrap());
        let shared = ParameterStore::init(&small(), true, 1).unwrap();
        assert_eq!(shared.encode_points(Branch::Partial, &x).unwrap(), shared.encode_points(Branch::Gt, &x).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        let store = ParameterStore::init(&small(), false, 1).unwrap();
        assert!(store.encode_points(Branch::Partial, &Array2::zeros((4, 2))).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let store = ParameterStore::init(&small(), false, 5).unwrap();
        let x = cloud(20, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let weights = Array1::from_shape_simple_fn(32, || rng.gen_range(-1.0..1.0));
        let objective = |s: &ParameterStore| s.encode_points(Branch::Gt, &x).unwrap().values().dot(&weights);
        let cache = store.encode_forward(Branch::Gt, &x).unwrap();
        let mut grads = store.zero_gradients();
        store.encode_backward(&cache, &weights, &mut grads);
        let h = 1e-6;
        for (pi, p) in store.params().iter().enumerate() {
            let expect_zero = !p.name.starts_with("encoder_gt");
            for idx in 0..p.value.len() {
                let (r, c) = (idx / p.value.ncols(), idx % p.value.ncols());
                let mut plus = store.clone();
                plus.params_mut()[pi].value[[r, c]] += h;
                let mut minus = store.clone();
                minus.params_mut()[pi].value[[r, c]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads.tensors[pi][[r, c]];
                if expect_zero {
                    assert_eq!(an, 0.0);
                }
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{} {fd} vs {an}", p.name);
            }
        }
    }
}

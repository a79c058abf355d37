//! Two-stage folding decoder.
//!
//! Stage 1 maps `concat(uv, f)` for each grid point to an intermediate 3D
//! point; stage 2 maps `concat(intermediate, f)` to the final point. The
//! feature part of each first layer is the same for every row, so it is
//! computed once as a row bias.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{layer_names, relu_inplace, GlobalFeature, Gradients, ParameterStore};
use crate::error::{Error, Result};

/// Row-major `side x side` lattice spanning `[-1, 1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldingGrid {
    side: usize,
    uv: Array2<f64>,
}

impl FoldingGrid {
    pub fn new(side: usize) -> Self {
        let coord = |k: usize| {
            if side <= 1 {
                0.0
            } else {
                -1.0 + 2.0 * k as f64 / (side - 1) as f64
            }
        };
        let uv = Array2::from_shape_fn((side * side, 2), |(i, c)| if c == 0 { coord(i / side) } else { coord(i % side) });
        Self { side, uv }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn uv(&self) -> &Array2<f64> {
        &self.uv
    }
}

struct StageCache {
    input: Array2<f64>,
    /// Post-activation outputs of hidden layers.
    hidden: Vec<Array2<f64>>,
    output: Array2<f64>,
}

pub struct DecoderCache {
    feature: Array1<f64>,
    stage1: StageCache,
    stage2: StageCache,
}

impl DecoderCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.stage2.output
    }

    pub fn intermediate(&self) -> &Array2<f64> {
        &self.stage1.output
    }
}

fn stage_forward(store: &ParameterStore, prefix: &str, input: Array2<f64>, f: &Array1<f64>) -> StageCache {
    let layers = store.config.decoder_hidden.len() + 1;
    let k = input.ncols();
    let mut hidden = Vec::with_capacity(layers - 1);
    let mut current: Option<Array2<f64>> = None;
    for l in 0..layers {
        let (wn, bn) = layer_names(prefix, l);
        let w = &store.params[store.slot(&wn)].value;
        let b = &store.params[store.slot(&bn)].value;
        let mut z = if l == 0 {
            let row_bias = f.dot(&w.slice(s![k.., ..])) + b.row(0);
            let mut z = input.dot(&w.slice(s![..k, ..]));
            z += &row_bias;
            z
        } else {
            let mut z = current.as_ref().unwrap().dot(w);
            z += b;
            z
        };
        if l + 1 < layers {
            relu_inplace(&mut z);
            hidden.push(z.clone());
        }
        current = Some(z);
    }
    StageCache { input, hidden, output: current.unwrap() }
}

/// Backpropagates `d_out` through one stage; returns (d_input, d_feature).
fn stage_backward(
    store: &ParameterStore,
    prefix: &str,
    cache: &StageCache,
    f: &Array1<f64>,
    d_out: &Array2<f64>,
    grads: &mut Gradients,
) -> (Array2<f64>, Array1<f64>) {
    let layers = cache.hidden.len() + 1;
    let k = cache.input.ncols();
    let mut delta = d_out.clone();
    for l in (0..layers).rev() {
        let (wn, bn) = layer_names(prefix, l);
        let (wi, bi) = (store.slot(&wn), store.slot(&bn));
        let w = &store.params[wi].value;
        let colsum = delta.sum_axis(Axis(0));
        grads.tensors[bi].slice_mut(s![0, ..]).scaled_add(1.0, &colsum);
        if l > 0 {
            let input: ArrayView2<f64> = cache.hidden[l - 1].view();
            grads.tensors[wi] += &input.t().dot(&delta);
            let mut next = delta.dot(&w.t());
            next.zip_mut_with(&input, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            delta = next;
        } else {
            let gw = &mut grads.tensors[wi];
            gw.slice_mut(s![..k, ..]).scaled_add(1.0, &cache.input.t().dot(&delta));
            // the feature enters every row identically
            let outer = f.view().insert_axis(Axis(1)).dot(&colsum.view().insert_axis(Axis(0)));
            gw.slice_mut(s![k.., ..]).scaled_add(1.0, &outer);
            let d_input = delta.dot(&w.slice(s![..k, ..]).t());
            let d_feature = w.slice(s![k.., ..]).dot(&colsum);
            return (d_input, d_feature);
        }
    }
    unreachable!("stage has at least one layer")
}

pub(super) fn forward(store: &ParameterStore, f: &GlobalFeature, grid: &FoldingGrid) -> Result<DecoderCache> {
    let d = store.feature_dim();
    if f.dim() != d {
        return Err(Error::dims(d, f.dim(), "decoder feature"));
    }
    if f.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "decoder feature".into() });
    }
    let m = store.config.num_points;
    if grid.side * grid.side < m {
        return Err(Error::config("grid_side", format!("grid too small: {0}x{0} < {m} points", grid.side)));
    }
    let feature = f.values().clone();
    let uv = grid.uv.slice(s![..m, ..]).to_owned();
    let stage1 = stage_forward(store, "decoder.fold1", uv, &feature);
    let stage2 = stage_forward(store, "decoder.fold2", stage1.output.clone(), &feature);
    Ok(DecoderCache { feature, stage1, stage2 })
}

pub(super) fn backward(
    store: &ParameterStore,
    cache: &DecoderCache,
    d_output: &Array2<f64>,
    grads: &mut Gradients,
) -> Array1<f64> {
    let (d_mid, df2) = stage_backward(store, "decoder.fold2", &cache.stage2, &cache.feature, d_output, grads);
    let (_, df1) = stage_backward(store, "decoder.fold1", &cache.stage1, &cache.feature, &d_mid, grads);
    df1 + df2
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { encoder_widths: vec![3, 8, 6], decoder_hidden: vec![10, 7], grid_side: 5, num_points: 20 }
    }

    fn feature(seed: u64) -> GlobalFeature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GlobalFeature::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn grid_is_row_major_lattice() {
        let g = FoldingGrid::new(3);
        assert_eq!(g.uv().row(0).to_vec(), vec![-1.0, -1.0]);
        assert_eq!(g.uv().row(1).to_vec(), vec![-1.0, 0.0]);
        assert_eq!(g.uv().row(3).to_vec(), vec![0.0, -1.0]);
        assert_eq!(g.uv().row(8).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn output_count_and_determinism() {
        let store = ParameterStore::init(&small(), false, 2).unwrap();
        let grid = store.grid();
        let a = store.decode(&feature(1), &grid).unwrap();
        assert_eq!(a.dim(), (20, 3));
        assert_eq!(a, store.decode(&feature(1), &grid).unwrap());
        assert_ne!(a, store.decode(&feature(2), &grid).unwrap());
    }

    #[test]
    fn default_grid_emits_2048_points() {
        let store = ParameterStore::init(&ModelConfig::default(), false, 0).unwrap();
        let f = GlobalFeature::from_vec(vec![0.1; 256]).unwrap();
        assert_eq!(store.decode(&f, &store.grid()).unwrap().nrows(), 2048);
    }

    #[test]
    fn rejects_small_grid_and_bad_feature() {
        let store = ParameterStore::init(&small(), false, 2).unwrap();
        assert!(store.decode(&feature(1), &FoldingGrid::new(4)).is_err());
        let wrong = GlobalFeature::from_vec(vec![0.0; 5]).unwrap();
        assert!(store.decode(&wrong, &store.grid()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let store = ParameterStore::init(&small(), false, 4).unwrap();
        let grid = store.grid();
        let f = feature(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe = Array2::from_shape_simple_fn((20, 3), || rng.gen_range(-1.0..1.0));
        let objective = |s: &ParameterStore, f: &GlobalFeature| (s.decode(f, &grid).unwrap() * &probe).sum();
        let cache = store.decode_forward(&f, &grid).unwrap();
        let mut grads = store.zero_gradients();
        let df = store.decode_backward(&cache, &probe, &mut grads);
        let h = 1e-6;
        for (pi, p) in store.params().iter().enumerate() {
            for idx in 0..p.value.len() {
                let (r, c) = (idx / p.value.ncols(), idx % p.value.ncols());
                let mut plus = store.clone();
                plus.params_mut()[pi].value[[r, c]] += h;
                let mut minus = store.clone();
                minus.params_mut()[pi].value[[r, c]] -= h;
                let fd = (objective(&plus, &f) - objective(&minus, &f)) / (2.0 * h);
                let an = grads.tensors[pi][[r, c]];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{} {fd} vs {an}", p.name);
            }
        }
        for k in 0..6 {
            let mut v = f.values().clone();
            v[k] += h;
            let up = objective(&store, &GlobalFeature::new(v.clone()).unwrap());
            v[k] -= 2.0 * h;
            let down = objective(&store, &GlobalFeature::new(v).unwrap());
            assert!(((up - down) / (2.0 * h) - df[k]).abs() < 1e-6 * (1.0 + df[k].abs()));
        }
    }
}

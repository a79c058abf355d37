//! Dual global-feature encoders and the folding decoder.
//!
//! Every differentiable computation here comes as a forward pass that
//! returns a cache and a backward pass that consumes it, accumulating into a
//! [`Gradients`] buffer laid out like the [`ParameterStore`].

pub mod checkpoint;
mod decoder;
mod encoder;

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use decoder::{DecoderCache, FoldingGrid};
pub use encoder::EncoderCache;

/// Architecture of the encoders and the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-point MLP widths, starting at 3 and ending at the feature size.
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of each folding stage (output width 3 is implied).
    pub decoder_hidden: Vec<usize>,
    pub grid_side: usize,
    /// Number of points the decoder emits.
    pub num_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder_widths: vec![3, 64, 128, 256], decoder_hidden: vec![256, 128], grid_side: 46, num_points: 2048 }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.encoder_widths;
        if w.len() < 2 || w[0] != 3 {
            return Err(Error::config("encoder_widths", "must start at 3 and have at least one layer"));
        }
        if w.contains(&0) {
            return Err(Error::config("encoder_widths", "all widths must be >= 1"));
        }
        if self.decoder_hidden.contains(&0) {
            return Err(Error::config("decoder_hidden", "all widths must be >= 1"));
        }
        if self.num_points == 0 {
            return Err(Error::config("num_points", "must be positive"));
        }
        if self.grid_side * self.grid_side < self.num_points {
            return Err(Error::config(
                "grid_side",
                format!("grid too small: {0}x{0} < {1} points", self.grid_side, self.num_points),
            ));
        }
        Ok(())
    }
}

/// Which encoder to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Partial,
    Gt,
}

/// A global descriptor: one finite `d`-vector per cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature(Array1<f64>);

impl GlobalFeature {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { name: "global feature".into() });
        }
        Ok(Self(values))
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub(crate) fn from_array_unchecked(values: Array1<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn sq_distance(&self, other: &GlobalFeature) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// One named trainable tensor. Biases are stored as `1 x n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

/// All network weights, with gradient slots of matching shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    config: ModelConfig,
    shared_encoder: bool,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub(crate) fn layer_names(prefix: &str, layer: usize) -> (String, String) {
    (format!("{prefix}.layer{layer}.weight"), format!("{prefix}.layer{layer}.bias"))
}

pub(crate) fn encoder_prefix(branch: Branch, shared: bool) -> &'static str {
    match (branch, shared) {
        (Branch::Gt, false) => "encoder_gt",
        _ => "encoder_partial",
    }
}

impl ParameterStore {
    /// Draws every tensor from its own seeded substream (uniform in
    /// `±1/sqrt(fan_in)`). With `shared_encoder` the ground-truth branch
    /// reuses the partial encoder's weights and no `encoder_gt.*` tensors exist.
    pub fn init(config: &ModelConfig, shared_encoder: bool, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut shapes: Vec<(String, usize, usize, usize)> = Vec::new();
        let mut add_mlp = |prefix: &str, widths: &[usize]| {
            for (l, w) in widths.windows(2).enumerate() {
                let (wn, bn) = layer_names(prefix, l);
                shapes.push((wn, w[0], w[1], w[0]));
                shapes.push((bn, 1, w[1], w[0]));
            }
        };
        let ew = &config.encoder_widths;
        add_mlp("encoder_partial", ew);
        if !shared_encoder {
            add_mlp("encoder_gt", ew);
        }
        let d = config.feature_dim();
        let stage = |input: usize| {
            let mut widths = vec![input + d];
            widths.extend_from_slice(&config.decoder_hidden);
            widths.push(3);
            widths
        };
        add_mlp("decoder.fold1", &stage(2));
        add_mlp("decoder.fold2", &stage(3));

        let params = shapes
            .into_iter()
            .map(|(name, rows, cols, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = seed::rng(seed_value, name_hash(&name));
                let value = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound));
                Param { grad: Array2::zeros((rows, cols)), name, value }
            })
            .collect();
        Ok(Self::from_params(config.clone(), shared_encoder, params))
    }

    pub(crate) fn from_params(config: ModelConfig, shared_encoder: bool, params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { config, shared_encoder, params, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shared_encoder(&self) -> bool {
        self.shared_encoder
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    pub(crate) fn slot(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Empty gradient buffer with this store's layout.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients { tensors: self.params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect() }
    }

    /// Adds `scale * g` into the gradient slots.
    pub fn accumulate(&mut self, g: &Gradients, scale: f64) {
        for (p, t) in self.params.iter_mut().zip(&g.tensors) {
            p.grad.scaled_add(scale, t);
        }
    }

    /// Runs the `branch` encoder on an `N x 3` matrix.
    pub fn encode_points(&self, branch: Branch, points: &Array2<f64>) -> Result<GlobalFeature> {
        Ok(self.encode_forward(branch, points)?.feature())
    }

    pub fn encode_forward(&self, branch: Branch, points: &Array2<f64>) -> Result<EncoderCache> {
        encoder::forward(self, branch, points)
    }

    pub fn encode_backward(&self, cache: &EncoderCache, d_feature: &Array1<f64>, grads: &mut Gradients) {
        encoder::backward(self, cache, d_feature, grads)
    }

    pub fn grid(&self) -> FoldingGrid {
        FoldingGrid::new(self.config.grid_side)
    }

    /// Decodes `f` into `num_points` 3D points.
    pub fn decode(&self, f: &GlobalFeature, grid: &FoldingGrid) -> Result<Array2<f64>> {
        Ok(self.decode_forward(f, grid)?.output().clone())
    }

    pub fn decode_forward(&self, f: &GlobalFeature, grid: &FoldingGrid) -> Result<DecoderCache> {
        decoder::forward(self, f, grid)
    }

    /// Returns the gradient with respect to the conditioning feature.
    pub fn decode_backward(&self, cache: &DecoderCache, d_output: &Array2<f64>, grads: &mut Gradients) -> Array1<f64> {
        decoder::backward(self, cache, d_output, grads)
    }
}

/// Gradient buffer aligned with [`ParameterStore::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = ParameterStore::init(&cfg, false, 3).unwrap();
        let b = ParameterStore::init(&cfg, false, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ParameterStore::init(&cfg, false, 4).unwrap());
    }

    #[test]
    fn dual_encoders_are_independent() {
        let cfg = ModelConfig::default();
        let s = ParameterStore::init(&cfg, false, 3).unwrap();
        for l in 0..3 {
            let (w, _) = layer_names("encoder_partial", l);
            let (wg, _) = layer_names("encoder_gt", l);
            assert_ne!(s.get(&w).unwrap().value, s.get(&wg).unwrap().value);
        }
        let shared = ParameterStore::init(&cfg, true, 3).unwrap();
        assert!(shared.params().iter().all(|p| !p.name.starts_with("encoder_gt")));
    }

    #[test]
    fn init_is_finite_with_zero_grads() {
        let s = ParameterStore::init(&ModelConfig::default(), false, 0).unwrap();
        for p in s.params() {
            assert!(p.value.iter().all(|v| v.is_finite()));
            assert!(p.grad.iter().all(|&v| v == 0.0));
            assert_eq!(p.value.dim(), p.grad.dim());
        }
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { encoder_widths: vec![2, 8], ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let small_grid = ModelConfig { grid_side: 45, ..ModelConfig::default() };
        assert!(small_grid.validate().unwrap_err().to_string().contains("grid too small"));
    }
}

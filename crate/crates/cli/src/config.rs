//! The flat JSON run configuration. Every field has a default and unknown
//! keys are rejected.

use std::fs;
use std::path::Path;

use protocomp::dataset::{split_sizes, ArchSceneSpec, PairOptions};
use protocomp::model::ModelConfig;
use protocomp::training::{LossWeights, TauPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    pub n_scenes: usize,
    pub ratios: [f64; 3],
    pub tooth_count: usize,
    pub points_per_tooth: usize,
    pub gingiva_points: usize,
    pub arch_width: f64,
    pub arch_depth: f64,
    pub cusp_count_range: [usize; 2],
    pub noise_sigma: f64,
    pub n_gingiva: usize,
    pub num_points: usize,

    pub encoder_widths: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub grid_side: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_f: f64,
    pub lambda_align: f64,
    pub lambda_mem: f64,
    pub use_pm: bool,
    pub use_de: bool,
    pub k: usize,
    /// Fixed confidence temperature; `null` tracks the running mean.
    pub tau: Option<f64>,
    pub min_hits: u64,
    pub max_rejections: usize,

    /// Seeds per ablation row.
    pub ablation_seeds: usize,
}

impl Default for Config {
    fn default() -> Self {
        let scene = ArchSceneSpec::default();
        let pair = PairOptions::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            n_scenes: 100,
            ratios: [0.7, 0.1, 0.2],
            tooth_count: scene.tooth_count,
            points_per_tooth: scene.points_per_tooth,
            gingiva_points: scene.gingiva_points,
            arch_width: scene.arch_width,
            arch_depth: scene.arch_depth,
            cusp_count_range: [scene.cusp_count_range.0, scene.cusp_count_range.1],
            noise_sigma: scene.noise_sigma,
            n_gingiva: pair.n_gingiva,
            num_points: pair.num_points,
            encoder_widths: train.model.encoder_widths.clone(),
            decoder_hidden: train.model.decoder_hidden.clone(),
            grid_side: train.model.grid_side,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            lambda_f: train.weights.lambda_f,
            lambda_align: train.weights.lambda_align,
            lambda_mem: train.weights.lambda_mem,
            use_pm: train.use_pm,
            use_de: train.use_de,
            k: train.k,
            tau: None,
            min_hits: train.min_hits,
            max_rejections: train.max_rejections,
            ablation_seeds: 5,
        }
    }
}

impl Config {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene_spec().validate()?;
        let [a, b, c] = self.ratios;
        split_sizes(self.n_scenes, (a, b, c))?;
        if self.n_gingiva > self.gingiva_points {
            return Err(protocomp::Error::config("n_gingiva", "exceeds gingiva_points").into());
        }
        if self.ablation_seeds == 0 {
            return Err(protocomp::Error::config("ablation_seeds", "must be >= 1").into());
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn scene_spec(&self) -> ArchSceneSpec {
        ArchSceneSpec {
            tooth_count: self.tooth_count,
            points_per_tooth: self.points_per_tooth,
            gingiva_points: self.gingiva_points,
            arch_width: self.arch_width,
            arch_depth: self.arch_depth,
            cusp_count_range: (self.cusp_count_range[0], self.cusp_count_range[1]),
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn pair_options(&self) -> PairOptions {
        PairOptions { n_gingiva: self.n_gingiva, num_points: self.num_points }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            use_pm: self.use_pm,
            use_de: self.use_de,
            weights: LossWeights { lambda_f: self.lambda_f, lambda_align: self.lambda_align, lambda_mem: self.lambda_mem },
            k: self.k,
            tau: match self.tau {
                Some(t) => TauPolicy::Fixed(t),
                None => TauPolicy::RunningMean,
            },
            min_hits: self.min_hits,
            max_rejections: self.max_rejections,
            model: ModelConfig {
                encoder_widths: self.encoder_widths.clone(),
                decoder_hidden: self.decoder_hidden.clone(),
                grid_side: self.grid_side,
                num_points: self.num_points,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn partial_document_fills_defaults() {
        let c: Config = serde_json::from_str(r#"{"seed": 9, "k": 32}"#).unwrap();
        assert_eq!((c.seed, c.k, c.epochs), (9, 32, 100));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = serde_json::from_str::<Config>(r#"{"lamda_mem": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("lamda_mem"));
    }

    #[test]
    fn bad_ratios_name_the_field() {
        let c = Config { ratios: [0.5, 0.2, 0.2], ..Config::default() };
        assert!(c.validate().unwrap_err().to_string().contains("ratios"));
    }
}

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde_json::json;

use crate::dataset::CompletionPair;
use crate::error::{Error, Result};
use crate::memory::{init_bank, PrototypeBank, VECTORS_NAME};
use crate::model::{checkpoint, GlobalFeature, ParameterStore};
use crate::seed;

use super::optim::Adam;
use super::step::{query_branch, query_cloud, Ablation};
use super::{streams, TauPolicy, TrainConfig};

/// Everything needed to continue or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub store: ParameterStore,
    pub bank: PrototypeBank,
    /// Moments for the network tensors, in store order.
    pub adam: Adam,
    pub bank_adam: Adam,
    /// Optimizer steps applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

/// Training-path query descriptors of `pairs` under the current weights.
pub(crate) fn query_features(
    store: &ParameterStore,
    pairs: &[CompletionPair],
    ablation: Ablation,
    parallel: bool,
) -> Result<Vec<GlobalFeature>> {
    let branch = query_branch(ablation);
    let encode = |p: &CompletionPair| store.encode_points(branch, &query_cloud(p, ablation).to_array());
    if parallel {
        pairs.par_iter().map(encode).collect()
    } else {
        pairs.iter().map(encode).collect()
    }
}

impl TrainState {
    /// Fresh weights. With the memory enabled the bank is seeded from one
    /// warm-up pass of training-path query descriptors over `train`.
    pub fn init(config: &TrainConfig, train: &[CompletionPair], parallel: bool) -> Result<Self> {
        config.validate()?;
        let store = ParameterStore::init(&config.model, !config.use_de, seed::derive(config.seed, streams::MODEL))?;
        let warmup = if config.use_pm { query_features(&store, train, config.ablation(), parallel)? } else { Vec::new() };
        let mut bank = init_bank(config.k, store.feature_dim(), &warmup, seed::derive(config.seed, streams::BANK))?;
        if let TauPolicy::Fixed(t) = config.tau {
            bank.tau = t;
        }
        let shapes: Vec<(usize, usize)> = store.params().iter().map(|p| p.value.dim()).collect();
        Ok(Self {
            config: config.clone(),
            adam: Adam::new(config.adam(), &shapes),
            bank_adam: Adam::new(config.adam(), &[bank.vectors.dim()]),
            store,
            bank,
            step: 0,
            epoch: 0,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = json!({
            "config": self.config,
            "step": self.step,
            "epoch": self.epoch,
            "adam_t": self.adam.t,
            "bank_adam_t": self.bank_adam.t,
            "tau": self.bank.tau,
        });
        let mut names: Vec<String> = Vec::new();
        let mut tensors: Vec<&Array2<f64>> = Vec::new();
        for p in self.store.params() {
            names.push(p.name.clone());
            tensors.push(&p.value);
        }
        names.push(VECTORS_NAME.into());
        tensors.push(&self.bank.vectors);
        let moments = self
            .store
            .params()
            .iter()
            .map(|p| p.name.as_str())
            .zip(&self.adam.moments)
            .chain(std::iter::once(VECTORS_NAME).zip(&self.bank_adam.moments));
        for (name, m) in moments {
            names.push(format!("adam.m.{name}"));
            tensors.push(&m.m);
            names.push(format!("adam.v.{name}"));
            tensors.push(&m.v);
        }
        let table: Vec<(&str, &Array2<f64>)> = names.iter().map(String::as_str).zip(tensors).collect();
        checkpoint::encode(&meta, &table)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = checkpoint::decode(bytes)?;
        let field = |name: &str| meta.get(name).ok_or_else(|| Error::Checkpoint(format!("missing meta field `{name}`")));
        let config: TrainConfig = serde_json::from_value(field("config")?.clone())?;
        let as_u64 = |name: &str| -> Result<u64> {
            field(name)?.as_u64().ok_or_else(|| Error::Checkpoint(format!("meta field `{name}` is not an integer")))
        };
        let tau = field("tau")?.as_f64().ok_or_else(|| Error::Checkpoint("meta field `tau` is not a number".into()))?;
        let mut by_name: HashMap<String, Array2<f64>> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Array2<f64>> {
            let t = by_name.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dim() != shape {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", t.dim(), shape)));
            }
            Ok(t)
        };

        let mut store = ParameterStore::init(&config.model, !config.use_de, 0)?;
        let mut adam = Adam::new(config.adam(), &[]);
        for p in store.params_mut() {
            p.value = take(&p.name, p.value.dim())?;
            let m = take(&format!("adam.m.{}", p.name), p.value.dim())?;
            let v = take(&format!("adam.v.{}", p.name), p.value.dim())?;
            adam.moments.push(super::Moments { m, v });
        }
        adam.t = as_u64("adam_t")?;
        let shape = (config.k, config.model.feature_dim());
        let bank = PrototypeBank::from_vectors(take(VECTORS_NAME, shape)?, tau)?;
        let mut bank_adam = Adam::new(config.adam(), &[]);
        bank_adam.moments.push(super::Moments {
            m: take(&format!("adam.m.{VECTORS_NAME}"), shape)?,
            v: take(&format!("adam.v.{VECTORS_NAME}"), shape)?,
        });
        bank_adam.t = as_u64("bank_adam_t")?;
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        if !store.all_finite() {
            return Err(Error::NonFinite { name: "checkpoint parameters".into() });
        }
        Ok(Self { step: as_u64("step")?, epoch: as_u64("epoch")? as usize, config, store, bank, adam, bank_adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors naming the first architectural field on which the checkpoint
    /// and `config` disagree.
    pub fn check_compatible(&self, config: &TrainConfig) -> Result<()> {
        let mine = &self.config;
        let checks: [(&str, String, String); 7] = [
            ("d", config.model.feature_dim().to_string(), mine.model.feature_dim().to_string()),
            ("K", config.k.to_string(), mine.k.to_string()),
            ("use_de", config.use_de.to_string(), mine.use_de.to_string()),
            ("encoder_widths", format!("{:?}", config.model.encoder_widths), format!("{:?}", mine.model.encoder_widths)),
            ("decoder_hidden", format!("{:?}", config.model.decoder_hidden), format!("{:?}", mine.model.decoder_hidden)),
            ("grid_side", config.model.grid_side.to_string(), mine.model.grid_side.to_string()),
            ("num_points", config.model.num_points.to_string(), mine.model.num_points.to_string()),
        ];
        for (field, expected, found) in checks {
            if expected != found {
                return Err(Error::CheckpointMismatch { field: field.into(), expected, found });
            }
        }
        Ok(())
    }
}

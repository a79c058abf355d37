use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::dataset::CompletionPair;
use crate::error::{Error, Result};
use crate::memory::reseed_dead;
use crate::model::GlobalFeature;
use crate::seed;

use super::eval::evaluate;
use super::state::TrainState;
use super::step::{sample_pass, LossValues, Objective, SamplePass};
use super::{streams, TauPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GradNorms {
    pub encoder_partial: f64,
    pub encoder_gt: f64,
    pub decoder: f64,
    pub memory: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Batch means.
    pub losses: LossValues,
    pub grad_norms: GradNorms,
    /// Query branch, retrieved row, squared distance and alpha per sample.
    pub retrievals: Vec<super::Retrieval>,
    /// Query descriptors seen in this batch.
    pub features: Vec<GlobalFeature>,
}

impl StepReport {
    pub fn to_json(&self, epoch: usize) -> Value {
        let mut histogram: BTreeMap<usize, u64> = BTreeMap::new();
        for r in &self.retrievals {
            *histogram.entry(r.index).or_default() += 1;
        }
        let alphas: Vec<f64> = self.retrievals.iter().map(|r| r.alpha).collect();
        let alpha = if alphas.is_empty() {
            Value::Null
        } else {
            json!({
                "mean": alphas.iter().sum::<f64>() / alphas.len() as f64,
                "min": alphas.iter().copied().fold(f64::INFINITY, f64::min),
                "max": alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        };
        json!({
            "event": "step",
            "epoch": epoch,
            "step": self.step,
            "loss": {
                "cd": self.losses.cd,
                "align": self.losses.align,
                "mem": self.losses.mem,
                "total": self.losses.total,
            },
            "grad_norm": self.grad_norms,
            "alpha": alpha,
            "retrieval_histogram": histogram,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied(StepReport),
    /// Nothing was updated; `reason` names the offending quantity.
    Rejected {
        reason: String,
    },
}

fn group_norms(state: &TrainState, grads: &[Array2<f64>], bank_grad: &Array2<f64>) -> GradNorms {
    let mut sq = GradNorms::default();
    for (p, g) in state.store.params().iter().zip(grads) {
        let s: f64 = g.iter().map(|v| v * v).sum();
        if p.name.starts_with("encoder_partial") {
            sq.encoder_partial += s;
        } else if p.name.starts_with("encoder_gt") {
            sq.encoder_gt += s;
        } else {
            sq.decoder += s;
        }
    }
    sq.memory = bank_grad.iter().map(|v| v * v).sum();
    GradNorms {
        encoder_partial: sq.encoder_partial.sqrt(),
        encoder_gt: sq.encoder_gt.sqrt(),
        decoder: sq.decoder.sqrt(),
        memory: sq.memory.sqrt(),
    }
}

/// Forward/backward over `batch`, batch-mean gradients, one optimizer
/// update. Per-sample passes may run in parallel; gradients are reduced in
/// batch order, so the result does not depend on `parallel`.
pub fn training_step(state: &mut TrainState, batch: &[&CompletionPair], parallel: bool) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let cfg = &state.config;
    let ablation = cfg.ablation();
    let objective = Objective::from_weights(&cfg.weights);
    let grid = state.store.grid();
    let tau = state.bank.tau;
    let (store, bank) = (&state.store, &state.bank);
    let run = |pair: &&CompletionPair| sample_pass(store, bank, tau, pair, ablation, objective, &grid);
    let results: Vec<Result<SamplePass>> =
        if parallel { batch.par_iter().map(run).collect() } else { batch.iter().map(run).collect() };
    let mut passes = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(p) => passes.push(p),
            Err(Error::NonFinite { name }) => return Ok(StepOutcome::Rejected { reason: name }),
            Err(e) => return Err(e),
        }
    }

    let scale = 1.0 / batch.len() as f64;
    let mut grads = state.store.zero_gradients();
    let mut bank_grad = Array2::zeros(state.bank.vectors.raw_dim());
    let mut losses = LossValues::default();
    for p in &passes {
        grads.add_assign(&p.grads);
        if let Some((k, g)) = &p.bank_grad {
            bank_grad.row_mut(*k).scaled_add(1.0, g);
        }
        losses.cd += p.losses.cd;
        losses.align += p.losses.align;
        losses.mem += p.losses.mem;
        losses.total += p.losses.total;
    }
    for t in &mut grads.tensors {
        *t *= scale;
    }
    bank_grad *= scale;
    losses.cd *= scale;
    losses.align *= scale;
    losses.mem *= scale;
    losses.total *= scale;
    if !grads.all_finite() || bank_grad.iter().any(|v| !v.is_finite()) {
        return Ok(StepOutcome::Rejected { reason: "gradient".into() });
    }
    let grad_norms = group_norms(state, &grads.tensors, &bank_grad);

    state.store.zero_grad();
    state.store.accumulate(&grads, 1.0);
    {
        let mut tensors: Vec<_> = state.store.params_mut().iter_mut().map(|p| (&mut p.value, &mut p.grad)).collect();
        state.adam.step(&mut tensors)?;
    }
    if ablation.use_pm {
        state.bank.grad.assign(&bank_grad);
        let bank = &mut state.bank;
        state.bank_adam.step(&mut [(&mut bank.vectors, &mut bank.grad)])?;
    }
    let retrievals: Vec<_> = passes.iter().filter_map(|p| p.retrieval).collect();
    for r in &retrievals {
        state.bank.usage[r.index] += 1;
    }
    state.step += 1;
    Ok(StepOutcome::Applied(StepReport {
        step: state.step,
        losses,
        grad_norms,
        retrievals,
        features: passes.into_iter().map(|p| p.query).collect(),
    }))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Snapshot with the lowest validation CD, or the final state when there
    /// is no validation split.
    pub best: TrainState,
    pub best_val_cd_e4: Option<f64>,
    pub rejected_steps: usize,
}

/// Runs epochs `state.epoch .. config.epochs`. Every step and epoch is
/// reported to `log` as a JSON object.
pub fn train(
    mut state: TrainState,
    train_pairs: &[CompletionPair],
    val_pairs: &[CompletionPair],
    parallel: bool,
    log: &mut dyn FnMut(&Value) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_pairs.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let cfg = state.config.clone();
    let mut best: Option<(f64, TrainState)> = None;
    let mut rejected_total = 0;
    let mut consecutive = 0;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, streams::SHUFFLE), epoch as u64));
        let mut recent: Vec<GlobalFeature> = Vec::with_capacity(train_pairs.len());
        let mut sq_distances: Vec<f64> = Vec::new();
        let mut sums = LossValues::default();
        let mut applied = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&CompletionPair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            match training_step(&mut state, &batch, parallel)? {
                StepOutcome::Applied(report) => {
                    consecutive = 0;
                    applied += 1;
                    sums.cd += report.losses.cd;
                    sums.align += report.losses.align;
                    sums.mem += report.losses.mem;
                    sums.total += report.losses.total;
                    sq_distances.extend(report.retrievals.iter().map(|r| r.sq_distance));
                    log(&report.to_json(epoch))?;
                    recent.extend(report.features);
                }
                StepOutcome::Rejected { reason } => {
                    consecutive += 1;
                    rejected_total += 1;
                    log(&json!({"event": "rejected", "epoch": epoch, "step": state.step, "reason": reason}))?;
                    if consecutive >= cfg.max_rejections {
                        return Err(Error::NumericalAbort(consecutive));
                    }
                }
            }
        }
        state.epoch += 1;

        let usage = state.bank.usage.clone();
        let mut reseeded = 0;
        if cfg.use_pm && !recent.is_empty() {
            if cfg.tau == TauPolicy::RunningMean && !sq_distances.is_empty() {
                let mean = sq_distances.iter().sum::<f64>() / sq_distances.len() as f64;
                if mean > 0.0 {
                    state.bank.tau = mean;
                }
            }
            let reseed_seed = seed::derive(seed::derive(cfg.seed, streams::RESEED), epoch as u64);
            reseeded = reseed_dead(&mut state.bank, &recent, cfg.min_hits, reseed_seed)?;
        }
        state.bank.reset_usage();

        let val_cd = if val_pairs.is_empty() {
            None
        } else {
            Some(evaluate(&state.store, &state.bank, val_pairs, cfg.use_pm, "", parallel)?.mean_cd_e4)
        };
        if let Some(v) = val_cd {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, state.clone()));
            }
        }
        let denom = applied.max(1) as f64;
        log(&json!({
            "event": "epoch",
            "epoch": epoch,
            "step": state.step,
            "loss": {
                "cd": sums.cd / denom,
                "align": sums.align / denom,
                "mem": sums.mem / denom,
                "total": sums.total / denom,
            },
            "tau": state.bank.tau,
            "usage": usage,
            "reseeded": reseeded,
            "val_cd_e4": val_cd,
        }))?;
    }
    let (best_val_cd_e4, best) = match best {
        Some((v, s)) => (Some(v), s),
        None => (None, state.clone()),
    };
    Ok(TrainOutcome { state, best, best_val_cd_e4, rejected_steps: rejected_total })
}

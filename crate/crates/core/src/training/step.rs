//! One sample through the whole training graph, forward and backward.
//!
//! Gradient routing:
//! - `L_cd` reaches the decoder, then `F_gt` through the fusion with factor
//!   `1 - alpha`. The prototype enters the fusion as a constant, so the bank
//!   is moved by the commitment loss alone.
//! - `L_align` reaches both encoders.
//! - `L_mem` reaches `F_gt` through `|f - sg(p)|^2` and the retrieved row
//!   through `|sg(f) - p|^2`.
//!
//! Without dual encoders there is a single branch: the shared encoder reads
//! the partial cloud and its descriptor plays both roles, so `L_align` is
//! identically zero and is skipped.

use ndarray::{Array1, Array2};

use crate::dataset::CompletionPair;
use crate::error::{Error, Result};
use crate::geometry::chamfer_l2_with_grad;
use crate::memory::{commitment_loss, confidence_alpha, fuse, fuse_backward, PrototypeBank};
use crate::model::{Branch, FoldingGrid, GlobalFeature, Gradients, ParameterStore};

use super::losses::{alignment_loss, LossWeights};

/// Which optional components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub use_pm: bool,
    pub use_de: bool,
}

/// Per-term weights of the differentiated objective. Training always uses
/// `cd = 1`; other values exist for gradient-routing checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub cd: f64,
    pub align: f64,
    pub mem: f64,
}

impl Objective {
    pub fn from_weights(w: &LossWeights) -> Self {
        Self { cd: 1.0, align: w.lambda_align, mem: w.lambda_mem }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub cd: f64,
    pub align: f64,
    pub mem: f64,
    pub total: f64,
}

/// The retrieval performed for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    /// Encoder that produced the query.
    pub branch: Branch,
    pub index: usize,
    pub sq_distance: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct SamplePass {
    pub losses: LossValues,
    pub grads: Gradients,
    /// Gradient for the retrieved bank row.
    pub bank_grad: Option<(usize, Array1<f64>)>,
    pub retrieval: Option<Retrieval>,
    /// Descriptor that drove retrieval and decoding.
    pub query: GlobalFeature,
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { name: name.into() })
    }
}

/// Forward and backward for one pair. The bank is only read; hit counts are
/// reported through [`SamplePass::retrieval`] for the caller to merge.
pub fn sample_pass(
    store: &ParameterStore,
    bank: &PrototypeBank,
    tau: f64,
    pair: &CompletionPair,
    ablation: Ablation,
    objective: Objective,
    grid: &FoldingGrid,
) -> Result<SamplePass> {
    let gt_points = pair.gt.points();
    let branch = query_branch(ablation);
    let gt_cache = store.encode_forward(branch, &query_cloud(pair, ablation).to_array())?;
    let f_gt = gt_cache.feature();
    check_finite("F_gt", f_gt.values().sum())?;

    let retrieval = if ablation.use_pm {
        let (index, sq_distance) = bank.nearest(&f_gt)?;
        let alpha = confidence_alpha(sq_distance, tau)?;
        Some(Retrieval { branch, index, sq_distance, alpha })
    } else {
        None
    };
    let fused = match &retrieval {
        Some(r) => fuse(&f_gt, &bank.row(r.index), r.alpha)?,
        None => f_gt.clone(),
    };
    let dec_cache = store.decode_forward(&fused, grid)?;
    let (cd, d_pred) = chamfer_l2_with_grad(dec_cache.output(), gt_points)?;
    check_finite("L_cd", cd)?;

    let mut grads = store.zero_gradients();
    let d_fused = store.decode_backward(&dec_cache, &(d_pred * objective.cd), &mut grads);
    let mut d_gt = match &retrieval {
        Some(r) => fuse_backward(&d_fused, r.alpha).0,
        None => d_fused,
    };

    let mut losses = LossValues { cd, ..LossValues::default() };
    if ablation.use_de {
        let pi_cache = store.encode_forward(Branch::Partial, &pair.partial.to_array())?;
        let (align, g_pi, g_gt) = alignment_loss(&pi_cache.feature(), &f_gt)?;
        check_finite("L_align", align)?;
        losses.align = align;
        store.encode_backward(&pi_cache, &(g_pi * objective.align), &mut grads);
        d_gt.scaled_add(objective.align, &g_gt);
    }
    let mut bank_grad = None;
    if let Some(r) = &retrieval {
        let (mem, g_f, g_p) = commitment_loss(&f_gt, &bank.row(r.index))?;
        check_finite("L_mem", mem)?;
        losses.mem = mem;
        d_gt.scaled_add(objective.mem, &g_f);
        bank_grad = Some((r.index, g_p * objective.mem));
    }
    store.encode_backward(&gt_cache, &d_gt, &mut grads);
    losses.total = objective.cd * losses.cd + objective.align * losses.align + objective.mem * losses.mem;
    check_finite("total", losses.total)?;

    Ok(SamplePass { losses, grads, bank_grad, retrieval, query: f_gt })
}

/// Encoder whose descriptor is decoded during training.
pub fn query_branch(ablation: Ablation) -> Branch {
    if ablation.use_de {
        Branch::Gt
    } else {
        Branch::Partial
    }
}

/// Cloud encoded for retrieval and decoding during training.
pub fn query_cloud(pair: &CompletionPair, ablation: Ablation) -> &crate::geometry::PointCloud {
    if ablation.use_de {
        &pair.gt
    } else {
        &pair.partial
    }
}

/// Dense `K x d` view of a sparse bank gradient.
pub fn dense_bank_grad(bank: &PrototypeBank, g: &Option<(usize, Array1<f64>)>) -> Array2<f64> {
    let mut out = Array2::zeros(bank.vectors.raw_dim());
    if let Some((k, row)) = g {
        out.row_mut(*k).assign(row);
    }
    out
}

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CompletionPair;
use crate::error::{Error, Result};
use crate::geometry::{chamfer_l2, fscore, PointCloud};
use crate::memory::{confidence_alpha, fuse, PrototypeBank};
use crate::model::{Branch, GlobalFeature, ParameterStore};

use super::step::Retrieval;

/// F-score threshold in normalized units.
pub const FSCORE_THRESHOLD: f64 = 0.01;

/// Chamfer values are reported multiplied by this factor.
pub const CD_REPORT_SCALE: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub prediction: PointCloud,
    /// Present when the memory is used; its query comes from the partial encoder.
    pub retrieval: Option<Retrieval>,
}

/// Completes `partial`: partial encoder, optional retrieval and fusion with
/// the bank's stored temperature, then decoding. The ground-truth encoder is
/// not evaluated.
pub fn inference_trace(
    store: &ParameterStore,
    bank: &PrototypeBank,
    partial: &PointCloud,
    use_pm: bool,
) -> Result<InferenceTrace> {
    if !store.all_finite() {
        return Err(Error::NonFinite { name: "model parameters".into() });
    }
    let f_pi = store.encode_points(Branch::Partial, &partial.to_array())?;
    let (fused, retrieval): (GlobalFeature, _) = if use_pm {
        if bank.vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { name: crate::memory::VECTORS_NAME.into() });
        }
        let (index, sq_distance) = bank.nearest(&f_pi)?;
        let alpha = confidence_alpha(sq_distance, bank.tau)?;
        let r = Retrieval { branch: Branch::Partial, index, sq_distance, alpha };
        (fuse(&f_pi, &bank.row(index), alpha)?, Some(r))
    } else {
        (f_pi, None)
    };
    let out = store.decode(&fused, &store.grid())?;
    Ok(InferenceTrace { prediction: PointCloud::from_array(&out)?, retrieval })
}

pub fn inference(store: &ParameterStore, bank: &PrototypeBank, partial: &PointCloud, use_pm: bool) -> Result<PointCloud> {
    Ok(inference_trace(store, bank, partial, use_pm)?.prediction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub scene_id: String,
    pub target_position: u32,
    pub cd_e4: f64,
    pub fscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    pub count: usize,
    pub mean_cd_e4: f64,
    pub mean_fscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub use_pm: bool,
    pub mean_cd_e4: f64,
    pub median_cd_e4: f64,
    pub mean_fscore: f64,
    pub per_position: BTreeMap<u32, PositionStats>,
    pub config_fingerprint: String,
    pub pairs: Vec<PairMetrics>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores predictions produced by `predict` against each pair's ground truth.
pub fn evaluate_with<F>(
    pairs: &[CompletionPair],
    use_pm: bool,
    fingerprint: &str,
    parallel: bool,
    predict: F,
) -> Result<EvalReport>
where
    F: Fn(&CompletionPair) -> Result<PointCloud> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one pair".into()));
    }
    let score = |pair: &CompletionPair| -> Result<PairMetrics> {
        let pred = predict(pair)?;
        let cd = chamfer_l2(pred.points(), pair.gt.points())?;
        let f = fscore(pred.points(), pair.gt.points(), FSCORE_THRESHOLD)?;
        Ok(PairMetrics {
            scene_id: pair.scene_id.clone(),
            target_position: pair.target_position,
            cd_e4: cd * CD_REPORT_SCALE,
            fscore: f,
        })
    };
    let metrics: Vec<PairMetrics> = if parallel {
        pairs.par_iter().map(score).collect::<Result<_>>()?
    } else {
        pairs.iter().map(score).collect::<Result<_>>()?
    };
    let n = metrics.len() as f64;
    let cds: Vec<f64> = metrics.iter().map(|m| m.cd_e4).collect();
    let mut groups: BTreeMap<u32, (usize, f64, f64)> = BTreeMap::new();
    for m in &metrics {
        let g = groups.entry(m.target_position).or_default();
        g.0 += 1;
        g.1 += m.cd_e4;
        g.2 += m.fscore;
    }
    let per_position = groups
        .into_iter()
        .map(|(pos, (count, cd, f))| (pos, PositionStats { count, mean_cd_e4: cd / count as f64, mean_fscore: f / count as f64 }))
        .collect();
    Ok(EvalReport {
        samples: metrics.len(),
        use_pm,
        mean_cd_e4: cds.iter().sum::<f64>() / n,
        median_cd_e4: median(&cds),
        mean_fscore: metrics.iter().map(|m| m.fscore).sum::<f64>() / n,
        per_position,
        config_fingerprint: fingerprint.to_string(),
        pairs: metrics,
    })
}

/// Runs [`inference`] on every pair and aggregates the metrics.
pub fn evaluate(
    store: &ParameterStore,
    bank: &PrototypeBank,
    pairs: &[CompletionPair],
    use_pm: bool,
    fingerprint: &str,
    parallel: bool,
) -> Result<EvalReport> {
    evaluate_with(pairs, use_pm, fingerprint, parallel, |pair| inference(store, bank, &pair.partial, use_pm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

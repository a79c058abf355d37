//! Two-dimensional projection of partial descriptors and prototypes, and
//! the compactness ratio of the bank.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::dataset::CompletionPair;
use crate::error::{Error, Result};
use crate::memory::{mean_pairwise_distance, PrototypeBank};
use crate::model::{Branch, GlobalFeature, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Partial,
    Prototype,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Partial => "partial",
            FeatureKind::Prototype => "prototype",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddedFeature {
    pub kind: FeatureKind,
    /// Tooth position of the source pair; prototypes have none.
    pub position_label: Option<u32>,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Embedding {
    pub rows: Vec<EmbeddedFeature>,
    /// Mean pairwise prototype distance over mean pairwise partial distance.
    pub rho: f64,
}

/// Projects `features` onto their two leading principal axes. Each axis is
/// oriented so its largest-magnitude loading is positive.
pub fn pca_2d(features: &[GlobalFeature]) -> Result<Vec<[f64; 2]>> {
    if features.len() < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 3 features, got {}", features.len())));
    }
    let d = features[0].dim();
    if let Some(f) = features.iter().find(|f| f.dim() != d) {
        return Err(Error::dims(d, f.dim(), "embedded feature"));
    }
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i].values()[j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        if k >= d {
            return vec![0.0; d];
        }
        let v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            v.iter().map(|c| -c).collect()
        } else {
            v
        }
    };
    let (a1, a2) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let p1 = row.iter().zip(&a1).map(|(x, a)| x * a).sum();
            let p2 = row.iter().zip(&a2).map(|(x, a)| x * a).sum();
            [p1, p2]
        })
        .collect())
}

/// `meanPairwiseDist(prototypes) / meanPairwiseDist(partials)` in the full
/// descriptor space.
pub fn compactness_ratio(prototypes: &[GlobalFeature], partials: &[GlobalFeature]) -> Result<f64> {
    let spread = mean_pairwise_distance(partials);
    if !(spread > 0.0) {
        return Err(Error::InvalidArgument("partial descriptors have no spread".into()));
    }
    Ok(mean_pairwise_distance(prototypes) / spread)
}

/// Partial descriptors of every pair plus every bank row, projected jointly.
pub fn embed(store: &ParameterStore, bank: &PrototypeBank, pairs: &[CompletionPair]) -> Result<Embedding> {
    let partials: Vec<GlobalFeature> =
        pairs.iter().map(|p| store.encode_points(Branch::Partial, &p.partial.to_array())).collect::<Result<_>>()?;
    let prototypes: Vec<GlobalFeature> = (0..bank.len()).map(|k| bank.row(k)).collect();
    let all: Vec<GlobalFeature> = partials.iter().chain(&prototypes).cloned().collect();
    let coords = pca_2d(&all)?;
    let rows = coords
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (kind, position_label) = if i < pairs.len() {
                (FeatureKind::Partial, Some(pairs[i].target_position))
            } else {
                (FeatureKind::Prototype, None)
            };
            EmbeddedFeature { kind, position_label, pc1: c[0], pc2: c[1] }
        })
        .collect();
    Ok(Embedding { rows, rho: compactness_ratio(&prototypes, &partials)? })
}

/// CSV with header `kind,position_label,pc1,pc2`; prototypes leave the label empty.
pub fn to_csv(rows: &[EmbeddedFeature]) -> String {
    let mut out = String::from("kind,position_label,pc1,pc2\n");
    for r in rows {
        let label = r.position_label.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.kind.as_str(), label, r.pc1, r.pc2);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(v: &[f64]) -> GlobalFeature {
        GlobalFeature::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn planar_data_keeps_pairwise_distances() {
        // points on a tilted plane inside R^4
        let basis = [[0.6, 0.0, 0.8, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let coords = [[0.0, 0.0], [1.0, 2.0], [-2.0, 0.5], [3.0, -1.0], [0.5, 0.5]];
        let feats: Vec<GlobalFeature> = coords
            .iter()
            .map(|c| feat(&(0..4).map(|j| c[0] * basis[0][j] + c[1] * basis[1][j] + 1.0).collect::<Vec<_>>()))
            .collect();
        let proj = pca_2d(&feats).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let orig = feats[i].sq_distance(&feats[j]).sqrt();
                let p = ((proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2)).sqrt();
                assert!((orig - p).abs() < 1e-9, "{orig} vs {p}");
            }
        }
    }

    #[test]
    fn too_few_features() {
        assert!(pca_2d(&[feat(&[1.0]), feat(&[2.0])]).is_err());
    }

    #[test]
    fn identical_prototypes_give_zero_ratio() {
        let protos = vec![feat(&[1.0, 1.0]); 4];
        let partials = vec![feat(&[0.0, 0.0]), feat(&[1.0, 0.0]), feat(&[0.0, 3.0])];
        assert_eq!(compactness_ratio(&protos, &partials).unwrap(), 0.0);
        assert!(compactness_ratio(&protos, &protos).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            EmbeddedFeature { kind: FeatureKind::Partial, position_label: Some(3), pc1: 0.5, pc2: -1.0 },
            EmbeddedFeature { kind: FeatureKind::Prototype, position_label: None, pc1: 2.0, pc2: 0.0 },
        ];
        assert_eq!(to_csv(&rows), "kind,position_label,pc1,pc2\npartial,3,0.5,-1\nprototype,,2,0\n");
    }
}

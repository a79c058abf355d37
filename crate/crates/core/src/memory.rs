//! Prototype memory: nearest-prototype retrieval, confidence-gated fusion and
//! the commitment objective.
//!
//! Retrieval is a linear scan, `O(K d)` per query. The bank size is capped
//! below [`MAX_PROTOTYPES`].

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::GlobalFeature;
use crate::seed;

/// Exclusive upper bound on the number of prototypes.
pub const MAX_PROTOTYPES: usize = 128;

pub const VECTORS_NAME: &str = "memory.vectors";

/// `K x d` learnable prototypes plus per-row hit counters.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub vectors: Array2<f64>,
    pub grad: Array2<f64>,
    pub usage: Vec<u64>,
    /// Current confidence temperature.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub index: usize,
    pub prototype: GlobalFeature,
    pub sq_distance: f64,
    pub alpha: f64,
}

pub fn validate_size(k: usize) -> Result<()> {
    if k == 0 || k >= MAX_PROTOTYPES {
        return Err(Error::config("K", format!("must satisfy 1 <= K < {MAX_PROTOTYPES}, got {k}")));
    }
    Ok(())
}

impl PrototypeBank {
    pub fn from_vectors(vectors: Array2<f64>, tau: f64) -> Result<Self> {
        validate_size(vectors.nrows())?;
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { name: VECTORS_NAME.into() });
        }
        Ok(Self { grad: Array2::zeros(vectors.raw_dim()), usage: vec![0; vectors.nrows()], vectors, tau })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, k: usize) -> GlobalFeature {
        GlobalFeature::from_array_unchecked(self.vectors.row(k).to_owned())
    }

    /// Index of and squared distance to the nearest row; ties go to the
    /// lowest index. Read-only, so safe to call from many threads.
    pub fn nearest(&self, query: &GlobalFeature) -> Result<(usize, f64)> {
        if query.dim() != self.dim() {
            return Err(Error::dims(self.dim(), query.dim(), "retrieval query"));
        }
        let q = query.values();
        let mut best = (0, f64::INFINITY);
        for (k, row) in self.vectors.outer_iter().enumerate() {
            let d: f64 = row.iter().zip(q.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best)
    }

    /// Nearest-prototype lookup plus confidence; bumps the hit counter.
    pub fn retrieve(&mut self, query: &GlobalFeature, tau: f64) -> Result<RetrievalResult> {
        let (index, sq_distance) = self.nearest(query)?;
        let alpha = confidence_alpha(sq_distance, tau)?;
        self.usage[index] += 1;
        Ok(RetrievalResult { index, prototype: self.row(index), sq_distance, alpha })
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// True when no two rows are equal.
    pub fn rows_distinct(&self) -> bool {
        let k = self.len();
        (0..k).all(|i| (i + 1..k).all(|j| self.vectors.row(i) != self.vectors.row(j)))
    }

    /// Mean pairwise Euclidean distance between rows.
    pub fn mean_pairwise_distance(&self) -> f64 {
        let rows: Vec<GlobalFeature> = (0..self.len()).map(|k| self.row(k)).collect();
        mean_pairwise_distance(&rows)
    }
}

pub fn mean_pairwise_distance(features: &[GlobalFeature]) -> f64 {
    let n = features.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += features[i].sq_distance(&features[j]).sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// `exp(-sq_distance / tau)`: 1 at an exact hit, decaying toward 0.
pub fn confidence_alpha(sq_distance: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if !(sq_distance >= 0.0) {
        return Err(Error::InvalidArgument(format!("squared distance must be >= 0, got {sq_distance}")));
    }
    Ok((-sq_distance / tau).exp())
}

/// `(1 - alpha) f + alpha proto`.
pub fn fuse(f: &GlobalFeature, proto: &GlobalFeature, alpha: f64) -> Result<GlobalFeature> {
    if f.dim() != proto.dim() {
        return Err(Error::dims(f.dim(), proto.dim(), "fusion operands"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let out = f.values() * (1.0 - alpha) + &(proto.values() * alpha);
    Ok(GlobalFeature::from_array_unchecked(out))
}

/// Gradients of [`fuse`] for upstream `d_fused`, with `alpha` held constant:
/// `(d_f, d_proto)`.
pub fn fuse_backward(d_fused: &Array1<f64>, alpha: f64) -> (Array1<f64>, Array1<f64>) {
    (d_fused * (1.0 - alpha), d_fused * alpha)
}

/// Commitment loss with stop-gradient routing.
///
/// The value is `|sg(f) - p|^2 + |f - sg(p)|^2`. The first term only moves
/// the prototype, the second only the feature:
/// `grad_f = 2 (f - p)`, `grad_proto = 2 (p - f)`.
pub fn commitment_loss(f_gt: &GlobalFeature, proto: &GlobalFeature) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    if f_gt.dim() != proto.dim() {
        return Err(Error::dims(f_gt.dim(), proto.dim(), "commitment operands"));
    }
    let diff = f_gt.values() - proto.values();
    let sq = diff.dot(&diff);
    let loss = sq + sq;
    let grad_f = &diff * 2.0;
    let grad_proto = &diff * -2.0;
    Ok((loss, grad_f, grad_proto))
}

fn feature_rms(features: &[GlobalFeature]) -> f64 {
    let n: usize = features.iter().map(|f| f.dim()).sum();
    if n == 0 {
        return 1.0;
    }
    let s: f64 = features.iter().map(|f| f.values().dot(f.values())).sum();
    let rms = (s / n as f64).sqrt();
    if rms > 0.0 {
        rms
    } else {
        1.0
    }
}

/// Replaces rows hit fewer than `min_hits` times with a random recent feature
/// plus small seeded noise, then resets all counters. Returns the number of
/// rows replaced.
pub fn reseed_dead(bank: &mut PrototypeBank, recent: &[GlobalFeature], min_hits: u64, seed_value: u64) -> Result<usize> {
    if recent.is_empty() {
        return Err(Error::InvalidArgument("reseeding needs recent features".into()));
    }
    if let Some(f) = recent.iter().find(|f| f.dim() != bank.dim()) {
        return Err(Error::dims(bank.dim(), f.dim(), "reseed feature"));
    }
    let dead: Vec<usize> = (0..bank.len()).filter(|&k| bank.usage[k] < min_hits).collect();
    let mut rng = seed::rng(seed_value, 0x7e5e);
    let noise_scale = 1e-3 * feature_rms(recent);
    let mut pool: Vec<usize> = (0..recent.len()).collect();
    for &k in &dead {
        if pool.is_empty() {
            pool = (0..recent.len()).collect();
        }
        let pick = pool.swap_remove(rng.gen_range(0..pool.len()));
        loop {
            let mut row = recent[pick].values().clone();
            row.mapv_inplace(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + noise_scale * z
            });
            let clash = (0..bank.len()).any(|j| j != k && bank.vectors.row(j) == row.view());
            if !clash {
                bank.vectors.row_mut(k).assign(&row);
                break;
            }
        }
    }
    bank.reset_usage();
    Ok(dead.len())
}

/// Seeds `k` prototypes from warm-up features with k-means++ (first pick
/// uniform, then proportional to squared distance to the closest pick).
/// Without warm-up features the rows are seeded standard normal draws.
pub fn init_bank(k: usize, d: usize, warmup: &[GlobalFeature], seed_value: u64) -> Result<PrototypeBank> {
    validate_size(k)?;
    let mut rng = seed::rng(seed_value, 0xba2c);
    if warmup.is_empty() {
        let vectors = Array2::from_shape_simple_fn((k, d), || StandardNormal.sample(&mut rng));
        return PrototypeBank::from_vectors(vectors, 1.0);
    }
    if let Some(f) = warmup.iter().find(|f| f.dim() != d) {
        return Err(Error::dims(d, f.dim(), "warm-up feature"));
    }
    if warmup.len() < k {
        // too few to seed from: Gaussian rows matched to warm-up statistics
        let n = warmup.len() as f64;
        let mean = warmup.iter().fold(Array1::zeros(d), |acc: Array1<f64>, f| acc + f.values()) / n;
        let var = warmup.iter().fold(Array1::zeros(d), |acc: Array1<f64>, f| acc + (f.values() - &mean).mapv(|v| v * v)) / n;
        let std = var.mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        let vectors = Array2::from_shape_fn((k, d), |(_, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean[j] + std[j] * z
        });
        return PrototypeBank::from_vectors(vectors, 1.0);
    }
    let n = warmup.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = warmup.iter().map(|f| f.sq_distance(&warmup[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while nearest[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // every remaining feature coincides with a pick
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, f) in warmup.iter().enumerate() {
            nearest[i] = nearest[i].min(f.sq_distance(&warmup[next]));
        }
    }
    let mut vectors = Array2::zeros((k, d));
    for (row, &i) in chosen.iter().enumerate() {
        vectors.row_mut(row).assign(warmup[i].values());
    }
    let mut bank = PrototypeBank::from_vectors(vectors, 1.0)?;
    // duplicated warm-up features would give equal rows
    if !bank.rows_distinct() {
        let noise_scale = 1e-3 * feature_rms(warmup);
        for r in 1..k {
            while (0..r).any(|j| bank.vectors.row(j) == bank.vectors.row(r)) {
                let mut row = bank.vectors.row(r).to_owned();
                row.mapv_inplace(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + noise_scale * z
                });
                bank.vectors.row_mut(r).assign(&row);
            }
        }
    }
    let mean_sq = warmup.iter().map(|f| bank.nearest(f).map(|x| x.1)).sum::<Result<f64>>()? / n as f64;
    if mean_sq > 0.0 {
        bank.tau = mean_sq;
    }
    Ok(bank)
}

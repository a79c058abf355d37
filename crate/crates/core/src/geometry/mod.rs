//! Point-set kernels: normalization, sampling and the Chamfer / F-score metrics.
//!
//! Everything here is a pure function of its inputs.

mod kdtree;
pub mod xyz;

pub use kdtree::KdTree;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Below this size the brute-force nearest-neighbour scan is used directly.
const BRUTE_FORCE_LIMIT: usize = 64;

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// A nonempty ordered list of finite 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidCloud("cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} is not finite")));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from the rows of an `N x 3` matrix.
    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        if a.ncols() != 3 {
            return Err(Error::dims(3, a.ncols(), "point matrix columns"));
        }
        Self::new(a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 3), |(i, j)| self.points[i][j])
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Selects points by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud { points: indices.iter().map(|&i| self.points[i]).collect() }
    }

    /// Concatenates two clouds.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }
}

/// The affine map that sends a cloud to zero mean and unit bounding radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub centroid: Point,
    pub scale: f64,
}

impl NormalizationStats {
    pub fn apply(&self, pc: &PointCloud) -> PointCloud {
        let c = self.centroid;
        let s = self.scale;
        PointCloud { points: pc.points.iter().map(|p| [(p[0] - c[0]) / s, (p[1] - c[1]) / s, (p[2] - c[2]) / s]).collect() }
    }

    /// Maps normalized points back into the original frame.
    pub fn invert(&self, pc: &PointCloud) -> PointCloud {
        let c = self.centroid;
        let s = self.scale;
        PointCloud { points: pc.points.iter().map(|p| [p[0] * s + c[0], p[1] * s + c[1], p[2] * s + c[2]]).collect() }
    }
}

/// Computes the zero-mean / unit-radius transform of `pc` without applying it.
pub fn normalization_stats(pc: &PointCloud) -> Result<NormalizationStats> {
    let first = pc.points[0];
    if pc.points.iter().all(|p| *p == first) {
        return Err(Error::DegenerateCloud);
    }
    let centroid = pc.centroid();
    let scale = pc.points.iter().map(|p| sq_dist(p, &centroid)).fold(0.0f64, f64::max).sqrt();
    if !(scale > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    Ok(NormalizationStats { centroid, scale })
}

/// Translates `pc` to zero mean and scales it so the farthest point lies on
/// the unit sphere.
pub fn normalize(pc: &PointCloud) -> Result<(PointCloud, NormalizationStats)> {
    let stats = normalization_stats(pc)?;
    Ok((stats.apply(pc), stats))
}

/// Farthest-point sampling starting from an explicit first index.
///
/// Each subsequent pick maximizes the squared distance to the nearest already
/// chosen point; ties go to the lowest index.
pub fn farthest_point_sample_from(pc: &PointCloud, m: usize, first: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if m > n {
        return Err(Error::SampleTooLarge { requested: m, available: n });
    }
    if first >= n {
        return Err(Error::InvalidArgument(format!("first index {first} out of range for {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let pts = &pc.points;
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = first;
    for _ in 0..m {
        chosen.push(current);
        taken[current] = true;
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = sq_dist(&pts[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// Farthest-point sampling whose first index is drawn from `seed`.
pub fn farthest_point_sample(pc: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > pc.len() {
        return Err(Error::SampleTooLarge { requested: m, available: pc.len() });
    }
    let first = ChaCha8Rng::seed_from_u64(seed).gen_range(0..pc.len());
    farthest_point_sample_from(pc, m, first)
}

/// Brings `pc` to exactly `m` points: FPS when there are enough points,
/// otherwise the original points followed by cyclic duplicates `0, 1, 2, ...`.
pub fn resample_to(pc: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    if m == 0 {
        return Err(Error::InvalidArgument("cannot resample to 0 points".into()));
    }
    let n = pc.len();
    if n >= m {
        let idx = farthest_point_sample(pc, m, seed)?;
        Ok(pc.select(&idx))
    } else {
        let mut points = pc.points.clone();
        points.extend((0..m - n).map(|k| pc.points[k % n]));
        Ok(PointCloud { points })
    }
}

/// For every point of `queries`, the index of and squared distance to its
/// nearest neighbour in `reference` (ties resolved to the lowest index).
pub fn nearest_neighbors(queries: &[Point], reference: &[Point]) -> Vec<(usize, f64)> {
    if reference.len() <= BRUTE_FORCE_LIMIT || queries.len() <= BRUTE_FORCE_LIMIT {
        queries.iter().map(|q| brute_force_nearest(q, reference)).collect()
    } else {
        let tree = KdTree::build(reference);
        queries.iter().map(|q| tree.nearest(q)).collect()
    }
}

pub(crate) fn brute_force_nearest(q: &Point, reference: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, r) in reference.iter().enumerate() {
        let d = sq_dist(q, r);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_nonempty(a: &[Point], b: &[Point]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidCloud("empty cloud in metric".into()));
    }
    Ok(())
}

/// Symmetric squared-L2 Chamfer distance: the mean nearest-neighbour squared
/// distance from `a` to `b` plus the same from `b` to `a`.
pub fn chamfer_l2(a: &[Point], b: &[Point]) -> Result<f64> {
    check_nonempty(a, b)?;
    let ab: f64 = nearest_neighbors(a, b).iter().map(|x| x.1).sum();
    let ba: f64 = nearest_neighbors(b, a).iter().map(|x| x.1).sum();
    Ok(ab / a.len() as f64 + ba / b.len() as f64)
}

/// The O(|a| |b|) double loop; kept as the reference the accelerated path is
/// checked against.
pub fn chamfer_l2_brute_force(a: &[Point], b: &[Point]) -> Result<f64> {
    check_nonempty(a, b)?;
    let ab: f64 = a.iter().map(|p| brute_force_nearest(p, b).1).sum();
    let ba: f64 = b.iter().map(|p| brute_force_nearest(p, a).1).sum();
    Ok(ab / a.len() as f64 + ba / b.len() as f64)
}

/// Chamfer distance between a predicted `M x 3` matrix and a target cloud,
/// together with its gradient with respect to the prediction.
pub fn chamfer_l2_with_grad(pred: &Array2<f64>, target: &[Point]) -> Result<(f64, Array2<f64>)> {
    let pts: Vec<Point> = pred.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
    check_nonempty(&pts, target)?;
    let m = pts.len() as f64;
    let n = target.len() as f64;
    let fwd = nearest_neighbors(&pts, target);
    let bwd = nearest_neighbors(target, &pts);
    let mut grad = Array2::zeros((pts.len(), 3));
    let mut ab = 0.0;
    for (i, &(j, d)) in fwd.iter().enumerate() {
        ab += d;
        for k in 0..3 {
            grad[[i, k]] += 2.0 * (pts[i][k] - target[j][k]) / m;
        }
    }
    let mut ba = 0.0;
    for (j, &(i, d)) in bwd.iter().enumerate() {
        ba += d;
        for k in 0..3 {
            grad[[i, k]] += 2.0 * (pts[i][k] - target[j][k]) / n;
        }
    }
    Ok((ab / m + ba / n, grad))
}

/// F-score at absolute distance threshold `tau`.
pub fn fscore(a: &[Point], b: &[Point], tau: f64) -> Result<f64> {
    check_nonempty(a, b)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let t2 = tau * tau;
    let within = |q: &[Point], r: &[Point]| nearest_neighbors(q, r).iter().filter(|x| x.1 <= t2).count() as f64 / q.len() as f64;
    let precision = within(a, b);
    let recall = within(b, a);
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

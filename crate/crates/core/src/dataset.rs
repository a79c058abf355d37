//! Synthetic dental-arch scenes and the (partial, ground truth) pairs built
//! from them.
//!
//! A scene is a half arch of labelled teeth sitting on a gingiva band. Tooth
//! morphology depends on the position label (low labels are narrow with one
//! or two cusps, high labels are wide with four or five), so shapes recur
//! across scenes and a prototype memory has structure to find.
//!
//! A pair removes one tooth: the tooth itself is the ground truth, and its
//! neighbours plus the nearest gingiva points form the partial input.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, normalization_stats, resample_to, sq_dist, xyz, NormalizationStats, Point, PointCloud};
use crate::seed;

pub const DEFAULT_NUM_POINTS: usize = 2048;
pub const DEFAULT_N_GINGIVA: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSceneSpec {
    pub tooth_count: usize,
    pub points_per_tooth: usize,
    pub gingiva_points: usize,
    pub arch_width: f64,
    pub arch_depth: f64,
    pub cusp_count_range: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ArchSceneSpec {
    fn default() -> Self {
        Self {
            tooth_count: 10,
            points_per_tooth: 2400,
            gingiva_points: 6000,
            arch_width: 50.0,
            arch_depth: 40.0,
            cusp_count_range: (1, 5),
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl ArchSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(6..=14).contains(&self.tooth_count) {
            return Err(Error::config("tooth_count", "must be in [6, 14]"));
        }
        if self.points_per_tooth == 0 {
            return Err(Error::config("points_per_tooth", "must be positive"));
        }
        if self.gingiva_points == 0 {
            return Err(Error::config("gingiva_points", "must be positive"));
        }
        if !(self.arch_width > 0.0 && self.arch_width.is_finite()) {
            return Err(Error::config("arch_width", "must be a positive real"));
        }
        if !(self.arch_depth > 0.0 && self.arch_depth.is_finite()) {
            return Err(Error::config("arch_depth", "must be a positive real"));
        }
        let (lo, hi) = self.cusp_count_range;
        if lo == 0 || lo > hi {
            return Err(Error::config("cusp_count_range", "need 1 <= min <= max"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tooth {
    pub position: u32,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchScene {
    pub teeth: Vec<Tooth>,
    pub gingiva: PointCloud,
}

impl ArchScene {
    pub fn tooth(&self, position: u32) -> Option<&Tooth> {
        self.teeth.iter().find(|t| t.position == position)
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn signed_pow(x: f64, e: f64) -> f64 {
    x.signum() * x.abs().powf(e)
}

/// Half parabola from the midline (x = 0) to the distal end, sampled by arc
/// length.
struct ArchCurve {
    half_width: f64,
    depth: f64,
    xs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ArchCurve {
    fn new(width: f64, depth: f64) -> Self {
        let half_width = width / 2.0;
        let samples = 2048;
        let xs: Vec<f64> = (0..=samples).map(|i| half_width * i as f64 / samples as f64).collect();
        let mut cumulative = vec![0.0];
        for w in xs.windows(2) {
            let (x0, x1) = (w[0], w[1]);
            let dy = Self::y_at(half_width, depth, x1) - Self::y_at(half_width, depth, x0);
            let seg = ((x1 - x0).powi(2) + dy * dy).sqrt();
            cumulative.push(cumulative.last().unwrap() + seg);
        }
        Self { half_width, depth, xs, cumulative }
    }

    fn y_at(half_width: f64, depth: f64, x: f64) -> f64 {
        depth * (1.0 - (x / half_width).powi(2))
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Position and unit tangent at arc length `s`.
    fn frame(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let s = s.clamp(0.0, self.length());
        let k = self.cumulative.partition_point(|&c| c < s).clamp(1, self.xs.len() - 1);
        let (c0, c1) = (self.cumulative[k - 1], self.cumulative[k]);
        let f = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        let x = lerp(self.xs[k - 1], self.xs[k], f);
        let y = Self::y_at(self.half_width, self.depth, x);
        let slope = -2.0 * self.depth * x / (self.half_width * self.half_width);
        let norm = (1.0 + slope * slope).sqrt();
        ([x, y], [1.0 / norm, slope / norm])
    }
}

struct Cusp {
    x: f64,
    y: f64,
    height: f64,
    width: f64,
}

struct CrownShape {
    a: f64,
    b: f64,
    c: f64,
    e_vertical: f64,
    e_horizontal: f64,
    cusps: Vec<Cusp>,
}

impl CrownShape {
    fn random<R: Rng>(t: f64, spacing: f64, cusp_count: usize, rng: &mut R) -> Self {
        let mut jit = |amp: f64| 1.0 + rng.gen_range(-amp..amp);
        let a = spacing * lerp(0.38, 0.45, t) * jit(0.04);
        let b = spacing * lerp(0.26, 0.48, t) * jit(0.05);
        let c = spacing * lerp(0.55, 0.40, t) * jit(0.05);
        let e_vertical = lerp(0.65, 0.40, t) * jit(0.05);
        let e_horizontal = lerp(0.85, 0.45, t) * jit(0.05);
        let cusps = match cusp_count {
            1 => vec![(0.0, 0.0)],
            2 => vec![(-0.45 * a, 0.0), (0.45 * a, 0.0)],
            n => {
                let offset = rng.gen_range(-0.15..0.15);
                (0..n)
                    .map(|k| {
                        let ang = TAU * k as f64 / n as f64 + PI / n as f64 + offset;
                        (0.5 * a * ang.cos(), 0.5 * b * ang.sin())
                    })
                    .collect()
            }
        }
        .into_iter()
        .map(|(x, y)| Cusp {
            x,
            y,
            height: 0.35 * c * (1.0 + rng.gen_range(-0.2..0.2)),
            width: if cusp_count <= 2 { 0.35 * a } else { 0.28 * a.min(b) },
        })
        .collect();
        Self { a, b, c, e_vertical, e_horizontal, cusps }
    }

    /// A surface point in the tooth's local frame; z runs from 0 (gum line)
    /// upward.
    fn sample<R: Rng>(&self, rng: &mut R) -> Point {
        let su: f64 = rng.gen_range(-1.0..1.0);
        let cu = (1.0 - su * su).sqrt();
        let v: f64 = rng.gen_range(-PI..PI);
        let ring = signed_pow(cu, self.e_vertical);
        let x = self.a * ring * signed_pow(v.cos(), self.e_horizontal);
        let y = self.b * ring * signed_pow(v.sin(), self.e_horizontal);
        let mut z = self.c * signed_pow(su, self.e_vertical);
        if su > 0.0 {
            let bump: f64 = self
                .cusps
                .iter()
                .map(|k| {
                    let r2 = (x - k.x).powi(2) + (y - k.y).powi(2);
                    k.height * (-r2 / (2.0 * k.width * k.width)).exp()
                })
                .sum();
            z += bump * su;
        }
        [x, y, z + self.c]
    }
}

fn cusp_count_for(t: f64, range: (usize, usize)) -> usize {
    lerp(range.0 as f64, range.1 as f64, t).round() as usize
}

/// Builds one scene. Identical specs give bit-identical scenes.
pub fn generate_scene(spec: &ArchSceneSpec) -> Result<ArchScene> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, 0);
    let width = spec.arch_width * (1.0 + rng.gen_range(-0.08..0.08));
    let depth = spec.arch_depth * (1.0 + rng.gen_range(-0.08..0.08));
    let curve = ArchCurve::new(width, depth);
    let n = spec.tooth_count;
    let spacing = curve.length() / n as f64;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let lift = 0.02 * spacing;

    let mut teeth = Vec::with_capacity(n);
    for k in 0..n {
        let position = (k + 1) as u32;
        let t = k as f64 / (n - 1) as f64;
        let mut trng = seed::rng(spec.seed, 1 + position as u64);
        let shape = CrownShape::random(t, spacing, cusp_count_for(t, spec.cusp_count_range), &mut trng);
        let (center, tangent) = curve.frame((k as f64 + 0.5) * spacing);
        let yaw: f64 = trng.gen_range(-0.06..0.06);
        let (sy, cy) = yaw.sin_cos();
        let tx = [tangent[0] * cy - tangent[1] * sy, tangent[0] * sy + tangent[1] * cy];
        let nx = [-tx[1], tx[0]];
        let points = (0..spec.points_per_tooth)
            .map(|_| {
                let p = shape.sample(&mut trng);
                [
                    center[0] + p[0] * tx[0] + p[1] * nx[0] + noise.sample(&mut trng),
                    center[1] + p[0] * tx[1] + p[1] * nx[1] + noise.sample(&mut trng),
                    p[2] + lift + noise.sample(&mut trng),
                ]
            })
            .collect();
        teeth.push(Tooth { position, cloud: PointCloud::new(points)? });
    }

    let mut grng = seed::rng(spec.seed, 1000);
    let band = 0.6 * spacing;
    let gingiva = (0..spec.gingiva_points)
        .map(|_| {
            let s = grng.gen_range(-0.03..1.03) * curve.length();
            let v: f64 = grng.gen_range(-1.0..1.0);
            let (c, t) = curve.frame(s);
            let nrm = [-t[1], t[0]];
            [
                c[0] + v * band * nrm[0] + noise.sample(&mut grng),
                c[1] + v * band * nrm[1] + noise.sample(&mut grng),
                -0.05 * spacing - 0.35 * spacing * v * v + noise.sample(&mut grng),
            ]
        })
        .collect();

    Ok(ArchScene { teeth, gingiva: PointCloud::new(gingiva)? })
}

/// One training or evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionPair {
    pub scene_id: String,
    pub target_position: u32,
    /// Normalized, resampled partial input.
    pub partial: PointCloud,
    /// Normalized, resampled ground-truth tooth.
    pub gt: PointCloud,
    /// The retained neighbourhood in scene coordinates, before normalization
    /// and resampling.
    pub context: PointCloud,
    pub stats: NormalizationStats,
    pub seed: u64,
}

/// Builds a pair with the default 2048-point budget.
pub fn make_pair(scene: &ArchScene, target: u32, n_gingiva: usize, seed: u64) -> Result<CompletionPair> {
    make_pair_sized(scene, target, n_gingiva, DEFAULT_NUM_POINTS, seed)
}

pub fn make_pair_sized(scene: &ArchScene, target: u32, n_gingiva: usize, num_points: usize, seed: u64) -> Result<CompletionPair> {
    let tooth = scene.tooth(target).ok_or_else(|| Error::InvalidArgument(format!("unknown target position {target}")))?;
    if n_gingiva > scene.gingiva.len() {
        return Err(Error::InvalidArgument(format!("n_gingiva {n_gingiva} exceeds {} gingiva points", scene.gingiva.len())));
    }
    let mut source: Vec<Point> = Vec::new();
    for neighbour in [target.checked_sub(1), target.checked_add(1)].into_iter().flatten() {
        if let Some(t) = scene.tooth(neighbour) {
            source.extend_from_slice(t.cloud.points());
        }
    }
    let center = tooth.cloud.centroid();
    let mut order: Vec<(f64, usize)> = scene.gingiva.points().iter().enumerate().map(|(i, p)| (sq_dist(p, &center), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    source.extend(order[..n_gingiva].iter().map(|&(_, i)| scene.gingiva.points()[i]));
    let context = PointCloud::new(source)?;

    let stats = normalization_stats(&context.concat(&tooth.cloud))?;
    let partial = resample_to(&stats.apply(&context), num_points, seed::derive(seed, 1))?;
    let gt = resample_to(&stats.apply(&tooth.cloud), num_points, seed::derive(seed, 2))?;
    Ok(CompletionPair { scene_id: String::new(), target_position: target, partial, gt, context, stats, seed })
}

/// Per-pair construction options shared by a whole split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOptions {
    pub n_gingiva: usize,
    pub num_points: usize,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self { n_gingiva: DEFAULT_N_GINGIVA, num_points: DEFAULT_NUM_POINTS }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<CompletionPair>,
    pub val: Vec<CompletionPair>,
    pub test: Vec<CompletionPair>,
}

impl Split {
    pub fn parts(&self) -> [(&'static str, &[CompletionPair]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

pub fn scene_name(index: usize) -> String {
    format!("scene{index:04}")
}

/// Scene counts per split for `n_scenes` under `ratios`.
pub fn split_sizes(n_scenes: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config("ratios", "must be positive and sum to 1"));
    }
    let n_train = (a * n_scenes as f64).round() as usize;
    let n_val = (b * n_scenes as f64).round() as usize;
    let n_test = n_scenes.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val > n_scenes {
        return Err(Error::config("n_scenes", format!("{n_scenes} scenes cannot populate train/val/test at ratios {ratios:?}")));
    }
    Ok((n_train, n_val, n_test))
}

/// Generates `n_scenes` scenes, turns every tooth of every scene into a pair,
/// and splits at scene level so no scene contributes to two splits.
pub fn build_split(
    spec: &ArchSceneSpec,
    n_scenes: usize,
    ratios: (f64, f64, f64),
    options: PairOptions,
    seed: u64,
) -> Result<Split> {
    spec.validate()?;
    let (n_train, n_val, _) = split_sizes(n_scenes, ratios)?;
    if options.n_gingiva > spec.gingiva_points {
        return Err(Error::config("n_gingiva", "exceeds gingiva_points"));
    }
    let mut ids: Vec<usize> = (0..n_scenes).collect();
    ids.shuffle(&mut seed::rng(seed, 0));

    let scene_pairs = |index: usize| -> Result<Vec<CompletionPair>> {
        let scene_spec = ArchSceneSpec { seed: seed::derive(seed, 1 + index as u64), ..spec.clone() };
        let scene = generate_scene(&scene_spec)?;
        scene
            .teeth
            .iter()
            .map(|t| {
                let pair_seed = seed::derive(scene_spec.seed, 100 + t.position as u64);
                let mut pair = make_pair_sized(&scene, t.position, options.n_gingiva, options.num_points, pair_seed)?;
                pair.scene_id = scene_name(index);
                Ok(pair)
            })
            .collect()
    };
    let collect = |scenes: &[usize]| -> Result<Vec<CompletionPair>> {
        let mut sorted = scenes.to_vec();
        sorted.sort_unstable();
        let mut out = Vec::new();
        for i in sorted {
            out.extend(scene_pairs(i)?);
        }
        Ok(out)
    };
    Ok(Split {
        train: collect(&ids[..n_train])?,
        val: collect(&ids[n_train..n_train + n_val])?,
        test: collect(&ids[n_train + n_val..])?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PairMeta {
    target_position: u32,
    centroid: Point,
    scale: f64,
    seed: u64,
}

pub fn pair_dir_name(pair: &CompletionPair) -> String {
    format!("{}_{}", pair.scene_id, pair.target_position)
}

/// Writes `partial.xyz`, `gt.xyz`, `context.xyz` and `meta.json` into `dir`.
pub fn save_pair(dir: &Path, pair: &CompletionPair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    xyz::write(&dir.join("partial.xyz"), &pair.partial)?;
    xyz::write(&dir.join("gt.xyz"), &pair.gt)?;
    xyz::write(&dir.join("context.xyz"), &pair.context)?;
    let meta = PairMeta {
        target_position: pair.target_position,
        centroid: pair.stats.centroid,
        scale: pair.stats.scale,
        seed: pair.seed,
    };
    let path = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_pair(dir: &Path) -> Result<CompletionPair> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PairMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if !(meta.scale > 0.0) {
        return Err(Error::Data(format!("{}: scale must be positive", meta_path.display())));
    }
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let scene_id = match name.rsplit_once('_') {
        Some((scene, _)) => scene.to_string(),
        None => name.to_string(),
    };
    Ok(CompletionPair {
        scene_id,
        target_position: meta.target_position,
        partial: xyz::read(&dir.join("partial.xyz"))?,
        gt: xyz::read(&dir.join("gt.xyz"))?,
        context: xyz::read(&dir.join("context.xyz"))?,
        stats: NormalizationStats { centroid: meta.centroid, scale: meta.scale },
        seed: meta.seed,
    })
}

/// Writes every pair of a split under `root/<split>/`.
pub fn save_split(root: &Path, split: &Split) -> Result<()> {
    for (name, pairs) in split.parts() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for pair in pairs {
            save_pair(&dir.join(pair_dir_name(pair)), pair)?;
        }
    }
    Ok(())
}

/// Loads all pairs under `root/<name>/`, ordered by (scene, position).
pub fn load_split_part(root: &Path, name: &str) -> Result<Vec<CompletionPair>> {
    let dir = root.join(name);
    if !dir.is_dir() {
        return Err(Error::Data(format!("missing split directory {}", dir.display())));
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    let mut pairs = dirs.iter().map(|d| load_pair(d)).collect::<Result<Vec<_>>>()?;
    pairs.sort_by(|a, b| a.scene_id.cmp(&b.scene_id).then(a.target_position.cmp(&b.target_position)));
    Ok(pairs)
}

pub fn load_split(root: &Path) -> Result<Split> {
    Ok(Split { train: load_split_part(root, "train")?, val: load_split_part(root, "val")?, test: load_split_part(root, "test")? })
}

/// Distinct scene ids in a list of pairs.
pub fn scene_ids(pairs: &[CompletionPair]) -> BTreeSet<String> {
    pairs.iter().map(|p| p.scene_id.clone()).collect()
}

/// Smallest distance between any two points of different teeth.
pub fn min_inter_tooth_distance(scene: &ArchScene) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in scene.teeth.iter().enumerate() {
        for b in &scene.teeth[i + 1..] {
            let nn = geometry::nearest_neighbors(a.cloud.points(), b.cloud.points());
            best = nn.iter().map(|x| x.1).fold(best, f64::min);
        }
    }
    best.sqrt()
}

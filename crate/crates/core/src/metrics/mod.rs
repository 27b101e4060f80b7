//! Point-cloud distances and generative-set metrics (MMD, COV, 1-NNA).
//!
//! The set metrics are generic over a [`PointDistance`] looked up by name
//! from [`distances`]: `cd` (Chamfer, summed squared nearest-neighbor
//! distances in both directions) and `emd` (optimal bijection, summed
//! Euclidean distances).

pub mod assignment;
pub mod oracle;

use std::sync::{Arc, OnceLock};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::PointCloud;
use crate::registry::Registry;
use crate::rng::{purpose, substream};

/// Largest cloud size accepted by [`emd`].
pub const EMD_MAX_POINTS: usize = 1024;

#[inline]
fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

fn nearest_sq_sum(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|b| sq_dist(a, b)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Chamfer distance with sums (not means) of squared distances.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(invalid("chamfer distance needs nonempty clouds"));
    }
    Ok(nearest_sq_sum(&x.points, &y.points) + nearest_sq_sum(&y.points, &x.points))
}

/// Earth mover's distance between equal-size clouds via exact assignment.
pub fn emd(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    let n = x.len();
    if n != y.len() {
        return Err(invalid(format!("EMD needs equal point counts, got {} and {}", n, y.len())));
    }
    if n == 0 {
        return Err(invalid("EMD needs nonempty clouds"));
    }
    if n > EMD_MAX_POINTS {
        return Err(invalid(format!("EMD is limited to {EMD_MAX_POINTS} points, got {n}")));
    }
    let cost: Vec<f64> = x
        .points
        .iter()
        .flat_map(|a| y.points.iter().map(move |b| sq_dist(a, b).sqrt()))
        .collect();
    let matching = assignment::solve(&cost, n);
    Ok(assignment::total_cost(&cost, n, &matching))
}

/// A distance between two point clouds.
pub trait PointDistance: Send + Sync {
    fn name(&self) -> &'static str;
    fn distance(&self, x: &PointCloud, y: &PointCloud) -> Result<f64>;
}

struct Chamfer;

impl PointDistance for Chamfer {
    fn name(&self) -> &'static str {
        "cd"
    }

    fn distance(&self, x: &PointCloud, y: &PointCloud) -> Result<f64> {
        chamfer(x, y)
    }
}

struct EarthMover;

impl PointDistance for EarthMover {
    fn name(&self) -> &'static str {
        "emd"
    }

    fn distance(&self, x: &PointCloud, y: &PointCloud) -> Result<f64> {
        emd(x, y)
    }
}

/// Registry of cloud distances: `cd` and `emd`.
pub fn distances() -> &'static Registry<dyn PointDistance> {
    static REGISTRY: OnceLock<Registry<dyn PointDistance>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn PointDistance> = Registry::new("point distance");
        let all: [Arc<dyn PointDistance>; 2] = [Arc::new(Chamfer), Arc::new(EarthMover)];
        for d in all {
            reg.register(d.name(), d);
        }
        reg
    })
}

/// Row-major `a.len() × b.len()` matrix of distances.
pub fn distance_matrix(a: &[PointCloud], b: &[PointCloud], dist: &dyn PointDistance) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(dist.distance(x, y)?);
        }
    }
    Ok(out)
}

fn check_sets(generated: &[PointCloud], reference: &[PointCloud]) -> Result<()> {
    if generated.is_empty() || reference.is_empty() {
        return Err(invalid("generated and reference sets must be nonempty"));
    }
    Ok(())
}

/// Index of the first minimum; earlier indices win ties.
fn argmin(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Coverage from a precomputed generated×reference matrix.
pub fn coverage_from_matrix(gen_ref: &[f64], n_gen: usize, n_ref: usize) -> f64 {
    let mut matched = vec![false; n_ref];
    for g in 0..n_gen {
        let row = &gen_ref[g * n_ref..(g + 1) * n_ref];
        if let Some(r) = argmin(row.iter().copied()) {
            matched[r] = true;
        }
    }
    matched.iter().filter(|&&m| m).count() as f64 / n_ref as f64
}

/// Minimum matching distance from a precomputed generated×reference matrix.
pub fn mmd_from_matrix(gen_ref: &[f64], n_gen: usize, n_ref: usize) -> f64 {
    let total: f64 = (0..n_ref)
        .map(|r| (0..n_gen).map(|g| gen_ref[g * n_ref + r]).fold(f64::INFINITY, f64::min))
        .sum();
    total / n_ref as f64
}

/// Leave-one-out 1-NN accuracy over `Sg ∪ Sr` from the three blocks of the
/// joint distance matrix. Ties go to the lowest index with `Sg` before `Sr`.
pub fn one_nna_from_matrices(gen_gen: &[f64], gen_ref: &[f64], ref_ref: &[f64], n_gen: usize, n_ref: usize) -> f64 {
    let total = n_gen + n_ref;
    // distance between joint indices a and b
    let d = |a: usize, b: usize| -> f64 {
        match (a < n_gen, b < n_gen) {
            (true, true) => gen_gen[a * n_gen + b],
            (true, false) => gen_ref[a * n_ref + (b - n_gen)],
            (false, true) => gen_ref[b * n_ref + (a - n_gen)],
            (false, false) => ref_ref[(a - n_gen) * n_ref + (b - n_gen)],
        }
    };
    let mut correct = 0usize;
    for a in 0..total {
        let mut best: Option<(usize, f64)> = None;
        for b in (0..total).filter(|&b| b != a) {
            let v = d(a, b);
            if best.is_none_or(|(_, bv)| v < bv) {
                best = Some((b, v));
            }
        }
        if let Some((b, _)) = best {
            if (a < n_gen) == (b < n_gen) {
                correct += 1;
            }
        }
    }
    correct as f64 / total as f64
}

pub fn coverage(generated: &[PointCloud], reference: &[PointCloud], dist: &dyn PointDistance) -> Result<f64> {
    check_sets(generated, reference)?;
    let m = distance_matrix(generated, reference, dist)?;
    Ok(coverage_from_matrix(&m, generated.len(), reference.len()))
}

pub fn mmd(generated: &[PointCloud], reference: &[PointCloud], dist: &dyn PointDistance) -> Result<f64> {
    check_sets(generated, reference)?;
    let m = distance_matrix(generated, reference, dist)?;
    Ok(mmd_from_matrix(&m, generated.len(), reference.len()))
}

pub fn one_nna(generated: &[PointCloud], reference: &[PointCloud], dist: &dyn PointDistance) -> Result<f64> {
    check_sets(generated, reference)?;
    if generated.len() + reference.len() < 2 {
        return Err(invalid("1-NNA needs at least two clouds"));
    }
    let gg = distance_matrix(generated, generated, dist)?;
    let gr = distance_matrix(generated, reference, dist)?;
    let rr = distance_matrix(reference, reference, dist)?;
    Ok(one_nna_from_matrices(&gg, &gr, &rr, generated.len(), reference.len()))
}

/// The three set metrics under one distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub mmd: f64,
    pub cov: f64,
    pub one_nna: f64,
}

/// Computes MMD, COV and 1-NNA while evaluating each pairwise distance once.
pub fn evaluate_sets(generated: &[PointCloud], reference: &[PointCloud], dist: &dyn PointDistance) -> Result<SetMetrics> {
    check_sets(generated, reference)?;
    let (ng, nr) = (generated.len(), reference.len());
    let gg = distance_matrix(generated, generated, dist)?;
    let gr = distance_matrix(generated, reference, dist)?;
    let rr = distance_matrix(reference, reference, dist)?;
    Ok(SetMetrics {
        mmd: mmd_from_matrix(&gr, ng, nr),
        cov: coverage_from_matrix(&gr, ng, nr),
        one_nna: one_nna_from_matrices(&gg, &gr, &rr, ng, nr),
    })
}

/// Seeded uniform subsample of `n` points without replacement; clouds with
/// at most `n` points are returned unchanged.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64, stream: u64) -> PointCloud {
    if cloud.len() <= n {
        return cloud.clone();
    }
    let mut rng = substream(seed, &[purpose::SUBSAMPLE, stream]);
    let mut idx = sample(&mut rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    PointCloud {
        points: idx.into_iter().map(|i| cloud.points[i]).collect(),
    }
}

//! Exhaustive reference implementations for small inputs.
//!
//! These share no code with the production metrics and exist to
//! cross-check them (tests and `mvdd eval --oracle`).

use std::collections::BTreeSet;

use super::SetMetrics;
use crate::geometry::PointCloud;

/// Largest cloud size accepted by [`emd_bruteforce`].
pub const MAX_PERMUTATION_POINTS: usize = 8;

fn euclid(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Full pairwise matrix, then row and column minima.
pub fn chamfer_bruteforce(x: &PointCloud, y: &PointCloud) -> f64 {
    let table: Vec<Vec<f64>> = x
        .points
        .iter()
        .map(|&a| y.points.iter().map(|&b| euclid(a, b).powi(2)).collect())
        .collect();
    let rows: f64 = table
        .iter()
        .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
        .sum();
    let cols: f64 = (0..y.len())
        .map(|j| table.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .sum();
    rows + cols
}

/// Minimum over all n! bijections (Heap's algorithm).
pub fn emd_bruteforce(x: &PointCloud, y: &PointCloud) -> f64 {
    let n = x.len();
    assert_eq!(n, y.len(), "EMD needs equal sizes");
    assert!(n <= MAX_PERMUTATION_POINTS, "permutation search limited to {MAX_PERMUTATION_POINTS} points");
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| euclid(x.points[i], y.points[j])).sum() };
    let mut best = cost(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn oracle_distance(name: &str) -> fn(&PointCloud, &PointCloud) -> f64 {
    match name {
        "cd" => chamfer_bruteforce,
        "emd" => emd_bruteforce,
        other => panic!("no oracle for distance `{other}`"),
    }
}

/// MMD, COV and 1-NNA by direct enumeration of their definitions.
pub fn set_metrics(generated: &[PointCloud], reference: &[PointCloud], distance: &str) -> SetMetrics {
    let d = oracle_distance(distance);

    let mut matched = BTreeSet::new();
    for g in generated {
        let dists: Vec<f64> = reference.iter().map(|r| d(g, r)).collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        matched.insert(dists.iter().position(|&v| v == min).unwrap());
    }
    let cov = matched.len() as f64 / reference.len() as f64;

    let mmd = reference
        .iter()
        .map(|r| generated.iter().map(|g| d(g, r)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / reference.len() as f64;

    let pool: Vec<(bool, &PointCloud)> = generated
        .iter()
        .map(|c| (true, c))
        .chain(reference.iter().map(|c| (false, c)))
        .collect();
    let mut hits = 0;
    for (i, (label, c)) in pool.iter().enumerate() {
        let mut best = (f64::INFINITY, None);
        for (j, (other_label, o)) in pool.iter().enumerate() {
            if i == j {
                continue;
            }
            let v = d(c, o);
            if v < best.0 {
                best = (v, Some(*other_label));
            }
        }
        if best.1 == Some(*label) {
            hits += 1;
        }
    }
    SetMetrics {
        mmd,
        cov,
        one_nna: hits as f64 / pool.len() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_bijections() {
        let x = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let y = PointCloud::new(vec![[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(emd_bruteforce(&x, &y), 2.0);
        assert_eq!(chamfer_bruteforce(&x, &y), 1.0 + 1.0 + 1.0 + 1.0);
    }
}

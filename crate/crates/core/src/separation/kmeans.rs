//! Lloyd's K-means with seeded k-means++ or explicit initial centers.

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::numkernel::{ensure_finite, sq_dist, Matrix, Rng};

#[derive(Debug, Clone)]
pub enum KMeansInit {
    PlusPlus { seed: u64 },
    Centers(Matrix),
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once no center moves farther than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iter: 300,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step; non-increasing.
    pub inertia_trace: Vec<f64>,
}

/// Index of the nearest center, lowest index on ties.
pub fn nearest(point: ArrayView1<'_, f64>, centers: ArrayView2<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>) -> (Vec<usize>, Vec<f64>) {
    points.rows().into_iter().map(|p| nearest(p, centers)).unzip()
}

fn plus_plus(points: ArrayView2<'_, f64>, k: usize, seed: u64) -> Matrix {
    let n = points.nrows();
    let mut rng = Rng::new(seed);
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.unit() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a chosen center
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    Matrix::from_shape_fn((k, points.ncols()), |(c, j)| points[[chosen[c], j]])
}

pub fn kmeans(
    points: ArrayView2<'_, f64>,
    k: usize,
    init: &KMeansInit,
    params: KMeansParams,
) -> Result<KMeansResult> {
    ensure_finite(points, "kmeans points")?;
    let n = points.nrows();
    if k == 0 {
        return Err(Error::Contract("kmeans with K = 0".into()));
    }
    let mut centers = match init {
        KMeansInit::PlusPlus { seed } => {
            if k > n {
                return Err(Error::Contract(format!(
                    "kmeans++ needs at least K = {k} points, got {n}"
                )));
            }
            plus_plus(points, k, *seed)
        }
        KMeansInit::Centers(c) => {
            if c.nrows() != k || c.ncols() != points.ncols() {
                return Err(Error::Contract(format!(
                    "initial centers are {}x{}, expected {k}x{}",
                    c.nrows(),
                    c.ncols(),
                    points.ncols()
                )));
            }
            ensure_finite(c.view(), "kmeans initial centers")?;
            c.clone()
        }
    };
    if n == 0 {
        return Err(Error::Contract("kmeans over zero points".into()));
    }

    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let (assignment, dists) = assign(points, centers.view());
        let inertia: f64 = dists.iter().sum();
        if let Some(&prev) = trace.last() {
            debug_assert!(
                inertia <= prev * (1.0 + 1e-12) + 1e-12,
                "kmeans inertia increased from {prev} to {inertia}"
            );
        }
        trace.push(inertia);
        if iterations == params.max_iter {
            return Ok(KMeansResult {
                centers,
                assignment,
                inertia,
                iterations,
                inertia_trace: trace,
            });
        }
        iterations += 1;

        let d = points.ncols();
        let mut sums = Matrix::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &points.row(i);
        }
        let mut next = centers.clone();
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = next.row_mut(c);
                row.assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // reseed at the point farthest from its own center
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    });
                if let Some(i) = far {
                    taken[i] = true;
                    next.row_mut(c).assign(&points.row(i));
                }
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centers.row(c)).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < params.tol {
            let (assignment, dists) = assign(points, centers.view());
            let inertia: f64 = dists.iter().sum();
            trace.push(inertia);
            return Ok(KMeansResult {
                centers,
                assignment,
                inertia,
                iterations,
                inertia_trace: trace,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn separated_clusters() {
        let pts = arr2(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        let r = kmeans(pts.view(), 2, &KMeansInit::PlusPlus { seed: 3 }, KMeansParams::default()).unwrap();
        let mut centers: Vec<(f64, f64)> = r.centers.rows().into_iter().map(|c| (c[0], c[1])).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, vec![(0.0, 0.5), (10.0, 0.5)]);
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        assert_ne!(r.assignment[0], r.assignment[2]);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = arr2(&[[0.0, 0.0], [1.0, 5.0], [-2.0, 3.0], [4.0, 4.0]]);
        let r = kmeans(pts.view(), 4, &KMeansInit::PlusPlus { seed: 0 }, KMeansParams::default()).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn contract_errors() {
        let pts = arr2(&[[0.0], [1.0]]);
        let pp = KMeansInit::PlusPlus { seed: 0 };
        assert!(matches!(kmeans(pts.view(), 0, &pp, KMeansParams::default()), Err(Error::Contract(_))));
        assert!(matches!(kmeans(pts.view(), 3, &pp, KMeansParams::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_go_to_lowest_center() {
        let centers = arr2(&[[1.0], [-1.0]]);
        let (c, d) = nearest(arr2(&[[0.0]]).row(0), centers.view());
        assert_eq!((c, d), (0, 1.0));
    }

    #[test]
    fn empty_cluster_is_reseeded_at_farthest_point() {
        let pts = arr2(&[[0.0], [1.0], [9.0]]);
        let init = KMeansInit::Centers(arr2(&[[0.5], [100.0]]));
        let r = kmeans(pts.view(), 2, &init, KMeansParams::default()).unwrap();
        assert_eq!(r.assignment, vec![0, 0, 1]);
        assert_abs_diff_eq!(r.centers[[1, 0]], 9.0);
        assert_abs_diff_eq!(r.inertia, 0.5);
    }

    #[test]
    fn inertia_trace_is_non_increasing() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let pts = Matrix::from_shape_fn((40, 3), |_| rng.normal() * 3.0);
            let r = kmeans(pts.view(), 5, &KMeansInit::PlusPlus { seed: rng.next_u64() }, KMeansParams::default()).unwrap();
            for w in r.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
        }
    }
}

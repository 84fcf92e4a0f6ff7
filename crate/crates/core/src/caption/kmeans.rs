use icmlm_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KMeans {
    /// `k x d`, one centroid per row.
    pub centroids: Tensor<f64>,
    pub assignments: Vec<usize>,
    /// Objective after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().unwrap()
    }

    /// `n x k` hard assignment matrix.
    pub fn one_hot(&self) -> Tensor<f64> {
        let mut t = Tensor::zeros(self.assignments.len(), self.k());
        for (i, &a) in self.assignments.iter().enumerate() {
            t.set(i, a, 1.0);
        }
        t
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(point: &[f64], centroids: &Tensor<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(data: &Tensor<f64>, k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = data.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            while dist[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    Tensor::from_rows(&chosen.iter().map(|&i| data.row(i).to_vec()).collect::<Vec<_>>())
}

/// Lloyd's algorithm with k-means++ seeding over the rows of `data`.
///
/// An empty cluster takes the point currently farthest from its own
/// centroid. Stops when the relative improvement drops below `tol` or after
/// `max_iter` assignment steps.
pub fn kmeans(data: &Tensor<f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeans> {
    let n = data.rows();
    ensure!(k >= 1, "k must be at least 1");
    ensure!(n >= k, "k-means needs at least k={k} points, got {n}");
    ensure!(max_iter >= 1, "max_iter must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let d = data.cols();
    let mut assignments = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        for i in 0..n {
            let (c, dd) = nearest(data.row(i), &centroids);
            assignments[i] = c;
            dists[i] = dd;
        }
        let j: f64 = dists.iter().sum();
        let converged = match objective.last() {
            Some(&prev) => prev <= 0.0 || (prev - j) / prev < tol,
            None => j == 0.0,
        };
        objective.push(j);
        if converged || iterations >= max_iter {
            break;
        }

        let mut sums = Tensor::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, x) in sums.row_mut(assignments[i]).iter_mut().zip(data.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                taken[far] = true;
                tracing::debug!(cluster = c, point = far, "re-seeding empty cluster");
                centroids.row_mut(c).copy_from_slice(data.row(far));
            }
        }
    }
    Ok(KMeans { centroids, assignments, objective, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Tensor::<f64>::randn(2 * n_per, 3, 0.5, &mut rng);
        let truth: Vec<usize> = (0..2 * n_per).map(|i| i / n_per).collect();
        for (i, &b) in truth.iter().enumerate() {
            let center = if b == 0 { -10.0 } else { 10.0 };
            data.row_mut(i).iter_mut().for_each(|x| *x += center);
        }
        (data, truth)
    }

    #[test]
    fn one_point_per_cluster_has_zero_objective() {
        let data = Tensor::from_rows(&[vec![0.0, 1.0], vec![5.0, 5.0], vec![-3.0, 2.0]]);
        let km = kmeans(&data, 3, 0, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(km.final_objective(), 0.0);
        let mut a = km.assignments.clone();
        a.sort();
        assert_eq!(a, [0, 1, 2]);
        for i in 0..3 {
            assert_eq!(km.centroids.row(km.assignments[i]), data.row(i));
        }
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (data, truth) = blobs(50, 3);
        let km = kmeans(&data, 2, 11, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let flip = km.assignments[0] != truth[0];
        for (a, t) in km.assignments.iter().zip(&truth) {
            assert_eq!(*a != *t, flip);
        }
    }

    #[test]
    fn objective_is_monotone_and_assignment_is_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = Tensor::<f64>::randn(200, 5, 1.0, &mut rng);
        let km = kmeans(&data, 7, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        for w in km.objective.windows(2) {
            assert!(w[1] <= w[0], "{:?}", km.objective);
        }
        for i in 0..200 {
            assert_eq!(km.assignments[i], nearest(data.row(i), &km.centroids).0);
        }
    }

    #[test]
    fn duplicate_points_are_handled() {
        let data = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![2.0]]);
        let km = kmeans(&data, 3, 0, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(km.final_objective(), 0.0);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let data = Tensor::<f64>::zeros(2, 2);
        assert!(kmeans(&data, 3, 0, 10, 1e-6).is_err());
    }
}

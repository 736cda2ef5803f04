//! Lloyd's k-means with k-means++ seeding, shared by the product quantizer
//! and the IVF coarse clustering.
//!
//! Results depend only on the data and the seed: assignment runs in parallel
//! but every reduction is folded sequentially in point order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distance::l2_sq_fast;
use crate::error::invalid;
use crate::Result;

/// Relative centroid shift below which iteration stops.
pub const CONVERGENCE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
}

/// Index and squared distance of the centroid nearest to `x`; ties go to the
/// lower index.
#[inline]
pub fn nearest(centroids: &[f32], dim: usize, x: &[f32]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = l2_sq_fast(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Assigns every row of `data` to its nearest centroid.
pub fn assign(centroids: &[f32], dim: usize, data: &[f32]) -> Vec<(usize, f32)> {
    data.par_chunks_exact(dim)
        .map(|x| nearest(centroids, dim, x))
        .collect()
}

/// Clusters the rows of `data` (row-major, `dim` columns) into `params.k`
/// centroids. Returns `k × dim` centroids.
pub fn kmeans(data: &[f32], dim: usize, params: &KMeansParams) -> Result<Vec<f32>> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(invalid("k-means input is not a whole number of rows"));
    }
    let n = data.len() / dim;
    let k = params.k;
    if k == 0 {
        return Err(invalid("k-means needs k >= 1"));
    }
    if n < k {
        return Err(invalid(format!("k-means needs at least {k} points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = seed_plus_plus(data, dim, k, &mut rng);

    for _ in 0..params.iters {
        let assignment = assign(&centroids, dim, data);
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (x, &(c, _)) in data.chunks_exact(dim).zip(&assignment) {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s += f64::from(v);
            }
        }

        let mut next = vec![0.0f32; k * dim];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..dim {
                    next[c * dim + j] = (sums[c * dim + j] * inv) as f32;
                }
            }
        }

        // Empty clusters take the points farthest from their current centroid.
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<usize> = (0..n).collect();
            far.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(a.cmp(&b)));
            for (c, &p) in empty.iter().zip(&far) {
                next[c * dim..(c + 1) * dim].copy_from_slice(&data[p * dim..(p + 1) * dim]);
            }
        }

        let shift: f64 = centroids
            .iter()
            .zip(&next)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        let scale: f64 = centroids.iter().map(|&a| f64::from(a) * f64::from(a)).sum();
        centroids = next;
        if empty.is_empty() && shift.sqrt() <= CONVERGENCE_TOL * scale.sqrt().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(centroids)
}

fn seed_plus_plus(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);

    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f32> = data
        .par_chunks_exact(dim)
        .map(|x| l2_sq_fast(x, &centroids[..dim]))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().map(|&d| f64::from(d)).sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0f64;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += f64::from(d);
                if acc > target && d > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // Every remaining point duplicates a chosen center.
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[pick] = true;
        let center = &data[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(center);
        d2.par_iter_mut()
            .zip(data.par_chunks_exact(dim))
            .for_each(|(d, x)| *d = d.min(l2_sq_fast(x, center)));
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_point_count_is_fixed_point() {
        let pts: Vec<f32> = vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0, 10.0, 10.0];
        let c = kmeans(&pts, 2, &KMeansParams { k: 4, iters: 50, seed: 3 }).unwrap();
        let mut got: Vec<[f32; 2]> = c.chunks(2).map(|r| [r[0], r[1]]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![[0.0, 0.0], [0.0, 10.0], [10.0, 0.0], [10.0, 10.0]]);
    }

    #[test]
    fn duplicates_do_not_break_seeding() {
        let pts = vec![1.0f32; 12];
        let c = kmeans(&pts, 3, &KMeansParams { k: 3, iters: 5, seed: 0 }).unwrap();
        assert!(c.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..50 {
            pts.push(i as f32 * 0.01);
            pts.push(100.0 + i as f32 * 0.01);
        }
        let c = kmeans(&pts, 1, &KMeansParams { k: 2, iters: 20, seed: 9 }).unwrap();
        let mut c = c.clone();
        c.sort_by(f32::total_cmp);
        assert!((c[0] - 0.245).abs() < 1e-3 && (c[1] - 100.245).abs() < 1e-3, "{c:?}");
    }

    #[test]
    fn deterministic_and_validated() {
        let pts: Vec<f32> = (0..300).map(|i| ((i * 37) % 101) as f32).collect();
        let p = KMeansParams { k: 5, iters: 10, seed: 11 };
        assert_eq!(kmeans(&pts, 3, &p).unwrap(), kmeans(&pts, 3, &p).unwrap());
        assert!(kmeans(&pts[..6], 3, &p).is_err());
        assert!(kmeans(&pts, 7, &p).is_err());
        assert!(kmeans(&pts, 3, &KMeansParams { k: 0, ..p }).is_err());
    }
}

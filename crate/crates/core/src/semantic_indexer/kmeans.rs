//! Deterministic k-means (k-means++ seeding, Lloyd refinement) used to
//! initialise codebooks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Clusters `n` points of width `dim` (row-major `points`) into `k`
/// centroids. Empty clusters are re-seeded with the point farthest from its
/// centroid. Requires `n >= k`.
pub fn kmeans<R: Rng>(points: &[f64], dim: usize, k: usize, iters: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len() / dim;
    assert!(n >= k && k > 0, "k-means needs at least k points");
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    // k-means++
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(dist(row(i), &centroids[start..start + dim]));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = dist(row(i), &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist(row(a), &centroids[assign[a] * dim..(assign[a] + 1) * dim]);
                        let db = dist(row(b), &centroids[assign[b] * dim..(assign[b] + 1) * dim]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n > 0");
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    centroids
}

/// Nudges duplicate rows apart until all `k` rows are distinct.
pub fn break_duplicates<R: Rng>(centroids: &mut [f64], dim: usize, scale: f64, rng: &mut R) {
    let k = centroids.len() / dim;
    let noise = Normal::new(0.0, scale.max(1e-6)).expect("finite");
    for c in 1..k {
        while (0..c).any(|o| centroids[o * dim..(o + 1) * dim] == centroids[c * dim..(c + 1) * dim]) {
            for x in &mut centroids[c * dim..(c + 1) * dim] {
                *x += noise.sample(rng);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn separates_obvious_clusters() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let off = if i < 10 { 0.0 } else { 10.0 };
            pts.extend([off + (i % 3) as f64 * 0.1, off]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = kmeans(&pts, 2, 2, 20, &mut rng);
        let mut xs = [c[0], c[2]];
        xs.sort_by(f64::total_cmp);
        assert!(xs[0] < 1.0 && xs[1] > 9.0);
    }

    #[test]
    fn duplicates_are_broken() {
        let pts = vec![1.0; 12]; // six identical 2-d points
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = kmeans(&pts, 2, 3, 5, &mut rng);
        break_duplicates(&mut c, 2, 1e-3, &mut rng);
        for a in 0..3 {
            for b in 0..a {
                assert_ne!(c[a * 2..a * 2 + 2], c[b * 2..b * 2 + 2]);
            }
        }
    }
}

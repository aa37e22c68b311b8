//! Lloyd's k-means with k-means++ seeding.
//!
//! Assignment steps use Hamerly's bounds, which skip distance computations
//! that cannot change a point's nearest centroid. The result is the same as
//! plain Lloyd iterations, only faster when k is large.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::quantizer::squared_distance;

pub const MAX_ITERATIONS: usize = 25;
/// Stop once the summed squared centroid shift falls below this fraction of
/// the summed squared centroid norms.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub width: usize,
    /// Row-major `k × width`.
    pub centroids: Vec<f64>,
    /// Nearest centroid of every input row under the final centroids.
    pub assignment: Vec<u32>,
    pub counts: Vec<u64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.width..(j + 1) * self.width]
    }
}

/// Index and squared distance of the centroid closest to `x`, lowest index on ties.
pub fn nearest(centroids: &[f64], width: usize, x: &[f64]) -> (u32, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(width).enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

/// Nearest and second-nearest distances (not squared) of `x`.
fn nearest_two(centroids: &[f64], width: usize, x: &[f64]) -> (u32, f64, f64) {
    let (mut a, mut d1, mut d2) = (0u32, f64::INFINITY, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(width).enumerate() {
        let d = squared_distance(x, c);
        if d < d1 {
            d2 = d1;
            d1 = d;
            a = j as u32;
        } else if d < d2 {
            d2 = d;
        }
    }
    (a, d1.sqrt(), d2.sqrt())
}

/// Clusters the rows of `data` (row-major, `n × width`) into `k` groups.
pub fn kmeans<R: Rng>(data: &[f64], width: usize, k: usize, rng: &mut R) -> Result<KMeans> {
    if width == 0 || !data.len().is_multiple_of(width) {
        return Err(invalid(format!("{} values do not form rows of width {width}", data.len())));
    }
    let n = data.len() / width;
    if k == 0 || k > n {
        return Err(invalid(format!("cannot form {k} clusters from {n} points")));
    }
    let row = |i: usize| &data[i * width..(i + 1) * width];
    let mut centroids = seed_plus_plus(data, width, k, rng);

    let mut assignment = vec![0u32; n];
    let mut upper = vec![0.0; n];
    let mut lower = vec![0.0; n];
    for i in 0..n {
        let (a, d1, d2) = nearest_two(&centroids, width, row(i));
        assignment[i] = a;
        upper[i] = d1;
        lower[i] = d2;
    }

    let mut iterations = 0;
    let mut shift = vec![0.0; k];
    // Half the distance to the nearest other centroid; pays off once n is well above k.
    let use_gaps = 4 * k <= n;
    let mut half_gap = vec![0.0; k];
    while iterations < MAX_ITERATIONS {
        let mut sums = vec![0.0; k * width];
        let mut counts = vec![0u64; k];
        for i in 0..n {
            let a = assignment[i] as usize;
            counts[a] += 1;
            for (s, v) in sums[a * width..(a + 1) * width].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let (mut moved, mut norm) = (0.0, 0.0);
        for j in 0..k {
            let old = &mut centroids[j * width..(j + 1) * width];
            norm += old.iter().map(|v| v * v).sum::<f64>();
            if counts[j] == 0 {
                shift[j] = 0.0;
                continue;
            }
            let mut d = 0.0;
            for (c, s) in old.iter_mut().zip(&sums[j * width..(j + 1) * width]) {
                let new = s / counts[j] as f64;
                d += (new - *c) * (new - *c);
                *c = new;
            }
            moved += d;
            shift[j] = d.sqrt();
        }
        iterations += 1;

        let (mut top, mut top_at, mut second) = (0.0, usize::MAX, 0.0);
        for (j, &p) in shift.iter().enumerate() {
            if p > top {
                second = top;
                top = p;
                top_at = j;
            } else if p > second {
                second = p;
            }
        }
        for j in (0..k).filter(|_| use_gaps) {
            let cj = &centroids[j * width..(j + 1) * width];
            half_gap[j] = (0..k)
                .filter(|&o| o != j)
                .map(|o| squared_distance(cj, &centroids[o * width..(o + 1) * width]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
                / 2.0;
        }
        for i in 0..n {
            let a = assignment[i] as usize;
            upper[i] += shift[a];
            lower[i] -= if a == top_at { second } else { top };
            let bound = half_gap[a].max(lower[i]);
            // The slack keeps exact ties on the full scan, which breaks them by index.
            if upper[i] + 1e-12 * (upper[i] + bound) < bound {
                continue;
            }
            upper[i] = squared_distance(row(i), &centroids[a * width..(a + 1) * width]).sqrt();
            if upper[i] + 1e-12 * (upper[i] + bound) < bound {
                continue;
            }
            let (b, d1, d2) = nearest_two(&centroids, width, row(i));
            assignment[i] = b;
            upper[i] = d1;
            lower[i] = d2;
        }
        if moved <= TOLERANCE * norm {
            break;
        }
    }

    let mut counts = vec![0u64; k];
    for &a in &assignment {
        counts[a as usize] += 1;
    }
    Ok(KMeans { width, centroids, assignment, counts, iterations })
}

/// k-means++ seeding. A point is only compared with a new center when the
/// triangle inequality allows that center to be closer than its current one.
fn seed_plus_plus<R: Rng>(data: &[f64], width: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = data.len() / width;
    let row = |i: usize| &data[i * width..(i + 1) * width];
    let mut centroids = Vec::with_capacity(k * width);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(row(i), &centroids[..width])).collect();
    let mut closest = vec![0usize; n];
    let mut gap = vec![0.0; k];
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let c = &centroids[j * width..(j + 1) * width];
        for (o, g) in gap.iter_mut().enumerate().take(j) {
            *g = squared_distance(c, &centroids[o * width..(o + 1) * width]);
        }
        for i in 0..n {
            // |c - x| >= |c - c_a| - |x - c_a| >= |x - c_a| whenever |c - c_a|^2 >= 4 d2.
            if gap[closest[i]] >= 4.0 * d2[i] {
                continue;
            }
            let d = squared_distance(row(i), c);
            if d < d2[i] {
                d2[i] = d;
                closest[i] = j;
            }
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain Lloyd iterations from the same seeding, as an oracle.
    fn naive(data: &[f64], width: usize, k: usize, seed: u64) -> KMeans {
        let n = data.len() / width;
        let mut centroids = seed_plus_plus(data, width, k, &mut ChaCha8Rng::seed_from_u64(seed));
        let assign = |c: &[f64]| -> Vec<u32> {
            (0..n).map(|i| nearest(c, width, &data[i * width..(i + 1) * width]).0).collect()
        };
        let mut assignment = assign(&centroids);
        let mut iterations = 0;
        while iterations < MAX_ITERATIONS {
            let mut sums = vec![0.0; k * width];
            let mut counts = vec![0u64; k];
            for (i, &a) in assignment.iter().enumerate() {
                counts[a as usize] += 1;
                for t in 0..width {
                    sums[a as usize * width + t] += data[i * width + t];
                }
            }
            let (mut moved, mut norm) = (0.0, 0.0);
            for j in 0..k {
                for t in 0..width {
                    let old = centroids[j * width + t];
                    norm += old * old;
                    if counts[j] > 0 {
                        let new = sums[j * width + t] / counts[j] as f64;
                        moved += (new - old) * (new - old);
                        centroids[j * width + t] = new;
                    }
                }
            }
            iterations += 1;
            assignment = assign(&centroids);
            if moved <= TOLERANCE * norm {
                break;
            }
        }
        let mut counts = vec![0u64; k];
        for &a in &assignment {
            counts[a as usize] += 1;
        }
        KMeans { width, centroids, assignment, counts, iterations }
    }

    #[test]
    fn two_separated_groups_give_their_means() {
        let data = [0.0, 1.0, 2.0, 100.0, 101.0, 105.0];
        let km = kmeans(&data, 1, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut c = km.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![1.0, 102.0]);
        assert_eq!(km.assignment[0], km.assignment[2]);
        assert_ne!(km.assignment[0], km.assignment[3]);
    }

    #[test]
    fn k_equal_to_n_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
        let km = kmeans(&data, 2, 20, &mut rng).unwrap();
        for i in 0..20 {
            let c = km.centroid(km.assignment[i] as usize);
            assert_eq!(squared_distance(&data[i * 2..i * 2 + 2], c), 0.0);
        }
    }

    #[test]
    fn bounded_iterations_match_plain_lloyd() {
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (n, w, k) = (300, 3, 12);
            let data: Vec<f64> = (0..n * w).map(|i| rng.random_range(-1.0..1.0) + (i % 7) as f64).collect();
            let fast = kmeans(&data, w, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let slow = naive(&data, w, k, seed);
            assert_eq!(fast.assignment, slow.assignment, "seed {seed}");
            assert_eq!(fast.iterations, slow.iterations);
            for (a, b) in fast.centroids.iter().zip(&slow.centroids) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn assignment_is_nearest_under_final_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0..1.0)).collect();
        let km = kmeans(&data, 4, 16, &mut rng).unwrap();
        for i in 0..500 {
            assert_eq!(km.assignment[i], nearest(&km.centroids, 4, &data[i * 4..i * 4 + 4]).0);
        }
        assert_eq!(km.counts.iter().sum::<u64>(), 500);
    }

    #[test]
    fn same_seed_same_codebook_and_bad_k_fails() {
        let data: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64).collect();
        let a = kmeans(&data, 2, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = kmeans(&data, 2, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(kmeans(&data, 2, 33, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
        assert!(kmeans(&data, 2, 0, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn duplicate_points_still_seed() {
        let data = vec![1.0; 10];
        let km = kmeans(&data, 1, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(km.centroids, vec![1.0; 3]);
        assert_eq!(km.assignment, vec![0; 10]);
    }
}

//! Exact neighbors, recall, and the rolling summaries plotted over a stream.

use std::collections::HashSet;

use super::vecs::Vectors;
use crate::error::{invalid, Result};
use crate::quantizer::{top_k, PointId};

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Exact top-`k` of `live` for the query vector `q`, ordered by (distance, id).
pub fn ground_truth(data: &Vectors<f32>, live: &[PointId], q: &[f32], k: usize) -> Result<Vec<PointId>> {
    if k > live.len() {
        return Err(invalid(format!("k = {k} exceeds the {} live points", live.len())));
    }
    if q.len() != data.dim {
        return Err(invalid(format!("query has {} components, expected {}", q.len(), data.dim)));
    }
    let scored = live.iter().map(|&id| (id, sq_dist(data.row(id as usize), q)));
    Ok(top_k(scored, k).into_iter().map(|n| n.id).collect())
}

/// `|top-k(truth) ∩ top-k'(approx)| / k`.
///
/// Exact re-ranking of the `k'` candidates puts every true top-`k` member
/// among them ahead of all other candidates, so this equals the recall of
/// the re-ranked top `k` without touching the full vectors.
pub fn recall_at(approx: &[PointId], truth: &[PointId], k: usize, k_prime: usize) -> Result<f64> {
    if k == 0 || truth.len() < k || approx.len() < k.min(k_prime) {
        return Err(invalid(format!(
            "recall-{k}@{k_prime} needs {k} true and approximate ids, got {} and {}",
            truth.len(),
            approx.len()
        )));
    }
    let candidates: HashSet<PointId> = approx.iter().take(k_prime).copied().collect();
    let hits = truth[..k].iter().filter(|id| candidates.contains(id)).count();
    Ok(hits as f64 / k as f64)
}

/// Quantile `p ∈ [0, 1]` with linear interpolation between order statistics.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Quantile `p` over the trailing `window` values ending at each position.
pub fn rolling_quantile(values: &[f64], window: usize, p: f64) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len()).map(|i| quantile(&values[(i + 1).saturating_sub(w)..=i], p)).collect()
}

/// Element-wise `values / reference`; `0/0` counts as parity.
pub fn normalize(values: &[f64], reference: &[f64]) -> Vec<f64> {
    values
        .iter()
        .zip(reference)
        .map(|(&v, &r)| if r == 0.0 && v == 0.0 { 1.0 } else { v / r })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::rng_for;

    fn random(n: usize, d: usize, seed: u64) -> Vectors<f32> {
        let mut rng = rng_for(seed, 0);
        // Coarse values so distance ties actually occur.
        Vectors::new(d, (0..n * d).map(|_| rng.random_range(0..4) as f32).collect()).unwrap()
    }

    fn sorted_oracle(data: &Vectors<f32>, live: &[PointId], q: &[f32], k: usize) -> Vec<PointId> {
        let mut all: Vec<(f64, PointId)> = live
            .iter()
            .map(|&id| (data.row(id as usize).iter().zip(q).map(|(a, b)| ((a - b) as f64).powi(2)).sum(), id))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|p| p.1).collect()
    }

    #[test]
    fn heap_and_sort_agree() {
        for seed in 0..20 {
            let x = random(300, 3, seed);
            let live: Vec<PointId> = (0..300).filter(|i| i % 3 != 0).collect();
            for qi in (0..300).step_by(30) {
                let q = x.row(qi);
                for k in [1, 10, 50, live.len()] {
                    assert_eq!(ground_truth(&x, &live, q, k).unwrap(), sorted_oracle(&x, &live, q, k));
                }
            }
        }
    }

    #[test]
    fn query_on_a_point_finds_it_first() {
        let x = random(100, 5, 1);
        let live: Vec<PointId> = (0..100).collect();
        // Row 7 may duplicate a lower id; the smaller id wins the tie.
        let first = ground_truth(&x, &live, x.row(7), 1).unwrap()[0];
        assert_eq!(x.row(first as usize), x.row(7));
        assert!(first <= 7);
        assert_eq!(ground_truth(&x, &live, x.row(7), 100).unwrap().len(), 100);
        assert!(ground_truth(&x, &live, x.row(7), 101).is_err());
    }

    #[test]
    fn recall_examples() {
        let a: Vec<PointId> = (0..10).collect();
        assert_eq!(recall_at(&a, &a, 10, 10).unwrap(), 1.0);
        let b: Vec<PointId> = (10..20).collect();
        assert_eq!(recall_at(&b, &a, 10, 10).unwrap(), 0.0);
        // Truth 0..10; candidates hit 3 of them in the first 10 and 4 more by 50.
        let mut approx: Vec<PointId> = vec![2, 100, 5, 101, 102, 9, 103, 104, 105, 106];
        approx.extend(107..140);
        approx.extend([0, 1, 3, 4]);
        approx.extend(140..143);
        assert_eq!(approx.len(), 50);
        assert_eq!(recall_at(&approx, &a, 10, 10).unwrap(), 0.3);
        assert_eq!(recall_at(&approx, &a, 10, 50).unwrap(), 0.7);
        assert!(recall_at(&approx[..5], &a, 10, 10).is_err());
    }

    #[test]
    fn recall_equals_exact_rerank() {
        let x = random(400, 4, 3);
        let live: Vec<PointId> = (0..400).collect();
        let mut rng = rng_for(9, 1);
        for qi in 0..30 {
            let q = x.row(qi * 13 % 400);
            let truth = ground_truth(&x, &live, q, 10).unwrap();
            let mut approx = live.clone();
            for i in (1..approx.len()).rev() {
                approx.swap(i, rng.random_range(0..=i));
            }
            let cand = &approx[..50];
            let reranked = ground_truth(&x, cand, q, 10).unwrap();
            let direct = truth.iter().filter(|t| reranked.contains(t)).count() as f64 / 10.0;
            assert_eq!(recall_at(&approx, &truth, 10, 50).unwrap(), direct);
        }
    }

    #[test]
    fn recall_grows_with_candidates() {
        let truth: Vec<PointId> = (0..10).collect();
        let mut rng = rng_for(2, 0);
        let approx: Vec<PointId> = (0..100).map(|_| rng.random_range(0..60)).collect();
        let mut prev = 0.0;
        for kp in 10..=100 {
            let r = recall_at(&approx, &truth, 10, kp).unwrap();
            assert!(r >= prev && (0.0..=1.0).contains(&r));
            prev = r;
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [3.0, 1.0, 4.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.1) - 1.3).abs() < 1e-12);
        assert_eq!(rolling_quantile(&v, 2, 0.5), vec![3.0, 2.0, 2.5, 3.0]);
        assert_eq!(normalize(&[0.5, 0.0], &[1.0, 0.0]), vec![0.5, 1.0]);
    }
}

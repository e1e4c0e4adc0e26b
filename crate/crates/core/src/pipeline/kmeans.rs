//! Euclidean k-means over box features.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ITERATIONS: usize = 50;
const REL_TOLERANCE: f64 = 1e-4;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Cluster the columns of `boxes` (`d × B`) into `k` means with k-means++
/// seeding. Stops after 50 rounds or when inertia changes by less than
/// 1e-4 relative. Returns `d × k`.
pub fn cluster_boxes(boxes: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    let b = boxes.cols();
    if k == 0 || b < k {
        return Err(Error::input(format!("cannot form {k} clusters from {b} boxes")));
    }
    if b == k {
        return Ok(boxes.clone());
    }
    let points: Vec<Vec<f64>> = boxes.columns().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.gen_range(0..b)];
    while chosen.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                chosen
                    .iter()
                    .map(|&c| sq_dist(p, &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(&mut rng),
            // Every point coincides with a centre already.
            Err(_) => (0..b).find(|i| !chosen.contains(i)).expect("b > k"),
        };
        chosen.push(next);
    }
    let mut centres: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();

    let mut previous = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; boxes.rows()]; k];
        let mut counts = vec![0usize; k];
        let mut inertia = 0.0;
        for p in &points {
            let (best, d) = centres
                .iter()
                .enumerate()
                .map(|(i, c)| (i, sq_dist(p, c)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            inertia += d;
            counts[best] += 1;
            for (s, v) in sums[best].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centres.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = s.iter().map(|v| v / n as f64).collect();
            }
        }
        let settled = inertia == 0.0 || (previous - inertia).abs() <= REL_TOLERANCE * previous;
        previous = inertia;
        if settled {
            break;
        }
    }
    Tensor::from_columns(&centres)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn as_many_boxes_as_clusters_returns_the_boxes() {
        let b = Tensor::from_columns(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(cluster_boxes(&b, 2, 7).unwrap(), b);
        assert!(cluster_boxes(&b, 3, 7).is_err());
    }

    #[test]
    fn separated_blobs_recover_their_means() {
        let mut cols = Vec::new();
        for i in 0..10 {
            let e = (i as f64 - 4.5) * 0.01;
            cols.push(vec![10.0 + e, -e]);
            cols.push(vec![-10.0 - e, 5.0 + 2.0 * e]);
        }
        let mean = |sel: usize| -> Vec<f64> {
            let pts: Vec<&Vec<f64>> = cols.iter().skip(sel).step_by(2).collect();
            (0..2)
                .map(|r| pts.iter().map(|p| p[r]).sum::<f64>() / pts.len() as f64)
                .collect()
        };
        let (a, b) = (mean(0), mean(1));
        let boxes = Tensor::from_columns(&cols).unwrap();
        let c = cluster_boxes(&boxes, 2, 1).unwrap();
        let mut got: Vec<Vec<f64>> = c.columns().collect();
        got.sort_by(|x, y| y[0].total_cmp(&x[0]));
        for (g, want) in got.iter().zip([&a, &b]) {
            for (x, y) in g.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_and_duplicates_tolerated() {
        let boxes = Tensor::from_columns(&vec![vec![0.5, 0.5]; 6]).unwrap();
        let a = cluster_boxes(&boxes, 3, 11).unwrap();
        assert_eq!(a, cluster_boxes(&boxes, 3, 11).unwrap());
        assert!(a.data().iter().all(|&v| v == 0.5));
    }
}

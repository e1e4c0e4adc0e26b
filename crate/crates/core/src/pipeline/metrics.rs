//! Ranking metrics.

use crate::error::{Error, Result};
use crate::model::VideoId;

/// AP@K: mean of precision at each relevant hit within the top `k`,
/// normalised by `min(k, #relevant)`. `relevant` must be sorted.
pub fn average_precision_at_k(ranking: &[VideoId], relevant: &[VideoId], k: usize) -> f64 {
    let denom = k.min(relevant.len());
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, v) in ranking.iter().take(k).enumerate() {
        if relevant.binary_search(v).is_ok() {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / denom as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapSummary {
    pub value: f64,
    pub evaluated: usize,
    /// Queries without any relevant item.
    pub excluded: usize,
}

/// Mean AP@K over queries. Queries with nothing relevant are skipped and
/// counted. `relevance[i]` lists the relevant videos of query `i`, sorted.
pub fn evaluate_map(rankings: &[Vec<VideoId>], relevance: &[Vec<VideoId>], k: usize) -> Result<MapSummary> {
    if rankings.len() != relevance.len() {
        return Err(Error::input("one relevance list per ranking is required"));
    }
    if k == 0 {
        return Err(Error::input("mAP cutoff must be at least 1"));
    }
    let mut sum = 0.0;
    let mut evaluated = 0;
    for (r, rel) in rankings.iter().zip(relevance) {
        if rel.is_empty() {
            continue;
        }
        sum += average_precision_at_k(r, rel, k);
        evaluated += 1;
    }
    Ok(MapSummary {
        value: if evaluated > 0 { sum / evaluated as f64 } else { 0.0 },
        evaluated,
        excluded: rankings.len() - evaluated,
    })
}

/// Area under the precision/recall curve from a descending-score sweep.
/// Tied scores form one step; the curve starts at recall 0 with the
/// precision of the first step and is integrated with trapezoids.
pub fn evaluate_pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::input("scores and labels differ in length"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::input("PR-AUC needs at least one positive and one negative"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("PR-AUC scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut area = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        let (r0, p0) = prev.unwrap_or((0.0, precision));
        area += (recall - r0) * (precision + p0) / 2.0;
        prev = Some((recall, precision));
    }
    Ok(area)
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::input(
            "Spearman correlation needs two equal-length samples of size >= 2",
        ));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::input("Spearman correlation input contains NaN"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::input("Spearman correlation of a constant sample is undefined"));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Fraction of `truth` found in `found`.
pub fn recall_at_k(found: &[VideoId], truth: &[VideoId]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    truth.iter().filter(|t| found.contains(t)).count() as f64 / truth.len() as f64
}

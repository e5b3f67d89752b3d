//! Leave-one-out ranking metrics.

/// 1-based rank of `positive` when candidates are sorted by descending
/// score, ties going to the lower item id. `None` if the positive is not
/// among the candidates.
pub fn rank_of(positive: u32, candidates: &[u32], scores: &[f64]) -> Option<usize> {
    let idx = candidates.iter().position(|&c| c == positive)?;
    let target = scores[idx];
    let ahead = candidates
        .iter()
        .zip(scores)
        .filter(|&(&c, &s)| c != positive && (s > target || (s == target && c < positive)))
        .count();
    Some(ahead + 1)
}

pub fn hit_ratio(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` inside the cutoff, zero outside.
pub fn ndcg(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

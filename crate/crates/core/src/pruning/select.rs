//! Single-step visual-token selection rules.
//!
//! Every rule returns the kept original indices, sorted ascending. Ties are
//! always broken toward the smaller original index.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::Slot;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Number of tokens kept out of `n`, rounding halves up.
pub fn retained_count(ratio: f64, n: usize) -> Result<usize> {
    check_ratio(ratio)?;
    // The epsilon absorbs representation error such as 0.29 * 50 = 14.499...
    Ok(((ratio * n as f64) + 0.5 + 1e-9).floor().min(n as f64) as usize)
}

pub(crate) fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    Ok(())
}

pub fn select_random(alive: &[usize], retain_ratio: f64, seed: u64) -> Result<Vec<usize>> {
    let keep = retained_count(retain_ratio, alive.len())?;
    Ok(random_subset(alive, keep, seed))
}

pub(crate) fn random_subset(alive: &[usize], keep: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<usize> = index::sample(&mut rng, alive.len(), keep.min(alive.len()))
        .into_iter()
        .map(|i| alive[i])
        .collect();
    kept.sort_unstable();
    kept
}

/// Attention paid by the last sequence position to each alive visual token.
pub fn last_row_visual_attention<T: Scalar>(
    attn: &Matrix<T>,
    columns: &[Slot],
    alive: &[usize],
) -> Result<Vec<f64>> {
    if attn.cols() != columns.len() || attn.rows() == 0 {
        return Err(Error::AttentionUnavailable { layer: 0 });
    }
    let last = attn.row(attn.rows() - 1);
    alive
        .iter()
        .map(|&k| {
            columns
                .iter()
                .position(|s| *s == Slot::Visual(k))
                .map(|c| last[c].as_f64())
                .ok_or_else(|| {
                    Error::InvalidSequence(format!("attention row has no column for visual token {k}"))
                })
        })
        .collect()
}

/// Keeps the alive tokens the final text position attends to most.
pub fn select_attention_topk<T: Scalar>(
    attn: &Matrix<T>,
    columns: &[Slot],
    alive: &[usize],
    retain_ratio: f64,
) -> Result<Vec<usize>> {
    let keep = retained_count(retain_ratio, alive.len())?;
    let weights = last_row_visual_attention(attn, columns, alive)?;
    Ok(topk_by_score(alive, &weights, keep))
}

pub(crate) fn topk_by_score(alive: &[usize], scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..alive.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(alive[a].cmp(&alive[b]))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).map(|i| alive[i]).collect();
    kept.sort_unstable();
    kept
}

fn norms<T: Scalar>(features: &Matrix<T>) -> Vec<f64> {
    (0..features.rows())
        .map(|r| features.row(r).iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt())
        .collect()
}

/// Cosine similarity between rows; `None` when either row has zero norm.
fn cosine<T: Scalar>(features: &Matrix<T>, norms: &[f64], a: usize, b: usize) -> Option<f64> {
    if norms[a] == 0.0 || norms[b] == 0.0 {
        return None;
    }
    let dot: f64 = features
        .row(a)
        .iter()
        .zip(features.row(b))
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum();
    Some(dot / (norms[a] * norms[b]))
}

/// Angle between two rows, scaled to `[0, 1]`; `None` toward a zero-norm row.
///
/// Ordered exactly like `1 - cos` but a metric, so farthest-first keeps its
/// 2-approximation. Computed from chord lengths to stay accurate near 0 and 1.
fn angular<T: Scalar>(features: &Matrix<T>, norms: &[f64], a: usize, b: usize) -> Option<f64> {
    if norms[a] == 0.0 || norms[b] == 0.0 {
        return None;
    }
    let (mut minus, mut plus) = (0.0, 0.0);
    for (x, y) in features.row(a).iter().zip(features.row(b)) {
        let (u, v) = (x.as_f64() / norms[a], y.as_f64() / norms[b]);
        minus += (u - v) * (u - v);
        plus += (u + v) * (u + v);
    }
    Some(2.0 * minus.sqrt().atan2(plus.sqrt()) / std::f64::consts::PI)
}

/// Pairwise cosine (angular) distances, with 0 toward zero-norm rows.
pub fn cosine_distances<T: Scalar>(features: &Matrix<T>) -> Matrix<f64> {
    let n = features.rows();
    let nr = norms(features);
    if nr.iter().any(|&x| x == 0.0) {
        log::warn!("zero-norm feature row; cosine distance to it treated as 0");
    }
    Matrix::from_fn(n, n, |a, b| if a == b { 0.0 } else { angular(features, &nr, a, b).unwrap_or(0.0) })
}

fn check_rows<T: Scalar>(features: &Matrix<T>, alive: &[usize]) -> Result<()> {
    if features.rows() != alive.len() {
        return Err(Error::MaskLength {
            expected: alive.len(),
            got: features.rows(),
        });
    }
    Ok(())
}

/// Greedy farthest-first max-min selection under cosine distance.
///
/// `features` has one row per alive token, aligned with `alive`.
pub fn select_maxmin_diversity<T: Scalar>(
    features: &Matrix<T>,
    alive: &[usize],
    retain_ratio: f64,
) -> Result<Vec<usize>> {
    check_rows(features, alive)?;
    let keep = retained_count(retain_ratio, alive.len())?;
    Ok(maxmin_subset(features, alive, keep))
}

pub(crate) fn maxmin_subset<T: Scalar>(features: &Matrix<T>, alive: &[usize], keep: usize) -> Vec<usize> {
    let n = alive.len();
    if keep >= n {
        return alive.to_vec();
    }
    if keep == 0 {
        return Vec::new();
    }
    let dist = cosine_distances(features);
    // Rows are in ascending original-index order when `alive` is sorted; the
    // comparisons below still tie-break on the original index explicitly.
    let mut best = (0, 1.min(n - 1));
    let mut best_d = f64::NEG_INFINITY;
    for a in 0..n {
        for b in a + 1..n {
            let d = dist.get(a, b);
            let better = d > best_d
                || (d == best_d && (alive[a].min(alive[b]), alive[a].max(alive[b]))
                    < (alive[best.0].min(alive[best.1]), alive[best.0].max(alive[best.1])));
            if better {
                best_d = d;
                best = (a, b);
            }
        }
    }
    let mut chosen = vec![false; n];
    let mut picked = Vec::with_capacity(keep);
    let first = if alive[best.0] < alive[best.1] { best.0 } else { best.1 };
    let second = if first == best.0 { best.1 } else { best.0 };
    picked.push(first);
    chosen[first] = true;
    if keep >= 2 {
        picked.push(second);
        chosen[second] = true;
    }
    let mut min_d: Vec<f64> = (0..n)
        .map(|c| picked.iter().map(|&p| dist.get(c, p)).fold(f64::INFINITY, f64::min))
        .collect();
    while picked.len() < keep {
        let mut arg: Option<usize> = None;
        for c in (0..n).filter(|&c| !chosen[c]) {
            arg = match arg {
                None => Some(c),
                Some(a) if min_d[c] > min_d[a] || (min_d[c] == min_d[a] && alive[c] < alive[a]) => Some(c),
                keep_a => keep_a,
            };
        }
        let c = arg.expect("candidates remain while picked < n");
        chosen[c] = true;
        picked.push(c);
        for o in 0..n {
            min_d[o] = min_d[o].min(dist.get(o, c));
        }
    }
    let mut kept: Vec<usize> = picked.into_iter().map(|i| alive[i]).collect();
    kept.sort_unstable();
    kept
}

/// Duplication score of every row against the pivot rows: the maximum
/// cosine similarity to any pivot (1 toward zero-norm rows).
pub fn duplication_scores<T: Scalar>(features: &Matrix<T>, pivots: &[usize]) -> Vec<f64> {
    let nr = norms(features);
    (0..features.rows())
        .map(|r| {
            pivots
                .iter()
                .map(|&p| cosine(features, &nr, r, p).unwrap_or(1.0))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

pub const DUPLICATION_PIVOTS: usize = 8;

/// Pivot positions (into `alive`) for the duplication rule.
pub fn duplication_pivots(n_alive: usize, keep: usize, seed: u64) -> Vec<usize> {
    let p = DUPLICATION_PIVOTS.min(n_alive).min(keep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A separate stream keeps pivots from mirroring a random pick with the same seed.
    rng.set_stream(1);
    let mut pivots = index::sample(&mut rng, n_alive, p).into_vec();
    pivots.sort_unstable();
    pivots
}

/// Keeps seeded pivots plus the tokens least similar to them.
pub fn select_low_duplication<T: Scalar>(
    features: &Matrix<T>,
    alive: &[usize],
    retain_ratio: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    check_rows(features, alive)?;
    let keep = retained_count(retain_ratio, alive.len())?;
    Ok(low_duplication_subset(features, alive, keep, seed))
}

pub(crate) fn low_duplication_subset<T: Scalar>(
    features: &Matrix<T>,
    alive: &[usize],
    keep: usize,
    seed: u64,
) -> Vec<usize> {
    let n = alive.len();
    if keep >= n {
        return alive.to_vec();
    }
    let pivots = duplication_pivots(n, keep, seed);
    let scores = duplication_scores(features, &pivots);
    let rest: Vec<usize> = (0..n).filter(|i| !pivots.contains(i)).collect();
    let rest_alive: Vec<usize> = rest.iter().map(|&i| alive[i]).collect();
    // Lowest duplication first: rank by negated score.
    let neg: Vec<f64> = rest.iter().map(|&i| -scores[i]).collect();
    let mut kept = topk_by_score(&rest_alive, &neg, keep - pivots.len());
    kept.extend(pivots.iter().map(|&i| alive[i]));
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(retained_count(0.5, 5).unwrap(), 3);
        assert_eq!(retained_count(0.25, 576).unwrap(), 144);
        assert_eq!(retained_count(0.1, 576).unwrap(), 58);
        assert_eq!(retained_count(1.0, 7).unwrap(), 7);
        assert!(retained_count(1.01, 7).is_err());
        assert!(retained_count(-0.1, 7).is_err());
    }

    #[test]
    fn random_extremes() {
        let alive: Vec<usize> = (0..10).collect();
        assert_eq!(select_random(&alive, 1.0, 1).unwrap(), alive);
        assert!(select_random(&alive, 0.0, 1).unwrap().is_empty());
        assert!(select_random(&[], 0.0, 1).unwrap().is_empty());
    }

    #[test]
    fn attention_prefers_larger_weight_then_smaller_index() {
        let cols = [Slot::Text(0), Slot::Visual(0), Slot::Visual(1), Slot::Text(1)];
        let attn = Matrix::from_vec(1, 4, vec![0.2f64, 0.6, 0.1, 0.1]);
        assert_eq!(select_attention_topk(&attn, &cols, &[0, 1], 0.5).unwrap(), vec![0]);
        let uniform = Matrix::from_vec(1, 4, vec![0.25f64; 4]);
        assert_eq!(select_attention_topk(&uniform, &cols, &[0, 1], 0.5).unwrap(), vec![0]);
        assert!(select_attention_topk(&uniform, &cols, &[0, 5], 0.5).is_err());
    }

    #[test]
    fn collinear_points_keep_the_endpoints() {
        // Cosine geometry: directions at 0, 45 and 90 degrees.
        let f = Matrix::from_vec(3, 2, vec![1.0f64, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(select_maxmin_diversity(&f, &[0, 1, 2], 2.0 / 3.0).unwrap(), vec![0, 2]);
        assert_eq!(select_maxmin_diversity(&f, &[0, 1, 2], 1.0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn orthogonal_token_beats_duplicates() {
        // Ten copies of e1 and one e2; with 8 pivots among 11 rows the
        // orthogonal row either is a pivot or scores 0 and is kept first.
        let mut data = Vec::new();
        for _ in 0..10 {
            data.extend([1.0f64, 0.0]);
        }
        data.extend([0.0, 1.0]);
        let f = Matrix::from_vec(11, 2, data);
        let alive: Vec<usize> = (0..11).collect();
        for seed in 0..20 {
            let kept = select_low_duplication(&f, &alive, 9.0 / 11.0, seed).unwrap();
            assert_eq!(kept.len(), 9);
            assert!(kept.contains(&10));
        }
    }

    #[test]
    fn identical_features_score_one() {
        let f = Matrix::from_vec(4, 2, vec![0.3f64, 0.4, 0.3, 0.4, 0.3, 0.4, 0.3, 0.4]);
        let scores = duplication_scores(&f, &[0, 1]);
        for s in scores {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let kept = select_low_duplication(&f, &[0, 1, 2, 3], 0.5, 3).unwrap();
        assert_eq!(kept.len(), 2);
    }
}

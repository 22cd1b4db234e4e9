//! Detection metrics and attention analysis: FRR/FAR/WWS, rank-based AUC,
//! threshold sweeps, and attention rollout.

use crate::error::{Error, Result};

/// Classification counts and rates at one decision threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionCounts {
    pub n_wake: usize,
    pub n_non_wake: usize,
    /// Wake samples the system missed.
    pub n_fr: usize,
    /// Non-wake samples the system accepted.
    pub n_fa: usize,
    pub frr: f64,
    pub far: f64,
}

impl DetectionCounts {
    pub fn wws(&self) -> f64 {
        wws(self.frr, self.far)
    }
}

/// False reject / false alarm rates at `threshold`. A sample is predicted
/// positive iff its score ≥ threshold (ties accept).
pub fn frr_far(scores: &[f64], labels: &[u8], threshold: f64) -> Result<DetectionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("frr_far", "scores/labels length mismatch"));
    }
    let n_wake = labels.iter().filter(|&&l| l == 1).count();
    let n_non_wake = labels.len() - n_wake;
    if n_wake == 0 || n_non_wake == 0 {
        return Err(Error::invalid(
            "frr_far",
            format!("need both classes, got {n_wake} wake / {n_non_wake} non-wake"),
        ));
    }
    let mut n_fr = 0usize;
    let mut n_fa = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted_positive = s >= threshold;
        if l == 1 && !predicted_positive {
            n_fr += 1;
        }
        if l == 0 && predicted_positive {
            n_fa += 1;
        }
    }
    Ok(DetectionCounts {
        n_wake,
        n_non_wake,
        n_fr,
        n_fa,
        frr: n_fr as f64 / n_wake as f64,
        far: n_fa as f64 / n_non_wake as f64,
    })
}

/// Wake word spotting score: FRR + FAR. Lower is better.
pub fn wws(frr: f64, far: f64) -> f64 {
    frr + far
}

/// Rank-based (Mann–Whitney) AUC with ties counted as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("auc", "scores/labels length mismatch"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc", "need both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One point of a threshold sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
    pub wws: f64,
}

/// Sweep thresholds over dev scores and pick the WWS minimizer (ties take
/// the lower threshold). The default grid is 0, the midpoints between
/// adjacent distinct sorted scores, and 1 — every achievable confusion
/// configuration appears.
pub fn threshold_sweep(
    scores: &[f64],
    labels: &[u8],
    grid: Option<&[f64]>,
) -> Result<(f64, Vec<SweepPoint>)> {
    let owned_grid: Vec<f64> = match grid {
        Some(g) => g.to_vec(),
        None => {
            let mut sorted: Vec<f64> = scores.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            sorted.dedup();
            let mut g = Vec::with_capacity(sorted.len() + 1);
            g.push(0.0);
            for w in sorted.windows(2) {
                g.push((w[0] + w[1]) / 2.0);
            }
            g.push(1.0);
            g
        }
    };
    let mut curve = Vec::with_capacity(owned_grid.len());
    let mut best: Option<SweepPoint> = None;
    for &t in &owned_grid {
        let c = frr_far(scores, labels, t)?;
        let point = SweepPoint {
            threshold: t,
            frr: c.frr,
            far: c.far,
            wws: c.wws(),
        };
        curve.push(point);
        let better = match best {
            None => true,
            Some(b) => {
                point.wws < b.wws || (point.wws == b.wws && point.threshold < b.threshold)
            }
        };
        if better {
            best = Some(point);
        }
    }
    Ok((best.expect("non-empty grid").threshold, curve))
}

// ── attention rollout ───────────────────────────────────────────────────

/// Residual-aware attention rollout: per block average the heads, form
/// (A + I)/2, renormalize rows, and multiply across blocks in order.
/// Input: one `[T, T]` row-stochastic map per encoder block.
pub fn attention_rollout(per_block: &[Vec<f64>], t: usize) -> Result<Vec<f64>> {
    if per_block.is_empty() {
        return Err(Error::invalid("attention_rollout", "no blocks"));
    }
    for (bi, a) in per_block.iter().enumerate() {
        if a.len() != t * t {
            return Err(Error::invalid(
                "attention_rollout",
                format!("block {bi}: expected {t}x{t} map"),
            ));
        }
        for r in 0..t {
            let s: f64 = a[r * t..(r + 1) * t].iter().sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::invalid(
                    "attention_rollout",
                    format!("block {bi} row {r} sums to {s}, not stochastic"),
                ));
            }
        }
    }
    let mut rollout: Option<Vec<f64>> = None;
    for a in per_block {
        // residual-adjusted, row-renormalized
        let mut adj = vec![0.0f64; t * t];
        for r in 0..t {
            let mut row_sum = 0.0;
            for c in 0..t {
                let v = (a[r * t + c] + if r == c { 1.0 } else { 0.0 }) / 2.0;
                adj[r * t + c] = v;
                row_sum += v;
            }
            for c in 0..t {
                adj[r * t + c] /= row_sum;
            }
        }
        rollout = Some(match rollout {
            None => adj,
            Some(prev) => {
                // R_k = A_k · R_{k-1}
                let mut next = vec![0.0f64; t * t];
                for r in 0..t {
                    for k in 0..t {
                        let a_rk = adj[r * t + k];
                        if a_rk != 0.0 {
                            for c in 0..t {
                                next[r * t + c] += a_rk * prev[k * t + c];
                            }
                        }
                    }
                }
                next
            }
        });
    }
    Ok(rollout.expect("at least one block"))
}

/// Average many row-stochastic maps (e.g. heads, then modalities) into one.
pub fn average_maps(maps: &[Vec<f64>]) -> Result<Vec<f64>> {
    if maps.is_empty() {
        return Err(Error::invalid("average_maps", "no maps"));
    }
    let n = maps[0].len();
    let mut out = vec![0.0f64; n];
    for m in maps {
        if m.len() != n {
            return Err(Error::invalid("average_maps", "inconsistent map sizes"));
        }
        for (o, &v) in out.iter_mut().zip(m) {
            *o += v;
        }
    }
    let inv = 1.0 / maps.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn perfect_scores_zero_rates() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [1, 1, 0, 0];
        let c = frr_far(&scores, &labels, 0.5).unwrap();
        assert_eq!(c.n_fr, 0);
        assert_eq!(c.n_fa, 0);
        assert_eq!(c.frr, 0.0);
        assert_eq!(c.far, 0.0);
    }

    #[test]
    fn counts_match_hand_example() {
        // 10 positives with 1 miss, 20 negatives with 2 false alarms
        let mut scores = vec![0.9; 9];
        scores.push(0.1); // missed positive
        scores.extend(vec![0.2; 18]);
        scores.extend(vec![0.8; 2]); // false alarms
        let mut labels = vec![1u8; 10];
        labels.extend(vec![0u8; 20]);
        let c = frr_far(&scores, &labels, 0.5).unwrap();
        assert_eq!((c.n_fr, c.n_fa), (1, 2));
        assert!((c.frr - 0.10).abs() < 1e-12);
        assert!((c.far - 0.10).abs() < 1e-12);
    }

    #[test]
    fn empty_class_is_error() {
        assert!(frr_far(&[0.5, 0.6], &[1, 1], 0.5).is_err());
        assert!(auc(&[0.5, 0.6], &[0, 0]).is_err());
    }

    #[test]
    fn frr_far_matches_counting_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let n = rng.random_range(4..=50);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..=10) as f64) / 10.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let t = rng.random_range(0.0..1.0);
            let c = frr_far(&scores, &labels, t).unwrap();
            // independent counting loop
            let mut fr = 0;
            let mut fa = 0;
            let mut wake = 0;
            let mut non = 0;
            for i in 0..n {
                if labels[i] == 1 {
                    wake += 1;
                    if scores[i] < t {
                        fr += 1;
                    }
                } else {
                    non += 1;
                    if scores[i] >= t {
                        fa += 1;
                    }
                }
            }
            assert_eq!((c.n_fr, c.n_fa, c.n_wake, c.n_non_wake), (fr, fa, wake, non));
        }
    }

    #[test]
    fn wws_paper_values() {
        // Table rows expressed in percent
        assert!((wws(2.02, 2.55) - 4.57).abs() < 1e-9);
        assert!((wws(2.08, 1.78) - 3.86).abs() < 1e-9);
        assert_eq!(wws(0.0, 0.0), 0.0);
    }

    #[test]
    fn auc_separated_and_inverted() {
        let labels = [1, 1, 0, 0];
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
    }

    #[test]
    fn auc_six_sample_brute_force() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.65, 0.8];
        let labels = [0u8, 0, 1, 1, 0, 1];
        // all-pairs counting with half credit for ties
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        let want = num / den;
        assert!((auc(&scores, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pairwise_oracle_randomized() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        for _ in 0..1000 {
            let n = rng.random_range(4..=50);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..=20) as f64) / 20.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        den += 1.0;
                        num += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            assert!((auc(&scores, &labels).unwrap() - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let scores: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut labels: Vec<u8> = (0..40).map(|_| rng.random_range(0..=1) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + (-5.0 * s).exp())).collect();
        assert!((auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn sweep_finds_zero_on_separable_and_never_beats_half() {
        let scores = [0.9, 0.85, 0.3, 0.2, 0.1];
        let labels = [1u8, 1, 0, 0, 0];
        let (best_t, curve) = threshold_sweep(&scores, &labels, None).unwrap();
        let best = curve
            .iter()
            .find(|p| p.threshold == best_t)
            .unwrap();
        assert_eq!(best.wws, 0.0);
        // minimum ≤ WWS at fixed 0.5
        let at_half = frr_far(&scores, &labels, 0.5).unwrap().wws();
        assert!(best.wws <= at_half);
    }

    #[test]
    fn sweep_min_never_exceeds_fixed_threshold_randomized() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.random_range(4..=40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let (best_t, curve) = threshold_sweep(&scores, &labels, None).unwrap();
            let best_wws = curve
                .iter()
                .find(|p| p.threshold == best_t)
                .unwrap()
                .wws;
            let at_half = frr_far(&scores, &labels, 0.5).unwrap().wws();
            assert!(best_wws <= at_half + 1e-12);
        }
    }

    #[test]
    fn frr_monotone_far_antitone_in_threshold() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let scores: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut labels: Vec<u8> = (0..30).map(|_| rng.random_range(0..=1) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let mut prev_frr = -1.0;
        let mut prev_far = 2.0;
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            let c = frr_far(&scores, &labels, t).unwrap();
            assert!(c.frr >= prev_frr - 1e-12, "FRR must not decrease as t rises");
            assert!(c.far <= prev_far + 1e-12, "FAR must not increase as t rises");
            prev_frr = c.frr;
            prev_far = c.far;
        }
    }

    #[test]
    fn rollout_uniform_single_block() {
        let t = 4;
        let uniform = vec![0.25f64; 16];
        let r = attention_rollout(&[uniform], t).unwrap();
        // (A+I)/2 of uniform has rows {5/8 diag? no: (0.25+1)/2=0.625 diag, 0.125 off}
        for row in 0..t {
            let s: f64 = r[row * t..(row + 1) * t].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // uniform attention is symmetric across columns except the residual diagonal
        assert!(r[0] > r[1]);
        assert!((r[1] - r[2]).abs() < 1e-12);
    }

    #[test]
    fn rollout_rows_sum_to_one_multi_block() {
        let t = 5;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let blocks: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut m = vec![0.0f64; t * t];
                for r in 0..t {
                    let mut row: Vec<f64> = (0..t).map(|_| rng.random_range(0.01..1.0)).collect();
                    let s: f64 = row.iter().sum();
                    for v in &mut row {
                        *v /= s;
                    }
                    m[r * t..(r + 1) * t].copy_from_slice(&row);
                }
                m
            })
            .collect();
        let r = attention_rollout(&blocks, t).unwrap();
        for row in 0..t {
            let s: f64 = r[row * t..(row + 1) * t].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rollout_identity_blocks_give_identity() {
        let t = 3;
        let mut eye = vec![0.0f64; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let r = attention_rollout(&[eye.clone(), eye.clone(), eye.clone()], t).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((r[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rollout_rejects_non_stochastic() {
        let bad = vec![0.5f64; 4]; // rows sum to 1.0? 2x2: each row 0.5+0.5=1 ok
        assert!(attention_rollout(&[bad], 2).is_ok());
        let worse = vec![0.9, 0.9, 0.1, 0.1];
        assert!(attention_rollout(&[worse], 2).is_err());
    }
}

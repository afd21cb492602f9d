//! Classification and top-k ranking metrics, plus multi-trial aggregation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if preds.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: preds.len(),
        });
    }
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_ranked(ranked: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let mut seen = std::collections::HashSet::with_capacity(ranked.len());
    for &r in ranked {
        if !seen.insert(r) {
            return Err(Error::InvalidConfig(format!("duplicate item {r} in ranking")));
        }
    }
    Ok(())
}

/// 1 if the true item appears in the first `k` entries, else 0.
pub fn hit_at_k(ranked: &[usize], truth: usize, k: usize) -> Result<f64> {
    check_ranked(ranked, k)?;
    Ok(f64::from(ranked.iter().take(k).any(|&r| r == truth)))
}

/// Rank-discounted credit `1 / log2(1 + rank)` when the true item sits at
/// `rank <= k` (1-indexed), else 0. With a single relevant item the ideal
/// ranking scores exactly 1.
pub fn ndcg_at_k(ranked: &[usize], truth: usize, k: usize) -> Result<f64> {
    check_ranked(ranked, k)?;
    Ok(ranked
        .iter()
        .take(k)
        .position(|&r| r == truth)
        .map_or(0.0, |pos| 1.0 / ((pos + 2) as f64).log2()))
}

/// Mean, spread, and raw values over repeated seeded trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation: trials are a small fixed set, not a
    /// sample from a larger one.
    pub std: f64,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl MetricReport {
    pub fn from_values(metric: impl Into<String>, values: Vec<f64>, seeds: Vec<u64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("trial values"));
        }
        if values.len() != seeds.len() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                got: seeds.len(),
            });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            metric: metric.into(),
            mean,
            std: var.sqrt(),
            values,
            seeds,
        })
    }
}

/// Run one experiment per seed `base_seed..base_seed + n_trials` and
/// aggregate.
pub fn multi_trial<F>(
    metric: impl Into<String>,
    n_trials: usize,
    base_seed: u64,
    mut run: F,
) -> Result<MetricReport>
where
    F: FnMut(u64) -> Result<f64>,
{
    if n_trials == 0 {
        return Err(Error::InvalidConfig("n_trials must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..n_trials as u64).map(|i| base_seed + i).collect();
    let mut values = Vec::with_capacity(n_trials);
    for &s in &seeds {
        values.push(run(s)?);
    }
    MetricReport::from_values(metric, values, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn hit_basics() {
        let ranked: Vec<usize> = (0..12).collect();
        assert_eq!(hit_at_k(&ranked, 0, 10).unwrap(), 1.0);
        assert_eq!(hit_at_k(&ranked, 10, 10).unwrap(), 0.0);
        assert_eq!(hit_at_k(&ranked, 99, 10).unwrap(), 0.0);
        assert!(hit_at_k(&[1, 1], 1, 1).is_err());
    }

    #[test]
    fn ndcg_values() {
        let ranked: Vec<usize> = (0..12).collect();
        assert_eq!(ndcg_at_k(&ranked, 0, 10).unwrap(), 1.0);
        let r2 = ndcg_at_k(&ranked, 1, 10).unwrap();
        assert!((r2 - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((r2 - 0.6309297535714574).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&ranked, 11, 10).unwrap(), 0.0);
    }

    /// Exhaustive position scan, independent of the metric implementations.
    fn scan_metrics(ranked: &[usize], truth: usize, k: usize) -> (f64, f64) {
        let mut hit = 0.0;
        let mut ndcg = 0.0;
        for (i, &r) in ranked.iter().enumerate() {
            let rank = i + 1;
            if rank <= k && r == truth {
                hit = 1.0;
                ndcg = 1.0 / ((rank + 1) as f64).log2();
            }
        }
        (hit, ndcg)
    }

    #[test]
    fn metrics_match_position_scan_on_all_small_permutations() {
        // Catalogs up to 5 here keep the unit test quick; the acceptance
        // suite pushes the same oracle to size 8.
        for n in 1..=5usize {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut stack = vec![0usize; n];
            let mut i = 0;
            loop {
                for k in 1..=n {
                    for truth in 0..n {
                        let (h, d) = scan_metrics(&perm, truth, k);
                        assert_eq!(hit_at_k(&perm, truth, k).unwrap(), h);
                        assert_eq!(ndcg_at_k(&perm, truth, k).unwrap(), d);
                        assert!(d <= h);
                    }
                }
                // Heap's algorithm.
                if i >= n {
                    break;
                }
                if stack[i] < i {
                    if i % 2 == 0 {
                        perm.swap(0, i);
                    } else {
                        perm.swap(stack[i], i);
                    }
                    stack[i] += 1;
                    i = 0;
                } else {
                    stack[i] = 0;
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn ranking_metrics_ignore_order_below_truth() {
        let a = [4usize, 1, 2, 3];
        let b = [4usize, 3, 1, 2];
        for k in 1..=1 {
            assert_eq!(hit_at_k(&a, 4, k).unwrap(), hit_at_k(&b, 4, k).unwrap());
            assert_eq!(ndcg_at_k(&a, 4, k).unwrap(), ndcg_at_k(&b, 4, k).unwrap());
        }
    }

    #[test]
    fn multi_trial_aggregation() {
        let r = multi_trial("acc", 3, 10, |_| Ok(0.5)).unwrap();
        assert_eq!(r.mean, 0.5);
        assert_eq!(r.std, 0.0);
        assert_eq!(r.seeds, vec![10, 11, 12]);

        let r = multi_trial("acc", 2, 0, |s| Ok(s as f64)).unwrap();
        assert_eq!(r.mean, 0.5);
        assert_eq!(r.std, 0.5);

        let r = multi_trial("acc", 1, 4, |_| Ok(0.25)).unwrap();
        assert_eq!(r.mean, 0.25);
        assert_eq!(r.std, 0.0);
        assert!(r.mean >= r.values.iter().cloned().fold(f64::INFINITY, f64::min));
        assert!(r.mean <= r.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}

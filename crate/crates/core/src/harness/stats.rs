//! Two-sided Wilcoxon rank-sum test for two independent samples.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest combined sample size handled by exact enumeration.
pub const EXACT_LIMIT: usize = 12;

/// Midranks (1-based) of the pooled sample plus the tie sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Two-sided p-value of the rank-sum statistic of `a` against `b`. Exact
/// permutation distribution when `|a| + |b| ≤ 12`, otherwise the normal
/// approximation with tie-corrected variance.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("rank-sum sample"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NaN("rank-sum sample"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let (n1, n) = (a.len(), pooled.len());
    let observed: f64 = ranks[..n1].iter().sum();
    let expected = n1 as f64 * (n as f64 + 1.0) / 2.0;
    let dev = (observed - expected).abs();

    if n <= EXACT_LIMIT {
        let mut extreme = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            total += 1;
            if (w - expected).abs() >= dev - 1e-9 {
                extreme += 1;
            }
        }
        return Ok(extreme as f64 / total as f64);
    }

    let (n1f, n2f, nf) = (n1 as f64, (n - n1) as f64, n as f64);
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (nf * (nf - 1.0));
    let var = n1f * n2f / 12.0 * ((nf + 1.0) - tie_term);
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = dev / var.sqrt();
    let normal = Normal::standard();
    Ok((2.0 * (1.0 - normal.cdf(z))).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        assert_eq!(rank_sum_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn smallest_separated_case() {
        let p = rank_sum_test(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn large_disjoint_samples() {
        let a: Vec<f64> = (0..21).map(f64::from).collect();
        let b: Vec<f64> = (100..121).map(f64::from).collect();
        assert!(rank_sum_test(&a, &b).unwrap() < 1e-3);
    }

    #[test]
    fn all_tied_large_sample() {
        assert_eq!(rank_sum_test(&[5.0; 10], &[5.0; 10]).unwrap(), 1.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(rank_sum_test(&[], &[1.0]).is_err());
    }
}

//! Convergence diagnostics over multiple chains of one scalar parameter.
//!
//! R-hat is the rank-normalized split R-hat: the larger of the split R-hat
//! of the rank-normalized draws and of the rank-normalized folded draws.
//! ESS is the bulk ESS, computed on rank-normalized split chains with
//! Geyer's initial monotone sequence truncation.

use statrs::distribution::{ContinuousCDF, Normal};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Split each chain into two halves (dropping the middle draw of odd chains).
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

/// Replace draws by normal scores of their pooled fractional ranks
/// (average ranks for ties).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut order: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, xs)| xs.iter().enumerate().map(move |(k, &x)| (x, c, k)))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let denom = total as f64 + 0.25;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && order[j + 1].0 == order[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let score = normal.inverse_cdf((rank - 0.375) / denom);
        for &(_, c, k) in &order[i..=j] {
            out[c][k] = score;
        }
        i = j + 1;
    }
    out
}

/// Plain (non-split) potential scale reduction over the given chains.
fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    if chains.len() < 2 || n < 2.0 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = chains.iter().map(|c| sample_var(c)).sum::<f64>() / m;
    let between = n * sample_var(&means);
    if within == 0.0 {
        return if between == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    (var_plus / within).sqrt()
}

/// Classic split R-hat without rank normalization.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    rhat_basic(&split(chains))
}

/// Rank-normalized split R-hat (max of bulk and folded variants).
pub fn rank_normalized_rhat(chains: &[Vec<f64>]) -> f64 {
    let s = split(chains);
    if s.is_empty() || s[0].len() < 2 {
        return f64::NAN;
    }
    let bulk = rhat_basic(&rank_normalize(&s));
    let mut pooled: Vec<f64> = s.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let k = pooled.len();
    let median = if k % 2 == 1 {
        pooled[k / 2]
    } else {
        0.5 * (pooled[k / 2 - 1] + pooled[k / 2])
    };
    let folded: Vec<Vec<f64>> =
        s.iter().map(|c| c.iter().map(|x| (x - median).abs()).collect()).collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    bulk.max(tail)
}

/// Autocovariance at `lag` (biased, divided by n) of a chain with known mean.
fn autocov(xs: &[f64], m: f64, lag: usize) -> f64 {
    let n = xs.len();
    (0..n - lag).map(|i| (xs[i] - m) * (xs[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov0: Vec<f64> = chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, 0)).collect();
    let nf = n as f64;
    let chain_var: Vec<f64> = acov0.iter().map(|a| a * nf / (nf - 1.0)).collect();
    let mean_var = chain_var.iter().sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let mean_acov = |lag: usize| -> f64 {
        chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, lag)).sum::<f64>() / m as f64
    };
    let rho_at = |lag: usize| 1.0 - (mean_var - mean_acov(lag)) / var_plus;

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho_at(1);
    rho[1] = rho_odd;
    let mut t = 1;
    while t < n - 4 && rho_even + rho_odd > 0.0 {
        rho_even = rho_at(t + 1);
        rho_odd = rho_at(t + 2);
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    // Enforce a monotone sequence of pair sums.
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let mut tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1];
    tau = tau.max(1.0 / total.log10());
    total / tau
}

/// Bulk ESS: ESS of rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    let s = split(chains);
    if s.is_empty() || s[0].len() < 4 {
        return f64::NAN;
    }
    ess(&rank_normalize(&s))
}

//! Maximum-likelihood negative binomial fit for pattern counts, reported
//! as a diagnostic next to the rank-frequency curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_R_MIN: f64 = -13.815_510_557_964_274; // ln 1e-6
const LN_R_MAX: f64 = 18.420_680_743_952_367; // ln 1e8
/// Half the 95% chi-square(1) quantile: the log-likelihood gain over a
/// Poisson fit below which the counts are called Poisson-like.
const POISSON_LIKE_GAIN: f64 = 1.920_729_410_347_062;

/// Negative binomial with pmf `C(k + r - 1, k) p^r (1 - p)^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegBinomialFit {
    pub size_r: f64,
    pub prob_p: f64,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub log_likelihood: f64,
    pub poisson_log_likelihood: f64,
    /// Overdispersion is not supported by the likelihood (or `r` hit the
    /// upper search bound).
    pub poisson_like: bool,
    pub chi_square: f64,
    pub chi_square_df: usize,
    pub chi_square_p: Option<f64>,
}

impl NegBinomialFit {
    pub fn ln_pmf(&self, k: u64) -> f64 {
        nb_ln_pmf(k as f64, self.size_r, self.prob_p)
    }
}

fn nb_ln_pmf(k: f64, r: f64, p: f64) -> f64 {
    ln_gamma(k + r) - ln_gamma(r) - ln_gamma(k + 1.0) + r * p.ln() + k * (1.0 - p).ln()
}

/// Profile log-likelihood in `ln r`, with `p` at its conditional MLE.
fn profile(freq: &BTreeMap<u64, usize>, n: f64, mean: f64, ln_r: f64) -> f64 {
    let r = ln_r.exp();
    let p = r / (r + mean);
    let mut ll = n * r * p.ln() + n * mean * (1.0 - p).ln() - n * ln_gamma(r);
    for (&k, &c) in freq {
        let k = k as f64;
        ll += c as f64 * (ln_gamma(k + r) - ln_gamma(k + 1.0));
    }
    ll
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    (lo + hi) / 2.0
}

pub fn fit_count_distribution(counts: &[u64]) -> Result<NegBinomialFit> {
    if counts.len() < 2 {
        return Err(Error::InvalidInput("count distribution needs at least 2 counts".into()));
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let variance = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if variance == 0.0 {
        return Err(Error::ZeroVariance("all counts equal".into()));
    }
    let mut freq: BTreeMap<u64, usize> = BTreeMap::new();
    for &c in counts {
        *freq.entry(c).or_default() += 1;
    }

    let obj = |t: f64| profile(&freq, n, mean, t);
    // coarse scan locates the basin, golden section refines it
    let steps = 256;
    let h = (LN_R_MAX - LN_R_MIN) / steps as f64;
    let best_i = (0..=steps)
        .map(|i| (i, obj(LN_R_MIN + i as f64 * h)))
        .fold((0usize, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc })
        .0;
    let lo = LN_R_MIN + (best_i.saturating_sub(1)) as f64 * h;
    let hi = (LN_R_MIN + (best_i + 1) as f64 * h).min(LN_R_MAX);
    let ln_r = golden_max(obj, lo, hi, 1e-10);
    let r = ln_r.exp();
    let p = r / (r + mean);
    let ll = obj(ln_r);

    let pois_ll: f64 = if mean > 0.0 {
        freq.iter()
            .map(|(&k, &c)| c as f64 * (k as f64 * mean.ln() - mean - ln_gamma(k as f64 + 1.0)))
            .sum()
    } else {
        0.0
    };
    let at_bound = ln_r > LN_R_MAX - 2.0 * h;
    let poisson_like = at_bound || ll - pois_ll < POISSON_LIKE_GAIN;

    let mut fit = NegBinomialFit {
        size_r: r,
        prob_p: p,
        n: counts.len(),
        mean,
        variance,
        log_likelihood: ll,
        poisson_log_likelihood: pois_ll,
        poisson_like,
        chi_square: 0.0,
        chi_square_df: 0,
        chi_square_p: None,
    };
    let (stat, df) = chi_square_gof(&freq, &fit);
    fit.chi_square = stat;
    fit.chi_square_df = df;
    fit.chi_square_p = (df > 0).then(|| 1.0 - ChiSquared::new(df as f64).unwrap().cdf(stat));
    Ok(fit)
}

/// Pearson goodness of fit over bins merged left to right until each
/// expected count reaches 5; the final bin absorbs the upper tail.
fn chi_square_gof(freq: &BTreeMap<u64, usize>, fit: &NegBinomialFit) -> (f64, usize) {
    let n = fit.n as f64;
    let kmax = *freq.keys().next_back().unwrap();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut obs, mut exp) = (0.0, 0.0);
    let mut cdf = 0.0;
    for k in 0..=kmax {
        let pk = fit.ln_pmf(k).exp();
        cdf += pk;
        obs += *freq.get(&k).unwrap_or(&0) as f64;
        exp += n * pk;
        if exp >= 5.0 {
            bins.push((obs, exp));
            obs = 0.0;
            exp = 0.0;
        }
    }
    exp += n * (1.0 - cdf).max(0.0);
    if let Some(last) = bins.last_mut().filter(|_| exp < 5.0) {
        last.0 += obs;
        last.1 += exp;
    } else {
        bins.push((obs, exp));
    }
    let stat = bins
        .iter()
        .filter(|(_, e)| *e > 0.0)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    (stat, bins.len().saturating_sub(3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, Poisson};

    /// Gamma-Poisson mixture: NB(r, p) has rate ~ Gamma(r, scale (1-p)/p).
    fn sample_nb(r: f64, p: f64, n: usize, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = Gamma::new(r, (1.0 - p) / p).unwrap();
        (0..n)
            .map(|_| {
                let lam: f64 = gamma.sample(&mut rng);
                if lam <= 0.0 {
                    0
                } else {
                    Poisson::new(lam).unwrap().sample(&mut rng) as u64
                }
            })
            .collect()
    }

    #[test]
    fn recovers_negative_binomial() {
        let counts = sample_nb(2.0, 0.3, 10_000, 7);
        let fit = fit_count_distribution(&counts).unwrap();
        assert!((fit.size_r - 2.0).abs() / 2.0 < 0.10, "r = {}", fit.size_r);
        assert!((fit.prob_p - 0.3).abs() / 0.3 < 0.05, "p = {}", fit.prob_p);
        assert!(!fit.poisson_like);
        assert!(fit.chi_square_df > 0);
    }

    #[test]
    fn poisson_counts_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pois = Poisson::new(6.0).unwrap();
        let counts: Vec<u64> = (0..5000).map(|_| pois.sample(&mut rng) as u64).collect();
        let fit = fit_count_distribution(&counts).unwrap();
        assert!(fit.poisson_like);
        assert!(fit.size_r > 100.0, "r = {}", fit.size_r);
        assert!(fit.log_likelihood >= fit.poisson_log_likelihood - 1e-6);
    }

    #[test]
    fn zero_variance_rejected() {
        let err = fit_count_distribution(&[4, 4, 4, 4]).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
    }

    #[test]
    fn profile_is_maximized() {
        let counts = sample_nb(1.5, 0.2, 2000, 3);
        let fit = fit_count_distribution(&counts).unwrap();
        let freq = counts.iter().fold(BTreeMap::new(), |mut m, &c| {
            *m.entry(c).or_insert(0usize) += 1;
            m
        });
        let t = fit.size_r.ln();
        let f0 = profile(&freq, counts.len() as f64, fit.mean, t);
        for dt in [-1e-3, 1e-3] {
            assert!(profile(&freq, counts.len() as f64, fit.mean, t + dt) <= f0 + 1e-9);
        }
    }
}

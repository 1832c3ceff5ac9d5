//! Small statistical helpers shared across modules.

use statrs::distribution::{Binomial, ContinuousCDF, Discrete, StudentsT};

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance (n-1 denominator). Returns 0 for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

pub fn sample_sd(values: &[f64]) -> f64 {
    sample_variance(values).sqrt()
}

/// Pearson correlation. `None` when either vector is constant (undefined).
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Two-sided p-value for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if !df.is_finite() || df <= 0.0 {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

/// One-sample two-sided t-test of `values` against 0.
///
/// Degenerate cases: a single value or zero spread collapses to p = 1 when
/// the mean is 0 and p = 0 otherwise.
pub fn one_sample_t_p(values: &[f64]) -> f64 {
    let n = values.len();
    let m = mean(values);
    let sd = sample_sd(values);
    if n < 2 || sd == 0.0 {
        return if m == 0.0 { 1.0 } else { 0.0 };
    }
    let t = m / (sd / (n as f64).sqrt());
    t_two_sided_p(t, (n - 1) as f64)
}

/// Welch's two-sample two-sided t-test p-value.
pub fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let diff = mean(b) - mean(a);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return if diff == 0.0 { 1.0 } else { 0.0 };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    t_two_sided_p(t, df)
}

/// Exact two-sided binomial test of `successes` out of `trials` against
/// success probability `p0`: sums the probability of all outcomes no more
/// likely than the observed one.
pub fn binomial_two_sided_p(successes: usize, trials: usize, p0: f64) -> f64 {
    let dist = Binomial::new(p0, trials as u64).expect("valid binomial");
    let observed = dist.pmf(successes as u64);
    let cutoff = observed * (1.0 + 1e-7);
    let mut p = 0.0;
    for k in 0..=trials as u64 {
        let pk = dist.pmf(k);
        if pk <= cutoff {
            p += pk;
        }
    }
    p.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_perfect_and_constant() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[5.0, 5.0, 5.0]), None);
    }

    #[test]
    fn one_sample_t_symmetric_null() {
        // Mean zero, two-sided: p = 1 when t = 0.
        assert!((one_sample_t_p(&[-1.0, 1.0]) - 1.0).abs() < 1e-12);
        // Strong signal drives p down.
        let vals = vec![0.5; 10]
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.01 * i as f64)
            .collect::<Vec<_>>();
        assert!(one_sample_t_p(&vals) < 0.001);
    }

    #[test]
    fn welch_identical_samples() {
        let a = [0.0, 2.0, 4.0];
        assert!((welch_p(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_test_at_base_rate() {
        // Observing exactly the expected count should not be significant.
        let p = binomial_two_sided_p(50, 100, 0.5);
        assert!(p > 0.9);
        // Observing far from it should be.
        let p = binomial_two_sided_p(90, 100, 0.5);
        assert!(p < 1e-6);
    }
}

//! Residual invariance across environments: one-vs-rest Welch t-tests for
//! means and F-tests for variances, Bonferroni-combined.

use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    pub df: (f64, f64),
    pub p_value: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch (unequal variance) t-test for equal means.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> TestOutcome {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        let p = if ma == mb { 1.0 } else { 0.0 };
        let t = if ma == mb { 0.0 } else { f64::INFINITY };
        return TestOutcome {
            statistic: t,
            df: (na + nb - 2.0, 0.0),
            p_value: p,
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    TestOutcome {
        statistic: t,
        df: (df, 0.0),
        p_value: p,
    }
}

/// Two-sided F-test for equal variances, `F = var(a) / var(b)`.
pub fn f_test(a: &[f64], b: &[f64]) -> TestOutcome {
    let (_, va) = mean_var(a);
    let (_, vb) = mean_var(b);
    let df = (a.len() as f64 - 1.0, b.len() as f64 - 1.0);
    if !(vb > 0.0) {
        let p = if va > 0.0 { 0.0 } else { 1.0 };
        return TestOutcome {
            statistic: if va > 0.0 { f64::INFINITY } else { 1.0 },
            df,
            p_value: p,
        };
    }
    let f = va / vb;
    let dist = FisherSnedecor::new(df.0, df.1).expect("positive degrees of freedom");
    let p = (2.0 * dist.cdf(f).min(dist.sf(f))).min(1.0);
    TestOutcome {
        statistic: f,
        df,
        p_value: p,
    }
}

/// Bonferroni-combined p-value of the hypothesis that residuals share one
/// distribution (mean and variance) across environments.
///
/// For every environment the residuals are compared against the pooled
/// residuals of all other environments with [`welch_t_test`] and
/// [`f_test`]; the result is `min(1, 2 |E| min p)`.
pub fn invariance_test(residuals_by_env: &[Vec<f64>]) -> Result<f64> {
    if residuals_by_env.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "invariance test needs at least 2 environments, got {}",
            residuals_by_env.len()
        )));
    }
    if let Some(i) = residuals_by_env.iter().position(|g| g.len() < 2) {
        return Err(Error::InvalidInput(format!(
            "environment group {i} has fewer than 2 residuals"
        )));
    }
    let n_env = residuals_by_env.len();
    let mut min_p: f64 = 1.0;
    let mut rest = Vec::new();
    for (e, group) in residuals_by_env.iter().enumerate() {
        rest.clear();
        for (o, other) in residuals_by_env.iter().enumerate() {
            if o != e {
                rest.extend_from_slice(other);
            }
        }
        min_p = min_p
            .min(welch_t_test(group, &rest).p_value)
            .min(f_test(group, &rest).p_value);
    }
    Ok((2.0 * n_env as f64 * min_p).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn identical_samples_give_one() {
        let g = vec![1.0, -1.0, 1.0, -1.0];
        assert_eq!(invariance_test(&[g.clone(), g]).unwrap(), 1.0);
    }

    #[test]
    fn needs_two_envs_with_two_residuals() {
        assert!(invariance_test(&[vec![1.0, 2.0]]).is_err());
        assert!(invariance_test(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn t_statistic_matches_hand_computation() {
        let a = normals(50, 1);
        let b: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
        // independent straight-line Welch computation
        let n = 50.0;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / (n - 1.0);
        let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / (n - 1.0);
        let t = (ma - mb) / (va / n + vb / n).sqrt();
        let out = welch_t_test(&a, &b);
        assert!((out.statistic - t).abs() < 1e-9 * t.abs());
        assert!(t.abs() > 40.0);
        assert!(invariance_test(&[a, b]).unwrap() < 1e-6);
    }

    #[test]
    fn f_statistic_matches_hand_computation() {
        let a = normals(50, 2);
        let b: Vec<f64> = a.iter().map(|x| 3.0 * x).collect();
        let out = f_test(&a, &b);
        assert!((out.statistic - 1.0 / 9.0).abs() < 1e-12);
        // the location is unchanged so the mean test cannot fire
        assert!(welch_t_test(&a, &b).p_value > 1e-3 || a.iter().sum::<f64>().abs() > 1.0);
        assert!(invariance_test(&[a, b]).unwrap() < 1e-3);
    }

    #[test]
    fn tail_probabilities_match_tables() {
        // t_{0.975, 10} = 2.2281; F_{0.95}(5, 10) = 3.3258
        let dist = StudentsT::new(0.0, 1.0, 10.0).unwrap();
        assert!((2.0 * dist.sf(2.2281) - 0.05).abs() < 1e-4);
        let f = FisherSnedecor::new(5.0, 10.0).unwrap();
        assert!((f.sf(3.3258) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn zero_variance_groups() {
        let z = vec![0.0; 5];
        assert_eq!(welch_t_test(&z, &z).p_value, 1.0);
        assert_eq!(welch_t_test(&z, &[1.0; 5]).p_value, 0.0);
        assert_eq!(f_test(&z, &z).p_value, 1.0);
        assert_eq!(f_test(&[1.0, 2.0, 3.0], &z).p_value, 0.0);
    }

    #[test]
    fn null_p_values_are_roughly_super_uniform() {
        // Bonferroni is conservative: P(p <= 0.05) should not exceed 0.05 by much
        let mut rejections = 0;
        let trials = 400;
        for s in 0..trials {
            let groups: Vec<Vec<f64>> = (0..3).map(|e| normals(60, 1000 * s + e)).collect();
            if invariance_test(&groups).unwrap() <= 0.05 {
                rejections += 1;
            }
        }
        // 0.05 + 3 standard errors
        assert!((rejections as f64) / (trials as f64) < 0.05 + 3.0 * (0.05f64 * 0.95 / 400.0).sqrt());
    }
}

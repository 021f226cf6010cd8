use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance below which a column is treated as lying in the span
/// of the columns already factored.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub weights: DVector<f64>,
    pub intercept: f64,
    pub residuals: DVector<f64>,
}

impl RegressionFit {
    pub fn predict(&self, features: &[f64]) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }
}

/// Ordinary least squares of `targets` on `[1 | features]`.
///
/// Solved by Householder QR. The intercept column is factored first; the
/// feature columns are pivoted by largest remaining norm, and a column whose
/// remaining norm drops below `RANK_TOL` times its original norm is reported
/// as collinear.
pub fn fit_least_squares(features: &DMatrix<f64>, targets: &DVector<f64>) -> Result<RegressionFit> {
    let (n, d) = features.shape();
    if targets.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} targets for {n} feature rows",
            targets.len()
        )));
    }
    if n <= d + 1 {
        return Err(Error::InvalidInput(format!(
            "need more than {} samples for {d} features, got {n}",
            d + 1
        )));
    }
    let p = d + 1;
    let mut a = DMatrix::zeros(n, p);
    a.column_mut(0).fill(1.0);
    a.columns_mut(1, d).copy_from(features);
    let mut y = targets.clone();
    // perm[j] = original column now at position j (0 is the intercept)
    let mut perm: Vec<usize> = (0..p).collect();
    let orig_norms: Vec<f64> = (0..p).map(|j| a.column(j).norm()).collect();

    for j in 0..p {
        if j > 0 {
            let best = (j..p)
                .max_by(|&u, &v| {
                    let nu = a.view((j, u), (n - j, 1)).norm_squared();
                    let nv = a.view((j, v), (n - j, 1)).norm_squared();
                    nu.total_cmp(&nv).then(v.cmp(&u))
                })
                .unwrap_or(j);
            if best != j {
                a.swap_columns(j, best);
                perm.swap(j, best);
            }
        }
        let norm = a.view((j, j), (n - j, 1)).norm();
        if !(norm > RANK_TOL * orig_norms[perm[j]]) {
            let mut columns: Vec<usize> = perm[j..].iter().map(|&c| c.saturating_sub(1)).collect();
            columns.sort_unstable();
            return Err(Error::RankDeficient { columns });
        }
        let alpha = if a[(j, j)] > 0.0 { -norm } else { norm };
        let mut v: DVector<f64> = a.view((j, j), (n - j, 1)).column(0).into_owned();
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            for c in j..p {
                let dot = v.dot(&a.view((j, c), (n - j, 1)).column(0));
                let s = 2.0 * dot / vnorm2;
                for (r, vr) in v.iter().enumerate() {
                    a[(j + r, c)] -= s * vr;
                }
            }
            let dot = v.dot(&y.rows(j, n - j));
            let s = 2.0 * dot / vnorm2;
            for (r, vr) in v.iter().enumerate() {
                y[j + r] -= s * vr;
            }
        }
    }

    let mut beta_perm = DVector::zeros(p);
    for i in (0..p).rev() {
        let mut s = y[i];
        for c in (i + 1)..p {
            s -= a[(i, c)] * beta_perm[c];
        }
        beta_perm[i] = s / a[(i, i)];
    }
    let mut beta = DVector::zeros(p);
    for (pos, &orig) in perm.iter().enumerate() {
        beta[orig] = beta_perm[pos];
    }
    let intercept = beta[0];
    let weights = beta.rows(1, d).into_owned();
    let residuals = DVector::from_iterator(
        n,
        (0..n).map(|i| targets[i] - intercept - features.row(i).dot(&weights.transpose())),
    );
    Ok(RegressionFit {
        weights,
        intercept,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    #[test]
    fn exact_line() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0]);
        let fit = fit_least_squares(&x, &y).unwrap();
        assert!((fit.weights[0] - 2.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!(fit.residuals.amax() < 1e-12);
    }

    #[test]
    fn constant_target() {
        let mut rng = seed::rng(2);
        let x = DMatrix::from_fn(20, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_element(20, 3.5);
        let fit = fit_least_squares(&x, &y).unwrap();
        assert!(fit.weights.amax() < 1e-12);
        assert!((fit.intercept - 3.5).abs() < 1e-12);
    }

    #[test]
    fn recovers_known_weights() {
        let mut rng = seed::rng(7);
        let truth = [1.0, -2.0, 0.5];
        let x = DMatrix::from_fn(200, 3, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
        let y = DVector::from_iterator(200, (0..200).map(|i| (0..3).map(|j| truth[j] * x[(i, j)]).sum::<f64>() + 0.25));
        let fit = fit_least_squares(&x, &y).unwrap();
        for j in 0..3 {
            assert!((fit.weights[j] - truth[j]).abs() < 1e-8);
        }
        assert!((fit.intercept - 0.25).abs() < 1e-8);
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = seed::rng(9);
        let x = DMatrix::from_fn(50, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(50, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fit = fit_least_squares(&x, &y).unwrap();
        let mut design = DMatrix::from_element(50, 4, 1.0);
        design.columns_mut(1, 3).copy_from(&x);
        let beta = (design.transpose() * &design)
            .lu()
            .solve(&(design.transpose() * &y))
            .unwrap();
        assert!((beta[0] - fit.intercept).abs() < 1e-10);
        for j in 0..3 {
            assert!((beta[j + 1] - fit.weights[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn names_collinear_columns() {
        let mut rng = seed::rng(1);
        let mut x = DMatrix::from_fn(30, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        for i in 0..30 {
            x[(i, 2)] = 2.0 * x[(i, 0)] - x[(i, 1)];
        }
        let y = DVector::from_element(30, 1.0);
        match fit_least_squares(&x, &y) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns.len(), 1),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        // a constant feature is collinear with the intercept
        let mut x = DMatrix::from_fn(30, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        x.column_mut(1).fill(4.0);
        match fit_least_squares(&x, &y) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec![1]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn too_few_samples() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let y = DVector::from_element(2, 1.0);
        assert!(matches!(fit_least_squares(&x, &y), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn empty_feature_set_fits_the_mean() {
        let x = DMatrix::<f64>::zeros(4, 0);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 6.0]);
        let fit = fit_least_squares(&x, &y).unwrap();
        assert!((fit.intercept - 3.0).abs() < 1e-12);
    }
}

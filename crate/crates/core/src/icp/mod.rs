//! Linear invariant causal prediction and the iterative Linear MISA
//! abstraction built on it.

mod invariance;
mod ols;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use invariance::{f_test, invariance_test, welch_t_test, TestOutcome};
pub use ols::{fit_least_squares, RegressionFit, RANK_TOL};

use crate::blockmdp::ReplayBuffer;
use crate::error::{Error, Result};
use crate::graph::VarId;

/// Largest number of candidate variables for exhaustive subset search.
pub const D_MAX: usize = 15;

/// Regression data for one environment.
#[derive(Debug, Clone)]
pub struct EnvData {
    /// Candidate causal features, one column per variable.
    pub features: DMatrix<f64>,
    /// Always-included covariates (e.g. action indicators); may have zero columns.
    pub covariates: DMatrix<f64>,
    pub target: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceVerdict {
    pub candidate_set: BTreeSet<VarId>,
    pub p_value: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcpResult {
    pub alpha: f64,
    pub dim: usize,
    /// One verdict per subset, in mask order.
    pub verdicts: Vec<InvarianceVerdict>,
    pub accepted_sets: Vec<BTreeSet<VarId>>,
    pub intersection: BTreeSet<VarId>,
    pub all_rejected: bool,
}

/// Exhaustive ICP over all subsets of the `d` candidate features.
///
/// A subset is accepted when the invariance p-value of the pooled regression
/// residuals is strictly greater than `alpha`. When nothing is accepted the
/// result is flagged `all_rejected` and the intersection is empty.
pub fn icp(envs: &[EnvData], alpha: f64) -> Result<IcpResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} not in (0, 1)")));
    }
    if envs.len() < 2 {
        return Err(Error::InvalidInput("ICP needs at least 2 environments".into()));
    }
    let d = envs[0].features.ncols();
    let c = envs[0].covariates.ncols();
    if d > D_MAX {
        return Err(Error::TooManyVariables { d, max: D_MAX });
    }
    for e in envs {
        if e.features.ncols() != d || e.covariates.ncols() != c {
            return Err(Error::InvalidInput("environments disagree on dimensions".into()));
        }
        if e.features.nrows() != e.target.len() || e.covariates.nrows() != e.target.len() {
            return Err(Error::InvalidInput("row count mismatch within an environment".into()));
        }
    }
    let sizes: Vec<usize> = envs.iter().map(|e| e.target.len()).collect();
    let n: usize = sizes.iter().sum();
    let target = DVector::from_iterator(n, envs.iter().flat_map(|e| e.target.iter().copied()));

    let mut verdicts = Vec::with_capacity(1 << d);
    for mask in 0u32..(1u32 << d) {
        let cols: Vec<usize> = (0..d).filter(|j| mask & (1 << j) != 0).collect();
        let mut design = DMatrix::zeros(n, cols.len() + c);
        let mut row = 0;
        for e in envs {
            for i in 0..e.target.len() {
                for (q, &j) in cols.iter().enumerate() {
                    design[(row, q)] = e.features[(i, j)];
                }
                for q in 0..c {
                    design[(row, cols.len() + q)] = e.covariates[(i, q)];
                }
                row += 1;
            }
        }
        let fit = fit_least_squares(&design, &target)?;
        let mut groups = Vec::with_capacity(envs.len());
        let mut start = 0;
        for &s in &sizes {
            groups.push(fit.residuals.rows(start, s).iter().copied().collect::<Vec<f64>>());
            start += s;
        }
        let p_value = invariance_test(&groups)?;
        verdicts.push(InvarianceVerdict {
            candidate_set: cols.into_iter().map(VarId).collect(),
            p_value,
            accepted: p_value > alpha,
        });
    }
    Ok(summarize(alpha, d, verdicts))
}

fn summarize(alpha: f64, dim: usize, verdicts: Vec<InvarianceVerdict>) -> IcpResult {
    let mut accepted_sets: Vec<BTreeSet<VarId>> = verdicts
        .iter()
        .filter(|v| v.accepted)
        .map(|v| v.candidate_set.clone())
        .collect();
    accepted_sets.sort();
    let intersection = accepted_sets
        .iter()
        .skip(1)
        .fold(accepted_sets.first().cloned().unwrap_or_default(), |acc, s| {
            acc.intersection(s).copied().collect()
        });
    IcpResult {
        alpha,
        dim,
        all_rejected: accepted_sets.is_empty(),
        verdicts,
        accepted_sets,
        intersection,
    }
}

/// A node of the Linear MISA search: the reward or a state variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Target {
    Reward,
    Var(VarId),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearMisa {
    pub abstraction: BTreeSet<VarId>,
    /// ICP calls in the order they were made.
    pub calls: Vec<(Target, IcpResult)>,
    pub alpha_per_call: f64,
}

/// Regression data for `target` from a replay buffer: features are `x_t`,
/// the target is `r_t` for the reward and `x_{v,t+1}` for variable `v`.
/// With more than one action, indicators for actions `1..` are added as
/// covariates.
pub fn regression_data(buffer: &ReplayBuffer, target: Target) -> Vec<EnvData> {
    let k = buffer.k();
    let n_actions = buffer.n_actions();
    let c = n_actions.saturating_sub(1);
    buffer
        .groups()
        .map(|(_, ts)| {
            let n = ts.len();
            let features = DMatrix::from_fn(n, k, |i, j| ts[i].x[j]);
            let covariates = DMatrix::from_fn(n, c, |i, q| if ts[i].a == q + 1 { 1.0 } else { 0.0 });
            let target = DVector::from_iterator(
                n,
                ts.iter().map(|t| match target {
                    Target::Reward => t.r,
                    Target::Var(v) => t.x_next[v.0],
                }),
            );
            EnvData {
                features,
                covariates,
                target,
            }
        })
        .collect()
}

/// Iterative ICP from the reward through its ancestors.
///
/// Starting from the reward, every node taken off the stack that has not
/// been expanded yet is regressed on `x_t` with ICP at level
/// `alpha / dim(X)`; the accepted intersection joins the abstraction and is
/// pushed for expansion. The reward is never re-pushed. An all-rejected ICP
/// call contributes nothing.
pub fn misa_linear(buffer: &ReplayBuffer, alpha: f64) -> Result<LinearMisa> {
    let ids = buffer.env_ids();
    if ids.len() < 2 {
        return Err(Error::InvalidInput("Linear MISA needs at least 2 environments".into()));
    }
    let k = buffer.k();
    let alpha_per_call = alpha / k as f64;
    let mut abstraction: BTreeSet<VarId> = BTreeSet::new();
    let mut expanded: BTreeSet<Target> = BTreeSet::new();
    let mut stack = vec![Target::Reward];
    let mut calls = Vec::new();
    while let Some(node) = stack.pop() {
        if !expanded.insert(node) {
            continue;
        }
        let result = icp(&regression_data(buffer, node), alpha_per_call)?;
        let found = result.intersection.clone();
        calls.push((node, result));
        // push in descending order so lower indices are expanded first
        for v in found.iter().rev() {
            if !expanded.contains(&Target::Var(*v)) {
                stack.push(Target::Var(*v));
            }
        }
        abstraction.extend(found);
    }
    Ok(LinearMisa {
        abstraction,
        calls,
        alpha_per_call,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmdp::{
        make_toy_family, EnvironmentFamily, EnvironmentSpec, FixedAction, LinearDynamics,
        LinearReward, ToyConfig, TOY_TRAIN_ENVS,
    };
    use crate::graph::{Intervention, TemporalCausalGraph};
    use crate::seed;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn set(v: &[usize]) -> BTreeSet<VarId> {
        v.iter().map(|&i| VarId(i)).collect()
    }

    /// y = x1 + noise; x2 = y + env shift + noise, so x2 predicts y well
    /// but its relation to y moves with the environment.
    fn anticausal_envs(n: usize, seed_: u64) -> Vec<EnvData> {
        let mut rng = seed::rng(seed_);
        (0..3)
            .map(|e| {
                let shift = 2.0 * e as f64;
                let mut x = DMatrix::zeros(n, 2);
                let mut y = DVector::zeros(n);
                for i in 0..n {
                    let x1 = rng.sample::<f64, _>(StandardNormal) * (1.0 + e as f64);
                    let yi = x1 + 0.5 * rng.sample::<f64, _>(StandardNormal);
                    x[(i, 0)] = x1;
                    x[(i, 1)] = yi + shift + 0.3 * rng.sample::<f64, _>(StandardNormal);
                    y[i] = yi;
                }
                EnvData {
                    features: x,
                    covariates: DMatrix::zeros(n, 0),
                    target: y,
                }
            })
            .collect()
    }

    /// Straight subset enumeration against the invariance test, used as an
    /// oracle for the intersection.
    fn brute_force(envs: &[EnvData], alpha: f64) -> BTreeSet<VarId> {
        let d = envs[0].features.ncols();
        let mut acc: Option<BTreeSet<VarId>> = None;
        for mask in 0..(1u32 << d) {
            let cols: Vec<usize> = (0..d).filter(|j| mask >> j & 1 == 1).collect();
            let mut groups = Vec::new();
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for e in envs {
                for i in 0..e.target.len() {
                    xs.push(cols.iter().map(|&j| e.features[(i, j)]).collect::<Vec<_>>());
                    ys.push(e.target[i]);
                }
            }
            let design = DMatrix::from_fn(xs.len(), cols.len(), |i, j| xs[i][j]);
            let fit = fit_least_squares(&design, &DVector::from_vec(ys)).unwrap();
            let mut start = 0;
            for e in envs {
                let m = e.target.len();
                groups.push(fit.residuals.rows(start, m).iter().copied().collect());
                start += m;
            }
            if invariance_test(&groups).unwrap() > alpha {
                let s: BTreeSet<VarId> = cols.into_iter().map(VarId).collect();
                acc = Some(match acc {
                    None => s,
                    Some(a) => a.intersection(&s).copied().collect(),
                });
            }
        }
        acc.unwrap_or_default()
    }

    #[test]
    fn picks_the_causal_parent_over_a_better_predictor() {
        let envs = anticausal_envs(300, 3);
        let res = icp(&envs, 0.05).unwrap();
        assert_eq!(res.intersection, set(&[0]));
        assert_eq!(res.intersection, brute_force(&envs, 0.05));
        assert_eq!(res.verdicts.len(), 4);
    }

    #[test]
    fn pure_noise_target_accepts_empty_set() {
        let mut rng = seed::rng(4);
        let envs: Vec<EnvData> = (0..3)
            .map(|e| EnvData {
                features: DMatrix::from_fn(200, 2, |_, _| {
                    rng.sample::<f64, _>(StandardNormal) + e as f64
                }),
                covariates: DMatrix::zeros(200, 0),
                target: DVector::from_fn(200, |_, _| rng.sample::<f64, _>(StandardNormal)),
            })
            .collect();
        let res = icp(&envs, 0.05).unwrap();
        assert!(res.verdicts[0].accepted);
        assert!(res.intersection.is_empty());
        assert!(!res.all_rejected);
    }

    #[test]
    fn rejects_too_many_variables() {
        let envs: Vec<EnvData> = (0..2)
            .map(|_| EnvData {
                features: DMatrix::zeros(40, 16),
                covariates: DMatrix::zeros(40, 0),
                target: DVector::zeros(40),
            })
            .collect();
        assert!(matches!(icp(&envs, 0.05), Err(Error::TooManyVariables { d: 16, .. })));
    }

    #[test]
    fn threshold_equality_is_rejection() {
        let verdict = |p: f64| InvarianceVerdict {
            candidate_set: BTreeSet::new(),
            p_value: p,
            accepted: p > 0.5,
        };
        let res = summarize(0.5, 0, vec![verdict(0.5)]);
        assert!(res.all_rejected);
        assert!(res.intersection.is_empty());
    }

    #[test]
    fn toy_reward_icp_matches_brute_force() {
        let fam = make_toy_family(&ToyConfig::default()).unwrap();
        let buf = fam.collect(&TOY_TRAIN_ENVS, &FixedAction(0), 1000, 5).unwrap();
        let data = regression_data(&buf, Target::Reward);
        let res = icp(&data, 0.05 / 3.0).unwrap();
        assert_eq!(res.intersection, brute_force(&data, 0.05 / 3.0));
        assert_eq!(res.intersection, set(&[0, 1]));
    }

    #[test]
    fn toy_misa_recovers_x1_x2() {
        let fam = make_toy_family(&ToyConfig::default()).unwrap();
        let buf = fam.collect(&TOY_TRAIN_ENVS, &FixedAction(0), 1000, 17).unwrap();
        let out = misa_linear(&buf, 0.05).unwrap();
        assert_eq!(out.abstraction, set(&[0, 1]));
        assert!((out.alpha_per_call - 0.05 / 3.0).abs() < 1e-15);
        // determinism
        assert_eq!(misa_linear(&buf, 0.05).unwrap(), out);
    }

    fn chain_family() -> EnvironmentFamily {
        // x1' = 0.8 x1 + e1, x2' = x1 + e2, x3' = 0.5 x3 + e3; reward on x2
        let g = TemporalCausalGraph::new(vec![vec![0], vec![0], vec![2]], vec![1]).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[0.8, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        let dynamics = LinearDynamics {
            matrices: vec![a],
            noise_mean: vec![0.0; 3],
            noise_std: vec![0.5; 3],
        };
        let reward = LinearReward {
            weights: vec![0.0, 1.0, 0.0],
            noise_std: 0.1,
        };
        // ICP can only reject the empty set for r and x2 if the law of x1
        // moves, so two environments shift the noise of x1.
        let envs = vec![
            EnvironmentSpec::new(0, vec![]),
            EnvironmentSpec::new(1, vec![Intervention::soft(0, 1.0, 1.0).unwrap()]),
            EnvironmentSpec::new(
                2,
                vec![
                    Intervention::soft(0, -1.0, 1.5).unwrap(),
                    Intervention::hard(2, 2.0),
                ],
            ),
        ];
        EnvironmentFamily::new(g, dynamics, reward, envs, 0.9).unwrap()
    }

    #[test]
    fn chain_misa_equals_ancestors() {
        let fam = chain_family();
        let buf = fam.collect(&[0, 1, 2], &FixedAction(0), 2000, 3).unwrap();
        let out = misa_linear(&buf, 0.05).unwrap();
        assert_eq!(out.abstraction, fam.graph.ancestors());
        assert_eq!(out.abstraction, set(&[0, 1]));
    }

    #[test]
    fn parentless_reward_gives_empty_abstraction() {
        let g = TemporalCausalGraph::new(vec![vec![0], vec![1]], vec![]).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        let fam = EnvironmentFamily::new(
            g,
            LinearDynamics {
                matrices: vec![a],
                noise_mean: vec![0.0; 2],
                noise_std: vec![1.0; 2],
            },
            LinearReward {
                weights: vec![0.0; 2],
                noise_std: 1.0,
            },
            vec![
                EnvironmentSpec::new(0, vec![]),
                EnvironmentSpec::new(1, vec![Intervention::soft(0, 3.0, 1.0).unwrap()]),
                EnvironmentSpec::new(2, vec![Intervention::hard(1, 4.0)]),
            ],
            0.9,
        )
        .unwrap();
        let buf = fam.collect(&[0, 1, 2], &FixedAction(0), 500, 1).unwrap();
        let out = misa_linear(&buf, 0.05).unwrap();
        assert!(out.abstraction.is_empty());
        assert_eq!(out.calls.len(), 1);
    }

    #[test]
    fn needs_two_environments() {
        let fam = make_toy_family(&ToyConfig::default()).unwrap();
        let buf = fam.collect(&[0], &FixedAction(0), 100, 0).unwrap();
        assert!(misa_linear(&buf, 0.05).is_err());
    }
}

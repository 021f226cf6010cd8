use std::collections::BTreeSet;

use statrs::function::erf::erfc;

use super::tabular::{AbstractionMap, TabularMDP};
use super::transport::DiscreteMetric;
use crate::blockmdp::EnvironmentFamily;
use crate::error::{Error, Result};
use crate::graph::{InterventionKind, VarId};

/// Largest grid (in joint states) accepted by [`tabular_from_family`].
pub const MAX_GRID_STATES: usize = 1_000_000;

/// Gaussian noise is truncated at this many standard deviations.
pub const TRUNCATION_SDS: f64 = 3.0;

/// Per-variable grid of representative values. Each value owns the
/// interval between the midpoints to its neighbours; the outer cells are
/// unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    levels: Vec<f64>,
}

impl Grid {
    pub fn new(mut levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("grid needs finite levels".into()));
        }
        levels.sort_by(f64::total_cmp);
        if levels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("grid levels must be distinct".into()));
        }
        Ok(Self { levels })
    }

    /// `{-1, +1}` with the cut at 0.
    pub fn two_level() -> Self {
        Self {
            levels: vec![-1.0, 1.0],
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the cell containing `x` (ties go to the upper cell).
    pub fn snap(&self, x: f64) -> usize {
        self.levels
            .windows(2)
            .take_while(|w| x >= 0.5 * (w[0] + w[1]))
            .count()
    }

    /// Probability of each cell under `N(mean, sd^2)` truncated to
    /// `mean +- 3 sd` and renormalized.
    pub fn cell_masses(&self, mean: f64, sd: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        if !(sd > 0.0) {
            out[self.snap(mean)] = 1.0;
            return out;
        }
        let cdf = |z: f64| 0.5 * erfc(-z / std::f64::consts::SQRT_2);
        let lo = mean - TRUNCATION_SDS * sd;
        let hi = mean + TRUNCATION_SDS * sd;
        let norm = cdf(TRUNCATION_SDS) - cdf(-TRUNCATION_SDS);
        for (g, o) in out.iter_mut().enumerate() {
            let left = if g == 0 { f64::NEG_INFINITY } else { 0.5 * (self.levels[g - 1] + self.levels[g]) };
            let right = if g + 1 == self.len() { f64::INFINITY } else { 0.5 * (self.levels[g] + self.levels[g + 1]) };
            let (a, b) = (left.max(lo), right.min(hi));
            if b > a {
                *o = (cdf((b - mean) / sd) - cdf((a - mean) / sd)) / norm;
            }
        }
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= total);
        out
    }
}

/// Grid coordinates of joint state `index` (variable 0 varies fastest).
pub fn decode_state(index: usize, k: usize, levels: usize) -> Vec<usize> {
    let mut rest = index;
    (0..k)
        .map(|_| {
            let g = rest % levels;
            rest /= levels;
            g
        })
        .collect()
}

fn grid_size(k: usize, levels: usize) -> Result<usize> {
    let mut n: usize = 1;
    for _ in 0..k {
        n = n.checked_mul(levels).filter(|n| *n <= MAX_GRID_STATES).ok_or(Error::GridTooLarge(
            (levels as f64).powi(k as i32).min(usize::MAX as f64) as usize,
        ))?;
    }
    Ok(n)
}

/// Exact tabular MDP of environment `env_id` on the product grid.
///
/// Each next-state variable independently takes the cell masses of its
/// truncated Gaussian; a do-intervention is a point mass on the cell of its
/// value. Rewards are the expected linear reward at the grid point.
pub fn tabular_from_family(fam: &EnvironmentFamily, env_id: usize, grid: &Grid) -> Result<TabularMDP> {
    let env = fam.env(env_id)?;
    let k = fam.k();
    let na = fam.n_actions();
    let levels = grid.len();
    let n = grid_size(k, levels)?;
    let mut p = vec![0.0; n * na * n];
    let mut r = vec![0.0; n * na];
    let mut x = vec![0.0; k];
    for s in 0..n {
        for (xi, g) in x.iter_mut().zip(decode_state(s, k, levels)) {
            *xi = grid.levels[g];
        }
        for a in 0..na {
            r[s * na + a] = fam.expected_reward(&x);
            let marginals: Vec<Vec<f64>> = (0..k)
                .map(|i| match env.intervention_on(i) {
                    Some(InterventionKind::Do { value }) => grid.cell_masses(*value, 0.0),
                    _ => {
                        let (mu, sd) = fam.noise_params(env, i).expect("not forced");
                        grid.cell_masses(fam.drift(&x, a, i) + mu, sd)
                    }
                })
                .collect();
            // product over variables, variable 0 fastest
            let mut joint = vec![1.0];
            for marg in &marginals {
                let mut next = Vec::with_capacity(joint.len() * levels);
                for &m in marg {
                    next.extend(joint.iter().map(|j| j * m));
                }
                joint = next;
            }
            p[(s * na + a) * n..(s * na + a + 1) * n].copy_from_slice(&joint);
        }
    }
    TabularMDP::new(n, na, p, r, fam.gamma)
}

/// `phi_S`: joint grid state to its coordinates on `subset` (earlier
/// variables vary fastest).
pub fn projection_map(k: usize, grid: &Grid, subset: &BTreeSet<VarId>) -> Result<AbstractionMap> {
    let levels = grid.len();
    let n = grid_size(k, levels)?;
    if subset.iter().any(|v| v.index() >= k) {
        return Err(Error::InvalidInput("subset variable out of range".into()));
    }
    let n_abstract = levels.pow(subset.len() as u32);
    let phi = (0..n)
        .map(|s| {
            let coords = decode_state(s, k, levels);
            subset.iter().rev().fold(0, |acc, v| acc * levels + coords[v.index()])
        })
        .collect();
    AbstractionMap::new(phi, n_abstract)
}

/// Euclidean metric between the cell centres of the projected grid.
pub fn projection_metric(grid: &Grid, subset: &BTreeSet<VarId>) -> Result<DiscreteMetric> {
    let levels = grid.len();
    let d = subset.len();
    let n = levels.pow(d as u32);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|z| decode_state(z, d, levels).into_iter().map(|g| grid.levels[g]).collect())
        .collect();
    DiscreteMetric::euclidean(&points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::tabular::is_bisimulation;
    use crate::blockmdp::{make_toy_family, ToyConfig};

    #[test]
    fn cell_masses_sum_to_one() {
        let g = Grid::new(vec![-2.0, 0.0, 1.0, 3.0]).unwrap();
        let m = g.cell_masses(0.4, 0.7);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(m.iter().all(|v| *v > 0.0));
        // truncation: mass beyond 3 sd is dropped
        let m = g.cell_masses(-5.0, 0.5);
        assert_eq!(m, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.snap(0.5), 2);
        assert_eq!(g.snap(10.0), 3);
    }

    #[test]
    fn symmetric_noise_splits_evenly() {
        let m = Grid::two_level().cell_masses(0.0, 1.0);
        assert!((m[0] - 0.5).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn toy_ancestors_are_a_bisimulation_in_every_env() {
        let fam = make_toy_family(&ToyConfig::default()).unwrap();
        let grid = Grid::two_level();
        let phi = projection_map(3, &grid, &fam.graph.ancestors()).unwrap();
        assert_eq!(phi.n_abstract(), 4);
        for env in fam.env_ids() {
            let m = tabular_from_family(&fam, env, &grid).unwrap();
            assert_eq!(m.n_states(), 8);
            assert!(is_bisimulation(&m, &phi, 1e-9).is_none(), "env {env}");
        }
        // dropping x2 breaks it: the reward reads x2
        let only_x1: BTreeSet<VarId> = [VarId(0)].into();
        let phi1 = projection_map(3, &grid, &only_x1).unwrap();
        let m = tabular_from_family(&fam, 0, &grid).unwrap();
        assert!(is_bisimulation(&m, &phi1, 1e-9).is_some());
    }

    #[test]
    fn projection_coordinates() {
        let grid = Grid::new(vec![0.0, 1.0, 2.0]).unwrap();
        let sub: BTreeSet<VarId> = [VarId(0), VarId(2)].into();
        let phi = projection_map(3, &grid, &sub).unwrap();
        // state (2, 1, 1) -> (2, 1) -> 2 + 3 * 1
        assert_eq!(phi.map(2 + 3 + 9), 5);
        let metric = projection_metric(&grid, &sub).unwrap();
        assert!((metric.dist(0, 8) - 8f64.sqrt()).abs() < 1e-12);
        let empty = projection_map(3, &grid, &BTreeSet::new()).unwrap();
        assert_eq!(empty.n_abstract(), 1);
    }

    #[test]
    fn grid_size_limit() {
        let grid = Grid::new((0..10).map(f64::from).collect()).unwrap();
        assert!(matches!(grid_size(7, grid.len()), Err(Error::GridTooLarge(_))));
        assert_eq!(grid_size(6, grid.len()).unwrap(), 1_000_000);
    }
}

//! One-step temporal causal graphs over observation variables.
//!
//! Edges only run from time `t` to time `t + 1` (or into the reward at `t`),
//! so the unrolled two-slice graph is acyclic regardless of the parent sets.
//! The reward is a sink: it has parents but is never a parent itself.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of an observation variable, `0..k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarId(pub usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0 + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalCausalGraph {
    k: usize,
    parents: Vec<BTreeSet<VarId>>,
    reward_parents: BTreeSet<VarId>,
}

impl TemporalCausalGraph {
    /// `parents[i]` lists the time-`t` parents of variable `i` at `t + 1`.
    pub fn new(parents: Vec<Vec<usize>>, reward_parents: Vec<usize>) -> Result<Self> {
        let k = parents.len();
        let check = |j: usize, what: &str| {
            if j >= k {
                Err(Error::InvalidGraph(format!(
                    "{what} index {j} out of range for {k} variables"
                )))
            } else {
                Ok(VarId(j))
            }
        };
        let parents = parents
            .iter()
            .map(|ps| ps.iter().map(|&j| check(j, "parent")).collect())
            .collect::<Result<Vec<BTreeSet<VarId>>>>()?;
        let reward_parents = reward_parents
            .iter()
            .map(|&j| check(j, "reward parent"))
            .collect::<Result<BTreeSet<VarId>>>()?;
        Ok(Self {
            k,
            parents,
            reward_parents,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn parents(&self, v: VarId) -> &BTreeSet<VarId> {
        &self.parents[v.0]
    }

    pub fn reward_parents(&self) -> &BTreeSet<VarId> {
        &self.reward_parents
    }

    pub fn vars(&self) -> impl Iterator<Item = VarId> {
        (0..self.k).map(VarId)
    }

    /// Returns a copy with the edge `from -> to'` added.
    pub fn with_edge(&self, from: VarId, to: VarId) -> Result<Self> {
        if from.0 >= self.k || to.0 >= self.k {
            return Err(Error::InvalidGraph("edge endpoint out of range".into()));
        }
        let mut g = self.clone();
        g.parents[to.0].insert(from);
        Ok(g)
    }

    /// Closure of the reward parents under the parent relation, `AN(R)`.
    pub fn ancestors(&self) -> BTreeSet<VarId> {
        let mut seen: BTreeSet<VarId> = BTreeSet::new();
        let mut stack: Vec<VarId> = self.reward_parents.iter().copied().collect();
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                stack.extend(self.parents[v.0].iter().copied().filter(|p| !seen.contains(p)));
            }
        }
        seen
    }

    pub fn validate_interventions(&self, interventions: &[Intervention]) -> InterventionCheck {
        let an = self.ancestors();
        let violations: BTreeSet<VarId> = interventions
            .iter()
            .map(|i| i.var)
            .filter(|v| an.contains(v))
            .collect();
        InterventionCheck {
            violations: violations.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InterventionKind {
    /// Force the variable to `value`.
    Do { value: f64 },
    /// Replace the noise `eps` by `noise_shift + noise_scale * eps`.
    Soft { noise_shift: f64, noise_scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub var: VarId,
    pub kind: InterventionKind,
}

impl Intervention {
    pub fn hard(var: usize, value: f64) -> Self {
        Self {
            var: VarId(var),
            kind: InterventionKind::Do { value },
        }
    }

    pub fn soft(var: usize, noise_shift: f64, noise_scale: f64) -> Result<Self> {
        if !(noise_scale > 0.0) || !noise_scale.is_finite() || !noise_shift.is_finite() {
            return Err(Error::Misconfigured(format!(
                "soft intervention on x{} needs a finite shift and a positive scale",
                var + 1
            )));
        }
        Ok(Self {
            var: VarId(var),
            kind: InterventionKind::Soft {
                noise_shift,
                noise_scale,
            },
        })
    }

    pub fn is_hard(&self) -> bool {
        matches!(self.kind, InterventionKind::Do { .. })
    }
}

/// Outcome of [`TemporalCausalGraph::validate_interventions`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InterventionCheck {
    pub violations: Vec<VarId>,
}

impl InterventionCheck {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[usize]) -> BTreeSet<VarId> {
        v.iter().map(|&i| VarId(i)).collect()
    }

    /// x1' <- x1, x2' <- x1, x2, reward <- x2, plus an unrelated x3.
    fn fig2() -> TemporalCausalGraph {
        TemporalCausalGraph::new(vec![vec![0], vec![0, 1], vec![2]], vec![1]).unwrap()
    }

    #[test]
    fn reward_parent_pulls_in_its_dynamics_parent() {
        assert_eq!(fig2().ancestors(), ids(&[0, 1]));
    }

    #[test]
    fn no_reward_parents_means_no_ancestors() {
        let g = TemporalCausalGraph::new(vec![vec![0], vec![0, 1]], vec![]).unwrap();
        assert!(g.ancestors().is_empty());
    }

    #[test]
    fn chain_closure() {
        let g = TemporalCausalGraph::new(vec![vec![], vec![0], vec![1]], vec![2]).unwrap();
        assert_eq!(g.ancestors(), ids(&[0, 1, 2]));
    }

    #[test]
    fn interventions_outside_ancestors_are_ok() {
        let g = fig2();
        assert!(g.validate_interventions(&[Intervention::hard(2, 1.0)]).is_ok());
        assert!(g.validate_interventions(&[]).is_ok());
        let bad = g.validate_interventions(&[Intervention::soft(1, 1.0, 1.0).unwrap()]);
        assert_eq!(bad.violations, vec![VarId(1)]);
    }

    #[test]
    fn rejects_out_of_range_parents() {
        assert!(TemporalCausalGraph::new(vec![vec![3]], vec![]).is_err());
        assert!(TemporalCausalGraph::new(vec![vec![0]], vec![1]).is_err());
    }

    #[test]
    fn soft_scale_must_be_positive() {
        assert!(Intervention::soft(0, 0.0, 0.0).is_err());
        assert!(Intervention::soft(0, 0.0, -1.0).is_err());
    }

    fn arb_graph() -> impl Strategy<Value = TemporalCausalGraph> {
        (1usize..7).prop_flat_map(|k| {
            (
                proptest::collection::vec(proptest::collection::vec(0..k, 0..k), k),
                proptest::collection::vec(0..k, 0..k),
                Just(k),
            )
                .prop_map(|(p, r, _)| TemporalCausalGraph::new(p, r).unwrap())
        })
    }

    proptest! {
        #[test]
        fn ancestors_closed_under_parents(g in arb_graph()) {
            let an = g.ancestors();
            for v in &an {
                for p in g.parents(*v) {
                    prop_assert!(an.contains(p));
                }
            }
            prop_assert!(g.reward_parents().is_subset(&an));
        }

        #[test]
        fn adding_an_edge_never_shrinks_ancestors(g in arb_graph(), a in 0usize..7, b in 0usize..7) {
            let k = g.k();
            let g2 = g.with_edge(VarId(a % k), VarId(b % k)).unwrap();
            prop_assert!(g.ancestors().is_subset(&g2.ancestors()));
        }

        #[test]
        fn ok_validation_means_disjoint(g in arb_graph(), vars in proptest::collection::vec(0usize..7, 0..4)) {
            let k = g.k();
            let iv: Vec<Intervention> = vars.iter().map(|&v| Intervention::hard(v % k, 0.0)).collect();
            let check = g.validate_interventions(&iv);
            let an = g.ancestors();
            if check.is_ok() {
                prop_assert!(iv.iter().all(|i| !an.contains(&i.var)));
            } else {
                prop_assert!(check.violations.iter().all(|v| an.contains(v)));
            }
        }
    }
}

use std::fmt;

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Structural tolerance for probability vectors.
pub const PROB_TOL: f64 = 1e-12;

/// Finite MDP with expected rewards `R(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    /// `p[(s * n_actions + a) * n_states + s']`
    p: Vec<f64>,
    /// `r[s * n_actions + a]`
    r: Vec<f64>,
    pub gamma: f64,
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        p: Vec<f64>,
        r: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidInput("MDP needs at least one state and action".into()));
        }
        if p.len() != n_states * n_actions * n_states || r.len() != n_states * n_actions {
            return Err(Error::InvalidInput("transition or reward table has the wrong size".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidInput(format!("gamma {gamma} not in (0, 1)")));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reward table".into()));
        }
        for (row, chunk) in p.chunks(n_states).enumerate() {
            let total: f64 = chunk.iter().sum();
            if chunk.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e3 * PROB_TOL {
                return Err(Error::InvalidInput(format!(
                    "transition row (s={}, a={}) is not a probability vector (sum {total})",
                    row / n_actions,
                    row % n_actions
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            p,
            r,
            gamma,
        })
    }

    /// Builds from nested tables `p[s][a][s']` and `r[s][a]`.
    pub fn from_tables(p: &[Vec<Vec<f64>>], r: &[Vec<f64>], gamma: f64) -> Result<Self> {
        let n = p.len();
        let na = p.first().map_or(0, Vec::len);
        let flat_p: Vec<f64> = p.iter().flatten().flatten().copied().collect();
        let flat_r: Vec<f64> = r.iter().flatten().copied().collect();
        Self::new(n, na, flat_p, flat_r, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.p[(s * self.n_actions + a) * self.n_states + s_next]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.p[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.n_actions + a]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.r.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn with_rewards(&self, r: Vec<f64>) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, self.p.clone(), r, self.gamma)
    }

    pub fn rewards(&self) -> &[f64] {
        &self.r
    }

    pub fn transitions(&self) -> &[f64] {
        &self.p
    }

    /// `P(G | s, a)` for every block `G` of `phi`.
    pub fn block_probs(&self, phi: &AbstractionMap, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; phi.n_abstract()];
        for (t, p) in self.row(s, a).iter().enumerate() {
            out[phi.map(t)] += p;
        }
        out
    }

    /// Random MDP with dense transition rows and rewards in `[-1, 1]`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            p.extend(random_simplex(n_states, rng));
        }
        let r = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::new(n_states, n_actions, p, r, gamma)
    }
}

pub(crate) fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random_range(f64::EPSILON..1.0).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Surjective map from states to abstract states `0..n_abstract`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AbstractionMap {
    phi: Vec<usize>,
    n_abstract: usize,
}

impl AbstractionMap {
    pub fn new(phi: Vec<usize>, n_abstract: usize) -> Result<Self> {
        let mut hit = vec![false; n_abstract];
        for &z in &phi {
            if z >= n_abstract {
                return Err(Error::InvalidInput(format!("abstract id {z} >= {n_abstract}")));
            }
            hit[z] = true;
        }
        if let Some(z) = hit.iter().position(|h| !h) {
            return Err(Error::InvalidInput(format!("abstract state {z} has no preimage")));
        }
        Ok(Self { phi, n_abstract })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            phi: (0..n).collect(),
            n_abstract: n,
        }
    }

    /// Relabels abstract states in order of first appearance.
    pub fn canonical(&self) -> Self {
        let mut relabel = vec![usize::MAX; self.n_abstract];
        let mut next = 0;
        let phi = self
            .phi
            .iter()
            .map(|&z| {
                if relabel[z] == usize::MAX {
                    relabel[z] = next;
                    next += 1;
                }
                relabel[z]
            })
            .collect();
        Self {
            phi,
            n_abstract: self.n_abstract,
        }
    }

    pub fn map(&self, s: usize) -> usize {
        self.phi[s]
    }

    pub fn n_states(&self) -> usize {
        self.phi.len()
    }

    pub fn n_abstract(&self) -> usize {
        self.n_abstract
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.phi
    }

    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.n_abstract];
        for (s, &z) in self.phi.iter().enumerate() {
            blocks[z].push(s);
        }
        blocks
    }

    pub fn representative(&self, z: usize) -> usize {
        self.phi.iter().position(|&w| w == z).expect("surjective")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ViolationKind {
    Reward { difference: f64 },
    Transition { block: usize, difference: f64 },
}

/// Two equivalent states that an action tells apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BisimViolation {
    pub s1: usize,
    pub s2: usize,
    pub action: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for BisimViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ViolationKind::Reward { difference } => write!(
                f,
                "states {} and {} differ in reward by {difference:e} under action {}",
                self.s1, self.s2, self.action
            ),
            ViolationKind::Transition { block, difference } => write!(
                f,
                "states {} and {} differ by {difference:e} in P(block {block}) under action {}",
                self.s1, self.s2, self.action
            ),
        }
    }
}

/// Checks that `phi`'s kernel is a bisimulation of `m`: equivalent states
/// have rewards within `tol` and block transition probabilities within `tol`
/// for every action. Returns the first violation found.
pub fn is_bisimulation(m: &TabularMDP, phi: &AbstractionMap, tol: f64) -> Option<BisimViolation> {
    assert_eq!(m.n_states(), phi.n_states(), "abstraction must cover every state");
    let blocks = phi.blocks();
    for a in 0..m.n_actions() {
        let probs: Vec<Vec<f64>> = (0..m.n_states()).map(|s| m.block_probs(phi, s, a)).collect();
        for block in &blocks {
            for (i, &s1) in block.iter().enumerate() {
                for &s2 in &block[i + 1..] {
                    let dr = (m.reward(s1, a) - m.reward(s2, a)).abs();
                    if !(dr <= tol) {
                        return Some(BisimViolation {
                            s1,
                            s2,
                            action: a,
                            kind: ViolationKind::Reward { difference: dr },
                        });
                    }
                    for g in 0..phi.n_abstract() {
                        let dp = (probs[s1][g] - probs[s2][g]).abs();
                        if !(dp <= tol) {
                            return Some(BisimViolation {
                                s1,
                                s2,
                                action: a,
                                kind: ViolationKind::Transition {
                                    block: g,
                                    difference: dp,
                                },
                            });
                        }
                    }
                }
            }
        }
    }
    None
}

/// Quotient MDP over the blocks of `phi`, built from block representatives.
pub fn quotient(m: &TabularMDP, phi: &AbstractionMap, tol: f64) -> Result<TabularMDP> {
    if let Some(v) = is_bisimulation(m, phi, tol) {
        return Err(Error::NotBisimulation(v));
    }
    let nz = phi.n_abstract();
    let na = m.n_actions();
    let mut p = Vec::with_capacity(nz * na * nz);
    let mut r = Vec::with_capacity(nz * na);
    for z in 0..nz {
        let s = phi.representative(z);
        for a in 0..na {
            p.extend(m.block_probs(phi, s, a));
            r.push(m.reward(s, a));
        }
    }
    TabularMDP::new(nz, na, p, r, m.gamma)
}

/// `copies` labelled copies of every state of `m` with identical block
/// dynamics, plus the map collapsing copies. State `(s, c)` has index
/// `s * copies + c`. Mass moving to `s'` is split across its copies with
/// weights depending on the source copy, so copies are not exchangeable
/// but every block probability matches `m`.
pub fn duplicate_states(m: &TabularMDP, copies: usize) -> Result<(TabularMDP, AbstractionMap)> {
    if copies == 0 {
        return Err(Error::InvalidInput("copies must be >= 1".into()));
    }
    let n = m.n_states();
    let na = m.n_actions();
    let big = n * copies;
    let weight = |c: usize, c2: usize| (1 + (c + c2) % copies) as f64;
    let norm: f64 = (0..copies).map(|c2| weight(0, c2)).sum();
    let mut p = vec![0.0; big * na * big];
    let mut r = vec![0.0; big * na];
    for s in 0..n {
        for c in 0..copies {
            let i = s * copies + c;
            for a in 0..na {
                r[i * na + a] = m.reward(s, a);
                for t in 0..n {
                    let mass = m.prob(s, a, t);
                    for c2 in 0..copies {
                        p[(i * na + a) * big + t * copies + c2] = mass * weight(c, c2) / norm;
                    }
                }
            }
        }
    }
    let phi = AbstractionMap::new((0..big).map(|i| i / copies).collect(), n)?;
    Ok((TabularMDP::new(big, na, p, r, m.gamma)?, phi))
}

/// Random refinement of `m`: abstract state `z` is split into `copies[z]`
/// states; each refined row spreads the mass toward `z'` over its copies
/// with random weights. Rewards are copied. The returned map is a
/// bisimulation by construction.
pub fn random_refinement(
    m: &TabularMDP,
    copies: &[usize],
    rng: &mut Rng,
) -> Result<(TabularMDP, AbstractionMap)> {
    let n = m.n_states();
    if copies.len() != n || copies.contains(&0) {
        return Err(Error::InvalidInput("one positive copy count per state required".into()));
    }
    let na = m.n_actions();
    let mut owner = Vec::new();
    let mut offsets = Vec::with_capacity(n);
    for (z, &c) in copies.iter().enumerate() {
        offsets.push(owner.len());
        owner.extend(std::iter::repeat_n(z, c));
    }
    let big = owner.len();
    let mut p = vec![0.0; big * na * big];
    let mut r = vec![0.0; big * na];
    for (i, &z) in owner.iter().enumerate() {
        for a in 0..na {
            r[i * na + a] = m.reward(z, a);
            for t in 0..n {
                let split = random_simplex(copies[t], rng);
                for (c2, w) in split.into_iter().enumerate() {
                    p[(i * na + a) * big + offsets[t] + c2] = m.prob(z, a, t) * w;
                }
            }
        }
    }
    let phi = AbstractionMap::new(owner, n)?;
    Ok((TabularMDP::new(big, na, p, r, m.gamma)?, phi))
}

/// Stochastic policy table `pi(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::InvalidInput("policy table has the wrong size".into()));
        }
        for row in probs.chunks(n_actions) {
            let total: f64 = row.iter().sum();
            if row.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput("policy row is not a distribution".into()));
            }
        }
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidInput(format!("action {a} out of range")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_actions, probs })
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let probs = (0..n_states).flat_map(|_| random_simplex(n_actions, rng)).collect();
        Self { n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// Policy on ground states that plays `self(phi(s))`.
    pub fn lift(&self, phi: &AbstractionMap) -> Self {
        let probs = (0..phi.n_states())
            .flat_map(|s| {
                let z = phi.map(s);
                self.probs[z * self.n_actions..(z + 1) * self.n_actions].to_vec()
            })
            .collect();
        Self {
            n_actions: self.n_actions,
            probs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn two_state(r0: f64, r1: f64) -> TabularMDP {
        TabularMDP::from_tables(
            &[vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            &[vec![r0], vec![r1]],
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn identity_partition_is_always_a_bisimulation() {
        let mut rng = seed::rng(0);
        for _ in 0..10 {
            let m = TabularMDP::random(5, 2, 0.9, &mut rng).unwrap();
            assert!(is_bisimulation(&m, &AbstractionMap::identity(5), 0.0).is_none());
            let q = quotient(&m, &AbstractionMap::identity(5), 0.0).unwrap();
            assert_eq!(q, m);
        }
    }

    #[test]
    fn merging_different_rewards_fails_on_reward() {
        let m = two_state(0.0, 1.0);
        let phi = AbstractionMap::new(vec![0, 0], 1).unwrap();
        let v = is_bisimulation(&m, &phi, 1e-9).unwrap();
        assert!(matches!(v.kind, ViolationKind::Reward { difference } if difference == 1.0));
        assert!(matches!(quotient(&m, &phi, 1e-9), Err(Error::NotBisimulation(_))));
    }

    #[test]
    fn identical_states_collapse_to_one() {
        let m = two_state(0.3, 0.3);
        let phi = AbstractionMap::new(vec![0, 0], 1).unwrap();
        let q = quotient(&m, &phi, 1e-12).unwrap();
        assert_eq!(q.n_states(), 1);
        assert_eq!(q.prob(0, 0, 0), 1.0);
        assert_eq!(q.reward(0, 0), 0.3);
    }

    #[test]
    fn duplicated_states_quotient_back() {
        let mut rng = seed::rng(3);
        let m = TabularMDP::random(3, 2, 0.8, &mut rng).unwrap();
        let (one, id) = duplicate_states(&m, 1).unwrap();
        assert_eq!(one, m);
        assert_eq!(id, AbstractionMap::identity(3));
        for copies in [2, 3] {
            let (big, phi) = duplicate_states(&m, copies).unwrap();
            assert_eq!(big.n_states(), 3 * copies);
            assert!(is_bisimulation(&big, &phi, 1e-12).is_none());
            let q = quotient(&big, &phi.canonical(), 1e-12).unwrap();
            for s in 0..3 {
                for a in 0..2 {
                    assert_eq!(q.reward(s, a), m.reward(s, a));
                    for t in 0..3 {
                        assert!((q.prob(s, a, t) - m.prob(s, a, t)).abs() < 1e-12);
                    }
                }
            }
        }
        // the copies really are different states
        let (big, _) = duplicate_states(&m, 2).unwrap();
        assert_ne!(big.row(0, 0), big.row(1, 0));
    }

    #[test]
    fn random_refinements_are_bisimulations() {
        let mut rng = seed::rng(5);
        let m = TabularMDP::random(4, 2, 0.9, &mut rng).unwrap();
        let (big, phi) = random_refinement(&m, &[1, 2, 3, 1], &mut rng).unwrap();
        assert_eq!(big.n_states(), 7);
        assert!(is_bisimulation(&big, &phi, 1e-12).is_none());
    }

    #[test]
    fn map_must_be_surjective() {
        assert!(AbstractionMap::new(vec![0, 0, 2], 3).is_err());
        assert!(AbstractionMap::new(vec![0, 3], 2).is_err());
        let phi = AbstractionMap::new(vec![2, 0, 2, 1], 3).unwrap().canonical();
        assert_eq!(phi.as_slice(), &[0, 1, 0, 2]);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        assert!(TabularMDP::from_tables(&[vec![vec![0.5, 0.4]], vec![vec![0.5, 0.5]]], &[vec![0.0], vec![0.0]], 0.9).is_err());
        assert!(TabularMDP::from_tables(&[vec![vec![1.0]]], &[vec![0.0]], 1.0).is_err());
    }
}

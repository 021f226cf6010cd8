use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use super::tabular::{TabularMDP, TabularPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValues {
    pub v: Vec<f64>,
    /// `q[s * n_actions + a]`
    pub q: Vec<f64>,
    pub iterations: usize,
}

impl PolicyValues {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * (self.q.len() / self.v.len()) + a]
    }
}

fn check_policy(m: &TabularMDP, pi: &TabularPolicy) -> Result<()> {
    if pi.n_states() != m.n_states() || pi.n_actions() != m.n_actions() {
        return Err(Error::InvalidInput(format!(
            "policy is {}x{}, MDP is {}x{}",
            pi.n_states(),
            pi.n_actions(),
            m.n_states(),
            m.n_actions()
        )));
    }
    Ok(())
}

/// Policy-induced state chain `P_pi(s, s')` and reward `R_pi(s)`.
pub fn policy_chain(m: &TabularMDP, pi: &TabularPolicy) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_policy(m, pi)?;
    let n = m.n_states();
    let mut p = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);
    for s in 0..n {
        for a in 0..m.n_actions() {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            r[s] += w * m.reward(s, a);
            for (t, pt) in m.row(s, a).iter().enumerate() {
                p[(s, t)] += w * pt;
            }
        }
    }
    Ok((p, r))
}

/// Policy evaluation by iterating the Bellman operator until `V` is within
/// `tol` of the fixed point in sup norm.
///
/// The iteration count is capped by the contraction bound
/// `ceil(log(tol (1 - gamma) / R_max) / log gamma)`; the loop also stops
/// early once successive iterates agree to `tol (1 - gamma) / gamma`.
pub fn value_iteration(m: &TabularMDP, pi: &TabularPolicy, tol: f64) -> Result<PolicyValues> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let (p, r) = policy_chain(m, pi)?;
    let g = m.gamma;
    let rmax = m.max_abs_reward();
    let target = tol * (1.0 - g);
    let cap = if rmax > target {
        ((target / rmax).ln() / g.ln()).ceil() as usize
    } else {
        0
    };
    let mut v = DVector::zeros(m.n_states());
    let mut iterations = 0;
    while iterations < cap {
        let next = &r + g * (&p * &v);
        let delta = (&next - &v).amax();
        v = next;
        iterations += 1;
        if delta * g <= target {
            break;
        }
    }
    let v: Vec<f64> = v.iter().copied().collect();
    let mut q = Vec::with_capacity(m.n_states() * m.n_actions());
    for s in 0..m.n_states() {
        for a in 0..m.n_actions() {
            let ev: f64 = m.row(s, a).iter().zip(&v).map(|(pt, vt)| pt * vt).sum();
            q.push(m.reward(s, a) + g * ev);
        }
    }
    Ok(PolicyValues { v, q, iterations })
}

/// Restart mixture: with probability `prob` each step the chain jumps to a
/// state drawn from `dist`.
#[derive(Debug, Clone, PartialEq)]
pub struct Restart {
    pub prob: f64,
    pub dist: Vec<f64>,
}

/// Transition matrix of the chain actually run for stationary statistics.
pub fn behaviour_chain(
    m: &TabularMDP,
    pi: &TabularPolicy,
    restart: Option<&Restart>,
) -> Result<DMatrix<f64>> {
    let (mut p, _) = policy_chain(m, pi)?;
    if let Some(rs) = restart {
        let n = m.n_states();
        let total: f64 = rs.dist.iter().sum();
        if rs.dist.len() != n
            || rs.dist.iter().any(|v| !(*v >= 0.0))
            || (total - 1.0).abs() > 1e-9
            || !(0.0..=1.0).contains(&rs.prob)
        {
            return Err(Error::InvalidInput("restart distribution is invalid".into()));
        }
        for s in 0..n {
            for t in 0..n {
                p[(s, t)] = (1.0 - rs.prob) * p[(s, t)] + rs.prob * rs.dist[t];
            }
        }
    }
    Ok(p)
}

/// Number of closed communicating classes of the chain `p`.
pub fn closed_classes(p: &DMatrix<f64>) -> usize {
    let n = p.nrows();
    let mut g = DiGraph::<(), ()>::with_capacity(n, n * n);
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for s in 0..n {
        for t in 0..n {
            if p[(s, t)] > 0.0 {
                g.add_edge(nodes[s], nodes[t], ());
            }
        }
    }
    let sccs = tarjan_scc(&g);
    let mut comp = vec![0; n];
    for (c, members) in sccs.iter().enumerate() {
        for node in members {
            comp[node.index()] = c;
        }
    }
    sccs.iter()
        .enumerate()
        .filter(|(c, members)| {
            members.iter().all(|node| {
                let s = node.index();
                (0..n).all(|t| p[(s, t)] == 0.0 || comp[t] == *c)
            })
        })
        .count()
}

/// Stationary distribution of the chain induced by `pi` (optionally mixed
/// with a restart distribution).
///
/// Errors with [`Error::ReducibleChain`] if the chain has more than one
/// closed class, since the stationary law is then not unique.
pub fn stationary_distribution(
    m: &TabularMDP,
    pi: &TabularPolicy,
    restart: Option<&Restart>,
) -> Result<Vec<f64>> {
    let p = behaviour_chain(m, pi, restart)?;
    stationary_of_chain(&p)
}

pub fn stationary_of_chain(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = p.nrows();
    let closed = closed_classes(p);
    if closed != 1 {
        return Err(Error::ReducibleChain(closed));
    }
    // (I - P^T) pi = 0 with the last equation replaced by sum(pi) = 1
    let mut a = DMatrix::identity(n, n) - p.transpose();
    a.row_mut(n - 1).fill(1.0);
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NonFinite("singular stationary system".into()))?;
    let mut pi: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::NonFinite("stationary distribution".into()));
    }
    pi.iter_mut().for_each(|v| *v /= total);
    Ok(pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn value_iteration_matches_linear_solve() {
        let mut rng = seed::rng(11);
        for _ in 0..20 {
            let m = TabularMDP::random(6, 3, 0.95, &mut rng).unwrap();
            let pi = TabularPolicy::random(6, 3, &mut rng);
            let vals = value_iteration(&m, &pi, 1e-10).unwrap();
            let (p, r) = policy_chain(&m, &pi).unwrap();
            let exact = (DMatrix::identity(6, 6) - 0.95 * p).lu().solve(&r).unwrap();
            for s in 0..6 {
                assert!((vals.v[s] - exact[s]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn iteration_cap_is_respected() {
        let mut rng = seed::rng(1);
        let m = TabularMDP::random(4, 2, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::uniform(4, 2);
        let tol = 1e-6;
        let vals = value_iteration(&m, &pi, tol).unwrap();
        let cap = ((tol * 0.1 / m.max_abs_reward()).ln() / 0.9f64.ln()).ceil() as usize;
        assert!(vals.iterations <= cap);
        let zero = m.with_rewards(vec![0.0; 8]).unwrap();
        assert_eq!(value_iteration(&zero, &pi, tol).unwrap().iterations, 0);
    }

    #[test]
    fn stationary_matches_power_iteration() {
        let mut rng = seed::rng(4);
        for _ in 0..10 {
            let m = TabularMDP::random(5, 2, 0.9, &mut rng).unwrap();
            let pi = TabularPolicy::random(5, 2, &mut rng);
            let d = stationary_distribution(&m, &pi, None).unwrap();
            let (p, _) = policy_chain(&m, &pi).unwrap();
            let mut x = DVector::from_element(5, 0.2);
            for _ in 0..2000 {
                x = p.transpose() * x;
            }
            for s in 0..5 {
                assert!((d[s] - x[s]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reducible_chains_are_rejected_unless_restarted() {
        let m = TabularMDP::from_tables(
            &[vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            &[vec![0.0], vec![1.0]],
            0.9,
        )
        .unwrap();
        let pi = TabularPolicy::uniform(2, 1);
        assert!(matches!(
            stationary_distribution(&m, &pi, None),
            Err(Error::ReducibleChain(2))
        ));
        let restart = Restart {
            prob: 0.5,
            dist: vec![0.25, 0.75],
        };
        let d = stationary_distribution(&m, &pi, Some(&restart)).unwrap();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn transient_states_get_zero_mass() {
        let m = TabularMDP::from_tables(
            &[vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            &[vec![0.0], vec![0.0]],
            0.9,
        )
        .unwrap();
        let d = stationary_distribution(&m, &TabularPolicy::uniform(2, 1), None).unwrap();
        assert_eq!(d, vec![0.0, 1.0]);
    }
}

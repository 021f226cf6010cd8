use serde::Serialize;

use super::solve::{stationary_distribution, value_iteration, Restart};
use super::tabular::{is_bisimulation, quotient, AbstractionMap, TabularMDP, TabularPolicy};
use super::transport::{wasserstein1, DiscreteMetric};
use crate::error::{Error, Result};

/// Slack allowed on every inequality check.
pub const BOUND_SLACK: f64 = 1e-9;
const VI_TOL: f64 = 1e-12;

/// Outcome of checking a claimed inequality `lhs <= rhs` on an instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub components: Vec<(String, f64)>,
}

impl BoundReport {
    pub fn new(check: &str, lhs: f64, rhs: f64, components: Vec<(&str, f64)>) -> Self {
        Self {
            check: check.to_string(),
            lhs,
            rhs,
            holds: lhs <= rhs + BOUND_SLACK,
            components: components.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

fn check_shapes(m: &TabularMDP, model: &TabularMDP, phi: &AbstractionMap) -> Result<()> {
    if phi.n_states() != m.n_states() || phi.n_abstract() != model.n_states() {
        return Err(Error::InvalidInput("abstraction does not match the two models".into()));
    }
    if m.n_actions() != model.n_actions() {
        return Err(Error::InvalidInput("models have different action sets".into()));
    }
    Ok(())
}

/// `max_{s,a} |R_bar(phi(s), a) - R(s, a)|` for an abstract model with expected
/// rewards `R_bar`.
pub fn jr_inf(m: &TabularMDP, model: &TabularMDP, phi: &AbstractionMap) -> Result<f64> {
    check_shapes(m, model, phi)?;
    let mut worst: f64 = 0.0;
    for s in 0..m.n_states() {
        for a in 0..m.n_actions() {
            worst = worst.max((model.reward(phi.map(s), a) - m.reward(s, a)).abs());
        }
    }
    Ok(worst)
}

/// `max_{s,a} W1(T_bar(. | phi(s), a), phi# T(. | s, a))` under `metric` on
/// abstract states.
pub fn jd_inf(
    m: &TabularMDP,
    model: &TabularMDP,
    phi: &AbstractionMap,
    metric: &DiscreteMetric,
) -> Result<f64> {
    check_shapes(m, model, phi)?;
    let mut worst: f64 = 0.0;
    for s in 0..m.n_states() {
        for a in 0..m.n_actions() {
            let pushed = m.block_probs(phi, s, a);
            worst = worst.max(wasserstein1(model.row(phi.map(s), a), &pushed, metric)?);
        }
    }
    Ok(worst)
}

/// Smallest `L` with `|f(i) - f(j)| <= L d(i, j)`.
pub fn lipschitz_constant(f: &[f64], metric: &DiscreteMetric) -> f64 {
    let n = f.len();
    let mut l: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            l = l.max((f[i] - f[j]).abs() / metric.dist(i, j));
        }
    }
    l
}

/// Checks the value-approximation bound for an abstract policy `pi_bar`:
///
/// `max |Q^{pi}_M(s, a) - Q^{pi_bar}_{model}(phi(s), a)| <= (J_R + gamma L J_D) / (1 - gamma)`
///
/// where `pi` plays `pi_bar` through `phi`. `lipschitz` must bound the
/// Lipschitz constant of the abstract value function; a smaller value is a
/// hypothesis violation.
pub fn check_value_bound(
    m: &TabularMDP,
    model: &TabularMDP,
    phi: &AbstractionMap,
    pi_bar: &TabularPolicy,
    lipschitz: f64,
    metric: &DiscreteMetric,
) -> Result<BoundReport> {
    check_shapes(m, model, phi)?;
    if (m.gamma - model.gamma).abs() > 0.0 {
        return Err(Error::InvalidInput("models use different discounts".into()));
    }
    let g = m.gamma;
    let abs_vals = value_iteration(model, pi_bar, VI_TOL)?;
    let measured_l = lipschitz_constant(&abs_vals.v, metric);
    if measured_l > lipschitz * (1.0 + 1e-9) + 1e-12 {
        return Err(Error::HypothesisViolated(format!(
            "abstract value is {measured_l}-Lipschitz, more than the supplied {lipschitz}"
        )));
    }
    let ground = value_iteration(m, &pi_bar.lift(phi), VI_TOL)?;
    let mut lhs: f64 = 0.0;
    for s in 0..m.n_states() {
        for a in 0..m.n_actions() {
            lhs = lhs.max((ground.q(s, a) - abs_vals.q(phi.map(s), a)).abs());
        }
    }
    let jr = jr_inf(m, model, phi)?;
    let jd = jd_inf(m, model, phi, metric)?;
    let rhs = (jr + g * lipschitz * jd) / (1.0 - g);
    Ok(BoundReport::new(
        "value",
        lhs,
        rhs,
        vec![("jr_inf", jr), ("jd_inf", jd), ("lipschitz", lipschitz), ("measured_lipschitz", measured_l)],
    ))
}

/// Inputs of the model-error bound for a coarsened model.
///
/// `m_prime` must be the exact quotient of `m` under `phi`; `embedding[z]`
/// places abstract state `z` in a normed space and `predicted[z * A + a]` is
/// the learned next-embedding `T(z, a)`. Both chains follow the abstract
/// behaviour policy, with their own optional restarts.
#[derive(Debug, Clone)]
pub struct ModelErrorInstance<'a> {
    pub m: &'a TabularMDP,
    pub m_prime: &'a TabularMDP,
    pub phi: &'a AbstractionMap,
    pub embedding: &'a [Vec<f64>],
    pub predicted: &'a [Vec<f64>],
    pub policy: &'a TabularPolicy,
    pub restart_m: Option<&'a Restart>,
    pub restart_m_prime: Option<&'a Restart>,
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Measured constants of a [`ModelErrorInstance`]: the worst one-step error
/// `delta` over ground states, and the smallest `L` making both the
/// predictor and the true expected next-embedding Lipschitz.
pub fn model_error_constants(inst: &ModelErrorInstance<'_>) -> Result<(f64, f64)> {
    let mp = inst.m_prime;
    let na = mp.n_actions();
    let nz = mp.n_states();
    if inst.embedding.len() != nz || inst.predicted.len() != nz * na {
        return Err(Error::InvalidInput("embedding or predictor has the wrong size".into()));
    }
    let dim = inst.embedding[0].len();
    if inst.embedding.iter().chain(inst.predicted).any(|v| v.len() != dim) {
        return Err(Error::InvalidInput("inconsistent embedding dimension".into()));
    }
    let metric = DiscreteMetric::euclidean(inst.embedding)?;
    let err_at = |s: usize| -> f64 {
        let z = inst.phi.map(s);
        (0..na)
            .map(|a| {
                let t = &inst.predicted[z * na + a];
                let e: f64 = inst
                    .m
                    .row(s, a)
                    .iter()
                    .enumerate()
                    .map(|(s2, p)| p * norm_diff(t, &inst.embedding[inst.phi.map(s2)]))
                    .sum();
                inst.policy.prob(z, a) * e
            })
            .sum()
    };
    let delta = (0..inst.m.n_states()).map(err_at).fold(0.0, f64::max);
    let mean_next = |z: usize, a: usize| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (z2, p) in mp.row(z, a).iter().enumerate() {
            for (o, e) in out.iter_mut().zip(&inst.embedding[z2]) {
                *o += p * e;
            }
        }
        out
    };
    let mut l: f64 = 0.0;
    for a in 0..na {
        for z in 0..nz {
            for w in z + 1..nz {
                let d = metric.dist(z, w);
                l = l.max(norm_diff(&inst.predicted[z * na + a], &inst.predicted[w * na + a]) / d);
                l = l.max(norm_diff(&mean_next(z, a), &mean_next(w, a)) / d);
            }
        }
    }
    Ok((delta, l))
}

/// Checks the model-error bound for a coarsened model `M'`:
///
/// `E_{x ~ pi_{M'}} ||T(phi(x)) - phi(T_{M'}(x))|| <= delta + 2 L W1(phi# pi_M, pi_{M'})`
///
/// `delta` and `lipschitz` are the supplied hypothesis constants; a measured
/// value above either is an error.
pub fn check_model_error_bound(
    inst: &ModelErrorInstance<'_>,
    delta: f64,
    lipschitz: f64,
) -> Result<BoundReport> {
    let phi = inst.phi;
    if let Some(v) = is_bisimulation(inst.m, phi, 1e-9) {
        return Err(Error::NotBisimulation(v));
    }
    let q = quotient(inst.m, phi, 1e-9)?;
    if q.n_states() != inst.m_prime.n_states()
        || q.transitions()
            .iter()
            .zip(inst.m_prime.transitions())
            .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(Error::InvalidInput("M' is not the quotient of M under phi".into()));
    }
    let (measured_delta, measured_l) = model_error_constants(inst)?;
    if measured_delta > delta * (1.0 + 1e-9) + 1e-12 {
        return Err(Error::HypothesisViolated(format!(
            "one-step error {measured_delta} exceeds the supplied delta {delta}"
        )));
    }
    if measured_l > lipschitz * (1.0 + 1e-9) + 1e-12 {
        return Err(Error::HypothesisViolated(format!(
            "dynamics are {measured_l}-Lipschitz, more than the supplied {lipschitz}"
        )));
    }
    let mp = inst.m_prime;
    let na = mp.n_actions();
    let pi_m = stationary_distribution(inst.m, &inst.policy.lift(phi), inst.restart_m)?;
    let pi_mp = stationary_distribution(mp, inst.policy, inst.restart_m_prime)?;
    let mut pushed = vec![0.0; mp.n_states()];
    for (s, p) in pi_m.iter().enumerate() {
        pushed[phi.map(s)] += p;
    }
    let metric = DiscreteMetric::euclidean(inst.embedding)?;
    let w1 = wasserstein1(&pushed, &pi_mp, &metric)?;
    let mut lhs = 0.0;
    for (z, pz) in pi_mp.iter().enumerate() {
        for a in 0..na {
            let t = &inst.predicted[z * na + a];
            let e: f64 = mp
                .row(z, a)
                .iter()
                .enumerate()
                .map(|(z2, p)| p * norm_diff(t, &inst.embedding[z2]))
                .sum();
            lhs += pz * inst.policy.prob(z, a) * e;
        }
    }
    let rhs = delta + 2.0 * lipschitz * w1;
    Ok(BoundReport::new(
        "model_error",
        lhs,
        rhs,
        vec![
            ("delta", delta),
            ("lipschitz", lipschitz),
            ("w1_stationary", w1),
            ("measured_delta", measured_delta),
            ("measured_lipschitz", measured_l),
        ],
    ))
}

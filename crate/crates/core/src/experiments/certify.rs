use std::collections::BTreeSet;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{param_string, SeedOutput};
use crate::abstraction::{
    check_model_error_bound, check_value_bound, fano_lower_bound, is_bisimulation, lipschitz_constant,
    model_error_constants, projection_map, random_refinement, random_simplex, tabular_from_family, value_iteration,
    wasserstein1, AbstractionMap, AliasingInstance, BoundReport, DiscreteMetric, Grid, ModelErrorInstance, Restart,
    TabularMDP, TabularPolicy, BOUND_SLACK,
};
use crate::blockmdp::random_family;
use crate::error::{Error, Result};
use crate::graph::VarId;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsParams {
    /// Value-bound instances with perturbed ground and abstract models.
    pub value_instances: usize,
    /// Value-bound instances whose abstract model is the exact quotient.
    pub exact_value_instances: usize,
    pub model_error_instances: usize,
    /// Random linear families certified through their ancestor abstraction.
    pub causal_instances: usize,
    /// Random line-metric pairs checked against the CDF formula for W1.
    pub w1_pairs: usize,
    pub max_abstract_states: usize,
    pub max_copies: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// Mixing weight of the random perturbation of transition rows, and
    /// scale of the reward and predictor perturbations.
    pub perturbation: f64,
    pub restart_prob: f64,
    pub max_k: usize,
}

impl Default for BoundsParams {
    fn default() -> Self {
        Self {
            value_instances: 100,
            exact_value_instances: 20,
            model_error_instances: 50,
            causal_instances: 20,
            w1_pairs: 100,
            max_abstract_states: 4,
            max_copies: 3,
            n_actions: 2,
            gamma: 0.9,
            perturbation: 0.2,
            restart_prob: 0.2,
            max_k: 4,
        }
    }
}

impl BoundsParams {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.max_abstract_states < 2 || self.max_copies == 0 || self.n_actions == 0 {
            return Err(Error::config("max_abstract_states", "need at least 2 abstract states, 1 copy and 1 action"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.perturbation) {
            return Err(Error::config("perturbation", "must lie in [0, 1]"));
        }
        if !(self.restart_prob > 0.0 && self.restart_prob <= 1.0) {
            return Err(Error::config("restart_prob", "must lie in (0, 1]"));
        }
        if !(2..=6).contains(&self.max_k) {
            return Err(Error::config("max_k", "must lie in 2..=6"));
        }
        Ok(())
    }
}

fn perturb(m: &TabularMDP, eps: f64, rng: &mut Rng) -> Result<TabularMDP> {
    let (n, na) = (m.n_states(), m.n_actions());
    let mut p = Vec::with_capacity(n * na * n);
    for s in 0..n {
        for a in 0..na {
            let noise = random_simplex(n, rng);
            p.extend(m.row(s, a).iter().zip(noise).map(|(x, y)| (1.0 - eps) * x + eps * y));
        }
    }
    let r = m.rewards().iter().map(|r| r + eps * rng.sample::<f64, _>(StandardNormal)).collect();
    TabularMDP::new(n, na, p, r, m.gamma)
}

fn random_points(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn refinement(p: &BoundsParams, rng: &mut Rng) -> Result<(TabularMDP, TabularMDP, AbstractionMap)> {
    let nz = rng.random_range(2..=p.max_abstract_states);
    let base = TabularMDP::random(nz, p.n_actions, p.gamma, rng)?;
    let copies: Vec<usize> = (0..nz).map(|_| rng.random_range(1..=p.max_copies)).collect();
    let (ground, phi) = random_refinement(&base, &copies, rng)?;
    Ok((base, ground, phi))
}

/// Inputs of one value-bound check.
#[derive(Debug, Clone)]
pub struct ValueCase {
    pub ground: TabularMDP,
    pub model: TabularMDP,
    pub phi: AbstractionMap,
    pub policy: TabularPolicy,
    pub metric: DiscreteMetric,
    /// Measured Lipschitz constant of the abstract value function.
    pub lipschitz: f64,
}

impl ValueCase {
    pub fn check(&self) -> Result<BoundReport> {
        check_value_bound(&self.ground, &self.model, &self.phi, &self.policy, self.lipschitz, &self.metric)
    }
}

/// A ground model refining a random abstract model. Unless `exact`, both
/// are perturbed, so `phi` is in general not a bisimulation and the model
/// is not its quotient.
pub fn value_instance(p: &BoundsParams, exact: bool, rng: &mut Rng) -> Result<ValueCase> {
    let (base, ground, phi) = refinement(p, rng)?;
    let (ground, model) = if exact {
        (ground, base)
    } else {
        (perturb(&ground, p.perturbation, rng)?, perturb(&base, p.perturbation, rng)?)
    };
    let nz = model.n_states();
    let metric = DiscreteMetric::euclidean(&random_points(nz, 2, rng))?;
    let policy = TabularPolicy::random(nz, p.n_actions, rng);
    let lipschitz = lipschitz_constant(&value_iteration(&model, &policy, 1e-12)?.v, &metric);
    Ok(ValueCase {
        ground,
        model,
        phi,
        policy,
        metric,
        lipschitz,
    })
}

/// Owned inputs of one model-error check.
#[derive(Debug, Clone)]
pub struct ModelErrorCase {
    pub m: TabularMDP,
    pub m_prime: TabularMDP,
    pub phi: AbstractionMap,
    pub embedding: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
    pub policy: TabularPolicy,
    pub restart_m: Restart,
    pub restart_m_prime: Restart,
}

impl ModelErrorCase {
    pub fn instance(&self) -> ModelErrorInstance<'_> {
        ModelErrorInstance {
            m: &self.m,
            m_prime: &self.m_prime,
            phi: &self.phi,
            embedding: &self.embedding,
            predicted: &self.predicted,
            policy: &self.policy,
            restart_m: Some(&self.restart_m),
            restart_m_prime: Some(&self.restart_m_prime),
        }
    }

    /// Checks the bound with the measured constants as hypotheses.
    pub fn check(&self) -> Result<BoundReport> {
        let inst = self.instance();
        let (delta, l) = model_error_constants(&inst)?;
        check_model_error_bound(&inst, delta, l)
    }
}

/// A refinement `M` of a random coarse model `M'`, a perturbed predictor of
/// the next embedding, and restarts with independent random targets so the
/// two stationary distributions differ.
pub fn model_error_instance(p: &BoundsParams, rng: &mut Rng) -> Result<ModelErrorCase> {
    let (base, ground, phi) = refinement(p, rng)?;
    let (nz, na) = (base.n_states(), base.n_actions());
    let embedding = random_points(nz, 2, rng);
    let mut predicted = Vec::with_capacity(nz * na);
    for z in 0..nz {
        for a in 0..na {
            let mut mean = [0.0; 2];
            for (z2, q) in base.row(z, a).iter().enumerate() {
                for (m, e) in mean.iter_mut().zip(&embedding[z2]) {
                    *m += q * e;
                }
            }
            predicted.push(mean.iter().map(|m| m + p.perturbation * rng.sample::<f64, _>(StandardNormal)).collect());
        }
    }
    let policy = TabularPolicy::random(nz, na, rng);
    let restart_m = Restart {
        prob: p.restart_prob,
        dist: random_simplex(ground.n_states(), rng),
    };
    let restart_m_prime = Restart {
        prob: p.restart_prob,
        dist: random_simplex(nz, rng),
    };
    Ok(ModelErrorCase {
        m: ground,
        m_prime: base,
        phi,
        embedding,
        predicted,
        policy,
        restart_m,
        restart_m_prime,
    })
}

/// Exhaustive bisimulation checks of a random linear family on the
/// two-level grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalCheck {
    pub k: usize,
    pub ancestors: BTreeSet<VarId>,
    /// `phi_{AN(R)}` passes, per environment.
    pub ancestor_ok: Vec<bool>,
    /// For every ancestor `v`: whether `phi_{AN(R) - v}` has a counterexample,
    /// per environment.
    pub dropped: Vec<(VarId, Vec<bool>)>,
}

pub fn causal_instance(max_k: usize, rng: &mut Rng) -> Result<CausalCheck> {
    let k = rng.random_range(2..=max_k);
    let fam = random_family(k, 3, rng)?;
    let grid = Grid::two_level();
    let an = fam.graph.ancestors();
    let models: Vec<TabularMDP> = fam.env_ids().into_iter().map(|e| tabular_from_family(&fam, e, &grid)).collect::<Result<_>>()?;
    let phi = projection_map(k, &grid, &an)?;
    let ancestor_ok = models.iter().map(|m| is_bisimulation(m, &phi, 1e-9).is_none()).collect();
    let mut dropped = Vec::new();
    for v in &an {
        let mut sub = an.clone();
        sub.remove(v);
        let phi = projection_map(k, &grid, &sub)?;
        dropped.push((*v, models.iter().map(|m| is_bisimulation(m, &phi, 1e-9).is_some()).collect()));
    }
    Ok(CausalCheck {
        k,
        ancestors: an,
        ancestor_ok,
        dropped,
    })
}

/// Sorted distinct points on a line with two random distributions on them.
pub fn line_pair(rng: &mut Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = rng.random_range(2..=8);
    let mut x: Vec<f64> = Vec::with_capacity(n);
    let mut at = 10.0 * rng.sample::<f64, _>(StandardNormal);
    for _ in 0..n {
        at += rng.random_range(0.05..3.0);
        x.push(at);
    }
    // sparse supports exercise the degenerate pivots
    let draw = |rng: &mut Rng| {
        let mut w = random_simplex(n, rng);
        if rng.random_bool(0.3) {
            let k = rng.random_range(0..n);
            w[k] = 0.0;
            let t: f64 = w.iter().sum();
            if t > 0.0 {
                w.iter_mut().for_each(|v| *v /= t);
            } else {
                w[(k + 1) % n] = 1.0;
            }
        }
        w
    };
    let p = draw(rng);
    let q = draw(rng);
    (x, p, q)
}

/// `W1` on a line from the cumulative distribution functions.
fn line_w1(x: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let mut cdf = 0.0;
    let mut total = 0.0;
    for i in 0..x.len() - 1 {
        cdf += p[i] - q[i];
        total += cdf.abs() * (x[i + 1] - x[i]);
    }
    total
}

fn bool_value(b: bool) -> f64 {
    f64::from(u8::from(b))
}

fn push_report(out: &mut SeedOutput, params: &str, rep: &BoundReport) {
    out.push(params, "lhs", rep.lhs);
    out.push(params, "rhs", rep.rhs);
    out.push(params, "holds", bool_value(rep.holds));
    for (name, v) in &rep.components {
        out.push(params, name, *v);
    }
}

pub(crate) fn run_bounds(p: &BoundsParams, seed: u64) -> Result<SeedOutput> {
    let mut out = SeedOutput::default();
    for i in 0..p.value_instances {
        let case = value_instance(p, false, &mut seed::stream(seed, 1_000 + i as u64))?;
        let rep = case.check()?;
        let params = param_string(&[("check", "value".into()), ("instance", i.to_string())]);
        push_report(&mut out, &params, &rep);
        out.flag(rep.holds, || format!("value bound instance {i}: {} > {}", rep.lhs, rep.rhs));
    }
    for i in 0..p.exact_value_instances {
        let case = value_instance(p, true, &mut seed::stream(seed, 2_000 + i as u64))?;
        let rep = case.check()?;
        let params = param_string(&[("check", "value_exact".into()), ("instance", i.to_string())]);
        push_report(&mut out, &params, &rep);
        out.flag(rep.holds && rep.lhs <= BOUND_SLACK, || format!("exact quotient instance {i}: lhs {}", rep.lhs));
    }
    for i in 0..p.model_error_instances {
        let case = model_error_instance(p, &mut seed::stream(seed, 3_000 + i as u64))?;
        let rep = case.check()?;
        let params = param_string(&[("check", "model_error".into()), ("instance", i.to_string())]);
        push_report(&mut out, &params, &rep);
        out.flag(rep.holds, || format!("model-error bound instance {i}: {} > {}", rep.lhs, rep.rhs));
    }
    for i in 0..p.causal_instances {
        let c = causal_instance(p.max_k, &mut seed::stream(seed, 4_000 + i as u64))?;
        let base = [("check", "causal".to_string()), ("instance", i.to_string()), ("k", c.k.to_string())];
        let ok = c.ancestor_ok.iter().all(|b| *b);
        out.push(&param_string(&base), "ancestor_bisimulation", bool_value(ok));
        out.flag(ok, || format!("causal instance {i}: ancestor abstraction is not a bisimulation"));
        for (v, found) in &c.dropped {
            let mut pairs = base.to_vec();
            pairs.push(("dropped", format!("x{}", v.0 + 1)));
            let all = found.iter().all(|b| *b);
            out.push(&param_string(&pairs), "counterexample_every_env", bool_value(all));
            out.flag(all, || format!("causal instance {i}: dropping x{} keeps a bisimulation", v.0 + 1));
        }
    }
    for i in 0..p.w1_pairs {
        let (x, a, b) = line_pair(&mut seed::stream(seed, 5_000 + i as u64));
        let w = wasserstein1(&a, &b, &DiscreteMetric::line(&x)?)?;
        let err = (w - line_w1(&x, &a, &b)).abs();
        let params = param_string(&[("check", "w1_line".into()), ("instance", i.to_string())]);
        out.push(&params, "abs_error", err);
        out.flag(err <= 1e-9, || format!("W1 pair {i}: error {err}"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FanoParams {
    pub random_instances: usize,
    pub max_states: usize,
    pub max_obs: usize,
    pub n_envs: usize,
    pub n_values: usize,
}

impl Default for FanoParams {
    fn default() -> Self {
        Self {
            random_instances: 12,
            max_states: 6,
            max_obs: 3,
            n_envs: 2,
            n_values: 3,
        }
    }
}

impl FanoParams {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.max_states < 2 || self.max_obs == 0 || self.n_envs == 0 || self.n_values < 2 {
            return Err(Error::config("max_states", "need >= 2 states, >= 1 observation and environment, >= 2 values"));
        }
        let decoders = (self.n_values as f64).powi((self.max_obs) as i32);
        if decoders > crate::abstraction::MAX_DECODERS as f64 {
            return Err(Error::config("max_obs", "too many decoders to enumerate"));
        }
        Ok(())
    }
}

/// Two states with values 0 and 1 emitted to one observation in two
/// environments, uniform `pi`.
pub fn fully_aliased_instance() -> AliasingInstance {
    AliasingInstance {
        values: vec![0.0, 1.0],
        pi: vec![0.5, 0.5],
        emissions: vec![vec![0, 0], vec![0, 0]],
    }
}

/// Three equiprobable values behind one observation: `H = log2 3` bits.
fn three_way_instance() -> AliasingInstance {
    AliasingInstance {
        values: vec![0.0, 1.0, 2.0],
        pi: vec![1.0 / 3.0; 3],
        emissions: vec![vec![0, 0, 0]],
    }
}

/// Random values on `0..n_values`, random `pi` and emissions into
/// `0..max_obs`; at least two values are distinct.
pub fn aliasing_instance(p: &FanoParams, rng: &mut Rng) -> AliasingInstance {
    let n = rng.random_range(2..=p.max_states);
    let mut values: Vec<f64> = (0..n).map(|_| rng.random_range(0..p.n_values) as f64).collect();
    if values.iter().all(|v| *v == values[0]) {
        values[1] = ((values[0] as usize + 1) % p.n_values) as f64;
    }
    let pi = random_simplex(n, rng);
    let emissions = (0..p.n_envs).map(|_| (0..n).map(|_| rng.random_range(0..p.max_obs)).collect()).collect();
    AliasingInstance { values, pi, emissions }
}

pub(crate) fn run_fano(p: &FanoParams, index: u64, seed: u64) -> Result<SeedOutput> {
    let mut out = SeedOutput::default();
    let mut cases = vec![("fully_aliased".to_string(), fully_aliased_instance()), ("three_way".into(), three_way_instance())];
    for i in 0..p.random_instances {
        cases.push((format!("random{i}"), aliasing_instance(p, &mut seed::stream(seed, 1_000 + i as u64))));
    }
    for (name, inst) in &cases {
        let rep = fano_lower_bound(inst)?;
        let params = param_string(&[("instance", name.clone())]);
        push_report(&mut out, &params, &rep);
        out.flag(rep.holds, || format!("fano instance {name}: bound {} above decoder error {}", rep.lhs, rep.rhs));
    }
    let rep = fano_lower_bound(&cases[0].1)?;
    let delta = rep.component("delta").expect("reported");
    out.flag(rep.rhs == 0.5 * delta, || {
        format!("seed index {index}: fully aliased decoder error {} differs from delta / 2", rep.rhs)
    });
    Ok(out)
}

use std::collections::BTreeMap;

use super::bounds::BoundReport;
use crate::error::{Error, Result};

/// Largest number of decoders enumerated by [`fano_lower_bound`].
pub const MAX_DECODERS: u64 = 1 << 22;

/// Latent states with values `v(s)` and a distribution `pi`, observed through
/// one emission map per environment. `emissions[e][s]` is the observation id
/// produced by state `s` in environment `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasingInstance {
    pub values: Vec<f64>,
    pub pi: Vec<f64>,
    pub emissions: Vec<Vec<usize>>,
}

impl AliasingInstance {
    fn validate(&self) -> Result<()> {
        let n = self.values.len();
        if n == 0 || self.pi.len() != n || self.emissions.is_empty() {
            return Err(Error::InvalidInput("aliasing instance is empty or inconsistent".into()));
        }
        if self.emissions.iter().any(|f| f.len() != n) {
            return Err(Error::InvalidInput("every emission map must cover every state".into()));
        }
        let total: f64 = self.pi.iter().sum();
        if self.pi.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("pi is not a probability vector".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state values".into()));
        }
        Ok(())
    }

    /// Joint mass `p(x, s) = (1/|E|) sum_e 1[f_e(s) = x] pi(s)`, keyed by `x`.
    pub fn joint(&self) -> BTreeMap<usize, Vec<f64>> {
        let n = self.values.len();
        let ne = self.emissions.len() as f64;
        let mut joint: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for f in &self.emissions {
            for s in 0..n {
                joint.entry(f[s]).or_insert_with(|| vec![0.0; n])[s] += self.pi[s] / ne;
            }
        }
        joint
    }

    pub fn has_aliasing(&self) -> bool {
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        for f in &self.emissions {
            for (s, &x) in f.iter().enumerate() {
                if *owner.entry(x).or_insert(s) != s {
                    return true;
                }
            }
        }
        false
    }

    fn distinct_values(&self) -> Vec<f64> {
        let mut vs = self.values.clone();
        vs.sort_by(f64::total_cmp);
        vs.dedup();
        vs
    }

    /// `H(V(S) | X)` in bits.
    pub fn conditional_entropy(&self) -> f64 {
        let distinct = self.distinct_values();
        let mut h = 0.0;
        for masses in self.joint().values() {
            let px: f64 = masses.iter().sum();
            if px <= 0.0 {
                continue;
            }
            let mut by_value = vec![0.0; distinct.len()];
            for (s, m) in masses.iter().enumerate() {
                let k = distinct.partition_point(|v| *v < self.values[s]);
                by_value[k] += m / px;
            }
            h -= px * by_value.iter().filter(|q| **q > 0.0).map(|q| q * q.log2()).sum::<f64>();
        }
        h.max(0.0)
    }

    /// Expected decoding error of `decoder` (one value per observation id, in
    /// the order of [`AliasingInstance::joint`]'s keys).
    pub fn decoder_error(&self, decoder: &BTreeMap<usize, f64>) -> f64 {
        self.joint()
            .iter()
            .map(|(x, masses)| {
                masses
                    .iter()
                    .zip(&self.values)
                    .map(|(m, v)| m * (decoder[x] - v).abs())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Fano-style lower bound on the error of any decoder of state values from
/// aliased observations, checked against the exact best decoder.
///
/// The report's claimed inequality is `bound <= best decoder error`, so
/// `lhs` is the bound and `rhs` the error.
pub fn fano_lower_bound(inst: &AliasingInstance) -> Result<BoundReport> {
    inst.validate()?;
    let distinct = inst.distinct_values();
    let delta = distinct.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let delta = if delta.is_finite() { delta } else { 0.0 };
    let h = inst.conditional_entropy();
    let bound = if distinct.len() > 1 {
        (delta * (h - 1.0) / (distinct.len() as f64).log2()).max(0.0)
    } else {
        0.0
    };

    let joint = inst.joint();
    let obs: Vec<usize> = joint.keys().copied().collect();
    let combos = (distinct.len() as u64)
        .checked_pow(obs.len() as u32)
        .filter(|c| *c <= MAX_DECODERS)
        .ok_or_else(|| Error::InvalidInput("too many decoders for exhaustive search".into()))?;
    let mut digits = vec![0usize; obs.len()];
    let mut best = f64::INFINITY;
    let mut decoder: BTreeMap<usize, f64> = obs.iter().map(|&x| (x, distinct[0])).collect();
    for _ in 0..combos {
        for (x, d) in obs.iter().zip(&digits) {
            decoder.insert(*x, distinct[*d]);
        }
        best = best.min(inst.decoder_error(&decoder));
        for d in digits.iter_mut() {
            *d += 1;
            if *d < distinct.len() {
                break;
            }
            *d = 0;
        }
    }
    Ok(BoundReport::new(
        "fano",
        bound,
        best,
        vec![
            ("fano_bound", bound),
            ("decoder_error", best),
            ("conditional_entropy_bits", h),
            ("delta", delta),
            ("aliased", f64::from(u8::from(inst.has_aliasing()))),
        ],
    ))
}

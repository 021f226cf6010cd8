use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blockmdp::{EnvironmentFamily, Policy};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Mixing maps with a condition number at or above this are resampled.
pub const MAX_CONDITION: f64 = 1e3;
const MAX_TRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    Identity,
    RandomOrthogonal,
}

/// How the spurious variables of each environment are generated.
///
/// Environment `e` has nuisance dynamics
/// `eta' = B_e eta + G_e s' + envs[e].offset u + envs[e].noise_std N(0, I)`
/// where `||B_e|| = dynamics_scale`, `G_e` has entries of scale
/// `coupling_scale` and `u` is a unit direction shared by all
/// environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuisanceSpec {
    pub dim: usize,
    pub coupling_scale: f64,
    pub dynamics_scale: f64,
    pub envs: Vec<NuisanceEnvSpec>,
    pub mixing: Mixing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceEnvSpec {
    pub offset: f64,
    pub noise_std: f64,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self {
            dim: 1,
            coupling_scale: 0.0,
            dynamics_scale: 0.3,
            // the first environment's nuisance barely moves, so alone it
            // cannot tell the spurious direction apart from the latent one
            envs: vec![
                NuisanceEnvSpec { offset: -1.0, noise_std: 0.05 },
                NuisanceEnvSpec { offset: 1.0, noise_std: 0.5 },
                NuisanceEnvSpec { offset: 4.0, noise_std: 0.5 },
            ],
            mixing: Mixing::RandomOrthogonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceEnv {
    pub dynamics: DMatrix<f64>,
    pub coupling: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise_std: f64,
    /// `x = mixing * (s ⊕ eta)`
    pub mixing: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
}

/// Observations of a latent linear family through per-environment
/// spurious channels: `x = R blockdiag(I, D_e) (s ⊕ eta_e)` with a shared
/// orthogonal `R`.
#[derive(Debug, Clone)]
pub struct RichObsFamily {
    pub latent: EnvironmentFamily,
    /// Latent environment every rich environment runs.
    pub latent_env: usize,
    pub spec: NuisanceSpec,
    pub envs: Vec<NuisanceEnv>,
    /// Shared rotation `R`.
    pub rotation: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RichTransition {
    pub x: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub x_next: Vec<f64>,
    pub s: Vec<f64>,
    pub s_next: Vec<f64>,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

fn random_orthogonal(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    gaussian(n, n, 1.0, rng).qr().q()
}

pub fn make_rich_obs_family(
    latent: EnvironmentFamily,
    latent_env: usize,
    spec: NuisanceSpec,
    seed: u64,
) -> Result<RichObsFamily> {
    latent.env(latent_env)?;
    if spec.envs.is_empty() {
        return Err(Error::config("envs", "at least one environment required"));
    }
    if !(spec.dynamics_scale >= 0.0 && spec.dynamics_scale < 1.0) {
        return Err(Error::config("dynamics_scale", "must lie in [0, 1)"));
    }
    if spec.envs.iter().any(|e| !(e.noise_std >= 0.0) || !e.offset.is_finite()) || !(spec.coupling_scale >= 0.0) {
        return Err(Error::config("noise_std", "scales must be non-negative"));
    }
    let k = latent.k();
    let h = spec.dim;
    let d = k + h;
    let mut rng = seed::rng(seed);
    let rotation = match spec.mixing {
        Mixing::Identity => DMatrix::identity(d, d),
        Mixing::RandomOrthogonal => random_orthogonal(d, &mut rng),
    };
    let mut direction = DVector::from_fn(h, |_, _| rng.sample::<f64, _>(StandardNormal));
    if direction.norm() > 0.0 {
        direction /= direction.norm();
    }
    let mut envs = Vec::with_capacity(spec.envs.len());
    for env_spec in &spec.envs {
        let mut chosen = None;
        for _ in 0..MAX_TRIES {
            let nuisance_mix = match spec.mixing {
                Mixing::Identity => DMatrix::identity(h, h),
                Mixing::RandomOrthogonal => {
                    DMatrix::identity(h, h) + gaussian(h, h, 0.5 / (h.max(1) as f64).sqrt(), &mut rng)
                }
            };
            let mut block = DMatrix::identity(d, d);
            block.view_mut((k, k), (h, h)).copy_from(&nuisance_mix);
            let mixing = &rotation * block;
            if condition_number(&mixing) < MAX_CONDITION {
                chosen = Some(mixing);
                break;
            }
        }
        let mixing = chosen.ok_or_else(|| {
            Error::NonFinite(format!("no mixing map with condition number below {MAX_CONDITION}"))
        })?;
        let inverse = mixing
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("singular mixing map".into()))?;
        let mut dynamics = gaussian(h, h, 1.0, &mut rng);
        if h > 0 {
            let norm = dynamics.clone().svd(false, false).singular_values.max();
            if norm > 0.0 {
                dynamics *= spec.dynamics_scale / norm;
            }
        }
        let coupling = gaussian(h, k, spec.coupling_scale, &mut rng);
        envs.push(NuisanceEnv {
            dynamics,
            coupling,
            offset: env_spec.offset * &direction,
            noise_std: env_spec.noise_std,
            mixing,
            inverse,
        });
    }
    Ok(RichObsFamily {
        latent,
        latent_env,
        spec,
        envs,
        rotation,
    })
}

impl RichObsFamily {
    pub fn latent_dim(&self) -> usize {
        self.latent.k()
    }

    pub fn nuisance_dim(&self) -> usize {
        self.spec.dim
    }

    pub fn obs_dim(&self) -> usize {
        self.latent_dim() + self.nuisance_dim()
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.latent.n_actions()
    }

    fn nuisance_env(&self, env: usize) -> Result<&NuisanceEnv> {
        self.envs.get(env).ok_or(Error::UnknownEnv(env))
    }

    pub fn emit(&self, env: usize, s: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
        let ne = self.nuisance_env(env)?;
        let joint = DVector::from_iterator(self.obs_dim(), s.iter().chain(eta).copied());
        Ok((&ne.mixing * joint).iter().copied().collect())
    }

    /// Recovers `(s, eta)` from an observation of environment `env`.
    pub fn demix(&self, env: usize, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let ne = self.nuisance_env(env)?;
        let v = &ne.inverse * DVector::from_column_slice(x);
        let k = self.latent_dim();
        Ok((v.rows(0, k).iter().copied().collect(), v.rows(k, self.nuisance_dim()).iter().copied().collect()))
    }

    /// Orthogonal projection onto the latent channel, `R blockdiag(I, 0) R^T`.
    pub fn latent_projection(&self) -> DMatrix<f64> {
        let k = self.latent_dim();
        let r = self.rotation.columns(0, k);
        r * r.transpose()
    }

    fn next_nuisance(&self, ne: &NuisanceEnv, eta: &DVector<f64>, s_next: &[f64], rng: &mut Rng) -> DVector<f64> {
        let s = DVector::from_column_slice(s_next);
        let noise = DVector::from_fn(self.nuisance_dim(), |_, _| ne.noise_std * rng.sample::<f64, _>(StandardNormal));
        &ne.dynamics * eta + &ne.coupling * s + &ne.offset + noise
    }

    /// `n_steps` transitions of environment `env`. The latent trajectory only
    /// depends on `latent_seed` and the policy, so two environments given the
    /// same latent seed share their latent states.
    pub fn sample(
        &self,
        env: usize,
        n_steps: usize,
        policy: &dyn Policy,
        latent_seed: u64,
        nuisance_seed: u64,
    ) -> Result<Vec<RichTransition>> {
        let ne = self.nuisance_env(env)?;
        let mut latent_rng = seed::rng(latent_seed);
        let mut policy_rng = seed::stream(latent_seed, 1);
        let mut nuisance_rng = seed::rng(nuisance_seed);
        let h = self.nuisance_dim();
        let episode = self.latent.episode_len.max(1);
        let mut out = Vec::with_capacity(n_steps);
        let mut s = Vec::new();
        let mut eta = DVector::zeros(h);
        for t in 0..n_steps {
            if t % episode == 0 {
                s = self.latent.initial_state(self.latent_env, &mut latent_rng)?;
                eta = self.next_nuisance(ne, &DVector::zeros(h), &s, &mut nuisance_rng);
            }
            let a = policy.act(&s, &mut policy_rng);
            let (r, s_next) = self.latent.step(self.latent_env, &s, a, &mut latent_rng)?;
            let eta_next = self.next_nuisance(ne, &eta, &s_next, &mut nuisance_rng);
            out.push(RichTransition {
                x: self.emit(env, &s, eta.as_slice())?,
                a,
                r,
                x_next: self.emit(env, &s_next, eta_next.as_slice())?,
                s: s.clone(),
                s_next: s_next.clone(),
            });
            s = s_next;
            eta = eta_next;
        }
        Ok(out)
    }
}

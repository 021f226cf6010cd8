use serde::{Deserialize, Serialize};

use super::{param_string, SeedOutput};
use crate::error::{Error, Result};
use crate::nonlinear::{latent_family, make_rich_obs_family, train_method, Method, NuisanceSpec, TrainConfig};
use crate::seed;

/// Held-out model error of the gradient-based learner against its
/// baselines on the synthetic rich-observation family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearGenParams {
    pub latent_noise_std: f64,
    pub reward_noise_std: f64,
    pub nuisance: NuisanceSpec,
    pub train: TrainConfig,
    pub train_envs: Vec<usize>,
    pub heldout_env: usize,
    pub methods: Vec<Method>,
}

impl Default for NonlinearGenParams {
    fn default() -> Self {
        Self {
            latent_noise_std: 0.5,
            reward_noise_std: 0.1,
            nuisance: NuisanceSpec::default(),
            train: TrainConfig::default(),
            train_envs: vec![0, 1],
            heldout_env: 2,
            methods: Method::ALL.to_vec(),
        }
    }
}

impl NonlinearGenParams {
    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.nuisance.envs.len();
        if self.train_envs.is_empty() || self.train_envs.iter().any(|e| *e >= n) {
            return Err(Error::config("train_envs", format!("nonempty, each below the {n} nuisance environments")));
        }
        let mut envs = self.train_envs.clone();
        envs.sort_unstable();
        envs.dedup();
        if envs.len() != self.train_envs.len() {
            return Err(Error::config("train_envs", "environments must be distinct"));
        }
        if self.heldout_env >= n || self.train_envs.contains(&self.heldout_env) {
            return Err(Error::config("heldout_env", "must be a nuisance environment not used for training"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method required"));
        }
        if self.train.steps == 0 || self.train.batch_size == 0 || self.train.samples_per_env == 0 || self.train.n_eval == 0 {
            return Err(Error::config("train", "steps, batch_size, samples_per_env and n_eval must be positive"));
        }
        if let Some(lr) = self.train.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("train.lr", "must be positive"));
            }
        }
        latent_family(self.latent_noise_std, self.reward_noise_std)
            .map_err(|e| Error::config("latent_noise_std", e.to_string()))?;
        Ok(())
    }
}

pub(crate) fn run_nonlinear_gen(p: &NonlinearGenParams, seed: u64) -> Result<SeedOutput> {
    let latent = latent_family(p.latent_noise_std, p.reward_noise_std)?;
    let fam = make_rich_obs_family(latent, 0, p.nuisance.clone(), seed::derive(seed, 0))?;
    let mut out = SeedOutput::default();
    for &method in &p.methods {
        let (_, curve) = train_method(&fam, &p.train_envs, p.heldout_env, method, &p.train, seed::derive(seed, 1))?;
        for point in &curve {
            let params = param_string(&[("method", method.name().to_string()), ("step", point.step.to_string())]);
            let l = &point.loss;
            out.push(&params, "j_d", l.j_d);
            out.push(&params, "j_r", l.j_r);
            out.push(&params, "entropy", l.entropy);
            out.push(&params, "cross_entropy", l.cross_entropy);
            out.push(&params, "j_all", l.j_all);
            for (e, v) in l.per_env_j_d.iter().enumerate() {
                out.push(&params, &format!("j_d_env{e}"), *v);
            }
            if let Some(err) = point.heldout_error {
                out.push(&params, "heldout_error", err);
            }
        }
    }
    Ok(out)
}

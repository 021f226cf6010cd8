use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{Alphas, EnvBatch, FunctionClass, LossBreakdown, LossWeights, MisaModel, ModelDims, ParamGroup};
use super::rich::{RichObsFamily, RichTransition};
use crate::blockmdp::UniformRandom;
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Plain SGD; the only state is the step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    fn apply(&self, model: &mut MisaModel, group: ParamGroup, grad: &[f64]) {
        for range in model.group(group) {
            for i in range {
                model.params[i] -= self.lr * grad[i];
            }
        }
    }
}

/// Draws `batch_size` transitions per environment, with replacement.
pub fn sample_batches<'a>(data: &'a [Vec<RichTransition>], batch_size: usize, rng: &mut Rng) -> Vec<EnvBatch<'a>> {
    data.iter()
        .enumerate()
        .map(|(env, d)| EnvBatch {
            env,
            transitions: (0..batch_size).map(|_| &d[rng.random_range(0..d.len())]).collect(),
        })
        .collect()
}

/// One full training cycle on fixed minibatches:
/// (a) every nuisance pair `(psi^e, f_eta^e)` steps on its own `J_D(X_e)`;
/// (b) `phi`, `f_s`, reward head and decoder step on the sum over
/// environments of `J_ALL(X_e)`; (c) the classifier steps on cross-entropy with `phi` held
/// fixed. Each phase sees the parameters left by the previous one.
///
/// Returns the loss breakdown evaluated at the start of phase (b).
pub fn train_step(model: &mut MisaModel, batches: &[EnvBatch<'_>], alphas: Alphas, opt: Sgd) -> Result<LossBreakdown> {
    if batches.len() != model.dims.n_envs {
        return Err(Error::InvalidInput(format!(
            "{} batches for {} training environments",
            batches.len(),
            model.dims.n_envs
        )));
    }
    for b in batches {
        let (loss, grad) = model.evaluate(std::slice::from_ref(b), alphas, Some(LossWeights::j_d()))?;
        loss.check_finite()?;
        opt.apply(model, ParamGroup::Nuisance(b.env), &grad.expect("requested"));
    }
    let (loss, grad) = model.evaluate(batches, alphas, Some(LossWeights::j_all(alphas)))?;
    loss.check_finite()?;
    // the breakdown holds environment means; the step follows their sum
    let shared = Sgd { lr: opt.lr * batches.len() as f64 };
    shared.apply(model, ParamGroup::Shared, &grad.expect("requested"));
    let (ce_loss, grad) = model.evaluate(batches, alphas, Some(LossWeights::cross_entropy()))?;
    ce_loss.check_finite()?;
    opt.apply(model, ParamGroup::Classifier, &grad.expect("requested"));
    Ok(loss)
}

/// Mean squared error of the predicted next observation on the latent
/// channel, `E || P (x_hat' - x') ||^2` with `P` the orthogonal projection
/// onto the latent subspace, over `n_eval` fresh transitions of family
/// environment `env`. `head` selects the model's nuisance head; `None`
/// decodes with `h' = 0`.
pub fn eval_model_error(
    model: &MisaModel,
    family: &RichObsFamily,
    env: usize,
    head: Option<usize>,
    n_eval: usize,
    seed: u64,
) -> Result<f64> {
    let data = family.sample(env, n_eval, &UniformRandom { n_actions: family.n_actions() }, seed::derive(seed, 0), seed::derive(seed, 1))?;
    let proj = family.latent_projection();
    let mut total = 0.0;
    for t in &data {
        let pred = model.predict_next(head, &t.x, t.a);
        let diff = DVector::from_iterator(pred.len(), pred.iter().zip(&t.x_next).map(|(a, b)| a - b));
        total += (&proj * diff).norm_squared();
    }
    Ok(total / n_eval as f64)
}

/// Which learner to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// All training environments, per-environment nuisance heads, adversarial
    /// classifier.
    Misa,
    /// The same learner given only the first training environment.
    MisaOneEnv,
    /// Training environments pooled into one, no nuisance channel.
    PooledOneDecoder,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Misa, Method::MisaOneEnv, Method::PooledOneDecoder];

    pub fn name(self) -> &'static str {
        match self {
            Method::Misa => "misa",
            Method::MisaOneEnv => "misa_1env",
            Method::PooledOneDecoder => "pooled_1decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// `None` picks the function class default.
    pub lr: Option<f64>,
    pub alphas: Alphas,
    pub function_class: FunctionClass,
    pub samples_per_env: usize,
    pub eval_interval: usize,
    pub n_eval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: None,
            alphas: Alphas::default(),
            function_class: FunctionClass::Affine,
            samples_per_env: 2000,
            eval_interval: 250,
            n_eval: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: LossBreakdown,
    pub heldout_error: Option<f64>,
}

/// Trains `method` on `train_envs` of `family` and records the held-out
/// model error every `eval_interval` steps and after the last step.
pub fn train_method(
    family: &RichObsFamily,
    train_envs: &[usize],
    heldout_env: usize,
    method: Method,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MisaModel, Vec<CurvePoint>)> {
    if train_envs.is_empty() {
        return Err(Error::config("train_envs", "at least one training environment required"));
    }
    if cfg.batch_size == 0 || cfg.samples_per_env == 0 {
        return Err(Error::config("batch_size", "batch size and sample count must be positive"));
    }
    let policy = UniformRandom { n_actions: family.n_actions() };
    let mut per_env = Vec::with_capacity(train_envs.len());
    for &e in train_envs {
        // data depends on the seed and the family environment, not the method
        let s = seed::derive(seed, 100 + e as u64);
        per_env.push(family.sample(e, cfg.samples_per_env, &policy, seed::derive(s, 0), seed::derive(s, 1))?);
    }
    let (data, h_dim, batch) = match method {
        Method::Misa => (per_env, family.nuisance_dim(), cfg.batch_size),
        Method::MisaOneEnv => (per_env.into_iter().take(1).collect(), family.nuisance_dim(), cfg.batch_size),
        Method::PooledOneDecoder => {
            let n = per_env.len();
            (vec![per_env.into_iter().flatten().collect()], 0, cfg.batch_size * n)
        }
    };
    let dims = ModelDims {
        x_dim: family.obs_dim(),
        z_dim: family.latent_dim(),
        h_dim,
        n_actions: family.n_actions(),
        n_envs: data.len(),
    };
    let mut model = MisaModel::new(dims, cfg.function_class, seed::derive(seed, 1));
    let opt = Sgd {
        lr: cfg.lr.unwrap_or_else(|| cfg.function_class.default_lr()),
    };
    let mut rng = seed::rng(seed::derive(seed, 2));
    let eval_seed = seed::derive(seed, 3);
    let mut curve = Vec::new();
    for step in 1..=cfg.steps {
        let batches = sample_batches(&data, batch, &mut rng);
        let loss = train_step(&mut model, &batches, cfg.alphas, opt)?;
        let record = step == cfg.steps || (cfg.eval_interval > 0 && step % cfg.eval_interval == 0);
        if record {
            let err = eval_model_error(&model, family, heldout_env, None, cfg.n_eval, eval_seed)?;
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("held-out model error at step {step}")));
            }
            curve.push(CurvePoint {
                step,
                loss,
                heldout_error: Some(err),
            });
        }
    }
    Ok((model, curve))
}

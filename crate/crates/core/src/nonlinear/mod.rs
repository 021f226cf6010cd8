//! Gradient-based abstraction learning on rich observations: a shared
//! encoder, dynamics and reward head, per-environment nuisance encoders and
//! dynamics, a decoder, and an environment classifier whose entropy the
//! encoder maximizes.

mod model;
mod net;
mod rich;
mod train;

pub use model::{
    Alphas, EnvBatch, FunctionClass, LossBreakdown, LossWeights, MisaModel, ModelDims, NetId,
    ParamGroup,
};
pub use net::{Activation, Net, NetworkSpec, ParamBlock, Trace};
pub use rich::{
    make_rich_obs_family, Mixing, NuisanceEnv, NuisanceEnvSpec, NuisanceSpec, RichObsFamily, RichTransition,
    MAX_CONDITION,
};
pub use train::{
    eval_model_error, sample_batches, train_method, train_step, CurvePoint, Method, Sgd,
    TrainConfig,
};

use nalgebra::DMatrix;

use crate::blockmdp::{EnvironmentFamily, EnvironmentSpec, LinearDynamics, LinearReward};
use crate::error::Result;
use crate::graph::TemporalCausalGraph;

/// Two-variable latent family: a damped rotation by 30 degrees with unit
/// contraction 0.8, noise std `noise_std`, reward `x1 - 0.5 x2`.
pub fn latent_family(noise_std: f64, reward_noise_std: f64) -> Result<EnvironmentFamily> {
    let graph = TemporalCausalGraph::new(vec![vec![0, 1], vec![0, 1]], vec![0, 1])?;
    let (c, s) = (0.8 * (30f64).to_radians().cos(), 0.8 * (30f64).to_radians().sin());
    let a = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let dynamics = LinearDynamics {
        matrices: vec![a],
        noise_mean: vec![0.0; 2],
        noise_std: vec![noise_std; 2],
    };
    let reward = LinearReward {
        weights: vec![1.0, -0.5],
        noise_std: reward_noise_std,
    };
    EnvironmentFamily::new(graph, dynamics, reward, vec![EnvironmentSpec::new(0, vec![])], 0.9)
}

pub fn default_latent_family() -> Result<EnvironmentFamily> {
    latent_family(0.5, 0.1)
}

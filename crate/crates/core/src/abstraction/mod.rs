//! Tabular state abstractions: bisimulation checks, quotients, value and
//! stationary solvers, Wasserstein-1 distances and the approximation bounds
//! that relate ground and abstract models.

mod bounds;
mod discretize;
mod fano;
mod solve;
mod tabular;
mod transport;

pub use bounds::{
    check_model_error_bound, check_value_bound, jd_inf, jr_inf, lipschitz_constant,
    model_error_constants, BoundReport, ModelErrorInstance, BOUND_SLACK,
};
pub use discretize::{
    decode_state, projection_map, projection_metric, tabular_from_family, Grid, MAX_GRID_STATES,
    TRUNCATION_SDS,
};
pub use fano::{fano_lower_bound, AliasingInstance, MAX_DECODERS};
pub use solve::{
    behaviour_chain, closed_classes, policy_chain, stationary_distribution, stationary_of_chain,
    value_iteration, PolicyValues, Restart,
};
pub use tabular::{
    duplicate_states, is_bisimulation, quotient, random_refinement, AbstractionMap,
    BisimViolation, TabularMDP, TabularPolicy, ViolationKind, PROB_TOL,
};
pub(crate) use tabular::random_simplex;
pub use transport::{optimal_transport, wasserstein1, DiscreteMetric, TransportPlan};

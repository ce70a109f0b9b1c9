//! Linear and tabular MDPs, the exact oracles used to certify every
//! experiment, the every-`c`-step hyper-MDP, and a small continuous testbed.

mod dense;
mod hyper;
mod linear;
mod pointmass;
mod policy;

pub use dense::{
    bellman_optimality, discounted_visitation, exact_value_iteration, exact_value_iteration_as,
    induced_kernel, induced_reward, k_step_transition, monte_carlo_value, policy_state_values,
    policy_value, sample_index, truncation_horizon, visitation_from_kernel, DenseMdp, TabularModel,
    ValueSolution, KERNEL_SUM_TOL,
};
pub use hyper::{geometric_sum, skill_kernel, FeatureTable, HyperMDP};
pub use linear::{dirichlet, FeatureMap, LinearTabularMDP, MdpDocument, RewardMode};
pub use pointmass::{Disc, PointMassEnv, Rect};
pub use policy::{argmax_lowest, PolicyKind, PolicyTable, ROW_SUM_TOL};

pub(crate) use hyper::check_skills;

/// Default value-iteration tolerance.
pub const VI_TOL: f64 = 1e-10;

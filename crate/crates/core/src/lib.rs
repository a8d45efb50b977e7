//! Primal-dual offline reinforcement learning in linear MDPs and constrained
//! linear MDPs, plus an exact tabular oracle for evaluation.
//!
//! The solver sees only the feature map, the reward parameters, `γ`, `s0`,
//! the thresholds and an offline dataset. Everything that needs the true
//! transition measures lives in [`model`] and [`lagrangian`].

// `!(x >= 0.0)` checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod lagrangian;
pub mod model;
pub mod par;
pub mod players;
pub mod solver;
pub mod spanner;

pub use data::{
    concentrability, concentrability_of, gram_matrix, sample_dataset, BehaviorDistribution, GramMatrix,
    OfflineDataset, Transition,
};
pub use error::{Error, Result};
pub use estimators::{phi_mu_hat, psi_v_hat, v_values, LocalPolicy, StateCache, ValueAtStates};
pub use experiment::{report, run_experiment, ExperimentSpec, ReportFormat, ReportRow};
pub use model::{
    build_random_cmdp, CmdpDocument, CmdpSizes, ConstrainedOptimum, ExactEval, FeatureMap, LinearCmdp,
    TabularPolicy,
};
pub use par::Execution;
pub use players::{
    oco_step, pi_update, softmax_at, w_greedy, zeta_greedy, PlayerBounds, SoftmaxPolicy,
};
pub use solver::{
    default_t_iters, evaluate_mixture, solve, solve_with_oracle, FlowEstimator, IterationRecord, KnownModel,
    MixturePolicy, Mode, RunTrace, SolverConfig,
};
pub use spanner::{compute_spanner, convert_coeffs, lambda_of, CoefLambda, Spanner};

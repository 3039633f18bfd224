//! Numerical checks of the mixed-loss expansion, gradient-norm comparisons and
//! embedding drift diagnostics.

mod chain;
mod drift;
mod gradnorm;
mod taylor;

pub use chain::{chain_rule_check, encoder_jacobian, Jacobian};
pub use drift::{davies_bouldin, drift_analysis, drift_experiment, project_2d, DriftReport};
pub use gradnorm::{grad_norm_compare, paired_tests, GradNormSummary, GradNormTrace};
pub use taylor::{
    first_order_term, first_order_term_net, fit_slope, mixed_input, secant_first_order,
    taylor_verify, taylor_verify_net, AuxLossField, Quadratic, ScalarField, TaylorReport,
    DEFAULT_MU_LIST, REMAINDER_FLOOR,
};

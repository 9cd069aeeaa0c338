//! Exact event-driven simulation of the absorbed chain and of the
//! Q-process, and Monte Carlo checks of the conditional central limit
//! theorem.
//!
//! Replica `i` of a run with master seed `s` draws from ChaCha8 seeded by
//! `seed_from_u64(s)` on stream `i`. Replicas run in parallel and are
//! collected by index, so outputs are bit-identical for any thread count.

mod clt;
mod simulate;

pub use clt::{
    conditional_clt_sample, ecdf_standard_error, kolmogorov_distance, kolmogorov_two_sample,
    normal_cdf, quasi_ergodic_check, EmpiricalDistribution, Method, QedReport, QedRow,
    SamplingPlan, DEFAULT_BUDGET, EXACT_ORACLE_LIMIT, SIGMA2_TOLERANCE,
};
pub use simulate::{
    replica_rng, simulate_absorbed, simulate_qprocess, Categorical, JumpSampler, Trajectory,
};

//! The collapsed probabilistic model over spectral embeddings: prior
//! constants, running sufficient statistics, closed-form marginal
//! likelihoods, predictive densities, and the chain state with its log
//! joint.

pub mod marginals;
pub mod state;
pub mod stats;

pub use marginals::{
    log_crp_z, log_geometric, log_marg_left, log_marg_right, log_marg_right_col,
    log_marg_right_range, log_pred_left, log_pred_right, log_prior_d, log_prior_h, log_prior_k,
    log_prior_v, DPrior, HyperParams, LeftScore, RightScore,
};
pub use state::{rebuild_blocks, BlockState, ChainState, GroupData, GroupState, ProblemData};
pub use stats::{ClusterStats, RightStats, VarAgg, WithCluster};

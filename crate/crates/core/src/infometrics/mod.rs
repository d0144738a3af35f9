//! Exact discrete information measures and sample-based dependence estimators.
//!
//! All information quantities are in bits.

mod discrete;
mod samples;

pub use discrete::{
    conditional_entropy, entropy_discrete, mutual_information_discrete, mutual_information_pairs, DiscreteJoint,
    DiscreteSystem, DpiCheck, Given, LemmaReport,
};
pub use samples::{
    hsic, hsic_permutation_test, hsic_permutation_threshold, median_distance, mi_histogram, mid_ranks, pearson,
    spearman, Points,
};

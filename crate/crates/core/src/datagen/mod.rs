//! Seeded synthetic generators for `x = f(s, t)`, with the hidden source kept
//! for evaluation only.

mod angles;
mod dataset;
mod fecg;
mod mixing;

pub use angles::{gen_rotating_angles_toy, AnglesConfig, EmbeddingKind};
pub use dataset::{Condition, DataView, DatasetMeta, PairedDataset, SegmentLags};
pub use fecg::{gen_synthetic_fecg, pulse_train, FecgConfig};
pub use mixing::{
    gen_2d, gen_uniform_sources, mix_linear, mix_nonlinear, verify_invertibility, MixingSpec, DEFAULT_A,
};

/// Generates the dataset described by `spec`. `n` counts samples for flat
/// generators and is ignored by the fECG generator, which has its own segment count.
pub fn generate(spec: &MixingSpec, n: usize, seed: u64) -> crate::Result<PairedDataset> {
    match spec {
        MixingSpec::Linear { .. } | MixingSpec::SoftplusNonlinear { .. } => gen_2d(spec, n, seed),
        MixingSpec::Angles(cfg) => gen_rotating_angles_toy(n, seed, cfg),
        MixingSpec::Fecg(cfg) => gen_synthetic_fecg(cfg, seed),
    }
}

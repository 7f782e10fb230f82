//! Kendall-τ kernels and kernel canonical correlation against value-added
//! measures.

mod kcca;
mod kendall;
mod vam;

pub use kcca::{kcca, kcca_from_bases, null_band, permutation_null, permutation_null_from_bases, CcaResult, KccaConfig, KernelBasis};
pub use kendall::{kendall_tau, kendall_tau_variant, pair_signs, tau_gram, weighted_kendall_tau, TauGram, TauVariant};
pub use vam::{item_weighted_tau, read_vam, stack_vam, write_vam, ScoredUnit, StackedVam, VamRecord};

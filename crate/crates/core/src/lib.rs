//! No-reference stereoscopic image quality assessment.
//!
//! The crate has two halves that meet in [`training`]:
//!
//! * a naturalness-feature extractor ([`dtcwt`], [`nss`]) that fits Gaussian
//!   copulas with Gamma margins to dual-tree complex wavelet magnitudes of
//!   both views and emits a fixed 108-value label per stereo pair;
//! * a four-branch multi-task CNN ([`network`]) built on a small
//!   deterministic autodiff engine ([`tensor`]) whose auxiliary head predicts
//!   those labels and whose main head predicts DMOS.
//!
//! [`datakit`] ingests LIVE-style manifests and synthesizes license-free
//! stereo datasets; [`evalmetrics`] provides PLCC/SROCC/RMSE reporting.

pub mod datakit;
pub mod dtcwt;
pub mod error;
pub mod evalmetrics;
pub mod imagepipe;
pub mod network;
pub mod nss;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Derives an independent stream seed from a base seed and a path of
/// stage/index labels (SplitMix64 finalizer chained over the parts).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed ^ 0x9E37_79B9_7F4A_7C15, |acc, &p| {
        let mut z = acc.wrapping_add(p.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

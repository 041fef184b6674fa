// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse semi-nonnegative matrix factorization of MLP activations.
//!
//! An activation matrix `A` (`d_a` neurons by `n` token positions) is split
//! into features `Z` (`d_a x k`, each column a sparse combination of neurons)
//! and nonnegative coefficients `Y` (`k x n`, which tokens use which feature).
//! On top of that the crate builds feature hierarchies by recursive
//! factorization, concept-detection scores, vocabulary projections, neuron
//! overlap analyses, and KL-calibrated steering interventions.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the `*64` and
//! `*32` aliases below fix the precision. Files on disk are always `f32`.

pub mod analysis;
pub mod engine;
pub mod error;
pub mod hierarchy;
pub mod io;
pub mod linalg;
pub mod scalar;
pub mod steering;

pub use engine::{
    apply_wta, factorize, factorize_with, init_factors, reconstruction_loss, renormalize,
    update_coefficients, update_features, FactorizationConfig, LossTrace,
};
pub use error::{Result, SnmfError};
pub use io::{FactorizationBundle, TokenContext};
pub use scalar::Scalar;

pub type Bundle64 = FactorizationBundle<f64>;
pub type Bundle32 = FactorizationBundle<f32>;





pub type Hierarchy64 = hierarchy::HierarchyResult<f64>;
pub type Hierarchy32 = hierarchy::HierarchyResult<f32>;
pub type Intervention64 = steering::InterventionSpec<f64>;
pub type Intervention32 = steering::InterventionSpec<f32>;
pub type ConceptScore64 = analysis::ConceptScore<f64>;
pub type ConceptScore32 = analysis::ConceptScore<f32>;

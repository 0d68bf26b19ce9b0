//! Retention-gated attention with weight-tied retention gates, global-budget
//! KV eviction over a paged cache, and the checks and experiments around them.
//!
//! The core is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common cases.

pub mod attention;
pub mod config;
pub mod engine;
pub mod error;
pub mod eviction;
pub mod experiments;
pub mod gates;
pub mod model;
pub mod needle;
pub mod numerics;
pub mod paged_cache;
pub mod scalar;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type HeadCache64 = attention::HeadCache<f64>;
pub type HeadCache32 = attention::HeadCache<f32>;
pub type PagedCache64 = paged_cache::PagedCache<f64>;
pub type PagedCache32 = paged_cache::PagedCache<f32>;
pub type GateParams64 = gates::GateParams<f64>;
pub type GateParams32 = gates::GateParams<f32>;
pub type Backbone64 = model::Backbone<f64>;
pub type Backbone32 = model::Backbone<f32>;

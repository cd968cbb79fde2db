//! Weak approximation of the CIR, Heston and multifactor Heston models with
//! second-order schemes, random-grid boosting and deterministic references.
//!
//! Kernels are generic over the scalar type (`f32` or `f64`) through [`Real`].
//! The aliases at the crate root fix the scalar to `f64`.

pub mod cir;
pub mod engine;
pub mod error;
pub mod grids;
pub mod heston;
pub mod hybrid;
pub mod multifactor;
pub mod quad;
pub mod real;
pub mod reference;

pub use error::{Error, Result};
pub use real::Real;

pub type CirParams64 = cir::CirParams<f64>;
pub type CirScheme64 = cir::CirScheme<f64>;
pub type CirStepCoeffs64 = cir::CirStepCoeffs<f64>;
pub type HestonParams64 = heston::HestonParams<f64>;
pub type HestonScheme64 = heston::HestonScheme<f64>;
pub type LogHestonState64 = heston::LogHestonState<f64>;
pub type KernelNodes64 = multifactor::KernelNodes<f64>;
pub type MfParams64 = multifactor::MfParams<f64>;
pub type MfScheme64 = multifactor::MfScheme<f64>;
pub type MfState64 = multifactor::MfState<f64>;
pub type YLattice64 = hybrid::YLattice<f64>;
pub type TridiagonalOp64 = hybrid::TridiagonalOp<f64>;

pub type CirParams32 = cir::CirParams<f32>;
pub type HestonParams32 = heston::HestonParams<f32>;

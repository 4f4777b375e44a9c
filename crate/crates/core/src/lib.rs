pub mod coefficient;
pub mod dp;
pub mod error;
pub mod facelift;
pub mod functional;
pub mod grid;
pub mod hedge;
pub mod hjb;
pub mod model;
pub mod payoff;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{Extended, Scalar};

/// Double-precision instances of the generic types.
pub type Model = model::ImpactModel<f64>;
pub type Payoff = payoff::PayoffSpec<f64>;
pub type Surface = hjb::ValueSurface<f64>;
pub type DpSolution = dp::DpSolution<f64>;
pub type Ledger = hedge::HedgeLedger<f64>;

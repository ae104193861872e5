//! Simulation and numerical optimization for an over-collateralized
//! stablecoin whose price clears against demand while a leveraged speculator
//! sets supply against locked ETH collateral.
//!
//! * [`model`]: parameters, state, clearing price, liquidation thresholds and mechanics.
//! * [`returns`]: one-step ETH return distributions and the expectations built on them.
//! * [`optimizer`]: the speculator's objective, its derivatives and the supply decision.
//! * [`dynamics`]: step-by-step simulation and stopping-time detection.
//! * [`analysis`]: ensemble statistics and stability-bound verification.

// Negated comparisons are how NaN inputs are rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod assumptions;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod optimizer;
pub mod quadrature;
pub mod returns;

pub use error::{Error, Result};

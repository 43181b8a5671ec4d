//! Generalized partially linear single-index additive models fitted by
//! direct penalized Fisher scoring on P-spline bases whose knots follow the
//! current index values.

pub mod basis;
pub mod error;
pub mod family;
pub mod fit;
pub mod index;
pub mod inference;
pub mod layout;
pub mod model;
pub mod numkernel;
pub mod penalty;
pub mod sim;

pub use error::{Error, Result};
pub use family::{Distribution, Family, Link};
pub use fit::{fit, predict, FitConfig, FittedModel};
pub use layout::CoefficientLayout;
pub use model::{Design, Frame, ModelSpec, TermSpec};

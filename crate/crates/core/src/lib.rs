//! Switching linear dynamical systems for multichannel vital-sign
//! condition monitoring.

pub mod arima;
pub mod features;
pub mod forest;
pub mod inference;
pub mod io;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gaussian;
pub mod linalg;
pub mod optim;
pub mod sim;
pub mod switch;
pub mod train;

pub use error::{Error, Result};

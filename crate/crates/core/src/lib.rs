//! Age-period mortality modelling with a B-spline process whose coefficients
//! evolve as locally-adaptive stochastic trends.
//!
//! The model represents a log-mortality surface as a linear combination of
//! non-uniform B-spline bases over age, with time-varying coefficients driven
//! by integrated stochastic differential equations. Exact discretisation turns
//! the model into a Gaussian linear state space, so learning and forecasting
//! reduce to Kalman filtering, smoothing and marginal-likelihood optimisation.
//!
//! Module map:
//!
//! * [`basis`] - clamped non-uniform B-spline bases and design matrices
//! * [`covariance`] - Matern / squared-exponential correlation across bases
//! * [`statespace`] - exact discretisation into transition and noise blocks
//! * [`kalman`] - filter, smoother, likelihood and surface projection
//! * [`estimation`] - multi-start marginal-likelihood hyperparameter search
//! * [`forecast`] - drift-based multi-horizon forecasts with intervals
//! * [`data`] - mortality table parsing and the internal interchange format
//! * [`simulate`] - synthetic surface generation and a convergence diagnostic
//! * [`backtest`] - rolling-origin evaluation over surfaces and horizons

pub mod backtest;
pub mod basis;
pub mod covariance;
pub mod data;
pub mod error;
pub mod estimation;
pub mod forecast;
pub mod kalman;
pub mod optim;
pub mod simulate;
pub mod statespace;

mod linalg;
mod stats;

pub use error::{Error, Result};

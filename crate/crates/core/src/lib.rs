//! Long-run simulation of ergodic stochastic systems with step sizes that
//! decrease to zero.
//!
//! The central object is a weighted occupation measure built along a single
//! trajectory of a discretisation scheme whose step `gamma_n` shrinks as the
//! simulation proceeds:
//!
//! ```text
//! nu_n(f) = (1/H_n) * sum_{k=1..n} eta_k * f(X_{k-1}),    H_n = sum eta_k
//! ```
//!
//! Under step/weight summability conditions and a Lyapunov-type stability
//! bound on the scheme, `nu_n(f)` converges to the stationary expectation of
//! `f`, without any burn-in tuning and without the fixed-step discretisation
//! bias. This crate provides:
//!
//! * [`schedules`]: step/weight sequences and the summability verdicts that
//!   decide whether a given pair is usable;
//! * [`models`]: drift/diffusion descriptions, regime-switching variants and
//!   exact differential-operator evaluation;
//! * [`schemes`]: Euler, one-dimensional Milstein and regime-switching
//!   drivers feeding occupation-measure sinks;
//! * [`measures`]: streaming weighted averages, weighted reservoirs and
//!   quantile-grid transport distances;
//! * [`lyapunov`]: stability certificates, both symbolic-on-a-grid and
//!   empirical (one-step Monte Carlo);
//! * [`generators`]: pseudo-generator estimates and the stationarity
//!   residual `nu_n(A f)` which should vanish at equilibrium;
//! * [`oracles`]: independent references (closed forms, quadrature, moment
//!   systems, long fixed-step runs) used to validate simulations;
//! * [`experiment`] / [`config`]: the orchestration layer used by the CLI.

pub mod config;
pub mod error;
pub mod experiment;
pub mod generators;
pub mod lyapunov;
pub mod measures;
pub mod models;
pub mod numeric;
pub mod oracles;
pub mod rng;
pub mod schedules;
pub mod schemes;

pub use error::{Error, Result};

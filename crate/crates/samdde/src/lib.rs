//! Stroboscopic averaging method (SAM) for constant-delay differential
//! equations under fast periodic forcing, with a method-of-steps reference
//! solver, an averaged-system evaluator and a benchmark harness.
//!
//! A problem `x'(t) = f(x(t), x(t - tau), t, Omega t; Omega)` with large
//! `Omega` is advanced with macro steps `H = tau / N` by a second-order
//! Adams-Bashforth scheme whose slopes are recovered by differencing short
//! Euler micro-integrations of the oscillatory system over one forcing
//! period. The work per macro step is independent of `Omega`.
//!
//! Modules:
//! - [`types`]: problems, grids, histories and solution containers
//! - [`sam`]: the macro/micro integrator
//! - [`refsolve`]: adaptive Runge-Kutta 3(2) DDE solver with dense output
//! - [`averaging`]: averaged right-hand sides from Fourier coefficients
//! - [`problems`]: built-in benchmark systems
//! - [`bench`]: error-table sweeps, complexity and timing studies

pub mod averaging;
pub mod bench;
pub mod problems;
pub mod refsolve;
pub mod sam;
pub mod types;

pub use types::{
    history_value, make_grid, AveragedProblem, CoreError, DenseSolution, GridParams,
    HistoryFunction, OscillatoryProblem,
};

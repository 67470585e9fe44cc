//! Domain types shared by all solvers: problem definitions, grid parameters,
//! solution containers and history evaluation.

use std::fmt;
use std::sync::Arc;

/// Right-hand side of an oscillatory delay system.
///
/// Arguments are `(x, y, t, theta, omega, out)` where `x` is the current
/// state, `y = x(t - tau)` the delayed state, `t` the slow time, `theta` the
/// fast phase (radians) and `omega` the forcing frequency. The derivative is
/// written into `out`.
pub type OscRhs = Arc<dyn Fn(&[f64], &[f64], f64, f64, f64, &mut [f64]) + Send + Sync>;

/// Phase-1 right-hand side of an averaged system, valid for `0 <= t < tau`.
/// Arguments: `(x, y, dphi, t, omega, out)` with `dphi` the history derivative
/// at `t - tau`.
pub type AveragedPhase1 = Arc<dyn Fn(&[f64], &[f64], &[f64], f64, f64, &mut [f64]) + Send + Sync>;

/// Phase-2 right-hand side of an averaged system, valid for `t >= tau`.
/// Arguments: `(x, y, z, t, omega, out)` with `z = x(t - 2 tau)`.
pub type AveragedPhase2 = Arc<dyn Fn(&[f64], &[f64], &[f64], f64, f64, &mut [f64]) + Send + Sync>;

type VecFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// Errors raised by the domain types.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// The macro step does not cover enough micro periods: `H < rho * T`.
    InfeasibleGrid {
        macro_step: f64,
        period: f64,
        min_ratio: f64,
    },
    /// A history query fell outside the prescribed domain.
    OutOfDomain { t: f64, lo: f64, hi: f64 },
    /// A constructor argument violated its precondition.
    InvalidParameter { what: &'static str },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InfeasibleGrid {
                macro_step,
                period,
                min_ratio,
            } => write!(
                f,
                "infeasible grid: H = {macro_step:.6e} but H >= {min_ratio} T = {:.6e} is required",
                min_ratio * period
            ),
            CoreError::OutOfDomain { t, lo, hi } => {
                write!(f, "history queried at t = {t} outside [{lo}, {hi}]")
            }
            CoreError::InvalidParameter { what } => write!(f, "invalid parameter: {what}"),
        }
    }
}

impl std::error::Error for CoreError {}

/// Initial history `x(t) = phi(t)` on `[-tau, 0]`, with an optional derivative.
///
/// The derivative is required by averaged-system evaluators (the phase-1
/// formula differentiates the history); when absent it is approximated by
/// centered differences with `delta = 1e-6 * max(1, |t|)`.
#[derive(Clone)]
pub struct HistoryFunction {
    eval: VecFn,
    deriv: Option<VecFn>,
    domain_left: f64,
    dim: usize,
}

impl HistoryFunction {
    pub fn new(dim: usize, domain_left: f64, eval: VecFn) -> Self {
        Self {
            eval,
            deriv: None,
            domain_left,
            dim,
        }
    }

    pub fn with_derivative(mut self, deriv: VecFn) -> Self {
        self.deriv = Some(deriv);
        self
    }

    /// Constant history, the common case in the built-in problems.
    pub fn constant(values: Vec<f64>, domain_left: f64) -> Self {
        let dim = values.len();
        let vals = values.clone();
        let eval: VecFn = Arc::new(move |_t, out| out.copy_from_slice(&vals));
        let deriv: VecFn = Arc::new(move |_t, out| out.fill(0.0));
        Self {
            eval,
            deriv: Some(deriv),
            domain_left,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain_left(&self) -> f64 {
        self.domain_left
    }

    pub fn has_derivative(&self) -> bool {
        self.deriv.is_some()
    }

    /// Evaluates `phi(t)` into `out`, clamping roundoff-level excursions past
    /// the domain ends and rejecting anything larger.
    pub fn value_into(&self, t: f64, out: &mut [f64]) -> Result<(), CoreError> {
        let tol = 1e-9 * self.domain_left.abs().max(1.0);
        if t < self.domain_left - tol || t > tol {
            return Err(CoreError::OutOfDomain {
                t,
                lo: self.domain_left,
                hi: 0.0,
            });
        }
        let tc = t.clamp(self.domain_left, 0.0);
        (self.eval)(tc, out);
        Ok(())
    }

    pub fn value(&self, t: f64) -> Result<Vec<f64>, CoreError> {
        let mut out = vec![0.0; self.dim];
        self.value_into(t, &mut out)?;
        Ok(out)
    }

    /// `dphi/dt(t)`; falls back to a centered difference of `eval` when no
    /// derivative was supplied (one-sided at the domain ends).
    pub fn derivative(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if let Some(d) = &self.deriv {
            (d)(t.clamp(self.domain_left, 0.0), out.as_mut_slice());
            return out;
        }
        let delta = 1e-6 * t.abs().max(1.0);
        let lo = (t - delta).max(self.domain_left);
        let hi = (t + delta).min(0.0);
        let mut a = vec![0.0; self.dim];
        let mut b = vec![0.0; self.dim];
        (self.eval)(lo, &mut a);
        (self.eval)(hi, &mut b);
        for i in 0..self.dim {
            out[i] = (b[i] - a[i]) / (hi - lo);
        }
        out
    }
}

/// A highly oscillatory delay system
/// `x'(t) = f(x(t), x(t - tau), t, Omega t; Omega)` with history `phi`.
#[derive(Clone)]
pub struct OscillatoryProblem {
    pub dim: usize,
    pub rhs: OscRhs,
    pub delay: f64,
    pub history: HistoryFunction,
    pub t_max: f64,
    /// Forcing frequency this instance is studied at. The rhs closure still
    /// receives the frequency explicitly so one closure serves all values.
    pub omega: f64,
}

impl OscillatoryProblem {
    pub fn eval_rhs(&self, x: &[f64], y: &[f64], t: f64, theta: f64, omega: f64, out: &mut [f64]) {
        (self.rhs)(x, y, t, theta, omega, out)
    }

    /// Probes 2-pi periodicity of the rhs in theta at `n` random sample
    /// points; returns the largest relative deviation seen.
    pub fn theta_periodicity_deviation(&self, seed: u64, n: usize) -> f64 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim;
        let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        let mut worst = 0.0f64;
        for _ in 0..n {
            for i in 0..d {
                x[i] = rng.gen_range(0.1..3.0);
                y[i] = rng.gen_range(0.1..3.0);
            }
            let t = rng.gen_range(0.0..self.t_max);
            let theta = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            self.eval_rhs(&x, &y, t, theta, self.omega, &mut a);
            self.eval_rhs(&x, &y, t, theta + 2.0 * std::f64::consts::PI, self.omega, &mut b);
            let scale = 1.0 + a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..d {
                worst = worst.max((a[i] - b[i]).abs() / scale);
            }
        }
        worst
    }
}

/// Stroboscopically averaged companion of an [`OscillatoryProblem`].
///
/// The right-hand side splits at `t = tau`: before the split it depends on
/// the history derivative, after it on the second lag `z = x(t - 2 tau)`.
#[derive(Clone)]
pub struct AveragedProblem {
    pub dim: usize,
    pub rhs_phase1: AveragedPhase1,
    pub rhs_phase2: AveragedPhase2,
    pub delay: f64,
    pub history: HistoryFunction,
    pub omega: f64,
}

/// Macro/micro discretization: `N` macro steps per delay and `nu_max` micro
/// steps per forcing period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    n_per_delay: u32,
    nu_max: u32,
    omega: f64,
    tau: f64,
    feasibility_ratio: f64,
}

/// Relative slack applied to the feasibility threshold `H >= rho T`, so the
/// borderline ratio `H/T = tau Omega / (2 pi N)` just below 2 (e.g. 1.9894 at
/// N = 1, Omega = 25, tau = 0.5) still counts as feasible.
pub const FEASIBILITY_REL_TOL: f64 = 1e-2;

/// Default minimum number of periods per macro step.
pub const DEFAULT_FEASIBILITY_RATIO: f64 = 2.0;

impl GridParams {
    /// Builds a grid, checking `H >= rho T` feasibility (default `rho = 2`).
    pub fn new(n_per_delay: u32, nu_max: u32, omega: f64, tau: f64) -> Result<Self, CoreError> {
        Self::with_feasibility_ratio(n_per_delay, nu_max, omega, tau, DEFAULT_FEASIBILITY_RATIO)
    }

    pub fn with_feasibility_ratio(
        n_per_delay: u32,
        nu_max: u32,
        omega: f64,
        tau: f64,
        rho: f64,
    ) -> Result<Self, CoreError> {
        if n_per_delay < 1 || nu_max < 1 {
            return Err(CoreError::InvalidParameter {
                what: "N and nu_max must be >= 1",
            });
        }
        if !(omega > 0.0) || !(tau > 0.0) {
            return Err(CoreError::InvalidParameter {
                what: "Omega and tau must be positive",
            });
        }
        let grid = Self {
            n_per_delay,
            nu_max,
            omega,
            tau,
            feasibility_ratio: rho,
        };
        let (h_macro, t_period) = (grid.macro_step(), grid.period());
        if h_macro < rho * t_period * (1.0 - FEASIBILITY_REL_TOL) {
            return Err(CoreError::InfeasibleGrid {
                macro_step: h_macro,
                period: t_period,
                min_ratio: rho,
            });
        }
        Ok(grid)
    }

    pub fn n_per_delay(&self) -> u32 {
        self.n_per_delay
    }

    pub fn nu_max(&self) -> u32 {
        self.nu_max
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Macro step `H = tau / N`.
    pub fn macro_step(&self) -> f64 {
        self.tau / self.n_per_delay as f64
    }

    /// Forcing period `T = 2 pi / Omega`.
    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.omega
    }

    /// Micro step `h = T / nu_max`.
    pub fn micro_step(&self) -> f64 {
        self.period() / self.nu_max as f64
    }

    /// Step point `t_n = n tau / N`, computed directly (never accumulated).
    pub fn step_time(&self, n: usize) -> f64 {
        n as f64 * self.tau / self.n_per_delay as f64
    }

    /// Number of macro steps covering `[0, t_max]`: `M = floor(t_max / H)`.
    pub fn macro_count(&self, t_max: f64) -> usize {
        (t_max / self.macro_step() + 1e-9).floor() as usize
    }
}

/// Convenience wrapper matching the grid constructor.
pub fn make_grid(n: u32, nu_max: u32, omega: f64, tau: f64) -> Result<GridParams, CoreError> {
    GridParams::new(n, nu_max, omega, tau)
}

/// History value `phi(t)` of a problem, domain-checked on `[-tau, 0]`.
pub fn history_value(problem: &OscillatoryProblem, t: f64) -> Result<Vec<f64>, CoreError> {
    problem.history.value(t)
}

/// One cubic Hermite interpolant over an accepted solver step.
#[derive(Debug, Clone)]
pub struct HermiteSegment {
    pub t0: f64,
    pub t1: f64,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
}

impl HermiteSegment {
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let h = self.t1 - self.t0;
        let s = if h == 0.0 { 0.0 } else { (t - self.t0) / h };
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        for i in 0..out.len() {
            out[i] = h00 * self.x0[i] + h10 * h * self.f0[i] + h01 * self.x1[i] + h11 * h * self.f1[i];
        }
    }
}

/// Piecewise-polynomial trajectory produced by the reference solver.
///
/// Covers `[-tau, t_end]`: negative times are answered by the history
/// function, the rest by per-step cubic Hermite interpolants.
#[derive(Clone)]
pub struct DenseSolution {
    pub dim: usize,
    mesh: Vec<f64>,
    segments: Vec<HermiteSegment>,
    history: HistoryFunction,
    t_end: f64,
}

impl DenseSolution {
    pub fn new(
        dim: usize,
        mesh: Vec<f64>,
        segments: Vec<HermiteSegment>,
        history: HistoryFunction,
    ) -> Self {
        let t_end = mesh.last().copied().unwrap_or(0.0);
        Self {
            dim,
            mesh,
            segments,
            history,
            t_end,
        }
    }

    /// Accepted mesh points (`mesh[0] = t0` of the solve).
    pub fn mesh(&self) -> &[f64] {
        &self.mesh
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn segments(&self) -> &[HermiteSegment] {
        &self.segments
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<(), CoreError> {
        let t_start = self.mesh.first().copied().unwrap_or(0.0);
        if t < t_start {
            return self.history.value_into(t, out);
        }
        let tol = 1e-9 * self.t_end.abs().max(1.0);
        if t > self.t_end + tol {
            return Err(CoreError::OutOfDomain {
                t,
                lo: self.history.domain_left(),
                hi: self.t_end,
            });
        }
        let t = t.min(self.t_end);
        if self.segments.is_empty() {
            return self.history.value_into(t.min(0.0), out);
        }
        // Segment k spans [mesh[k], mesh[k+1]].
        let idx = self.mesh.partition_point(|&m| m <= t);
        let k = idx.saturating_sub(1).min(self.segments.len() - 1);
        self.segments[k].eval_into(t, out);
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>, CoreError> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_component(&self, t: f64, c: usize) -> Result<f64, CoreError> {
        Ok(self.eval(t)?[c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toggle_history() -> HistoryFunction {
        HistoryFunction::constant(vec![0.5, 2.0], -0.5)
    }

    #[test]
    fn grid_derived_quantities() {
        let g = make_grid(4, 8, 100.0, 0.5).unwrap();
        assert_relative_eq!(g.macro_step(), 0.125);
        assert_relative_eq!(g.period(), 2.0 * std::f64::consts::PI / 100.0, max_relative = 1e-15);
        assert_relative_eq!(g.micro_step(), g.period() / 8.0, max_relative = 1e-15);
    }

    #[test]
    fn grid_borderline_ratio_is_feasible() {
        // H/T = 12.5 / (2 pi) = 1.9894..., accepted by the relaxed threshold.
        let g = make_grid(1, 2, 25.0, 0.5).unwrap();
        assert_relative_eq!(g.macro_step(), 0.5);
        assert!(g.macro_step() / g.period() > 1.98);
    }

    #[test]
    fn grid_half_ratio_is_infeasible() {
        let err = make_grid(2, 4, 25.0, 0.5).unwrap_err();
        assert!(matches!(err, CoreError::InfeasibleGrid { .. }));
    }

    #[test]
    fn step_points_are_exact_multiples() {
        let g = make_grid(8, 16, 200.0, 0.5).unwrap();
        for n in 0..=32 {
            assert_eq!(g.step_time(n), n as f64 * 0.5 / 8.0);
        }
        assert_eq!(g.macro_count(2.0), 32);
    }

    #[test]
    fn history_values_and_domain() {
        let h = toggle_history();
        assert_eq!(h.value(-0.3).unwrap(), vec![0.5, 2.0]);
        assert_eq!(h.value(0.0).unwrap(), vec![0.5, 2.0]);
        assert!(matches!(h.value(0.1), Err(CoreError::OutOfDomain { .. })));
        assert!(matches!(h.value(-0.7), Err(CoreError::OutOfDomain { .. })));
        // Roundoff past the ends is clamped.
        assert!(h.value(-0.5 - 1e-12).is_ok());
    }

    #[test]
    fn history_derivative_fallback_matches_centered_difference() {
        let eval: VecFn = Arc::new(|t, out| {
            out[0] = (3.0 * t).sin();
            out[1] = t * t;
        });
        let h = HistoryFunction::new(2, -1.0, eval);
        let d = h.derivative(-0.4);
        assert_relative_eq!(d[0], 3.0 * (3.0f64 * -0.4).cos(), max_relative = 1e-9);
        assert_relative_eq!(d[1], -0.8, max_relative = 1e-8);
    }

    #[test]
    fn hermite_reproduces_cubic() {
        // x(t) = t^3 on [1, 2]; endpoint values/slopes determine it exactly.
        let seg = HermiteSegment {
            t0: 1.0,
            t1: 2.0,
            x0: vec![1.0],
            x1: vec![8.0],
            f0: vec![3.0],
            f1: vec![12.0],
        };
        let mut out = [0.0];
        for t in [1.0, 1.25, 1.5, 1.9, 2.0] {
            seg.eval_into(t, &mut out);
            assert_relative_eq!(out[0], t * t * t, max_relative = 1e-14);
        }
    }

    proptest! {
        #[test]
        fn feasibility_is_monotone_in_omega(n in 1u32..64, omega in 1.0f64..500.0) {
            let tau = 0.5;
            if GridParams::new(n, 2, omega, tau).is_ok() {
                prop_assert!(GridParams::new(n, 2, 2.0 * omega, tau).is_ok());
            }
        }
    }
}

//! Method-of-steps adaptive Runge-Kutta DDE solver with dense output and
//! breakpoint tracking.
//!
//! The pair is a Bogacki-Shampine 3(2) with FSAL and cubic Hermite
//! interpolation. Third order is enough here: tolerances, not order, control
//! the reference accuracy, and low order copes with the limited smoothness of
//! averaged systems at delay multiples. Lagged states are read from the dense
//! output (or the history function); every multiple of each lag, and every
//! declared jump time, is forced onto the mesh for four propagation
//! generations.

use std::fmt;
use std::sync::Arc;

use crate::types::{
    AveragedProblem, DenseSolution, HermiteSegment, HistoryFunction,
    OscillatoryProblem,
};

/// Right-hand side with constant lags: `f(t, x, [x(t - lag_1), ...], out)`.
pub type LaggedFn = Arc<dyn Fn(f64, &[f64], &[&[f64]], &mut [f64]) + Send + Sync>;

/// A delay system in the form consumed by [`solve_dde`].
#[derive(Clone)]
pub struct LaggedRhs {
    pub dim: usize,
    /// Constant delays, strictly positive and ascending. Empty means ODE.
    pub lags: Vec<f64>,
    pub f: LaggedFn,
    /// Times where the rhs itself is discontinuous (e.g. an indicator switch);
    /// these seed breakpoint propagation alongside `t = 0`.
    pub jump_times: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    pub initial_step: Option<f64>,
    /// Hard cap on the step size (the oscillatory wrapper sets `T / 8`).
    pub max_step: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_steps: 20_000_000,
            initial_step: None,
            max_step: None,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }
}

#[derive(Debug)]
pub enum SolveError {
    /// Controller drove the step below representable resolution.
    StepSizeUnderflow { t: f64 },
    MaxStepsExceeded { t: f64 },
    /// A lagged query fell before the history domain.
    MissingHistory { t: f64 },
    InvalidInput { what: String },
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::StepSizeUnderflow { t } => write!(f, "step size underflow at t = {t}"),
            SolveError::MaxStepsExceeded { t } => write!(f, "maximum step count exceeded at t = {t}"),
            SolveError::MissingHistory { t } => write!(f, "lagged state requested at t = {t} before history"),
            SolveError::InvalidInput { what } => write!(f, "invalid input: {what}"),
        }
    }
}

impl std::error::Error for SolveError {}

const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;
/// PI controller exponents for an order-3 error estimator.
const PI_ALPHA: f64 = 0.7 / 3.0;
const PI_BETA: f64 = 0.4 / 3.0;

/// Breakpoints reachable from `t = 0` and the declared jump times by at most
/// `depth` lag additions (the derivative jump order rises by one per
/// crossing, so four generations cover the interpolation order).
fn propagation_breakpoints(lags: &[f64], jumps: &[f64], t_end: f64, depth: usize) -> Vec<f64> {
    let tol = 1e-12 * t_end.abs().max(1.0);
    let mut out: Vec<f64> = jumps
        .iter()
        .copied()
        .filter(|&b| b > tol && b <= t_end + tol)
        .collect();
    let mut frontier: Vec<f64> = vec![0.0];
    frontier.extend(jumps.iter().copied());
    for _ in 0..depth {
        let mut next = Vec::new();
        for &b in &frontier {
            for &lag in lags {
                let nb = b + lag;
                if nb <= t_end + tol {
                    next.push(nb);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        out.extend(next.iter().copied());
        frontier = next;
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup_by(|a, b| (*a - *b).abs() <= tol);
    out
}

struct LagWorkspace {
    bufs: Vec<Vec<f64>>,
}

impl LagWorkspace {
    fn new(n_lags: usize, dim: usize) -> Self {
        Self {
            bufs: vec![vec![0.0; dim]; n_lags],
        }
    }
}

/// Looks up the solution-so-far at `q`: history for `q <= 0`, otherwise the
/// Hermite segment containing `q`.
fn lookup(
    history: &HistoryFunction,
    mesh: &[f64],
    segments: &[HermiteSegment],
    q: f64,
    out: &mut [f64],
) -> Result<(), SolveError> {
    if q <= mesh[0] {
        return history
            .value_into(q, out)
            .map_err(|_| SolveError::MissingHistory { t: q });
    }
    let idx = mesh.partition_point(|&m| m <= q);
    let k = idx.saturating_sub(1).min(segments.len() - 1);
    segments[k].eval_into(q, out);
    Ok(())
}

struct Stepper<'a> {
    rhs: &'a LaggedRhs,
    history: &'a HistoryFunction,
    mesh: Vec<f64>,
    segments: Vec<HermiteSegment>,
    lag_ws: LagWorkspace,
}

impl<'a> Stepper<'a> {
    fn eval_f(&mut self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), SolveError> {
        for (i, &lag) in self.rhs.lags.iter().enumerate() {
            lookup(
                self.history,
                &self.mesh,
                &self.segments,
                t - lag,
                &mut self.lag_ws.bufs[i],
            )?;
        }
        let refs: Vec<&[f64]> = self.lag_ws.bufs.iter().map(|b| b.as_slice()).collect();
        (self.rhs.f)(t, x, &refs, out);
        Ok(())
    }
}

/// Solves a constant-lag DDE on `t_span = (0, t_end)` by the method of steps.
///
/// The local error of each step is kept below
/// `rel_tol * |x| + abs_tol` componentwise.
pub fn solve_dde(
    rhs: &LaggedRhs,
    history: &HistoryFunction,
    t_span: (f64, f64),
    config: &SolverConfig,
) -> Result<DenseSolution, SolveError> {
    run(rhs, history, t_span, config, None)
}

/// Fixed-step variant used by convergence studies: no error control, the step
/// is only shortened to land on breakpoints and the span end.
pub fn solve_dde_fixed(
    rhs: &LaggedRhs,
    history: &HistoryFunction,
    t_span: (f64, f64),
    step: f64,
) -> Result<DenseSolution, SolveError> {
    let config = SolverConfig {
        initial_step: Some(step),
        ..SolverConfig::default()
    };
    run(rhs, history, t_span, &config, Some(step))
}

fn run(
    rhs: &LaggedRhs,
    history: &HistoryFunction,
    t_span: (f64, f64),
    config: &SolverConfig,
    fixed_step: Option<f64>,
) -> Result<DenseSolution, SolveError> {
    let (t0, t_end) = t_span;
    let dim = rhs.dim;
    if t0 != 0.0 {
        return Err(SolveError::InvalidInput {
            what: "integration must start at t = 0 (history is anchored there)".into(),
        });
    }
    if !(t_end > t0) {
        return Err(SolveError::InvalidInput {
            what: "empty time span".into(),
        });
    }
    if rhs.lags.windows(2).any(|w| w[0] >= w[1]) || rhs.lags.iter().any(|&l| l <= 0.0) {
        return Err(SolveError::InvalidInput {
            what: "lags must be strictly positive and ascending".into(),
        });
    }
    if history.dim() != dim {
        return Err(SolveError::InvalidInput {
            what: "history dimension does not match the rhs".into(),
        });
    }
    if let Some(&max_lag) = rhs.lags.last() {
        if history.domain_left() > -max_lag + 1e-12 * max_lag {
            return Err(SolveError::MissingHistory { t: -max_lag });
        }
    }

    let breakpoints = propagation_breakpoints(&rhs.lags, &rhs.jump_times, t_end, 4);
    let mut bp_idx = 0usize;
    let min_lag = rhs.lags.first().copied();

    let mut stepper = Stepper {
        rhs,
        history,
        mesh: vec![t0],
        segments: Vec::new(),
        lag_ws: LagWorkspace::new(rhs.lags.len(), dim),
    };

    let mut x = history
        .value(0.0)
        .map_err(|_| SolveError::MissingHistory { t: 0.0 })?;
    let mut f_now = vec![0.0; dim];
    stepper.eval_f(t0, &x, &mut f_now)?;

    let hard_cap = |h: f64| -> f64 {
        let mut h = h;
        if let Some(m) = config.max_step {
            h = h.min(m);
        }
        if let Some(l) = min_lag {
            h = h.min(l);
        }
        h
    };

    let mut h = fixed_step
        .or(config.initial_step)
        .unwrap_or_else(|| hard_cap(1e-3 * (t_end - t0)).max(1e-10));
    h = hard_cap(h).min(t_end - t0);

    let mut t = t0;
    let mut err_prev: f64 = 1.0;
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut y_stage = vec![0.0; dim];
    let mut x_new = vec![0.0; dim];
    let mut steps = 0usize;

    let end_tol = 1e-12 * t_end.abs().max(1.0);
    while t < t_end - end_tol {
        steps += 1;
        if steps > config.max_steps {
            return Err(SolveError::MaxStepsExceeded { t });
        }

        let mut h_step = hard_cap(h).min(t_end - t);
        while bp_idx < breakpoints.len() && breakpoints[bp_idx] <= t + end_tol {
            bp_idx += 1;
        }
        let mut target: Option<f64> = None;
        if bp_idx < breakpoints.len() {
            let dist = breakpoints[bp_idx] - t;
            if h_step >= dist * (1.0 - 1e-9) {
                h_step = dist;
                target = Some(breakpoints[bp_idx]);
            }
        }
        if target.is_none() && h_step >= (t_end - t) * (1.0 - 1e-9) {
            h_step = t_end - t;
            target = Some(t_end);
        }
        if h_step <= 1e-14 * t.abs().max(1.0) {
            return Err(SolveError::StepSizeUnderflow { t });
        }

        // Bogacki-Shampine 3(2) stages; k1 = f_now (FSAL).
        for i in 0..dim {
            y_stage[i] = x[i] + 0.5 * h_step * f_now[i];
        }
        stepper.eval_f(t + 0.5 * h_step, &y_stage, &mut k2)?;
        for i in 0..dim {
            y_stage[i] = x[i] + 0.75 * h_step * k2[i];
        }
        stepper.eval_f(t + 0.75 * h_step, &y_stage, &mut k3)?;
        let t_new = target.unwrap_or(t + h_step);
        for i in 0..dim {
            x_new[i] = x[i] + h_step * (2.0 / 9.0 * f_now[i] + 1.0 / 3.0 * k2[i] + 4.0 / 9.0 * k3[i]);
        }
        stepper.eval_f(t_new, &x_new, &mut k4)?;

        let mut err_ratio = 0.0f64;
        for i in 0..dim {
            let e = h_step
                * (-5.0 / 72.0 * f_now[i] + 1.0 / 12.0 * k2[i] + 1.0 / 9.0 * k3[i]
                    - 1.0 / 8.0 * k4[i]);
            let tol = config.rel_tol * x[i].abs().max(x_new[i].abs()) + config.abs_tol;
            err_ratio = err_ratio.max((e / tol).abs());
        }

        let finite = x_new.iter().all(|v| v.is_finite()) && err_ratio.is_finite();
        let accept = fixed_step.is_some() || (finite && err_ratio <= 1.0);

        if accept {
            stepper.segments.push(HermiteSegment {
                t0: t,
                t1: t_new,
                x0: x.clone(),
                x1: x_new.clone(),
                f0: f_now.clone(),
                f1: k4.clone(),
            });
            stepper.mesh.push(t_new);
            t = t_new;
            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut f_now, &mut k4);
            if let Some(bp) = target {
                if bp_idx < breakpoints.len() && bp == breakpoints[bp_idx] {
                    bp_idx += 1;
                    // The rhs may jump across a breakpoint; refresh FSAL.
                    stepper.eval_f(t, &x, &mut f_now)?;
                }
            }
            if fixed_step.is_none() {
                let e = err_ratio.max(1e-10);
                let fac = (SAFETY * e.powf(-PI_ALPHA) * err_prev.powf(PI_BETA))
                    .clamp(MIN_SCALE, MAX_SCALE);
                h = h_step * fac;
                err_prev = e;
            } else {
                h = fixed_step.unwrap();
            }
        } else {
            let fac = if finite {
                (SAFETY * err_ratio.powf(-1.0 / 3.0)).max(MIN_SCALE)
            } else {
                0.5
            };
            h = h_step * fac;
        }
    }

    Ok(DenseSolution::new(
        dim,
        stepper.mesh,
        stepper.segments,
        history.clone(),
    ))
}

/// Solves the oscillatory problem itself (phase `theta = Omega t`), with the
/// step capped at an eighth of the forcing period.
pub fn solve_oscillatory(
    problem: &OscillatoryProblem,
    config: &SolverConfig,
) -> Result<DenseSolution, SolveError> {
    let omega = problem.omega;
    let rhs_inner = problem.rhs.clone();
    let f: LaggedFn = Arc::new(move |t, x, lagged, out| {
        rhs_inner(x, lagged[0], t, omega * t, omega, out)
    });
    let rhs = LaggedRhs {
        dim: problem.dim,
        lags: vec![problem.delay],
        f,
        jump_times: vec![],
    };
    let period = 2.0 * std::f64::consts::PI / omega;
    let mut cfg = config.clone();
    cfg.max_step = Some(match config.max_step {
        Some(m) => m.min(period / 8.0),
        None => period / 8.0,
    });
    solve_dde(&rhs, &problem.history, (0.0, problem.t_max), &cfg)
}

/// Solves an averaged problem with lags `tau` and `2 tau` and the phase
/// switch at `t = tau` declared as a jump time.
pub fn solve_averaged(
    problem: &AveragedProblem,
    t_max: f64,
    config: &SolverConfig,
) -> Result<DenseSolution, SolveError> {
    let tau = problem.delay;
    let omega = problem.omega;
    let dim = problem.dim;
    let phase1 = problem.rhs_phase1.clone();
    let phase2 = problem.rhs_phase2.clone();
    let hist_for_dphi = problem.history.clone();
    let f: LaggedFn = Arc::new(move |t, x, lagged, out| {
        if t < tau {
            let dphi = hist_for_dphi.derivative(t - tau);
            phase1(x, lagged[0], &dphi, t, omega, out);
        } else {
            phase2(x, lagged[0], lagged[1], t, omega, out);
        }
    });
    let rhs = LaggedRhs {
        dim,
        lags: vec![tau, 2.0 * tau],
        f,
        jump_times: vec![tau],
    };
    // The 2 tau lag is only consumed for t >= tau, where it falls inside the
    // original history domain; extend the domain by clamping so eager lag
    // lookups before tau stay well-defined.
    let inner = problem.history.clone();
    let left = inner.domain_left();
    let inner_d = problem.history.clone();
    let extended = HistoryFunction::new(
        dim,
        -2.0 * tau,
        Arc::new(move |t, out| {
            inner
                .value_into(t.max(left), out)
                .expect("clamped history query");
        }),
    )
    .with_derivative(Arc::new(move |t, out| {
        let d = inner_d.derivative(t.max(left));
        out.copy_from_slice(&d);
    }));
    solve_dde(&rhs, &extended, (0.0, t_max), config)
}

/// Estimates the solver's convergence order by fixed-step runs at `h`, `h/2`
/// and `h/4` against a tightly-toleranced adaptive reference.
pub fn self_convergence_order(
    rhs: &LaggedRhs,
    history: &HistoryFunction,
    t_span: (f64, f64),
) -> Result<f64, SolveError> {
    let tight = SolverConfig::with_tolerances(1e-12, 1e-14);
    let reference = solve_dde(rhs, history, t_span, &tight)?;
    let span = t_span.1 - t_span.0;
    let probes: Vec<f64> = (1..=32).map(|i| t_span.0 + span * i as f64 / 32.0).collect();
    let mut errors = Vec::new();
    for level in 0..3 {
        let h = span / (64.0 * (1 << level) as f64);
        let sol = solve_dde_fixed(rhs, history, t_span, h)?;
        let mut e = 0.0f64;
        for &p in &probes {
            let a = sol.eval(p).expect("probe in span");
            let b = reference.eval(p).expect("probe in span");
            for i in 0..rhs.dim {
                e = e.max((a[i] - b[i]).abs());
            }
        }
        errors.push(e.max(1e-16));
    }
    let o1 = (errors[0] / errors[1]).log2();
    let o2 = (errors[1] / errors[2]).log2();
    Ok(0.5 * (o1 + o2))
}

//! The SAM integrator: second-order Adams-Bashforth macro steps (Euler at the
//! slope discontinuities `t = 0` and `t = tau`) driven by slopes recovered
//! from Euler micro-integrations of the oscillatory problem.
//!
//! Every micro-integration restarts the fast phase at `theta = 0` so all
//! recovered slopes refer to one and the same stroboscopically averaged
//! system. Past micro values double as the delayed states one delay later,
//! which is what makes the cost per macro step independent of the frequency.

use std::fmt;

use crate::types::{CoreError, GridParams, OscillatoryProblem};

#[derive(Debug, Clone, PartialEq)]
pub enum SamError {
    /// A state component left the finite range during a micro step.
    NonFiniteState { macro_index: usize, micro_index: i64 },
    /// The micro trajectory needed as delayed history was already evicted.
    MissingHistory { macro_index: usize },
    Core(CoreError),
}

impl fmt::Display for SamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamError::NonFiniteState {
                macro_index,
                micro_index,
            } => write!(
                f,
                "non-finite state at macro step {macro_index}, micro step {micro_index}"
            ),
            SamError::MissingHistory { macro_index } => {
                write!(f, "micro history for macro step {macro_index} is not retained")
            }
            SamError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SamError {}

impl From<CoreError> for SamError {
    fn from(e: CoreError) -> Self {
        SamError::Core(e)
    }
}

/// One micro trajectory `u_{n, nu}` for `nu in [-nu_max, nu_max]`, stored
/// flat. Rows that were never computed stay NaN.
#[derive(Debug, Clone)]
pub struct MicroTrajectory {
    data: Vec<f64>,
    dim: usize,
    nu_max: u32,
    pub anchor_time: f64,
    pub has_backward: bool,
}

impl MicroTrajectory {
    fn empty(dim: usize, nu_max: u32, anchor_time: f64) -> Self {
        Self {
            data: vec![f64::NAN; (2 * nu_max as usize + 1) * dim],
            dim,
            nu_max,
            anchor_time,
            has_backward: false,
        }
    }

    /// Builds a trajectory from rows ordered `nu = -nu_max ..= nu_max`.
    pub fn from_rows(dim: usize, nu_max: u32, anchor_time: f64, rows: &[Vec<f64>]) -> Self {
        assert_eq!(rows.len(), 2 * nu_max as usize + 1);
        let mut t = Self::empty(dim, nu_max, anchor_time);
        for (i, row) in rows.iter().enumerate() {
            t.data[i * dim..(i + 1) * dim].copy_from_slice(row);
        }
        t.has_backward = true;
        t
    }

    fn offset(&self, nu: i32) -> usize {
        debug_assert!(nu.unsigned_abs() <= self.nu_max);
        (nu + self.nu_max as i32) as usize * self.dim
    }

    pub fn nu_max(&self) -> u32 {
        self.nu_max
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `u_{n, nu}`.
    pub fn value(&self, nu: i32) -> &[f64] {
        let o = self.offset(nu);
        &self.data[o..o + self.dim]
    }

    fn row_mut(&mut self, nu: i32) -> &mut [f64] {
        let o = self.offset(nu);
        &mut self.data[o..o + self.dim]
    }

    /// Copies the backward rows of `back` (nu < 0) into `self`.
    fn absorb_backward(&mut self, back: &MicroTrajectory) {
        let n = self.nu_max as i32;
        for nu in -n..0 {
            let o = self.offset(nu);
            self.data[o..o + self.dim].copy_from_slice(back.value(nu));
        }
        self.has_backward = true;
    }
}

/// Slope at a macro node and the difference formula that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeKind {
    Central,
    Forward,
}

#[derive(Debug, Clone)]
pub struct SlopeRecord {
    pub value: Vec<f64>,
    pub kind: SlopeKind,
}

/// Ring buffer keeping the micro trajectories of the most recent `N + 1`
/// macro indices; exactly one delay's worth is needed as future history.
#[derive(Debug, Clone)]
pub struct MicroStore {
    slots: Vec<Option<(usize, MicroTrajectory)>>,
}

impl MicroStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            slots: (0..capacity).map(|_| None).collect(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn insert(&mut self, n: usize, traj: MicroTrajectory) {
        let k = n % self.slots.len();
        self.slots[k] = Some((n, traj));
    }

    pub fn get(&self, n: usize) -> Option<&MicroTrajectory> {
        match &self.slots[n % self.slots.len()] {
            Some((stored, traj)) if *stored == n => Some(traj),
            _ => None,
        }
    }

    fn get_mut(&mut self, n: usize) -> Option<&mut MicroTrajectory> {
        let k = n % self.slots.len();
        match &mut self.slots[k] {
            Some((stored, traj)) if *stored == n => Some(traj),
            _ => None,
        }
    }

    /// Retained macro indices, ascending.
    pub fn retained(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.slots.iter().flatten().map(|(n, _)| *n).collect();
        v.sort_unstable();
        v
    }
}

/// Past values `v_{n, nu}` feeding one micro-integration, stored flat over
/// `nu in [lo, nu_max]`.
#[derive(Debug, Clone)]
pub struct HistorySlice {
    data: Vec<f64>,
    dim: usize,
    lo: i32,
}

impl HistorySlice {
    pub fn value(&self, nu: i32) -> &[f64] {
        debug_assert!(nu >= self.lo);
        let o = (nu - self.lo) as usize * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn lo(&self) -> i32 {
        self.lo
    }
}

/// Supplies the past values for macro step `n` per the history rules:
/// `phi(-tau + nH + nu h)` while the delayed window is still inside the
/// prescribed history (`n < N`), the `n = 0` micro trajectory completed with
/// `phi(nu h)` for the negative side at `n = N`, and the retained trajectory
/// `u_{n-N}` afterwards.
pub fn history_supplier(
    n: usize,
    store: &MicroStore,
    problem: &OscillatoryProblem,
    grid: &GridParams,
) -> Result<HistorySlice, SamError> {
    let lo = if n == 0 { 0 } else { -(grid.nu_max() as i32) };
    history_slice(n, store, problem, grid, lo)
}

fn history_slice(
    n: usize,
    store: &MicroStore,
    problem: &OscillatoryProblem,
    grid: &GridParams,
    lo: i32,
) -> Result<HistorySlice, SamError> {
    let dim = problem.dim;
    let nu_max = grid.nu_max() as i32;
    let h = grid.micro_step();
    let n_delay = grid.n_per_delay() as usize;
    let rows = (nu_max - lo + 1) as usize;
    let mut data = vec![0.0; rows * dim];

    let fill_phi = |data: &mut Vec<f64>, nu: i32, t_arg: f64| -> Result<(), SamError> {
        let o = (nu - lo) as usize * dim;
        problem.history.value_into(t_arg, &mut data[o..o + dim])?;
        Ok(())
    };

    if n < n_delay {
        let base = -grid.tau() + grid.step_time(n);
        for nu in lo..=nu_max {
            fill_phi(&mut data, nu, base + nu as f64 * h)?;
        }
    } else if n == n_delay {
        let u0 = store
            .get(0)
            .ok_or(SamError::MissingHistory { macro_index: n })?;
        for nu in 0..=nu_max {
            let o = (nu - lo) as usize * dim;
            data[o..o + dim].copy_from_slice(u0.value(nu));
        }
        for nu in lo..0 {
            fill_phi(&mut data, nu, nu as f64 * h)?;
        }
    } else {
        let past = store
            .get(n - n_delay)
            .ok_or(SamError::MissingHistory { macro_index: n })?;
        for nu in lo..=nu_max {
            let o = (nu - lo) as usize * dim;
            data[o..o + dim].copy_from_slice(past.value(nu));
        }
    }
    Ok(HistorySlice { data, dim, lo })
}

/// Euler forward leg over one period: fills rows `0 ..= nu_max` of a fresh
/// trajectory, restarting the phase at `theta = 0`.
pub fn micro_forward(
    problem: &OscillatoryProblem,
    grid: &GridParams,
    n: usize,
    x_n: &[f64],
    past: &HistorySlice,
) -> Result<MicroTrajectory, SamError> {
    let dim = problem.dim;
    let h = grid.micro_step();
    let omega = grid.omega();
    let t_n = grid.step_time(n);
    let mut traj = MicroTrajectory::empty(dim, grid.nu_max(), t_n);
    traj.row_mut(0).copy_from_slice(x_n);
    let mut slope = vec![0.0; dim];
    for nu in 0..grid.nu_max() as i32 {
        let t = t_n + nu as f64 * h;
        let theta = omega * nu as f64 * h;
        problem.eval_rhs(traj.value(nu), past.value(nu), t, theta, omega, &mut slope);
        let base = traj.offset(nu);
        for i in 0..dim {
            let v = traj.data[base + i] + h * slope[i];
            if !v.is_finite() {
                return Err(SamError::NonFiniteState {
                    macro_index: n,
                    micro_index: (nu + 1) as i64,
                });
            }
            traj.data[base + dim + i] = v;
        }
    }
    Ok(traj)
}

/// Euler backward leg over one period: fills rows `-nu_max ..= 0`, phase
/// `-Omega nu h`.
pub fn micro_backward(
    problem: &OscillatoryProblem,
    grid: &GridParams,
    n: usize,
    x_n: &[f64],
    past: &HistorySlice,
) -> Result<MicroTrajectory, SamError> {
    let dim = problem.dim;
    let h = grid.micro_step();
    let omega = grid.omega();
    let t_n = grid.step_time(n);
    let mut traj = MicroTrajectory::empty(dim, grid.nu_max(), t_n);
    traj.row_mut(0).copy_from_slice(x_n);
    let mut slope = vec![0.0; dim];
    for nu in 0..grid.nu_max() as i32 {
        let t = t_n - nu as f64 * h;
        let theta = -omega * nu as f64 * h;
        problem.eval_rhs(traj.value(-nu), past.value(-nu), t, theta, omega, &mut slope);
        let base = traj.offset(-nu);
        for i in 0..dim {
            let v = traj.data[base + i] - h * slope[i];
            if !v.is_finite() {
                return Err(SamError::NonFiniteState {
                    macro_index: n,
                    micro_index: -((nu + 1) as i64),
                });
            }
            traj.data[base - dim + i] = v;
        }
    }
    Ok(traj)
}

/// Central difference `(u_{n, nu_max} - u_{n, -nu_max}) / (2T)`.
pub fn slope_central(traj: &MicroTrajectory, period: f64) -> Vec<f64> {
    let fwd = traj.value(traj.nu_max as i32);
    let bwd = traj.value(-(traj.nu_max as i32));
    fwd.iter()
        .zip(bwd)
        .map(|(a, b)| (a - b) / (2.0 * period))
        .collect()
}

/// Forward difference `(u_{n, nu_max} - u_{n, 0}) / T`, used at the slope
/// discontinuities `n = 0` and `n = N`.
pub fn slope_forward(traj: &MicroTrajectory, period: f64) -> Vec<f64> {
    let fwd = traj.value(traj.nu_max as i32);
    let anchor = traj.value(0);
    fwd.iter()
        .zip(anchor)
        .map(|(a, b)| (a - b) / period)
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SamOptions {
    /// Use forward differences at every node and skip the backward legs.
    /// Falls back to `O(H^2 + 1/Omega)` accuracy; useful when neither
    /// hypothesis behind the second-order bound holds.
    pub forward_only: bool,
}

/// Macro solution with the retained micro trajectories.
#[derive(Debug, Clone)]
pub struct SamSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub micro_store: MicroStore,
    pub slopes: Vec<SlopeRecord>,
    eval_count: u64,
}

impl SamSolution {
    pub fn eval_count(&self) -> u64 {
        self.eval_count
    }

    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Total oscillatory-rhs evaluations of a completed solve; by construction a
/// function of `(N, nu_max, t_max, tau)` only, never of `Omega`.
pub fn count_rhs_evals(solution: &SamSolution) -> u64 {
    solution.eval_count
}

pub fn sam_solve(
    problem: &OscillatoryProblem,
    grid: &GridParams,
) -> Result<SamSolution, SamError> {
    sam_solve_with(problem, grid, SamOptions::default())
}

pub fn sam_solve_with(
    problem: &OscillatoryProblem,
    grid: &GridParams,
    opts: SamOptions,
) -> Result<SamSolution, SamError> {
    let dim = problem.dim;
    let n_delay = grid.n_per_delay() as usize;
    let m = grid.macro_count(problem.t_max);
    let h_macro = grid.macro_step();
    let period = grid.period();
    let nu_max = grid.nu_max();

    let mut store = MicroStore::new(n_delay + 1);
    let mut times = Vec::with_capacity(m + 1);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut slopes: Vec<SlopeRecord> = Vec::with_capacity(m + 1);
    let mut evals: u64 = 0;

    times.push(0.0);
    states.push(problem.history.value(0.0)?);

    for n in 0..=m {
        let two_legs = n >= 1 && !opts.forward_only;
        if n == n_delay && n >= 1 && !opts.forward_only {
            // Complete the n = 0 trajectory with phi(nu h) on the negative
            // side; it serves as full-width history from here on.
            let h_micro = grid.micro_step();
            let mut phi_row = vec![0.0; dim];
            if let Some(u0) = store.get_mut(0) {
                for nu in 1..=nu_max as i32 {
                    problem.history.value_into(-(nu as f64) * h_micro, &mut phi_row)?;
                    u0.row_mut(-nu).copy_from_slice(&phi_row);
                }
                u0.has_backward = true;
            }
        }

        let lo = if two_legs { -(nu_max as i32) } else { 0 };
        let past = history_slice(n, &store, problem, grid, lo)?;
        let x_n = states[n].clone();

        let mut traj = micro_forward(problem, grid, n, &x_n, &past)?;
        evals += nu_max as u64;
        if two_legs {
            let back = micro_backward(problem, grid, n, &x_n, &past)?;
            evals += nu_max as u64;
            traj.absorb_backward(&back);
        }

        let euler_node = n == 0 || n == n_delay;
        let (slope, kind) = if euler_node || opts.forward_only {
            (slope_forward(&traj, period), SlopeKind::Forward)
        } else {
            (slope_central(&traj, period), SlopeKind::Central)
        };
        store.insert(n, traj);

        if n < m {
            let next: Vec<f64> = if euler_node {
                x_n.iter()
                    .zip(&slope)
                    .map(|(x, f)| x + h_macro * f)
                    .collect()
            } else {
                let prev = &slopes[n - 1].value;
                (0..dim)
                    .map(|i| x_n[i] + 1.5 * h_macro * slope[i] - 0.5 * h_macro * prev[i])
                    .collect()
            };
            times.push(grid.step_time(n + 1));
            states.push(next);
        }
        slopes.push(SlopeRecord { value: slope, kind });
    }

    Ok(SamSolution {
        times,
        states,
        micro_store: store,
        slopes,
        eval_count: evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{make_grid, HistoryFunction};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn scalar_problem(
        rhs: impl Fn(&[f64], &[f64], f64, f64, f64) -> f64 + Send + Sync + 'static,
        t_max: f64,
    ) -> OscillatoryProblem {
        OscillatoryProblem {
            dim: 1,
            rhs: Arc::new(move |x, y, t, th, om, out| out[0] = rhs(x, y, t, th, om)),
            delay: 0.5,
            history: HistoryFunction::constant(vec![0.0], -0.5),
            t_max,
            omega: 100.0,
        }
    }

    #[test]
    fn micro_forward_zero_mean_mode_cancels() {
        let problem = scalar_problem(|_x, _y, _t, th, _om| th.sin(), 2.0);
        let grid = make_grid(1, 4, 100.0, 0.5).unwrap();
        let past = history_supplier(0, &MicroStore::new(2), &problem, &grid).unwrap();
        let traj = micro_forward(&problem, &grid, 0, &[0.0], &past).unwrap();
        let h = grid.micro_step();
        assert!((traj.value(2)[0] - h).abs() < 1e-16);
        assert!(traj.value(4)[0].abs() < 1e-16);
    }

    #[test]
    fn micro_legs_constant_rhs() {
        let problem = scalar_problem(|_, _, _, _, _| 3.0, 2.0);
        let grid = make_grid(2, 8, 100.0, 0.5).unwrap();
        let past = history_supplier(1, &MicroStore::new(3), &problem, &grid).unwrap();
        let fwd = micro_forward(&problem, &grid, 1, &[1.0], &past).unwrap();
        let bwd = micro_backward(&problem, &grid, 1, &[1.0], &past).unwrap();
        let t_period = grid.period();
        assert!((fwd.value(8)[0] - (1.0 + 3.0 * t_period)).abs() < 1e-14);
        assert!((bwd.value(-8)[0] - (1.0 - 3.0 * t_period)).abs() < 1e-14);
    }

    #[test]
    fn slope_arithmetic() {
        let rows: Vec<Vec<f64>> = vec![vec![0.8], vec![0.9], vec![1.0], vec![1.1], vec![1.2]];
        let traj = MicroTrajectory::from_rows(1, 2, 0.0, &rows);
        assert!((slope_central(&traj, 0.1)[0] - 2.0).abs() < 1e-14);
        let rows: Vec<Vec<f64>> = vec![vec![0.0], vec![0.0], vec![0.5], vec![0.55], vec![0.6]];
        let traj = MicroTrajectory::from_rows(1, 2, 0.0, &rows);
        assert!((slope_forward(&traj, 0.05)[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn history_rules_per_macro_index() {
        // phi(t) = t so the expected values are the query times themselves.
        let mut problem = scalar_problem(|_, _, _, _, _| 0.0, 2.0);
        problem.history = HistoryFunction::new(1, -0.5, Arc::new(|t, out| out[0] = t));
        let grid = make_grid(4, 8, 200.0, 0.5).unwrap();
        let h = grid.micro_step();
        let n_delay = 4usize;

        let mut store = MicroStore::new(n_delay + 1);
        let empty = history_supplier(0, &store, &problem, &grid).unwrap();
        assert!((empty.value(3)[0] - (-0.5 + 3.0 * h)).abs() < 1e-15);

        // Plant trajectories u_0 .. u_3 with recognizable values 100 n + nu.
        for n in 0..n_delay {
            let rows: Vec<Vec<f64>> = (-8..=8).map(|nu| vec![100.0 * n as f64 + nu as f64]).collect();
            store.insert(n, MicroTrajectory::from_rows(1, 8, grid.step_time(n), &rows));
        }

        let at_n = history_supplier(n_delay, &store, &problem, &grid).unwrap();
        assert_eq!(at_n.value(5)[0], 5.0); // u_{0,5}
        assert!((at_n.value(-2)[0] - (-2.0 * h)).abs() < 1e-15); // phi(-2h)

        let later = history_supplier(n_delay + 3, &store, &problem, &grid).unwrap();
        assert_eq!(later.value(5)[0], 305.0); // u_{3,5}

        let missing = history_supplier(2 * n_delay + 2, &store, &problem, &grid);
        assert!(matches!(missing, Err(SamError::MissingHistory { .. })));
    }

    #[test]
    fn constant_rhs_macro_exactness() {
        let problem = scalar_problem(|_, _, _, _, _| 1.0, 2.0);
        let grid = make_grid(2, 4, 100.0, 0.5).unwrap();
        let sol = sam_solve(&problem, &grid).unwrap();
        assert_eq!(sol.len(), grid.macro_count(2.0) + 1);
        for (n, x) in sol.states.iter().enumerate() {
            let exact = grid.step_time(n);
            // Rounding through the Euler sums and the slope quotients
            // accumulates to a few tens of ulps over the span.
            assert!(
                (x[0] - exact).abs() <= 64.0 * f64::EPSILON * exact.max(1.0),
                "n={n}: {} vs {exact}",
                x[0]
            );
        }
    }

    #[test]
    fn slope_kinds_sit_at_breakpoints() {
        let problem = scalar_problem(|_, _, _, th, _| 1.0 + 0.3 * th.sin(), 2.0);
        let grid = make_grid(4, 8, 200.0, 0.5).unwrap();
        let sol = sam_solve(&problem, &grid).unwrap();
        for (n, rec) in sol.slopes.iter().enumerate() {
            let expect = if n == 0 || n == 4 {
                SlopeKind::Forward
            } else {
                SlopeKind::Central
            };
            assert_eq!(rec.kind, expect, "slope kind at n = {n}");
        }
    }

    #[test]
    fn eval_count_closed_form() {
        let problem = scalar_problem(|_, _, _, th, _| th.cos(), 2.0);
        let grid = make_grid(1, 2, 25.0, 0.5).unwrap();
        let sol = sam_solve(&problem, &grid).unwrap();
        // M = 4 macro steps: nu_max + 2 nu_max M = 2 + 16.
        assert_eq!(count_rhs_evals(&sol), 18);
    }

    #[test]
    fn eval_count_is_omega_free() {
        let problem = scalar_problem(|_, _, _, th, _| th.cos(), 2.0);
        let c1 = {
            let grid = make_grid(1, 8, 8.0 * std::f64::consts::PI, 0.5).unwrap();
            count_rhs_evals(&sam_solve(&problem, &grid).unwrap())
        };
        let c2 = {
            let grid = make_grid(1, 8, 1024.0 * std::f64::consts::PI, 0.5).unwrap();
            count_rhs_evals(&sam_solve(&problem, &grid).unwrap())
        };
        assert_eq!(c1, c2);
    }

    #[test]
    fn forward_only_variant_uses_forward_slopes_everywhere() {
        let problem = scalar_problem(|_, _, _, th, _| 1.0 + th.sin(), 2.0);
        let grid = make_grid(2, 4, 100.0, 0.5).unwrap();
        let sol = sam_solve_with(&problem, &grid, SamOptions { forward_only: true }).unwrap();
        assert!(sol.slopes.iter().all(|r| r.kind == SlopeKind::Forward));
        assert_eq!(count_rhs_evals(&sol), 4 * (sol.len() as u64));
    }

    #[test]
    fn non_finite_states_are_reported_with_coordinates() {
        let problem = scalar_problem(|x, _, _, _, _| x[0] * 1e300, 2.0);
        let mut p = problem;
        p.history = HistoryFunction::constant(vec![1.0e8], -0.5);
        let grid = make_grid(2, 4, 100.0, 0.5).unwrap();
        let err = sam_solve(&p, &grid).unwrap_err();
        assert!(matches!(err, SamError::NonFiniteState { .. }));
    }

    proptest! {
        /// Full-period Euler quadrature is exact on pure oscillatory modes:
        /// the forward leg returns to its seed for rhs = cos(k theta) or
        /// sin(k theta), 1 <= k < nu_max.
        #[test]
        fn quadrature_exact_on_fourier_modes(k in 1u32..16, nu_pow in 2u32..6, use_sin in any::<bool>()) {
            let nu_max = 1u32 << nu_pow; // 4..32
            prop_assume!(k < nu_max);
            let problem = scalar_problem(
                move |_x, _y, _t, th, _om| if use_sin { (k as f64 * th).sin() } else { (k as f64 * th).cos() },
                2.0,
            );
            let grid = make_grid(1, nu_max, 50.0, 0.5).unwrap();
            let past = history_supplier(0, &MicroStore::new(2), &problem, &grid).unwrap();
            let traj = micro_forward(&problem, &grid, 0, &[0.25], &past).unwrap();
            let drift = (traj.value(nu_max as i32)[0] - 0.25).abs();
            prop_assert!(drift <= 1e-14, "drift {drift} for k={k}, nu_max={nu_max}");
        }
    }
}

//! Finite-difference engine for `D_t u = A(t)u`, `u(s) = f` on `[-L, L]^d`, `d <= 2`.
//!
//! θ-scheme in time (Crank–Nicolson by default, with a few implicit Euler start-up steps
//! to damp rough data), centered second differences including the mixed term, centered
//! first differences that switch to upwinding per cell when `|b|Δx / (2λ_min(Q)) > 1`.
//! The Neumann condition is imposed by reflecting ghost nodes, so every row of the
//! discrete operator sums to zero and constants are preserved exactly.

pub mod grid;
pub mod sparse;

pub use grid::{GridFunction, SpatialGrid};

use crate::coefficient_model::{CoefficientModel, LyapunovSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sde::TimeGrid;
use serde::{Deserialize, Serialize};
use sparse::Csr;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Boundary {
    #[default]
    Neumann,
    /// boundary nodes held at a constant
    Dirichlet { value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdConfig {
    /// 1 = implicit Euler, 0.5 = Crank–Nicolson
    pub theta: f64,
    pub dt: f64,
    pub upwind: bool,
    pub boundary: Boundary,
    /// implicit Euler steps at the start of a solve
    pub startup_steps: usize,
    /// relative residual for the iterative solver (d = 2)
    pub solver_tol: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            dt: 1e-3,
            upwind: true,
            boundary: Boundary::Neumann,
            startup_steps: 2,
            solver_tol: 1e-12,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.theta) || !(self.dt > 0.0) || !(self.solver_tol > 0.0) {
            return Err(Error::Config(format!(
                "finite differences need theta in [0.5, 1], dt > 0, solver_tol > 0 (got theta = {}, dt = {}, solver_tol = {})",
                self.theta, self.dt, self.solver_tol
            )));
        }
        Ok(())
    }

    pub fn refined(&self) -> Self {
        Self { dt: self.dt / 2.0, ..*self }
    }
}

/// Bookkeeping from a solve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub steps: usize,
    /// share of (node, assembly) pairs where upwinding was engaged
    pub upwind_fraction: f64,
    pub max_solver_iterations: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct FdSolution {
    /// one per requested time, in request order
    pub snapshots: Vec<GridFunction>,
    pub stats: SolveStats,
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i > n - 1 {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Discrete `A(t)`.
#[derive(Clone, Debug)]
enum Operator {
    /// rows as (coefficient of u_{i-1}, u_i, u_{i+1})
    Tri { lo: Vec<f64>, di: Vec<f64>, up: Vec<f64> },
    Sparse(Csr),
}

impl Operator {
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        match self {
            Operator::Tri { lo, di, up } => {
                let n = di.len();
                for i in 0..n {
                    let mut v = di[i] * u[i];
                    if i > 0 {
                        v += lo[i] * u[i - 1];
                    }
                    if i + 1 < n {
                        v += up[i] * u[i + 1];
                    }
                    out[i] = v;
                }
            }
            Operator::Sparse(a) => a.mul(u, out),
        }
    }
}

struct Counters {
    upwinded: usize,
    cells: usize,
}

fn assemble(model: &CoefficientModel, t: f64, grid: &SpatialGrid, cfg: &FdConfig, cnt: &mut Counters) -> Result<Operator> {
    let n = grid.nodes;
    let h = grid.dx;
    let h2 = h * h;
    let dirichlet = matches!(cfg.boundary, Boundary::Dirichlet { .. });
    let mut q = [0.0; 9];
    let mut b = [0.0; 3];
    // coefficients for the (minus, centre, plus) neighbours along one axis
    let axis = |qa: f64, ba: f64, lam: f64, cnt_up: &mut bool| -> (f64, f64, f64) {
        if cfg.upwind && ba.abs() * h / (2.0 * lam) > 1.0 {
            *cnt_up = true;
            if ba > 0.0 {
                (qa / h2, -2.0 * qa / h2 - ba / h, qa / h2 + ba / h)
            } else {
                (qa / h2 - ba / h, -2.0 * qa / h2 + ba / h, qa / h2)
            }
        } else {
            (qa / h2 - ba / (2.0 * h), -2.0 * qa / h2, qa / h2 + ba / (2.0 * h))
        }
    };
    if grid.dim == 1 {
        let mut lo = vec![0.0; n];
        let mut di = vec![0.0; n];
        let mut up = vec![0.0; n];
        for i in 0..n {
            if dirichlet && (i == 0 || i == n - 1) {
                continue;
            }
            let x = [grid.coord(i)];
            model.diffusion_into(t, &x, &mut q)?;
            model.drift_into(t, &x, &mut b)?;
            let mut engaged = false;
            let (cm, c0, cp) = axis(q[0], b[0], q[0], &mut engaged);
            cnt.cells += 1;
            cnt.upwinded += engaged as usize;
            di[i] += c0;
            // reflected ghosts fold onto the interior neighbour
            if i == 0 {
                up[i] += cm + cp;
            } else if i == n - 1 {
                lo[i] += cm + cp;
            } else {
                lo[i] += cm;
                up[i] += cp;
            }
        }
        return Ok(Operator::Tri { lo, di, up });
    }

    let mut a = Csr::with_capacity(grid.len(), 9 * grid.len());
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(16);
    for k in 0..grid.len() {
        row.clear();
        let [i, j] = grid.unflatten(k);
        let on_edge = i == 0 || j == 0 || i == n - 1 || j == n - 1;
        if !(dirichlet && on_edge) {
            let x = [grid.coord(i), grid.coord(j)];
            model.diffusion_into(t, &x, &mut q)?;
            model.drift_into(t, &x, &mut b)?;
            let lam = linalg::min_eigenvalue(2, &q[..4]);
            let mut engaged = false;
            let (xm, x0, xp) = axis(q[0], b[0], lam, &mut engaged);
            let (ym, y0, yp) = axis(q[3], b[1], lam, &mut engaged);
            cnt.cells += 1;
            cnt.upwinded += engaged as usize;
            let (ii, jj) = (i as isize, j as isize);
            let at = |di: isize, dj: isize| grid.flatten(reflect(ii + di, n), reflect(jj + dj, n));
            row.push((k, x0 + y0));
            row.push((at(-1, 0), xm));
            row.push((at(1, 0), xp));
            row.push((at(0, -1), ym));
            row.push((at(0, 1), yp));
            // 2 q12 u_xy
            let c = q[1] / (2.0 * h2);
            if c != 0.0 {
                row.push((at(1, 1), c));
                row.push((at(-1, -1), c));
                row.push((at(1, -1), -c));
                row.push((at(-1, 1), -c));
            }
        }
        a.push_row(&mut row);
    }
    Ok(Operator::Sparse(a))
}

/// Solves `(I - θΔt A) u = rhs` in place.
fn implicit_solve(op: &Operator, theta_dt: f64, rhs: &mut [f64], guess: &[f64], cfg: &FdConfig, scratch: &mut Vec<f64>) -> Result<usize> {
    match op {
        Operator::Tri { lo, di, up } => {
            let l: Vec<f64> = lo.iter().map(|v| -theta_dt * v).collect();
            let d: Vec<f64> = di.iter().map(|v| 1.0 - theta_dt * v).collect();
            let u: Vec<f64> = up.iter().map(|v| -theta_dt * v).collect();
            linalg::solve_tridiagonal(&l, &d, &u, rhs, scratch)
                .ok_or_else(|| Error::LinearSolve("vanishing pivot in tridiagonal solve".into()))?;
            Ok(1)
        }
        Operator::Sparse(a) => {
            let mut m = Csr::with_capacity(a.n, a.vals.len());
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(16);
            for i in 0..a.n {
                row.clear();
                row.push((i, 1.0));
                for p in a.row_ptr[i]..a.row_ptr[i + 1] {
                    row.push((a.cols[p], -theta_dt * a.vals[p]));
                }
                m.push_row(&mut row);
            }
            let b = rhs.to_vec();
            rhs.copy_from_slice(guess);
            sparse::bicgstab(&m, &b, rhs, cfg.solver_tol, 5000)
        }
    }
}

fn check_model(model: &CoefficientModel, grid: &SpatialGrid) -> Result<()> {
    if model.dim() != grid.dim {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: grid.dim, context: "grid vs model" });
    }
    Ok(())
}

/// Steps `u0` (stamped with its start time) through the ascending `times`, recording each.
/// `startup` implicit steps are taken at the very beginning.
pub fn solve_from(
    model: &CoefficientModel,
    u0: &GridFunction,
    times: &[f64],
    cfg: &FdConfig,
    startup: usize,
) -> Result<FdSolution> {
    cfg.validate()?;
    check_model(model, &u0.grid)?;
    let grid = u0.grid;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    if let Some(&first) = order.first() {
        if times[first] < u0.time {
            return Err(Error::Config(format!("requested time {} precedes the start {}", times[first], u0.time)));
        }
    }
    let mut u = u0.values.clone();
    if let Boundary::Dirichlet { value } = cfg.boundary {
        for k in 0..grid.len() {
            let [i, j] = grid.unflatten(k);
            let n = grid.nodes;
            if i == 0 || i == n - 1 || (grid.dim == 2 && (j == 0 || j == n - 1)) {
                u[k] = value;
            }
        }
    }
    let mut cnt = Counters { upwinded: 0, cells: 0 };
    let autonomous = model.is_autonomous();
    let mut cached: Option<Operator> = None;
    let mut op_at = |t: f64, cnt: &mut Counters| -> Result<Operator> {
        if autonomous {
            if cached.is_none() {
                cached = Some(assemble(model, t, &grid, cfg, cnt)?);
            }
            Ok(cached.clone().expect("cached operator"))
        } else {
            assemble(model, t, &grid, cfg, cnt)
        }
    };
    let mut stats = SolveStats::default();
    let mut snaps: Vec<Option<GridFunction>> = vec![None; times.len()];
    let mut current = u0.time;
    let mut explicit = op_at(current, &mut cnt)?;
    let mut au = vec![0.0; grid.len()];
    let mut scratch = Vec::new();
    for idx in order {
        let target = times[idx];
        let tg = TimeGrid::new(current, target, cfg.dt)?;
        for k in 0..tg.steps {
            let h = tg.step_len(k);
            let t_next = if k + 1 == tg.steps { target } else { current + tg.offset(k + 1) };
            let theta = if stats.steps < startup { 1.0 } else { cfg.theta };
            let implicit = op_at(t_next, &mut cnt)?;
            let mut rhs = u.clone();
            if theta < 1.0 {
                explicit.apply(&u, &mut au);
                for (r, a) in rhs.iter_mut().zip(&au) {
                    *r += (1.0 - theta) * h * a;
                }
            }
            let it = implicit_solve(&implicit, theta * h, &mut rhs, &u, cfg, &mut scratch)?;
            stats.max_solver_iterations = stats.max_solver_iterations.max(it);
            if let Some(p) = rhs.iter().position(|v| !v.is_finite()) {
                let mut x = vec![0.0; grid.dim];
                grid.point(p, &mut x);
                return Err(Error::NonFinite { what: "finite-difference solution", t: t_next, x });
            }
            u = rhs;
            explicit = implicit;
            stats.steps += 1;
        }
        current = target;
        snaps[idx] = Some(GridFunction { grid, values: u.clone(), time: target });
    }
    stats.upwind_fraction = if cnt.cells > 0 { cnt.upwinded as f64 / cnt.cells as f64 } else { 0.0 };
    if stats.upwind_fraction > 0.5 {
        let msg = format!(
            "upwinding engaged on {:.0}% of cells; first-order accuracy dominates, refine dx",
            100.0 * stats.upwind_fraction
        );
        // once per process: sweeps solve thousands of times on the same grid
        static WARNED: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);
        if WARNED.swap(true, std::sync::atomic::Ordering::Relaxed) {
            log::debug!("{msg}");
        } else {
            log::warn!("{msg}");
        }
        stats.warnings.push(msg);
    }
    Ok(FdSolution { snapshots: snaps.into_iter().map(|s| s.expect("snapshot filled")).collect(), stats })
}

/// `G(t,s)f` at every requested `t`.
pub fn solve_snapshots(
    model: &CoefficientModel,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    s: f64,
    times: &[f64],
    grid: &SpatialGrid,
    cfg: &FdConfig,
) -> Result<FdSolution> {
    let u0 = GridFunction::from_fn(*grid, s, f)?;
    solve_from(model, &u0, times, cfg, cfg.startup_steps)
}

/// `G(t,s)f` on the grid.
pub fn solve_forward(
    model: &CoefficientModel,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    s: f64,
    t: f64,
    grid: &SpatialGrid,
    cfg: &FdConfig,
) -> Result<GridFunction> {
    Ok(solve_snapshots(model, f, s, &[t], grid, cfg)?.snapshots.remove(0))
}

/// `max |G(t,s)f - G(t,r)G(r,s)f|` on `B_{L/2}`. The restarted leg takes no start-up
/// steps, so with `r - s` a multiple of `Δt` both paths perform the same steps.
pub fn evolution_law_residual(
    model: &CoefficientModel,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    s: f64,
    r: f64,
    t: f64,
    grid: &SpatialGrid,
    cfg: &FdConfig,
) -> Result<f64> {
    if !(s <= r && r <= t) {
        return Err(Error::Config(format!("need s <= r <= t (got {s}, {r}, {t})")));
    }
    let direct = solve_forward(model, f, s, t, grid, cfg)?;
    let mid = solve_forward(model, f, s, r, grid, cfg)?;
    let startup = if r == s { cfg.startup_steps } else { 0 };
    let restarted = solve_from(model, &mid, &[t], cfg, startup)?.snapshots.remove(0);
    Ok(direct.max_diff_within(&restarted, grid.half_width / 2.0))
}

#[derive(Clone, Debug)]
pub struct RefineReport {
    pub coarse: GridFunction,
    /// Δx/2, Δt/2
    pub refined: GridFunction,
    /// Δx/2, Δt/2, 2L
    pub widened: GridFunction,
    /// Δx/4, Δt/4 (optional)
    pub finest: Option<GridFunction>,
    /// `max |coarse - refined|` on `B_{L/2}`
    pub refine_diff: f64,
    /// `max |refined - widened|` on `B_{L/2}`
    pub domain_diff: f64,
    /// `max |refined - finest|` on `B_{L/2}`
    pub finest_diff: Option<f64>,
    /// `refine_diff / finest_diff`
    pub ratio: Option<f64>,
    pub converged: bool,
}

/// Runs `(Δx, Δt, L)`, `(Δx/2, Δt/2, L)`, `(Δx/2, Δt/2, 2L)` and optionally
/// `(Δx/4, Δt/4, L)`, comparing on `B_{L/2}`.
pub fn refine_check(
    model: &CoefficientModel,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    s: f64,
    t: f64,
    grid: &SpatialGrid,
    cfg: &FdConfig,
    with_finest: bool,
) -> Result<RefineReport> {
    let r = grid.half_width / 2.0;
    let coarse = solve_forward(model, f, s, t, grid, cfg)?;
    let fine_grid = grid.refined();
    let fine_cfg = cfg.refined();
    let refined = solve_forward(model, f, s, t, &fine_grid, &fine_cfg)?;
    let widened = solve_forward(model, f, s, t, &fine_grid.widened(), &fine_cfg)?;
    let refine_diff = coarse.max_diff_within(&refined, r);
    let domain_diff = refined.max_diff_within(&widened, r);
    let finest = if with_finest {
        Some(solve_forward(model, f, s, t, &fine_grid.refined(), &fine_cfg.refined())?)
    } else {
        None
    };
    let finest_diff = finest.as_ref().map(|u| coarse.max_diff_within(u, r).min(f64::INFINITY)).map(|_| {
        // compare on the coarse nodes so all three differences use the same points
        let u = finest.as_ref().expect("finest");
        let mut p = [0.0; 2];
        coarse
            .grid
            .nodes_within(r)
            .into_iter()
            .map(|k| {
                coarse.grid.point(k, &mut p);
                let x = &p[..grid.dim];
                (refined.interpolate(x) - u.interpolate(x)).abs()
            })
            .fold(0.0, f64::max)
    });
    let ratio = finest_diff.map(|fd| if fd > 0.0 { refine_diff / fd } else { f64::INFINITY });
    let converged = refine_diff <= 1e-10 || ratio.is_none_or(|q| q >= 1.9);
    if !converged {
        log::warn!("refinement ratio {:?} below first order", ratio);
    }
    Ok(RefineReport { coarse, refined, widened, finest, refine_diff, domain_diff, finest_diff, ratio, converged })
}

/// Smallest half-width `L` (on a 0.5 grid, at least 2) with `V > a/κ + margin` on every
/// axis point at distance `L`; the Lyapunov condition confines mass inside.
pub fn suggest_half_width(lyap: &LyapunovSpec, d: usize, a: f64, kappa: f64, margin: f64) -> f64 {
    let level = a / kappa + margin;
    let mut l = 2.0;
    while l < 1e3 {
        let ok = (0..d).all(|k| {
            [1.0, -1.0].iter().all(|sgn| {
                let mut x = vec![0.0; d];
                x[k] = sgn * l;
                lyap.value(&x) > level
            })
        });
        if ok {
            return l;
        }
        l += 0.5;
    }
    l
}

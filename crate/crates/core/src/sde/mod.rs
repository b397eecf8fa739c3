//! Particle engine for `dX = b dt + σ dW`, `σσᵀ = 2Q`.
//!
//! Two coefficient schedules share one integrator:
//! - forward: coefficients at the natural time of the simulation clock;
//! - reversed: on `τ ∈ [s,t]` coefficients are taken at `s + t - τ`. Then
//!   `E f(Y_t)` with `Y_s = x` solves `D_t u = A(t)u`, `u(s) = f`, i.e. it estimates
//!   `(G(t,s)f)(x)`. The same run read the other way pulls a measure back:
//!   if `Y_s ~ μ_t`, then `Y_t ~ μ_s` for an evolution system of measures.

pub mod snapshot;

use crate::coefficient_model::CoefficientModel;
use crate::error::{Error, Result};
use crate::linalg::{self, MatBuf, VecBuf};
use crate::rng::{SeedLineage, BLOCK_SIZE};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Uniform grid on `[start, end]`; the last step is shortened to land exactly on `end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(start: f64, end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !start.is_finite() || !end.is_finite() || end < start {
            return Err(Error::Config(format!(
                "time grid needs start <= end and dt > 0 (got [{start}, {end}], dt = {dt})"
            )));
        }
        let steps = ((end - start) / dt - 1e-9).ceil().max(0.0) as usize;
        Ok(Self { start, end, dt, steps })
    }

    /// Elapsed time at the beginning of step `k`.
    #[inline]
    pub fn offset(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Length of step `k`.
    #[inline]
    pub fn step_len(&self, k: usize) -> f64 {
        if k + 1 == self.steps {
            (self.end - self.start) - self.offset(k)
        } else {
            self.dt
        }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// `x + bΔt/(1 + Δt|b|) + σΔW`
    #[default]
    TamedEuler,
    /// `y = x + Δt b(y) + σΔW`, solved by Newton's method
    SemiImplicitDrift,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    /// eigenvalues of Q below this are rejected
    pub psd_floor: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::TamedEuler,
            dt: 1e-2,
            psd_floor: 1e-10,
        }
    }
}

impl IntegratorConfig {
    pub fn with_dt(dt: f64) -> Self {
        Self { dt, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.psd_floor >= 0.0) {
            return Err(Error::Config(format!(
                "integrator needs dt > 0 and psd_floor >= 0 (got dt = {}, psd_floor = {})",
                self.dt, self.psd_floor
            )));
        }
        Ok(())
    }
}

/// How the initial cloud is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    /// all particles at one point (the origin if empty)
    PointMass {
        #[serde(default)]
        at: Vec<f64>,
    },
    /// `Normal(0, variance · I)`
    Normal { variance: f64 },
    /// explicit positions, row-major
    Cloud { positions: Vec<f64> },
}

impl InitSpec {
    pub fn label(&self) -> String {
        match self {
            InitSpec::PointMass { at } if at.iter().all(|v| *v == 0.0) => "point-mass(0)".into(),
            InitSpec::PointMass { at } => format!("point-mass({at:?})"),
            InitSpec::Normal { variance } => format!("normal(0,{variance})"),
            InitSpec::Cloud { positions } => format!("cloud({} values)", positions.len()),
        }
    }
}

/// Equal-weight particle cloud at a time stamp.
///
/// After a reversed-schedule run the stamp is the coefficient time reached at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    pub time: f64,
    pub dim: usize,
    /// row-major `len() × dim`
    pub positions: Vec<f64>,
    pub lineage: SeedLineage,
}

impl ParticleEnsemble {
    pub fn new(time: f64, dim: usize, positions: Vec<f64>, lineage: SeedLineage) -> Result<Self> {
        if dim == 0 || dim > crate::MAX_DIM {
            return Err(Error::UnsupportedDimension(dim));
        }
        if !positions.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: positions.len() % dim,
                context: "ensemble positions are not a multiple of the dimension",
            });
        }
        if let Some(i) = positions.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "ensemble position",
                t: time,
                x: positions[(i / dim) * dim..(i / dim + 1) * dim].to_vec(),
            });
        }
        Ok(Self { time, dim, positions, lineage })
    }

    /// Draws `n` particles; consumes one lineage epoch if randomness is needed.
    pub fn sample(init: &InitSpec, n: usize, dim: usize, time: f64, lineage: SeedLineage) -> Result<Self> {
        match init {
            InitSpec::PointMass { at } => {
                let at = if at.is_empty() { vec![0.0; dim] } else { at.clone() };
                if at.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: at.len(), context: "point mass" });
                }
                Self::new(time, dim, at.repeat(n), lineage)
            }
            InitSpec::Normal { variance } => {
                if !(*variance >= 0.0) {
                    return Err(Error::Config(format!("initial variance must be >= 0 (got {variance})")));
                }
                let sd = variance.sqrt();
                let mut positions = vec![0.0; n * dim];
                positions
                    .par_chunks_mut(BLOCK_SIZE * dim)
                    .enumerate()
                    .for_each(|(b, chunk)| {
                        let mut rng = lineage.block_rng(b as u64);
                        for v in chunk {
                            let z: f64 = rng.sample(StandardNormal);
                            *v = sd * z;
                        }
                    });
                Self::new(time, dim, positions, lineage.advance())
            }
            InitSpec::Cloud { positions } => {
                if positions.len() != n * dim {
                    return Err(Error::DimensionMismatch {
                        expected: n * dim,
                        got: positions.len(),
                        context: "explicit initial cloud",
                    });
                }
                Self::new(time, dim, positions.clone(), lineage)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> std::slice::ChunksExact<'_, f64> {
        self.positions.chunks_exact(self.dim)
    }

    /// Coordinate `k` of every particle.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.particles().map(|p| p[k]).collect()
    }

    pub fn mean_of<F: Fn(&[f64]) -> f64 + Sync>(&self, f: F) -> f64 {
        self.particles().map(f).sum::<f64>() / self.len() as f64
    }
}

/// Symmetric square root of `2Q`.
pub fn diffusion_factor(d: usize, q: &[f64], psd_floor: f64) -> Result<MatBuf> {
    let mut s = [0.0; 9];
    if d == 1 {
        if !(q[0] >= psd_floor) {
            return Err(Error::DegenerateDiffusion { eigenvalue: q[0], floor: psd_floor });
        }
        s[0] = (2.0 * q[0]).sqrt();
        return Ok(s);
    }
    let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || q[i * d + j] == 0.0));
    if diagonal {
        for i in 0..d {
            let l = q[i * d + i];
            if !(l >= psd_floor) {
                return Err(Error::DegenerateDiffusion { eigenvalue: l, floor: psd_floor });
            }
            s[i * d + i] = (2.0 * l).sqrt();
        }
        return Ok(s);
    }
    let (vals, vecs) = linalg::sym_eigen(d, q);
    if !(vals[0] >= psd_floor) {
        return Err(Error::DegenerateDiffusion { eigenvalue: vals[0], floor: psd_floor });
    }
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = (0..d)
                .map(|k| vecs[i * d + k] * (2.0 * vals[k]).sqrt() * vecs[j * d + k])
                .sum();
        }
    }
    Ok(s)
}

/// One step of the scheme from `x` with coefficients frozen at `coeff_t`, Brownian
/// increment `dw` (already scaled by `√h`). Writes the new position into `out`.
pub fn step(
    model: &CoefficientModel,
    cfg: &IntegratorConfig,
    coeff_t: f64,
    h: f64,
    x: &[f64],
    dw: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let d = model.dim();
    if d == 1 && cfg.scheme == Scheme::TamedEuler {
        let (mut q, mut b) = ([0.0; 1], [0.0; 1]);
        model.diffusion_into(coeff_t, x, &mut q)?;
        if !(q[0] >= cfg.psd_floor) {
            return Err(Error::DegenerateDiffusion { eigenvalue: q[0], floor: cfg.psd_floor });
        }
        model.drift_into(coeff_t, x, &mut b)?;
        out[0] = x[0] + h * b[0] / (1.0 + h * b[0].abs()) + (2.0 * q[0]).sqrt() * dw[0];
        return Ok(());
    }
    let mut q = [0.0; 9];
    model.diffusion_into(coeff_t, x, &mut q)?;
    let sigma = diffusion_factor(d, &q, cfg.psd_floor)?;
    let mut noise: VecBuf = [0.0; 3];
    for i in 0..d {
        noise[i] = (0..d).map(|j| sigma[i * d + j] * dw[j]).sum();
    }
    let mut b: VecBuf = [0.0; 3];
    match cfg.scheme {
        Scheme::TamedEuler => {
            model.drift_into(coeff_t, x, &mut b)?;
            let tame = 1.0 / (1.0 + h * linalg::norm(&b[..d]));
            for i in 0..d {
                out[i] = x[i] + h * b[i] * tame + noise[i];
            }
        }
        Scheme::SemiImplicitDrift => {
            // F(y) = y - x - h b(y) - noise = 0
            let mut y: VecBuf = [0.0; 3];
            for i in 0..d {
                y[i] = x[i] + noise[i];
            }
            let mut converged = false;
            for _ in 0..50 {
                model.drift_into(coeff_t, &y[..d], &mut b)?;
                let mut res: VecBuf = [0.0; 3];
                for i in 0..d {
                    res[i] = y[i] - x[i] - h * b[i] - noise[i];
                }
                let jb = model.drift_jacobian(coeff_t, &y[..d])?;
                let mut m = nalgebra::DMatrix::<f64>::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        m[(i, j)] = if i == j { 1.0 } else { 0.0 } - h * jb[i * d + j];
                    }
                }
                let r = nalgebra::DVector::from_column_slice(&res[..d]);
                let delta = m.lu().solve(&r).ok_or_else(|| {
                    Error::LinearSolve(format!("singular Newton matrix at t={coeff_t}, y={:?}", &y[..d]))
                })?;
                let mut size = 0.0f64;
                for i in 0..d {
                    y[i] -= delta[i];
                    size = size.max(delta[i].abs());
                }
                if size <= 1e-13 * (1.0 + linalg::norm(&y[..d])) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::Diverged { index: usize::MAX, t: coeff_t, position: x.to_vec() });
            }
            out[..d].copy_from_slice(&y[..d]);
        }
    }
    Ok(())
}

/// Direction of coefficient time along the simulation clock.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Clock {
    /// coefficient time = `origin + elapsed`
    Ascending(f64),
    /// coefficient time = `origin - elapsed`
    Descending(f64),
}

impl Clock {
    #[inline]
    fn at(&self, elapsed: f64) -> f64 {
        match *self {
            Clock::Ascending(o) => o + elapsed,
            Clock::Descending(o) => o - elapsed,
        }
    }
}

/// Runs every particle over `grid`; `marks` are step indices after which a copy of the
/// cloud is recorded (a mark equal to `grid.steps` records the terminal cloud).
fn integrate(
    model: &CoefficientModel,
    cfg: &IntegratorConfig,
    positions: &[f64],
    lineage: SeedLineage,
    grid: &TimeGrid,
    clock: Clock,
    marks: &[usize],
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let d = model.dim();
    let n = positions.len() / d;
    let blocks: Vec<(usize, &[f64])> = positions.chunks(BLOCK_SIZE * d).enumerate().collect();
    let per_block: Vec<Result<Vec<Vec<f64>>>> = blocks
        .par_iter()
        .map(|&(b, chunk)| {
            let mut rng = lineage.block_rng(b as u64);
            let mut out: Vec<Vec<f64>> = marks.iter().map(|_| Vec::with_capacity(chunk.len())).collect();
            let mut x: VecBuf = [0.0; 3];
            let mut y: VecBuf = [0.0; 3];
            let mut z: VecBuf = [0.0; 3];
            for (p, start) in chunk.chunks_exact(d).enumerate() {
                x[..d].copy_from_slice(start);
                let mut next_mark = 0;
                while next_mark < marks.len() && marks[next_mark] == 0 {
                    out[next_mark].extend_from_slice(&x[..d]);
                    next_mark += 1;
                }
                for k in 0..grid.steps {
                    let h = grid.step_len(k);
                    let sq = h.sqrt();
                    for zi in z[..d].iter_mut() {
                        let g: f64 = rng.sample(StandardNormal);
                        *zi = sq * g;
                    }
                    let ct = clock.at(grid.offset(k));
                    step(model, cfg, ct, h, &x[..d], &z[..d], &mut y[..d]).map_err(|e| match e {
                        Error::Diverged { t, position, .. } => Error::Diverged { index: b * BLOCK_SIZE + p, t, position },
                        other => other,
                    })?;
                    if y[..d].iter().any(|v| !v.is_finite()) {
                        return Err(Error::Diverged {
                            index: b * BLOCK_SIZE + p,
                            t: ct,
                            position: x[..d].to_vec(),
                        });
                    }
                    x = y;
                    while next_mark < marks.len() && marks[next_mark] == k + 1 {
                        out[next_mark].extend_from_slice(&x[..d]);
                        next_mark += 1;
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut result: Vec<Vec<f64>> = marks.iter().map(|_| Vec::with_capacity(n * d)).collect();
    for block in per_block {
        for (acc, part) in result.iter_mut().zip(block?) {
            acc.extend_from_slice(&part);
        }
    }
    Ok(result)
}

fn check_dim(model: &CoefficientModel, ens: &ParticleEnsemble) -> Result<()> {
    if ens.dim != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: ens.dim,
            context: "ensemble vs model",
        });
    }
    Ok(())
}

/// Advances the cloud from `ensemble.time` to `to_time` with coefficients at natural times.
pub fn evolve_forward(
    model: &CoefficientModel,
    ensemble: &ParticleEnsemble,
    to_time: f64,
    cfg: &IntegratorConfig,
) -> Result<ParticleEnsemble> {
    check_dim(model, ensemble)?;
    let grid = TimeGrid::new(ensemble.time, to_time, cfg.dt)?;
    let mut out = integrate(
        model,
        cfg,
        &ensemble.positions,
        ensemble.lineage,
        &grid,
        Clock::Ascending(ensemble.time),
        &[grid.steps],
    )?;
    ParticleEnsemble::new(to_time, ensemble.dim, out.pop().unwrap_or_default(), ensemble.lineage.advance())
}

/// Reversed-schedule run over `[s,t]` starting from `start` (stamped with any time).
/// The `f`-average of the result estimates `G(t,s)f` at the start points; the result is
/// stamped `s`.
pub fn evolve_reversed(
    model: &CoefficientModel,
    start: &ParticleEnsemble,
    s: f64,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<ParticleEnsemble> {
    check_dim(model, start)?;
    let grid = TimeGrid::new(s, t, cfg.dt)?;
    let mut out = integrate(model, cfg, &start.positions, start.lineage, &grid, Clock::Descending(t), &[grid.steps])?;
    ParticleEnsemble::new(s, start.dim, out.pop().unwrap_or_default(), start.lineage.advance())
}

/// `n` reversed-schedule paths from the single point `x`.
pub fn evolve_reversed_from_point(
    model: &CoefficientModel,
    x: &[f64],
    n: usize,
    s: f64,
    t: f64,
    cfg: &IntegratorConfig,
    lineage: SeedLineage,
) -> Result<ParticleEnsemble> {
    let start = ParticleEnsemble::sample(&InitSpec::PointMass { at: x.to_vec() }, n, model.dim(), t, lineage)?;
    evolve_reversed(model, &start, s, t, cfg)
}

/// Carries a cloud stamped `u0` down to coefficient time `u1 <= u0`, recording the cloud as
/// coefficient time passes each of `stops` (descending order not required; each must lie
/// in `[u1, u0]`). Returns snapshots in the order of `stops`, each stamped with its stop.
///
/// A cloud distributed as `μ_{u0}` is carried to `μ_{stop}` at every stop.
pub fn pull_back(
    model: &CoefficientModel,
    ensemble: &ParticleEnsemble,
    u1: f64,
    stops: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<ParticleEnsemble>> {
    check_dim(model, ensemble)?;
    let u0 = ensemble.time;
    let grid = TimeGrid::new(u1, u0, cfg.dt)?;
    let mut marks = Vec::with_capacity(stops.len());
    for &st in stops {
        if !(st >= u1 - 1e-12 && st <= u0 + 1e-12) {
            return Err(Error::Config(format!("snapshot time {st} outside [{u1}, {u0}]")));
        }
        let k = if st <= u1 + 1e-12 {
            grid.steps
        } else {
            (((u0 - st) / grid.dt) - 1e-9).ceil().max(0.0) as usize
        };
        // the stop must sit on the grid so the snapshot is exactly at that time
        let reached = if k == grid.steps { u1 } else { u0 - k as f64 * grid.dt };
        if (reached - st).abs() > 1e-9 * (1.0 + st.abs()) {
            return Err(Error::Config(format!(
                "snapshot time {st} is not on the step grid from {u0} with dt {}",
                grid.dt
            )));
        }
        marks.push(k);
    }
    let mut order: Vec<usize> = (0..marks.len()).collect();
    order.sort_by_key(|&i| marks[i]);
    let sorted: Vec<usize> = order.iter().map(|&i| marks[i]).collect();
    let clouds = integrate(model, cfg, &ensemble.positions, ensemble.lineage, &grid, Clock::Descending(u0), &sorted)?;
    let mut out: Vec<Option<ParticleEnsemble>> = vec![None; stops.len()];
    let next = ensemble.lineage.advance();
    for (slot, cloud) in order.into_iter().zip(clouds) {
        out[slot] = Some(ParticleEnsemble::new(stops[slot], ensemble.dim, cloud, next)?);
    }
    Ok(out.into_iter().map(|e| e.expect("every stop filled")).collect())
}

/// Forward run with snapshots at `stops` (each on the step grid from `ensemble.time`).
pub fn evolve_forward_snapshots(
    model: &CoefficientModel,
    ensemble: &ParticleEnsemble,
    stops: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<ParticleEnsemble>> {
    check_dim(model, ensemble)?;
    let u0 = ensemble.time;
    let end = stops.iter().cloned().fold(u0, f64::max);
    let grid = TimeGrid::new(u0, end, cfg.dt)?;
    let mut marks = Vec::with_capacity(stops.len());
    for &st in stops {
        if st < u0 - 1e-12 {
            return Err(Error::Config(format!("snapshot time {st} before start {u0}")));
        }
        let k = if st >= end - 1e-12 { grid.steps } else { ((st - u0) / grid.dt - 1e-9).ceil() as usize };
        let reached = if k == grid.steps { end } else { u0 + k as f64 * grid.dt };
        if (reached - st).abs() > 1e-9 * (1.0 + st.abs()) {
            return Err(Error::Config(format!("snapshot time {st} is not on the step grid")));
        }
        marks.push(k);
    }
    let mut order: Vec<usize> = (0..marks.len()).collect();
    order.sort_by_key(|&i| marks[i]);
    let sorted: Vec<usize> = order.iter().map(|&i| marks[i]).collect();
    let clouds = integrate(model, cfg, &ensemble.positions, ensemble.lineage, &grid, Clock::Ascending(u0), &sorted)?;
    let mut out: Vec<Option<ParticleEnsemble>> = vec![None; stops.len()];
    let next = ensemble.lineage.advance();
    for (slot, cloud) in order.into_iter().zip(clouds) {
        out[slot] = Some(ParticleEnsemble::new(stops[slot], ensemble.dim, cloud, next)?);
    }
    Ok(out.into_iter().map(|e| e.expect("every stop filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example_family::{build_example_model, build_ou_model, preset_params, FamilyParams, OUParams, OuOracle, TimeProfile};
    use proptest::prelude::*;

    fn ou(b0: TimeProfile) -> CoefficientModel {
        build_ou_model(&OUParams { dim: 1, b0 }).unwrap()
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn time_grid_covers_interval() {
        let g = TimeGrid::new(0.0, 1.0, 0.3).unwrap();
        assert_eq!(g.steps, 4);
        let total: f64 = (0..g.steps).map(|k| g.step_len(k)).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!((g.step_len(3) - 0.1).abs() < 1e-12);
        assert_eq!(TimeGrid::new(0.0, 1.0, 1e-3).unwrap().steps, 1000);
        assert_eq!(TimeGrid::new(2.0, 2.0, 0.1).unwrap().steps, 0);
        assert!(TimeGrid::new(1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn diffusion_factor_examples() {
        let s = diffusion_factor(2, &[1.0, 0.0, 0.0, 1.0], 1e-10).unwrap();
        let r2 = 2f64.sqrt();
        assert_eq!(&s[..4], &[r2, 0.0, 0.0, r2]);
        let s = diffusion_factor(2, &[2.0, 0.0, 0.0, 0.5], 1e-10).unwrap();
        assert_eq!(&s[..4], &[2.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            diffusion_factor(2, &[1.0, 1.0, 1.0, 1.0], 1e-10),
            Err(Error::DegenerateDiffusion { .. })
        ));
        assert!(diffusion_factor(1, &[0.0], 1e-10).is_err());
    }

    proptest! {
        #[test]
        fn diffusion_factor_squares_to_twice_q(a in 0.1..3.0f64, c in 0.1..3.0f64, b in -0.5..0.5f64, e in 0.1..2.0f64) {
            let q = [a + 1.0, b, 0.3 * b, b, c + 1.0, 0.1, 0.3 * b, 0.1, e + 1.0];
            let s = diffusion_factor(3, &q, 1e-10).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let ss: f64 = (0..3).map(|k| s[i * 3 + k] * s[j * 3 + k]).sum();
                    prop_assert!((ss - 2.0 * q[i * 3 + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_mean_decays_exponentially() {
        let m = ou(TimeProfile::Constant { value: 1.0 });
        let e = ParticleEnsemble::sample(&InitSpec::PointMass { at: vec![2.0] }, 20_000, 1, 0.0, SeedLineage::new(1)).unwrap();
        let out = evolve_forward(&m, &e, 1.0, &IntegratorConfig::with_dt(1e-3)).unwrap();
        assert_eq!(out.len(), 20_000);
        let (mean, var) = mean_var(&out.positions);
        let se = (var / 20_000.0).sqrt();
        assert!((mean - 2.0 * (-1.0f64).exp()).abs() < 3.0 * se + 2e-3, "{mean}");
    }

    #[test]
    fn same_seed_same_bits_any_worker_count() {
        let m = ou(TimeProfile::Sine { mean: 1.0, amplitude: 0.5, frequency: 1.0 });
        let e = ParticleEnsemble::sample(&InitSpec::Normal { variance: 1.0 }, 3000, 1, 0.0, SeedLineage::new(9)).unwrap();
        let cfg = IntegratorConfig::with_dt(1e-2);
        let a = evolve_forward(&m, &e, 1.0, &cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| evolve_forward(&m, &e, 1.0, &cfg).unwrap());
        assert_eq!(a, b);
        let c = evolve_forward(&m, &e, 1.0, &cfg).unwrap();
        assert_eq!(a.positions, c.positions);
        let other = ParticleEnsemble { lineage: SeedLineage::new(10), ..e.clone() };
        assert_ne!(evolve_forward(&m, &other, 1.0, &cfg).unwrap().positions, a.positions);
    }

    #[test]
    fn reversed_schedule_variance_matches_oracle() {
        let b0 = TimeProfile::Linear { slope: 1.0, offset: 0.0 };
        let m = ou(b0.clone());
        let n = 40_000;
        let out = evolve_reversed_from_point(&m, &[0.0], n, 0.0, 1.0, &IntegratorConfig::with_dt(1e-3), SeedLineage::new(4)).unwrap();
        let (_, var) = mean_var(&out.positions);
        let x2 = out.mean_of(|p| p[0] * p[0]);
        let oracle = OuOracle::new(&OUParams { dim: 1, b0 });
        let exact = oracle.reversed_variance(1.0, 0.0);
        // SE of the sample second moment is about √2 σ² / √n
        let se = 2f64.sqrt() * exact / (n as f64).sqrt();
        assert!((x2 - exact).abs() < 3.0 * se + 1e-3, "{x2} vs {exact}");
        assert!((var - oracle.forward_variance(1.0, 0.0)).abs() > 10.0 * se);
        assert_eq!(out.time, 0.0);
    }

    #[test]
    fn constant_function_is_preserved() {
        let m = ou(TimeProfile::Linear { slope: 1.0, offset: 0.0 });
        let out = evolve_reversed_from_point(&m, &[0.3], 500, 0.0, 1.0, &IntegratorConfig::with_dt(1e-2), SeedLineage::new(2)).unwrap();
        assert_eq!(out.mean_of(|_| 1.0), 1.0);
    }

    #[test]
    fn autonomous_schedules_agree_bitwise() {
        // with time-independent coefficients the two schedules consume the same streams identically
        let m = ou(TimeProfile::Constant { value: 0.8 });
        let e = ParticleEnsemble::sample(&InitSpec::Normal { variance: 2.0 }, 2000, 1, 0.0, SeedLineage::new(5)).unwrap();
        let cfg = IntegratorConfig::with_dt(1e-2);
        let f = evolve_forward(&m, &e, 1.0, &cfg).unwrap();
        let r = evolve_reversed(&m, &e, 0.0, 1.0, &cfg).unwrap();
        assert_eq!(f.positions, r.positions);
    }

    #[test]
    fn pull_back_snapshots_match_separate_runs() {
        let m = ou(TimeProfile::Sine { mean: 1.0, amplitude: 0.5, frequency: 1.0 });
        let e = ParticleEnsemble::sample(&InitSpec::Normal { variance: 1.0 }, 1500, 1, 4.0, SeedLineage::new(8)).unwrap();
        let cfg = IntegratorConfig::with_dt(0.01);
        let snaps = pull_back(&m, &e, 1.0, &[3.0, 1.0, 4.0, 2.5], &cfg).unwrap();
        assert_eq!(snaps[0].time, 3.0);
        assert_eq!(snaps[2].positions, e.positions);
        let direct = evolve_reversed(&m, &e, 1.0, 4.0, &cfg).unwrap();
        assert_eq!(snaps[1].positions, direct.positions);
        assert!(pull_back(&m, &e, 1.0, &[2.005], &cfg).is_err());
        let fwd = evolve_forward_snapshots(&m, &e, &[5.0, 4.5], &cfg).unwrap();
        assert_eq!(fwd[0].positions, evolve_forward(&m, &e, 5.0, &cfg).unwrap().positions);
    }

    #[test]
    fn ou_stationary_cloud_stays_stationary() {
        let m = ou(TimeProfile::Constant { value: 1.0 });
        let n = 100_000;
        let e = ParticleEnsemble::sample(&InitSpec::Normal { variance: 1.0 }, n, 1, 0.0, SeedLineage::new(21)).unwrap();
        let out = evolve_forward(&m, &e, 2.0, &IntegratorConfig::with_dt(1e-2)).unwrap();
        let mut v = out.positions.clone();
        v.sort_by(f64::total_cmp);
        let ks = v
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let c = crate::test_functions::normal_cdf(*x);
                (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS {ks}");
    }

    /// Weak error with coupled Brownian paths: halving Δt roughly halves the bias.
    #[test]
    fn weak_order_one_with_common_random_numbers() {
        use rand::Rng;
        let b0 = TimeProfile::Constant { value: 2.0 };
        let m = ou(b0.clone());
        let cfg = IntegratorConfig::default();
        let (t, x0, n) = (1.0, 1.0, 20_000);
        let exact = {
            let o = OuOracle::new(&OUParams { dim: 1, b0 });
            let k = o.mean_factor(t, 0.0);
            k * k * x0 * x0 + o.reversed_variance(t, 0.0)
        };
        let levels = [0.1, 0.05, 0.025];
        let fine_steps = (t / levels[2]).round() as usize;
        let mut acc = [0.0; 3];
        let mut rng = SeedLineage::new(33).block_rng(0);
        for _ in 0..n {
            let dw: Vec<f64> = (0..fine_steps)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * levels[2].sqrt()
                })
                .collect();
            for (l, &h) in levels.iter().enumerate() {
                let group = (h / levels[2]).round() as usize;
                let mut x = [x0];
                for k in 0..fine_steps / group {
                    let w: f64 = dw[k * group..(k + 1) * group].iter().sum();
                    let mut y = [0.0];
                    step(&m, &cfg, k as f64 * h, h, &x, &[w], &mut y).unwrap();
                    x = y;
                }
                acc[l] += x[0] * x[0];
            }
        }
        let bias: Vec<f64> = acc.iter().map(|a| a / n as f64 - exact).collect();
        let r1 = bias[0] / bias[1];
        let r2 = bias[1] / bias[2];
        assert!(bias[0].abs() > bias[1].abs() && bias[1].abs() > bias[2].abs(), "{bias:?}");
        assert!((1.5..2.7).contains(&r1) && (1.5..2.7).contains(&r2), "{bias:?}");
    }

    #[test]
    fn taming_keeps_superlinear_drift_finite() {
        let FamilyParams::PowerGrowth(mut p) = preset_params("power-1d-a").unwrap() else { panic!() };
        p.r = 1.0;
        let m = build_example_model(&p).unwrap();
        // 10^6 particle-steps from a wide start
        let e = ParticleEnsemble::sample(&InitSpec::Normal { variance: 25.0 }, 10_000, 1, 0.0, SeedLineage::new(3)).unwrap();
        let out = evolve_forward(&m, &e, 1.0, &IntegratorConfig::with_dt(1e-2)).unwrap();
        assert!(out.positions.iter().all(|v| v.is_finite()));
        // plain Euler from x = 30 with this step overshoots to about -3.7e2 and then blows up
        let x = 30.0f64;
        assert!((x - 1e-2 * 1.5 * (1.0 + x * x) * x).abs() > 10.0 * x);
    }

    #[test]
    fn semi_implicit_solves_its_equation() {
        let FamilyParams::PowerGrowth(p) = preset_params("power-2d-a").unwrap() else { panic!() };
        let m = build_example_model(&p).unwrap();
        let cfg = IntegratorConfig { scheme: Scheme::SemiImplicitDrift, dt: 0.05, psd_floor: 1e-10 };
        let x = [3.0, -1.0];
        let dw = [0.1, 0.2];
        let mut y = [0.0; 2];
        step(&m, &cfg, 0.4, 0.05, &x, &dw, &mut y).unwrap();
        let b = m.drift(0.4, &y).unwrap();
        let q = m.diffusion(0.4, &x).unwrap();
        let s = diffusion_factor(2, &q, 0.0).unwrap();
        for i in 0..2 {
            let noise = s[i * 2] * dw[0] + s[i * 2 + 1] * dw[1];
            assert!((y[i] - x[i] - 0.05 * b[i] - noise).abs() < 1e-10);
        }
    }
}

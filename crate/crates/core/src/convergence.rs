//! Headline experiments: decay of `G(t,s)f` towards `m_s(f)`, small-time gradient bounds,
//! gradient decay of the evolution semigroup, uniqueness of the measure family and the
//! converging-coefficients limits.
//!
//! `L^p(μ_t)` integrals use the particle cloud as quadrature. Every verdict carries the
//! name of the tolerance it was judged against.

use crate::coefficient_model::CoefficientModel;
use crate::error::{Error, Result};
use crate::measure::{
    self, density_estimate, estimate_measure, estimate_measure_series, evaluate_g_at, CloudDistance, Estimator,
    GEngine, MeasureConfig, MeasureEstimate, SpaceTimeWindowMeasure,
};
use crate::pde::{self, FdConfig, GridFunction, SpatialGrid};
use crate::rng::{derive_seed, SeedLineage};
use crate::sde::InitSpec;
use crate::stats;
use crate::test_functions::TestFunction;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub statistic: String,
    pub values: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: String,
    /// name of the configured tolerance
    pub tolerance: String,
    pub threshold: f64,
    pub observed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub experiment: String,
    pub t_grid: Vec<f64>,
    pub series: Vec<Series>,
    pub constants: BTreeMap<String, f64>,
    pub verdicts: Vec<Verdict>,
    pub warnings: Vec<String>,
}

impl ConvergenceReport {
    pub fn new(experiment: impl Into<String>, t_grid: Vec<f64>) -> Self {
        Self {
            experiment: experiment.into(),
            t_grid,
            series: Vec::new(),
            constants: BTreeMap::new(),
            verdicts: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn push_series(&mut self, statistic: &str, values: Vec<f64>, se: Vec<f64>) -> Result<()> {
        if values.len() != self.t_grid.len() || se.len() != self.t_grid.len() {
            return Err(Error::Config(format!(
                "series {statistic} has {} values for a t-grid of {}",
                values.len(),
                self.t_grid.len()
            )));
        }
        self.series.push(Series { statistic: statistic.into(), values, se });
        Ok(())
    }

    pub fn series(&self, statistic: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.statistic == statistic)
    }

    /// Records `observed <= threshold` (or `>=` when `at_least`).
    pub fn judge(&mut self, criterion: &str, tolerance: &str, threshold: f64, observed: f64, at_least: bool) -> bool {
        let pass = if at_least { observed >= threshold } else { observed <= threshold };
        self.verdicts.push(Verdict {
            criterion: criterion.into(),
            tolerance: tolerance.into(),
            threshold,
            observed,
            pass,
        });
        pass
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

/// `max_i (h_{i+1} - h_i) / sqrt(se_i² + se_{i+1}²)`: the largest standardized increase
/// between consecutive entries (`-inf` for fewer than two).
pub fn worst_increase(values: &[f64], se: &[f64]) -> f64 {
    values
        .windows(2)
        .zip(se.windows(2))
        .map(|(v, s)| {
            let rise = v[1] - v[0];
            let band = (s[0] * s[0] + s[1] * s[1]).sqrt();
            if rise <= 0.0 {
                f64::NEG_INFINITY.max(rise / band.max(f64::MIN_POSITIVE))
            } else if band == 0.0 {
                f64::INFINITY
            } else {
                rise / band
            }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Where `G(t,s)f` is wanted.
#[derive(Clone, Debug)]
pub enum Target {
    Grid(SpatialGrid),
    /// row-major points
    Points(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct GValues {
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    /// the full FD solution when the engine was FD
    pub grid_function: Option<GridFunction>,
}

/// `G(t,s)f` at grid nodes or points by either engine.
pub fn evaluate_g(
    model: &CoefficientModel,
    f: &TestFunction,
    s: f64,
    t: f64,
    target: &Target,
    engine: &GEngine,
) -> Result<GValues> {
    let d = model.dim();
    if let GEngine::Fd { grid, cfg } = engine {
        if d > 2 {
            return Err(Error::UnsupportedDimension(d));
        }
        let g = match target {
            Target::Grid(tg) => tg,
            Target::Points(_) => grid,
        };
        let u = pde::solve_forward(model, &|x| f.value(x), s, t, g, cfg)?;
        let values = match target {
            Target::Grid(_) => u.values.clone(),
            Target::Points(p) => p.chunks_exact(d).map(|x| u.interpolate(x)).collect(),
        };
        let n = values.len();
        return Ok(GValues { values, se: vec![0.0; n], grid_function: Some(u) });
    }
    let points = match target {
        Target::Grid(g) => g.points().concat(),
        Target::Points(p) => p.clone(),
    };
    let vals = evaluate_g_at(model, f, s, t, &points, engine)?;
    Ok(GValues {
        values: vals.iter().map(|v| v.0).collect(),
        se: vals.iter().map(|v| v.1).collect(),
        grid_function: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    pub p: f64,
    /// radius of the ball for sup-deviations
    pub radius: f64,
    pub bootstrap_reps: usize,
    /// cloud points used as outer quadrature nodes when G comes from MC
    pub outer_cap: usize,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { p: 2.0, radius: 2.0, bootstrap_reps: 200, outer_cap: 2000, seed: 0 }
    }
}

impl ProbeSettings {
    fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::Config(format!("p must lie in [1, inf) (got {})", self.p)));
        }
        if self.bootstrap_reps < 2 {
            return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub value: f64,
    pub se: f64,
}

/// `(mean_j |g_j - mean(fs)|^p)^{1/p}` with an SE from resampling both samples.
///
/// `noise` holds the sampling variance of each `g_j` (empty for FD). For `p = 2` it is
/// subtracted from the mean square, since `E|ĝ - m|² = |g - m|² + Var ĝ`; without this a
/// Monte Carlo `h` levels off at the inner-sample noise instead of decaying.
fn lp_deviation(g: &[f64], noise: &[f64], fs: &[f64], p: f64, reps: usize, seed: u64) -> Deviation {
    let debias = p == 2.0 && noise.iter().any(|v| *v > 0.0);
    let norm = |idx: &mut dyn Iterator<Item = usize>, m: f64| -> f64 {
        if debias {
            let (mut acc, mut n) = (0.0, 0usize);
            for j in idx {
                acc += (g[j] - m).powi(2) - noise[j];
                n += 1;
            }
            (acc / n as f64).max(0.0).sqrt()
        } else {
            let (mut acc, mut n) = (0.0, 0usize);
            for j in idx {
                acc += (g[j] - m).abs().powf(p);
                n += 1;
            }
            (acc / n as f64).powf(1.0 / p)
        }
    };
    let m = fs.iter().sum::<f64>() / fs.len() as f64;
    let value = norm(&mut (0..g.len()), m);
    let mut rng = SeedLineage::new(seed).block_rng(17);
    let mut boot = Vec::with_capacity(reps);
    let mut idx = vec![0usize; g.len()];
    for _ in 0..reps {
        let mut ms = 0.0;
        for _ in 0..fs.len() {
            ms += fs[rng.random_range(0..fs.len())];
        }
        ms /= fs.len() as f64;
        for v in idx.iter_mut() {
            *v = rng.random_range(0..g.len());
        }
        boot.push(norm(&mut idx.iter().copied(), ms));
    }
    let (_, sd) = stats::mean_se(&boot);
    Deviation { value, se: sd * (reps as f64).sqrt() }
}

fn outer_points(mu: &MeasureEstimate, engine: &GEngine, cap: usize) -> Vec<f64> {
    let d = mu.dim();
    match engine {
        GEngine::Fd { .. } => mu.ensemble.positions.clone(),
        GEngine::Mc { .. } => mu.ensemble.positions[..cap.min(mu.len()) * d].to_vec(),
    }
}

/// `h(t) = ‖G(t,s)f - m̂_s(f)‖_{L^p(μ̂_t)}` with a bootstrap SE.
pub fn weighted_deviation(
    model: &CoefficientModel,
    f: &TestFunction,
    mu_s: &MeasureEstimate,
    mu_t: &MeasureEstimate,
    engine: &GEngine,
    settings: &ProbeSettings,
) -> Result<Deviation> {
    settings.validate()?;
    if f.is_constant() {
        return Ok(Deviation { value: 0.0, se: 0.0 });
    }
    if f.sup_norm().is_none() {
        log::debug!("weighted deviation of the unbounded {}", f.label());
    }
    let pts = outer_points(mu_t, engine, settings.outer_cap);
    let g = evaluate_g(model, f, mu_s.time, mu_t.time, &Target::Points(pts), engine)?;
    let fs: Vec<f64> = mu_s.ensemble.particles().map(|x| f.value(x)).collect();
    let noise: Vec<f64> = g.se.iter().map(|v| v * v).collect();
    Ok(lp_deviation(&g.values, &noise, &fs, settings.p, settings.bootstrap_reps, settings.seed))
}

/// Lattice of points in `B_R` with spacing `R/2` (at most `5^d` points).
fn ball_lattice(d: usize, radius: f64) -> Vec<f64> {
    let axis: Vec<f64> = (-2..=2).map(|k| k as f64 * radius / 2.0).collect();
    let mut out = Vec::new();
    let total = axis.len().pow(d as u32);
    for mut idx in 0..total {
        let mut p = Vec::with_capacity(d);
        for _ in 0..d {
            p.push(axis[idx % axis.len()]);
            idx /= axis.len();
        }
        if p.iter().map(|v| v * v).sum::<f64>() <= radius * radius + 1e-12 {
            out.extend(p);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveTolerances {
    /// allowed standardized rise between consecutive `h(t)`
    pub monotone_band: f64,
    /// required `h(t_last) / h(t_first)`
    pub decay_ratio: f64,
}

impl Default for CurveTolerances {
    fn default() -> Self {
        Self { monotone_band: 2.0, decay_ratio: 0.05 }
    }
}

/// `h(t)` and `sup_{B_R} |G(t,s)f - m̂_s(f)|` over `t ∈ t_grid`. All measures come from
/// one descending run and, with the FD engine, all `G(t,s)f` from one solve.
pub fn convergence_curve(
    model: &CoefficientModel,
    f: &TestFunction,
    s: f64,
    t_grid: &[f64],
    engine: &GEngine,
    measure_cfg: &MeasureConfig,
    settings: &ProbeSettings,
    tol: &CurveTolerances,
) -> Result<ConvergenceReport> {
    settings.validate()?;
    if t_grid.iter().any(|t| *t < s) || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("t-grid must increase from s = {s}")));
    }
    let d = model.dim();
    let mut times = t_grid.to_vec();
    times.push(s);
    let mut clouds = estimate_measure_series(model, &times, measure_cfg, SeedLineage::new(derive_seed(settings.seed, "curve")))?;
    let mu_s = clouds.pop().expect("s cloud");
    let fs: Vec<f64> = mu_s.ensemble.particles().map(|x| f.value(x)).collect();
    let (ms, ms_se) = stats::mean_se(&fs);
    let fd_solution = match engine {
        GEngine::Fd { grid, cfg } => Some(pde::solve_snapshots(model, &|x| f.value(x), s, t_grid, grid, cfg)?),
        GEngine::Mc { .. } => None,
    };
    let lattice = ball_lattice(d, settings.radius);
    let rows: Vec<(Deviation, f64, f64)> = clouds
        .par_iter()
        .enumerate()
        .map(|(i, mu_t)| -> Result<(Deviation, f64, f64)> {
            if f.is_constant() {
                return Ok((Deviation { value: 0.0, se: 0.0 }, 0.0, 0.0));
            }
            let seed = derive_seed(settings.seed, &format!("curve-{i}"));
            let (g, noise, sup, sup_se) = match (&fd_solution, engine) {
                (Some(sol), _) => {
                    let u = &sol.snapshots[i];
                    let g: Vec<f64> = mu_t.ensemble.particles().map(|x| u.interpolate(x)).collect();
                    let sup = u.grid.nodes_within(settings.radius).into_iter().map(|k| (u.values[k] - ms).abs()).fold(0.0, f64::max);
                    (g, Vec::new(), sup, ms_se)
                }
                (None, GEngine::Mc { inner, cfg, .. }) => {
                    let e = GEngine::Mc { inner: *inner, cfg: *cfg, seed };
                    let pts = outer_points(mu_t, &e, settings.outer_cap);
                    let (g, noise): (Vec<f64>, Vec<f64>) =
                        evaluate_g_at(model, f, s, mu_t.time, &pts, &e)?.into_iter().map(|(v, se)| (v, se * se)).unzip();
                    let at = evaluate_g_at(model, f, s, mu_t.time, &lattice, &GEngine::Mc { inner: *inner, cfg: *cfg, seed: seed ^ 1 })?;
                    let (sup, se) = at.iter().map(|(v, se)| ((v - ms).abs(), se)).fold((0.0, 0.0), |acc, (v, se)| if v > acc.0 { (v, *se) } else { acc });
                    (g, noise, sup, (se * se + ms_se * ms_se).sqrt())
                }
                _ => unreachable!("FD solution exists exactly for the FD engine"),
            };
            Ok((lp_deviation(&g, &noise, &fs, settings.p, settings.bootstrap_reps, seed), sup, sup_se))
        })
        .collect::<Result<_>>()?;
    let mut report = ConvergenceReport::new(format!("curve:{}", f.label()), t_grid.to_vec());
    let h: Vec<f64> = rows.iter().map(|r| r.0.value).collect();
    let h_se: Vec<f64> = rows.iter().map(|r| r.0.se).collect();
    report.push_series("h", h.clone(), h_se.clone())?;
    report.push_series("sup-deviation", rows.iter().map(|r| r.1).collect(), rows.iter().map(|r| r.2).collect())?;
    report.constants.insert("m_s".into(), ms);
    report.constants.insert("m_s_se".into(), ms_se);
    if let Some(sol) = &fd_solution {
        report.warnings.extend(sol.stats.warnings.iter().cloned());
    }
    let rise = worst_increase(&h, &h_se);
    report.judge("h nonincreasing", "monotone_band", tol.monotone_band, rise, false);
    if let (Some(first), Some(last)) = (h.first(), h.last()) {
        let ratio = if *first > 0.0 { last / first } else { 0.0 };
        report.constants.insert("decay_ratio".into(), ratio);
        report.judge("h(last) / h(first)", "decay_ratio", tol.decay_ratio, ratio, false);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientTolerances {
    pub slope_min: f64,
    pub slope_max: f64,
    /// fraction of refined inner nodes obeying the bound with the coarse `Ĉ₁`
    pub coverage_min: f64,
    /// allowed relative change of `Ĉ₁` under refinement
    pub c1_stability: f64,
}

impl Default for GradientTolerances {
    fn default() -> Self {
        Self { slope_min: -0.6, slope_max: -0.4, coverage_min: 0.99, c1_stability: 0.2 }
    }
}

struct GradientPass {
    c1_per_t: Vec<f64>,
    sup_grad: Vec<f64>,
    grads: Vec<GridFunction>,
    weights: Vec<GridFunction>,
}

fn gradient_pass(model: &CoefficientModel, f: &TestFunction, s: f64, ts: &[f64], p: f64, grid: &SpatialGrid, cfg: &FdConfig) -> Result<GradientPass> {
    let abs_p = f.clone().abs_power(p);
    let times: Vec<f64> = ts.iter().map(|t| s + t).collect();
    let u = pde::solve_snapshots(model, &|x| f.value(x), s, &times, grid, cfg)?;
    let w = pde::solve_snapshots(model, &|x| abs_p.value(x), s, &times, grid, cfg)?;
    let inner = grid.nodes_within(grid.half_width / 2.0);
    let mut out = GradientPass { c1_per_t: Vec::new(), sup_grad: Vec::new(), grads: Vec::new(), weights: Vec::new() };
    for ((t, ut), wt) in ts.iter().zip(u.snapshots).zip(w.snapshots) {
        let g = ut.gradient_norm();
        let scale = t.powf(-0.5).max(1.0);
        let mut c1 = 0.0f64;
        let mut sup = 0.0f64;
        for &k in &inner {
            sup = sup.max(g.values[k]);
            c1 = c1.max(bound_ratio(g.values[k], wt.values[k], p, scale));
        }
        out.c1_per_t.push(c1);
        out.sup_grad.push(sup);
        out.grads.push(g);
        out.weights.push(wt);
    }
    Ok(out)
}

/// gradients below this are rounding noise of the FD solve
const GRAD_FLOOR: f64 = 1e-12;

/// Smallest `C` with `|∇u| <= C · scale · w^{1/p}` at one node.
fn bound_ratio(grad: f64, w: f64, p: f64, scale: f64) -> f64 {
    if grad <= GRAD_FLOOR {
        0.0
    } else if w <= 0.0 {
        f64::INFINITY
    } else {
        grad / (scale * w.powf(1.0 / p))
    }
}

/// Small-time gradient estimate `|∇G(s+t,s)f|^p <= C₁^p (t^{-p/2} ∨ 1) G(s+t,s)|f|^p` on
/// the inner half of the grid: minimal `Ĉ₁` per `t`, its stability under refinement,
/// coverage of the refined grid by the coarse constant, and the log-log slope of
/// `sup |∇G(s+t,s)f|` against `t`.
pub fn gradient_bound_probe(
    model: &CoefficientModel,
    f: &TestFunction,
    s: f64,
    ts: &[f64],
    p: f64,
    grid: &SpatialGrid,
    cfg: &FdConfig,
    tol: &GradientTolerances,
) -> Result<ConvergenceReport> {
    if model.dim() > 2 {
        return Err(Error::UnsupportedDimension(model.dim()));
    }
    if ts.iter().any(|t| *t <= 0.0) || ts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("gradient probe needs an increasing grid of positive times".into()));
    }
    let coarse = gradient_pass(model, f, s, ts, p, grid, cfg)?;
    let fine = gradient_pass(model, f, s, ts, p, &grid.refined(), &cfg.refined())?;
    let c1 = coarse.c1_per_t.iter().cloned().fold(0.0, f64::max);
    let c1_fine = fine.c1_per_t.iter().cloned().fold(0.0, f64::max);
    let (mut hold, mut total) = (0usize, 0usize);
    for ((t, g), w) in ts.iter().zip(&fine.grads).zip(&fine.weights) {
        let scale = t.powf(-0.5).max(1.0);
        for k in g.grid.nodes_within(g.grid.half_width / 2.0) {
            total += 1;
            if bound_ratio(g.values[k], w.values[k], p, scale) <= c1 {
                hold += 1;
            }
        }
    }
    let coverage = hold as f64 / total.max(1) as f64;
    let mut report = ConvergenceReport::new(format!("gradient-bound:{}", f.label()), ts.to_vec());
    let zeros = vec![0.0; ts.len()];
    report.push_series("c1", coarse.c1_per_t.clone(), zeros.clone())?;
    report.push_series("c1-refined", fine.c1_per_t.clone(), zeros.clone())?;
    report.push_series("sup-grad", coarse.sup_grad.clone(), zeros)?;
    let slope = if f.is_constant() || coarse.sup_grad.iter().any(|v| *v <= 0.0) {
        0.0
    } else {
        let lx: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
        let ly: Vec<f64> = coarse.sup_grad.iter().map(|v| v.ln()).collect();
        stats::linear_fit(&lx, &ly).0
    };
    let stability = if c1 > 0.0 { (c1_fine / c1 - 1.0).abs() } else if c1_fine == 0.0 { 0.0 } else { f64::INFINITY };
    report.constants.insert("c1".into(), c1);
    report.constants.insert("c1_refined".into(), c1_fine);
    report.constants.insert("slope".into(), slope);
    report.constants.insert("coverage".into(), coverage);
    report.judge("log-log slope of sup|grad u| >= min", "slope_min", tol.slope_min, slope, true);
    report.judge("log-log slope of sup|grad u| <= max", "slope_max", tol.slope_max, slope, false);
    report.judge("coverage of refined grid by coarse C1", "coverage_min", tol.coverage_min, coverage, true);
    report.judge("C1 change under refinement", "c1_stability", tol.c1_stability, stability, false);
    Ok(report)
}

/// `(∫∫ |∇_x G(s, s-t) h(·)|^p dμ̂_s ds)^{1/p}` over the window for each lag `t`, with `h`
/// independent of the time variable. Evolutions may not start before `history_start`.
pub fn semigroup_gradient_decay(
    model: &CoefficientModel,
    window: &SpaceTimeWindowMeasure,
    h: &TestFunction,
    lags: &[f64],
    p: f64,
    grid: &SpatialGrid,
    cfg: &FdConfig,
    history_start: f64,
) -> Result<ConvergenceReport> {
    let d = model.dim();
    if d > 2 {
        return Err(Error::UnsupportedDimension(d));
    }
    if !(p >= 1.0) {
        return Err(Error::Config(format!("p must be >= 1 (got {p})")));
    }
    let max_lag = lags.iter().cloned().fold(0.0, f64::max);
    if window.t0 - max_lag < history_start - 1e-12 {
        return Err(Error::Config(format!(
            "window underflow: lag {max_lag} from s = {} starts before {history_start}",
            window.t0
        )));
    }
    let n = window.slices[0].len();
    let rows: Vec<(f64, f64)> = lags
        .par_iter()
        .map(|&lag| -> Result<(f64, f64)> {
            let mut contrib = vec![0.0; n];
            for (mu, w) in window.slices.iter().zip(&window.weights) {
                let u = pde::solve_forward(model, &|x| h.value(x), mu.time - lag, mu.time, grid, cfg)?;
                let grads = u.gradient();
                for (j, x) in mu.ensemble.particles().enumerate() {
                    let g2: f64 = grads.iter().map(|g| g.interpolate(x).powi(2)).sum();
                    contrib[j] += w * g2.sqrt().powf(p);
                }
            }
            let (m, se) = stats::mean_se(&contrib);
            let value = m.powf(1.0 / p);
            // delta method for the p-th root
            let se = if m > 0.0 { value / (p * m) * se } else { 0.0 };
            Ok((value, se))
        })
        .collect::<Result<_>>()?;
    let mut report = ConvergenceReport::new(format!("semigroup-gradient:{}", h.label()), lags.to_vec());
    report.push_series("grad-norm", rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect())?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniquenessTolerances {
    /// absolute bound on W1 (non-positive disables it)
    pub w1_max: f64,
    /// bound on W1 in units of its SE (non-positive disables it)
    pub w1_se_multiple: f64,
}

impl Default for UniquenessTolerances {
    fn default() -> Self {
        Self { w1_max: 0.0, w1_se_multiple: 3.0 }
    }
}

/// Builds the measure family from two initializations with the same random streams and
/// reports W1 between them at every `t`.
pub fn uniqueness_probe(
    model: &CoefficientModel,
    t_grid: &[f64],
    init_a: &InitSpec,
    init_b: &InitSpec,
    cfg: &MeasureConfig,
    seed: u64,
    tol: &UniquenessTolerances,
) -> Result<ConvergenceReport> {
    let lineage = SeedLineage::new(seed);
    let fam_a = estimate_measure_series(model, t_grid, &MeasureConfig { init: init_a.clone(), ..cfg.clone() }, lineage)?;
    let fam_b = estimate_measure_series(model, t_grid, &MeasureConfig { init: init_b.clone(), ..cfg.clone() }, lineage)?;
    let dist: Vec<CloudDistance> = fam_a
        .par_iter()
        .zip(&fam_b)
        .map(|(a, b)| measure::cloud_distance(&a.ensemble, &b.ensemble, 50, seed))
        .collect();
    let mut report = ConvergenceReport::new(format!("uniqueness:{}-vs-{}", init_a.label(), init_b.label()), t_grid.to_vec());
    let w: Vec<f64> = dist.iter().map(|c| c.w1).collect();
    report.push_series("w1", w.clone(), dist.iter().map(|c| c.se).collect())?;
    let worst = w.iter().cloned().fold(0.0, f64::max);
    report.constants.insert("max_w1".into(), worst);
    if tol.w1_max > 0.0 {
        report.judge("max W1", "w1_max", tol.w1_max, worst, false);
    }
    if tol.w1_se_multiple > 0.0 {
        let z = dist.iter().map(|c| if c.w1 == 0.0 { 0.0 } else { c.w1 / c.se }).fold(0.0, f64::max);
        report.judge("max W1 / SE", "w1_se_multiple", tol.w1_se_multiple, z, false);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitTolerances {
    /// bound on `‖ρ̂(t) - ρ̂_∞‖_{L¹}` at the last time
    pub l1_final: f64,
    pub monotone_band: f64,
    /// bound on the limit deviation at the last lag, relative to `‖f‖_∞`
    pub deviation_rel: f64,
}

impl Default for LimitTolerances {
    fn default() -> Self {
        Self { l1_final: 0.05, monotone_band: 2.0, deviation_rel: 0.05 }
    }
}

/// Bootstrap floor of the L¹ distance between the KDEs of two clouds.
fn l1_floor(a: &MeasureEstimate, b: &MeasureEstimate, grid: &SpatialGrid, est: &Estimator, reps: usize, seed: u64) -> Result<f64> {
    let d = a.dim();
    let mut rng = SeedLineage::new(seed).block_rng(19);
    let mut one = |m: &MeasureEstimate| -> Result<f64> {
        let base = density_estimate(m, grid, est)?;
        let mut acc = 0.0;
        for _ in 0..reps {
            let n = m.len();
            let mut pos = Vec::with_capacity(n * d);
            for _ in 0..n {
                pos.extend_from_slice(m.ensemble.particle(rng.random_range(0..n)));
            }
            let mut star = m.clone();
            star.ensemble.positions = pos;
            acc += base.l1_distance(&density_estimate(&star, grid, est)?)?.powi(2);
        }
        Ok(acc / reps as f64)
    };
    Ok((one(a)? + one(b)?).sqrt())
}

/// Compares `ρ̂(t,·)` with the density of the limit model's long-run cloud, and measures
/// `‖G(s+lag,s)f - m̂_s(f)‖_{L^p(μ̂_∞)}` for each lag.
#[allow(clippy::too_many_arguments)]
pub fn limit_density_comparison(
    model: &CoefficientModel,
    t_grid: &[f64],
    grid: &SpatialGrid,
    estimator: &Estimator,
    cfg: &MeasureConfig,
    f: &TestFunction,
    s: f64,
    lags: &[f64],
    fd: &FdConfig,
    settings: &ProbeSettings,
    tol: &LimitTolerances,
) -> Result<(ConvergenceReport, ConvergenceReport)> {
    let limit = model
        .limit_model()
        .ok_or_else(|| Error::Config(format!("model {} has no limit coefficients", model.name())))?;
    let lineage = SeedLineage::new(derive_seed(settings.seed, "limit"));
    let mu_inf = estimate_measure(&limit, 0.0, cfg, lineage)?;
    let rho_inf = density_estimate(&mu_inf, grid, estimator)?;
    let family = estimate_measure_series(model, t_grid, cfg, SeedLineage::new(derive_seed(settings.seed, "family")))?;
    let rows: Vec<(f64, f64, f64)> = family
        .par_iter()
        .enumerate()
        .map(|(i, mu)| -> Result<(f64, f64, f64)> {
            let rho = density_estimate(mu, grid, estimator)?;
            let l1 = rho.l1_distance(&rho_inf)?;
            let sup = rho.sup_distance_within(&rho_inf, settings.radius);
            let se = l1_floor(mu, &mu_inf, grid, estimator, 10, derive_seed(settings.seed, &format!("l1-{i}")))?;
            Ok((l1, se, sup))
        })
        .collect::<Result<_>>()?;
    let mut densities = ConvergenceReport::new("limit-density", t_grid.to_vec());
    let l1: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let l1_se: Vec<f64> = rows.iter().map(|r| r.1).collect();
    densities.push_series("l1", l1.clone(), l1_se.clone())?;
    densities.push_series("sup-density", rows.iter().map(|r| r.2).collect(), vec![0.0; rows.len()])?;
    if t_grid.len() >= 2 {
        let slope = stats::linear_fit(t_grid, &l1).0;
        densities.constants.insert("l1_slope".into(), slope);
        densities.judge("L1 trend slope", "l1_slope_max", 0.0, slope, false);
    }
    densities.judge("L1 nonincreasing", "monotone_band", tol.monotone_band, worst_increase(&l1, &l1_se), false);
    if let Some(last) = l1.last() {
        densities.judge("L1 at the last time", "l1_final", tol.l1_final, *last, false);
    }

    let mu_s = estimate_measure(model, s, cfg, SeedLineage::new(derive_seed(settings.seed, "limit-s")))?;
    let fs: Vec<f64> = mu_s.ensemble.particles().map(|x| f.value(x)).collect();
    let times: Vec<f64> = lags.iter().map(|l| s + l).collect();
    let engine_grid = *grid;
    let devs: Vec<Deviation> = if model.dim() <= 2 {
        let sol = pde::solve_snapshots(model, &|x| f.value(x), s, &times, &engine_grid, fd)?;
        sol.snapshots
            .par_iter()
            .enumerate()
            .map(|(i, u)| {
                let g: Vec<f64> = mu_inf.ensemble.particles().map(|x| u.interpolate(x)).collect();
                lp_deviation(&g, &[], &fs, settings.p, settings.bootstrap_reps, derive_seed(settings.seed, &format!("dev-{i}")))
            })
            .collect()
    } else {
        return Err(Error::UnsupportedDimension(model.dim()));
    };
    let mut deviation = ConvergenceReport::new(format!("limit-deviation:{}", f.label()), lags.to_vec());
    deviation.push_series("deviation", devs.iter().map(|d| d.value).collect(), devs.iter().map(|d| d.se).collect())?;
    if let (Some(last), Some(sup)) = (devs.last(), f.sup_norm()) {
        deviation.judge("deviation at the last lag / sup|f|", "deviation_rel", tol.deviation_rel, last.value / sup, false);
    }
    Ok((densities, deviation))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossRow {
    pub point: Vec<f64>,
    pub fd: f64,
    pub mc: f64,
    pub se: f64,
}

impl CrossRow {
    pub fn z(&self) -> f64 {
        if self.fd == self.mc {
            0.0
        } else {
            (self.fd - self.mc).abs() / self.se
        }
    }
}

/// `G(t,s)f` by both engines at `points`.
pub fn cross_validate(
    model: &CoefficientModel,
    f: &TestFunction,
    s: f64,
    t: f64,
    points: &[f64],
    fd: &GEngine,
    mc: &GEngine,
) -> Result<Vec<CrossRow>> {
    let d = model.dim();
    let a = evaluate_g(model, f, s, t, &Target::Points(points.to_vec()), fd)?;
    let b = evaluate_g(model, f, s, t, &Target::Points(points.to_vec()), mc)?;
    Ok(points
        .chunks_exact(d)
        .enumerate()
        .map(|(i, p)| CrossRow {
            point: p.to_vec(),
            fd: a.values[i],
            mc: b.values[i],
            se: (a.se[i].powi(2) + b.se[i].powi(2)).sqrt(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example_family::{build_ou_model, preset, OUParams, TimeProfile};
    use crate::sde::IntegratorConfig;

    fn ou1() -> CoefficientModel {
        build_ou_model(&OUParams { dim: 1, b0: TimeProfile::Constant { value: 1.0 } }).unwrap()
    }

    fn fd(l: f64, dx: f64, dt: f64) -> GEngine {
        GEngine::Fd { grid: SpatialGrid::new(1, l, dx).unwrap(), cfg: FdConfig { dt, ..Default::default() } }
    }

    #[test]
    fn constants_are_preserved_by_both_engines() {
        let m = preset("power-1d-a").unwrap().model;
        let f = TestFunction::Constant { value: 1.0 };
        let pts = vec![-1.0, 0.0, 0.7];
        let a = evaluate_g(&m, &f, 0.0, 1.0, &Target::Points(pts.clone()), &fd(6.0, 0.05, 1e-2)).unwrap();
        let b = evaluate_g(&m, &f, 0.0, 1.0, &Target::Points(pts), &GEngine::Mc { inner: 100, cfg: IntegratorConfig::default(), seed: 1 }).unwrap();
        // FD keeps constants up to rounding in the solves and the interpolation
        assert!(a.values.iter().all(|v| (v - 1.0).abs() < 1e-12), "{:?}", a.values);
        assert!(b.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn ou_deviation_matches_exponential_decay() {
        let m = ou1();
        let cfg = MeasureConfig::new(8.0, 20_000);
        let mu_s = estimate_measure(&m, 0.0, &cfg, SeedLineage::new(1)).unwrap();
        let settings = ProbeSettings { bootstrap_reps: 100, ..Default::default() };
        for t in [0.5, 1.5] {
            let mu_t = estimate_measure(&m, t, &cfg, SeedLineage::new(2)).unwrap();
            let dev = weighted_deviation(&m, &TestFunction::Coordinate, &mu_s, &mu_t, &fd(8.0, 0.02, 5e-3), &settings).unwrap();
            let want = (-t).exp();
            assert!((dev.value - want).abs() < 3.0 * dev.se + 0.01 * want, "t={t}: {dev:?} vs {want}");
        }
    }

    #[test]
    fn deviation_scales_and_ignores_constants() {
        let m = preset("power-1d-a").unwrap().model;
        let cfg = MeasureConfig::new(6.0, 5_000);
        let mu_s = estimate_measure(&m, 0.0, &cfg, SeedLineage::new(3)).unwrap();
        let mu_t = estimate_measure(&m, 1.0, &cfg, SeedLineage::new(4)).unwrap();
        let e = fd(6.0, 0.05, 1e-2);
        let st = ProbeSettings { bootstrap_reps: 20, ..Default::default() };
        let f = TestFunction::TanhBump { width: 0.5 };
        let base = weighted_deviation(&m, &f, &mu_s, &mu_t, &e, &st).unwrap().value;
        for a in [-2.0, 0.0, 3.0] {
            let v = weighted_deviation(&m, &f.clone().scaled(a), &mu_s, &mu_t, &e, &st).unwrap().value;
            assert!((v - a.abs() * base).abs() <= 1e-12 * base, "alpha={a}");
        }
        let (ms, _) = measure::mean_functional(&mu_s, &|x| f.value(x));
        let shifted = weighted_deviation(&m, &f.clone().shifted(-ms), &mu_s, &mu_t, &e, &st).unwrap().value;
        assert!((shifted - base).abs() < 1e-12, "{shifted} vs {base}");
        let c = weighted_deviation(&m, &TestFunction::Constant { value: 4.0 }, &mu_s, &mu_t, &e, &st).unwrap();
        assert_eq!((c.value, c.se), (0.0, 0.0));
    }

    #[test]
    fn curve_decays_monotonically_on_ou() {
        let m = ou1();
        let ts = [0.5, 1.0, 2.0, 4.0];
        let st = ProbeSettings { bootstrap_reps: 50, ..Default::default() };
        let f = TestFunction::ClippedCoordinate { clip: 2.0 };
        let r = convergence_curve(&m, &f, 0.0, &ts, &fd(8.0, 0.05, 1e-2), &MeasureConfig::new(8.0, 10_000), &st, &CurveTolerances { decay_ratio: 0.2, ..Default::default() })
            .unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
        let sup = r.series("sup-deviation").unwrap();
        assert!(sup.values[3] < sup.values[0]);
        let flat = convergence_curve(&m, &TestFunction::Constant { value: 1.0 }, 0.0, &ts, &fd(8.0, 0.05, 1e-2), &MeasureConfig::new(4.0, 1000), &st, &CurveTolerances::default()).unwrap();
        assert!(flat.series("h").unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mc_curve_agrees_with_fd_curve() {
        let m = ou1();
        let ts = [1.0];
        let st = ProbeSettings { bootstrap_reps: 50, outer_cap: 1000, ..Default::default() };
        let f = TestFunction::TanhBump { width: 0.5 };
        let mc = GEngine::Mc { inner: 200, cfg: IntegratorConfig::with_dt(1e-2), seed: 9 };
        let cfg = MeasureConfig::new(6.0, 5_000);
        let a = convergence_curve(&m, &f, 0.0, &ts, &fd(8.0, 0.05, 1e-2), &cfg, &st, &CurveTolerances::default()).unwrap();
        let b = convergence_curve(&m, &f, 0.0, &ts, &mc, &cfg, &st, &CurveTolerances::default()).unwrap();
        let (ha, hb) = (&a.series("h").unwrap(), &b.series("h").unwrap());
        let se = (ha.se[0].powi(2) + hb.se[0].powi(2)).sqrt();
        assert!((ha.values[0] - hb.values[0]).abs() < 3.0 * se + 0.01, "{ha:?} {hb:?}");
    }

    #[test]
    fn noise_is_removed_from_the_square_deviation() {
        // ĝ_j = m + ε_j with Var ε = σ²: the raw L² deviation is σ, the corrected one ~0
        let mut rng = SeedLineage::new(4).block_rng(0);
        let sigma = 0.1;
        let g: Vec<f64> = (0..4000).map(|_| 0.5 + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let noise = vec![sigma * sigma; g.len()];
        let fs = vec![0.5; 10];
        let raw = lp_deviation(&g, &[], &fs, 2.0, 20, 1);
        let fixed = lp_deviation(&g, &noise, &fs, 2.0, 20, 1);
        assert!((raw.value - sigma).abs() < 0.005, "{raw:?}");
        assert!(fixed.value < 0.02, "{fixed:?}");
        // p ≠ 2 is left as is
        assert_eq!(lp_deviation(&g, &noise, &fs, 3.0, 20, 1), lp_deviation(&g, &[], &fs, 3.0, 20, 1));
    }

    #[test]
    fn mc_curve_is_not_floored_by_inner_noise() {
        let m = ou1();
        let ts = [4.0];
        let st = ProbeSettings { bootstrap_reps: 50, outer_cap: 1000, ..Default::default() };
        let f = TestFunction::TanhBump { width: 0.5 };
        let mc = GEngine::Mc { inner: 50, cfg: IntegratorConfig::with_dt(1e-2), seed: 10 };
        let cfg = MeasureConfig::new(6.0, 5_000);
        let a = convergence_curve(&m, &f, 0.0, &ts, &fd(8.0, 0.05, 1e-2), &cfg, &st, &CurveTolerances::default()).unwrap();
        let b = convergence_curve(&m, &f, 0.0, &ts, &mc, &cfg, &st, &CurveTolerances::default()).unwrap();
        let (ha, hb) = (&a.series("h").unwrap(), &b.series("h").unwrap());
        let se = (ha.se[0].powi(2) + hb.se[0].powi(2)).sqrt();
        assert!((ha.values[0] - hb.values[0]).abs() < 3.0 * se, "{ha:?} {hb:?}");
    }

    #[test]
    fn gradient_probe_constant_and_heat_like() {
        let m = ou1();
        let grid = SpatialGrid::new(1, 4.0, 0.01).unwrap();
        let cfg = FdConfig { dt: 1e-4, ..Default::default() };
        let ts = [0.01, 0.02, 0.04];
        let c = gradient_bound_probe(&m, &TestFunction::Constant { value: 2.0 }, 0.0, &ts, 2.0, &grid, &cfg, &GradientTolerances::default()).unwrap();
        assert_eq!(c.constants["c1"], 0.0);
        assert_eq!(c.constants["coverage"], 1.0);
        let r = gradient_bound_probe(&m, &TestFunction::TanhRamp { slope: 5.0 }, 0.0, &ts, 2.0, &grid, &cfg, &GradientTolerances::default()).unwrap();
        assert!(r.constants["c1"].is_finite() && r.constants["c1"] > 0.0);
        assert!(r.constants["slope"] < 0.0);
        assert!(r.constants["coverage"] > 0.9);
    }

    #[test]
    fn semigroup_gradient_is_exponential_for_linear_h() {
        let m = ou1();
        let cfg = MeasureConfig::new(6.0, 2_000);
        let w = SpaceTimeWindowMeasure::build(&m, 3.0, 4.0, 3, &cfg, SeedLineage::new(6)).unwrap();
        let grid = SpatialGrid::new(1, 10.0, 0.05).unwrap();
        let fdc = FdConfig { dt: 1e-2, ..Default::default() };
        let r = semigroup_gradient_decay(&m, &w, &TestFunction::Coordinate, &[0.5, 1.0, 2.0], 2.0, &grid, &fdc, 0.0).unwrap();
        let g = r.series("grad-norm").unwrap();
        for (lag, v) in [0.5f64, 1.0, 2.0].iter().zip(&g.values) {
            let want = (-lag).exp() * 1f64.sqrt();
            assert!((v - want).abs() < 1e-3 * want, "lag {lag}: {v} vs {want}");
        }
        assert!(semigroup_gradient_decay(&m, &w, &TestFunction::Coordinate, &[4.0], 2.0, &grid, &fdc, 0.0).is_err());
    }

    #[test]
    fn identical_inits_give_zero_distance() {
        let m = ou1();
        let init = InitSpec::Normal { variance: 4.0 };
        let r = uniqueness_probe(&m, &[0.0, 1.0], &init, &init, &MeasureConfig::new(2.0, 2000), 5, &UniquenessTolerances::default()).unwrap();
        assert!(r.series("w1").unwrap().values.iter().all(|v| *v == 0.0));
        assert!(r.passed());
    }

    #[test]
    fn different_inits_are_coupled_through_shared_increments() {
        // OU contracts pathwise: with shared noise the two clouds differ by about e^{-T_burn}
        let m = ou1();
        let a = InitSpec::PointMass { at: Vec::new() };
        let b = InitSpec::Normal { variance: 4.0 };
        let r = uniqueness_probe(&m, &[0.0, 1.0], &a, &b, &MeasureConfig::new(6.0, 2000), 5, &UniquenessTolerances::default()).unwrap();
        let w1 = r.series("w1").unwrap();
        assert!(w1.values.iter().all(|v| *v < 2.0 * (-6.0f64).exp()), "{w1:?}");
    }

    #[test]
    fn limit_comparison_requires_limits_and_detects_convergence() {
        let m = ou1();
        let grid = SpatialGrid::new(1, 6.0, 0.05).unwrap();
        let st = ProbeSettings { bootstrap_reps: 20, ..Default::default() };
        let (dens, dev) = limit_density_comparison(
            &m, &[1.0, 2.0], &grid, &Estimator::Kernel { bandwidth: None }, &MeasureConfig::new(6.0, 5000),
            &TestFunction::TanhBump { width: 0.5 }, 0.0, &[1.0, 5.0], &FdConfig { dt: 1e-2, ..Default::default() }, &st, &LimitTolerances::default(),
        )
        .unwrap();
        let l1 = dens.series("l1").unwrap();
        for (v, se) in l1.values.iter().zip(&l1.se) {
            assert!(*v < 3.0 * se, "{v} vs {se}");
        }
        assert!(dev.series("deviation").unwrap().values[1] < 0.05);
        let power = preset("power-1d-a").unwrap().model;
        assert!(limit_density_comparison(
            &power, &[1.0], &grid, &Estimator::Histogram, &MeasureConfig::new(1.0, 10), &TestFunction::Coordinate, 0.0, &[1.0],
            &FdConfig::default(), &st, &LimitTolerances::default()
        )
        .is_err());
    }

    #[test]
    fn worst_increase_detects_rises() {
        assert!(worst_increase(&[1.0, 0.5, 0.4], &[0.1, 0.1, 0.1]) < 0.0);
        assert!((worst_increase(&[1.0, 1.2], &[0.1, 0.0]) - 2.0).abs() < 1e-12);
        assert_eq!(worst_increase(&[1.0, 1.2], &[0.0, 0.0]), f64::INFINITY);
    }
}

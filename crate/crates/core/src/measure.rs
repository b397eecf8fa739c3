//! Particle estimates of the evolution system of measures `{μ_t}` and their diagnostics.
//!
//! `μ_t` is built by pulling a cloud back from the future: particles start at coefficient
//! time `t + T_burn` and run the reversed schedule down to `t`. Pulling back is what
//! makes the family invariant for `G`, `∫G(t,s)f dμ_t = ∫f dμ_s`; a forward flow from
//! the past produces the family of the forward-in-time process instead, which differs
//! as soon as the coefficients depend on time. One descending run yields estimates at
//! every requested time.

use crate::coefficient_model::{apply_generator, CoefficientModel};
use crate::error::{Error, Result};
use crate::pde::{self, FdConfig, GridFunction, SpatialGrid};
use crate::rng::SeedLineage;
use crate::sde::{self, InitSpec, IntegratorConfig, ParticleEnsemble};
use crate::stats;
use crate::test_functions::TestFunction;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub t_burn: f64,
    pub particles: usize,
    #[serde(default = "default_init")]
    pub init: InitSpec,
    #[serde(default)]
    pub integrator: IntegratorConfig,
}

fn default_init() -> InitSpec {
    InitSpec::PointMass { at: vec![] }
}

impl MeasureConfig {
    pub fn new(t_burn: f64, particles: usize) -> Self {
        Self { t_burn, particles, init: default_init(), integrator: IntegratorConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_burn > 0.0) || self.particles == 0 {
            return Err(Error::Config(format!(
                "measure estimation needs t_burn > 0 and particles > 0 (got {}, {})",
                self.t_burn, self.particles
            )));
        }
        self.integrator.validate()
    }
}

/// Equal-weight cloud approximating `μ_t`.
#[derive(Clone, Debug)]
pub struct MeasureEstimate {
    pub time: f64,
    pub ensemble: ParticleEnsemble,
    pub density: Option<DensityEstimate>,
    pub t_burn: f64,
    pub init: InitSpec,
}

impl MeasureEstimate {
    pub fn len(&self) -> usize {
        self.ensemble.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensemble.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.ensemble.dim
    }

    pub fn total_weight(&self) -> f64 {
        self.ensemble.weight() * self.len() as f64
    }
}

/// `μ̂_t` for every `t` in `times` from one descending run started at `max(times) + T_burn`.
pub fn estimate_measure_series(
    model: &CoefficientModel,
    times: &[f64],
    cfg: &MeasureConfig,
    lineage: SeedLineage,
) -> Result<Vec<MeasureEstimate>> {
    cfg.validate()?;
    if times.is_empty() {
        return Ok(Vec::new());
    }
    let top = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + cfg.t_burn;
    let bottom = times.iter().cloned().fold(f64::INFINITY, f64::min);
    // initial positions come from a side lineage so every init sees the same increments
    let drawn = ParticleEnsemble::sample(&cfg.init, cfg.particles, model.dim(), top, SeedLineage::new(crate::rng::derive_seed(lineage.root, &format!("init-{}", lineage.epoch))))?;
    let start = ParticleEnsemble { lineage, ..drawn };
    let clouds = sde::pull_back(model, &start, bottom, times, &cfg.integrator)?;
    Ok(clouds
        .into_iter()
        .map(|ensemble| MeasureEstimate {
            time: ensemble.time,
            ensemble,
            density: None,
            t_burn: cfg.t_burn,
            init: cfg.init.clone(),
        })
        .collect())
}

pub fn estimate_measure(model: &CoefficientModel, t: f64, cfg: &MeasureConfig, lineage: SeedLineage) -> Result<MeasureEstimate> {
    Ok(estimate_measure_series(model, &[t], cfg, lineage)?.remove(0))
}

/// `(m̂_t(f), SE)`.
pub fn mean_functional(m: &MeasureEstimate, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> (f64, f64) {
    let vals: Vec<f64> = m.ensemble.particles().map(f).collect();
    stats::mean_se(&vals)
}

/// W1 (sliced for d >= 2) between two clouds with its bootstrap noise floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudDistance {
    pub w1: f64,
    pub se: f64,
}

pub const SLICES: usize = 16;

pub fn cloud_distance(a: &ParticleEnsemble, b: &ParticleEnsemble, reps: usize, seed: u64) -> CloudDistance {
    let d = a.dim;
    CloudDistance {
        w1: stats::w1(&a.positions, &b.positions, d, SLICES, seed),
        se: stats::w1_bootstrap_floor(&a.positions, &b.positions, d, reps, SLICES, seed),
    }
}

/// Self-consistency of the burn-in: builds `μ̂_t` with `T_burn` and `2T_burn` from
/// independent streams and compares them.
pub fn burn_in_check(model: &CoefficientModel, t: f64, cfg: &MeasureConfig, lineage: SeedLineage) -> Result<CloudDistance> {
    let a = estimate_measure(model, t, cfg, lineage)?;
    let doubled = MeasureConfig { t_burn: 2.0 * cfg.t_burn, ..cfg.clone() };
    let b = estimate_measure(model, t, &doubled, SeedLineage::new(crate::rng::derive_seed(lineage.root, "doubled-burn-in")))?;
    Ok(cloud_distance(&a.ensemble, &b.ensemble, 50, lineage.root))
}

/// Pulls `μ̂_t` back to `s` and compares it with an independently built `μ̂_s`.
pub fn pushforward_consistency(
    model: &CoefficientModel,
    mu_t: &MeasureEstimate,
    mu_s: &MeasureEstimate,
    cfg: &IntegratorConfig,
) -> Result<CloudDistance> {
    let carried = sde::evolve_reversed(model, &mu_t.ensemble, mu_s.time, mu_t.time, cfg)?;
    Ok(cloud_distance(&carried, &mu_s.ensemble, 50, mu_t.ensemble.lineage.root))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Estimator {
    Histogram,
    /// Gaussian kernel; Silverman's rule when no bandwidth is given
    Kernel {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
    pub time: f64,
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
    pub estimator: Estimator,
    /// bandwidth actually used per axis (empty for histograms)
    pub bandwidth: Vec<f64>,
    pub particles: usize,
    /// nodes with zero estimated density
    pub empty_cells: usize,
}

impl DensityEstimate {
    /// Riemann sum over the grid.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx.powi(self.grid.dim as i32)
    }

    pub fn as_grid_function(&self) -> GridFunction {
        GridFunction { grid: self.grid, values: self.values.clone(), time: self.time }
    }

    /// Minimum over nodes with `|x| <= radius` and where it is attained.
    pub fn min_within(&self, radius: f64) -> (f64, Vec<f64>) {
        let mut best = (f64::INFINITY, Vec::new());
        let mut p = vec![0.0; self.grid.dim];
        for k in self.grid.nodes_within(radius) {
            if self.values[k] < best.0 {
                self.grid.point(k, &mut p);
                best = (self.values[k], p.clone());
            }
        }
        best
    }

    /// `∫|ρ - ρ'|` by Riemann sum on the common grid.
    pub fn l1_distance(&self, other: &DensityEstimate) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::Config("densities live on different grids".into()));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * self.grid.dx.powi(self.grid.dim as i32))
    }

    pub fn sup_distance_within(&self, other: &DensityEstimate, radius: f64) -> f64 {
        self.as_grid_function().max_diff_within(&other.as_grid_function(), radius)
    }
}

pub fn density_estimate(m: &MeasureEstimate, grid: &SpatialGrid, estimator: &Estimator) -> Result<DensityEstimate> {
    let d = m.dim();
    if d != grid.dim {
        return Err(Error::DimensionMismatch { expected: d, got: grid.dim, context: "density grid" });
    }
    let pts = &m.ensemble.positions;
    let lo = -grid.half_width;
    let (values, bandwidth) = match estimator {
        Estimator::Histogram => (stats::histogram(pts, d, lo, grid.dx, grid.nodes), Vec::new()),
        Estimator::Kernel { bandwidth } => {
            let h = match bandwidth {
                Some(h) => vec![*h; d],
                None => stats::silverman_bandwidth(pts, d),
            };
            if h.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(format!("kernel bandwidth must be > 0 (got {h:?})")));
            }
            let v = if d == 1 {
                let xs: Vec<f64> = (0..grid.nodes).map(|i| grid.coord(i)).collect();
                stats::kde_1d(&stats::sorted(pts), h[0], &xs)
            } else {
                stats::kde_binned(pts, d, &h, lo, grid.dx, grid.nodes)
            };
            (v, h)
        }
    };
    let empty_cells = values.iter().filter(|v| **v <= 0.0).count();
    if empty_cells > 0 {
        log::debug!("density estimate at t={} has {empty_cells} empty cells", m.time);
    }
    Ok(DensityEstimate {
        time: m.time,
        grid: *grid,
        values,
        estimator: estimator.clone(),
        bandwidth,
        particles: m.len(),
        empty_cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityFloor {
    pub value: f64,
    pub time: f64,
    pub x: Vec<f64>,
}

/// `δ̂_k`: smallest estimated density over the series and over `B_k`.
pub fn density_floor(series: &[DensityEstimate], radius: f64) -> Result<DensityFloor> {
    let mut best = DensityFloor { value: f64::INFINITY, time: f64::NAN, x: Vec::new() };
    for dens in series {
        if dens.grid.half_width < radius {
            return Err(Error::Config(format!(
                "density grid (L = {}) does not cover B_{radius}",
                dens.grid.half_width
            )));
        }
        let (v, x) = dens.min_within(radius);
        if v < best.value {
            best = DensityFloor { value: v, time: dens.time, x };
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub radius: f64,
    /// `sup_t μ̂_t(|x| > R)`
    pub outside_mass: f64,
    pub se: f64,
    pub time: f64,
}

pub fn tightness_profile(series: &[MeasureEstimate], radii: &[f64]) -> Vec<TightnessRow> {
    radii
        .iter()
        .map(|&r| {
            let mut row = TightnessRow { radius: r, outside_mass: 0.0, se: 0.0, time: f64::NAN };
            for m in series {
                let n = m.len() as f64;
                let out = m.ensemble.particles().filter(|p| p.iter().map(|v| v * v).sum::<f64>() > r * r).count() as f64;
                let frac = out / n;
                if frac > row.outside_mass || row.time.is_nan() {
                    row = TightnessRow { radius: r, outside_mass: frac, se: (frac * (1.0 - frac) / n).sqrt(), time: m.time };
                }
            }
            row
        })
        .collect()
}

/// How `G(t,s)f` is evaluated at cloud points.
#[derive(Clone, Debug)]
pub enum GEngine {
    /// FD solve, interpolated at the points (d <= 2)
    Fd { grid: SpatialGrid, cfg: FdConfig },
    /// `inner` reversed-schedule paths per point
    Mc { inner: usize, cfg: IntegratorConfig, seed: u64 },
}

/// `(G(t,s)f)(x_j)` for every particle of `points` (row-major), each with a standard error
/// (zero for FD).
pub fn evaluate_g_at(
    model: &CoefficientModel,
    f: &TestFunction,
    s: f64,
    t: f64,
    points: &[f64],
    engine: &GEngine,
) -> Result<Vec<(f64, f64)>> {
    let d = model.dim();
    match engine {
        GEngine::Fd { grid, cfg } => {
            let u = pde::solve_forward(model, &|x| f.value(x), s, t, grid, cfg)?;
            Ok(points.chunks_exact(d).map(|p| (u.interpolate(p), 0.0)).collect())
        }
        GEngine::Mc { inner, cfg, seed } => {
            let inner = (*inner).max(1);
            let n = points.len() / d;
            let mut rep = Vec::with_capacity(n * inner * d);
            for p in points.chunks_exact(d) {
                for _ in 0..inner {
                    rep.extend_from_slice(p);
                }
            }
            let start = ParticleEnsemble::new(t, d, rep, SeedLineage::new(*seed))?;
            let end = sde::evolve_reversed(model, &start, s, t, cfg)?;
            let vals: Vec<f64> = end.particles().map(|x| f.value(x)).collect();
            Ok(vals.chunks(inner).map(stats::mean_se).collect())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub value: f64,
    pub se: f64,
}

impl Residual {
    pub fn within(&self, k: f64) -> bool {
        self.value.abs() <= k * self.se
    }
}

/// `∫G(t,s)f dμ̂_t - m̂_s(f)` with the standard error of the two independent parts.
pub fn invariance_residual(
    model: &CoefficientModel,
    f: &TestFunction,
    mu_s: &MeasureEstimate,
    mu_t: &MeasureEstimate,
    engine: &GEngine,
) -> Result<Residual> {
    let (s, t) = (mu_s.time, mu_t.time);
    if t < s {
        return Err(Error::Config(format!("invariance needs t >= s (got s = {s}, t = {t})")));
    }
    if f.is_constant() {
        return Ok(Residual { value: 0.0, se: 0.0 });
    }
    let g = evaluate_g_at(model, f, s, t, &mu_t.ensemble.positions, engine)?;
    let lhs_vals: Vec<f64> = g.iter().map(|v| v.0).collect();
    let (lhs, lhs_se) = stats::mean_se(&lhs_vals);
    let (rhs, rhs_se) = mean_functional(mu_s, &|x| f.value(x));
    Ok(Residual { value: lhs - rhs, se: (lhs_se * lhs_se + rhs_se * rhs_se).sqrt() })
}

/// `ν` restricted to `[T₀, T₁]`: slices on a uniform grid with trapezoid weights.
#[derive(Clone, Debug)]
pub struct SpaceTimeWindowMeasure {
    pub t0: f64,
    pub t1: f64,
    pub slices: Vec<MeasureEstimate>,
    pub weights: Vec<f64>,
}

impl SpaceTimeWindowMeasure {
    /// All slices from one descending run, so particle `j` traces one path through them.
    pub fn build(
        model: &CoefficientModel,
        t0: f64,
        t1: f64,
        n_slices: usize,
        cfg: &MeasureConfig,
        lineage: SeedLineage,
    ) -> Result<Self> {
        if !(t1 > t0) || n_slices < 2 {
            return Err(Error::Config(format!("window needs t1 > t0 and >= 2 slices (got [{t0}, {t1}], {n_slices})")));
        }
        let h = (t1 - t0) / (n_slices - 1) as f64;
        let times: Vec<f64> = (0..n_slices).map(|i| if i + 1 == n_slices { t1 } else { t0 + i as f64 * h }).collect();
        let slices = estimate_measure_series(model, &times, cfg, lineage)?;
        let weights = (0..n_slices).map(|i| if i == 0 || i + 1 == n_slices { h / 2.0 } else { h }).collect();
        Ok(Self { t0, t1, slices, weights })
    }

    pub fn times(&self) -> Vec<f64> {
        self.slices.iter().map(|m| m.time).collect()
    }

    /// Window slice whose time is closest to `s`.
    pub fn slice_at(&self, s: f64) -> &MeasureEstimate {
        self.slices
            .iter()
            .min_by(|a, b| (a.time - s).abs().total_cmp(&(b.time - s).abs()))
            .expect("window has slices")
    }
}

/// Smooth bump `ψ(s) = exp(1 - 1/(1 - z²))`, `z` mapping `[a, b]` to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBump {
    pub a: f64,
    pub b: f64,
}

impl TimeBump {
    pub fn value(&self, s: f64) -> f64 {
        let z = (2.0 * s - self.a - self.b) / (self.b - self.a);
        if z.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - z * z)).exp()
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        let z = (2.0 * s - self.a - self.b) / (self.b - self.a);
        if z.abs() >= 1.0 {
            return 0.0;
        }
        let w = 1.0 - z * z;
        self.value(s) * (-2.0 * z / (w * w)) * 2.0 / (self.b - self.a)
    }
}

/// `∫ψ(s) m̂_s(A(s)φ) ds - ∫ψ'(s) m̂_s(φ) ds` over the window, with an SE from the
/// per-path contributions (paths are i.i.d.).
pub fn infinitesimal_invariance_residual(
    model: &CoefficientModel,
    window: &SpaceTimeWindowMeasure,
    psi: &TimeBump,
    phi: &TestFunction,
) -> Result<Residual> {
    if psi.a < window.t0 || psi.b > window.t1 {
        return Err(Error::Config(format!(
            "time bump support [{}, {}] leaves the window [{}, {}]",
            psi.a, psi.b, window.t0, window.t1
        )));
    }
    let n = window.slices[0].len();
    if window.slices.iter().any(|m| m.len() != n) {
        return Err(Error::Config("window slices must share particles".into()));
    }
    let per_particle: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| -> Result<f64> {
            let mut acc = 0.0;
            for (m, w) in window.slices.iter().zip(&window.weights) {
                let (ps, dps) = (psi.value(m.time), psi.derivative(m.time));
                if ps == 0.0 && dps == 0.0 {
                    continue;
                }
                let x = m.ensemble.particle(j);
                let jet = phi.jet(x)?;
                let a_phi = apply_generator(model, m.time, x, &jet)?;
                acc += w * (ps * a_phi - dps * jet.value);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (value, se) = stats::mean_se(&per_particle);
    Ok(Residual { value, se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example_family::{build_ou_model, OUParams, OuOracle, TimeProfile};
    use crate::test_functions::{normal_cdf, normal_pdf};

    fn ou(b0: TimeProfile) -> CoefficientModel {
        build_ou_model(&OUParams { dim: 1, b0 }).unwrap()
    }

    #[test]
    fn constant_functional_has_zero_error() {
        let m = estimate_measure(&ou(TimeProfile::Constant { value: 1.0 }), 0.0, &MeasureConfig::new(1.0, 1000), SeedLineage::new(1)).unwrap();
        assert_eq!(mean_functional(&m, &|_| 0.1), (0.1, 0.0));
        assert_eq!(m.len(), 1000);
        assert!((m.total_weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ou_measure_moments_and_density() {
        let m = estimate_measure(&ou(TimeProfile::Constant { value: 1.0 }), 0.0, &MeasureConfig::new(10.0, 100_000), SeedLineage::new(2)).unwrap();
        let ks = stats::ks_statistic(&m.ensemble.coordinate(0), normal_cdf);
        assert!(ks < 0.01, "{ks}");
        let (x2, se2) = mean_functional(&m, &|x| x[0] * x[0]);
        assert!((x2 - 1.0).abs() < 3.0 * se2 + 0.01, "{x2} ± {se2}");
        let (x1, se1) = mean_functional(&m, &|x| x[0]);
        assert!(x1.abs() < 3.0 * se1, "{x1} ± {se1}");
        let grid = SpatialGrid::new(1, 6.0, 0.05).unwrap();
        let dens = density_estimate(&m, &grid, &Estimator::Kernel { bandwidth: None }).unwrap();
        assert!((dens.mass() - 1.0).abs() < 0.01);
        let err = grid.nodes_within(2.0).into_iter().map(|k| (dens.values[k] - normal_pdf(grid.coord(k))).abs()).fold(0.0, f64::max);
        assert!(err < 0.02, "{err}");
        let floor = density_floor(std::slice::from_ref(&dens), 1.0).unwrap();
        assert!((floor.value - 0.2420).abs() < 0.02, "{floor:?}");
        let inner = density_floor(std::slice::from_ref(&dens), 0.5).unwrap();
        assert!(inner.value >= floor.value);
        let hist = density_estimate(&m, &grid, &Estimator::Histogram).unwrap();
        assert!((hist.mass() - 1.0).abs() < 0.01);
        let tight = tightness_profile(std::slice::from_ref(&m), &[1.0, 3.0, 100.0]);
        assert!((tight[1].outside_mass - 2.0 * normal_cdf(-3.0)).abs() < 3.0 * tight[1].se + 5e-4);
        assert!(tight[0].outside_mass >= tight[1].outside_mass);
        assert_eq!(tight[2].outside_mass, 0.0);
    }

    /// The pulled-back family matches the closed-form variance for a time-dependent rate,
    /// and differs from the forward-flow variance.
    #[test]
    fn pulled_back_family_matches_oracle() {
        let b0 = TimeProfile::Sine { mean: 1.0, amplitude: 0.5, frequency: 1.0 };
        let m = ou(b0.clone());
        let o = OuOracle::new(&OUParams { dim: 1, b0 });
        let n = 100_000;
        let cfg = MeasureConfig { integrator: IntegratorConfig::with_dt(2e-3), ..MeasureConfig::new(6.0, n) };
        let series = estimate_measure_series(&m, &[1.0, 2.0], &cfg, SeedLineage::new(3)).unwrap();
        for mu in &series {
            let (x2, _) = mean_functional(mu, &|x| x[0] * x[0]);
            let v = o.measure_variance(mu.time);
            let se = 2f64.sqrt() * v / (n as f64).sqrt();
            assert!((x2 - v).abs() < 3.0 * se + 5e-3, "t={} {x2} vs {v}", mu.time);
            let fwd = o.forward_variance(mu.time, mu.time - 40.0);
            assert!((fwd - v).abs() > 6.0 * se, "oracles too close to discriminate");
        }
    }

    #[test]
    fn invariance_with_both_engines() {
        let b0 = TimeProfile::Sine { mean: 1.0, amplitude: 0.5, frequency: 1.0 };
        let m = ou(b0);
        let cfg = MeasureConfig::new(8.0, 40_000);
        let mu_s = estimate_measure(&m, 0.0, &cfg, SeedLineage::new(10)).unwrap();
        let mu_t = estimate_measure(&m, 1.0, &cfg, SeedLineage::new(11)).unwrap();
        let f = TestFunction::Square;
        let fd = GEngine::Fd { grid: SpatialGrid::new(1, 8.0, 0.05).unwrap(), cfg: FdConfig { dt: 5e-3, ..Default::default() } };
        let mc = GEngine::Mc { inner: 1, cfg: IntegratorConfig::with_dt(1e-2), seed: 12 };
        for e in [&fd, &mc] {
            let r = invariance_residual(&m, &f, &mu_s, &mu_t, e).unwrap();
            assert!(r.within(3.0), "{r:?}");
        }
        let c = invariance_residual(&m, &TestFunction::Constant { value: 2.0 }, &mu_s, &mu_t, &fd).unwrap();
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn infinitesimal_invariance_on_ou() {
        let m = ou(TimeProfile::Sine { mean: 1.0, amplitude: 0.5, frequency: 1.0 });
        // oracle moments make the quadrature residual ~1e-5; what remains is MC noise plus
        // the O(dt) weak bias of the tamed step (about 14·dt for this model)
        let dt = 2e-3;
        let cfg = MeasureConfig { integrator: IntegratorConfig::with_dt(dt), ..MeasureConfig::new(8.0, 10_000) };
        let w = SpaceTimeWindowMeasure::build(&m, 0.0, 4.0, 81, &cfg, SeedLineage::new(5)).unwrap();
        assert!((w.weights.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        let psi = TimeBump { a: 0.5, b: 3.5 };
        let r = infinitesimal_invariance_residual(&m, &w, &psi, &TestFunction::Square).unwrap();
        assert!(r.value.abs() < 3.0 * r.se + 20.0 * dt, "{r:?}");
        let zero = infinitesimal_invariance_residual(&m, &w, &psi, &TestFunction::Constant { value: 0.0 }).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(infinitesimal_invariance_residual(&m, &w, &TimeBump { a: -1.0, b: 1.0 }, &TestFunction::Square).is_err());
    }

    #[test]
    fn time_bump_derivative_matches_difference_quotient() {
        let p = TimeBump { a: 1.0, b: 3.0 };
        for s in [1.2, 1.9, 2.5, 2.95] {
            let h = 1e-6;
            let fd = (p.value(s + h) - p.value(s - h)) / (2.0 * h);
            assert!((fd - p.derivative(s)).abs() < 1e-6, "{s}");
        }
        assert_eq!(p.value(0.5), 0.0);
        assert_eq!(p.value(2.0), 1.0);
    }

    #[test]
    fn pushforward_and_burn_in_consistency() {
        let m = ou(TimeProfile::Constant { value: 1.0 });
        let cfg = MeasureConfig::new(6.0, 20_000);
        let mu_s = estimate_measure(&m, 0.0, &cfg, SeedLineage::new(20)).unwrap();
        let mu_t = estimate_measure(&m, 1.0, &cfg, SeedLineage::new(21)).unwrap();
        let pf = pushforward_consistency(&m, &mu_t, &mu_s, &cfg.integrator).unwrap();
        assert!(pf.w1 < 3.0 * pf.se, "{pf:?}");
        let b = burn_in_check(&m, 0.0, &cfg, SeedLineage::new(22)).unwrap();
        assert!(b.w1 < 3.0 * b.se, "{b:?}");
    }
}

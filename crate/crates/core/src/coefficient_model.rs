//! The operator family `A(t)φ = Tr(Q(t,x) D²φ) + <b(t,x), ∇φ>` and checkers for its
//! standing hypotheses.

use crate::error::{Error, Result};
use crate::linalg::{self, MatBuf, VecBuf};
use crate::rng::SeedLineage;
use crate::MAX_DIM;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Relative tolerance under which an asymmetric diffusion matrix is silently symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative central-difference step: `h = JAC_STEP * (1 + |x|)`.
pub const JAC_STEP: f64 = 1e-5;

/// User-supplied coefficients. Implementations must be safe for concurrent reads.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Writes Q(t,x) row-major into `q` (length d*d).
    fn diffusion(&self, t: f64, x: &[f64], q: &mut [f64]);

    /// Writes b(t,x) into `b` (length d).
    fn drift(&self, t: f64, x: &[f64], b: &mut [f64]);

    /// Writes `∂_k q_ij` at `k*d*d + i*d + j`. Returns false when not available.
    fn diffusion_gradient(&self, _t: f64, _x: &[f64], _dq: &mut [f64]) -> bool {
        false
    }

    /// Writes `∂_j b_i` at `i*d + j`. Returns false when not available.
    fn drift_jacobian(&self, _t: f64, _x: &[f64], _jb: &mut [f64]) -> bool {
        false
    }

    /// Autonomous limit coefficients `(Q_∞, b_∞)` as `t → ∞`, when they exist.
    fn limit(&self) -> Option<Arc<dyn Coefficients>> {
        None
    }

    fn is_autonomous(&self) -> bool {
        false
    }
}

/// A coefficient family with time clamping, symmetry enforcement and
/// finite-difference fallbacks for missing derivatives.
#[derive(Clone, Debug)]
pub struct CoefficientModel {
    name: String,
    coeffs: Arc<dyn Coefficients>,
    analytic: bool,
}

impl CoefficientModel {
    pub fn new(name: impl Into<String>, coeffs: Arc<dyn Coefficients>) -> Result<Self> {
        let d = coeffs.dim();
        if d == 0 || d > MAX_DIM {
            return Err(Error::UnsupportedDimension(d));
        }
        Ok(Self {
            name: name.into(),
            coeffs,
            analytic: true,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coeffs
    }

    pub fn is_autonomous(&self) -> bool {
        self.coeffs.is_autonomous()
    }

    /// Same model, but derivatives always come from central differences.
    pub fn with_finite_differences(mut self) -> Self {
        self.analytic = false;
        self
    }

    /// Coefficients are extended constantly to negative times.
    #[inline]
    pub fn clamp_time(t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            t
        }
    }

    /// Evaluates Q into `q` and symmetrizes it.
    #[inline]
    pub fn diffusion_into(&self, t: f64, x: &[f64], q: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let t = Self::clamp_time(t);
        self.coeffs.diffusion(t, x, &mut q[..d * d]);
        if d == 1 {
            if !q[0].is_finite() {
                return Err(non_finite("diffusion", t, x));
            }
            return Ok(());
        }
        let mut scale = 1.0f64;
        for v in &q[..d * d] {
            if !v.is_finite() {
                return Err(non_finite("diffusion", t, x));
            }
            scale = scale.max(v.abs());
        }
        let asym = linalg::asymmetry(d, q);
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::Asymmetric {
                t,
                x: x.to_vec(),
                asymmetry: asym,
            });
        }
        for i in 0..d {
            for j in (i + 1)..d {
                let m = 0.5 * (q[i * d + j] + q[j * d + i]);
                q[i * d + j] = m;
                q[j * d + i] = m;
            }
        }
        Ok(())
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], b: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let t = Self::clamp_time(t);
        self.coeffs.drift(t, x, &mut b[..d]);
        if b[..d].iter().any(|v| !v.is_finite()) {
            return Err(non_finite("drift", t, x));
        }
        Ok(())
    }

    pub fn diffusion(&self, t: f64, x: &[f64]) -> Result<MatBuf> {
        self.check_point(x)?;
        let mut q = [0.0; MAX_DIM * MAX_DIM];
        self.diffusion_into(t, x, &mut q)?;
        Ok(q)
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Result<VecBuf> {
        self.check_point(x)?;
        let mut b = [0.0; MAX_DIM];
        self.drift_into(t, x, &mut b)?;
        Ok(b)
    }

    /// Jacobian `∂_j b_i` (row-major), analytic when supplied.
    pub fn drift_jacobian(&self, t: f64, x: &[f64]) -> Result<MatBuf> {
        self.check_point(x)?;
        let d = self.dim();
        let mut jb = [0.0; MAX_DIM * MAX_DIM];
        if self.analytic && self.coeffs.drift_jacobian(Self::clamp_time(t), x, &mut jb[..d * d]) {
            if jb[..d * d].iter().any(|v| !v.is_finite()) {
                return Err(non_finite("drift jacobian", t, x));
            }
            return Ok(jb);
        }
        self.drift_jacobian_fd(t, x, JAC_STEP * (1.0 + linalg::norm(x)))
    }

    /// Central-difference drift Jacobian with an explicit step.
    pub fn drift_jacobian_fd(&self, t: f64, x: &[f64], h: f64) -> Result<MatBuf> {
        let d = self.dim();
        let mut jb = [0.0; MAX_DIM * MAX_DIM];
        let mut xp = [0.0; MAX_DIM];
        let mut xm = [0.0; MAX_DIM];
        let mut bp = [0.0; MAX_DIM];
        let mut bm = [0.0; MAX_DIM];
        for j in 0..d {
            xp[..d].copy_from_slice(&x[..d]);
            xm[..d].copy_from_slice(&x[..d]);
            xp[j] += h;
            xm[j] -= h;
            self.drift_into(t, &xp[..d], &mut bp)?;
            self.drift_into(t, &xm[..d], &mut bm)?;
            for i in 0..d {
                jb[i * d + j] = (bp[i] - bm[i]) / (2.0 * h);
            }
        }
        Ok(jb)
    }

    /// `∂_k q_ij` at `k*d*d + i*d + j`, analytic when supplied.
    pub fn diffusion_gradient(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let d = self.dim();
        let mut dq = vec![0.0; d * d * d];
        if self.analytic && self.coeffs.diffusion_gradient(Self::clamp_time(t), x, &mut dq) {
            if dq.iter().any(|v| !v.is_finite()) {
                return Err(non_finite("diffusion gradient", t, x));
            }
            return Ok(dq);
        }
        let h = JAC_STEP * (1.0 + linalg::norm(x));
        let mut xp = [0.0; MAX_DIM];
        let mut xm = [0.0; MAX_DIM];
        let mut qp = [0.0; MAX_DIM * MAX_DIM];
        let mut qm = [0.0; MAX_DIM * MAX_DIM];
        for k in 0..d {
            xp[..d].copy_from_slice(&x[..d]);
            xm[..d].copy_from_slice(&x[..d]);
            xp[k] += h;
            xm[k] -= h;
            self.diffusion_into(t, &xp[..d], &mut qp)?;
            self.diffusion_into(t, &xm[..d], &mut qm)?;
            for ij in 0..d * d {
                dq[k * d * d + ij] = (qp[ij] - qm[ij]) / (2.0 * h);
            }
        }
        Ok(dq)
    }

    /// The autonomous limit model, if the coefficients converge.
    pub fn limit_model(&self) -> Option<CoefficientModel> {
        self.coeffs.limit().map(|c| CoefficientModel {
            name: format!("{}-limit", self.name),
            coeffs: c,
            analytic: self.analytic,
        })
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
                context: "point",
            });
        }
        Ok(())
    }
}

fn non_finite(what: &'static str, t: f64, x: &[f64]) -> Error {
    Error::NonFinite {
        what,
        t,
        x: x.to_vec(),
    }
}

/// Value, gradient and Hessian (row-major) of a test function at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
}

impl Jet {
    pub fn zero(d: usize) -> Self {
        Self {
            value: 0.0,
            gradient: vec![0.0; d],
            hessian: vec![0.0; d * d],
        }
    }
}

/// `Tr(Q(t,x) H) + <b(t,x), g>` for the jet `(v, g, H)`; the value is not used.
pub fn apply_generator(model: &CoefficientModel, t: f64, x: &[f64], jet: &Jet) -> Result<f64> {
    let d = model.dim();
    if jet.gradient.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: jet.gradient.len(),
            context: "jet gradient",
        });
    }
    if jet.hessian.len() != d * d {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            got: jet.hessian.len(),
            context: "jet hessian",
        });
    }
    let hscale = jet.hessian.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if linalg::asymmetry(d, &jet.hessian) > SYMMETRY_TOL * hscale {
        return Err(Error::Asymmetric {
            t,
            x: x.to_vec(),
            asymmetry: linalg::asymmetry(d, &jet.hessian),
        });
    }
    let q = model.diffusion(t, x)?;
    let b = model.drift(t, x)?;
    Ok(generator_with(d, &q, &b, &jet.gradient, &jet.hessian))
}

#[inline]
pub(crate) fn generator_with(d: usize, q: &[f64], b: &[f64], grad: &[f64], hess: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            acc += q[i * d + j] * hess[j * d + i];
        }
        acc += b[i] * grad[i];
    }
    acc
}

/// Which of the two growth alternatives of the standing hypotheses is asserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrowthVariant {
    /// `|Q| <= c`
    BoundedQ,
    /// `|Q| <= c(1+|x|)V` and `<b,x> <= c(1+|x|²)V`
    VWeightedGrowth,
}

/// Constants of the standing hypotheses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisConstants {
    /// ellipticity floor
    pub eta0: f64,
    /// Lyapunov offset
    pub a: f64,
    /// Lyapunov rate
    pub kappa: f64,
    /// bound on |∇Q| relative to the ellipticity function
    pub c0: f64,
    /// one-sided bound on the drift Jacobian
    pub r0: f64,
    /// growth constant
    pub c: f64,
    pub growth: GrowthVariant,
}

impl HypothesisConstants {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.eta0 > 0.0) {
            v.push(format!("eta0 must be > 0 (got {})", self.eta0));
        }
        if !(self.kappa > 0.0) {
            v.push(format!("kappa must be > 0 (got {})", self.kappa));
        }
        if !(self.a >= 0.0) {
            v.push(format!("a must be >= 0 (got {})", self.a));
        }
        if !(self.c0 >= 0.0) {
            v.push(format!("c0 must be >= 0 (got {})", self.c0));
        }
        if !(self.c > 0.0) {
            v.push(format!("c must be > 0 (got {})", self.c));
        }
        if !self.r0.is_finite() {
            v.push("r0 must be finite".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v))
        }
    }
}

/// A Lyapunov function: positive, coercive, twice differentiable.
pub trait Lyapunov: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], g: &mut [f64]);
    fn hessian(&self, x: &[f64], h: &mut [f64]);
}

#[derive(Clone, Debug)]
pub struct LyapunovSpec {
    name: String,
    inner: Arc<dyn Lyapunov>,
}

impl LyapunovSpec {
    pub fn new(name: impl Into<String>, inner: Arc<dyn Lyapunov>) -> Self {
        Self {
            name: name.into(),
            inner,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(x)
    }

    pub fn jet(&self, x: &[f64]) -> Result<Jet> {
        let d = x.len();
        let mut jet = Jet::zero(d);
        jet.value = self.inner.value(x);
        self.inner.gradient(x, &mut jet.gradient);
        self.inner.hessian(x, &mut jet.hessian);
        if !jet.value.is_finite()
            || jet.gradient.iter().chain(&jet.hessian).any(|v| !v.is_finite())
        {
            return Err(non_finite("lyapunov function", f64::NAN, x));
        }
        Ok(jet)
    }
}

/// `V(x) = 1 + |x|²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadraticLyapunov;

impl Lyapunov for QuadraticLyapunov {
    fn value(&self, x: &[f64]) -> f64 {
        1.0 + linalg::dot(x, x)
    }
    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi = 2.0 * xi;
        }
    }
    fn hessian(&self, x: &[f64], h: &mut [f64]) {
        let d = x.len();
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            h[i * d + i] = 2.0;
        }
    }
}

/// Smallest eigenvalue of Q(t,x) and its distance to the floor `eta0`.
pub fn ellipticity_margin(model: &CoefficientModel, eta0: f64, t: f64, x: &[f64]) -> Result<(f64, f64)> {
    let q = model.diffusion(t, x)?;
    let eta = linalg::min_eigenvalue(model.dim(), &q);
    Ok((eta, eta - eta0))
}

/// `A(t)V(x) - a + κV(x)`; the Lyapunov condition holds at (t,x) iff this is `<= 0`.
pub fn lyapunov_residual(
    model: &CoefficientModel,
    lyap: &LyapunovSpec,
    consts: &HypothesisConstants,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let jet = lyap.jet(x)?;
    let av = apply_generator(model, t, x, &jet)?;
    Ok(av - consts.a + consts.kappa * jet.value)
}

/// Margins of the gradient conditions at one point; both are `<= 0` when they hold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipativityMargins {
    /// `λ_max(sym ∇b) - r0`
    pub drift: f64,
    /// `|∇Q| - c0 η` with the Frobenius norm over all `∂_k q_ij`.
    pub diffusion_gradient: f64,
}

pub fn dissipativity_margin(
    model: &CoefficientModel,
    consts: &HypothesisConstants,
    t: f64,
    x: &[f64],
) -> Result<DissipativityMargins> {
    let d = model.dim();
    let mut jb = model.drift_jacobian(t, x)?;
    for i in 0..d {
        for j in (i + 1)..d {
            let m = 0.5 * (jb[i * d + j] + jb[j * d + i]);
            jb[i * d + j] = m;
            jb[j * d + i] = m;
        }
    }
    let lmax = linalg::max_eigenvalue(d, &jb);
    let dq = model.diffusion_gradient(t, x)?;
    let (eta, _) = ellipticity_margin(model, consts.eta0, t, x)?;
    Ok(DissipativityMargins {
        drift: lmax - consts.r0,
        diffusion_gradient: linalg::frobenius(&dq) - consts.c0 * eta,
    })
}

/// Growth-condition margins (each `<= 0` when satisfied).
pub fn growth_margins(
    model: &CoefficientModel,
    lyap: &LyapunovSpec,
    consts: &HypothesisConstants,
    t: f64,
    x: &[f64],
) -> Result<Vec<(&'static str, f64)>> {
    let d = model.dim();
    let q = model.diffusion(t, x)?;
    let qn = linalg::frobenius(&q[..d * d]);
    Ok(match consts.growth {
        GrowthVariant::BoundedQ => vec![("growth-bounded-q", qn - consts.c)],
        GrowthVariant::VWeightedGrowth => {
            let v = lyap.value(x);
            let b = model.drift(t, x)?;
            let r = linalg::norm(x);
            vec![
                ("growth-q", qn - consts.c * (1.0 + r) * v),
                ("growth-drift", linalg::dot(&b[..d], x) - consts.c * (1.0 + r * r) * v),
            ]
        }
    })
}

/// Sample set for a hypothesis scan: time grid x radial shells x directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    pub times: Vec<f64>,
    pub radii: Vec<f64>,
    pub directions_per_shell: usize,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn describe(&self) -> String {
        format!(
            "{} times x {} radii x {} directions (+origin), seed {}",
            self.times.len(),
            self.radii.len(),
            self.directions_per_shell,
            self.seed
        )
    }

    /// Unit directions: the coordinate axes (both signs) followed by seeded random ones.
    pub fn directions(&self, d: usize) -> Vec<Vec<f64>> {
        let mut dirs = Vec::new();
        for i in 0..d {
            for s in [1.0, -1.0] {
                let mut e = vec![0.0; d];
                e[i] = s;
                dirs.push(e);
            }
        }
        if d > 1 {
            let mut rng = SeedLineage::new(self.seed).block_rng(0);
            while dirs.len() < self.directions_per_shell.max(2 * d) {
                let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = linalg::norm(&v);
                if n < 1e-8 {
                    continue;
                }
                v.iter_mut().for_each(|c| *c /= n);
                dirs.push(v);
            }
        }
        dirs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginKind {
    /// satisfied when `<= 0`
    Residual,
    /// satisfied when `>= 0`
    Floor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub kind: MarginKind,
    pub pass: bool,
    pub worst_margin: f64,
    pub worst_t: f64,
    pub worst_x: Vec<f64>,
    pub samples: usize,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub note: String,
    pub model: String,
    pub plan: String,
    pub samples: usize,
    pub checks: Vec<CheckOutcome>,
    pub evaluation_errors: Vec<String>,
    pub pass: bool,
}

impl HypothesisReport {
    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Accum {
    kind: MarginKind,
    worst: f64,
    at: (f64, Vec<f64>),
    samples: usize,
    violations: usize,
}

impl Accum {
    fn new(kind: MarginKind) -> Self {
        let worst = match kind {
            MarginKind::Residual => f64::NEG_INFINITY,
            MarginKind::Floor => f64::INFINITY,
        };
        Self {
            kind,
            worst,
            at: (f64::NAN, Vec::new()),
            samples: 0,
            violations: 0,
        }
    }

    fn push(&mut self, m: f64, t: f64, x: &[f64]) {
        self.samples += 1;
        let (bad, worse) = match self.kind {
            MarginKind::Residual => (m > 0.0, m > self.worst),
            MarginKind::Floor => (m < 0.0, m < self.worst),
        };
        if bad {
            self.violations += 1;
        }
        if worse {
            self.worst = m;
            self.at = (t, x.to_vec());
        }
    }
}

type SampleResult = std::result::Result<Vec<(&'static str, MarginKind, f64)>, String>;

fn sample_margins(
    model: &CoefficientModel,
    lyap: &LyapunovSpec,
    consts: &HypothesisConstants,
    t: f64,
    x: &[f64],
) -> SampleResult {
    let run = || -> Result<Vec<(&'static str, MarginKind, f64)>> {
        let mut out = Vec::with_capacity(8);
        let (_, em) = ellipticity_margin(model, consts.eta0, t, x)?;
        out.push(("ellipticity", MarginKind::Floor, em));
        out.push(("lyapunov-positive", MarginKind::Floor, lyap.value(x)));
        out.push(("lyapunov", MarginKind::Residual, lyapunov_residual(model, lyap, consts, t, x)?));
        let dm = dissipativity_margin(model, consts, t, x)?;
        out.push(("dissipativity", MarginKind::Residual, dm.drift));
        out.push(("diffusion-gradient", MarginKind::Residual, dm.diffusion_gradient));
        for (name, m) in growth_margins(model, lyap, consts, t, x)? {
            out.push((name, MarginKind::Residual, m));
        }
        Ok(out)
    };
    run().map_err(|e| format!("t={t}, x={x:?}: {e}"))
}

/// Evaluates every quantitative hypothesis on the sample set and aggregates the worst margins.
///
/// A pass is evidence on the sampled points only.
pub fn hypothesis_scan(
    model: &CoefficientModel,
    lyap: &LyapunovSpec,
    consts: &HypothesisConstants,
    plan: &SamplingPlan,
) -> Result<HypothesisReport> {
    consts.validate()?;
    let d = model.dim();
    let dirs = plan.directions(d);
    let mut radii = plan.radii.clone();
    radii.sort_by(f64::total_cmp);
    let mut points: Vec<Vec<f64>> = vec![vec![0.0; d]];
    for &r in &radii {
        for u in &dirs {
            points.push(u.iter().map(|c| c * r).collect());
        }
    }
    let samples: Vec<(f64, &Vec<f64>)> = plan
        .times
        .iter()
        .flat_map(|&t| points.iter().map(move |x| (t, x)))
        .collect();
    let results: Vec<SampleResult> = samples
        .par_iter()
        .map(|(t, x)| sample_margins(model, lyap, consts, *t, x))
        .collect();

    let mut names: Vec<&'static str> = Vec::new();
    let mut accs: Vec<Accum> = Vec::new();
    let mut errors = Vec::new();
    for ((t, x), r) in samples.iter().zip(results) {
        match r {
            Ok(ms) => {
                for (name, kind, m) in ms {
                    let k = match names.iter().position(|n| *n == name) {
                        Some(k) => k,
                        None => {
                            names.push(name);
                            accs.push(Accum::new(kind));
                            accs.len() - 1
                        }
                    };
                    accs[k].push(m, *t, x);
                }
            }
            Err(e) => errors.push(e),
        }
    }

    // coercivity spot check: V increases over the outermost shells along every ray
    if radii.len() >= 2 {
        let mut acc = Accum::new(MarginKind::Floor);
        let tail = &radii[radii.len().saturating_sub(3)..];
        for u in &dirs {
            for w in tail.windows(2) {
                let inner: Vec<f64> = u.iter().map(|c| c * w[0]).collect();
                let outer: Vec<f64> = u.iter().map(|c| c * w[1]).collect();
                acc.push(lyap.value(&outer) - lyap.value(&inner), f64::NAN, &outer);
            }
        }
        names.push("lyapunov-coercive");
        accs.push(acc);
    }

    let checks: Vec<CheckOutcome> = names
        .iter()
        .zip(accs)
        .map(|(n, a)| CheckOutcome {
            name: n.to_string(),
            kind: a.kind,
            pass: a.violations == 0 && a.samples > 0,
            worst_margin: a.worst,
            worst_t: a.at.0,
            worst_x: a.at.1,
            samples: a.samples,
            violations: a.violations,
        })
        .collect();
    let pass = errors.is_empty() && !checks.is_empty() && checks.iter().all(|c| c.pass);
    Ok(HypothesisReport {
        note: "sample-based evidence on the listed plan, not a proof".into(),
        model: model.name().to_string(),
        plan: plan.describe(),
        samples: samples.len(),
        checks,
        evaluation_errors: errors,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Q = I, b = k x (polynomial drift power selectable).
    #[derive(Debug)]
    struct Poly {
        d: usize,
        k: f64,
        power: i32,
    }

    impl Coefficients for Poly {
        fn dim(&self) -> usize {
            self.d
        }
        fn diffusion(&self, _t: f64, _x: &[f64], q: &mut [f64]) {
            q.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..self.d {
                q[i * self.d + i] = 1.0;
            }
        }
        fn drift(&self, _t: f64, x: &[f64], b: &mut [f64]) {
            for i in 0..self.d {
                b[i] = self.k * x[i].powi(self.power);
            }
        }
        fn drift_jacobian(&self, _t: f64, x: &[f64], jb: &mut [f64]) -> bool {
            jb.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..self.d {
                jb[i * self.d + i] = self.k * self.power as f64 * x[i].powi(self.power - 1);
            }
            true
        }
    }

    /// time-dependent, x-dependent, slightly asymmetric in floating point
    #[derive(Debug)]
    struct Wobbly {
        asym: f64,
    }

    impl Coefficients for Wobbly {
        fn dim(&self) -> usize {
            2
        }
        fn diffusion(&self, t: f64, x: &[f64], q: &mut [f64]) {
            let s = 0.3 * (t + x[0]).sin();
            q.copy_from_slice(&[2.0 + x[1] * x[1], s, s + self.asym, 1.0]);
        }
        fn drift(&self, t: f64, x: &[f64], b: &mut [f64]) {
            b[0] = -x[0].powi(3) + t.cos() * x[1];
            b[1] = -x[1] + (x[0] * x[1]).sin();
        }
    }

    fn ou(d: usize) -> CoefficientModel {
        CoefficientModel::new("ou", Arc::new(Poly { d, k: -1.0, power: 1 })).unwrap()
    }

    fn jet_x2() -> Jet {
        Jet {
            value: 0.0,
            gradient: vec![0.0],
            hessian: vec![2.0],
        }
    }

    #[test]
    fn generator_on_ou() {
        assert_eq!(apply_generator(&ou(1), 0.0, &[0.0], &jet_x2()).unwrap(), 2.0);
        let z = Jet::zero(1);
        assert_eq!(apply_generator(&ou(1), 3.0, &[1.7], &z).unwrap(), 0.0);
    }

    #[test]
    fn generator_rejects_bad_jets() {
        let bad = Jet {
            value: 0.0,
            gradient: vec![0.0, 1.0],
            hessian: vec![2.0],
        };
        assert!(matches!(
            apply_generator(&ou(1), 0.0, &[0.0], &bad),
            Err(Error::DimensionMismatch { .. })
        ));
        let asym = Jet {
            value: 0.0,
            gradient: vec![0.0, 0.0],
            hessian: vec![1.0, 0.5, 0.0, 1.0],
        };
        assert!(matches!(
            apply_generator(&ou(2), 0.0, &[0.0, 0.0], &asym),
            Err(Error::Asymmetric { .. })
        ));
    }

    #[test]
    fn ellipticity_examples() {
        assert_eq!(ellipticity_margin(&ou(2), 0.5, 0.0, &[0.3, 0.2]).unwrap(), (1.0, 0.5));
        #[derive(Debug)]
        struct Degenerate;
        impl Coefficients for Degenerate {
            fn dim(&self) -> usize {
                2
            }
            fn diffusion(&self, _t: f64, _x: &[f64], q: &mut [f64]) {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
            fn drift(&self, _t: f64, _x: &[f64], b: &mut [f64]) {
                b.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let m = CoefficientModel::new("deg", Arc::new(Degenerate)).unwrap();
        let (eta, margin) = ellipticity_margin(&m, 0.25, 0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(eta, 0.0);
        assert_eq!(margin, -0.25);
    }

    #[test]
    fn lyapunov_residual_examples() {
        let lyap = LyapunovSpec::new("quad", Arc::new(QuadraticLyapunov));
        let consts = HypothesisConstants {
            eta0: 1.0,
            a: 3.0,
            kappa: 1.0,
            c0: 0.0,
            r0: -1.0,
            c: 1.0,
            growth: GrowthVariant::BoundedQ,
        };
        assert_eq!(lyapunov_residual(&ou(1), &lyap, &consts, 0.0, &[2.0]).unwrap(), -4.0);
        assert_eq!(lyapunov_residual(&ou(1), &lyap, &consts, 0.0, &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn dissipativity_examples() {
        let consts = |r0| HypothesisConstants {
            eta0: 1.0,
            a: 0.0,
            kappa: 1.0,
            c0: 0.0,
            r0,
            c: 1.0,
            growth: GrowthVariant::BoundedQ,
        };
        let lin = ou(1);
        assert_eq!(dissipativity_margin(&lin, &consts(-1.0), 0.0, &[0.4]).unwrap().drift, 0.0);
        let cubic =
            CoefficientModel::new("cubic", Arc::new(Poly { d: 1, k: -1.0, power: 3 })).unwrap();
        assert_eq!(dissipativity_margin(&cubic, &consts(0.0), 0.0, &[1.0]).unwrap().drift, -3.0);
        let unstable =
            CoefficientModel::new("up", Arc::new(Poly { d: 1, k: 1.0, power: 1 })).unwrap();
        let m = dissipativity_margin(&unstable, &consts(-1.0), 0.0, &[0.0]).unwrap();
        assert_eq!(m.drift, 2.0);
        assert_eq!(m.diffusion_gradient, 0.0);
    }

    #[test]
    fn negative_times_are_clamped() {
        let m = CoefficientModel::new("w", Arc::new(Wobbly { asym: 0.0 })).unwrap();
        let x = [0.4, -1.2];
        assert_eq!(m.diffusion(-1.0, &x).unwrap(), m.diffusion(0.0, &x).unwrap());
        assert_eq!(m.drift(-1.0, &x).unwrap(), m.drift(0.0, &x).unwrap());
    }

    #[test]
    fn rounding_asymmetry_is_symmetrized_but_large_is_an_error() {
        let m = CoefficientModel::new("w", Arc::new(Wobbly { asym: 1e-15 })).unwrap();
        let q = m.diffusion(0.5, &[0.1, 0.2]).unwrap();
        assert_eq!(q[1], q[2]);
        let m = CoefficientModel::new("w", Arc::new(Wobbly { asym: 1e-6 })).unwrap();
        assert!(matches!(m.diffusion(0.5, &[0.1, 0.2]), Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn finite_difference_jacobian_is_second_order() {
        let m = CoefficientModel::new("w", Arc::new(Wobbly { asym: 0.0 })).unwrap();
        let x = [0.7f64, -0.4];
        let t = 0.3f64;
        // analytic Jacobian of Wobbly's drift
        let exact = [
            -3.0 * x[0] * x[0],
            t.cos(),
            x[1] * (x[0] * x[1]).cos(),
            -1.0 + x[0] * (x[0] * x[1]).cos(),
        ];
        let err = |h: f64| {
            let j = m.drift_jacobian_fd(t, &x, h).unwrap();
            (0..4).map(|k| (j[k] - exact[k]).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn analytic_and_fallback_jacobians_agree() {
        let m = CoefficientModel::new("c", Arc::new(Poly { d: 2, k: -1.0, power: 3 })).unwrap();
        let a = m.drift_jacobian(0.0, &[1.3, -0.2]).unwrap();
        let f = m.clone().with_finite_differences().drift_jacobian(0.0, &[1.3, -0.2]).unwrap();
        for k in 0..4 {
            assert_relative_eq!(a[k], f[k], epsilon = 1e-8);
        }
    }

    #[test]
    fn ou_scan_passes() {
        let lyap = LyapunovSpec::new("quad", Arc::new(QuadraticLyapunov));
        let consts = HypothesisConstants {
            eta0: 1.0,
            a: 3.0,
            kappa: 1.0,
            c0: 0.0,
            r0: -1.0,
            c: 1.0,
            growth: GrowthVariant::BoundedQ,
        };
        let plan = SamplingPlan {
            times: vec![0.0, 1.0],
            radii: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            directions_per_shell: 4,
            seed: 1,
        };
        let rep = hypothesis_scan(&ou(1), &lyap, &consts, &plan).unwrap();
        assert!(rep.pass, "{rep:#?}");
        assert_eq!(rep.samples, 2 * (1 + 5 * 2));
        // closed forms: lyapunov residual 2 - 2x² - 3 + 1 + x² = -x², worst at the origin
        assert_eq!(rep.check("lyapunov").unwrap().worst_margin, 0.0);
        assert_eq!(rep.check("dissipativity").unwrap().worst_margin, 0.0);
        assert_eq!(rep.check("ellipticity").unwrap().worst_margin, 0.0);
    }

    #[test]
    fn scan_flags_unstable_drift() {
        let lyap = LyapunovSpec::new("quad", Arc::new(QuadraticLyapunov));
        let consts = HypothesisConstants {
            eta0: 1.0,
            a: 3.0,
            kappa: 1.0,
            c0: 0.0,
            r0: -1.0,
            c: 1.0,
            growth: GrowthVariant::BoundedQ,
        };
        let plan = SamplingPlan {
            times: vec![0.0],
            radii: vec![1.0, 2.0, 3.0],
            directions_per_shell: 2,
            seed: 1,
        };
        let m = CoefficientModel::new("up", Arc::new(Poly { d: 1, k: 1.0, power: 1 })).unwrap();
        let rep = hypothesis_scan(&m, &lyap, &consts, &plan).unwrap();
        assert!(!rep.pass);
        assert!(!rep.check("lyapunov").unwrap().pass);
        assert!(!rep.check("dissipativity").unwrap().pass);
    }

    proptest! {
        #[test]
        fn generator_is_linear_in_the_jet(
            g1 in proptest::collection::vec(-5.0..5.0f64, 2),
            g2 in proptest::collection::vec(-5.0..5.0f64, 2),
            h1 in proptest::collection::vec(-5.0..5.0f64, 3),
            h2 in proptest::collection::vec(-5.0..5.0f64, 3),
            alpha in -3.0..3.0f64,
            x in proptest::collection::vec(-2.0..2.0f64, 2),
            t in 0.0..5.0f64,
        ) {
            let m = CoefficientModel::new("w", Arc::new(Wobbly { asym: 0.0 })).unwrap();
            let sym = |h: &[f64]| vec![h[0], h[1], h[1], h[2]];
            let j1 = Jet { value: 0.0, gradient: g1.clone(), hessian: sym(&h1) };
            let j2 = Jet { value: 0.0, gradient: g2.clone(), hessian: sym(&h2) };
            let js = Jet {
                value: 0.0,
                gradient: g1.iter().zip(&g2).map(|(a, b)| a + alpha * b).collect(),
                hessian: sym(&h1).iter().zip(sym(&h2)).map(|(a, b)| a + alpha * b).collect(),
            };
            let a = apply_generator(&m, t, &x, &j1).unwrap();
            let b = apply_generator(&m, t, &x, &j2).unwrap();
            let s = apply_generator(&m, t, &x, &js).unwrap();
            prop_assert!((s - (a + alpha * b)).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }
}

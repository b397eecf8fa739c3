//! Built-in operator families: the power-growth family
//! `A(t)φ = (1+|x|²)^γ Tr(Q⁰(t,x) D²φ) - b⁰(t)(1+|x|²)^r <x, ∇φ>`
//! and the nonautonomous Ornstein–Uhlenbeck family (γ = r = 0, Q⁰ = I), which comes
//! with a closed-form oracle.

use crate::coefficient_model::{
    apply_generator, Coefficients, CoefficientModel, GrowthVariant, HypothesisConstants, Lyapunov,
    LyapunovSpec, QuadraticLyapunov,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::adaptive_simpson;
use crate::test_functions::{normal_cdf, TestFunction};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Bounded time profile `b⁰(t)`; negative times are clamped to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimeProfile {
    Constant { value: f64 },
    /// `mean + amplitude · sin(frequency · t)`
    Sine { mean: f64, amplitude: f64, frequency: f64 },
    /// `limit + amplitude · e^{-rate t}`
    Converging { limit: f64, amplitude: f64, rate: f64 },
    /// `offset + slope · t`; unbounded, only for oracle checks of the evolution operator
    Linear { slope: f64, offset: f64 },
}

impl TimeProfile {
    fn raw(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Constant { value } => value,
            TimeProfile::Sine { mean, amplitude, frequency } => mean + amplitude * (frequency * t).sin(),
            TimeProfile::Converging { limit, amplitude, rate } => limit + amplitude * (-rate * t).exp(),
            TimeProfile::Linear { slope, offset } => offset + slope * t,
        }
    }

    /// antiderivative on `[0, ∞)` vanishing at 0
    fn primitive(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Constant { value } => value * t,
            TimeProfile::Sine { mean, amplitude, frequency } => {
                if frequency == 0.0 {
                    mean * t
                } else {
                    mean * t + amplitude / frequency * (1.0 - (frequency * t).cos())
                }
            }
            TimeProfile::Converging { limit, amplitude, rate } => {
                limit * t + amplitude / rate * (1.0 - (-rate * t).exp())
            }
            TimeProfile::Linear { slope, offset } => offset * t + 0.5 * slope * t * t,
        }
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        self.raw(t.max(0.0))
    }

    /// `∫_{t0}^{t1} b⁰`, honouring the clamp at negative times.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        let b0 = self.raw(0.0);
        b0 * (t1.min(0.0) - t0.min(0.0)) + self.primitive(t1.max(0.0)) - self.primitive(t0.max(0.0))
    }

    /// `inf_{t >= 0} b⁰(t)`
    pub fn infimum(&self) -> f64 {
        match *self {
            TimeProfile::Constant { value } => value,
            TimeProfile::Sine { mean, amplitude, frequency } => {
                if frequency == 0.0 {
                    mean
                } else {
                    mean - amplitude.abs()
                }
            }
            TimeProfile::Converging { limit, amplitude, .. } => limit.min(limit + amplitude),
            TimeProfile::Linear { slope, offset } => {
                if slope >= 0.0 {
                    offset
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// `sup_{t >= 0} b⁰(t)`, `None` when unbounded.
    pub fn supremum(&self) -> Option<f64> {
        match *self {
            TimeProfile::Constant { value } => Some(value),
            TimeProfile::Sine { mean, amplitude, frequency } => {
                Some(if frequency == 0.0 { mean } else { mean + amplitude.abs() })
            }
            TimeProfile::Converging { limit, amplitude, .. } => Some(limit.max(limit + amplitude)),
            TimeProfile::Linear { slope, offset } => (slope <= 0.0).then_some(offset),
        }
    }

    pub fn limit(&self) -> Option<f64> {
        match *self {
            TimeProfile::Constant { value } => Some(value),
            TimeProfile::Sine { mean, amplitude, frequency } => {
                (frequency == 0.0 || amplitude == 0.0).then_some(mean)
            }
            TimeProfile::Converging { limit, rate, .. } => (rate > 0.0).then_some(limit),
            TimeProfile::Linear { slope, offset } => (slope == 0.0).then_some(offset),
        }
    }

    pub fn is_constant(&self) -> bool {
        match *self {
            TimeProfile::Constant { .. } => true,
            TimeProfile::Sine { amplitude, frequency, .. } => amplitude == 0.0 || frequency == 0.0,
            TimeProfile::Converging { amplitude, .. } => amplitude == 0.0,
            TimeProfile::Linear { slope, .. } => slope == 0.0,
        }
    }
}

/// Bounded base diffusion `Q⁰(t,x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiffusionForm {
    /// `scale · I`
    Identity { scale: f64 },
    /// `(1 + amplitude e^{-|x|²} cos(ωt)) I + coupling e^{-|x|²} sin(ωt) (J - I)`,
    /// where J is the all-ones matrix
    Modulated { amplitude: f64, frequency: f64, coupling: f64 },
}

impl DiffusionForm {
    fn eval(&self, d: usize, t: f64, x: &[f64], q: &mut [f64]) {
        match *self {
            DiffusionForm::Identity { scale } => {
                for i in 0..d {
                    for j in 0..d {
                        q[i * d + j] = if i == j { scale } else { 0.0 };
                    }
                }
            }
            DiffusionForm::Modulated { amplitude, frequency, coupling } => {
                let g = (-linalg::dot(x, x)).exp();
                let diag = 1.0 + amplitude * g * (frequency * t).cos();
                let off = coupling * g * (frequency * t).sin();
                for i in 0..d {
                    for j in 0..d {
                        q[i * d + j] = if i == j { diag } else { off };
                    }
                }
            }
        }
    }

    fn gradient(&self, d: usize, t: f64, x: &[f64], dq: &mut [f64]) {
        match *self {
            DiffusionForm::Identity { .. } => dq.iter_mut().for_each(|v| *v = 0.0),
            DiffusionForm::Modulated { amplitude, frequency, coupling } => {
                let g = (-linalg::dot(x, x)).exp();
                let cd = amplitude * (frequency * t).cos();
                let co = coupling * (frequency * t).sin();
                for k in 0..d {
                    let dg = -2.0 * x[k] * g;
                    for i in 0..d {
                        for j in 0..d {
                            dq[k * d * d + i * d + j] = dg * if i == j { cd } else { co };
                        }
                    }
                }
            }
        }
    }

    /// Bounds on the eigenvalues of Q⁰ over all (t, x).
    pub fn eigen_bounds(&self, d: usize) -> (f64, f64) {
        match *self {
            DiffusionForm::Identity { scale } => (scale, scale),
            DiffusionForm::Modulated { amplitude, coupling, .. } => {
                let spread = amplitude.abs() + (d as f64 - 1.0) * coupling.abs();
                (1.0 - spread, 1.0 + spread)
            }
        }
    }

    fn is_time_independent(&self) -> bool {
        match *self {
            DiffusionForm::Identity { .. } => true,
            DiffusionForm::Modulated { amplitude, frequency, coupling } => {
                frequency == 0.0 || (amplitude == 0.0 && coupling == 0.0)
            }
        }
    }
}

/// Coefficients `Q = (1+|x|²)^γ Q⁰(t,x)`, `b = -b⁰(t)(1+|x|²)^r x`.
#[derive(Clone, Debug)]
pub struct PowerGrowthCoefficients {
    pub dim: usize,
    pub gamma: f64,
    pub r: f64,
    pub q0: DiffusionForm,
    pub b0: TimeProfile,
}

impl Coefficients for PowerGrowthCoefficients {
    fn dim(&self) -> usize {
        self.dim
    }

    fn diffusion(&self, t: f64, x: &[f64], q: &mut [f64]) {
        let d = self.dim;
        self.q0.eval(d, t, x, q);
        if self.gamma != 0.0 {
            let w = (1.0 + linalg::dot(x, x)).powf(self.gamma);
            q[..d * d].iter_mut().for_each(|v| *v *= w);
        }
    }

    #[inline]
    fn drift(&self, t: f64, x: &[f64], b: &mut [f64]) {
        let s = if self.r == 0.0 {
            self.b0.value(t)
        } else if self.r == 1.0 {
            self.b0.value(t) * (1.0 + linalg::dot(x, x))
        } else {
            self.b0.value(t) * (1.0 + linalg::dot(x, x)).powf(self.r)
        };
        for i in 0..self.dim {
            b[i] = -s * x[i];
        }
    }

    fn diffusion_gradient(&self, t: f64, x: &[f64], dq: &mut [f64]) -> bool {
        let d = self.dim;
        let one = 1.0 + linalg::dot(x, x);
        let w = one.powf(self.gamma);
        let mut q0 = [0.0; 9];
        self.q0.eval(d, t, x, &mut q0);
        self.q0.gradient(d, t, x, dq);
        for k in 0..d {
            let dw = 2.0 * self.gamma * x[k] * one.powf(self.gamma - 1.0);
            for ij in 0..d * d {
                dq[k * d * d + ij] = w * dq[k * d * d + ij] + dw * q0[ij];
            }
        }
        true
    }

    fn drift_jacobian(&self, t: f64, x: &[f64], jb: &mut [f64]) -> bool {
        let d = self.dim;
        let one = 1.0 + linalg::dot(x, x);
        let beta = self.b0.value(t);
        let p = one.powf(self.r);
        let dp = 2.0 * self.r * one.powf(self.r - 1.0);
        for i in 0..d {
            for j in 0..d {
                let delta = if i == j { 1.0 } else { 0.0 };
                jb[i * d + j] = -beta * (p * delta + dp * x[i] * x[j]);
            }
        }
        true
    }

    fn limit(&self) -> Option<Arc<dyn Coefficients>> {
        let b = self.b0.limit()?;
        if !self.q0.is_time_independent() {
            return None;
        }
        Some(Arc::new(PowerGrowthCoefficients {
            b0: TimeProfile::Constant { value: b },
            ..self.clone()
        }))
    }

    fn is_autonomous(&self) -> bool {
        self.b0.is_constant() && self.q0.is_time_independent()
    }
}

/// Parameters of the power-growth family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleParams {
    #[serde(default = "one")]
    pub dim: usize,
    pub gamma: f64,
    pub r: f64,
    pub delta: f64,
    pub q0: DiffusionForm,
    pub b0: TimeProfile,
}

fn one() -> usize {
    1
}

impl ExampleParams {
    /// `β = inf_{t >= 0} b⁰(t)`
    pub fn beta(&self) -> f64 {
        self.b0.infimum()
    }

    /// Every violated admissibility constraint, by name.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.dim == 0 || self.dim > crate::MAX_DIM {
            v.push(format!("dimension must be in 1..={} (got {})", crate::MAX_DIM, self.dim));
        }
        if !(self.r > self.gamma - 1.0) {
            v.push(format!(
                "r > gamma - 1 required, got r = {} <= gamma - 1 = {} (r ≤ γ−1)",
                self.r,
                self.gamma - 1.0
            ));
        } else {
            let hi = 2.0 * (self.r + 1.0 - self.gamma);
            if !(self.delta > 0.0 && self.delta < hi) {
                v.push(format!(
                    "delta must lie in the open interval (0, 2(r+1-gamma)) = (0, {hi}), got {}",
                    self.delta
                ));
            }
        }
        if !(self.beta() > 0.0) {
            v.push(format!("beta = inf b0 must be > 0 (got {})", self.beta()));
        }
        if self.b0.supremum().is_none() {
            v.push("b0 must be bounded".into());
        }
        let (lo, _) = self.q0.eigen_bounds(self.dim.max(1));
        if !(lo > 0.0) {
            v.push(format!("q0 must be uniformly elliptic (eigenvalue lower bound {lo})"));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v))
        }
    }

    /// `h(ρ) = c ρ^{δ-2}(1+ρ²)^γ - β(1+ρ²)^r` with `c = Λ(δ + (δ-2)⁺ + d)`,
    /// Λ the upper eigenvalue bound of Q⁰; for `ρ >= 1`, `A(t)V <= δ V ρ^δ h(ρ)`.
    pub fn lyapunov_bound_h(&self, rho: f64) -> f64 {
        let (_, lam) = self.q0.eigen_bounds(self.dim);
        let c = lam * (self.delta + (self.delta - 2.0).max(0.0) + self.dim as f64);
        let one = 1.0 + rho * rho;
        c * rho.powf(self.delta - 2.0) * one.powf(self.gamma) - self.beta() * one.powf(self.r)
    }

    /// Smallest radius `R* >= 1` on a grid of step `step` beyond which
    /// `δ ρ^δ h(ρ) + κ <= 0` up to `rho_max`; the Lyapunov residual is nonpositive there.
    pub fn lyapunov_exterior_radius(&self, kappa: f64, rho_max: f64, step: f64) -> Option<f64> {
        let n = ((rho_max - 1.0) / step).ceil() as usize;
        let ok = |rho: f64| self.delta * rho.powf(self.delta) * self.lyapunov_bound_h(rho) + kappa <= 0.0;
        let mut start = None;
        for k in 0..=n {
            let rho = 1.0 + k as f64 * step;
            match (ok(rho), start) {
                (true, None) => start = Some(rho),
                (false, Some(_)) => start = None,
                _ => {}
            }
        }
        start
    }
}

/// Nonautonomous OU: `Q = I`, `b = -b⁰(t) x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OUParams {
    #[serde(default = "one")]
    pub dim: usize,
    pub b0: TimeProfile,
}

impl OUParams {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.dim == 0 || self.dim > crate::MAX_DIM {
            v.push(format!("dimension must be in 1..={} (got {})", crate::MAX_DIM, self.dim));
        }
        if !(self.b0.infimum() > 0.0) {
            v.push(format!("inf b0 must be > 0 (got {})", self.b0.infimum()));
        }
        if self.b0.supremum().is_none() {
            v.push("b0 must be bounded".into());
        }
        v
    }
}

pub fn build_example_model(p: &ExampleParams) -> Result<CoefficientModel> {
    p.validate()?;
    CoefficientModel::new(
        format!("power-growth(d={},γ={},r={})", p.dim, p.gamma, p.r),
        Arc::new(PowerGrowthCoefficients {
            dim: p.dim,
            gamma: p.gamma,
            r: p.r,
            q0: p.q0.clone(),
            b0: p.b0.clone(),
        }),
    )
}

/// Builds the OU model. Unbounded or vanishing profiles are accepted so that the
/// evolution operator can be checked on them; measure experiments need `violations()` empty.
pub fn build_ou_model(p: &OUParams) -> Result<CoefficientModel> {
    CoefficientModel::new(
        format!("ou(d={})", p.dim),
        Arc::new(PowerGrowthCoefficients {
            dim: p.dim,
            gamma: 0.0,
            r: 0.0,
            q0: DiffusionForm::Identity { scale: 1.0 },
            b0: p.b0.clone(),
        }),
    )
}

/// `V(x) = e^{|x|^δ}` outside the unit ball, `c₀ + c₂|x|² + c₄|x|⁴` inside, with value,
/// first and second radial derivatives matched at `|x| = 1`.
#[derive(Clone, Debug)]
pub struct ExpBlendLyapunov {
    delta: f64,
    coeffs: [f64; 3],
}

impl ExpBlendLyapunov {
    pub fn new(delta: f64) -> Self {
        let e = std::f64::consts::E;
        let c4 = e * delta * (delta - 1.0) / 4.0;
        let c2 = e * delta * (2.0 - delta) / 2.0;
        let c0 = e - c2 - c4;
        Self {
            delta,
            coeffs: [c0, c2, c4],
        }
    }

    /// Radial profile and its first two derivatives in `u = |x|²` (inside) or `ρ = |x|` (outside).
    fn inner(&self, u: f64) -> (f64, f64, f64) {
        let [c0, c2, c4] = self.coeffs;
        (c0 + c2 * u + c4 * u * u, c2 + 2.0 * c4 * u, 2.0 * c4)
    }

    fn outer(&self, rho: f64) -> (f64, f64, f64) {
        let d = self.delta;
        let g = rho.powf(d).exp();
        let g1 = d * rho.powf(d - 1.0) * g;
        let g2 = g * (d * (d - 1.0) * rho.powf(d - 2.0) + d * d * rho.powf(2.0 * d - 2.0));
        (g, g1, g2)
    }
}

impl Lyapunov for ExpBlendLyapunov {
    fn value(&self, x: &[f64]) -> f64 {
        let u = linalg::dot(x, x);
        if u < 1.0 {
            self.inner(u).0
        } else {
            self.outer(u.sqrt()).0
        }
    }

    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        let u = linalg::dot(x, x);
        let factor = if u < 1.0 {
            2.0 * self.inner(u).1
        } else {
            let rho = u.sqrt();
            self.outer(rho).1 / rho
        };
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi = factor * xi;
        }
    }

    fn hessian(&self, x: &[f64], h: &mut [f64]) {
        let d = x.len();
        let u = linalg::dot(x, x);
        // H = α I + β x xᵀ
        let (alpha, beta) = if u < 1.0 {
            let (_, p1, p2) = self.inner(u);
            (2.0 * p1, 4.0 * p2)
        } else {
            let rho = u.sqrt();
            let (_, g1, g2) = self.outer(rho);
            (g1 / rho, (g2 - g1 / rho) / u)
        };
        for i in 0..d {
            for j in 0..d {
                let delta = if i == j { 1.0 } else { 0.0 };
                h[i * d + j] = alpha * delta + beta * x[i] * x[j];
            }
        }
    }
}

pub fn default_lyapunov(p: &ExampleParams) -> LyapunovSpec {
    LyapunovSpec::new(
        format!("exp(|x|^{})", p.delta),
        Arc::new(ExpBlendLyapunov::new(p.delta)),
    )
}

pub fn quadratic_lyapunov() -> LyapunovSpec {
    LyapunovSpec::new("1+|x|^2", Arc::new(QuadraticLyapunov))
}

/// Hypothesis constants for the OU family with `V = 1 + |x|²`:
/// `κ = β`, `a = 2d + β`, `r₀ = -β`, `η₀ = 1`, `c₀ = 0`, `|Q| <= d`.
pub fn ou_constants(p: &OUParams) -> Option<HypothesisConstants> {
    let beta = p.b0.infimum();
    (beta > 0.0).then(|| HypothesisConstants {
        eta0: 1.0,
        a: 2.0 * p.dim as f64 + beta,
        kappa: beta,
        c0: 0.0,
        r0: -beta,
        c: p.dim as f64,
        growth: GrowthVariant::BoundedQ,
    })
}

/// Hypothesis constants for the power-growth family, computed from analytic bounds
/// where they exist and from a dense calibration sample otherwise.
pub fn calibrate_constants(p: &ExampleParams, model: &CoefficientModel, lyap: &LyapunovSpec) -> Result<HypothesisConstants> {
    p.validate()?;
    let d = p.dim;
    let kappa = 1.0;
    let (lo, hi) = p.q0.eigen_bounds(d);
    let r_star = p.lyapunov_exterior_radius(kappa, 50.0, 0.01).unwrap_or(10.0);
    let r_cal = (2.0 * r_star).max(4.0);
    let period = match p.b0 {
        TimeProfile::Sine { frequency, .. } if frequency != 0.0 => 2.0 * std::f64::consts::PI / frequency.abs(),
        _ => 10.0,
    };
    let times: Vec<f64> = (0..=64).map(|k| period * k as f64 / 64.0).collect();
    let radii: Vec<f64> = (0..=400).map(|k| r_cal * k as f64 / 400.0).collect();
    let dirs = crate::coefficient_model::SamplingPlan {
        times: vec![],
        radii: vec![],
        directions_per_shell: 6,
        seed: 11,
    }
    .directions(d);

    let mut sup_av = f64::NEG_INFINITY;
    let mut sup_grad_ratio = 0.0f64;
    let mut sup_drift_eig = f64::NEG_INFINITY;
    let mut sup_growth = 0.0f64;
    let mut inf_eta = f64::INFINITY;
    for &t in &times {
        for &rho in &radii {
            for u in &dirs {
                let x: Vec<f64> = u.iter().map(|c| c * rho).collect();
                let jet = lyap.jet(&x)?;
                let av = apply_generator(model, t, &x, &jet)?;
                sup_av = sup_av.max(av + kappa * jet.value);
                let q = model.diffusion(t, &x)?;
                let eta = linalg::min_eigenvalue(d, &q);
                inf_eta = inf_eta.min(eta);
                let dq = model.diffusion_gradient(t, &x)?;
                sup_grad_ratio = sup_grad_ratio.max(linalg::frobenius(&dq) / eta);
                let mut jb = model.drift_jacobian(t, &x)?;
                for i in 0..d {
                    for j in (i + 1)..d {
                        let m = 0.5 * (jb[i * d + j] + jb[j * d + i]);
                        jb[i * d + j] = m;
                        jb[j * d + i] = m;
                    }
                }
                sup_drift_eig = sup_drift_eig.max(linalg::max_eigenvalue(d, &jb));
                if p.gamma > 0.0 {
                    let b = model.drift(t, &x)?;
                    let qn = linalg::frobenius(&q[..d * d]);
                    let g1 = qn / ((1.0 + rho) * jet.value);
                    let g2 = linalg::dot(&b[..d], &x) / ((1.0 + rho * rho) * jet.value);
                    sup_growth = sup_growth.max(g1).max(g2);
                }
            }
        }
    }
    let eta0 = if p.gamma >= 0.0 { lo } else { 0.9 * inf_eta };
    let r0 = if p.r >= 0.0 {
        -p.beta()
    } else {
        sup_drift_eig + 0.1 * sup_drift_eig.abs() + 1e-9
    };
    let (growth, c) = if p.gamma <= 0.0 {
        (GrowthVariant::BoundedQ, (d as f64).sqrt() * hi * 1.0001)
    } else {
        (GrowthVariant::VWeightedGrowth, (1.1 * sup_growth).max(1e-3))
    };
    Ok(HypothesisConstants {
        eta0,
        a: sup_av.max(0.0) * 1.05 + 0.1,
        kappa,
        c0: 1.1 * sup_grad_ratio,
        r0,
        c,
        growth,
    })
}

/// Closed-form answers for the OU family `A(t) = Δ - b⁰(t) <x, ∇>` (any d, coordinatewise).
///
/// With `B(t,s) = ∫_s^t b⁰`, the evolution operator acts as
/// `G(t,s)f(x) = E f(e^{-B(t,s)} x + √V_rev(t,s) Z)` with
/// `V_rev(t,s) = 2∫_s^t e^{-2B(σ,s)} dσ`, and the tight evolution system of measures is
/// `μ_t = N(0, v(t) I)`, `v(t) = 2∫_t^∞ e^{-2B(u,t)} du`.
#[derive(Clone, Debug)]
pub struct OuOracle {
    pub dim: usize,
    pub b0: TimeProfile,
    pub tol: f64,
}

/// Queries understood by [`OuOracle::answer`].
#[derive(Clone, Debug, PartialEq)]
pub enum OuQuery {
    MeanFactor { t: f64, s: f64 },
    ReversedVariance { t: f64, s: f64 },
    MeasureVariance { t: f64 },
    /// `(G(t,s)f)(x)`
    Evolve { f: TestFunction, t: f64, s: f64, x: Vec<f64> },
    /// `m_t(f)`
    MeasureMean { f: TestFunction, t: f64 },
}

impl OuOracle {
    pub fn new(p: &OUParams) -> Self {
        Self {
            dim: p.dim,
            b0: p.b0.clone(),
            tol: 1e-13,
        }
    }

    pub fn mean_factor(&self, t: f64, s: f64) -> f64 {
        (-self.b0.integral(s, t)).exp()
    }

    pub fn reversed_variance(&self, t: f64, s: f64) -> f64 {
        2.0 * adaptive_simpson(&|sig: f64| (-2.0 * self.b0.integral(s, sig)).exp(), s, t, self.tol)
    }

    /// Variance produced by the naive forward schedule (coefficients at natural time):
    /// `2∫_s^t e^{-2B(t,σ)} dσ`.
    pub fn forward_variance(&self, t: f64, s: f64) -> f64 {
        2.0 * adaptive_simpson(&|sig: f64| (-2.0 * self.b0.integral(sig, t)).exp(), s, t, self.tol)
    }

    /// `v(t) = 2∫_t^∞ e^{-2B(u,t)} du`, truncated where the integrand drops below e^{-80}.
    pub fn measure_variance(&self, t: f64) -> f64 {
        let mut span = 1.0;
        while 2.0 * self.b0.integral(t, t + span) < 80.0 {
            span *= 2.0;
            assert!(span < 1e9, "profile does not confine: integral of b0 stays bounded");
        }
        // split into unit pieces so the adaptive rule sees the decay
        let pieces = span.ceil() as usize;
        (0..pieces)
            .map(|k| {
                let a = t + k as f64;
                2.0 * adaptive_simpson(&|u: f64| (-2.0 * self.b0.integral(t, u)).exp(), a, a + 1.0, self.tol)
            })
            .sum()
    }

    /// `E f(m + σ Z)` per coordinate, for the supported families.
    fn gaussian_expectation(&self, f: &TestFunction, mean: &[f64], var: f64) -> Result<f64> {
        Ok(match f {
            TestFunction::Constant { value } => *value,
            TestFunction::Coordinate => mean[0],
            TestFunction::Square => mean[0] * mean[0] + var,
            TestFunction::GaussianBump { width } => {
                let w2 = width * width;
                mean.iter()
                    .map(|m| (w2 / (w2 + var)).sqrt() * (-m * m / (2.0 * (w2 + var))).exp())
                    .product()
            }
            TestFunction::MollifiedIndicator { scale } => normal_cdf(mean[0] / (scale * scale + var).sqrt()),
            TestFunction::Scaled { factor, inner } => factor * self.gaussian_expectation(inner, mean, var)?,
            TestFunction::Shifted { offset, inner } => self.gaussian_expectation(inner, mean, var)? + offset,
            other => {
                return Err(Error::Unsupported(format!(
                    "OU oracle has no closed form for {}",
                    other.label()
                )))
            }
        })
    }

    pub fn answer(&self, q: &OuQuery) -> Result<f64> {
        match q {
            OuQuery::MeanFactor { t, s } => Ok(self.mean_factor(*t, *s)),
            OuQuery::ReversedVariance { t, s } => Ok(self.reversed_variance(*t, *s)),
            OuQuery::MeasureVariance { t } => Ok(self.measure_variance(*t)),
            OuQuery::Evolve { f, t, s, x } => {
                if x.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        got: x.len(),
                        context: "oracle point",
                    });
                }
                let k = self.mean_factor(*t, *s);
                let mean: Vec<f64> = x.iter().map(|v| k * v).collect();
                self.gaussian_expectation(f, &mean, self.reversed_variance(*t, *s))
            }
            OuQuery::MeasureMean { f, t } => {
                self.gaussian_expectation(f, &vec![0.0; self.dim], self.measure_variance(*t))
            }
        }
    }
}

/// Which family a preset belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum FamilyParams {
    PowerGrowth(ExampleParams),
    Ou(OUParams),
}

/// A model with its Lyapunov function and hypothesis constants.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: String,
    pub params: FamilyParams,
    pub model: CoefficientModel,
    pub lyapunov: LyapunovSpec,
    pub constants: Option<HypothesisConstants>,
}

impl Preset {
    pub fn from_params(name: impl Into<String>, params: FamilyParams) -> Result<Self> {
        let name = name.into();
        match &params {
            FamilyParams::PowerGrowth(p) => {
                let model = build_example_model(p)?;
                let lyapunov = default_lyapunov(p);
                let constants = Some(calibrate_constants(p, &model, &lyapunov)?);
                Ok(Self { name, params, model, lyapunov, constants })
            }
            FamilyParams::Ou(p) => {
                let model = build_ou_model(p)?;
                Ok(Self {
                    name,
                    constants: ou_constants(p),
                    params,
                    model,
                    lyapunov: quadratic_lyapunov(),
                })
            }
        }
    }

    pub fn ou_oracle(&self) -> Option<OuOracle> {
        match &self.params {
            FamilyParams::Ou(p) => Some(OuOracle::new(p)),
            FamilyParams::PowerGrowth(_) => None,
        }
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "ou-const",
    "ou-sin",
    "ou-converging",
    "ou-2d",
    "power-1d-a",
    "power-1d-b",
    "power-2d-a",
    "power-3d-a",
];

pub fn preset_params(name: &str) -> Result<FamilyParams> {
    let sine = TimeProfile::Sine { mean: 1.0, amplitude: 0.5, frequency: 1.0 };
    Ok(match name {
        "ou-const" => FamilyParams::Ou(OUParams { dim: 1, b0: TimeProfile::Constant { value: 1.0 } }),
        "ou-sin" => FamilyParams::Ou(OUParams { dim: 1, b0: sine }),
        "ou-converging" => FamilyParams::Ou(OUParams {
            dim: 1,
            b0: TimeProfile::Converging { limit: 1.0, amplitude: 1.0, rate: 1.0 },
        }),
        "ou-2d" => FamilyParams::Ou(OUParams { dim: 2, b0: TimeProfile::Constant { value: 1.0 } }),
        "power-1d-a" => FamilyParams::PowerGrowth(ExampleParams {
            dim: 1,
            gamma: 0.0,
            r: 1.0,
            delta: 1.0,
            q0: DiffusionForm::Modulated { amplitude: 0.5, frequency: 1.0, coupling: 0.0 },
            b0: sine,
        }),
        "power-1d-b" => FamilyParams::PowerGrowth(ExampleParams {
            dim: 1,
            gamma: 0.5,
            r: 1.0,
            delta: 1.0,
            q0: DiffusionForm::Identity { scale: 1.0 },
            b0: TimeProfile::Converging { limit: 1.0, amplitude: 1.0, rate: 1.0 },
        }),
        "power-2d-a" => FamilyParams::PowerGrowth(ExampleParams {
            dim: 2,
            gamma: 0.0,
            r: 1.0,
            delta: 1.0,
            q0: DiffusionForm::Modulated { amplitude: 0.3, frequency: 1.0, coupling: 0.2 },
            b0: sine,
        }),
        "power-3d-a" => FamilyParams::PowerGrowth(ExampleParams {
            dim: 3,
            gamma: 0.0,
            r: 0.5,
            delta: 1.0,
            q0: DiffusionForm::Identity { scale: 1.0 },
            b0: TimeProfile::Constant { value: 1.0 },
        }),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}

pub fn preset(name: &str) -> Result<Preset> {
    Preset::from_params(name, preset_params(name)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficient_model::{ellipticity_margin, hypothesis_scan, lyapunov_residual, Jet, SamplingPlan};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn power_params(gamma: f64, r: f64, delta: f64) -> ExampleParams {
        ExampleParams {
            dim: 1,
            gamma,
            r,
            delta,
            q0: DiffusionForm::Identity { scale: 1.0 },
            b0: TimeProfile::Constant { value: 1.0 },
        }
    }

    #[test]
    fn validation_examples() {
        assert!(power_params(0.0, 1.0, 1.0).validate().is_ok());
        let v = power_params(2.0, 0.5, 1.0).violations();
        assert!(v.iter().any(|m| m.contains("r ≤ γ−1")), "{v:?}");
        let v = power_params(0.0, 0.0, 2.0).violations();
        assert!(v.iter().any(|m| m.contains("open interval")), "{v:?}");
        let mut p = power_params(0.0, 1.0, 1.0);
        p.b0 = TimeProfile::Sine { mean: 1.0, amplitude: 1.0, frequency: 1.0 };
        assert!(p.violations().iter().any(|m| m.contains("beta")));
        assert!(matches!(build_example_model(&p), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn generator_and_drift_substitution() {
        let m = build_example_model(&power_params(0.0, 1.0, 1.0)).unwrap();
        assert_eq!(m.drift(0.0, &[1.0]).unwrap()[0], -2.0);
        let jet = Jet { value: 1.0, gradient: vec![1.0], hessian: vec![0.0] };
        assert_eq!(apply_generator(&m, 0.0, &[1.0], &jet).unwrap(), -2.0);
    }

    #[test]
    fn ellipticity_with_growth() {
        let m = build_example_model(&power_params(1.0, 1.0, 1.0)).unwrap();
        let (eta, _) = ellipticity_margin(&m, 1.0, 0.0, &[2.0]).unwrap();
        assert_eq!(eta, 5.0);
    }

    #[test]
    fn degenerates_to_ou() {
        let mut p = power_params(0.0, 0.0, 1.0);
        p.b0 = TimeProfile::Constant { value: 0.7 };
        let m = build_example_model(&p).unwrap();
        let ou = build_ou_model(&OUParams { dim: 1, b0: TimeProfile::Constant { value: 0.7 } }).unwrap();
        for x in [-2.0, 0.3, 4.0] {
            assert_eq!(m.drift(1.0, &[x]).unwrap(), ou.drift(1.0, &[x]).unwrap());
            assert_eq!(m.diffusion(1.0, &[x]).unwrap(), ou.diffusion(1.0, &[x]).unwrap());
        }
    }

    #[test]
    fn drift_grows_like_power() {
        let mut p = power_params(0.0, 1.5, 1.0);
        p.b0 = TimeProfile::Sine { mean: 1.0, amplitude: 0.5, frequency: 1.0 };
        let m = build_example_model(&p).unwrap();
        let t = 0.8;
        let ratio = |x: f64| m.drift(t, &[x]).unwrap()[0].abs() / x.powf(2.0 * 1.5 + 1.0);
        let target = p.b0.value(t);
        assert!((ratio(1e3) - target).abs() < 1e-5 * target);
        assert!((ratio(1e3) - target).abs() < (ratio(10.0) - target).abs());
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let FamilyParams::PowerGrowth(mut p) = preset_params("power-2d-a").unwrap() else { panic!() };
        p.gamma = 0.4;
        let m = build_example_model(&p).unwrap();
        let fd = m.clone().with_finite_differences();
        for x in [[0.3, -0.7], [1.5, 0.2]] {
            let a = m.drift_jacobian(0.6, &x).unwrap();
            let b = fd.drift_jacobian(0.6, &x).unwrap();
            for k in 0..4 {
                assert_relative_eq!(a[k], b[k], epsilon = 1e-6, max_relative = 1e-7);
            }
            let a = m.diffusion_gradient(0.6, &x).unwrap();
            let b = fd.diffusion_gradient(0.6, &x).unwrap();
            for k in 0..8 {
                assert_relative_eq!(a[k], b[k], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn lyapunov_blend_matches_at_unit_sphere() {
        for delta in [0.5, 1.0, 2.5, 3.9] {
            let v = ExpBlendLyapunov::new(delta);
            let (p, p1, p2) = v.inner(1.0);
            let (g, g1, g2) = v.outer(1.0);
            // radial derivatives of the inner piece at ρ = 1: d/dρ = 2ρ d/du
            assert!((p - g).abs() < 1e-12);
            assert!((2.0 * p1 - g1).abs() < 1e-12);
            assert!((2.0 * p1 + 4.0 * p2 - g2).abs() < 1e-12);
            let inside = v.value(&[1.0 - 1e-13]);
            assert!((inside - std::f64::consts::E).abs() < 1e-10);
        }
    }

    #[test]
    fn lyapunov_calculus_example() {
        let lyap = default_lyapunov(&power_params(0.0, 1.0, 1.0));
        let j = lyap.jet(&[2.0]).unwrap();
        let e2 = 2.0f64.exp();
        assert_relative_eq!(j.value, e2, max_relative = 1e-14);
        assert_relative_eq!(j.gradient[0], e2, max_relative = 1e-14);
        assert_relative_eq!(j.hessian[0], e2, max_relative = 1e-14);
    }

    #[test]
    fn lyapunov_residual_negative_outside_exterior_radius() {
        let p = power_params(0.0, 1.0, 1.0);
        let m = build_example_model(&p).unwrap();
        let lyap = default_lyapunov(&p);
        let consts = HypothesisConstants {
            eta0: 1.0,
            a: 0.0,
            kappa: 1.0,
            c0: 0.0,
            r0: 0.0,
            c: 1.0,
            growth: GrowthVariant::BoundedQ,
        };
        let r_star = p.lyapunov_exterior_radius(1.0, 20.0, 0.01).unwrap();
        assert!(r_star < 3.0, "R* = {r_star}");
        for k in 0..200 {
            let rho = r_star + 0.05 * k as f64;
            for x in [rho, -rho] {
                assert!(lyapunov_residual(&m, &lyap, &consts, 0.0, &[x]).unwrap() <= 0.0);
                // the bounding function dominates the exact generator value
                let jet = lyap.jet(&[x]).unwrap();
                let av = apply_generator(&m, 0.0, &[x], &jet).unwrap();
                assert!(av <= p.delta * jet.value * rho.powf(p.delta) * p.lyapunov_bound_h(rho) + 1e-9 * jet.value);
            }
        }
    }

    #[test]
    fn shipped_presets_pass_their_scan() {
        for name in PRESET_NAMES {
            let pr = preset(name).unwrap();
            let consts = pr.constants.unwrap();
            let plan = SamplingPlan {
                times: vec![0.0, 0.7, 2.1, 4.4, 9.0],
                radii: vec![0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0],
                directions_per_shell: 8,
                seed: 3,
            };
            let rep = hypothesis_scan(&pr.model, &pr.lyapunov, &consts, &plan).unwrap();
            assert!(rep.pass, "{name}: {rep:#?}");
        }
    }

    #[test]
    fn profile_integrals_match_quadrature() {
        let profiles = [
            TimeProfile::Constant { value: 1.3 },
            TimeProfile::Sine { mean: 1.0, amplitude: 0.5, frequency: 1.0 },
            TimeProfile::Converging { limit: 1.0, amplitude: 1.0, rate: 1.0 },
            TimeProfile::Linear { slope: 1.0, offset: 0.0 },
        ];
        for p in &profiles {
            for (a, b) in [(0.0, 1.0), (-2.0, 3.0), (1.5, 4.0), (-3.0, -1.0)] {
                let q = adaptive_simpson(&|t| p.value(t), a, b, 1e-13);
                let q = if a < 0.0 && b > 0.0 {
                    adaptive_simpson(&|t| p.value(t), a, 0.0, 1e-13) + adaptive_simpson(&|t| p.value(t), 0.0, b, 1e-13)
                } else {
                    q
                };
                assert!((p.integral(a, b) - q).abs() < 1e-10, "{p:?} [{a},{b}]");
            }
        }
    }

    #[test]
    fn oracle_examples() {
        let c = OuOracle::new(&OUParams { dim: 1, b0: TimeProfile::Constant { value: 1.0 } });
        assert_relative_eq!(c.measure_variance(3.0), 1.0, epsilon = 1e-10);
        let lin = OuOracle::new(&OUParams { dim: 1, b0: TimeProfile::Linear { slope: 1.0, offset: 0.0 } });
        let g = lin
            .answer(&OuQuery::Evolve { f: TestFunction::Square, t: 1.0, s: 0.0, x: vec![0.0] })
            .unwrap();
        // 2∫₀¹ e^{-σ²} dσ = √π erf(1)
        let exact = std::f64::consts::PI.sqrt() * libm::erf(1.0);
        assert!((g - exact).abs() < 1e-10);
        assert!((g - 1.49365).abs() < 1e-5);
        // forward schedule gives 2∫₀¹ e^{-(1-σ²)} dσ instead
        let fwd = lin.forward_variance(1.0, 0.0);
        let fwd_exact = 2.0 * adaptive_simpson(&|s: f64| (-(1.0 - s * s)).exp(), 0.0, 1.0, 1e-14);
        assert!((fwd - fwd_exact).abs() < 1e-10);
        assert!((fwd - 1.07616).abs() < 1e-5);
        for (t, s) in [(1.0, 0.0), (4.0, 2.5)] {
            let one = lin
                .answer(&OuQuery::Evolve { f: TestFunction::Constant { value: 1.0 }, t, s, x: vec![0.7] })
                .unwrap();
            assert_eq!(one, 1.0);
        }
        assert!(matches!(
            lin.answer(&OuQuery::Evolve { f: TestFunction::TanhBump { width: 0.5 }, t: 1.0, s: 0.0, x: vec![0.0] }),
            Err(Error::Unsupported(_))
        ));
    }

    /// The measure variance solves v' = 2bv - 2, i.e. the family is invariant for G:
    /// v(s) = e^{-2B(t,s)} v(t) + V_rev(t,s).
    #[test]
    fn oracle_measures_are_invariant() {
        let o = OuOracle::new(&OUParams { dim: 1, b0: TimeProfile::Sine { mean: 1.0, amplitude: 0.5, frequency: 1.0 } });
        for (s, t) in [(0.0, 1.0), (0.0, 5.0), (2.0, 2.5)] {
            let lhs = o.mean_factor(t, s).powi(2) * o.measure_variance(t) + o.reversed_variance(t, s);
            assert!((lhs - o.measure_variance(s)).abs() < 1e-9, "{s} {t}");
        }
        // whereas the naive forward-in-time variance is not invariant for a time-dependent rate
        let fwd_v = |t: f64| o.forward_variance(t, t - 60.0);
        let (s, t) = (0.0, 1.0);
        let lhs = o.mean_factor(t, s).powi(2) * fwd_v(t) + o.reversed_variance(t, s);
        assert!((lhs - fwd_v(s)).abs() > 1e-3);
    }

    proptest! {
        #[test]
        fn lyapunov_blend_positive(delta in 0.05..10.0f64, rho in 0.0..1.0f64) {
            let v = ExpBlendLyapunov::new(delta);
            prop_assert!(v.value(&[rho]) > 0.0);
        }
    }
}

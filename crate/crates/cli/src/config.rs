//! TOML experiment recipes.
//!
//! ```toml
//! schema_version = 1
//! seed = 42
//!
//! [models.ou]
//! preset = "ou-const"
//!
//! [[experiments]]
//! name = "ou-measures"
//! kind = "measures"
//! model = "ou"
//! times = [0.0, 1.0]
//! ```
//!
//! Unknown keys are errors. Every error carries the line it refers to.

use crate::error::{CliError, Result};
use evolab::convergence::{CurveTolerances, GradientTolerances, LimitTolerances, UniquenessTolerances};
use evolab::example_family::{preset_params, FamilyParams};
use evolab::{
    Estimator, FdConfig, HypothesisConstants, InitSpec, IntegratorConfig, Preset, SamplingPlan, SpatialGrid, TestFunction,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub fd: FdConfig,
    pub models: BTreeMap<String, ModelSpec>,
    #[serde(default)]
    pub experiments: Vec<Experiment>,
}

/// A named preset or inline family parameters, optionally with explicit hypothesis constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub params: Option<FamilyParams>,
    #[serde(default)]
    pub constants: Option<HypothesisConstants>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Fd,
    Mc,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_dx")]
    pub dx: f64,
}

fn default_half_width() -> f64 {
    6.0
}
fn default_dx() -> f64 {
    0.05
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { half_width: default_half_width(), dx: default_dx() }
    }
}

impl GridSpec {
    pub fn build(&self, dim: usize) -> evolab::Result<SpatialGrid> {
        SpatialGrid::new(dim, self.half_width, self.dx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
}

fn default_estimator() -> Estimator {
    Estimator::Kernel { bandwidth: None }
}

fn yes() -> bool {
    true
}
fn default_particles() -> usize {
    10_000
}
fn default_t_burn() -> f64 {
    10.0
}
fn default_p() -> f64 {
    2.0
}
fn default_battery() -> Vec<TestFunction> {
    TestFunction::battery()
}
fn default_init() -> InitSpec {
    InitSpec::PointMass { at: vec![] }
}
fn default_radius() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn three() -> f64 {
    3.0
}
fn default_reps() -> usize {
    200
}
fn default_tightness() -> Vec<f64> {
    vec![1.0, 2.0, 4.0]
}

/// Adds the fields every experiment shares and derives serde for the table.
macro_rules! experiment {
    ($(#[$meta:meta])* $ty:ident { $($(#[$fmeta:meta])* $field:ident : $fty:ty),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $ty {
            pub name: String,
            pub model: String,
            #[serde(default = "yes")]
            pub enabled: bool,
            #[serde(default)]
            pub engine: Option<EngineKind>,
            $($(#[$fmeta])* pub $field: $fty,)*
        }
    };
}

experiment!(
    /// Samples every quantitative hypothesis on a time × space plan.
    CheckHypotheses {
        #[serde(default)]
        plan: Option<SamplingPlan>,
    }
);

experiment!(
    /// Builds `μ̂_t` on a time grid: functionals, densities, floor and tightness.
    Measures {
        times: Vec<f64>,
        #[serde(default = "default_particles")]
        particles: usize,
        #[serde(default = "default_t_burn")]
        t_burn: f64,
        #[serde(default = "default_init")]
        init: InitSpec,
        #[serde(default = "default_battery")]
        functionals: Vec<TestFunction>,
        #[serde(default)]
        density: Option<DensitySpec>,
        #[serde(default = "one")]
        floor_radius: f64,
        #[serde(default = "default_tightness")]
        tightness_radii: Vec<f64>,
        /// density floor must exceed this
        #[serde(default)]
        floor_min: Option<f64>,
        /// KS distance to the closed-form law (OU models only)
        #[serde(default)]
        ks_max: Option<f64>,
        /// compares `T_burn` with `2 T_burn`; W1 must stay below this many SEs
        #[serde(default)]
        burn_in_se_multiple: Option<f64>,
        #[serde(default)]
        save_ensembles: bool,
    }
);

experiment!(
    /// `h(t) = ‖G(t,s)f - m̂_s(f)‖_{L^p(μ̂_t)}` and sup-deviations over a t-grid.
    Convergence {
        #[serde(default)]
        s: f64,
        times: Vec<f64>,
        #[serde(default = "default_battery")]
        functions: Vec<TestFunction>,
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default = "default_particles")]
        particles: usize,
        #[serde(default = "default_t_burn")]
        t_burn: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        grid: GridSpec,
        #[serde(default = "default_outer")]
        outer_cap: usize,
        #[serde(default = "default_inner")]
        inner: usize,
        #[serde(default = "default_reps")]
        bootstrap_reps: usize,
        #[serde(default)]
        tolerances: CurveTolerances,
        /// engines must agree on `h` within this many combined SEs
        #[serde(default = "three")]
        agreement_se_multiple: f64,
    }
);

fn default_outer() -> usize {
    500
}
fn default_inner() -> usize {
    200
}

experiment!(
    /// Small-time gradient bound and its log-log slope (FD only).
    GradientProbe {
        #[serde(default)]
        s: f64,
        times: Vec<f64>,
        function: TestFunction,
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default)]
        grid: GridSpec,
        /// FD time step for this probe (defaults to the global one)
        #[serde(default)]
        dt: Option<f64>,
        #[serde(default)]
        tolerances: GradientTolerances,
    }
);

experiment!(
    /// Gradient of the evolution semigroup in the windowed space-time norm.
    SemigroupDecay {
        t0: f64,
        t1: f64,
        #[serde(default = "default_slices")]
        slices: usize,
        lags: Vec<f64>,
        function: TestFunction,
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default = "default_particles")]
        particles: usize,
        #[serde(default = "default_t_burn")]
        t_burn: f64,
        #[serde(default)]
        grid: GridSpec,
        #[serde(default)]
        history_start: f64,
        #[serde(default = "two")]
        monotone_band: f64,
    }
);

fn default_slices() -> usize {
    11
}

experiment!(
    /// W1 between measure families started from two initializations.
    Uniqueness {
        times: Vec<f64>,
        init_a: InitSpec,
        init_b: InitSpec,
        #[serde(default = "default_particles")]
        particles: usize,
        #[serde(default = "default_t_burn")]
        t_burn: f64,
        #[serde(default)]
        tolerances: UniquenessTolerances,
    }
);

experiment!(
    /// Densities against the limit model's and the limit deviation of `G(t,s)f`.
    LimitCompare {
        times: Vec<f64>,
        #[serde(default)]
        density: Option<DensitySpec>,
        #[serde(default = "default_particles")]
        particles: usize,
        #[serde(default = "default_t_burn")]
        t_burn: f64,
        function: TestFunction,
        #[serde(default)]
        s: f64,
        lags: Vec<f64>,
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_reps")]
        bootstrap_reps: usize,
        #[serde(default)]
        tolerances: LimitTolerances,
    }
);

experiment!(
    /// `G(t,s)f` at points by both engines.
    CrossValidate {
        #[serde(default)]
        s: f64,
        t: f64,
        #[serde(default = "default_battery")]
        functions: Vec<TestFunction>,
        points: Vec<Vec<f64>>,
        #[serde(default = "default_cross_inner")]
        inner: usize,
        #[serde(default)]
        grid: GridSpec,
        #[serde(default = "three")]
        se_multiple: f64,
    }
);

fn default_cross_inner() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    CheckHypotheses(CheckHypotheses),
    Measures(Measures),
    Convergence(Convergence),
    GradientProbe(GradientProbe),
    SemigroupDecay(SemigroupDecay),
    Uniqueness(Uniqueness),
    LimitCompare(LimitCompare),
    CrossValidate(CrossValidate),
}

macro_rules! common {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            Experiment::CheckHypotheses($e) => $body,
            Experiment::Measures($e) => $body,
            Experiment::Convergence($e) => $body,
            Experiment::GradientProbe($e) => $body,
            Experiment::SemigroupDecay($e) => $body,
            Experiment::Uniqueness($e) => $body,
            Experiment::LimitCompare($e) => $body,
            Experiment::CrossValidate($e) => $body,
        }
    };
}

impl Experiment {
    pub fn name(&self) -> &str {
        common!(self, e => &e.name)
    }

    pub fn model(&self) -> &str {
        common!(self, e => &e.model)
    }

    pub fn enabled(&self) -> bool {
        common!(self, e => e.enabled)
    }

    pub fn engine(&self) -> Option<EngineKind> {
        common!(self, e => e.engine)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::CheckHypotheses(_) => "check-hypotheses",
            Experiment::Measures(_) => "measures",
            Experiment::Convergence(_) => "convergence",
            Experiment::GradientProbe(_) => "gradient-probe",
            Experiment::SemigroupDecay(_) => "semigroup-decay",
            Experiment::Uniqueness(_) => "uniqueness",
            Experiment::LimitCompare(_) => "limit-compare",
            Experiment::CrossValidate(_) => "cross-validate",
        }
    }
}

/// The config together with its source text, for hashing and error anchoring.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub path: String,
    pub text: String,
    pub config: ExperimentConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// 1-based line of the `nth` (0-based) line starting with `prefix`.
fn find_line(text: &str, prefix: &str, nth: usize) -> Option<usize> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with(prefix))
        .nth(nth)
        .map(|(i, _)| i + 1)
}

fn line_of(text: &str, prefix: &str, nth: usize) -> usize {
    find_line(text, prefix, nth).unwrap_or(1)
}

impl LoadedConfig {
    pub fn parse(path: &str, text: String) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(&text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(&text, s.start));
            CliError::Config { path: path.into(), line, column, message: e.message().trim().to_string() }
        })?;
        let loaded = Self { path: path.into(), text, config };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&path.display().to_string(), text)
    }

    fn error_at(&self, line: usize, message: impl Into<String>) -> CliError {
        CliError::Config { path: self.path.clone(), line, column: 1, message: message.into() }
    }

    fn model_line(&self, name: &str) -> usize {
        find_line(&self.text, &format!("[models.{name}"), 0)
            .or_else(|| find_line(&self.text, &format!("[models.\"{name}\""), 0))
            .unwrap_or(1)
    }

    fn experiment_line(&self, index: usize) -> usize {
        line_of(&self.text, "[[experiments]]", index)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.schema_version != SCHEMA_VERSION {
            return Err(self.error_at(
                line_of(&self.text, "schema_version", 0),
                format!("unsupported schema_version {} (this build reads {SCHEMA_VERSION})", c.schema_version),
            ));
        }
        c.integrator.validate().map_err(|e| self.error_at(line_of(&self.text, "[integrator]", 0), e.to_string()))?;
        c.fd.validate().map_err(|e| self.error_at(line_of(&self.text, "[fd]", 0), e.to_string()))?;
        for name in c.models.keys() {
            self.model(name)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, e) in c.experiments.iter().enumerate() {
            let line = self.experiment_line(i);
            if !seen.insert(e.name()) {
                return Err(self.error_at(line, format!("duplicate experiment name '{}'", e.name())));
            }
            if e.name().is_empty() || !e.name().chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_') {
                return Err(self.error_at(line, format!("experiment name '{}' must be non-empty [A-Za-z0-9_-]", e.name())));
            }
            if !c.models.contains_key(e.model()) {
                return Err(self.error_at(line, format!("experiment '{}' references undefined model '{}'", e.name(), e.model())));
            }
            self.validate_experiment(e).map_err(|m| self.error_at(line, format!("experiment '{}': {m}", e.name())))?;
        }
        Ok(())
    }

    fn validate_experiment(&self, e: &Experiment) -> std::result::Result<(), String> {
        fn positive(name: &str, v: f64) -> std::result::Result<(), String> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("tolerance {name} must be positive (got {v})"))
            }
        }
        fn nonempty<T>(name: &str, v: &[T]) -> std::result::Result<(), String> {
            if v.is_empty() {
                Err(format!("{name} must not be empty"))
            } else {
                Ok(())
            }
        }
        let dim = self.model(e.model()).map_err(|e| e.to_string())?.model.dim();
        match e {
            Experiment::CheckHypotheses(_) => {}
            Experiment::Measures(m) => {
                nonempty("times", &m.times)?;
                positive("t_burn", m.t_burn)?;
                if let Some(v) = m.floor_min {
                    positive("floor_min", v)?;
                }
                if let Some(v) = m.ks_max {
                    positive("ks_max", v)?;
                }
                if let Some(v) = m.burn_in_se_multiple {
                    positive("burn_in_se_multiple", v)?;
                }
                if m.density.is_some() && dim > 2 {
                    return Err(format!("densities are gridded for d <= 2 (model has d = {dim})"));
                }
            }
            Experiment::Convergence(c) => {
                nonempty("times", &c.times)?;
                nonempty("functions", &c.functions)?;
                positive("monotone_band", c.tolerances.monotone_band)?;
                positive("decay_ratio", c.tolerances.decay_ratio)?;
                positive("agreement_se_multiple", c.agreement_se_multiple)?;
                if c.times.iter().any(|t| *t < c.s) {
                    return Err(format!("times must not precede s = {}", c.s));
                }
            }
            Experiment::GradientProbe(g) => {
                nonempty("times", &g.times)?;
                positive("coverage_min", g.tolerances.coverage_min)?;
                positive("c1_stability", g.tolerances.c1_stability)?;
                if dim > 2 {
                    return Err(format!("the gradient probe is FD-based and needs d <= 2 (model has d = {dim})"));
                }
            }
            Experiment::SemigroupDecay(s) => {
                nonempty("lags", &s.lags)?;
                positive("monotone_band", s.monotone_band)?;
                if dim > 2 {
                    return Err(format!("semigroup decay is FD-based and needs d <= 2 (model has d = {dim})"));
                }
            }
            Experiment::Uniqueness(u) => {
                nonempty("times", &u.times)?;
                if u.init_a == u.init_b {
                    log::info!("uniqueness probe '{}' compares identical initializations", u.name);
                }
            }
            Experiment::LimitCompare(l) => {
                nonempty("times", &l.times)?;
                nonempty("lags", &l.lags)?;
                positive("l1_final", l.tolerances.l1_final)?;
                positive("deviation_rel", l.tolerances.deviation_rel)?;
                if dim > 2 {
                    return Err(format!("limit comparison needs d <= 2 (model has d = {dim})"));
                }
            }
            Experiment::CrossValidate(x) => {
                nonempty("points", &x.points)?;
                positive("se_multiple", x.se_multiple)?;
                if let Some(p) = x.points.iter().find(|p| p.len() != dim) {
                    return Err(format!("point {p:?} does not have dimension {dim}"));
                }
                if dim > 2 {
                    return Err(format!("cross-validation needs the FD engine, d <= 2 (model has d = {dim})"));
                }
            }
        }
        Ok(())
    }

    /// Builds the named model, reporting invalid parameters at its table.
    pub fn model(&self, name: &str) -> Result<Preset> {
        let spec = self
            .config
            .models
            .get(name)
            .ok_or_else(|| self.error_at(1, format!("undefined model '{name}'")))?;
        let line = self.model_line(name);
        let params = match (&spec.preset, &spec.params) {
            (Some(p), None) => preset_params(p).map_err(|e| self.error_at(line, e.to_string()))?,
            (None, Some(params)) => params.clone(),
            _ => return Err(self.error_at(line, format!("model '{name}' needs exactly one of `preset` or `params`"))),
        };
        let mut preset = Preset::from_params(name, params).map_err(|e| self.error_at(line, format!("model '{name}': {e}")))?;
        if let Some(c) = spec.constants {
            c.validate().map_err(|e| self.error_at(line, format!("model '{name}': {e}")))?;
            preset.constants = Some(c);
        }
        Ok(preset)
    }
}

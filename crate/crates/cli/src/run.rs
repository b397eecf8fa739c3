//! Executes the experiments of a config and writes their outputs plus a manifest.

use crate::config::{
    CheckHypotheses, Convergence, CrossValidate, DensitySpec, EngineKind, Experiment, GradientProbe, LimitCompare,
    LoadedConfig, Measures, SemigroupDecay, Uniqueness,
};
use crate::emit::{report_rows, write_csv, write_json, write_report_json};
use crate::error::{CliError, Result};
use evolab::convergence::{self, ProbeSettings};
use evolab::measure::{self, density_floor, estimate_measure_series, TimeBump};
use evolab::rng::derive_seed;
use evolab::sde::snapshot;
use evolab::{
    hypothesis_scan, stats, ConvergenceReport, FdConfig, GEngine, IntegratorConfig, MeasureConfig, Preset, SamplingPlan,
    SeedLineage, SpaceTimeWindowMeasure, Verdict,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub engine: Option<EngineKind>,
    pub parallel: bool,
    /// run only experiments of this kind
    pub only_kind: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub kind: String,
    pub model: String,
    pub seed: u64,
    pub pass: bool,
    pub error: Option<String>,
    pub verdicts: Vec<Verdict>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub artifact_version: String,
    pub config_file: String,
    /// sha256 of the config bytes, identical to the copy stored next to the manifest
    pub config_sha256: String,
    pub seed: u64,
    pub engine_override: Option<EngineKind>,
    /// wall-clock milliseconds since the Unix epoch; the only non-reproducible fields
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub experiments: Vec<ExperimentRecord>,
    pub files: Vec<FileEntry>,
    pub pass: bool,
}

impl RunManifest {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now_ms() -> u128 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

type Files = Vec<(String, Vec<u8>)>;

/// What one experiment produced, before anything touches the disk.
struct Produced {
    reports: Vec<ConvergenceReport>,
    extra: Files,
}

struct Context<'a> {
    preset: Preset,
    integrator: IntegratorConfig,
    fd: FdConfig,
    engine: EngineKind,
    seed: u64,
    name: &'a str,
}

impl Context<'_> {
    fn measure_cfg(&self, particles: usize, t_burn: f64) -> MeasureConfig {
        MeasureConfig { integrator: self.integrator, ..MeasureConfig::new(t_burn, particles) }
    }

    fn sub_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

pub fn execute(cfg: &LoadedConfig, opts: &RunOptions) -> Result<RunManifest> {
    let started = now_ms();
    let c = &cfg.config;
    let seed = opts.seed.unwrap_or(c.seed);
    let out_dir = opts.out_dir.clone().or_else(|| c.out_dir.clone()).unwrap_or_else(|| PathBuf::from("evolab-out"));
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    let selected: Vec<&Experiment> = c
        .experiments
        .iter()
        .filter(|e| e.enabled() && opts.only_kind.as_deref().is_none_or(|k| k == e.kind()))
        .collect();
    let run_one = |e: &&Experiment| -> Result<(ExperimentRecord, Files)> {
        let preset = cfg.model(e.model())?;
        let engine = opts.engine.or(e.engine()).unwrap_or(if preset.model.dim() <= 2 { EngineKind::Fd } else { EngineKind::Mc });
        let ctx = Context { preset, integrator: c.integrator, fd: c.fd, engine, seed: derive_seed(seed, e.name()), name: e.name() };
        log::info!("running {} '{}' on model '{}'", e.kind(), e.name(), e.model());
        let mut record = ExperimentRecord {
            name: e.name().into(),
            kind: e.kind().into(),
            model: e.model().into(),
            seed: ctx.seed,
            pass: false,
            error: None,
            verdicts: Vec::new(),
            files: Vec::new(),
        };
        let mut files = Vec::new();
        match produce(e, &ctx) {
            Ok(p) => {
                let multi = p.reports.len() > 1;
                let mut rows = Vec::new();
                for r in &p.reports {
                    let prefix = if multi { format!("{}/", r.experiment) } else { String::new() };
                    rows.extend(report_rows(r, &prefix));
                    record.verdicts.extend(r.verdicts.iter().cloned());
                }
                files.push((format!("{}.csv", e.name()), write_csv(&rows)?));
                let mut json = Vec::new();
                for r in &p.reports {
                    json.push(serde_json::from_slice::<serde_json::Value>(&write_report_json(r)?).expect("own JSON parses"));
                }
                files.push((format!("{}.json", e.name()), write_json(&json, "reports")?));
                files.extend(p.extra);
                record.pass = record.verdicts.iter().all(|v| v.pass);
            }
            Err(err) => {
                log::error!("experiment '{}' failed: {err}", e.name());
                record.error = Some(CliError::Experiment { name: e.name().into(), source: err }.to_string());
            }
        }
        record.files = files.iter().map(|f| f.0.clone()).collect();
        Ok((record, files))
    };
    let results: Vec<Result<(ExperimentRecord, Files)>> = if opts.parallel {
        selected.par_iter().map(run_one).collect()
    } else {
        selected.iter().map(run_one).collect()
    };
    let mut experiments = Vec::new();
    let mut inventory = Vec::new();
    let mut write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        inventory.push(FileEntry { path: name.into(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    };
    write("config.toml", cfg.text.as_bytes())?;
    for r in results {
        let (record, files) = r?;
        for (name, bytes) in &files {
            write(name, bytes)?;
        }
        experiments.push(record);
    }
    let pass = experiments.iter().all(|e| e.pass);
    let manifest = RunManifest {
        schema_version: c.schema_version,
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        config_file: "config.toml".into(),
        config_sha256: sha256_hex(cfg.text.as_bytes()),
        seed,
        engine_override: opts.engine,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        experiments,
        files: inventory,
        pass,
    };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, write_json(&manifest, "manifest")?).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

fn produce(e: &Experiment, ctx: &Context) -> evolab::Result<Produced> {
    match e {
        Experiment::CheckHypotheses(x) => check_hypotheses(x, ctx),
        Experiment::Measures(x) => measures(x, ctx),
        Experiment::Convergence(x) => convergence_exp(x, ctx),
        Experiment::GradientProbe(x) => gradient_probe(x, ctx),
        Experiment::SemigroupDecay(x) => semigroup_decay(x, ctx),
        Experiment::Uniqueness(x) => uniqueness(x, ctx),
        Experiment::LimitCompare(x) => limit_compare(x, ctx),
        Experiment::CrossValidate(x) => cross_validate(x, ctx),
    }
}

fn single(r: ConvergenceReport) -> Produced {
    Produced { reports: vec![r], extra: Vec::new() }
}

/// 41 times on [0, 20], 24 radii from 0.1 to 10, 8 directions.
pub fn default_plan(seed: u64) -> SamplingPlan {
    SamplingPlan {
        times: (0..=40).map(|k| k as f64 * 0.5).collect(),
        radii: (0..24).map(|k| 0.1 * 100f64.powf(k as f64 / 23.0)).collect(),
        directions_per_shell: 8,
        seed,
    }
}

fn check_hypotheses(x: &CheckHypotheses, ctx: &Context) -> evolab::Result<Produced> {
    let consts = ctx.preset.constants.ok_or_else(|| {
        evolab::Error::Config(format!("model '{}' has no hypothesis constants; set [models.{}.constants]", x.model, x.model))
    })?;
    let plan = x.plan.clone().unwrap_or_else(|| default_plan(ctx.seed));
    let scan = hypothesis_scan(&ctx.preset.model, &ctx.preset.lyapunov, &consts, &plan)?;
    let mut r = ConvergenceReport::new(format!("hypotheses:{}", x.model), Vec::new());
    r.constants.insert("samples".into(), scan.samples as f64);
    for check in &scan.checks {
        r.constants.insert(format!("{}:violations", check.name), check.violations as f64);
        r.verdicts.push(Verdict {
            criterion: format!("{} margin", check.name),
            tolerance: check.name.clone(),
            threshold: 0.0,
            observed: check.worst_margin,
            pass: check.pass,
        });
    }
    if !scan.evaluation_errors.is_empty() {
        r.warnings.extend(scan.evaluation_errors.iter().cloned());
        r.judge("evaluation errors", "evaluation_errors", 0.0, scan.evaluation_errors.len() as f64, false);
    }
    let extra = vec![(format!("{}-scan.json", ctx.name), json_bytes(&scan)?)];
    Ok(Produced { reports: vec![r], extra })
}

fn json_bytes<T: Serialize>(v: &T) -> evolab::Result<Vec<u8>> {
    write_json(v, "json").map_err(|e| evolab::Error::Io(e.to_string()))
}

fn density_matrix(series: &[evolab::DensityEstimate]) -> evolab::Result<Vec<u8>> {
    let Some(first) = series.first() else { return Ok(Vec::new()) };
    let g = first.grid;
    let mut out = String::new();
    let mut header: Vec<String> = (1..=g.dim).map(|k| format!("x{k}")).collect();
    header.extend(series.iter().map(|d| format!("t={:.16e}", d.time)));
    out.push_str(&header.join(","));
    out.push('\n');
    let mut p = [0.0; 2];
    for k in 0..g.len() {
        g.point(k, &mut p);
        let mut row: Vec<String> = p[..g.dim].iter().map(|v| format!("{v:.16e}")).collect();
        row.extend(series.iter().map(|d| format!("{:.16e}", d.values[k])));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out.into_bytes())
}

fn measures(x: &Measures, ctx: &Context) -> evolab::Result<Produced> {
    let model = &ctx.preset.model;
    let cfg = MeasureConfig { init: x.init.clone(), ..ctx.measure_cfg(x.particles, x.t_burn) };
    let series = estimate_measure_series(model, &x.times, &cfg, SeedLineage::new(ctx.sub_seed("measures")))?;
    let mut r = ConvergenceReport::new(format!("measures:{}", x.model), x.times.clone());
    for f in &x.functionals {
        let (v, se): (Vec<f64>, Vec<f64>) = series.iter().map(|m| measure::mean_functional(m, &|p| f.value(p))).unzip();
        r.push_series(&format!("mean:{}", f.label()), v, se)?;
    }
    let oracle = ctx.preset.ou_oracle();
    if let (Some(o), 1) = (&oracle, model.dim()) {
        let ks: Vec<f64> = series
            .iter()
            .map(|m| {
                let sd = o.measure_variance(m.time).sqrt();
                stats::ks_statistic(&m.ensemble.coordinate(0), |z| evolab::test_functions::normal_cdf(z / sd))
            })
            .collect();
        let worst = ks.iter().cloned().fold(0.0, f64::max);
        r.push_series("ks-vs-closed-form", ks, vec![0.0; series.len()])?;
        if let Some(tol) = x.ks_max {
            r.judge("KS distance to the closed-form law", "ks_max", tol, worst, false);
        }
    } else if x.ks_max.is_some() {
        return Err(evolab::Error::Config("ks_max needs a one-dimensional OU model".into()));
    }
    for row in measure::tightness_profile(&series, &x.tightness_radii) {
        r.constants.insert(format!("outside-mass(R={})", row.radius), row.outside_mass);
        r.constants.insert(format!("outside-mass-se(R={})", row.radius), row.se);
    }
    let mut extra = Vec::new();
    if let Some(DensitySpec { grid, estimator }) = &x.density {
        let grid = grid.build(model.dim())?;
        let dens: Vec<_> = series.iter().map(|m| measure::density_estimate(m, &grid, estimator)).collect::<evolab::Result<_>>()?;
        let floor = density_floor(&dens, x.floor_radius)?;
        let hist: Vec<_> = series
            .iter()
            .map(|m| measure::density_estimate(m, &grid, &evolab::Estimator::Histogram))
            .collect::<evolab::Result<_>>()?;
        let hist_floor = density_floor(&hist, x.floor_radius)?;
        r.push_series("density-mass", dens.iter().map(|d| d.mass()).collect(), vec![0.0; dens.len()])?;
        r.push_series("density-min-in-ball", dens.iter().map(|d| d.min_within(x.floor_radius).0).collect(), vec![0.0; dens.len()])?;
        r.constants.insert("density_floor".into(), floor.value);
        r.constants.insert("density_floor_t".into(), floor.time);
        for (k, v) in floor.x.iter().enumerate() {
            r.constants.insert(format!("density_floor_x{}", k + 1), *v);
        }
        r.constants.insert("density_floor_histogram".into(), hist_floor.value);
        if let Some(tol) = x.floor_min {
            r.judge("density floor on the ball", "floor_min", tol, floor.value, true);
        }
        extra.push((format!("{}-density.csv", ctx.name), density_matrix(&dens)?));
    }
    if let Some(k) = x.burn_in_se_multiple {
        let t = x.times[0];
        let check = measure::burn_in_check(model, t, &cfg, SeedLineage::new(ctx.sub_seed("burn-in")))?;
        r.constants.insert("burn_in_w1".into(), check.w1);
        r.constants.insert("burn_in_se".into(), check.se);
        r.judge("W1 between T_burn and 2 T_burn, in SEs", "burn_in_se_multiple", k, check.w1 / check.se, false);
    }
    if x.save_ensembles {
        for (i, m) in series.iter().enumerate() {
            let mut buf = Vec::new();
            snapshot::write_binary(&m.ensemble, &mut buf)?;
            extra.push((format!("{}-t{i}.ens", ctx.name), buf));
        }
    }
    Ok(Produced { reports: vec![r], extra })
}

fn engines(ctx: &Context, grid: &evolab::SpatialGrid, inner: usize, label: &str) -> Vec<(&'static str, GEngine)> {
    let fd = ("fd", GEngine::Fd { grid: *grid, cfg: ctx.fd });
    let mc = ("mc", GEngine::Mc { inner, cfg: ctx.integrator, seed: ctx.sub_seed(label) });
    match ctx.engine {
        EngineKind::Fd => vec![fd],
        EngineKind::Mc => vec![mc],
        EngineKind::Both => vec![fd, mc],
    }
}

fn convergence_exp(x: &Convergence, ctx: &Context) -> evolab::Result<Produced> {
    let model = &ctx.preset.model;
    let grid = x.grid.build(model.dim().min(2))?;
    let cfg = ctx.measure_cfg(x.particles, x.t_burn);
    let mut reports = Vec::new();
    for (i, f) in x.functions.iter().enumerate() {
        let settings = ProbeSettings { p: x.p, radius: x.radius, bootstrap_reps: x.bootstrap_reps, outer_cap: x.outer_cap, seed: ctx.sub_seed(&format!("f{i}")) };
        let mut per_engine = Vec::new();
        for (label, engine) in engines(ctx, &grid, x.inner, &format!("mc{i}")) {
            let mut r = convergence::convergence_curve(model, f, x.s, &x.times, &engine, &cfg, &settings, &x.tolerances)?;
            r.experiment = format!("{}[{label}]", f.label());
            per_engine.push(r);
        }
        if let [a, b] = per_engine.as_slice() {
            let (ha, hb) = (a.series("h").expect("h"), b.series("h").expect("h"));
            let z = ha
                .values
                .iter()
                .zip(&hb.values)
                .zip(ha.se.iter().zip(&hb.se))
                .map(|((va, vb), (sa, sb))| if va == vb { 0.0 } else { (va - vb).abs() / (sa * sa + sb * sb).sqrt() })
                .fold(0.0, f64::max);
            let mut agree = ConvergenceReport::new(format!("{}[fd-vs-mc]", f.label()), Vec::new());
            agree.judge("max |h_fd - h_mc| in combined SEs", "agreement_se_multiple", x.agreement_se_multiple, z, false);
            per_engine.push(agree);
        }
        reports.extend(per_engine);
    }
    Ok(Produced { reports, extra: Vec::new() })
}

fn gradient_probe(x: &GradientProbe, ctx: &Context) -> evolab::Result<Produced> {
    let model = &ctx.preset.model;
    let grid = x.grid.build(model.dim())?;
    let fd = FdConfig { dt: x.dt.unwrap_or(ctx.fd.dt), ..ctx.fd };
    Ok(single(convergence::gradient_bound_probe(model, &x.function, x.s, &x.times, x.p, &grid, &fd, &x.tolerances)?))
}

fn semigroup_decay(x: &SemigroupDecay, ctx: &Context) -> evolab::Result<Produced> {
    let model = &ctx.preset.model;
    let grid = x.grid.build(model.dim())?;
    let window = SpaceTimeWindowMeasure::build(
        model,
        x.t0,
        x.t1,
        x.slices,
        &ctx.measure_cfg(x.particles, x.t_burn),
        SeedLineage::new(ctx.sub_seed("window")),
    )?;
    let mut r = convergence::semigroup_gradient_decay(model, &window, &x.function, &x.lags, x.p, &grid, &ctx.fd, x.history_start)?;
    let s = r.series("grad-norm").expect("series").clone();
    if s.values.len() >= 2 {
        r.judge("gradient norm nonincreasing", "monotone_band", x.monotone_band, convergence::worst_increase(&s.values, &s.se), false);
    }
    // the window's own consistency: ψ-weighted infinitesimal invariance for the same test function
    if x.function.jet(&vec![0.0; model.dim()]).is_ok() {
        let bump = TimeBump { a: x.t0, b: x.t1 };
        let res = measure::infinitesimal_invariance_residual(model, &window, &bump, &x.function)?;
        r.constants.insert("infinitesimal_invariance_residual".into(), res.value);
        r.constants.insert("infinitesimal_invariance_se".into(), res.se);
    }
    Ok(single(r))
}

fn uniqueness(x: &Uniqueness, ctx: &Context) -> evolab::Result<Produced> {
    let cfg = ctx.measure_cfg(x.particles, x.t_burn);
    Ok(single(convergence::uniqueness_probe(&ctx.preset.model, &x.times, &x.init_a, &x.init_b, &cfg, ctx.sub_seed("families"), &x.tolerances)?))
}

fn limit_compare(x: &LimitCompare, ctx: &Context) -> evolab::Result<Produced> {
    let model = &ctx.preset.model;
    let spec = x.density.clone().unwrap_or(DensitySpec { grid: Default::default(), estimator: evolab::Estimator::Kernel { bandwidth: None } });
    let grid = spec.grid.build(model.dim())?;
    let settings = ProbeSettings { p: x.p, radius: x.radius, bootstrap_reps: x.bootstrap_reps, seed: ctx.sub_seed("limit"), ..Default::default() };
    let (dens, dev) = convergence::limit_density_comparison(
        model,
        &x.times,
        &grid,
        &spec.estimator,
        &ctx.measure_cfg(x.particles, x.t_burn),
        &x.function,
        x.s,
        &x.lags,
        &ctx.fd,
        &settings,
        &x.tolerances,
    )?;
    Ok(Produced { reports: vec![dens, dev], extra: Vec::new() })
}

fn cross_validate(x: &CrossValidate, ctx: &Context) -> evolab::Result<Produced> {
    let model = &ctx.preset.model;
    let grid = x.grid.build(model.dim())?;
    let points: Vec<f64> = x.points.concat();
    let fd = GEngine::Fd { grid, cfg: ctx.fd };
    let mut reports = Vec::new();
    for (i, f) in x.functions.iter().enumerate() {
        let mc = GEngine::Mc { inner: x.inner, cfg: ctx.integrator, seed: ctx.sub_seed(&format!("cross{i}")) };
        let rows = convergence::cross_validate(model, f, x.s, x.t, &points, &fd, &mc)?;
        let mut r = ConvergenceReport::new(f.label(), Vec::new());
        let mut worst = 0.0f64;
        for (k, row) in rows.iter().enumerate() {
            r.constants.insert(format!("p{k}:fd"), row.fd);
            r.constants.insert(format!("p{k}:mc"), row.mc);
            r.constants.insert(format!("p{k}:se"), row.se);
            worst = worst.max(row.z());
        }
        r.judge("max |fd - mc| in SEs", "se_multiple", x.se_multiple, worst, false);
        reports.push(r);
    }
    Ok(Produced { reports, extra: Vec::new() })
}

/// Reads a manifest back.
pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Emit { what: "manifest".into(), message: e.to_string() })
}

use std::fmt;
use std::io::{self, Write};

use serde_json::{json, Value};
use tcvolterra::bsde::{solve_backward, BsdeSpec, DriverArgs};
use tcvolterra::condexp::{Feature, FeatureMap, Flow};
use tcvolterra::control::{
    check_sufficient, lq::LqDynamics, lq::LqObjective, necessary_conditions, perturbation_gradient, solve_adjoint,
    Adjoint, ControlGrid, Hamiltonian, MpOptions,
};
use tcvolterra::ensemble::Ensemble;
use tcvolterra::grid::{MarkSet, PartitionScheme};
use tcvolterra::harvest::{self, HarvestModel};
use tcvolterra::naderiv::{duality_check, relative_l2_error, NaEstimator};
use tcvolterra::noise::check_conditional_moments;
use tcvolterra::stats::Estimate;
use tcvolterra::volterra::models::{ExponentialKernel, LinearModel};
use tcvolterra::volterra::{
    solve_differential_ensemble, solve_direct_ensemble, solve_picard, write_states_csv, ControlKind, ControlPolicy,
    StatePath, VolterraModel,
};
use tcvolterra::Error;

use crate::config::{ControlConfig, ExperimentConfig, ModelConfig, NaTarget};
use crate::output::{sha256_hex, Artifacts, Manifest};
use crate::Command;

const PICARD_ITERATIONS: usize = 5;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(Error),
    Io(io::Error),
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Numerical(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io: {e}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Config(m),
            Error::Io(e) => CliError::Io(e),
            other => CliError::Numerical(other),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// What a command reports back: a summary and whether its checks passed.
struct Outcome {
    summary: Value,
    failures: Vec<String>,
}

pub fn run(command: Command, cfg: &ExperimentConfig, config_text: &str, quiet: bool) -> CliResult<()> {
    let mut art = Artifacts::new(&cfg.output.dir)?;
    let outcome = match command {
        Command::Simulate => simulate(cfg, &mut art)?,
        Command::Forward => forward(cfg, &mut art)?,
        Command::Naderiv => naderiv(cfg, &mut art)?,
        Command::Bsde => bsde(cfg, &mut art)?,
        Command::CheckMp => check_mp(cfg, &mut art)?,
        Command::Harvest => run_harvest(cfg, &mut art)?,
    };
    art.write_json("summary.json", &outcome.summary)?;
    let mut files = art.files().to_vec();
    files.push("manifest.json".into());
    files.sort();
    let manifest = Manifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha256_hex(config_text),
        seed: cfg.ensemble.seed,
        n_paths: cfg.ensemble.paths,
        output_dir: cfg.output.dir.display().to_string(),
        files,
        config: config_text,
    };
    art.write_json("manifest.json", &manifest)?;
    if !quiet {
        let mut out = io::stdout().lock();
        writeln!(out, "{}: {}", command.name(), serde_json::to_string(&outcome.summary).unwrap_or_default())?;
    }
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(outcome.failures.join("; ")))
    }
}

fn ensemble(cfg: &ExperimentConfig) -> CliResult<Ensemble> {
    Ok(Ensemble::simulate(cfg.time_grid()?, cfg.mark_grid()?, &cfg.rates, cfg.handle()?)?)
}

fn model(cfg: &ExperimentConfig) -> CliResult<&ModelConfig> {
    cfg.model.as_ref().ok_or_else(|| CliError::Config("this command needs a [model] section".into()))
}

fn policy(cfg: &ExperimentConfig) -> ControlPolicy {
    match cfg.control {
        ControlConfig::Constant { value } => ControlPolicy::constant(value),
    }
}

fn dyn_model(m: &ModelConfig) -> Box<dyn VolterraModel> {
    match *m {
        ModelConfig::Linear { x0, drift, noise } => Box::new(LinearModel { x0, drift_coef: drift, noise_coef: noise }),
        ModelConfig::ExponentialKernel { x0, rate } => Box::new(ExponentialKernel { x0, rate }),
        ModelConfig::Lq { x0, vol, .. } => Box::new(LqDynamics { x0, vol }),
        ModelConfig::Harvest(h) => Box::new(h),
    }
}

fn g_features(cfg: &ExperimentConfig, features: Vec<Feature>) -> FeatureMap {
    cfg.condexp.apply(FeatureMap::new(Flow::G, cfg.condexp.degree, features))
}

/// JSON number, or its string form when not finite.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

fn sup_gap(a: &StatePath, b: &StatePath) -> f64 {
    a.x.iter().zip(&b.x).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn simulate(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<Outcome> {
    let ens = ensemble(cfg)?;
    let partition = PartitionScheme::build(&ens.grid, &ens.marks, cfg.naderiv.level)?;
    let report = check_conditional_moments(&ens.rates, &ens.noise, &ens.marks, &partition, cfg.naderiv.strata)?;
    report.write_csv(art.create("moments.csv")?)?;
    let mut w = csv::Writer::from_writer(art.create("pairs.csv")?);
    w.write_record(["first", "second", "mean", "z"]).map_err(Error::from)?;
    for p in &report.pairs {
        w.write_record([p.first.to_string(), p.second.to_string(), p.mean.to_string(), p.z.to_string()])
            .map_err(Error::from)?;
    }
    w.flush()?;
    let m = ens.grid.n_steps();
    let b_t: Vec<f64> = ens.noise.iter().map(|n| n.b_running(m)).collect();
    let lambda_t = ens.rates.iter().map(|r| r.cum_b[m]).sum::<f64>() / ens.n_paths() as f64;
    let max_z = report.max_abs_z();
    let mut failures = Vec::new();
    if !report.insufficient_sample && !(max_z < 4.0) {
        failures.push(format!("moment z-score {max_z} >= 4"));
    }
    Ok(Outcome {
        summary: json!({
            "n_paths": ens.n_paths(),
            "cells": report.cells.len(),
            "max_abs_z": max_z,
            "insufficient_sample": report.insufficient_sample,
            "var_b_terminal": tcvolterra::stats::variance(&b_t),
            "mean_lambda_b_terminal": lambda_t,
        }),
        failures,
    })
}

fn forward(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<Outcome> {
    let spec = model(cfg)?;
    let ens = ensemble(cfg)?;
    let m = dyn_model(spec);
    let policy = match spec {
        ModelConfig::Harvest(h) => h.policy(ControlKind::Constant(match cfg.control {
            ControlConfig::Constant { value } => value,
        })),
        _ => policy(cfg),
    };
    let direct = solve_direct_ensemble(m.as_ref(), &policy, &ens)?;
    let differential = solve_differential_ensemble(m.as_ref(), &policy, &ens)?;
    let (picard, report) = solve_picard(m.as_ref(), &policy, &ens, PICARD_ITERATIONS, 0.0)?;
    write_states_csv(&ens, &direct, art.create("states.csv")?)?;
    let log_euler = match spec {
        ModelConfig::Harvest(h) => Some(harvest::forward_ensemble(h, &policy, &ens)?),
        _ => None,
    };
    let n = ens.n_paths() as f64;
    let mean_at = |s: &[StatePath], i: usize| s.iter().map(|p| p.x[i]).sum::<f64>() / n;
    let mut w = csv::Writer::from_writer(art.create("schemes.csv")?);
    let mut header = vec!["t", "mean_direct", "mean_differential", "mean_picard"];
    if log_euler.is_some() {
        header.push("mean_log_euler");
    }
    w.write_record(&header).map_err(Error::from)?;
    for i in 0..=ens.grid.n_steps() {
        let mut row = vec![
            ens.grid.t(i).to_string(),
            mean_at(&direct, i).to_string(),
            mean_at(&differential, i).to_string(),
            mean_at(&picard, i).to_string(),
        ];
        if let Some(le) = &log_euler {
            row.push(mean_at(le, i).to_string());
        }
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(art.create("picard.csv")?);
    w.write_record(["iteration", "difference"]).map_err(Error::from)?;
    for (k, d) in report.differences.iter().enumerate() {
        w.write_record([(k + 1).to_string(), d.to_string()]).map_err(Error::from)?;
    }
    w.flush()?;
    let gap_diff = direct.iter().zip(&differential).map(|(a, b)| sup_gap(a, b)).fold(0.0, f64::max);
    let gap_picard = direct.iter().zip(&picard).map(|(a, b)| sup_gap(a, b)).fold(0.0, f64::max);
    Ok(Outcome {
        summary: json!({
            "n_paths": ens.n_paths(),
            "sup_gap_differential": gap_diff,
            "sup_gap_picard": gap_picard,
            "picard_differences": report.differences,
            "convolution_free": m.convolution_free(),
        }),
        failures: Vec::new(),
    })
}

fn naderiv(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<Outcome> {
    let ens = ensemble(cfg)?;
    let m = ens.grid.n_steps();
    let xi: Vec<f64> = (0..ens.n_paths())
        .map(|k| match cfg.naderiv.target {
            NaTarget::BrownianSquared => ens.noise[k].b_running(m).powi(2),
            NaTarget::LambdaTotal => ens.rates[k].cum_b[m] + ens.rates[k].cum_h[m],
            NaTarget::Brownian => ens.noise[k].b_running(m),
        })
        .collect();
    let map = g_features(cfg, vec![Feature::BrownianRunning, Feature::JumpRunning]);
    let mut est = NaEstimator::new(&ens, map)?;
    let mut errors = Vec::new();
    let mut field = None;
    for level in 1..=cfg.naderiv.level {
        let f = est.estimate(&xi, level)?;
        let rec = est.reconstruct(&xi, &f)?;
        errors.push(relative_l2_error(&rec, &xi));
        field = Some(f);
    }
    let field = field.ok_or_else(|| CliError::Config("naderiv.level must be >= 1".into()))?;
    field.write_csv(art.create("field.csv")?)?;
    let mut w = csv::Writer::from_writer(art.create("representation.csv")?);
    w.write_record(["level", "relative_error"]).map_err(Error::from)?;
    for (k, e) in errors.iter().enumerate() {
        w.write_record([(k + 1).to_string(), e.to_string()]).map_err(Error::from)?;
    }
    w.flush()?;
    let phi = |_i: usize, slot: MarkSet| if slot == MarkSet::Gauss { 1.0 } else { 0.0 };
    let dual = duality_check(&xi, phi, &field, &ens);
    let mut w = csv::Writer::from_writer(art.create("duality.csv")?);
    w.write_record(["lhs", "rhs", "se", "z"]).map_err(Error::from)?;
    w.write_record([dual.lhs.to_string(), dual.rhs.to_string(), dual.se.to_string(), dual.z.to_string()])
        .map_err(Error::from)?;
    w.flush()?;
    let mut failures = Vec::new();
    if !(dual.z.abs() <= 3.0) {
        failures.push(format!("duality z = {}", dual.z));
    }
    Ok(Outcome {
        summary: json!({
            "n_paths": ens.n_paths(),
            "level": cfg.naderiv.level,
            "relative_errors": errors,
            "duality_z": dual.z,
            "floor_hits": field.floor_hits,
        }),
        failures,
    })
}

fn bsde(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<Outcome> {
    let spec = model(cfg)?;
    let ens = ensemble(cfg)?;
    let m = dyn_model(spec);
    let states = solve_direct_ensemble(m.as_ref(), &policy(cfg), &ens)?;
    let b = &cfg.bsde;
    let terminal = states.iter().map(|s| b.scale * s.x[s.x.len() - 1] + b.shift).collect();
    let driver = |a: &DriverArgs<'_>| b.a * a.p + b.c;
    let features = g_features(cfg, vec![Feature::State, Feature::BrownianRunning, Feature::CumB]);
    let sol = solve_backward(&BsdeSpec { terminal, driver: &driver, features, driver_input: b.driver_input }, &ens, Some(&states))?;
    sol.write_csv(&ens, art.create("bsde.csv")?)?;
    let p0 = Estimate::from_samples(&sol.p[0]);
    let max_condition = sol.diagnostics.iter().map(|d| d.condition).fold(0.0, f64::max);
    Ok(Outcome {
        summary: json!({
            "n_paths": ens.n_paths(),
            "p0_mean": p0.mean,
            "p0_sd": p0.se * (p0.n as f64).sqrt(),
            "floor_hits": sol.floor_hits(),
            "max_condition": num(max_condition),
        }),
        failures: Vec::new(),
    })
}

fn mp_options(cfg: &ExperimentConfig, lower: f64, upper: f64) -> MpOptions {
    MpOptions {
        controls: ControlGrid { lower, upper, points: cfg.mp.u_points },
        tol_max: cfg.mp.tol_max,
        tol_conc: cfg.mp.tol_conc,
        probe_spread: cfg.mp.probe_spread,
        max_paths: cfg.mp.max_paths,
    }
}

fn check_mp(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<Outcome> {
    let ModelConfig::Lq { x0, vol, cost } = *model(cfg)? else {
        return Err(CliError::Config("check-mp supports model.kind = \"lq\"; use `harvest` for the harvesting model".into()));
    };
    let ens = ensemble(cfg)?;
    let dynamics = LqDynamics { x0, vol };
    let objective = LqObjective { cost };
    let mp = &cfg.mp;
    let policy = ControlPolicy::new(ControlKind::Constant(mp.candidate), mp.u_lower, mp.u_upper)?;
    let states = solve_direct_ensemble(&dynamics, &policy, &ens)?;
    let core = vec![Feature::State, Feature::BrownianRunning];
    let sol = solve_adjoint(&dynamics, &objective, &ens, &states, g_features(cfg, core.clone()), cfg.bsde.driver_input)?;
    let adjoint = Adjoint::from_bsde(&sol).project(&g_features(cfg, core), &ens, Some(&states))?;
    let ham = Hamiltonian::new(&dynamics, &objective, &ens, &states, &adjoint)?;
    let report = check_sufficient(&ham, &mp_options(cfg, mp.u_lower, mp.u_upper));
    report.write_csv(art.create("mp.csv")?)?;
    let grad = perturbation_gradient(&ham, &policy, &mp.perturbation(), mp.eps)?;
    let mut w = csv::Writer::from_writer(art.create("gradient.csv")?);
    w.write_record(["route", "mean", "se"]).map_err(Error::from)?;
    for (name, e) in [
        ("finite_difference", grad.finite_difference),
        ("variation", grad.variation),
        ("hamiltonian", grad.hamiltonian),
    ] {
        w.write_record([name.to_string(), e.mean.to_string(), e.se.to_string()]).map_err(Error::from)?;
    }
    w.flush()?;
    let mut failures = Vec::new();
    if !report.verdict {
        failures.push(format!("sufficient conditions not met, max gap {}", report.max_gap));
    }
    if !grad.agree(3.0, 1e-9) {
        failures.push("gradient routes disagree".into());
    }
    Ok(Outcome {
        summary: json!({
            "n_paths": ens.n_paths(),
            "max_gap": report.max_gap,
            "maximal": report.maximal,
            "terminal_concave": report.terminal_concave,
            "hamiltonian_concave": report.hamiltonian_concave,
            "gradient": [grad.finite_difference.mean, grad.variation.mean, grad.hamiltonian.mean],
            "gradient_gaps": grad.differences.iter().map(|d| [num(d.mean), num(d.se)]).collect::<Vec<_>>(),
        }),
        failures,
    })
}

/// Candidate, constant-control scan, both adjoint routes and the
/// maximum-principle reports for the harvesting model.
fn run_harvest(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<Outcome> {
    let ModelConfig::Harvest(model) = *model(cfg)? else {
        return Err(CliError::Config("harvest needs model.kind = \"harvest\"".into()));
    };
    let model: HarvestModel = model;
    let ens = ensemble(cfg)?;
    let sol = harvest::solve_candidate(&model, &ens, &cfg.harvest.options(cfg.condexp.degree))?;
    sol.write_csv(art.create("candidate.csv")?)?;
    let cand = sol.policy(&model);
    let j_hat = harvest::evaluate_j(&model, &cand, &ens)?;
    let scan = harvest::constant_scan(&model, &cand, &ens, cfg.harvest.scan_points)?;
    harvest::write_scan_csv(&scan, art.create("scan.csv")?)?;
    let beaten: Vec<f64> = scan.iter().filter(|(_, _, d)| d.mean < -3.0 * d.se).map(|(u, _, _)| *u).collect();

    let states = harvest::forward_ensemble(&model, &cand, &ens)?;
    let map = harvest::default_features(cfg.condexp.degree);
    let adj = harvest::adjoint_bsde(&model, &ens, &states, &map, cfg.bsde.driver_input)?;
    let adjoint = Adjoint::from_bsde(&adj).project(&map, &ens, Some(&states))?;
    let objective = model.objective(ens.grid.horizon());
    let ham = Hamiltonian::new(&model, &objective, &ens, &states, &adjoint)?;
    let necessary = necessary_conditions(&ham, 0.0, model.u_max, 3.0);
    necessary.write_csv(art.create("stationarity.csv")?)?;
    let mp = check_sufficient(&ham, &mp_options(cfg, 0.0, model.u_max));
    mp.write_csv(art.create("mp.csv")?)?;

    let mut failures = Vec::new();
    if !beaten.is_empty() {
        failures.push(format!("candidate beaten by constant controls {beaten:?}"));
    }
    Ok(Outcome {
        summary: json!({
            "n_paths": ens.n_paths(),
            "iterations": sol.iterations,
            "converged": sol.converged,
            "sup_residual": sol.sup_residual,
            "target_sup": sol.target_sup,
            "route_gap": sol.route_gap,
            "j_candidate": j_hat.mean,
            "j_candidate_se": j_hat.se,
            "best_constant": scan.iter().map(|(u, j, _)| (j.mean, *u)).fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a }).1,
            "interior_points": necessary.interior_points,
            "interior_ok": necessary.interior_ok,
            "boundary_ok": necessary.boundary_ok,
            "mp_max_gap": mp.max_gap,
            "min_tau": sol.tau.iter().copied().min().unwrap_or(0),
        }),
        failures,
    })
}

//! Config-driven batch runner: subcommands simulate, graf-check, limits and
//! estimates, each writing CSV/JSON/binary artifacts plus a manifest into
//! the output directory.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime guard abort,
//! 4 non-convergence (diagnostic completed but flag false).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::asymptotics::{
    completeness_report, cook_wave_adjoint, fourier_oracle_sourcefree, intermediate_limit,
    CookObserver,
};
use crate::detectors::{two_detector_sweep, Cutoff2P};
use crate::dynamics::{Propagator2P, SourceModel, StepObserver, Trajectory};
use crate::error::{Error, Result};
use crate::graf::{build, choose_params, hessian_check, GrafBuildOptions};
use crate::output::{
    write_field, write_graf_table, write_json, write_series_csv, write_step_log_csv,
    RunManifest,
};
use crate::propest::{
    graf_observable, large_velocity_series, monitor_a1, monitor_a3, phase_space_series,
    transport_weighted_observable, ObservableContext,
};
use crate::scenario::Scenario;

#[derive(Debug, Parser)]
#[command(
    name = "dispersim",
    about = "Spectral two-particle dispersive scattering engine",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the evolution described by a scenario and persist the trajectory.
    Simulate(CommonArgs),
    /// Build the convex localization function and verify its Hessian bound.
    GrafCheck(CommonArgs),
    /// Extract asymptotic limits (intermediate limit, wave operator,
    /// completeness comparison).
    Limits(CommonArgs),
    /// Run the propagation-estimate diagnostics and monitors.
    Estimates(CommonArgs),
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Bound the worker-thread count.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Scenario overrides as KEY.PATH=VALUE.
    #[arg(long = "override")]
    pub overrides: Vec<String>,
}

pub fn main_entry() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args).map(|_| ()),
        Command::GrafCheck(args) => cmd_graf_check(&args),
        Command::Limits(args) => cmd_limits(&args),
        Command::Estimates(args) => cmd_estimates(&args),
    }
}

fn setup(args: &CommonArgs) -> Result<(Scenario, RunManifest)> {
    if let Some(jobs) = args.jobs {
        // best effort: the global pool may already exist
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    std::fs::create_dir_all(&args.out)?;
    let scenario = Scenario::from_file_with_overrides(&args.scenario, &args.overrides)?;
    let echo = scenario.to_toml_string()?;
    let manifest = RunManifest::new(echo, scenario.warnings());
    Ok((scenario, manifest))
}

/// Shared driver: build the engine, run the trajectory, persist the
/// step log and snapshots.
struct RunProducts {
    engine: Propagator2P,
    traj: Trajectory,
    cook: Option<crate::asymptotics::WaveOperatorResult>,
}

fn drive(scenario: &Scenario, manifest: &mut RunManifest, out: &Path, with_cook: bool) -> Result<RunProducts> {
    let grid = scenario.grid_spec()?;
    manifest.set_grid(&grid);
    let engine = Propagator2P::new(&grid, scenario.mass)?;
    let initial = scenario.initial_field(&grid)?;
    let source = scenario.source_model();

    let mut cook_obs = match (&source, with_cook) {
        (SourceModel::PairPotential(v), true) => Some(CookObserver::new(&engine, v)),
        _ => None,
    };
    let traj = {
        let mut observers: Vec<&mut dyn StepObserver> = Vec::new();
        if let Some(c) = cook_obs.as_mut() {
            observers.push(c);
        }
        engine.run(&initial, &source, &scenario.evolution, &mut observers)?
    };
    let cook = match cook_obs {
        Some(c) => Some(c.finish(&engine, &traj)?),
        None => None,
    };

    let step_path = out.join("steps.csv");
    write_step_log_csv(&step_path, &traj.step_log)?;
    manifest.record(&step_path);
    // persist first and final snapshots (full trajectory fields stay in
    // memory; the scalar log covers every step)
    let (t0, u0) = &traj.snapshots[0];
    let first = out.join(format!("field_t{t0:.3}.field"));
    write_field(&first, u0)?;
    manifest.record(&first);
    let (tf, uf) = traj.snapshots.last().unwrap();
    let last = out.join(format!("field_t{tf:.3}.field"));
    write_field(&last, uf)?;
    manifest.record(&last);

    Ok(RunProducts { engine, traj, cook })
}

fn finalize(manifest: &mut RunManifest, out: &Path, started: Instant, steps: u64) -> Result<()> {
    manifest.steps_taken = steps;
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok(())
}

pub fn cmd_simulate(args: &CommonArgs) -> Result<PathBuf> {
    let started = Instant::now();
    let (scenario, mut manifest) = setup(args)?;
    let products = drive(&scenario, &mut manifest, &args.out, false)?;
    // detector sweep when detectors are configured
    if let Some((h1, h2)) = scenario.detector_cutoffs()? {
        let sweep = two_detector_sweep(&h1, &h2, &products.traj.snapshots)?;
        let path = args.out.join("two_detector_sweep.csv");
        write_series_csv(&path, &sweep)?;
        manifest.record(&path);
    }
    let steps = products.traj.steps_taken;
    finalize(&mut manifest, &args.out, started, steps)?;
    Ok(args.out.clone())
}

#[derive(Serialize)]
struct GrafCheckReport {
    params: crate::graf::GrafParams,
    report: crate::graf::HessianReport,
    min_g_on_region: f64,
}

pub fn cmd_graf_check(args: &CommonArgs) -> Result<()> {
    let started = Instant::now();
    let (scenario, mut manifest) = setup(args)?;
    let Some((k, defaults)) = scenario.graf_region()? else {
        return Err(Error::validation("scenario has no [graf] section"));
    };
    let params = choose_params(&k, &defaults)?;
    let cells = scenario
        .graf
        .as_ref()
        .map(|g| g.cells_per_mollifier_radius)
        .unwrap_or(4);
    let opts = GrafBuildOptions {
        cells_per_mollifier_radius: cells,
        ..Default::default()
    };
    let gf = build(&params, &opts)?;
    let report = hessian_check(&gf, &k, &opts)?;
    let min_g = crate::graf::min_g_on_region(&params, &k, 401);
    let json_path = args.out.join("graf_report.json");
    write_json(
        &json_path,
        &GrafCheckReport {
            params: params.clone(),
            report,
            min_g_on_region: min_g,
        },
    )?;
    manifest.record(&json_path);
    let table_path = args.out.join("graf_table.csv");
    // keep the audit table around a few hundred thousand rows
    let stride = (gf.grid.n_axis / 512).max(1);
    write_graf_table(&table_path, &gf, stride)?;
    manifest.record(&table_path);
    finalize(&mut manifest, &args.out, started, 0)?;
    Ok(())
}

#[derive(Serialize)]
struct LimitsReport {
    limit: crate::asymptotics::LimitSummary,
    wave_operator: Option<crate::asymptotics::WaveOperatorSummary>,
    completeness: Option<crate::asymptotics::CompletenessReport>,
    oracle_residual: Option<f64>,
}

pub fn cmd_limits(args: &CommonArgs) -> Result<()> {
    let started = Instant::now();
    let (scenario, mut manifest) = setup(args)?;
    let Some((h1, h2)) = scenario.detector_cutoffs()? else {
        return Err(Error::validation("limits need a [detectors] section"));
    };
    let tol = scenario
        .limits
        .as_ref()
        .map(|l| l.tolerance)
        .unwrap_or(1e-2);
    let products = drive(&scenario, &mut manifest, &args.out, true)?;
    let cut = Cutoff2P::product(h1.clone(), h2.clone())?;
    let limit = intermediate_limit(&products.engine, &products.traj, &cut, tol)?;

    let mut oracle_residual = None;
    let mut wave = None;
    let mut completeness = None;
    match &products.traj.source {
        SourceModel::None => {
            // compare against the Fourier-side oracle applied to the
            // t = 0 extrapolated data
            let (t0, u0) = &products.traj.snapshots[0];
            let mut w0 = crate::grid::to_space(u0, crate::grid::Space::Position);
            products.engine.step_free(&mut w0, -t0)?;
            let oracle = fourier_oracle_sourcefree(&w0, &h1, &h2, scenario.mass)?;
            let resid = crate::grid::l2_distance(&limit.final_vector, &oracle)?
                / oracle.l2_norm().max(1e-300);
            oracle_residual = Some(resid);
        }
        SourceModel::PairPotential(_) => {
            let cook = match products.cook {
                Some(c) => c,
                None => cook_wave_adjoint(&products.engine, &products.traj, tol)?,
            };
            let comp = completeness_report(
                &products.engine,
                &products.traj,
                &h1,
                &h2,
                &cook,
                &limit,
            )?;
            wave = Some(cook.summary());
            completeness = Some(comp);
        }
        SourceModel::Tabulated(_) => {}
    }

    let fplus_path = args.out.join("intermediate_limit.field");
    write_field(&fplus_path, &limit.final_vector)?;
    manifest.record(&fplus_path);
    let report = LimitsReport {
        limit: limit.summary(),
        wave_operator: wave,
        completeness,
        oracle_residual,
    };
    let json_path = args.out.join("limits_report.json");
    write_json(&json_path, &report)?;
    manifest.record(&json_path);
    let steps = products.traj.steps_taken;
    finalize(&mut manifest, &args.out, started, steps)?;
    if !limit.converged {
        return Err(Error::NotConverged(format!(
            "intermediate limit Cauchy tail {:?} above tolerance {tol}",
            limit.cauchy_tail.last()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimatesReport {
    lv_total: f64,
    lv_tail_fraction: f64,
    ps_total: f64,
    ps_tail_fraction: f64,
    ps_free_slope: Option<f64>,
    ordering_discrepancy_slope: Option<f64>,
    monitor_a1: Option<crate::propest::MonitorA1Report>,
    monitor_a3_limit: Option<f64>,
    monitor_a3_tail: Option<f64>,
}

pub fn cmd_estimates(args: &CommonArgs) -> Result<()> {
    let started = Instant::now();
    let (scenario, mut manifest) = setup(args)?;
    let Some(es) = scenario.estimates.clone() else {
        return Err(Error::validation("scenario has no [estimates] section"));
    };
    let products = drive(&scenario, &mut manifest, &args.out, false)?;
    let grid = products.engine.grid.clone();
    let ctx = ObservableContext::new(&grid, scenario.mass)?;

    let lv = large_velocity_series(&products.traj, es.lv_r, es.lv_rp, es.lv_eps)?;
    let lv_path = args.out.join("large_velocity.csv");
    write_series_csv(&lv_path, &lv)?;
    manifest.record(&lv_path);

    let (k, defaults) = scenario
        .graf_region()?
        .ok_or_else(|| Error::validation("estimates need a [graf] section for K"))?;
    let ps = phase_space_series(&ctx, &products.traj, &k)?;
    let ps_path = args.out.join("phase_space.csv");
    write_series_csv(&ps_path, &ps.series)?;
    manifest.record(&ps_path);
    let disc_path = args.out.join("ordering_discrepancy.csv");
    write_series_csv(&disc_path, &ps.ordering_discrepancy)?;
    manifest.record(&disc_path);

    let mut rep = EstimatesReport {
        lv_total: lv.total(),
        lv_tail_fraction: lv.tail_fraction(1.0),
        ps_total: ps.series.total(),
        ps_tail_fraction: ps.series.tail_fraction(1.0),
        ps_free_slope: ps
            .series
            .fitted_loglog_slope(10.0, products.traj.final_time() / 4.0, 1e-300),
        ordering_discrepancy_slope: ps.discrepancy_slope,
        monitor_a1: None,
        monitor_a3_limit: None,
        monitor_a3_tail: None,
    };

    if es.monitors {
        let params = choose_params(&k, &defaults)?;
        let opts = GrafBuildOptions::default();
        let gf = Arc::new(build(&params, &opts)?);
        let m_graf = graf_observable(&gf, &grid)?;
        let b = transport_weighted_observable(&k)?;
        let a1 = monitor_a1(&ctx, &products.engine, &m_graf, &products.traj, &b, &[])?;
        rep.monitor_a1 = Some(a1);
        let m_e63 = transport_weighted_observable(&k)?;
        let a3 = monitor_a3(&ctx, &m_e63, &products.traj)?;
        rep.monitor_a3_limit = Some(a3.limit_estimate);
        rep.monitor_a3_tail = Some(a3.cauchy_tail);
        let a3_path = args.out.join("monitor_a3.csv");
        crate::output::write_xy_csv(
            &a3_path,
            "t,value",
            &a3.times
                .iter()
                .cloned()
                .zip(a3.values.iter().cloned())
                .collect::<Vec<_>>(),
        )?;
        manifest.record(&a3_path);
    }

    let json_path = args.out.join("estimates_report.json");
    write_json(&json_path, &rep)?;
    manifest.record(&json_path);
    let steps = products.traj.steps_taken;
    finalize(&mut manifest, &args.out, started, steps)?;
    Ok(())
}

//! The six pipeline commands. Each one reads the loaded config, drives
//! the core crate, and writes plot-ready CSV (and JSON where a scalar
//! summary is more natural) with the provenance header.

use crate::config::Loaded;
use crate::output::{fmt, write_json, write_with_header};
use anyhow::{Context, Result};
use metastab_core::resolvent::{self, GeneratorMatrix, ReducedGenerator};
use metastab_core::simulate::{self, PerturbedSystem};
use metastab_core::stability;
use metastab_core::ulam;
use metastab_core::wells::{build_wells, WellStructure};
use metastab_core::WellId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::fmt::Write as _;

/// Points per grid cell when resolving the perturbed transfer operator.
const POINTS_PER_CELL: usize = 32;

/// Convergence tolerance for stationary densities.
const STATIONARY_TOL: f64 = 1e-12;

/// Sub-Gaussian tail constants used by the validation report; generous
/// prefactors that every bounded noise law at scale ε satisfies.
const SUB_GAUSSIAN_GAMMA: (f64, f64) = (2.0, 2.0);

fn wells_at(loaded: &Loaded, eps: f64) -> Result<WellStructure> {
    let s = loaded.config.scenario();
    let deltas = loaded.config.delta_matrix(&s.map)?;
    Ok(build_wells(&s.map, eps, &deltas)?)
}

fn system_at(loaded: &Loaded, eps: f64) -> Result<PerturbedSystem> {
    let s = loaded.config.scenario();
    let system = PerturbedSystem::new(s, eps, loaded.config.noise.exponent_q)?;
    let beta = loaded.config.beta(&system.noise);
    Ok(system.with_beta(beta))
}

/// Structural validation: map assumptions, noise tail bounds, and well
/// construction at every noise size. Writes `validation.json`; returns
/// whether everything passed.
pub fn cmd_validate(loaded: &Loaded) -> Result<bool> {
    let cfg = &loaded.config;
    let s = cfg.scenario();
    let map_report = s.map.validate();
    let mut all_ok = map_report.passed;

    let mut noise_rows = Vec::new();
    for &eps in &cfg.noise.eps_grid {
        let (model_ok, sub_gaussian, wells_ok, detail) =
            match s.noise_model(eps, cfg.noise.exponent_q) {
                Ok(model) => {
                    let t_grid = [0.5 * eps, eps, 1.5 * eps, 2.0 * eps];
                    let sg = model.sub_gaussian_check(
                        SUB_GAUSSIAN_GAMMA.0,
                        SUB_GAUSSIAN_GAMMA.1,
                        &t_grid,
                    );
                    match wells_at(loaded, eps) {
                        Ok(wells) => (true, sg, true, format!("{} wells", wells.kappa())),
                        Err(e) => (true, sg, false, format!("{e:#}")),
                    }
                }
                Err(e) => (false, false, false, e.to_string()),
            };
        all_ok &= model_ok && sub_gaussian && wells_ok;
        noise_rows.push(json!({
            "eps": eps,
            "model_built": model_ok,
            "sub_gaussian": sub_gaussian,
            "wells_built": wells_ok,
            "detail": detail,
        }));
    }

    let report = json!({
        "config_hash": loaded.hash,
        "seed": loaded.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "passed": all_ok,
        "map": map_report,
        "noise": noise_rows,
    });
    write_json(loaded, "validation.json", &report)?;
    Ok(all_ok)
}

/// Spectral summary per noise size: the second eigenvalue modulus, the
/// gap, and the bounded-variation norm of the stationary density.
pub fn cmd_spectrum(loaded: &Loaded) -> Result<()> {
    let cfg = &loaded.config;
    let s = cfg.scenario();
    let mut body = String::from("eps,lambda2,gap,bv_norm\n");
    for &eps in &cfg.noise.eps_grid {
        let kernel = s.kernel(eps, cfg.noise.exponent_q)?;
        let op = ulam::build_perturbed(&kernel, cfg.grid.n_cells, POINTS_PER_CELL)?;
        let spectral = ulam::second_eigenvalue(&op)
            .with_context(|| format!("second eigenvalue at ε = {eps}"))?;
        let p = ulam::stationary_density(&op, STATIONARY_TOL)?;
        writeln!(
            body,
            "{},{},{},{}",
            fmt(eps),
            fmt(spectral.modulus),
            fmt(1.0 - spectral.modulus),
            fmt(ulam::bv_norm(&p))
        )
        .expect("writing to a string cannot fail");
    }
    write_with_header(loaded, "spectrum.csv", &body)?;
    Ok(())
}

/// Transition-rate table: Monte Carlo, grid-exact, and quadrature
/// estimators side by side for every ordered well pair and noise size.
pub fn cmd_rates(loaded: &Loaded) -> Result<()> {
    let cfg = &loaded.config;
    let kappa = cfg.kappa();
    let mut body = String::from("eps,i,j,theta_mc,theta_mc_stderr,theta_grid,theta_quad,censored\n");
    for &eps in &cfg.noise.eps_grid {
        let system = system_at(loaded, eps)?;
        let kernel = loaded.config.scenario().kernel(eps, cfg.noise.exponent_q)?;
        let op = ulam::build_perturbed(&kernel, cfg.grid.n_cells, POINTS_PER_CELL)?;
        let stationary = ulam::stationary_density(&op, STATIONARY_TOL)?;
        let wells = wells_at(loaded, eps)?;
        let mc = simulate::estimate_rates(
            &system,
            &wells,
            &stationary,
            cfg.simulate.n_samples,
            loaded.seed,
        )?;
        let grid_rates = resolvent::theta_grid(&op, &stationary, system.beta, &wells)?;
        for i in 1..=kappa {
            for j in 1..=kappa {
                if i == j {
                    continue;
                }
                let quad = if system.scenario.map.adjacent(WellId(i), WellId(j))? {
                    let weights = simulate::path_weight_quadrature(
                        &system,
                        &wells,
                        &stationary,
                        WellId(i),
                        WellId(j),
                    )?;
                    fmt(weights.theta(system.beta, grid_rates.well_masses[i - 1]))
                } else {
                    String::new()
                };
                writeln!(
                    body,
                    "{},{i},{j},{},{},{},{},{}",
                    fmt(eps),
                    fmt(mc.theta_hat[i - 1][j - 1]),
                    fmt(mc.std_err[i - 1][j - 1]),
                    fmt(grid_rates.theta[i - 1][j - 1]),
                    quad,
                    mc.cap_exceeded
                )
                .expect("writing to a string cannot fail");
            }
        }
    }
    write_with_header(loaded, "rates.csv", &body)?;
    Ok(())
}

/// Resolvent solves per noise size and λ: the well oscillation of the
/// solution, its well averages, and the matching reduced solution.
pub fn cmd_resolvent(loaded: &Loaded) -> Result<()> {
    let cfg = &loaded.config;
    let kappa = cfg.kappa();
    let mut body = String::from("eps,lambda,well,oscillation,f_eps,f_reduced\n");
    for &eps in &cfg.noise.eps_grid {
        let kernel = cfg.scenario().kernel(eps, cfg.noise.exponent_q)?;
        let op = ulam::build_perturbed(&kernel, cfg.grid.n_cells, POINTS_PER_CELL)?;
        let stationary = ulam::stationary_density(&op, STATIONARY_TOL)?;
        let wells = wells_at(loaded, eps)?;
        let beta = cfg.beta(&kernel.noise);
        let grid_rates = resolvent::theta_grid(&op, &stationary, beta, &wells)?;
        let reduced = ReducedGenerator::new(grid_rates.theta.clone())?;
        let gen = GeneratorMatrix::new(op, beta)?;
        for &lambda in &cfg.resolvent.lambda {
            let solution =
                resolvent::solve_resolvent(&gen, lambda, &cfg.resolvent.g, &wells, &stationary)?;
            let f_reduced = resolvent::solve_reduced(&reduced, lambda, &cfg.resolvent.g)?;
            for i in 0..kappa {
                writeln!(
                    body,
                    "{},{},{},{},{},{}",
                    fmt(eps),
                    fmt(lambda),
                    i + 1,
                    fmt(solution.oscillation[i]),
                    fmt(solution.f_eps[i]),
                    fmt(f_reduced[i])
                )
                .expect("writing to a string cannot fail");
            }
        }
    }
    write_with_header(loaded, "resolvent.csv", &body)?;
    Ok(())
}

/// Stability report along the noise grid, with the reduced generator
/// taken from the grid-exact rates at the smallest noise size (the best
/// available stand-in for the limit rates).
pub fn cmd_stability(loaded: &Loaded) -> Result<()> {
    let cfg = &loaded.config;
    let s = cfg.scenario();
    let smallest = *cfg
        .noise
        .eps_grid
        .last()
        .expect("config validation requires a nonempty grid");
    let kernel = s.kernel(smallest, cfg.noise.exponent_q)?;
    let op = ulam::build_perturbed(&kernel, cfg.grid.n_cells, POINTS_PER_CELL)?;
    let stationary = ulam::stationary_density(&op, STATIONARY_TOL)?;
    let wells = wells_at(loaded, smallest)?;
    let beta = cfg.beta(&kernel.noise);
    let grid_rates = resolvent::theta_grid(&op, &stationary, beta, &wells)?;
    let reduced = ReducedGenerator::new(grid_rates.theta)?;

    let report = stability::chen_stein_report(
        &s,
        &reduced,
        &cfg.noise.eps_grid,
        cfg.noise.exponent_q,
        cfg.grid.n_cells,
    )?;

    let mut body = String::from("eps,q_eps,d_eps,dtv,mass_gap,bound_rhs,slack\n");
    for (k, &eps) in report.eps_grid.iter().enumerate() {
        writeln!(
            body,
            "{},{},{},{},{},{},{}",
            fmt(eps),
            fmt(report.q_eps[k]),
            fmt(report.d_eps[k]),
            fmt(report.dtv[k]),
            fmt(report.mass_gap[k]),
            fmt(report.bound_rhs[k]),
            fmt(report.slack[k])
        )
        .expect("writing to a string cannot fail");
    }
    write_with_header(loaded, "stability.csv", &body)?;

    let summary = json!({
        "config_hash": loaded.hash,
        "seed": loaded.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "fit_c": report.fit_c,
        "pi": report.pi,
        "component_masses": report.component_masses,
    });
    write_json(loaded, "stability.json", &summary)?;
    Ok(())
}

/// One long trajectory of the jump process at the largest noise size,
/// reduced to its well-occupancy order path.
pub fn cmd_simulate(loaded: &Loaded) -> Result<()> {
    let cfg = &loaded.config;
    let eps = cfg.noise.eps_grid[0];
    let system = system_at(loaded, eps)?;
    let wells = wells_at(loaded, eps)?;
    let x0 = system
        .scenario
        .map
        .component(WellId(1))?
        .interval()
        .midpoint();
    let mut rng = ChaCha8Rng::seed_from_u64(loaded.seed);
    let path = simulate::run_jump_path(&system, x0, cfg.simulate.horizon, &mut rng)?;
    let order = simulate::trace_and_order(&path, &wells);

    let mut body = format!(
        "# eps = {}\n# horizon = {}\n# excised_time = {}\nsegment,well,dwell\n",
        fmt(eps),
        fmt(order.horizon),
        fmt(order.excised_time)
    );
    for (k, (well, dwell)) in order.segments.iter().enumerate() {
        writeln!(body, "{k},{},{}", well.0, fmt(*dwell)).expect("writing to a string cannot fail");
    }
    write_with_header(loaded, "order_path.csv", &body)?;
    Ok(())
}

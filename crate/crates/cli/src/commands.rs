use std::f64::consts::PI;

use meso_rmt::clt::{self, CltConfig, CltReport};
use meso_rmt::dyson::{self, DensityGrid};
use meso_rmt::ensemble::{Cumulant4, EnsembleSpec, ProfileKind};
use meso_rmt::stability::{self, StabilityReport};
use meso_rmt::twopoint::{self, LocalLawConfig, LocalLawReport};
use meso_rmt::{Error, C64};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::OutDir;
use crate::svg::{self, Series};
use crate::CliError;

/// One pass/fail gate evaluated in --check mode.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Check {
        Check { name: name.to_string(), passed, detail }
    }
}

/// Where a command writes: `prefix` is a subdirectory inside the output dir.
pub struct Sink<'a> {
    pub out: &'a mut OutDir,
    pub prefix: &'a str,
}

impl Sink<'_> {
    fn name(&self, file: &str) -> String {
        if self.prefix.is_empty() {
            file.to_string()
        } else {
            format!("{}/{file}", self.prefix)
        }
    }

    fn write(&mut self, file: &str, text: &str) -> Result<(), CliError> {
        let name = self.name(file);
        self.out.write(&name, text.as_bytes())
    }

    fn write_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<(), CliError> {
        let name = self.name(file);
        self.out.write_json(&name, value)
    }

    fn external(&mut self, file: &str, f: impl FnOnce(&std::path::Path) -> meso_rmt::Result<()>) -> Result<(), CliError> {
        let name = self.name(file);
        let p = self.out.path(&name)?;
        f(&p)?;
        self.out.record(&name);
        Ok(())
    }
}

fn rho_semicircle(e: f64, v: f64) -> f64 {
    let r = 4.0 * v - e * e;
    if r > 0.0 {
        r.sqrt() / (2.0 * PI * v)
    } else {
        0.0
    }
}

pub fn density(cfg: &RunConfig, sink: &mut Sink) -> Result<Vec<Check>, CliError> {
    let p = cfg.build_profile()?;
    let d = &cfg.density;
    let grid = dyson::density_grid(&p, d.e_min, d.e_max, d.n_points, d.eta_probe, d.kappa, d.threshold, &cfg.solver)?;
    sink.external("density.csv", |path| grid.write_csv(path))?;
    let sidecar = serde_json::json!({
        "config": cfg,
        "profile": p.to_document(),
        "density": grid.sidecar(),
    });
    sink.write_json("density.json", &sidecar)?;

    let v = p.mean_row_sum();
    let mut series = vec![Series { label: "rho".into(), color: "#08519c", points: pts(&grid.energies, &grid.rho), markers: false }];
    if p.kind == ProfileKind::Constant {
        let sc: Vec<f64> = grid.energies.iter().map(|&e| rho_semicircle(e, v)).collect();
        series.push(Series { label: "semicircle".into(), color: "#e6550d", points: pts(&grid.energies, &sc), markers: false });
    }
    let title = format!("self-consistent density, {} profile, n = {}", p.kind, p.n);
    sink.write("density.svg", &svg::line_plot(&title, "energy", "rho", &series, &grid.bulk_intervals))?;

    println!("density: {} points, integral {:.6}, bulk {:?}", grid.energies.len(), grid.integral(), grid.bulk_intervals);
    Ok(density_checks(&p, &grid, v))
}

fn pts(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    x.iter().copied().zip(y.iter().copied()).collect()
}

fn density_checks(p: &meso_rmt::ensemble::VarianceProfile, grid: &DensityGrid, v: f64) -> Vec<Check> {
    let mut checks = Vec::new();
    let smax = (0..p.n).map(|j| p.row(j).iter().sum::<f64>()).fold(0.0, f64::max);
    let edge = 2.0 * smax.sqrt();
    let (lo, hi) = (grid.energies[0], *grid.energies.last().unwrap());
    if lo <= -edge && hi >= edge {
        let i = grid.integral();
        checks.push(Check::new("density_mass", (i - 1.0).abs() <= 1e-2, format!("integral of rho = {i:.6}")));
    }
    checks.push(Check::new("bulk_found", !grid.bulk_intervals.is_empty(), format!("{:?}", grid.bulk_intervals)));
    if p.kind == ProfileKind::Constant {
        let dev = grid
            .energies
            .iter()
            .zip(&grid.rho)
            .filter(|(e, _)| grid.in_bulk(**e))
            .map(|(&e, &r)| (r - rho_semicircle(e, v)).abs())
            .fold(0.0, f64::max);
        checks.push(Check::new("semicircle_bulk", dev <= 1e-3, format!("max |rho - rho_sc| in bulk = {dev:.3e}")));
    }
    checks
}

#[derive(Serialize)]
struct Cell {
    re_z: f64,
    re_zeta: f64,
    in_bulk: bool,
    near_diagonal: bool,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    idempotency_residual: Option<f64>,
    #[serde(skip)]
    restricted_norm: Option<f64>,
}

fn stability_cell(cfg: &RunConfig, p: &meso_rmt::ensemble::VarianceProfile, cell: &mut Cell) -> meso_rmt::Result<()> {
    let s = &cfg.stability;
    let sz = dyson::solve_vde(p, C64::new(cell.re_z, s.eta_z), None, &cfg.solver)?;
    let sw = dyson::solve_vde(p, C64::new(cell.re_zeta, s.eta_zeta), None, &cfg.solver)?;
    let f = stability::build_f(p, &sz, &sw)?;
    cell.lambda1 = Some(f.lambda1);
    cell.gap = Some(f.gap);
    let r: StabilityReport = stability::build_stability_report(p, &sz, &sw, &s.options)?;
    cell.report = Some(r.to_json_value());
    cell.idempotency_residual = Some(r.idempotency_residual);
    cell.restricted_norm = Some(r.restricted_inverse_norm);
    Ok(())
}

pub fn stability(cfg: &RunConfig, sink: &mut Sink) -> Result<Vec<Check>, CliError> {
    let s = &cfg.stability;
    if s.eta_z == 0.0 || s.eta_zeta == 0.0 || s.re_z.points == 0 || s.re_zeta.points == 0 {
        return Err(CliError::Config("stability grid needs nonzero heights and at least one point per axis".into()));
    }
    let p = cfg.build_profile()?;
    let bulk = clt::detect_bulk(&p, s.kappa, s.bulk_threshold, &cfg.solver)?;
    let (xs, ys) = (s.re_z.values(), s.re_zeta.values());
    let pairs: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let cells: Vec<Cell> = pairs
        .par_iter()
        .map(|&(x, y)| {
            let mut cell = Cell {
                re_z: x,
                re_zeta: y,
                in_bulk: bulk.in_bulk(x) && bulk.in_bulk(y),
                near_diagonal: (x - y).abs() <= s.pair_eps,
                status: "ok",
                error: None,
                lambda1: None,
                gap: None,
                report: None,
                idempotency_residual: None,
                restricted_norm: None,
            };
            if let Err(e) = stability_cell(cfg, &p, &mut cell) {
                cell.status = match e {
                    Error::Separation(_) | Error::DegenerateGap { .. } => "separation_failure",
                    _ => "numerical_failure",
                };
                cell.error = Some(e.to_string());
            }
            cell
        })
        .collect();

    let grid_of = |pick: fn(&Cell) -> Option<f64>| -> Vec<Vec<Option<f64>>> {
        cells.chunks(xs.len()).map(|row| row.iter().map(pick).collect()).collect()
    };
    let title = |what: &str| format!("{what}, {} profile, Im z = {:e}, Im zeta = {:e}", p.kind, s.eta_z, s.eta_zeta);
    sink.write("gap.svg", &svg::heatmap(&title("spectral gap of F"), "Re z", "Re zeta", &xs, &ys, &grid_of(|c| c.gap), false))?;
    sink.write(
        "restricted_norm.svg",
        &svg::heatmap(&title("restricted inverse norm"), "Re z", "Re zeta", &xs, &ys, &grid_of(|c| c.restricted_norm), true),
    )?;

    let failed = cells.iter().filter(|c| c.status != "ok").count();
    sink.write_json("stability.json", &serde_json::json!({ "config": cfg, "bulk_intervals": bulk.bulk_intervals, "cells": cells }))?;
    println!("stability: {} cells, {} failed", cells.len(), failed);

    let bulk_cells: Vec<&Cell> = cells.iter().filter(|c| c.in_bulk).collect();
    let certify: Vec<&&Cell> = bulk_cells.iter().filter(|c| c.near_diagonal).collect();
    let bad = certify.iter().filter(|c| c.status != "ok").count();
    let min_gap = bulk_cells.iter().filter_map(|c| c.gap).fold(f64::INFINITY, f64::min);
    let no_gap = bulk_cells.iter().filter(|c| c.gap.is_none()).count();
    let max_norm = certify.iter().filter_map(|c| c.restricted_norm).fold(0.0, f64::max);
    let max_idem = certify.iter().filter_map(|c| c.idempotency_residual).fold(0.0, f64::max);
    Ok(vec![
        Check::new(
            "near_diagonal_cells_certified",
            bad == 0,
            format!("{bad} of {} bulk cells with |Re z - Re zeta| <= {} failed", certify.len(), s.pair_eps),
        ),
        Check::new(
            "gap",
            no_gap == 0 && (bulk_cells.is_empty() || min_gap >= 0.05),
            format!("min gap of F over {} bulk cells = {min_gap:.4}, {no_gap} without F", bulk_cells.len()),
        ),
        Check::new("restricted_norm", max_norm <= 50.0, format!("max restricted inverse norm = {max_norm:.4}")),
        Check::new("idempotency", max_idem <= 1e-8, format!("max |Pi^2 - Pi| = {max_idem:.3e}")),
    ])
}

pub fn local_law(cfg: &RunConfig, sink: &mut Sink) -> Result<Vec<Check>, CliError> {
    let l = &cfg.local_law;
    let mut ll =
        LocalLawConfig::new(cfg.profile.clone(), cfg.law, cfg.seed, l.z, l.zeta.unwrap_or(l.z.conj()), l.n_values.clone(), l.samples_per_n);
    ll.random_probes = l.random_probes;
    ll.bound_slack_exponent = l.bound_slack_exponent;
    ll.solver = cfg.solver;
    let report: LocalLawReport = twopoint::local_law_experiment(&ll)?;
    sink.external("local_law.csv", |path| report.write_csv(path))?;
    let mut fit = report.fit_summary();
    fit["config"] = serde_json::to_value(cfg).map_err(|e| CliError::Io(e.to_string()))?;
    sink.write_json("local_law_fit.json", &fit)?;

    let ns: Vec<f64> = report.rows.iter().map(|r| r.n as f64).collect();
    let col = |f: fn(&twopoint::LocalLawRow) -> f64| pts(&ns, &report.rows.iter().map(f).collect::<Vec<_>>());
    let series = vec![
        Series { label: "entrywise".into(), color: "#08519c", points: col(|r| r.err_entrywise), markers: true },
        Series { label: "averaged".into(), color: "#e6550d", points: col(|r| r.err_averaged), markers: true },
        Series { label: "two-point".into(), color: "#31a354", points: col(|r| r.err_t), markers: true },
        Series { label: "two-point bound".into(), color: "#756bb1", points: col(|r| r.t_bound), markers: false },
    ];
    sink.write("local_law.svg", &svg::loglog_plot("local-law errors", "n", "error", &series))?;

    let f = &report.fitted_slopes;
    println!(
        "local-law: slopes entrywise {:.3}, averaged {:.3}, T {:.3}; within bound {:.3}",
        f.entrywise.slope, f.averaged.slope, f.t.slope, report.t_within_bound
    );
    Ok(vec![
        Check::new("entrywise_slope", (f.entrywise.slope + 0.5).abs() <= 0.15, format!("{:.4}", f.entrywise.slope)),
        Check::new("averaged_slope", (f.averaged.slope + 1.0).abs() <= 0.2, format!("{:.4}", f.averaged.slope)),
        Check::new("two_point_within_bound", report.t_within_bound >= 0.95, format!("{:.4}", report.t_within_bound)),
    ])
}

fn gaussian_curve(label: &str, color: &'static str, var: f64, lo: f64, hi: f64) -> Series {
    let sd = var.sqrt();
    let points = (0..=200)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / 200.0;
            (x, (-0.5 * x * x / var).exp() / (sd * (2.0 * PI).sqrt()))
        })
        .collect();
    Series { label: label.into(), color, points, markers: false }
}

pub fn clt_cmd(cfg: &RunConfig, sink: &mut Sink) -> Result<Vec<Check>, CliError> {
    let c = &cfg.clt;
    if c.histogram_bins == 0 {
        return Err(CliError::Config("clt.histogram_bins must be positive".into()));
    }
    let config = CltConfig {
        profile: cfg.profile.clone(),
        n: cfg.n,
        law: cfg.law,
        seed: cfg.seed,
        test_function: c.test_function,
        n_samples: c.n_samples,
        options: c.options.clone(),
    };
    let report: CltReport = config.run()?;
    let mut summary = report.summary_json();
    summary["run_config"] = serde_json::to_value(cfg).map_err(|e| CliError::Io(e.to_string()))?;
    summary["eta0"] = report.eta0.into();
    summary["sample_mean"] = report.sample_mean.into();
    sink.write_json("clt.json", &summary)?;
    sink.external("clt_statistics.csv", |path| report.write_statistics_csv(path))?;

    let bins = report.histogram(c.histogram_bins);
    let (lo, hi) = (bins[0].0, bins[bins.len() - 1].1);
    let mut curves = vec![gaussian_curve("N(0, V) from H^1/2", "#e6550d", report.predicted_variance_hhalf, lo, hi)];
    if let Some(v) = report.predicted_variance_kernel {
        curves.push(gaussian_curve("N(0, V) from kernel", "#31a354", v, lo, hi));
    }
    let title = format!("centered linear statistics, n = {}, beta = {}, {} samples", report.n, report.beta, report.n_samples);
    sink.write("clt_histogram.svg", &svg::histogram(&title, "Tr f(H) - mean", &bins, &curves))?;

    println!(
        "clt: sample variance {:.6} +- {:.6}, predicted {:.6}, KS p {:.4}",
        report.sample_variance, report.stderr, report.predicted_variance_hhalf, report.ks_p
    );
    let dev = (report.sample_variance - report.predicted_variance_hhalf).abs();
    Ok(vec![
        Check::new("variance", dev <= 3.0 * report.stderr, format!("|sample - predicted| = {dev:.4e}, stderr {:.4e}", report.stderr)),
        Check::new("ks", report.ks_p > 0.01, format!("KS p-value {:.4}", report.ks_p)),
    ])
}

pub fn variance(cfg: &RunConfig, sink: &mut Sink) -> Result<Vec<Check>, CliError> {
    let v = &cfg.variance;
    let p = cfg.build_profile()?;
    let tf = v.test_function.build(cfg.n)?;
    let spec = EnsembleSpec::new(p, cfg.law, cfg.seed)?;
    let c4 = Cumulant4::from_spec(&spec);
    let report = clt::variance_via_kernel(&spec.profile, &tf, &c4, cfg.law.beta, &v.options)?;
    sink.write_json("variance.json", &serde_json::json!({ "config": cfg, "eta0": tf.eta0, "report": report }))?;
    println!("v_kernel = {:.10e}", report.v_kernel);
    println!("v_hhalf  = {:.10e}", report.v_hhalf);
    println!(
        "relative discrepancy = {:.6e} (quadrature error estimate {:.3e})",
        report.relative_discrepancy, report.quadrature_error_estimate
    );
    let ok = report.relative_discrepancy <= v.max_discrepancy;
    Ok(vec![Check::new(
        "variance_agreement",
        ok,
        format!("relative discrepancy {:.4e}, limit {}", report.relative_discrepancy, v.max_discrepancy),
    )])
}

pub type Command = fn(&RunConfig, &mut Sink) -> Result<Vec<Check>, CliError>;

pub const ALL: [(&str, Command); 5] =
    [("density", density), ("stability", stability), ("local-law", local_law), ("variance", variance), ("clt", clt_cmd)];

/// Runs every command into its own subdirectory; a command that errors
/// counts as a failed gate and the rest still run.
pub fn check_all(cfg: &RunConfig, out: &mut OutDir) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    for (name, cmd) in ALL {
        let mut sink = Sink { out, prefix: name };
        match cmd(cfg, &mut sink) {
            Ok(cs) => checks.extend(cs.into_iter().map(|c| Check { name: format!("{name}.{}", c.name), ..c })),
            Err(CliError::Config(e)) => return Err(CliError::Config(format!("{name}: {e}"))),
            Err(e) => checks.push(Check::new(&format!("{name}.run"), false, e.to_string())),
        }
    }
    Ok(checks)
}

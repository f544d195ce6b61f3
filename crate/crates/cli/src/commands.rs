//! Subcommand implementations. Each returns the process exit code.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use nnflow::analysis::suites::{run_suite, SuiteReport, SUITES};
use nnflow::constitutive::admissible;
use nnflow::fields::{lebesgue_norm, sym_grad, Field, ScalarField, VectorField};
use nnflow::outer::{
    run_ladder, solve_hb, HbAudit, LadderOutcome, LadderSchedule, OuterOptions, Rung, SolveReport,
};

use crate::config::{RunConfig, StudyConfig};
use crate::exit;
use crate::output::{
    render_csv, rung_rows, write_atomic, write_field, write_json, CsvRow, RungArtifacts, RunManifest,
};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const STABILITY: &str = "stability.csv";

pub fn cmd_admissible(d: usize, r: f64, gamma: f64) -> Result<u8, CliError> {
    let rep = admissible(d, r, gamma).map_err(|e| CliError::Config(e.to_string()))?;
    println!("d = {d}, r = {r}, gamma = {gamma}");
    println!("admissible = {}", rep.admissible);
    println!("r_lower = {}", rep.r_lower);
    println!("gamma_lower = {}", rep.gamma_lower);
    println!("branch = {:?}", rep.branch);
    if let Some(q) = rep.q1_star {
        println!("q1_star = {q}");
    }
    if let Some(q) = rep.q2_star {
        println!("q2_star = {q}");
    }
    if rep.open_ended {
        println!("gamma_lower is the infimum; the bound itself is excluded");
    }
    Ok(if rep.admissible { exit::OK } else { exit::FAILED })
}

type Writer<'w> = &'w dyn Fn(&Path) -> Result<(), CliError>;

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    manifest: RunManifest,
    rows: Vec<CsvRow>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, command: &str) -> Result<Self, CliError> {
        let dir = cfg.output.dir.as_path();
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut run = Self {
            cfg,
            dir,
            manifest: RunManifest {
                config_hash: cfg.hash(),
                command: command.to_string(),
                exit_status: "running".into(),
                ..Default::default()
            },
            rows: Vec::new(),
        };
        run.artifact("config.json", |p| write_json(p, cfg))?;
        Ok(run)
    }

    fn artifact(
        &mut self,
        rel: impl Into<PathBuf>,
        write: impl FnOnce(&Path) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let rel = rel.into();
        write(&self.dir.join(&rel))?;
        self.manifest.artifacts.push(rel);
        Ok(())
    }

    fn rung<T: Serialize>(
        &mut self,
        index: usize,
        rung: Rung,
        (rho, u, report): (&ScalarField, &VectorField, &SolveReport),
        detail: &T,
        extra: &[(&str, Writer<'_>)],
    ) -> Result<(), CliError> {
        let sub = PathBuf::from(format!("rung_{index:02}"));
        let mut paths = Vec::new();
        if self.cfg.output.fields {
            write_field(&self.dir.join(sub.join("rho.bin")), rho)?;
            write_field(&self.dir.join(sub.join("u.bin")), u)?;
            paths.push(sub.join("rho.bin"));
            paths.push(sub.join("u.bin"));
            for (name, write) in extra {
                let rel = sub.join(format!("{name}.bin"));
                write(&self.dir.join(&rel))?;
                paths.push(rel);
            }
        }
        write_json(&self.dir.join(sub.join("report.json")), detail)?;
        paths.push(sub.join("report.json"));
        self.rows.extend(rung_rows(index, &rung, report));
        self.manifest.rungs.push(RungArtifacts {
            index,
            rung: Some(rung),
            status: format!("{:?}", report.status).to_lowercase(),
            iterations: report.iterations,
            last_update: report.last_update(),
            seconds: report.seconds,
            paths,
        });
        Ok(())
    }

    fn finish(mut self, started: Instant, failure: Option<String>) -> Result<u8, CliError> {
        if self.cfg.output.diagnostics {
            let csv = render_csv(&self.rows);
            self.artifact(DIAGNOSTICS, |p| write_atomic(p, csv.as_bytes()))?;
        }
        self.manifest.total_seconds = started.elapsed().as_secs_f64();
        let code = match &failure {
            None => {
                self.manifest.exit_status = "ok".into();
                exit::OK
            }
            Some(msg) => {
                self.manifest.exit_status = "solver-failure".into();
                eprintln!("solver failure: {msg}");
                exit::SOLVER
            }
        };
        self.manifest.failure = failure;
        write_json(&self.dir.join(MANIFEST), &self.manifest)?;
        println!(
            "{} rung(s) written to {} in {:.2}s ({})",
            self.manifest.rungs.len(),
            self.dir.display(),
            self.manifest.total_seconds,
            self.manifest.exit_status
        );
        Ok(code)
    }
}

#[derive(Serialize)]
struct HbRungReport<'a> {
    audit: &'a HbAudit,
    widths: &'a [f64],
    reports: &'a [SolveReport],
}

fn audit_rows(index: usize, rung: &Rung, a: &HbAudit) -> Vec<CsvRow> {
    [
        ("hb_max_plastic_ratio", a.max_plastic_ratio),
        ("hb_rigid_cells", a.rigid_cells as f64),
        ("hb_max_rigid_stress_ratio", a.max_rigid_stress_ratio),
        ("hb_mass_error", (a.mass - a.expected_mass).abs().max(a.max_mass_error)),
    ]
    .into_iter()
    .map(|(name, value)| CsvRow {
        rung_id: index,
        rung: *rung,
        name: name.to_string(),
        value,
    })
    .collect()
}

pub fn cmd_solve(path: &Path) -> Result<u8, CliError> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    let started = Instant::now();
    let schedule = cfg.schedule().map_err(CliError::into_config)?;
    let opts = cfg.outer_options();
    let mut run = Run::new(&cfg, "solve")?;
    let failure = match &cfg.hb {
        None => {
            let out = run_ladder(&schedule, &opts)?;
            for r in &out.rungs {
                run.rung(r.index, r.rung, (&r.rho, &r.u, &r.report), &r.report, &[])?;
            }
            out.failure.map(|f| f.message)
        }
        Some(hb) => {
            let mut failure = None;
            for (i, level) in schedule.levels.iter().enumerate() {
                match solve_hb(level, &hb.eps_reg, &opts) {
                    Ok(out) => {
                        let report = out.reports.last().cloned().unwrap_or_default();
                        let rung = level.rung();
                        if !out.audit.passed(1e-10) {
                            warn!("rung {i}: Herschel–Bulkley audit failed: {:?}", out.audit);
                        }
                        let detail = HbRungReport {
                            audit: &out.audit,
                            widths: &hb.eps_reg,
                            reports: &out.reports,
                        };
                        let stress = |p: &Path| write_field(p, &out.stress_total);
                        let plastic = |p: &Path| write_field(p, &out.plastic);
                        run.rung(
                            i,
                            rung,
                            (&out.rho, &out.u, &report),
                            &detail,
                            &[("stress", &stress), ("plastic", &plastic)],
                        )?;
                        run.rows.extend(audit_rows(i, &rung, &out.audit));
                    }
                    Err(e) => {
                        failure = Some(format!("rung {i}: {e}"));
                        break;
                    }
                }
            }
            failure
        }
    };
    run.finish(started, failure)
}

pub fn cmd_verify(suite: &str, seed: u64, json: Option<&Path>) -> Result<u8, CliError> {
    let names: Vec<&str> = if suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&suite) {
        vec![suite]
    } else {
        return Err(CliError::UnknownSuite {
            name: suite.to_string(),
            known: SUITES.join(", "),
        });
    };
    let mut reports: Vec<SuiteReport> = Vec::new();
    for name in names {
        let r = run_suite(name, seed)?;
        for c in &r.checks {
            println!(
                "  {} {:<48} value {:<12.4e} limit {:.4e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.limit
            );
        }
        println!(
            "{}: {} ({:.2}s)",
            r.suite,
            if r.passed() { "PASS" } else { "FAIL" },
            r.seconds
        );
        reports.push(r);
    }
    if let Some(p) = json {
        write_json(p, &reports)?;
    }
    Ok(if reports.iter().all(SuiteReport::passed) {
        exit::OK
    } else {
        exit::FAILED
    })
}

/// One row of the stability table.
#[derive(Clone, Debug, Serialize)]
pub struct StabilityRow {
    pub k: f64,
    pub forcing_l2: f64,
    pub rho_l2: f64,
    pub rho_rel: f64,
    pub u_l2: f64,
    pub u_rel: f64,
    pub du_lr: f64,
    pub du_rel: f64,
    pub iterations: usize,
    pub converged: bool,
}

const STABILITY_HEADER: &str = "k,forcing_l2,rho_l2,rho_rel,u_l2,u_rel,du_lr,du_rel,iterations,converged";

fn perturbed(schedule: &LadderSchedule, study: &StudyConfig, k: f64) -> Result<LadderSchedule, CliError> {
    let mut levels = schedule.levels.clone();
    for l in &mut levels {
        let g = *l.grid();
        for c in 0..g.cell_count() {
            let x = g.unit_center(c);
            let v = l.physical.f.get(c, study.component);
            l.physical
                .f
                .set(c, study.component, v + study.amplitude * (2.0 * PI * k * x[0]).sin());
        }
    }
    Ok(LadderSchedule::new(levels, schedule.warm_start)?)
}

fn sym_grad_norm(u: &VectorField, r: f64) -> f64 {
    let du = sym_grad(u);
    let g = *u.grid();
    let s: f64 = (0..g.cell_count()).map(|c| du.tensor_at(c).norm().powf(r)).sum();
    (s * g.cell_volume()).powf(1.0 / r)
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

pub fn cmd_stability_study(path: &Path) -> Result<u8, CliError> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    let study = cfg
        .study
        .clone()
        .ok_or_else(|| CliError::Config("stability-study needs a 'study' block".into()))?;
    let started = Instant::now();
    let schedule = cfg.schedule().map_err(CliError::into_config)?;
    let opts = OuterOptions {
        diagnostics: false,
        ..cfg.outer_options()
    };
    let mut family = vec![None];
    family.extend(study.wavenumbers.iter().copied().map(Some));
    let schedules = family
        .iter()
        .map(|k| match k {
            None => Ok(schedule.clone()),
            Some(k) => perturbed(&schedule, &study, *k),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let outcomes: Vec<nnflow::Result<LadderOutcome>> =
        schedules.par_iter().map(|s| run_ladder(s, &opts)).collect();

    let mut run = Run::new(&cfg, "stability-study")?;
    let mut finals = Vec::new();
    let mut failure = None;
    for (k, out) in family.iter().zip(outcomes) {
        let label = k.map_or("base".to_string(), |k| format!("k = {k}"));
        match out {
            Ok(o) if o.completed() => finals.push(o.last().cloned()),
            Ok(o) => {
                failure.get_or_insert(format!("{label}: {}", o.failure.map(|f| f.message).unwrap_or_default()));
                finals.push(None);
            }
            Err(e) => {
                failure.get_or_insert(format!("{label}: {e}"));
                finals.push(None);
            }
        }
    }
    let r = cfg.problem.r;
    let mut rows = Vec::new();
    if let Some(base) = finals[0].clone() {
        let rho_n = lebesgue_norm(&base.rho, 2.0)?;
        let u_n = lebesgue_norm(&base.u, 2.0)?;
        let du_n = sym_grad_norm(&base.u, r);
        for (k, fin) in study.wavenumbers.iter().zip(&finals[1..]) {
            let Some(fin) = fin else { continue };
            let mut dr = fin.rho.clone();
            dr.axpy(-1.0, &base.rho);
            let mut du = fin.u.clone();
            du.axpy(-1.0, &base.u);
            let mut df = schedules[family.iter().position(|x| *x == Some(*k)).unwrap()].levels[0]
                .physical
                .f
                .clone();
            df.axpy(-1.0, &schedule.levels[0].physical.f);
            let (rho_l2, u_l2, du_lr) = (lebesgue_norm(&dr, 2.0)?, lebesgue_norm(&du, 2.0)?, sym_grad_norm(&du, r));
            rows.push(StabilityRow {
                k: *k,
                forcing_l2: lebesgue_norm(&df, 2.0)?,
                rho_l2,
                rho_rel: ratio(rho_l2, rho_n),
                u_l2,
                u_rel: ratio(u_l2, u_n),
                du_lr,
                du_rel: ratio(du_lr, du_n),
                iterations: fin.report.iterations,
                converged: fin.report.converged,
            });
        }
    }
    let mut csv = String::from(STABILITY_HEADER);
    csv.push('\n');
    for s in &rows {
        csv.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}\n",
            s.k, s.forcing_l2, s.rho_l2, s.rho_rel, s.u_l2, s.u_rel, s.du_lr, s.du_rel, s.iterations, s.converged
        ));
    }
    run.artifact(STABILITY, |p| write_atomic(p, csv.as_bytes()))?;
    for s in &rows {
        println!(
            "k = {:<6} |rho_k - rho| = {:.4e}  |u_k - u| = {:.4e}  |D(u_k - u)| = {:.4e}",
            s.k, s.rho_l2, s.u_l2, s.du_lr
        );
    }
    if rows.len() >= 2 {
        let mut by_k = rows.clone();
        by_k.sort_by(|a, b| a.k.total_cmp(&b.k));
        let decreasing = |f: fn(&StabilityRow) -> f64| by_k.windows(2).all(|w| f(&w[1]) <= f(&w[0]));
        println!(
            "trend in k: rho {}, u {}, Du {}",
            trend(decreasing(|s| s.rho_l2)),
            trend(decreasing(|s| s.u_l2)),
            trend(decreasing(|s| s.du_lr))
        );
    }
    info!("stability study: {} family members", family.len());
    run.finish(started, failure)
}

fn trend(decreasing: bool) -> &'static str {
    if decreasing {
        "decreasing"
    } else {
        "not monotone"
    }
}

/// Diagnostics of one rung: `[eps, alpha, delta, eta]` and the named values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RungValues {
    pub rung: [f64; 4],
    pub values: BTreeMap<String, f64>,
}

/// Reads a diagnostics CSV, keyed by rung id.
pub fn read_diagnostics(text: &str) -> Result<BTreeMap<usize, RungValues>, CliError> {
    let mut out: BTreeMap<usize, RungValues> = BTreeMap::new();
    let bad = |line: usize| CliError::Config(format!("{DIAGNOSTICS}: malformed line {line}"));
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(i + 1));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1));
        let id: usize = f[0].parse().map_err(|_| bad(i + 1))?;
        let rung = [num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?];
        let entry = out.entry(id).or_insert_with(|| RungValues {
            rung,
            ..Default::default()
        });
        entry.values.insert(f[5].to_string(), num(f[6])?);
    }
    Ok(out)
}

const SUMMARY_COLUMNS: [&str; 5] = [
    "energy_residual",
    "weak_residual",
    "eps_grad_lq",
    "min_density",
    "max_mass_error",
];

pub fn cmd_report(dir: &Path, wide: Option<&Path>) -> Result<u8, CliError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", mpath.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", mpath.display())))?;
    println!("command      {}", manifest.command);
    println!("config hash  {}", manifest.config_hash);
    println!("status       {}", manifest.exit_status);
    if let Some(f) = &manifest.failure {
        println!("failure      {f}");
    }
    println!("total time   {:.2}s", manifest.total_seconds);
    if !manifest.rungs.is_empty() {
        println!(
            "{:>4} {:>10} {:>10} {:>10} {:>10} {:>12} {:>6} {:>12} {:>8}",
            "rung", "alpha", "delta", "eps", "eta", "status", "iter", "update", "seconds"
        );
    }
    for r in &manifest.rungs {
        let g = r.rung.unwrap_or(Rung {
            alpha: f64::NAN,
            delta: f64::NAN,
            eps: f64::NAN,
            eta: f64::NAN,
            eps_reg: None,
        });
        println!(
            "{:>4} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>12} {:>6} {:>12.3e} {:>8.2}",
            r.index, g.alpha, g.delta, g.eps, g.eta, r.status, r.iterations, r.last_update, r.seconds
        );
    }
    let dpath = dir.join(DIAGNOSTICS);
    if dpath.exists() {
        let text = fs::read_to_string(&dpath).map_err(|e| CliError::io(&dpath, e))?;
        let table = read_diagnostics(&text)?;
        println!();
        print!("{:>4}", "rung");
        for c in SUMMARY_COLUMNS {
            print!(" {c:>16}");
        }
        println!();
        for (id, RungValues { values, .. }) in &table {
            print!("{id:>4}");
            for c in SUMMARY_COLUMNS {
                match values.get(c) {
                    Some(v) => print!(" {v:>16.4e}"),
                    None => print!(" {:>16}", "-"),
                }
            }
            println!();
        }
        if let Some(out) = wide {
            let names: Vec<&String> = {
                let mut seen: Vec<&String> = Vec::new();
                for RungValues { values, .. } in table.values() {
                    for n in values.keys() {
                        if !seen.contains(&n) {
                            seen.push(n);
                        }
                    }
                }
                seen
            };
            let mut csv = String::from("rung_id,eps,alpha,delta,eta");
            for n in &names {
                csv.push(',');
                csv.push_str(n);
            }
            csv.push('\n');
            for (id, RungValues { rung: r, values }) in &table {
                csv.push_str(&format!("{id},{:e},{:e},{:e},{:e}", r[0], r[1], r[2], r[3]));
                for n in &names {
                    match values.get(*n) {
                        Some(v) => csv.push_str(&format!(",{v:e}")),
                        None => csv.push(','),
                    }
                }
                csv.push('\n');
            }
            write_atomic(out, csv.as_bytes())?;
            println!("wide table written to {}", out.display());
        }
    } else if wide.is_some() {
        return Err(CliError::Config(format!("{} not found", dpath.display())));
    }
    let missing = manifest.missing(dir);
    for m in &missing {
        println!("missing artifact: {}", m.display());
    }
    Ok(if manifest.exit_status == "ok" && missing.is_empty() {
        exit::OK
    } else {
        exit::FAILED
    })
}

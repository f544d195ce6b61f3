//! The fixed-point map `E`, its damped iteration, the continuation ladder and
//! the Herschel–Bulkley driver.

use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::analysis::{defect_terms, level_diagnostics, phi_battery, DiagnosticsRecord};
use crate::constitutive::{admissible, PressureLaw, StressModel};
use crate::continuity::{solve_transport_with, TransportProblem, TransportReport};
use crate::error::{ensure, Error, Result};
use crate::fields::{inner, jacobian, lebesgue_norm, sym_grad, Field, Grid, ScalarField, SymTensorField, VectorField};
use crate::linalg::{FactorCache, LinearOptions};
use crate::momentum::{
    assemble_F, solve_momentum_cached, transport_field, FAssemblyInputs, MomentumOptions,
    MomentumProblem, MomentumReport,
};

/// Data that stays fixed along a ladder.
#[derive(Clone, Debug)]
pub struct PhysicalData {
    pub mass: f64,
    pub pressure: PressureLaw,
    pub stress: StressModel,
    pub f: VectorField,
    pub g: VectorField,
}

/// Extra data of the Herschel–Bulkley system.
#[derive(Clone, Debug)]
pub struct HbData {
    /// Coefficient of the zeroth-order term `αϱ` in the continuity equation.
    pub alpha_hb: f64,
    pub beta: f64,
    pub rho_check: ScalarField,
}

/// Values of the four regularization parameters at one rung.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub alpha: f64,
    pub delta: f64,
    pub eps: f64,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_reg: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LevelParams {
    pub alpha: f64,
    pub delta: f64,
    pub eps: f64,
    pub eta: f64,
    pub q: f64,
    pub physical: PhysicalData,
    pub hb: Option<HbData>,
}

impl LevelParams {
    pub fn grid(&self) -> &Grid {
        self.physical.f.grid()
    }

    pub fn rung(&self) -> Rung {
        let eps_reg = match self.physical.stress {
            StressModel::HerschelBulkley(h) => Some(h.eps_reg),
            StressModel::PowerLaw(_) => None,
        };
        Rung {
            alpha: self.alpha,
            delta: self.delta,
            eps: self.eps,
            eta: self.eta,
            eps_reg,
        }
    }

    pub fn with_rung(&self, r: &Rung) -> Self {
        let mut out = self.clone();
        out.alpha = r.alpha;
        out.delta = r.delta;
        out.eps = r.eps;
        out.eta = r.eta;
        if let (Some(e), StressModel::HerschelBulkley(h)) = (r.eps_reg, self.physical.stress) {
            out.physical.stress = StressModel::HerschelBulkley(h.with_eps_reg(e));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("eps", self.eps),
            ("eta", self.eta),
        ] {
            ensure(v > 0.0 && v <= 1.0, || format!("{name} must lie in (0, 1], got {v}"))?;
        }
        let grid = *self.grid();
        let d = grid.dim();
        ensure(!grid.is_periodic(), || "levels are solved on bounded grids".into())?;
        ensure(self.q > d as f64, || format!("q must exceed d = {d}, got {}", self.q))?;
        let ph = &self.physical;
        ph.stress.validate()?;
        ph.pressure.validate()?;
        ensure(ph.mass > 0.0 && ph.mass.is_finite(), || {
            format!("mass must be positive, got {}", ph.mass)
        })?;
        ph.f.check_same_grid(&ph.g)?;
        if !ph.f.is_finite() || !ph.g.is_finite() {
            return Err(Error::NotFinite("body forces"));
        }
        let r = ph.stress.exponent();
        ensure(r > d as f64 / 2.0, || format!("r must exceed d/2, got {r}"))?;
        let gamma = ph.pressure.gamma;
        if !admissible(d, r, gamma)?.admissible {
            return Err(Error::Inadmissible { d, r, gamma });
        }
        if let Some(hb) = &self.hb {
            ensure(matches!(ph.stress, StressModel::HerschelBulkley(_)), || {
                "Herschel–Bulkley data needs a Herschel–Bulkley stress".into()
            })?;
            ensure(gamma > 1.0 && gamma <= 2.0, || {
                format!("Herschel–Bulkley runs need gamma in (1, 2], got {gamma}")
            })?;
            ensure(hb.alpha_hb > 0.0 && hb.alpha_hb.is_finite(), || {
                "alpha_hb must be positive".into()
            })?;
            ensure(hb.beta >= 0.0 && hb.beta.is_finite(), || "beta must be >= 0".into())?;
            hb.rho_check.check_same_grid(&ph.f)?;
            if !hb.rho_check.is_finite() {
                return Err(Error::NotFinite("source density"));
            }
            ensure(hb.rho_check.min() >= 0.0, || "source density must be nonnegative".into())?;
        }
        Ok(())
    }

    /// The continuity problem solved inside `E(v)`.
    pub fn transport_problem(&self, v: &VectorField) -> TransportProblem {
        let (alpha, rho_check) = match &self.hb {
            Some(hb) => (hb.alpha_hb, Some(hb.rho_check.clone())),
            None => (0.0, None),
        };
        TransportProblem {
            eps: self.eps,
            eta: self.eta,
            alpha,
            mass: Some(self.physical.mass),
            rho_check,
            v: transport_field(v, self.delta),
        }
    }

    pub fn expected_mass(&self) -> f64 {
        match &self.hb {
            Some(hb) => {
                (self.eta * self.physical.mass + hb.alpha_hb * hb.rho_check.integral())
                    / (self.eta + hb.alpha_hb)
            }
            None => self.physical.mass,
        }
    }

    /// Right-hand side `F(ϱ, v)` of the momentum equation.
    pub fn force(&self, rho: &ScalarField, v: &VectorField) -> Result<VectorField> {
        assemble_F(&FAssemblyInputs {
            rho,
            v,
            delta: self.delta,
            eta: self.eta,
            eps: self.eps,
            pressure: self.physical.pressure,
            f: &self.physical.f,
            g: &self.physical.g,
        })
    }

    pub fn momentum_problem(&self, rho: &ScalarField, force: VectorField) -> MomentumProblem {
        let mut m = MomentumProblem::new(self.physical.stress, self.alpha, self.q, force);
        if let Some(hb) = &self.hb {
            if hb.beta > 0.0 {
                m.beta = hb.beta;
                m.rho = Some(rho.clone());
            }
        }
        m
    }
}

/// Discrete `W^{1,q}` norm `(|v|_q^q + |∇v|_q^q)^(1/q)`.
pub fn sobolev_norm(v: &VectorField, q: f64) -> f64 {
    let g = v.grid();
    let vol = g.cell_volume();
    let jac = jacobian(v);
    let s: f64 = (0..g.cell_count())
        .map(|c| v.magnitude_at(c).powf(q) + jac[c].norm().powf(q))
        .sum();
    (s * vol).powf(1.0 / q)
}

/// How the damping `θ` evolves along the outer iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relaxation {
    /// Start from `theta`, halve whenever the update grows.
    #[default]
    Halving,
    /// Aitken's dynamic relaxation: `θ_k = -θ_{k-1} <r_{k-1}, r_k - r_{k-1}> / |r_k - r_{k-1}|²`
    /// with `r_k = E(u_k) - u_k`, clamped to `[min_theta, 1]`.
    Aitken,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OuterOptions {
    /// Stop when `|u - E(u)|_{W^{1,q}} <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub theta: f64,
    pub min_theta: f64,
    /// Abort when the update has not improved for this many iterations.
    pub stagnation_window: usize,
    #[serde(default)]
    pub relaxation: Relaxation,
    /// Re-evaluate `E` at the returned state.
    pub post_check: bool,
    pub diagnostics: bool,
    pub momentum: MomentumOptions,
    pub linear: LinearOptions,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            theta: 0.5,
            min_theta: 1.0 / 64.0,
            stagnation_window: 50,
            relaxation: Relaxation::Halving,
            post_check: true,
            diagnostics: true,
            momentum: MomentumOptions {
                tol: 1e-11,
                ..MomentumOptions::default()
            },
            linear: LinearOptions::default(),
        }
    }
}

/// Result of one evaluation of `E`.
#[derive(Clone, Debug)]
pub struct EOutput {
    pub u: VectorField,
    pub rho: ScalarField,
    pub transport: TransportReport,
    pub momentum: MomentumReport,
}

/// `E(v)`: continuity solve with the transport field of `v`, then the
/// momentum solve with `F(ϱ, v)`, warm-started from `v`.
#[allow(non_snake_case)]
pub fn apply_E(v: &VectorField, p: &LevelParams) -> Result<(VectorField, ScalarField)> {
    let out = apply_E_with(v, p, &OuterOptions::default())?;
    Ok((out.u, out.rho))
}

#[allow(non_snake_case)]
pub fn apply_E_with(v: &VectorField, p: &LevelParams, opts: &OuterOptions) -> Result<EOutput> {
    apply_E_cached(v, p, opts, &mut FactorCache::new())
}

/// [`apply_E_with`] reusing momentum factorizations across calls.
#[allow(non_snake_case)]
pub fn apply_E_cached(
    v: &VectorField,
    p: &LevelParams,
    opts: &OuterOptions,
    cache: &mut FactorCache,
) -> Result<EOutput> {
    v.check_same_grid(&p.physical.f)?;
    ensure(v.vanishes_on_boundary(), || "outer iterate must vanish on boundary cells".into())?;
    let tp = p.transport_problem(v);
    let (rho, transport) = solve_transport_with(&tp, &opts.linear)?;
    let clipped = rho.map(|x| x.max(0.0));
    let force = p.force(&clipped, v)?;
    let mp = p.momentum_problem(&clipped, force);
    let (u, momentum) = solve_momentum_cached(&mp, v, &opts.momentum, cache)?;
    Ok(EOutput {
        u,
        rho,
        transport,
        momentum,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelStatus {
    Converged,
    #[default]
    MaxIterations,
    Stagnated,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub status: LevelStatus,
    /// `|u_k - E(u_k)|_{W^{1,q}}` per iteration.
    pub updates: Vec<f64>,
    pub thetas: Vec<f64>,
    pub theta_halvings: usize,
    /// The update recomputed from scratch at the returned state.
    pub fixed_point_residual: Option<f64>,
    pub expected_mass: f64,
    pub max_mass_error: f64,
    pub min_density: f64,
    pub momentum_iterations: Vec<usize>,
    pub transport: Option<TransportReport>,
    pub momentum: Option<MomentumReport>,
    pub diagnostics: Option<DiagnosticsRecord>,
    /// Wall time of the level solve, diagnostics included.
    #[serde(default)]
    pub seconds: f64,
}

impl SolveReport {
    pub fn last_update(&self) -> f64 {
        self.updates.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// What an observer sees at each outer iterate.
pub struct Iterate<'a> {
    pub iteration: usize,
    pub u: &'a VectorField,
    pub eu: &'a VectorField,
    pub rho: &'a ScalarField,
}

fn stagnated(updates: &[f64], window: usize) -> bool {
    let k = updates.len();
    if window == 0 || k <= window {
        return false;
    }
    let base = updates[k - 1 - window];
    updates[k - window..].iter().all(|&u| u >= base)
}

/// Damped iteration `u <- (1-θ)u + θE(u)`.
pub fn solve_level(
    p: &LevelParams,
    u0: &VectorField,
    opts: &OuterOptions,
) -> Result<(ScalarField, VectorField, SolveReport)> {
    solve_level_observed(p, u0, opts, &mut |_| {})
}

pub fn solve_level_observed(
    p: &LevelParams,
    u0: &VectorField,
    opts: &OuterOptions,
    observer: &mut dyn FnMut(&Iterate<'_>),
) -> Result<(ScalarField, VectorField, SolveReport)> {
    let started = Instant::now();
    p.validate()?;
    ensure(opts.theta > 0.0 && opts.theta <= 1.0, || {
        format!("damping must lie in (0, 1], got {}", opts.theta)
    })?;
    ensure(opts.max_iter > 0, || "max_iter must be positive".into())?;
    let expected = p.expected_mass();
    let mut report = SolveReport {
        expected_mass: expected,
        min_density: f64::INFINITY,
        ..Default::default()
    };
    let mut theta = opts.theta;
    let mut u = u0.clone();
    let mut state: Option<(ScalarField, VectorField)> = None;
    let mut cache = FactorCache::new();
    let mut previous: Option<VectorField> = None;
    for k in 1..=opts.max_iter {
        let e = apply_E_cached(&u, p, opts, &mut cache)?;
        let mut diff = u.clone();
        diff.axpy(-1.0, &e.u);
        let upd = sobolev_norm(&diff, p.q);
        if !upd.is_finite() {
            return Err(Error::NotFinite("outer update"));
        }
        observer(&Iterate {
            iteration: k,
            u: &u,
            eu: &e.u,
            rho: &e.rho,
        });
        report.iterations = k;
        report.max_mass_error = report.max_mass_error.max((e.transport.mass - expected).abs());
        report.min_density = report.min_density.min(e.transport.min);
        report.momentum_iterations.push(e.momentum.iterations);
        report.updates.push(upd);
        report.thetas.push(theta);
        report.transport = Some(e.transport);
        report.momentum = Some(e.momentum.clone());
        debug!("outer {k}: update {upd:e}, theta {theta}");
        if upd <= opts.tol {
            report.converged = true;
            report.status = LevelStatus::Converged;
            state = Some((e.rho, u));
            break;
        }
        if stagnated(&report.updates, opts.stagnation_window) {
            report.status = LevelStatus::Stagnated;
            state = Some((e.rho, u));
            break;
        }
        let diff = diff.scaled(-1.0);
        match opts.relaxation {
            Relaxation::Halving => {
                if k >= 2 && upd > report.updates[k - 2] && theta > opts.min_theta {
                    theta = (0.5 * theta).max(opts.min_theta);
                    report.theta_halvings += 1;
                }
            }
            Relaxation::Aitken => {
                if let Some(prev) = &previous {
                    let mut dr = diff.clone();
                    dr.axpy(-1.0, prev);
                    let dd = inner(&dr, &dr)?;
                    if dd > 0.0 {
                        theta = (-theta * inner(prev, &dr)? / dd).clamp(opts.min_theta, 1.0);
                    }
                }
            }
        }
        let next = {
            let mut n = u.scaled(1.0 - theta);
            n.axpy(theta, &e.u);
            n
        };
        state = Some((e.rho, std::mem::replace(&mut u, next)));
        previous = Some(diff);
    }
    let (rho, u) = state.expect("at least one outer iteration");
    if report.converged && opts.post_check {
        let e = apply_E_cached(&u, p, opts, &mut cache)?;
        let mut diff = u.clone();
        diff.axpy(-1.0, &e.u);
        report.fixed_point_residual = Some(sobolev_norm(&diff, p.q));
    }
    if opts.diagnostics {
        report.diagnostics = Some(level_diagnostics(&rho, &u, p)?);
    }
    report.seconds = started.elapsed().as_secs_f64();
    info!(
        "level (alpha {:e}, delta {:e}, eps {:e}, eta {:e}): {:?} after {} iterations, update {:e}",
        p.alpha,
        p.delta,
        p.eps,
        p.eta,
        report.status,
        report.iterations,
        report.last_update()
    );
    Ok((rho, u, report))
}

/// Geometric continuation: α, δ, η shrink together to their floors, then ε.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricLadder {
    pub start: Rung,
    pub factor: f64,
    pub alpha_floor: f64,
    pub delta_floor: f64,
    pub eta_floor: f64,
    pub eps_floor: f64,
}

impl GeometricLadder {
    pub fn new(start: Rung) -> Self {
        Self {
            start,
            factor: 0.1,
            alpha_floor: 1e-8,
            delta_floor: 1e-8,
            eta_floor: 1e-8,
            eps_floor: 1e-3,
        }
    }

    pub fn rungs(&self) -> Result<Vec<Rung>> {
        ensure(self.factor > 0.0 && self.factor < 1.0, || {
            format!("ladder factor must lie in (0, 1), got {}", self.factor)
        })?;
        let mut r = self.start;
        let mut out = vec![r];
        let step = |x: f64, floor: f64| (x * self.factor).max(floor).min(x);
        while r.alpha > self.alpha_floor || r.delta > self.delta_floor || r.eta > self.eta_floor {
            r.alpha = step(r.alpha, self.alpha_floor);
            r.delta = step(r.delta, self.delta_floor);
            r.eta = step(r.eta, self.eta_floor);
            out.push(r);
        }
        while r.eps > self.eps_floor {
            r.eps = step(r.eps, self.eps_floor);
            out.push(r);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct LadderSchedule {
    pub levels: Vec<LevelParams>,
    /// Start each rung from the previous rung's velocity.
    pub warm_start: bool,
}

impl LadderSchedule {
    pub fn new(levels: Vec<LevelParams>, warm_start: bool) -> Result<Self> {
        let s = Self { levels, warm_start };
        s.validate()?;
        Ok(s)
    }

    pub fn from_rungs(base: &LevelParams, rungs: &[Rung], warm_start: bool) -> Result<Self> {
        Self::new(rungs.iter().map(|r| base.with_rung(r)).collect(), warm_start)
    }

    pub fn geometric(base: &LevelParams, ladder: &GeometricLadder, warm_start: bool) -> Result<Self> {
        Self::from_rungs(base, &ladder.rungs()?, warm_start)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.levels.is_empty(), || "ladder has no rungs".into())?;
        for l in &self.levels {
            l.validate()?;
            l.physical.f.check_same_grid(&self.levels[0].physical.f)?;
        }
        for (i, w) in self.levels.windows(2).enumerate() {
            let (a, b) = (w[0].rung(), w[1].rung());
            let ok = b.alpha <= a.alpha
                && b.delta <= a.delta
                && b.eps <= a.eps
                && b.eta <= a.eta
                && match (a.eps_reg, b.eps_reg) {
                    (Some(x), Some(y)) => y <= x,
                    _ => true,
                };
            ensure(ok, || format!("ladder parameters increase between rungs {i} and {}", i + 1))?;
        }
        Ok(())
    }

    /// Whether the last rung has α, δ, η at their vanishing proxies.
    pub fn is_complete(&self) -> bool {
        self.levels
            .last()
            .is_some_and(|l| l.alpha <= 1e-8 && l.delta <= 1e-8 && l.eta <= 1e-8)
    }
}

#[derive(Clone, Debug)]
pub struct RungResult {
    pub index: usize,
    pub rung: Rung,
    pub rho: ScalarField,
    pub u: VectorField,
    pub report: SolveReport,
}

impl RungResult {
    pub fn diagnostics(&self) -> Option<&DiagnosticsRecord> {
        self.report.diagnostics.as_ref()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LadderFailure {
    pub rung: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct LadderOutcome {
    pub rungs: Vec<RungResult>,
    pub failure: Option<LadderFailure>,
}

impl LadderOutcome {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn last(&self) -> Option<&RungResult> {
        self.rungs.last()
    }

    /// `|u_k - u_{k+1}|_{L^p}` between consecutive rungs.
    pub fn cauchy_gaps(&self, p: f64) -> Result<Vec<f64>> {
        self.rungs
            .windows(2)
            .map(|w| {
                let mut d = w[0].u.clone();
                d.axpy(-1.0, &w[1].u);
                lebesgue_norm(&d, p)
            })
            .collect()
    }
}

/// Solves the rungs in order. A rung that fails or does not converge stops
/// the ladder; finished rungs are kept.
pub fn run_ladder(s: &LadderSchedule, opts: &OuterOptions) -> Result<LadderOutcome> {
    s.validate()?;
    let grid = *s.levels[0].grid();
    let mut out = LadderOutcome {
        rungs: Vec::with_capacity(s.levels.len()),
        failure: None,
    };
    for (i, p) in s.levels.iter().enumerate() {
        let u0 = match (s.warm_start, out.rungs.last()) {
            (true, Some(prev)) => prev.u.clone(),
            _ => VectorField::zeros(grid),
        };
        match solve_level(p, &u0, opts) {
            Ok((rho, u, mut report)) => {
                if let (Some(prev), Some(diag)) = (out.rungs.last(), report.diagnostics.as_mut()) {
                    let entries = defect_terms(
                        (&prev.rho, &prev.u),
                        (&rho, &u),
                        &p.physical.stress,
                        p.physical.pressure.gamma,
                        &phi_battery(&grid),
                    )?;
                    diag.attach_defects(&entries);
                }
                let converged = report.converged;
                let status = report.status;
                let last = report.last_update();
                out.rungs.push(RungResult {
                    index: i,
                    rung: p.rung(),
                    rho,
                    u,
                    report,
                });
                if !converged {
                    out.failure = Some(LadderFailure {
                        rung: i,
                        message: format!("rung {i} ended {status:?} with update {last:e}"),
                    });
                    break;
                }
            }
            Err(e) => {
                out.failure = Some(LadderFailure {
                    rung: i,
                    message: e.to_string(),
                });
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct HbAudit {
    /// Largest `|P_eps(Du)| / τ*` over every cell of every iterate.
    pub max_plastic_ratio: f64,
    /// Cells of the final state with `|Du| <= 1e-8`.
    pub rigid_cells: usize,
    /// Largest `|S| / τ*` over those cells.
    pub max_rigid_stress_ratio: f64,
    pub mass: f64,
    pub expected_mass: f64,
    /// Largest mass defect over every iterate.
    pub max_mass_error: f64,
}

impl HbAudit {
    pub fn passed(&self, mass_tol: f64) -> bool {
        self.max_plastic_ratio <= 1.0
            && self.max_rigid_stress_ratio <= 1.0 + 1e-6
            && self.max_mass_error <= mass_tol
            && (self.mass - self.expected_mass).abs() <= mass_tol
    }
}

#[derive(Clone, Debug)]
pub struct HbOutcome {
    pub rho: ScalarField,
    pub u: VectorField,
    pub stress_total: SymTensorField,
    pub plastic: SymTensorField,
    pub diagnostics: Option<DiagnosticsRecord>,
    pub audit: HbAudit,
    pub reports: Vec<SolveReport>,
}

fn plastic_ratio(stress: &StressModel, tau: f64, u: &VectorField) -> f64 {
    let du = sym_grad(u);
    (0..u.grid().cell_count())
        .filter_map(|c| stress.plastic_part(&du.tensor_at(c)))
        .map(|p| p.norm() / tau)
        .fold(0.0, f64::max)
}

/// Herschel–Bulkley run: the level is solved once per regularization width
/// in `eps_reg` (descending), each warm-started from the previous one.
pub fn solve_hb(p: &LevelParams, eps_reg: &[f64], opts: &OuterOptions) -> Result<HbOutcome> {
    ensure(p.hb.is_some(), || "Herschel–Bulkley run without hb data".into())?;
    let gamma = p.physical.pressure.gamma;
    ensure(gamma > 1.0 && gamma <= 2.0, || {
        format!("Herschel–Bulkley runs need gamma in (1, 2], got {gamma}")
    })?;
    p.validate()?;
    let StressModel::HerschelBulkley(base) = p.physical.stress else {
        return Err(Error::InvalidParameter("Herschel–Bulkley run needs a yield-stress model".into()));
    };
    let widths: Vec<f64> = if eps_reg.is_empty() { vec![base.eps_reg] } else { eps_reg.to_vec() };
    ensure(widths.iter().all(|&e| e > 0.0 && e.is_finite()), || {
        "regularization widths must be positive".into()
    })?;
    ensure(widths.windows(2).all(|w| w[1] <= w[0]), || {
        "regularization widths must descend".into()
    })?;
    let tau = base.tau_star;
    let mut audit = HbAudit {
        expected_mass: p.expected_mass(),
        ..Default::default()
    };
    let mut reports = Vec::with_capacity(widths.len());
    let mut u = VectorField::zeros(*p.grid());
    let mut level = p.clone();
    let mut rho = None;
    for &w in &widths {
        level.physical.stress = StressModel::HerschelBulkley(base.with_eps_reg(w));
        let stress = level.physical.stress;
        let mut worst = 0.0f64;
        let mut observer = |it: &Iterate<'_>| {
            worst = worst
                .max(plastic_ratio(&stress, tau, it.u))
                .max(plastic_ratio(&stress, tau, it.eu));
        };
        let (r, v, report) = solve_level_observed(&level, &u, opts, &mut observer)?;
        audit.max_plastic_ratio = audit.max_plastic_ratio.max(worst);
        audit.max_mass_error = audit.max_mass_error.max(report.max_mass_error);
        if !report.converged {
            return Err(Error::NonConvergence {
                solver: "herschel-bulkley outer iteration",
                iterations: report.iterations,
                residual: report.last_update(),
            });
        }
        reports.push(report);
        u = v;
        rho = Some(r);
    }
    let rho = rho.expect("at least one width");
    let stress = level.physical.stress;
    let du = sym_grad(&u);
    let grid = *u.grid();
    let mut stress_total = SymTensorField::zeros(grid);
    let mut plastic = SymTensorField::zeros(grid);
    for c in 0..grid.cell_count() {
        let a = du.tensor_at(c);
        let s = stress.eval(&a)?;
        let pp = stress.plastic_part(&a).expect("yield-stress model");
        stress_total.set_tensor(c, &s);
        plastic.set_tensor(c, &pp);
        audit.max_plastic_ratio = audit.max_plastic_ratio.max(pp.norm() / tau);
        if a.norm() <= 1e-8 {
            audit.rigid_cells += 1;
            audit.max_rigid_stress_ratio = audit.max_rigid_stress_ratio.max(s.norm() / tau);
        }
    }
    audit.mass = rho.integral();
    let diagnostics = reports.last().and_then(|r| r.diagnostics.clone());
    Ok(HbOutcome {
        rho,
        u,
        stress_total,
        plastic,
        diagnostics,
        audit,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{HbRegParams, PowerLawParams};

    fn base(n: usize, fx: f64) -> LevelParams {
        let g = Grid::new_2d(n, n, 1.0, 1.0).unwrap();
        LevelParams {
            alpha: 1e-3,
            delta: 0.1,
            eps: 0.1,
            eta: 0.1,
            q: 3.0,
            physical: PhysicalData {
                mass: 2.0,
                pressure: PressureLaw::new(1.0, 1.5).unwrap(),
                stress: StressModel::PowerLaw(PowerLawParams::new(1.0, 0.0, 2.0).unwrap()),
                f: VectorField::constant(g, &[fx, 0.0]),
                g: VectorField::zeros(g),
            },
            hb: None,
        }
    }

    fn quick() -> OuterOptions {
        OuterOptions {
            diagnostics: false,
            ..Default::default()
        }
    }

    #[test]
    fn trivial_data_is_a_fixed_point() {
        let p = base(12, 0.0);
        let (rho, u, rep) = solve_level(&p, &VectorField::zeros(*p.grid()), &quick()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!(u.data().iter().all(|&x| x == 0.0));
        assert!(rho.values().iter().all(|&r| (r - 2.0).abs() < 1e-12));
        assert!(rep.fixed_point_residual.unwrap() < 1e-12);
    }

    #[test]
    fn e_is_deterministic() {
        let p = base(12, 1.0);
        let v = VectorField::from_fn(*p.grid(), |x| {
            let b = (x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1])) * 4.0;
            [b, -0.5 * b, 0.0]
        });
        let mut v = v;
        v.zero_boundary();
        let a = apply_E(&v, &p).unwrap();
        let b = apply_E(&v, &p).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn forced_level_converges_and_keeps_mass() {
        let p = base(12, 1e-3);
        let expected = p.expected_mass();
        let mut seen = 0;
        let mut obs = |it: &Iterate<'_>| {
            seen += 1;
            assert!((it.rho.integral() - expected).abs() <= 1e-10);
            assert!(it.rho.min() >= -1e-13);
        };
        let (_, u1, rep) =
            solve_level_observed(&p, &VectorField::zeros(*p.grid()), &quick(), &mut obs).unwrap();
        assert!(rep.converged, "{:?}", rep.updates);
        assert_eq!(seen, rep.iterations);
        assert!(rep.fixed_point_residual.unwrap() <= 1e-8);

        let p2 = base(12, 2e-3);
        let (_, u2, _) = solve_level(&p2, &VectorField::zeros(*p.grid()), &quick()).unwrap();
        let ratio = lebesgue_norm(&u2, 2.0).unwrap() / lebesgue_norm(&u1, 2.0).unwrap();
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn geometric_ladder_shape() {
        let l = GeometricLadder::new(Rung {
            alpha: 1e-2,
            delta: 1e-1,
            eps: 1e-1,
            eta: 1e-1,
            eps_reg: None,
        });
        let rungs = l.rungs().unwrap();
        let last = rungs.last().unwrap();
        assert_eq!(last.alpha, 1e-8);
        assert_eq!(last.eps, 1e-3);
        for w in rungs.windows(2) {
            assert!(w[1].alpha <= w[0].alpha && w[1].eps <= w[0].eps);
        }
        let p = base(8, 0.0);
        let s = LadderSchedule::geometric(&p, &l, true).unwrap();
        assert!(s.is_complete());
        let mut bad = s.levels.clone();
        bad.swap(0, 1);
        assert!(LadderSchedule::new(bad, true).is_err());
    }

    #[test]
    fn rejects_inadmissible_levels() {
        let mut p = base(8, 0.0);
        p.q = 2.0;
        assert!(p.validate().is_err());
        let mut p = base(8, 0.0);
        p.physical.stress = StressModel::PowerLaw(PowerLawParams::new(1.0, 0.0, 1.1).unwrap());
        assert!(p.validate().is_err());
        let mut p = base(8, 0.0);
        p.alpha = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn hb_constant_source_is_at_rest() {
        let mut p = base(10, 0.0);
        let g = *p.grid();
        p.physical.stress =
            StressModel::HerschelBulkley(HbRegParams::new(1.0, 1.0, 2.0, 0.1).unwrap());
        p.physical.mass = 1.5;
        p.hb = Some(HbData {
            alpha_hb: 1.0,
            beta: 0.0,
            rho_check: ScalarField::constant(g, 1.5),
        });
        let out = solve_hb(&p, &[0.1, 0.01], &quick()).unwrap();
        assert!(out.u.data().iter().all(|&x| x == 0.0));
        assert!(out.rho.values().iter().all(|&r| (r - 1.5).abs() < 1e-12));
        assert!(out.audit.passed(1e-10));
        let mut bad = p.clone();
        bad.physical.pressure = PressureLaw::new(1.0, 2.5).unwrap();
        assert!(solve_hb(&bad, &[0.1], &quick()).is_err());
    }
}

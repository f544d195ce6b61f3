//! Named verification suites shared by the command line and the test harness.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bogovskii_corpus, divergence_defect, energy_identity_residual, epsilon_scaling_study,
    friedrichs_commutator, BogovskiiOp,
};
use crate::constitutive::{
    g_eps, hb_plastic_stress, HbRegParams, PowerLawParams, PressureLaw, SmallMat, StressModel,
};
use crate::continuity::{
    renorm_residual_with_source, solve_transport, transport_source, Renormalization,
    TransportProblem,
};
use crate::error::{Error, Result};
use crate::fields::{jacobian, lebesgue_norm, Field, Grid, ScalarField, VectorField};
use crate::outer::{solve_level, LevelParams, OuterOptions, PhysicalData, Relaxation};

pub const SUITES: [&str; 7] = [
    "constitutive",
    "hb-bounds",
    "bogovskii",
    "friedrichs",
    "renorm",
    "energy",
    "scaling",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
}

impl Check {
    /// Passes when `value <= limit`.
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= limit,
            value,
            limit,
        }
    }

    /// Passes when `value >= limit`.
    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= limit,
            value,
            limit,
        }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            passed: ok,
            value: if ok { 1.0 } else { 0.0 },
            limit: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn timed(suite: &str, body: impl FnOnce() -> Result<Vec<Check>>) -> Result<SuiteReport> {
    let t = Instant::now();
    let checks = body()?;
    Ok(SuiteReport {
        suite: suite.to_string(),
        checks,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Runs one of [`SUITES`] by name.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "constitutive" => constitutive_suite(seed, 10_000),
        "bogovskii" => bogovskii_suite(64),
        "friedrichs" => friedrichs_suite(128),
        "renorm" => renorm_suite(),
        "energy" => energy_suite(),
        "scaling" => scaling_suite(),
        "hb-bounds" => hb_bounds_suite(seed),
        other => Err(Error::InvalidParameter(format!(
            "unknown suite '{other}' (known: {}, all)",
            SUITES.join(", ")
        ))),
    }
}

fn random_sym(rng: &mut ChaCha8Rng, d: usize) -> SmallMat {
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    let mut a = SmallMat::zeros(d);
    for i in 0..d {
        for j in i..d {
            let v = scale * rng.random_range(-1.0..1.0);
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    a
}

/// Both growth bounds hold with equality for `lambda0 = 0`, so the sampled
/// ratios are compared with a rounding allowance.
pub const GROWTH_ROUNDING: f64 = 1e-12;

/// Monotonicity and growth of the power-law and regularized Herschel–Bulkley
/// stresses on random symmetric matrices.
pub fn constitutive_suite(seed: u64, samples: usize) -> Result<SuiteReport> {
    timed("constitutive", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checks = Vec::new();
        let laws = [(1.0, 0.0, 1.5), (0.7, 0.4, 2.0), (1.3, 0.25, 3.0), (0.5, 1.0, 1.2)];
        for d in [2usize, 3] {
            for &(mu0, lambda0, r) in &laws {
                let p = PowerLawParams::new(mu0, lambda0, r)?;
                let model = StressModel::PowerLaw(p);
                let (c1, c2) = (p.growth_upper(d), p.growth_lower());
                let (mut mono, mut upper, mut lower) = (f64::INFINITY, 0.0f64, f64::INFINITY);
                for _ in 0..samples {
                    let a = random_sym(&mut rng, d);
                    let b = random_sym(&mut rng, d);
                    let (sa, sb) = (model.eval(&a)?, model.eval(&b)?);
                    mono = mono.min(sa.sub(&sb).ddot(&a.sub(&b)));
                    let n = a.norm();
                    if n > 0.0 {
                        upper = upper.max(sa.norm() / (c1 * n.powf(r - 1.0)));
                        lower = lower.min(sa.ddot(&a) / (c2 * n.powf(r)));
                    }
                }
                let tag = format!("power-law d={d} mu0={mu0} lambda0={lambda0} r={r}");
                checks.push(Check::at_least(format!("{tag} monotone"), mono, 0.0));
                checks.push(Check::at_most(format!("{tag} |S| / C1|A|^(r-1)"), upper, 1.0 + GROWTH_ROUNDING));
                checks.push(Check::at_least(format!("{tag} S:A / C2|A|^r"), lower, 1.0 - GROWTH_ROUNDING));
            }
            for eps in [1.0, 0.1, 0.01] {
                let model = StressModel::HerschelBulkley(HbRegParams::new(0.8, 1.0, 1.6, eps)?);
                let mut mono = f64::INFINITY;
                for _ in 0..samples {
                    let a = random_sym(&mut rng, d);
                    let b = random_sym(&mut rng, d);
                    mono = mono.min(model.eval(&a)?.sub(&model.eval(&b)?).ddot(&a.sub(&b)));
                }
                checks.push(Check::at_least(format!("herschel-bulkley d={d} eps={eps} monotone"), mono, 0.0));
            }
        }
        Ok(checks)
    })
}

/// Bounds of the regularizer `g_ε` and of the plastic stress.
pub fn hb_bounds_suite(seed: u64) -> Result<SuiteReport> {
    timed("hb-bounds", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checks = Vec::new();
        let points = 1000;
        for eps in [1.0, 0.1, 0.01] {
            let s: Vec<f64> = (0..points).map(|i| 3.0 * eps * i as f64 / (points - 1) as f64).collect();
            let g: Vec<f64> = s.iter().map(|&x| g_eps(x, eps)).collect();
            let over = s
                .iter()
                .zip(&g)
                .map(|(&x, &v)| v - (1.0 / eps).min(if x > 0.0 { 1.0 / x } else { f64::INFINITY }))
                .fold(f64::NEG_INFINITY, f64::max);
            let rise = g.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
            let slope = s
                .windows(2)
                .zip(g.windows(2))
                .map(|(x, v)| (v[1] - v[0]) / (x[1] - x[0]))
                .fold(f64::INFINITY, f64::min);
            let floor = -4.0 / (9.0 * eps * eps) * (1.0 + 1e-6);
            checks.push(Check::at_most(format!("eps={eps} g - min(1/eps, 1/s)"), over, 0.0));
            checks.push(Check::at_most(format!("eps={eps} largest increment"), rise, 0.0));
            checks.push(Check::at_least(format!("eps={eps} difference slope"), slope, floor));
            let tau = 0.75;
            let p = HbRegParams::new(tau, 1.0, 1.5, eps)?;
            let mut worst = 0.0f64;
            for _ in 0..10_000 {
                let d = if rng.random_bool(0.5) { 2 } else { 3 };
                let a = random_sym(&mut rng, d);
                worst = worst.max(hb_plastic_stress(&a, &p).norm());
            }
            checks.push(Check::at_most(format!("eps={eps} max |P_eps(A)|"), worst, tau));
        }
        Ok(checks)
    })
}

/// `div B(f) = f` on the corpus, linearity and the gradient bound audit.
pub fn bogovskii_suite(n: usize) -> Result<SuiteReport> {
    timed("bogovskii", || {
        let g = Grid::new_2d(n, n, 1.0, 1.0)?;
        let op = BogovskiiOp::new(&g)?;
        let corpus = bogovskii_corpus(&g);
        let mut checks = Vec::new();
        let mut worst = 0.0f64;
        let mut support = true;
        let mut bound = 0.0f64;
        let mut psis = Vec::with_capacity(corpus.len());
        for f in &corpus {
            let psi = op.apply(f)?;
            worst = worst.max(divergence_defect(&psi, f)?);
            support &= psi.vanishes_on_boundary();
            let grad_norm: f64 = {
                let jac = jacobian(&psi);
                let s: f64 = jac.iter().map(|j| j.norm().powi(2)).sum();
                (s * g.cell_volume()).sqrt()
            };
            bound = bound.max(grad_norm / lebesgue_norm(f, 2.0)?);
            psis.push(psi);
        }
        checks.push(Check::at_most(
            format!("max relative divergence defect over {} fields", corpus.len()),
            worst,
            0.02,
        ));
        checks.push(Check::flag("zero on boundary cells", support));
        checks.push(Check::at_most("max |grad B f|_2 / |f|_2", bound, 10.0));
        let mut sum = corpus[0].clone();
        sum.axpy(1.0, &corpus[1]);
        let lhs = op.apply(&sum)?;
        let mut gap = lhs.clone();
        gap.axpy(-1.0, &psis[0]);
        gap.axpy(-1.0, &psis[1]);
        let scale = lhs.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let lin = gap.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
        checks.push(Check::at_most("linearity B(f+g) - Bf - Bg", lin, 1e-12));
        Ok(checks)
    })
}

fn periodic_trig(n: usize) -> Result<(Grid, ScalarField, ScalarField)> {
    let g = Grid::new_2d(n, n, 1.0, 1.0)?.into_periodic();
    let a = ScalarField::from_fn(g, |x| 1.5 + (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos());
    let b = ScalarField::from_fn(g, |x| (2.0 * PI * (x[0] + 2.0 * x[1])).cos() + 0.5 * (4.0 * PI * x[1]).sin());
    Ok((g, a, b))
}

/// Decay of the Friedrichs commutator as the mollifier width shrinks.
pub fn friedrichs_suite(n: usize) -> Result<SuiteReport> {
    timed("friedrichs", || {
        let (g, a, b) = periodic_trig(n)?;
        let h = g.min_h();
        let norms = friedrichs_commutator(&a, &b, &[8.0 * h, 4.0 * h, 2.0 * h], 2.0)?;
        let mut checks = vec![
            Check::flag("norms decrease", norms.windows(2).all(|w| w[1] < w[0])),
            Check::at_most("final / initial", norms[2] / norms[0], 0.2),
        ];
        let constant = ScalarField::constant(g, 2.0);
        let zero = friedrichs_commutator(&a, &constant, &[4.0 * h], 2.0)?[0];
        checks.push(Check::at_most("constant b gives zero", zero, 1e-12));
        Ok(checks)
    })
}

fn swirl(g: Grid, amp: f64) -> VectorField {
    let mut v = VectorField::zeros(g);
    for c in 0..g.cell_count() {
        let x = g.unit_center(c);
        v.set(c, 0, amp * (PI * x[0]).sin().powi(2) * (2.0 * PI * x[1]).sin() + 0.3 * amp * (PI * x[0]).sin());
        v.set(c, 1, -amp * (2.0 * PI * x[0]).sin() * (PI * x[1]).sin().powi(2));
    }
    v.zero_boundary();
    v
}

/// Renormalized transport residuals of discrete continuity solutions shrink
/// under refinement.
pub fn renorm_suite() -> Result<SuiteReport> {
    timed("renorm", || {
        let mut checks = Vec::new();
        let renorms = [
            ("square", Renormalization::Square),
            ("power 1.5", Renormalization::Power { exponent: 1.5 }),
        ];
        let mut table = vec![Vec::new(); renorms.len()];
        for n in [16usize, 32, 64] {
            let g = Grid::new_2d(n, n, 1.0, 1.0)?;
            let tp = TransportProblem::relaxed(0.05, 0.1, 1.0, swirl(g, 0.8));
            let rho = solve_transport(&tp)?;
            let source = transport_source(&tp, &rho)?;
            let phi = ScalarField::from_fn(g, |x| 1.0 + 0.5 * (PI * x[0]).cos() * (PI * x[1]).cos());
            let rho_c = rho.map(|x| x.max(0.0));
            for (k, (_, b)) in renorms.iter().enumerate() {
                table[k].push(renorm_residual_with_source(&rho_c, &tp.v, *b, &phi, &source)?.abs());
            }
        }
        for (k, (name, _)) in renorms.iter().enumerate() {
            let r = &table[k];
            checks.push(Check::flag(
                format!("b = {name}: residual decreases over n = 16, 32, 64"),
                r[1] < r[0] && r[2] < r[1],
            ));
            checks.push(Check::at_most(format!("b = {name}: residual(64) / residual(32)"), r[2] / r[1], 0.6));
        }
        Ok(checks)
    })
}

/// Forcing shared by the energy and scaling studies.
pub fn study_forcing(g: Grid, amp: f64) -> (VectorField, VectorField) {
    let mut f = VectorField::zeros(g);
    let mut body = VectorField::zeros(g);
    for c in 0..g.cell_count() {
        let x = g.unit_center(c);
        f.set(c, 0, amp * (PI * x[0]).sin() * (2.0 * PI * x[1]).sin());
        f.set(c, 1, -amp * (2.0 * PI * x[0]).sin() * (PI * x[1]).sin());
        body.set(c, 0, 0.5 * amp * (PI * x[1]).cos());
    }
    (f, body)
}

/// A 2D Newtonian-or-power-law level on the unit square driven by [`study_forcing`].
pub fn study_level(n: usize, amp: f64, gamma: f64, a: f64, mu0: f64, r: f64) -> Result<LevelParams> {
    let g = Grid::new_2d(n, n, 1.0, 1.0)?;
    let (f, body) = study_forcing(g, amp);
    Ok(LevelParams {
        alpha: 1e-3,
        delta: 0.1,
        eps: 0.1,
        eta: 0.1,
        q: 3.0,
        physical: PhysicalData {
            mass: 1.0,
            pressure: PressureLaw::new(a, gamma)?,
            stress: StressModel::PowerLaw(PowerLawParams::new(mu0, 0.0, r)?),
            f,
            g: body,
        },
        hb: None,
    })
}

/// Energy identity: exact on the constant state, first-order consistent on
/// forced Newtonian solves.
pub fn energy_suite() -> Result<SuiteReport> {
    timed("energy", || {
        let mut checks = Vec::new();
        let g = Grid::new_2d(16, 16, 1.0, 1.0)?;
        let mut rest = study_level(16, 0.0, 1.5, 1.0, 1.0, 2.0)?;
        rest.physical.mass = 2.0;
        let rho = ScalarField::constant(g, 2.0);
        let e = energy_identity_residual(&rho, &VectorField::zeros(g), &rest)?;
        checks.push(Check::at_most("constant state residual", e.residual, 1e-12));
        let opts = OuterOptions {
            diagnostics: false,
            ..Default::default()
        };
        for amp in [0.5, 2.0] {
            let mut res = Vec::new();
            for n in [32usize, 64] {
                let p = study_level(n, amp, 1.5, 1.0, 1.0, 2.0)?;
                let (rho, u, rep) = solve_level(&p, &VectorField::zeros(*p.grid()), &opts)?;
                checks.push(Check::flag(format!("amplitude {amp}, n = {n}: level converged"), rep.converged));
                res.push(energy_identity_residual(&rho, &u, &p)?.residual);
            }
            checks.push(Check::at_most(
                format!("amplitude {amp}: residual(64) / residual(32)"),
                res[1] / res[0],
                0.6,
            ));
        }
        Ok(checks)
    })
}

/// Descending ε values of the scaling study.
pub const SCALING_EPS: [f64; 4] = [1e-1, 3e-2, 1e-2, 3e-3];

/// `ε|∇ϱ_ε|_2` against `ε` for a γ < 2 and a γ > 2 configuration.
pub fn scaling_suite() -> Result<SuiteReport> {
    timed("scaling", || {
        let mut checks = Vec::new();
        let opts = OuterOptions {
            diagnostics: false,
            relaxation: Relaxation::Aitken,
            ..Default::default()
        };
        for gamma in [1.5, 2.5] {
            let base = scaling_level(gamma)?;
            let (fit, reports) = epsilon_scaling_study(&base, &SCALING_EPS, &opts)?;
            checks.push(Check::flag(
                format!("gamma = {gamma}: all rungs converged"),
                reports.iter().all(|r| r.converged),
            ));
            checks.push(Check::at_least(
                format!("gamma = {gamma}: fitted slope"),
                fit.slope.unwrap_or(f64::NAN),
                0.4,
            ));
        }
        Ok(checks)
    })
}

/// The forced configuration used by [`scaling_suite`] at `n = 64`.
pub fn scaling_level(gamma: f64) -> Result<LevelParams> {
    study_level(64, 2.0, gamma, 5.0, 1.0, 2.0)
}

//! Acceptance criteria, one PASS/FAIL line each on stderr.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nnflow::analysis::suites::{
    bogovskii_suite, constitutive_suite, energy_suite, friedrichs_suite, hb_bounds_suite,
    scaling_suite, study_level, SuiteReport,
};
use nnflow::constitutive::{HbRegParams, PowerLawParams, StressModel};
use nnflow::continuity::{mass_of, solve_transport, transport_system, TransportProblem};
use nnflow::fields::{lebesgue_norm, mollify, truncate, Field, Grid, ScalarField, VectorField};
use nnflow::momentum::{
    lagged_matrix, momentum_energy, momentum_residual, solve_momentum, MomentumProblem,
};
use nnflow::outer::{
    run_ladder, solve_hb, solve_level, HbData, LadderSchedule, OuterOptions, Rung,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn line(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

fn criterion(id: usize, title: &str, body: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = body();
    line(&format!(
        "[{}] {id:>2} {title}: {} ({:.1}s)",
        if out.passed { "PASS" } else { "FAIL" },
        out.detail,
        t.elapsed().as_secs_f64()
    ));
    out.passed
}

fn from_suite(r: SuiteReport, max_seconds: f64) -> Outcome {
    let mut detail: Vec<String> = r
        .failures()
        .map(|c| format!("{} = {:e} (limit {:e})", c.name, c.value, c.limit))
        .collect();
    let fast = r.seconds < max_seconds;
    if !fast {
        detail.push(format!("took {:.1}s, budget {max_seconds}s", r.seconds));
    }
    if detail.is_empty() {
        detail.push(format!("{} checks", r.checks.len()));
    }
    Outcome {
        passed: r.passed() && fast,
        detail: detail.join("; "),
    }
}

fn error(e: impl std::fmt::Display) -> Outcome {
    Outcome {
        passed: false,
        detail: format!("error: {e}"),
    }
}

fn grid(n: usize) -> Grid {
    Grid::new_2d(n, n, 1.0, 1.0).unwrap()
}

/// Random smooth velocity vanishing near the boundary.
fn random_transport_field(g: Grid, rng: &mut ChaCha8Rng) -> VectorField {
    let amp = rng.random_range(0.1..5.0);
    let modes: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(1..4) as f64,
                rng.random_range(1..4) as f64,
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let raw = VectorField::from_fn(g, |x| {
        let mut v = [0.0; 3];
        for m in &modes {
            v[0] += amp * m[2] * (m[0] * PI * x[0]).cos() * (m[1] * PI * x[1]).sin();
            v[1] += amp * m[3] * (m[1] * PI * x[0]).sin() * (m[0] * PI * x[1]).cos();
        }
        v
    });
    let delta = 2.0 * g.h(0);
    mollify(&truncate(&raw, delta), delta)
}

fn random_transport(g: Grid, rng: &mut ChaCha8Rng) -> TransportProblem {
    let eps = 10f64.powf(rng.random_range(-3.0..-1.0));
    let eta = 10f64.powf(rng.random_range(-6.0..0.0));
    let mass = rng.random_range(0.5..3.0);
    TransportProblem::relaxed(eps, eta, mass, random_transport_field(g, rng))
}

fn dense_solve(a: &nnflow::linalg::CsrMatrix, b: &[f64]) -> Vec<f64> {
    let n = a.n();
    let dense = a.to_dense();
    let m = DMatrix::from_fn(n, n, |i, j| dense[i][j]);
    m.lu()
        .solve(&DVector::from_column_slice(b))
        .expect("nonsingular")
        .as_slice()
        .to_vec()
}

/// Full-pivot dense solve of the cell equations with the first one replaced by
/// the mass identity `Σ ϱ_c |cell| = M`, which they imply.
fn dense_transport(p: &TransportProblem) -> Vec<f64> {
    let (a, b) = transport_system(p).unwrap();
    let n = a.n();
    let vol = p.grid().cell_volume();
    let dense = a.to_dense();
    let m = DMatrix::from_fn(n, n, |i, j| if i == 0 { vol } else { dense[i][j] });
    let mut rhs = DVector::from_column_slice(&b);
    rhs[0] = p.expected_mass();
    m.full_piv_lu().solve(&rhs).expect("nonsingular").as_slice().to_vec()
}

fn continuity_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_min = f64::INFINITY;
    let mut worst_mass = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..100 {
        let p = random_transport(grid(32), &mut rng);
        let rho = match solve_transport(&p) {
            Ok(r) => r,
            Err(e) => return error(e),
        };
        worst_min = worst_min.min(rho.min());
        worst_mass = worst_mass.max((mass_of(&rho) - p.expected_mass()).abs());

        let small = random_transport(grid(8), &mut rng);
        let rho = solve_transport(&small).unwrap();
        let x = dense_transport(&small);
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gap = x
            .iter()
            .zip(rho.values())
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        worst_oracle = worst_oracle.max(gap / scale);
    }
    Outcome {
        passed: worst_min >= -1e-13 && worst_mass <= 1e-10 && worst_oracle <= 1e-10,
        detail: format!(
            "min rho {worst_min:.3e}, mass error {worst_mass:.3e}, dense oracle gap {worst_oracle:.3e}"
        ),
    }
}

fn smooth_force(g: Grid) -> VectorField {
    VectorField::from_fn(g, |x| [(3.0 * x[1]).sin() + 0.5, x[0] * x[0] - 0.2, 0.0])
}

fn interior_values(u: &VectorField) -> Vec<f64> {
    let g = *u.grid();
    let mut out = Vec::new();
    for c in 0..g.cell_count() {
        if !g.is_boundary_cell(c) {
            out.extend_from_slice(u.at(c));
        }
    }
    out
}

fn with_interior(g: Grid, x: &[f64]) -> VectorField {
    let d = g.dim();
    let mut u = VectorField::zeros(g);
    let mut k = 0;
    for c in 0..g.cell_count() {
        if !g.is_boundary_cell(c) {
            for i in 0..d {
                u.set(c, i, x[k]);
                k += 1;
            }
        }
    }
    u
}

fn rel_l2(a: &VectorField, b: &VectorField) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    lebesgue_norm(&d, 2.0).unwrap() / lebesgue_norm(b, 2.0).unwrap()
}

/// Barzilai–Borwein gradient descent on the discrete energy.
fn descend(p: &MomentumProblem, tol: f64, max_iter: usize) -> VectorField {
    let g = *p.grid();
    let vol = g.cell_volume();
    let gradient = |u: &VectorField| -> Vec<f64> {
        interior_values(&momentum_residual(p, u).unwrap())
            .into_iter()
            .map(|r| r * vol)
            .collect()
    };
    let mut x = vec![0.0; interior_values(&VectorField::zeros(g)).len()];
    let mut gk = gradient(&with_interior(g, &x));
    let g0 = gk.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut step = 1e-3;
    for _ in 0..max_iter {
        let gn = gk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn <= tol * g0 {
            break;
        }
        let trial: Vec<f64> = x.iter().zip(&gk).map(|(a, b)| a - step * b).collect();
        let e_old = momentum_energy(p, &with_interior(g, &x)).unwrap();
        let mut s = step;
        let mut next = trial;
        while momentum_energy(p, &with_interior(g, &next)).unwrap() > e_old + 1e-3 * e_old.abs()
            && s > 1e-12
        {
            s *= 0.5;
            next = x.iter().zip(&gk).map(|(a, b)| a - s * b).collect();
        }
        let gnext = gradient(&with_interior(g, &next));
        let sy: f64 = next
            .iter()
            .zip(&x)
            .zip(gnext.iter().zip(&gk))
            .map(|((a, b), (c, d))| (a - b) * (c - d))
            .sum();
        let ss: f64 = next.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
        step = if sy > 0.0 { ss / sy } else { s };
        x = next;
        gk = gnext;
    }
    with_interior(g, &x)
}

fn momentum_criterion() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let g = grid(16);
    let newtonian = StressModel::PowerLaw(PowerLawParams::new(1.0, 0.0, 2.0).unwrap());
    let p = MomentumProblem::new(newtonian, 0.0, 2.0, smooth_force(g));
    let zero = VectorField::zeros(g);
    let a = lagged_matrix(&p, &zero).unwrap();
    let rhs: Vec<f64> = interior_values(&momentum_residual(&p, &zero).unwrap())
        .into_iter()
        .map(|r| -r * g.cell_volume())
        .collect();
    let direct = with_interior(g, &dense_solve(&a, &rhs));
    match solve_momentum(&p, &zero) {
        Ok((u, _)) => {
            let gap = rel_l2(&u, &direct);
            ok &= gap <= 1e-10;
            notes.push(format!("newtonian gap {gap:.2e}"));
        }
        Err(e) => return error(e),
    }

    let thick = StressModel::PowerLaw(PowerLawParams::new(1.0, 0.3, 3.0).unwrap());
    let p = MomentumProblem::new(thick, 0.01, 3.0, smooth_force(g));
    match solve_momentum(&p, &zero) {
        Ok((u, _)) => {
            let oracle = descend(&p, 1e-12, 200_000);
            let gap = rel_l2(&u, &oracle);
            ok &= gap <= 1e-6;
            notes.push(format!("r = 3 descent gap {gap:.2e}"));
        }
        Err(e) => return error(e),
    }

    let g = grid(32);
    let mut steps = 0;
    for r in [1.5, 2.0, 3.0] {
        let stress = StressModel::PowerLaw(PowerLawParams::new(1.0, 0.3, r).unwrap());
        let p = MomentumProblem::new(stress, 0.01, 3.0, smooth_force(g));
        match solve_momentum(&p, &VectorField::zeros(g)) {
            Ok((_, rep)) => {
                steps += rep.energy_changes.len();
                ok &= rep.converged
                    && rep.energy_changes.iter().all(|&de| de < 0.0)
                    && rep.energies.windows(2).all(|w| w[1] <= w[0]);
            }
            Err(e) => return error(e),
        }
    }
    notes.push(format!("{steps} accepted steps, all energy-decreasing"));
    Outcome {
        passed: ok,
        detail: notes.join(", "),
    }
}

fn rung(alpha: f64, x: f64) -> Rung {
    Rung {
        alpha,
        delta: x,
        eps: x,
        eta: x,
        eps_reg: None,
    }
}

fn ladder_criterion() -> Outcome {
    let t = Instant::now();
    let mut trivial = study_level(32, 0.0, 1.5, 1.0, 1.0, 2.0).unwrap();
    trivial.physical.g = VectorField::zeros(*trivial.grid());
    let (_, _, rep) = match solve_level(&trivial, &VectorField::zeros(*trivial.grid()), &OuterOptions::default()) {
        Ok(x) => x,
        Err(e) => return error(e),
    };
    let trivial_ok = rep.converged && rep.iterations == 1;

    let base = study_level(32, 1.0, 1.5, 1.0, 1.0, 2.0).unwrap();
    let rungs = [rung(1e-3, 0.1), rung(1e-4, 0.05), rung(1e-5, 0.025)];
    let s = LadderSchedule::from_rungs(&base, &rungs, true).unwrap();
    let opts = OuterOptions {
        diagnostics: false,
        ..Default::default()
    };
    let out = match run_ladder(&s, &opts) {
        Ok(o) => o,
        Err(e) => return error(e),
    };
    let seconds = t.elapsed().as_secs_f64();
    let iters: Vec<usize> = out.rungs.iter().map(|r| r.report.iterations).collect();
    let worst = out.rungs.iter().map(|r| r.report.last_update()).fold(0.0, f64::max);
    Outcome {
        passed: trivial_ok
            && out.completed()
            && out.rungs.len() == 3
            && iters.iter().all(|&i| i <= 500)
            && worst <= 1e-8
            && seconds < 120.0,
        detail: format!(
            "trivial iterations {}, rung iterations {iters:?}, worst update {worst:.2e}",
            rep.iterations
        ),
    }
}

fn weak_residual_criterion() -> Outcome {
    let base = study_level(32, 1.0, 1.5, 1.0, 1.0, 2.0).unwrap();
    let rungs = [
        rung(1e-3, 0.1),
        rung(1e-4, 0.05),
        rung(1e-5, 0.025),
        rung(1e-6, 0.0125),
        rung(1e-7, 0.00625),
    ];
    let s = LadderSchedule::from_rungs(&base, &rungs, true).unwrap();
    let out = match run_ladder(&s, &OuterOptions::default()) {
        Ok(o) => o,
        Err(e) => return error(e),
    };
    let weak: Vec<f64> = out
        .rungs
        .iter()
        .filter_map(|r| r.diagnostics().map(|d| d.weak_residual))
        .collect();
    let tail = &weak[weak.len().saturating_sub(3)..];
    Outcome {
        passed: out.completed() && tail.len() == 3 && tail.windows(2).all(|w| w[1] < w[0]),
        detail: format!("weak residuals {:?}", weak.iter().map(|w| format!("{w:.3e}")).collect::<Vec<_>>()),
    }
}

fn hb_criterion() -> Outcome {
    let mut p = study_level(32, 2.0, 1.5, 1.0, 1.0, 2.0).unwrap();
    let g = *p.grid();
    p.physical.stress = StressModel::HerschelBulkley(HbRegParams::new(0.5, 1.0, 2.0, 0.1).unwrap());
    p.hb = Some(HbData {
        alpha_hb: 1.0,
        beta: 0.0,
        rho_check: ScalarField::constant(g, 1.0),
    });
    let opts = OuterOptions {
        diagnostics: false,
        ..Default::default()
    };
    match solve_hb(&p, &[0.1, 0.01, 0.001], &opts) {
        Ok(out) => {
            let a = out.audit;
            Outcome {
                passed: a.passed(1e-10),
                detail: format!(
                    "max |P|/tau {:.6}, rigid cells {} with max |S|/tau {:.3e}, mass error {:.2e}",
                    a.max_plastic_ratio,
                    a.rigid_cells,
                    a.max_rigid_stress_ratio,
                    a.max_mass_error.max((a.mass - a.expected_mass).abs())
                ),
            }
        }
        Err(e) => error(e),
    }
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    results.push(criterion(1, "constitutive properties", || {
        constitutive_suite(11, 10_000).map_or_else(error, |r| from_suite(r, 5.0))
    }));
    results.push(criterion(2, "Herschel–Bulkley regularizer", || {
        hb_bounds_suite(11).map_or_else(error, |r| from_suite(r, 5.0))
    }));
    results.push(criterion(3, "continuity solver", || {
        let t = Instant::now();
        let mut o = continuity_criterion();
        if t.elapsed().as_secs_f64() >= 60.0 {
            o.passed = false;
        }
        o
    }));
    results.push(criterion(4, "momentum solver", || {
        let t = Instant::now();
        let mut o = momentum_criterion();
        if t.elapsed().as_secs_f64() >= 120.0 {
            o.passed = false;
        }
        o
    }));
    results.push(criterion(5, "fixed point and ladder", ladder_criterion));
    results.push(criterion(6, "energy identity", || {
        energy_suite().map_or_else(error, |r| from_suite(r, f64::INFINITY))
    }));
    results.push(criterion(7, "epsilon scaling", || {
        scaling_suite().map_or_else(error, |r| from_suite(r, 600.0))
    }));
    results.push(criterion(8, "Bogovskii operator", || {
        bogovskii_suite(64).map_or_else(error, |r| from_suite(r, 300.0))
    }));
    results.push(criterion(9, "Friedrichs commutator", || {
        friedrichs_suite(128).map_or_else(error, |r| from_suite(r, f64::INFINITY))
    }));
    results.push(criterion(10, "weak residual along the ladder", weak_residual_criterion));
    results.push(criterion(11, "Herschel–Bulkley end to end", hb_criterion));
    let passed = results.iter().filter(|&&p| p).count();
    line(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len());
}

use std::f64::consts::PI;

use proptest::prelude::*;

use nnflow::analysis::{bogovskii_corpus, commutator_field, level_diagnostics, BogovskiiOp};
use nnflow::analysis::suites::study_level;
use nnflow::constitutive::{
    admissible, dual_exponents, hb_plastic_stress, HbRegParams, PowerLawParams, SmallMat,
    StressModel,
};
use nnflow::continuity::{mass_of, solve_transport, TransportProblem};
use nnflow::fields::{
    div, grad, inner, lebesgue_norm, mollify, sym_grad, truncate, Field, Grid, InteriorMask,
    ScalarField, VectorField,
};
use nnflow::momentum::{solve_momentum, MomentumProblem};
use nnflow::outer::{run_ladder, LadderSchedule, OuterOptions, Rung};

fn sym(d: usize, e: &[f64]) -> SmallMat {
    let mut a = SmallMat::zeros(d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            a.set(i, j, e[k]);
            a.set(j, i, e[k]);
            k += 1;
        }
    }
    a
}

fn sym_pair() -> impl Strategy<Value = (usize, SmallMat, SmallMat)> {
    (2usize..=3).prop_flat_map(|d| {
        let m = d * (d + 1) / 2;
        (
            Just(d),
            prop::collection::vec(-10.0..10.0f64, m),
            prop::collection::vec(-10.0..10.0f64, m),
        )
            .prop_map(|(d, a, b)| (d, sym(d, &a), sym(d, &b)))
    })
}

fn power_law() -> impl Strategy<Value = PowerLawParams> {
    (0.1..2.0f64, 0.0..1.0f64, 1.2..4.0f64).prop_map(|(m, l, r)| PowerLawParams::new(m, l, r).unwrap())
}

fn scalar(g: Grid, v: &[f64]) -> ScalarField {
    let mut f = ScalarField::zeros(g);
    for (c, x) in v.iter().enumerate() {
        f.set(c, *x);
    }
    f
}

fn vector(g: Grid, v: &[f64]) -> VectorField {
    let d = g.dim();
    let mut f = VectorField::zeros(g);
    for c in 0..g.cell_count() {
        for i in 0..d {
            f.set(c, i, v[c * d + i]);
        }
    }
    f
}

/// Random smooth velocity vanishing near the boundary, from four Fourier modes.
fn smooth_velocity(g: Grid, coef: &[f64]) -> VectorField {
    let raw = VectorField::from_fn(g, |x| {
        let mut v = [0.0; 3];
        for (m, c) in coef.chunks(2).enumerate() {
            let k = (m + 1) as f64;
            v[0] += c[0] * (k * PI * x[0]).cos() * (PI * x[1]).sin();
            v[1] += c[1] * (PI * x[0]).sin() * (k * PI * x[1]).cos();
        }
        v
    });
    let delta = 2.0 * g.h(0);
    mollify(&truncate(&raw, delta), delta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn power_law_is_strictly_monotone((d, a, b) in sym_pair(), p in power_law()) {
        let m = StressModel::PowerLaw(p);
        let diff = a.sub(&b);
        let pairing = m.eval(&a).unwrap().sub(&m.eval(&b).unwrap()).ddot(&diff);
        prop_assert!(pairing >= 0.0, "d = {d}: {pairing}");
        if diff.norm() > 1e-12 {
            prop_assert!(pairing > 0.0);
        }
    }

    #[test]
    fn power_law_growth_bounds((d, a, _b) in sym_pair(), p in power_law()) {
        let s = StressModel::PowerLaw(p).eval(&a).unwrap();
        let n = a.norm();
        let upper = p.growth_upper(d) * n.powf(p.r - 1.0);
        prop_assert!(s.norm() <= upper * (1.0 + 1e-12), "{} > {upper}", s.norm());
        prop_assert!(s.ddot(&a) >= p.growth_lower() * n.powf(p.r) * (1.0 - 1e-12));
    }

    #[test]
    fn hb_plastic_part_is_bounded_and_dissipative(
        (_d, a, _b) in sym_pair(),
        tau in 0.01..5.0f64,
        eps in 1e-4..1.0f64,
        scale in -6.0..2.0f64,
    ) {
        let p = HbRegParams::new(tau, 1.0, 2.0, eps).unwrap();
        let a = a.scale(10f64.powf(scale));
        let pp = hb_plastic_stress(&a, &p);
        prop_assert!(pp.norm() <= tau);
        prop_assert!(pp.ddot(&a) >= 0.0);
    }

    #[test]
    fn hb_stress_is_monotone((_d, a, b) in sym_pair(), eps in 1e-3..1.0f64, r in 1.3..3.0f64) {
        let m = StressModel::HerschelBulkley(HbRegParams::new(0.7, 1.0, r, eps).unwrap());
        let pairing = m.eval(&a).unwrap().sub(&m.eval(&b).unwrap()).ddot(&a.sub(&b));
        prop_assert!(pairing >= 0.0);
    }

    #[test]
    fn admissibility_is_monotone_in_gamma(d in 2usize..=3, r in 1.05..5.0f64, g in 1.001..8.0f64, dg in 0.0..4.0f64) {
        if admissible(d, r, g).unwrap().admissible {
            prop_assert!(admissible(d, r, g + dg).unwrap().admissible);
        }
    }

    #[test]
    fn dual_exponent_range(d in 2usize..=3, r in 1.05..5.0f64, g in 1.001..8.0f64) {
        if admissible(d, r, g).unwrap().admissible {
            let e = dual_exponents(d, r, g).unwrap();
            let top = r * g / (r - 1.0) * (1.0 + 1e-12);
            prop_assert!(e.q1_star > 1.0 && e.q1_star <= top, "{e:?}");
            prop_assert!(e.q2_star > 1.0 && e.q2_star <= top, "{e:?}");
            prop_assert!(e.q2_star <= e.q1_star * (1.0 + 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn summation_by_parts(
        n in 6usize..12,
        ly in 0.5..2.0f64,
        seed in prop::collection::vec(-1.0..1.0f64, 2 * 11 * 11 + 11 * 11),
    ) {
        let g = Grid::new_2d(n, n, 1.0, ly).unwrap();
        let m = g.cell_count();
        let mut v = vector(g, &seed[..2 * m]);
        v.zero_boundary();
        let f = scalar(g, &seed[2 * m..3 * m]);
        let lhs = inner(&div(&v), &f).unwrap() + inner(&v, &grad(&f)).unwrap();
        let scale = lebesgue_norm(&v, 2.0).unwrap() * lebesgue_norm(&f, 2.0).unwrap();
        prop_assert!(lhs.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE), "{lhs:e} vs {scale:e}");
    }

    #[test]
    fn sym_grad_is_symmetric(n in 6usize..10, seed in prop::collection::vec(-1.0..1.0f64, 2 * 81)) {
        let g = Grid::new_2d(n, n, 1.0, 1.0).unwrap();
        let u = vector(g, &seed[..2 * g.cell_count()]);
        let du = sym_grad(&u);
        for c in 0..g.cell_count() {
            prop_assert_eq!(du.tensor_at(c).max_asymmetry(), 0.0);
        }
    }

    #[test]
    fn mollifier_contracts_lp(
        n in 8usize..16,
        delta_cells in 1.0..4.0f64,
        p in prop::sample::select(vec![1.0, 1.5, 2.0, 4.0]),
        seed in prop::collection::vec(-1.0..1.0f64, 225),
    ) {
        let g = Grid::new_2d(n, n, 1.0, 1.0).unwrap();
        let f = scalar(g, &seed[..g.cell_count()]);
        let m = mollify(&f, delta_cells * g.h(0));
        prop_assert!(lebesgue_norm(&m, p).unwrap() <= lebesgue_norm(&f, p).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn truncation_is_idempotent_and_nested(
        n in 6usize..16,
        d1 in 0.0..0.3f64,
        d2 in 0.0..0.3f64,
        seed in prop::collection::vec(-1.0..1.0f64, 225),
    ) {
        let g = Grid::new_2d(n, n, 1.0, 1.0).unwrap();
        let f = scalar(g, &seed[..g.cell_count()]);
        let t = truncate(&f, d1);
        prop_assert_eq!(truncate(&t, d1), t);
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (small, big) = (InteriorMask::new(&g, hi), InteriorMask::new(&g, lo));
        for c in 0..g.cell_count() {
            prop_assert!(!small.contains(c) || big.contains(c));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transport_keeps_sign_and_mass(
        coef in prop::collection::vec(-4.0..4.0f64, 8),
        eps in 1e-3..1e-1f64,
        eta_exp in -6.0..0.0f64,
        mass in 0.1..5.0f64,
    ) {
        let g = Grid::new_2d(16, 16, 1.0, 1.0).unwrap();
        let p = TransportProblem::relaxed(eps, 10f64.powf(eta_exp), mass, smooth_velocity(g, &coef));
        let rho = solve_transport(&p).unwrap();
        prop_assert!(rho.min() >= -1e-13, "min {}", rho.min());
        prop_assert!((mass_of(&rho) - mass).abs() <= 1e-12 * mass.max(1.0));
    }

    #[test]
    fn commutator_is_bilinear(
        ca in prop::collection::vec(-1.0..1.0f64, 3),
        cb in prop::collection::vec(-1.0..1.0f64, 3),
        s in -2.0..2.0f64,
    ) {
        let g = Grid::new_2d(24, 24, 1.0, 1.0).unwrap().into_periodic();
        let wave = |c: &[f64], k: f64| ScalarField::from_fn(g, move |x| {
            c[0] * (2.0 * PI * k * x[0]).sin() + c[1] * (2.0 * PI * x[1]).cos() + c[2]
        });
        let (a1, a2, b) = (wave(&ca, 1.0), wave(&cb, 2.0), wave(&cb, 1.0));
        let eps = 3.0 * g.h(0);
        let mut sum = a1.clone();
        sum.axpy(s, &a2);
        let mut want = commutator_field(&a1, &b, eps).unwrap();
        want.axpy(s, &commutator_field(&a2, &b, eps).unwrap());
        let mut gap = commutator_field(&sum, &b, eps).unwrap();
        gap.axpy(-1.0, &want);
        let scale = lebesgue_norm(&want, 2.0).unwrap().max(1.0);
        prop_assert!(lebesgue_norm(&gap, 2.0).unwrap() <= 1e-12 * scale);
        let mut gap = commutator_field(&b, &sum, eps).unwrap();
        let mut want = commutator_field(&b, &a1, eps).unwrap();
        want.axpy(s, &commutator_field(&b, &a2, eps).unwrap());
        gap.axpy(-1.0, &want);
        prop_assert!(lebesgue_norm(&gap, 2.0).unwrap() <= 1e-12 * lebesgue_norm(&want, 2.0).unwrap().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn bogovskii_is_linear(c in prop::collection::vec(-2.0..2.0f64, 4), s in -3.0..3.0f64) {
        let g = Grid::new_2d(24, 24, 1.0, 1.0).unwrap();
        let corpus = bogovskii_corpus(&g);
        let op = BogovskiiOp::new(&g).unwrap();
        let mut f = corpus[0].clone();
        f.axpy(c[0], &corpus[5]);
        f.axpy(c[1], &corpus[11]);
        let mut h = corpus[17].clone();
        h.axpy(c[2], &corpus[3]);
        h.axpy(c[3], &corpus[8]);
        let mut combo = f.clone();
        combo.axpy(s, &h);
        let mut want = op.apply(&f).unwrap();
        want.axpy(s, &op.apply(&h).unwrap());
        let mut gap = op.apply(&combo).unwrap();
        gap.axpy(-1.0, &want);
        prop_assert!(lebesgue_norm(&gap, 2.0).unwrap() <= 1e-12 * lebesgue_norm(&want, 2.0).unwrap());
    }

    #[test]
    fn momentum_solution_ignores_initial_guess(
        r in 1.5..3.0f64,
        seed in prop::collection::vec(-1.0..1.0f64, 2 * 144),
    ) {
        let g = Grid::new_2d(12, 12, 1.0, 1.0).unwrap();
        let force = VectorField::from_fn(g, |x| [(3.0 * x[1]).sin() + 0.5, x[0] * x[0] - 0.2, 0.0]);
        let params = PowerLawParams::new(1.0, 0.2, r).unwrap();
        let p = MomentumProblem::new(StressModel::PowerLaw(params), 0.01, 3.0, force);
        let (u0, _) = solve_momentum(&p, &VectorField::zeros(g)).unwrap();
        let mut start = vector(g, &seed);
        start.zero_boundary();
        let (u1, _) = solve_momentum(&p, &start).unwrap();
        let mut d = u1.clone();
        d.axpy(-1.0, &u0);
        prop_assert!(lebesgue_norm(&d, 2.0).unwrap() <= 1e-7 * lebesgue_norm(&u0, 2.0).unwrap());

        let du = sym_grad(&u0);
        let stress = StressModel::PowerLaw(params);
        let (mut power, mut norm) = (0.0, 0.0);
        for c in 0..g.cell_count() {
            let a = du.tensor_at(c);
            power += stress.eval(&a).unwrap().ddot(&a);
            norm += a.norm().powf(r);
        }
        prop_assert!(power >= params.growth_lower() * norm * (1.0 - 1e-12));
    }
}

#[test]
fn diagnostics_are_pure() {
    let p = study_level(16, 1.0, 1.5, 1.0, 1.0, 2.0).unwrap();
    let g = *p.grid();
    let rho = ScalarField::from_fn(g, |x| 1.0 + 0.2 * (PI * x[0]).cos());
    let u = smooth_velocity(g, &[0.5, -0.3, 0.2, 0.1, 0.0, 0.4, -0.2, 0.3]);
    let a = serde_json::to_string(&level_diagnostics(&rho, &u, &p).unwrap()).unwrap();
    let b = serde_json::to_string(&level_diagnostics(&rho, &u, &p).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn warm_and_cold_ladders_agree() {
    let base = study_level(24, 1.0, 1.5, 1.0, 1.0, 2.0).unwrap();
    let rungs: Vec<Rung> = [(1e-2, 0.1), (1e-3, 0.05), (1e-4, 0.04)]
        .iter()
        .map(|&(alpha, x)| Rung { alpha, delta: x, eps: x, eta: x, eps_reg: None })
        .collect();
    let opts = OuterOptions { diagnostics: false, ..Default::default() };
    let finals: Vec<VectorField> = [true, false]
        .iter()
        .map(|&warm| {
            let s = LadderSchedule::from_rungs(&base, &rungs, warm).unwrap();
            let out = run_ladder(&s, &opts).unwrap();
            assert!(out.completed());
            out.last().unwrap().u.clone()
        })
        .collect();
    let mut d = finals[0].clone();
    d.axpy(-1.0, &finals[1]);
    assert!(lebesgue_norm(&d, 2.0).unwrap() <= 1e-5 * lebesgue_norm(&finals[1], 2.0).unwrap().max(1.0));
}

#[test]
fn every_outer_iterate_keeps_sign_and_mass() {
    use nnflow::outer::{solve_level_observed, Iterate};
    let p = study_level(24, 2.0, 1.5, 1.0, 1.0, 2.0).unwrap();
    let expected = p.expected_mass();
    let mut seen = 0;
    let mut obs = |it: &Iterate<'_>| {
        seen += 1;
        assert!(it.rho.min() >= -1e-13);
        assert!((it.rho.integral() - expected).abs() <= 1e-10);
    };
    let opts = OuterOptions { diagnostics: false, ..Default::default() };
    let (_, _, rep) = solve_level_observed(&p, &VectorField::zeros(*p.grid()), &opts, &mut obs).unwrap();
    assert!(rep.converged);
    assert_eq!(seen, rep.iterations);
    assert!(rep.fixed_point_residual.unwrap() <= opts.tol);
}

//! Numerical checks of the analytic machinery: Bogovskii operator, Friedrichs
//! commutators, energy identities, ε-scaling, defect terms and weak residuals.

pub mod suites;

use std::f64::consts::PI;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constitutive::{dual_exponents, PressureLaw, SmallMat, StressModel};
use crate::continuity::{renorm_residual, renorm_residual_with_source, transport_source, Renormalization};
use crate::error::{ensure, Error, Result};
use crate::fields::{
    div, div_closed, grad, jacobian, lebesgue_norm, mollify, partial, Field, Grid, ScalarField,
    VectorField,
};
use crate::outer::{solve_level, LevelParams, OuterOptions, SolveReport};

/// Gauss–Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// Bogovskii right inverse of the divergence on a rectangle, built from the
/// classical integral formula with a quartic bump weight on a ball around
/// the domain center.
///
/// The discrete field vanishes on the outer cell layer, so the formula is
/// applied on the box spanned by the outer cell centers, with `f` extended
/// bilinearly between centers. For each target point the kernel is written in
/// polar coordinates about the target; the radial integrals of the bump are
/// exact and the radial integrals of `f` are exact for the bilinear interpolant.
#[derive(Clone, Debug)]
pub struct BogovskiiOp {
    grid: Grid,
    center: [f64; 2],
    radius: f64,
    angles: usize,
}

impl BogovskiiOp {
    pub fn new(grid: &Grid) -> Result<Self> {
        if grid.dim() != 2 {
            return Err(Error::UnsupportedDimension(grid.dim()));
        }
        ensure(!grid.is_periodic(), || "Bogovskii operator needs a bounded grid".into())?;
        let center = [
            grid.origin(0) + 0.5 * grid.extent(0),
            grid.origin(1) + 0.5 * grid.extent(1),
        ];
        let inner = (grid.extent(0) - grid.h(0)).min(grid.extent(1) - grid.h(1));
        Ok(Self {
            grid: *grid,
            center,
            radius: 0.3 * inner,
            angles: 64,
        })
    }

    /// Angular quadrature nodes per target point.
    pub fn with_angles(mut self, angles: usize) -> Self {
        self.angles = angles.max(4);
        self
    }

    pub fn center(&self) -> [f64; 2] {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn lo(&self, a: usize) -> f64 {
        self.grid.origin(a) + 0.5 * self.grid.h(a)
    }

    fn hi(&self, a: usize) -> f64 {
        self.grid.origin(a) + self.grid.extent(a) - 0.5 * self.grid.h(a)
    }

    /// `(∫ ω(x + t e) dt, ∫ t ω(x + t e) dt)` over `t >= 0`.
    fn bump_moments(&self, x: [f64; 2], e: [f64; 2]) -> (f64, f64) {
        let r = self.radius;
        let rel = [x[0] - self.center[0], x[1] - self.center[1]];
        let b = e[0] * rel[0] + e[1] * rel[1];
        let c0 = rel[0] * rel[0] + rel[1] * rel[1] - r * r;
        let disc = b * b - c0;
        if disc <= 0.0 {
            return (0.0, 0.0);
        }
        let root = disc.sqrt();
        let s_lo = b.max(-root);
        let s_hi = root;
        if s_hi <= s_lo {
            return (0.0, 0.0);
        }
        let p0 = |s: f64| disc * disc * s - 2.0 / 3.0 * disc * s.powi(3) + s.powi(5) / 5.0;
        let p1 = |s: f64| -(disc - s * s).powi(3) / 6.0;
        let k = 3.0 / (PI * r.powi(6));
        let i0 = p0(s_hi) - p0(s_lo);
        let i1 = p1(s_hi) - p1(s_lo);
        (k * i0, k * (i1 - b * i0))
    }

    /// `(∫ f(x + ρ d) dρ, ∫ ρ f(x + ρ d) dρ)` up to the exit point.
    fn ray_moments(&self, f: &[f64], x: [f64; 2], d: [f64; 2], cuts: &mut Vec<f64>) -> (f64, f64) {
        let g = &self.grid;
        let mut len = f64::INFINITY;
        for a in 0..2 {
            if d[a] > 0.0 {
                len = len.min((self.hi(a) - x[a]) / d[a]);
            } else if d[a] < 0.0 {
                len = len.min((self.lo(a) - x[a]) / d[a]);
            }
        }
        if !(len > 0.0) {
            return (0.0, 0.0);
        }
        cuts.clear();
        cuts.push(0.0);
        cuts.push(len);
        for a in 0..2 {
            if d[a] == 0.0 {
                continue;
            }
            let h = g.h(a);
            let s0 = (x[a] - self.lo(a)) / h;
            let n = g.n(a) as isize;
            let (mut k, step) = if d[a] > 0.0 {
                ((s0 + 1e-9).floor() as isize + 1, 1)
            } else {
                ((s0 - 1e-9).ceil() as isize - 1, -1)
            };
            while (0..n).contains(&k) {
                let rho = (self.lo(a) + k as f64 * h - x[a]) / d[a];
                if rho >= len {
                    break;
                }
                if rho > 0.0 {
                    cuts.push(rho);
                }
                k += step;
            }
        }
        cuts.sort_by(f64::total_cmp);
        let nx = g.n(0);
        let (hx, hy) = (g.h(0), g.h(1));
        let (mut f0, mut f1) = (0.0, 0.0);
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a <= 1e-14 * len {
                continue;
            }
            let mid = 0.5 * (a + b);
            let sx = (x[0] + mid * d[0] - self.lo(0)) / hx;
            let sy = (x[1] + mid * d[1] - self.lo(1)) / hy;
            let i = (sx.floor().max(0.0) as usize).min(nx - 2);
            let j = (sy.floor().max(0.0) as usize).min(g.n(1) - 2);
            let v00 = f[i + nx * j];
            let v10 = f[i + 1 + nx * j];
            let v01 = f[i + nx * (j + 1)];
            let v11 = f[i + 1 + nx * (j + 1)];
            let half = 0.5 * (b - a);
            for &(node, wt) in &GAUSS3 {
                let rho = mid + half * node;
                let tx = (x[0] + rho * d[0] - self.lo(0)) / hx - i as f64;
                let ty = (x[1] + rho * d[1] - self.lo(1)) / hy - j as f64;
                let v = v00 * (1.0 - tx) * (1.0 - ty)
                    + v10 * tx * (1.0 - ty)
                    + v01 * (1.0 - tx) * ty
                    + v11 * tx * ty;
                f0 += half * wt * v;
                f1 += half * wt * rho * v;
            }
        }
        (f0, f1)
    }

    fn point(&self, f: &[f64], x: [f64; 2], nodes: &(Vec<f64>, Vec<f64>)) -> [f64; 2] {
        let rel = [x[0] - self.center[0], x[1] - self.center[1]];
        let dist = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
        let mut cuts = Vec::new();
        let mut out = [0.0; 2];
        let mut add = |theta: f64, weight: f64| {
            let e = [theta.cos(), theta.sin()];
            let (a0, a1) = self.bump_moments(x, e);
            if a0 == 0.0 && a1 == 0.0 {
                return;
            }
            let (f0, f1) = self.ray_moments(f, x, [-e[0], -e[1]], &mut cuts);
            let s = weight * (a0 * f1 + a1 * f0);
            out[0] += s * e[0];
            out[1] += s * e[1];
        };
        if dist > self.radius {
            let phi = (-rel[1]).atan2(-rel[0]);
            let half = (self.radius / dist).asin();
            for (z, w) in nodes.0.iter().zip(&nodes.1) {
                add(phi + half * z, half * w);
            }
        } else {
            let m = 2 * self.angles;
            let w = 2.0 * PI / m as f64;
            for k in 0..m {
                add(w * k as f64, w);
            }
        }
        out
    }

    /// `Ψ = B(f)`; `f` must have zero mean.
    pub fn apply(&self, f: &ScalarField) -> Result<VectorField> {
        ensure(f.grid() == &self.grid, || "field lives on another grid".into())?;
        let l1 = lebesgue_norm(f, 1.0)?;
        let total = f.integral();
        if total.abs() > 1e-10 * l1 {
            return Err(Error::NonZeroMean(total.abs()));
        }
        let g = self.grid;
        let (nx, ny) = (g.n(0), g.n(1));
        // Mean of the bilinear interpolant over the inner box (trapezoid rule).
        let mut trap = 0.0;
        for c in 0..g.cell_count() {
            let idx = g.multi_index(c);
            let wx = if idx[0] == 0 || idx[0] + 1 == nx { 0.5 } else { 1.0 };
            let wy = if idx[1] == 0 || idx[1] + 1 == ny { 0.5 } else { 1.0 };
            trap += wx * wy * f.get(c);
        }
        let cells = ((nx - 1) * (ny - 1)) as f64;
        let shift = trap / cells;
        let vals: Vec<f64> = f.values().iter().map(|v| v - shift).collect();
        let nodes = gauss_legendre(self.angles);
        let mut out = vec![0.0; 2 * g.cell_count()];
        out.par_chunks_mut(2).enumerate().for_each(|(c, slot)| {
            if g.is_boundary_cell(c) {
                return;
            }
            let x = g.center(c);
            let v = self.point(&vals, [x[0], x[1]], &nodes);
            slot.copy_from_slice(&v);
        });
        Ok(VectorField::from_parts(g, out))
    }
}

pub fn bogovskii_apply(f: &ScalarField) -> Result<VectorField> {
    BogovskiiOp::new(f.grid())?.apply(f)
}

/// `|div Ψ - f|_2 / |f|_2` with the one-sided boundary divergence.
pub fn divergence_defect(psi: &VectorField, f: &ScalarField) -> Result<f64> {
    psi.check_same_grid(f)?;
    let mut e = div_closed(psi);
    e.axpy(-1.0, f);
    let nf = lebesgue_norm(f, 2.0)?;
    Ok(if nf > 0.0 { lebesgue_norm(&e, 2.0)? / nf } else { lebesgue_norm(&e, 2.0)? })
}

/// The pressure-estimate test function `Ψ = B(ϱ^{γ/(r-1)} - mean)`.
#[derive(Clone, Debug)]
pub struct PressureTestFunction {
    pub psi: VectorField,
    pub source: ScalarField,
    /// `∫ ϱ^γ (ϱ^{γ/(r-1)} - mean)`, the pairing an exact inverse would give.
    pub target_pairing: f64,
    /// `-⟨∇ϱ^γ, Ψ⟩`.
    pub achieved_pairing: f64,
}

pub fn pressure_test_function(rho: &ScalarField, r: f64, gamma: f64) -> Result<PressureTestFunction> {
    ensure(rho.min() >= 0.0, || "density must be nonnegative".into())?;
    ensure(r > 1.0 && gamma > 1.0, || "need r > 1 and gamma > 1".into())?;
    let g = *rho.grid();
    let s = rho.map(|x| x.powf(gamma / (r - 1.0)));
    let source = if s.max() == s.min() {
        ScalarField::zeros(g)
    } else {
        let mean = s.integral() / g.volume();
        s.map(|x| x - mean)
    };
    let psi = bogovskii_apply(&source)?;
    let p = rho.map(|x| x.powf(gamma));
    let vol = g.cell_volume();
    let target_pairing = p
        .values()
        .iter()
        .zip(source.values())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        * vol;
    let gp = grad(&p);
    let achieved_pairing = -gp
        .data()
        .iter()
        .zip(psi.data())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        * vol;
    Ok(PressureTestFunction {
        psi,
        source,
        target_pairing,
        achieved_pairing,
    })
}

/// `r_ε(a, b)_i = ∂_i(a_ε b) - ∂_i((ab)_ε)`, one component per axis.
pub fn commutator_field(a: &ScalarField, b: &ScalarField, eps: f64) -> Result<VectorField> {
    a.check_same_grid(b)?;
    let g = *a.grid();
    ensure(eps >= g.min_h(), || {
        format!("commutator radius {eps:e} is below the grid spacing {:e}", g.min_h())
    })?;
    let ae = mollify(a, eps);
    let mut left = ScalarField::zeros(g);
    let mut prod = ScalarField::zeros(g);
    for c in 0..g.cell_count() {
        left.set(c, ae.get(c) * b.get(c));
        prod.set(c, a.get(c) * b.get(c));
    }
    let right = mollify(&prod, eps);
    let parts: Vec<ScalarField> = (0..g.dim())
        .map(|i| {
            let mut p = partial(&left, i);
            p.axpy(-1.0, &partial(&right, i));
            p
        })
        .collect();
    VectorField::from_components(&parts)
}

/// `|r_ε(a, b)|_{L^s}` for each radius in `eps_list` (descending).
pub fn friedrichs_commutator(a: &ScalarField, b: &ScalarField, eps_list: &[f64], s: f64) -> Result<Vec<f64>> {
    ensure(!eps_list.is_empty(), || "no radii given".into())?;
    ensure(eps_list.windows(2).all(|w| w[1] <= w[0]), || "radii must descend".into())?;
    eps_list
        .iter()
        .map(|&e| lebesgue_norm(&commutator_field(a, b, e)?, s))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyForm {
    /// Coefficient `γη/(γ-1)` on `∫ϱ^γ`.
    #[default]
    Appendix,
    /// Coefficient `γη/(2(γ-1))` on `∫ϱ^γ`.
    MainText,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyIdentity {
    /// `∫S(Du):Du`, `(4ε/γ)∫|∇ϱ^{γ/2}|²`, `α∫|∇u|^q`, `c∫ϱ^γ`,
    /// `(ηM/|Ω|)∫|u|²/2`, then yield-stress extras if present.
    pub lhs: Vec<f64>,
    /// `(γη/(γ-1))(M/|Ω|)∫ϱ^{γ-1}`, `∫(ϱf+g)·u`, then extras.
    pub rhs: Vec<f64>,
    pub residual: f64,
}

impl EnergyIdentity {
    pub fn lhs_total(&self) -> f64 {
        self.lhs.iter().sum()
    }

    pub fn rhs_total(&self) -> f64 {
        self.rhs.iter().sum()
    }
}

pub fn energy_identity_residual(rho: &ScalarField, u: &VectorField, p: &LevelParams) -> Result<EnergyIdentity> {
    energy_identity_with(rho, u, p, EnergyForm::Appendix)
}

/// Both sides of the level energy identity, pressure terms weighted by `a`.
pub fn energy_identity_with(
    rho: &ScalarField,
    u: &VectorField,
    p: &LevelParams,
    form: EnergyForm,
) -> Result<EnergyIdentity> {
    rho.check_same_grid(u)?;
    u.check_same_grid(&p.physical.f)?;
    let g = *rho.grid();
    let vol = g.cell_volume();
    let ph = &p.physical;
    let (a, gamma) = (ph.pressure.a, ph.pressure.gamma);
    let rho_c = rho.map(|x| x.max(0.0));
    let jac = jacobian(u);
    let mut stress_power = 0.0;
    let mut damp = 0.0;
    for j in &jac {
        let du = j.sym();
        stress_power += ph.stress.eval(&du)?.ddot(&du);
        damp += j.norm().powf(p.q);
    }
    let half = grad(&rho_c.map(|x| x.powf(0.5 * gamma)));
    let grad_sq: f64 = half.data().iter().map(|v| v * v).sum();
    let sum = |f: &dyn Fn(usize) -> f64| (0..g.cell_count()).map(f).sum::<f64>() * vol;
    let int_pg = sum(&|c| rho_c.get(c).powf(gamma));
    let int_pg1 = sum(&|c| rho_c.get(c).powf(gamma - 1.0));
    let u_sq = |c: usize| u.at(c).iter().map(|x| x * x).sum::<f64>();
    let int_u2 = sum(&|c| u_sq(c));
    let mean = ph.mass / g.volume();
    let k = gamma / (gamma - 1.0);
    let rho_coef = match form {
        EnergyForm::Appendix => k * p.eta,
        EnergyForm::MainText => 0.5 * k * p.eta,
    };
    let work = sum(&|c| {
        (0..g.dim())
            .map(|i| (rho.get(c) * ph.f.get(c, i) + ph.g.get(c, i)) * u.get(c, i))
            .sum()
    });
    let mut lhs = vec![
        stress_power * vol,
        a * 4.0 * p.eps / gamma * grad_sq * vol,
        p.alpha * damp * vol,
        a * rho_coef * int_pg,
        p.eta * mean * int_u2 / 2.0,
    ];
    let mut rhs = vec![a * k * p.eta * mean * int_pg1, work];
    if let Some(hb) = &p.hb {
        let rc = &hb.rho_check;
        lhs.push(hb.beta * sum(&|c| rho.get(c) * u_sq(c)));
        lhs.push(a * k * hb.alpha_hb * int_pg);
        lhs.push(0.5 * hb.alpha_hb * sum(&|c| rc.get(c) * u_sq(c)));
        rhs.push(a * k * hb.alpha_hb * sum(&|c| rc.get(c) * rho_c.get(c).powf(gamma - 1.0)));
        rhs.push(0.5 * hb.alpha_hb * sum(&|c| rho.get(c) * u_sq(c)));
    }
    let l: f64 = lhs.iter().sum();
    let r: f64 = rhs.iter().sum();
    let residual = (l - r).abs() / l.abs().max(r.abs()).max(1e-30);
    Ok(EnergyIdentity { lhs, rhs, residual })
}

/// `ε |∇ϱ|_{L^2}`, the quantity whose ε-slope is studied.
pub fn scaling_quantity(rho: &ScalarField, eps: f64) -> Result<f64> {
    Ok(eps * lebesgue_norm(&grad(rho), 2.0)?)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScalingSample {
    pub eps: f64,
    pub value: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Least-squares slope of `log value` against `log ε`.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub points: Vec<(f64, f64)>,
    pub excluded: usize,
    /// All usable values vanish, so no slope exists.
    pub degenerate: bool,
}

pub fn epsilon_scaling_fit(samples: &[ScalingSample]) -> Result<ScalingFit> {
    let usable: Vec<&ScalingSample> = samples
        .iter()
        .filter(|s| s.converged && s.value.is_finite() && s.eps > 0.0)
        .collect();
    let mut excluded = samples.len() - usable.len();
    if excluded > 0 {
        warn!("{excluded} non-converged or non-finite samples left out of the scaling fit");
    }
    if !usable.is_empty() && usable.iter().all(|s| s.value == 0.0) {
        return Ok(ScalingFit {
            slope: None,
            intercept: None,
            points: usable.iter().map(|s| (s.eps, s.value)).collect(),
            excluded,
            degenerate: true,
        });
    }
    let points: Vec<(f64, f64)> = usable
        .iter()
        .filter(|s| s.value > 0.0)
        .map(|s| (s.eps, s.value))
        .collect();
    excluded += usable.len() - points.len();
    ensure(points.len() >= 4, || {
        format!("scaling fit needs at least 4 usable points, got {}", points.len())
    })?;
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), p| (l.min(p.0), h.max(p.0)));
    if (hi / lo).log10() < 2.0 {
        warn!("scaling fit spans only {:.2} decades of eps", (hi / lo).log10());
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    ensure(sxx > 0.0, || "scaling fit needs distinct eps values".into())?;
    let slope = sxy / sxx;
    Ok(ScalingFit {
        slope: Some(slope),
        intercept: Some(my - slope * mx),
        points,
        excluded,
        degenerate: false,
    })
}

/// Solves the level at each ε (descending, warm-started) and fits the slope
/// of `ε|∇ϱ_ε|_{L^2}`.
pub fn epsilon_scaling_study(
    base: &LevelParams,
    eps_values: &[f64],
    opts: &OuterOptions,
) -> Result<(ScalingFit, Vec<SolveReport>)> {
    ensure(eps_values.windows(2).all(|w| w[1] < w[0]), || "eps values must descend".into())?;
    let mut u = VectorField::zeros(*base.grid());
    let mut samples = Vec::with_capacity(eps_values.len());
    let mut reports = Vec::with_capacity(eps_values.len());
    for &eps in eps_values {
        let mut p = base.clone();
        p.eps = eps;
        let (rho, v, rep) = solve_level(&p, &u, opts)?;
        samples.push(ScalingSample {
            eps,
            value: scaling_quantity(&rho, eps)?,
            converged: rep.converged,
        });
        if rep.converged {
            u = v;
        }
        reports.push(rep);
    }
    Ok((epsilon_scaling_fit(&samples)?, reports))
}

/// Defect-identity terms between a coarse and a fine rung for one `φ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectEntry {
    pub phi: usize,
    /// `∫S(Du_c):Du_c φ - ∫S(Du_f):Du_f φ`.
    pub stress_gap: f64,
    pub transport_coarse: f64,
    pub transport_fine: f64,
    pub transport_gap: f64,
}

fn stress_pairing(u: &VectorField, stress: &StressModel, phi: &ScalarField) -> Result<f64> {
    let jac = jacobian(u);
    let mut s = 0.0;
    for (c, j) in jac.iter().enumerate() {
        let du = j.sym();
        s += stress.eval(&du)?.ddot(&du) * phi.get(c);
    }
    Ok(s * u.grid().cell_volume())
}

/// `-1/(γ-1) ∫ϱ^γ u·∇φ + ∫ϱ^γ div u φ`.
pub fn transport_defect(rho: &ScalarField, u: &VectorField, gamma: f64, phi: &ScalarField) -> Result<f64> {
    rho.check_same_grid(u)?;
    rho.check_same_grid(phi)?;
    let g = *rho.grid();
    let gp = grad(phi);
    let du = div(u);
    let mut s = 0.0;
    for c in 0..g.cell_count() {
        let p = rho.get(c).max(0.0).powf(gamma);
        let flux: f64 = (0..g.dim()).map(|k| u.get(c, k) * gp.get(c, k)).sum();
        s += -p * flux / (gamma - 1.0) + p * du.get(c) * phi.get(c);
    }
    Ok(s * g.cell_volume())
}

pub fn defect_terms(
    coarse: (&ScalarField, &VectorField),
    fine: (&ScalarField, &VectorField),
    stress: &StressModel,
    gamma: f64,
    phis: &[ScalarField],
) -> Result<Vec<DefectEntry>> {
    coarse.0.check_same_grid(fine.0)?;
    phis.iter()
        .enumerate()
        .map(|(i, phi)| {
            let stress_gap = stress_pairing(coarse.1, stress, phi)? - stress_pairing(fine.1, stress, phi)?;
            let tc = transport_defect(coarse.0, coarse.1, gamma, phi)?;
            let tf = transport_defect(fine.0, fine.1, gamma, phi)?;
            Ok(DefectEntry {
                phi: i,
                stress_gap,
                transport_coarse: tc,
                transport_fine: tf,
                transport_gap: tc - tf,
            })
        })
        .collect()
}

/// Smooth zero-mean scalar fields on the unit square whose boundary trace vanishes
/// at the corners and integrates to zero.
///
/// At a corner cell every one-sided difference of a field vanishing on the outer
/// ring is zero. A trace with nonzero mean shifts the node-box mean by `h/2·∮f`.
pub fn bogovskii_corpus(grid: &Grid) -> Vec<ScalarField> {
    let g = *grid;
    type Shape = Box<dyn Fn(f64, f64) -> f64 + Sync>;
    let mut shapes: Vec<Shape> = Vec::new();
    for (k, l) in [(1.0, 1.0), (2.0, 1.0), (2.0, 3.0), (3.0, 1.0)] {
        shapes.push(Box::new(move |x, y| (k * PI * x).sin() * (l * PI * y).cos()));
        shapes.push(Box::new(move |x, y| (l * PI * x).cos() * (k * PI * y).sin()));
    }
    for k in [2.0, 4.0] {
        shapes.push(Box::new(move |x, _| (k * PI * x).sin()));
        shapes.push(Box::new(move |_, y| (k * PI * y).sin()));
    }
    shapes.push(Box::new(|x, y| (x - 0.5) * (PI * y).sin()));
    shapes.push(Box::new(|x, y| (y - 0.5) * (PI * x).sin().powi(2)));
    shapes.push(Box::new(|x, y| (2.0 * PI * x).sin() * (2.0 * PI * y).sin() + (PI * x).cos() * (PI * y).sin()));
    shapes.push(Box::new(|x, y| x * (1.0 - x) * y * (1.0 - y) * (3.0 * (x - y) + (2.0 * PI * x).sin())));
    shapes.push(Box::new(|x, y| {
        let b = |cx: f64, cy: f64| (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.02).exp();
        b(0.35, 0.4) - b(0.65, 0.6)
    }));
    shapes.push(Box::new(|x, y| (PI * x).sin() * (PI * y).sin() * (2.0 * PI * (x - y)).sin()));
    shapes.push(Box::new(|x, y| x * y * (1.0 - x) * (1.0 - y) * (5.0 * (x - y)).sin()));
    shapes.push(Box::new(|x, y| {
        (PI * x).sin() * (PI * y).sin() * ((x - 0.5).powi(3) + (y - 0.5) * (x - 0.3).powi(2))
    }));
    shapes
        .into_iter()
        .map(|shape| {
            let mut s = ScalarField::zeros(g);
            for c in 0..g.cell_count() {
                let x = g.unit_center(c);
                s.set(c, shape(x[0], x[1]));
            }
            let m = s.mean();
            for c in 0..g.cell_count() {
                s.set(c, s.get(c) - m);
            }
            s
        })
        .collect()
}

/// Nonnegative test functions `φ` for the defect and renormalization checks.
pub fn phi_battery(grid: &Grid) -> Vec<ScalarField> {
    let g = *grid;
    let on = |f: &dyn Fn([f64; 3]) -> f64| {
        let mut s = ScalarField::zeros(g);
        for c in 0..g.cell_count() {
            s.set(c, f(g.unit_center(c)));
        }
        s
    };
    vec![
        ScalarField::constant(g, 1.0),
        on(&|x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos()),
        on(&|x| x[0] * x[1]),
        on(&|x| (PI * x[0]).sin() * (PI * x[1]).sin()),
    ]
}

/// Smooth vector test functions vanishing on the outer cell layer.
pub fn momentum_test_battery(grid: &Grid) -> Vec<VectorField> {
    let g = *grid;
    let mut out = Vec::new();
    for (k, l) in [(1.0, 1.0), (1.0, 2.0), (2.0, 1.0), (2.0, 2.0)] {
        for comp in 0..g.dim() {
            let mut v = VectorField::zeros(g);
            for c in 0..g.cell_count() {
                let x = g.unit_center(c);
                let mut s = (k * PI * x[0]).sin() * (l * PI * x[1]).sin();
                if g.dim() == 3 {
                    s *= (PI * x[2]).sin();
                }
                v.set(c, comp, s);
            }
            v.zero_boundary();
            out.push(v);
        }
    }
    out
}

/// `max_ψ |∫(-ϱu⊗u + S(Du)):∇ψ - p(ϱ) div ψ - (ϱf+g)·ψ| / |∇ψ|_{L^r}`.
pub fn weak_momentum_residual(
    rho: &ScalarField,
    u: &VectorField,
    stress: &StressModel,
    pressure: &PressureLaw,
    f: &VectorField,
    g: &VectorField,
    tests: &[VectorField],
) -> Result<f64> {
    ensure(!tests.is_empty(), || "weak residual needs at least one test function".into())?;
    rho.check_same_grid(u)?;
    rho.check_same_grid(f)?;
    rho.check_same_grid(g)?;
    let grid = *rho.grid();
    let d = grid.dim();
    let vol = grid.cell_volume();
    let r = stress.exponent();
    let stresses: Vec<SmallMat> = jacobian(u)
        .iter()
        .map(|j| stress.eval(&j.sym()))
        .collect::<Result<_>>()?;
    let press: Vec<f64> = rho.values().iter().map(|&x| pressure.a * x.max(0.0).powf(pressure.gamma)).collect();
    let mut worst = 0.0f64;
    for psi in tests {
        psi.check_same_grid(rho)?;
        let jp = jacobian(psi);
        let dp = div(psi);
        let mut m = 0.0;
        let mut norm = 0.0;
        for c in 0..grid.cell_count() {
            let j = &jp[c];
            let mut conv = 0.0;
            for i in 0..d {
                for k in 0..d {
                    conv += u.get(c, i) * u.get(c, k) * j.get(i, k);
                }
            }
            let body: f64 = (0..d)
                .map(|i| (rho.get(c) * f.get(c, i) + g.get(c, i)) * psi.get(c, i))
                .sum();
            m += -rho.get(c) * conv + stresses[c].ddot(j) - press[c] * dp.get(c) - body;
            norm += j.norm().powf(r);
        }
        let norm = (norm * vol).powf(1.0 / r);
        if norm > 0.0 {
            worst = worst.max((m * vol).abs() / norm);
        }
    }
    Ok(worst)
}

/// Evaluated identity terms and norms for one converged state.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub energy_lhs_terms: Vec<f64>,
    pub energy_rhs_terms: Vec<f64>,
    pub energy_residual: f64,
    pub renorm_residuals: Vec<(String, f64)>,
    /// `(p, ε|∇ϱ|_{L^p})`.
    pub eps_gradient_norms: Vec<(f64, f64)>,
    /// `∫S(Du):Du`.
    pub stress_power: f64,
    /// `|ϱ|_{L^{rγ/(r-1)}}`.
    pub density_norm: f64,
    /// `ε|∇ϱ|_{L^q}`.
    pub eps_grad_lq: f64,
    pub weak_residual: f64,
    pub defect_terms: Vec<(String, f64)>,
    pub mass: f64,
    pub min_density: f64,
}

impl DiagnosticsRecord {
    /// Flat `(name, value)` pairs, one per CSV row.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (i, v) in self.energy_lhs_terms.iter().enumerate() {
            out.push((format!("energy_lhs_{i}"), *v));
        }
        for (i, v) in self.energy_rhs_terms.iter().enumerate() {
            out.push((format!("energy_rhs_{i}"), *v));
        }
        out.push(("energy_residual".into(), self.energy_residual));
        for (n, v) in &self.renorm_residuals {
            out.push((n.clone(), *v));
        }
        for (p, v) in &self.eps_gradient_norms {
            out.push((format!("eps_grad_l{p:.4}"), *v));
        }
        out.push(("stress_power".into(), self.stress_power));
        out.push(("density_norm".into(), self.density_norm));
        out.push(("eps_grad_lq".into(), self.eps_grad_lq));
        out.push(("weak_residual".into(), self.weak_residual));
        for (n, v) in &self.defect_terms {
            out.push((n.clone(), *v));
        }
        out.push(("mass".into(), self.mass));
        out.push(("min_density".into(), self.min_density));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.rows().iter().all(|(_, v)| v.is_finite())
    }

    pub fn attach_defects(&mut self, entries: &[DefectEntry]) {
        for e in entries {
            self.defect_terms.push((format!("defect_stress_phi{}", e.phi), e.stress_gap));
            self.defect_terms.push((format!("defect_transport_phi{}", e.phi), e.transport_gap));
        }
    }
}

pub fn level_diagnostics(rho: &ScalarField, u: &VectorField, p: &LevelParams) -> Result<DiagnosticsRecord> {
    let ph = &p.physical;
    let grid = *rho.grid();
    let d = grid.dim();
    let r = ph.stress.exponent();
    let gamma = ph.pressure.gamma;
    let energy = energy_identity_residual(rho, u, p)?;
    let phis = phi_battery(&grid);
    let phi = &phis[3];
    let tp = p.transport_problem(u);
    let source = transport_source(&tp, rho)?;
    let rho_c = rho.map(|x| x.max(0.0));
    let renorm_residuals = vec![
        (
            "renorm_square".to_string(),
            renorm_residual_with_source(&rho_c, &tp.v, Renormalization::Square, phi, &source)?,
        ),
        (
            "renorm_gamma".to_string(),
            renorm_residual_with_source(&rho_c, &tp.v, Renormalization::Power { exponent: gamma }, phi, &source)?,
        ),
        (
            "renorm_square_limit".to_string(),
            renorm_residual(&rho_c, u, Renormalization::Square, phi)?,
        ),
    ];
    let gr = grad(rho);
    let q1 = dual_exponents(d, r, gamma)?.q1_star;
    let p_lo = (q1 - 0.01).max(1.0);
    let eps_gradient_norms = vec![
        (2.0, p.eps * lebesgue_norm(&gr, 2.0)?),
        (p_lo, p.eps * lebesgue_norm(&gr, p_lo)?),
    ];
    let tests = momentum_test_battery(&grid);
    Ok(DiagnosticsRecord {
        stress_power: energy.lhs[0],
        energy_residual: energy.residual,
        energy_lhs_terms: energy.lhs,
        energy_rhs_terms: energy.rhs,
        renorm_residuals,
        eps_gradient_norms,
        density_norm: lebesgue_norm(&rho_c, r * gamma / (r - 1.0))?,
        eps_grad_lq: p.eps * lebesgue_norm(&gr, p.q)?,
        weak_residual: weak_momentum_residual(rho, u, &ph.stress, &ph.pressure, &ph.f, &ph.g, &tests)?,
        defect_terms: Vec::new(),
        mass: rho.integral(),
        min_density: rho.min(),
    })
}

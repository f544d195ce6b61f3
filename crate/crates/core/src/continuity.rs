//! Regularized steady continuity equation
//! `-ε Δϱ + η(ϱ - M/|Ω|) + αϱ + div(ϱ v) = α ϱ̌` with zero normal flux.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fields::{div, grad, Field, Grid, ScalarField, VectorField};
use crate::linalg::{self, CsrMatrix, LinearMethod, LinearOptions};

#[derive(Clone, Debug)]
pub struct TransportProblem {
    pub eps: f64,
    pub eta: f64,
    pub alpha: f64,
    pub mass: Option<f64>,
    pub rho_check: Option<ScalarField>,
    pub v: VectorField,
}

impl TransportProblem {
    /// Pure η-relaxation problem with total mass `mass`.
    pub fn relaxed(eps: f64, eta: f64, mass: f64, v: VectorField) -> Self {
        Self {
            eps,
            eta,
            alpha: 0.0,
            mass: Some(mass),
            rho_check: None,
            v,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.v.grid()
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.eps > 0.0 && self.eps.is_finite(), || {
            format!("artificial diffusion must be positive, got {}", self.eps)
        })?;
        ensure(self.eta >= 0.0 && self.alpha >= 0.0, || {
            "eta and alpha must be nonnegative".into()
        })?;
        if self.eta > 0.0 {
            let m = self
                .mass
                .ok_or_else(|| Error::InvalidParameter("eta > 0 requires a total mass".into()))?;
            ensure(m > 0.0 && m.is_finite(), || format!("mass must be positive, got {m}"))?;
        }
        if self.alpha > 0.0 {
            let rc = self.rho_check.as_ref().ok_or_else(|| {
                Error::InvalidParameter("alpha > 0 requires a source density".into())
            })?;
            rc.check_same_grid(&self.v)?;
            ensure(rc.min() >= 0.0, || "source density must be nonnegative".into())?;
        }
        if self.eta + self.alpha == 0.0 {
            return Err(Error::Singular(
                "continuity problem needs eta > 0 or alpha > 0".into(),
            ));
        }
        if !self.v.is_finite() {
            return Err(Error::NotFinite("transport field"));
        }
        ensure(self.v.vanishes_on_boundary(), || {
            "transport field must vanish on boundary cells".into()
        })?;
        Ok(())
    }

    /// Total mass fixed by integrating the discrete equation:
    /// `(η M + α ∫ϱ̌) / (η + α)`.
    pub fn expected_mass(&self) -> f64 {
        let m = if self.eta > 0.0 { self.eta * self.mass.unwrap_or(0.0) } else { 0.0 };
        let s = match (&self.rho_check, self.alpha > 0.0) {
            (Some(rc), true) => self.alpha * rc.integral(),
            _ => 0.0,
        };
        (m + s) / (self.eta + self.alpha)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TransportReport {
    pub method: LinearMethod,
    pub iterations: usize,
    /// Backward error of the full discrete equation.
    pub residual: f64,
    pub mass: f64,
    pub expected_mass: f64,
    pub min: f64,
}

/// Upwind face flux coefficients between cell `c` and its `+axis` neighbor `n`:
/// returns `(w⁺, w⁻)` of the averaged face velocity.
#[inline]
fn face_split(v: &VectorField, c: usize, n: usize, axis: usize) -> (f64, f64) {
    let wf = 0.5 * (v.get(c, axis) + v.get(n, axis));
    (wf.max(0.0), (-wf).max(0.0))
}

/// The discrete operator and right-hand side of the continuity equation,
/// one row per cell, before any constraint row is substituted.
pub fn transport_system(p: &TransportProblem) -> Result<(CsrMatrix, Vec<f64>)> {
    p.validate()?;
    let g = *p.grid();
    let n = g.cell_count();
    let mut t = Vec::with_capacity(n * (1 + 4 * g.dim()));
    let zeroth = p.eta + p.alpha;
    for c in 0..n {
        t.push((c, c, zeroth));
        for a in 0..g.dim() {
            let h = g.h(a);
            let diff = p.eps / (h * h);
            if let Some(nb) = g.neighbor(c, a, 1) {
                if nb == c {
                    continue;
                }
                t.push((c, c, diff));
                t.push((c, nb, -diff));
                t.push((nb, nb, diff));
                t.push((nb, c, -diff));
                let (wp, wm) = face_split(&p.v, c, nb, a);
                t.push((c, c, wp / h));
                t.push((c, nb, -wm / h));
                t.push((nb, c, -wp / h));
                t.push((nb, nb, wm / h));
            }
        }
    }
    let a = CsrMatrix::from_triplets(n, &t);
    let mean = if p.eta > 0.0 { p.eta * p.mass.unwrap_or(0.0) / g.volume() } else { 0.0 };
    let b = (0..n)
        .map(|c| {
            let src = match (&p.rho_check, p.alpha > 0.0) {
                (Some(rc), true) => p.alpha * rc.get(c),
                _ => 0.0,
            };
            mean + src
        })
        .collect();
    Ok((a, b))
}

pub fn solve_transport(p: &TransportProblem) -> Result<ScalarField> {
    solve_transport_with(p, &LinearOptions::default()).map(|r| r.0)
}

/// Solves the continuity equation. The last cell equation is replaced by the
/// mass identity it is implied by, which keeps the system well conditioned as
/// η and α become small.
pub fn solve_transport_with(
    p: &TransportProblem,
    opts: &LinearOptions,
) -> Result<(ScalarField, TransportReport)> {
    let (a, b) = transport_system(p)?;
    let g = *p.grid();
    let n = g.cell_count();
    let vol = g.cell_volume();
    let mass = p.expected_mass();
    let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
    let s = mean_diag / (n as f64 * vol);
    let row: Vec<(usize, f64)> = (0..n).map(|j| (j, s * vol)).collect();
    let constrained = a.with_row(n - 1, &row);
    let mut rhs = b.clone();
    rhs[n - 1] = s * mass;
    let opts = LinearOptions {
        dense_tail: 1,
        spd: false,
        ..*opts
    };
    let (x, stats) = linalg::solve(&constrained, &rhs, &opts)?;
    let residual = linalg::backward_error(&a, &x, &b);
    let rho = ScalarField::from_parts(g, x);
    if !rho.is_finite() {
        return Err(Error::NotFinite("density"));
    }
    let report = TransportReport {
        method: stats.method,
        iterations: stats.iterations,
        residual,
        mass: mass_of(&rho),
        expected_mass: mass,
        min: rho.min(),
    };
    if residual > opts.rel_tol {
        return Err(Error::NonConvergence {
            solver: "continuity",
            iterations: stats.iterations,
            residual,
        });
    }
    Ok((rho, report))
}

/// Midpoint-rule integral of the density.
pub fn mass_of(rho: &ScalarField) -> f64 {
    rho.integral()
}

/// Renormalizing functions `b(ϱ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Renormalization {
    Linear,
    Square,
    Power { exponent: f64 },
}

impl Renormalization {
    pub fn b(&self, r: f64) -> f64 {
        match *self {
            Renormalization::Linear => r,
            Renormalization::Square => r * r,
            Renormalization::Power { exponent } => r.max(0.0).powf(exponent),
        }
    }

    pub fn b_prime(&self, r: f64) -> f64 {
        match *self {
            Renormalization::Linear => 1.0,
            Renormalization::Square => 2.0 * r,
            Renormalization::Power { exponent } => {
                if r <= 0.0 {
                    0.0
                } else {
                    exponent * r.powf(exponent - 1.0)
                }
            }
        }
    }
}

/// `R = -∫ b(ϱ) u·∇φ + ∫ (ϱ b'(ϱ) - b(ϱ)) div u φ`.
pub fn renorm_residual(
    rho: &ScalarField,
    u: &VectorField,
    b: Renormalization,
    phi: &ScalarField,
) -> Result<f64> {
    rho.check_same_grid(u)?;
    rho.check_same_grid(phi)?;
    let g = *rho.grid();
    let gphi = grad(phi);
    let du = div(u);
    let mut s = 0.0;
    for c in 0..g.cell_count() {
        let r = rho.get(c);
        let bu: f64 = (0..g.dim()).map(|k| u.get(c, k) * gphi.get(c, k)).sum();
        s += -b.b(r) * bu + (r * b.b_prime(r) - b.b(r)) * du.get(c) * phi.get(c);
    }
    Ok(s * g.cell_volume())
}

/// [`renorm_residual`] for a density solving `div(ϱu) = source`:
/// subtracts `∫ b'(ϱ) source φ`.
pub fn renorm_residual_with_source(
    rho: &ScalarField,
    u: &VectorField,
    b: Renormalization,
    phi: &ScalarField,
    source: &ScalarField,
) -> Result<f64> {
    source.check_same_grid(rho)?;
    let base = renorm_residual(rho, u, b, phi)?;
    let g = rho.grid();
    let corr: f64 = (0..g.cell_count())
        .map(|c| b.b_prime(rho.get(c)) * source.get(c) * phi.get(c))
        .sum::<f64>()
        * g.cell_volume();
    Ok(base - corr)
}

/// Right-hand side of `div(ϱ v) = εΔϱ - η(ϱ - M/|Ω|) - αϱ + αϱ̌` for a solved density.
pub fn transport_source(p: &TransportProblem, rho: &ScalarField) -> Result<ScalarField> {
    rho.check_same_grid(&p.v)?;
    let lap = crate::fields::neumann_laplacian(rho);
    let mean = p.mass.map_or(0.0, |m| m / p.grid().volume());
    let mut out = ScalarField::zeros(*rho.grid());
    for c in 0..rho.grid().cell_count() {
        let r = rho.get(c);
        let mut s = p.eps * lap.get(c) - p.eta * (r - mean) - p.alpha * r;
        if let (Some(rc), true) = (&p.rho_check, p.alpha > 0.0) {
            s += p.alpha * rc.get(c);
        }
        out.set(c, s);
    }
    Ok(out)
}

/// `(ε ∫|∇ϱ|², η ∫ϱ²)` for logging the energy-type bound.
pub fn transport_energy(p: &TransportProblem, rho: &ScalarField) -> (f64, f64) {
    let gr = grad(rho);
    let vol = rho.grid().cell_volume();
    let e1 = p.eps * gr.data().iter().map(|v| v * v).sum::<f64>() * vol;
    let e2 = p.eta * rho.values().iter().map(|v| v * v).sum::<f64>() * vol;
    (e1, e2)
}

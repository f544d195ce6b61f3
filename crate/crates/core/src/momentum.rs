//! Momentum right-hand side and the monotone elliptic solve
//! `-div S(Du) - α div(|∇u|^(q-2) ∇u) + βϱu = F`, `u = 0` on the outer layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constitutive::{PressureLaw, SmallMat, StressModel};
use crate::error::{ensure, Error, Result};
use crate::fields::{
    diff_stencil, div, grad, grad_times_grad, lebesgue_norm, mollify, truncate, Field, Grid,
    ScalarField, VectorField,
};
use crate::linalg::{self, CsrMatrix, FactorCache, LinearOptions};

#[derive(Clone, Debug)]
pub struct MomentumProblem {
    pub stress: StressModel,
    pub alpha: f64,
    pub q: f64,
    pub force: VectorField,
    /// Coefficient of the zeroth-order `βϱu` term.
    pub beta: f64,
    pub rho: Option<ScalarField>,
}

impl MomentumProblem {
    pub fn new(stress: StressModel, alpha: f64, q: f64, force: VectorField) -> Self {
        Self {
            stress,
            alpha,
            q,
            force,
            beta: 0.0,
            rho: None,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.force.grid()
    }

    pub fn validate(&self) -> Result<()> {
        self.stress.validate()?;
        ensure(self.alpha >= 0.0, || format!("alpha must be >= 0, got {}", self.alpha))?;
        if self.alpha > 0.0 {
            ensure(self.q > 1.0, || format!("q must be > 1, got {}", self.q))?;
        }
        ensure(self.beta >= 0.0, || "beta must be >= 0".into())?;
        if self.beta > 0.0 {
            let rho = self
                .rho
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("beta > 0 requires a density".into()))?;
            rho.check_same_grid(&self.force)?;
        }
        ensure(!self.grid().is_periodic(), || {
            "momentum solve needs a bounded grid".into()
        })?;
        if !self.force.is_finite() {
            return Err(Error::NotFinite("momentum force"));
        }
        Ok(())
    }

    fn zeroth(&self, c: usize) -> f64 {
        match (&self.rho, self.beta > 0.0) {
            (Some(r), true) => self.beta * r.get(c),
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MomentumOptions {
    /// Stop when `|residual|_2 <= tol |F|_2`.
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub max_halvings: usize,
    /// Relative floor on `|Du|` inside lagged coefficients.
    pub coef_floor: f64,
    /// Switch from lagged coefficients to the exact tangent once a lagged step
    /// reduces the residual by less than this factor (0 disables the switch).
    pub tangent_switch: f64,
    pub linear: LinearOptions,
}

impl Default for MomentumOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
            armijo: 1e-4,
            max_halvings: 40,
            coef_floor: 1e-8,
            tangent_switch: 0.5,
            linear: LinearOptions {
                spd: true,
                ..LinearOptions::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MomentumReport {
    pub iterations: usize,
    pub converged: bool,
    /// `|residual|_2 / |F|_2` at exit.
    pub residual: f64,
    /// Energy before the first step and after every accepted step, tracked as
    /// the initial value plus the per-step increments.
    pub energies: Vec<f64>,
    /// `Φ(u_{k+1}) - Φ(u_k)` for every accepted step.
    pub energy_changes: Vec<f64>,
    pub step_lengths: Vec<f64>,
    /// Relative residual after every accepted step.
    pub residuals: Vec<f64>,
    /// Steps taken with the exact-tangent linearization.
    pub tangent_steps: usize,
    pub linear_backward_error: f64,
}

/// Derivative stencils of one cell restricted to unknown cells.
struct CellStencil {
    nodes: [usize; 7],
    len: usize,
    coef: [[f64; 7]; 3],
}

impl CellStencil {
    fn new(grid: &Grid, c: usize) -> Self {
        let mut s = CellStencil {
            nodes: [0; 7],
            len: 0,
            coef: [[0.0; 7]; 3],
        };
        for j in 0..grid.dim() {
            for (n, w) in diff_stencil(grid, c, j) {
                if w == 0.0 || grid.is_boundary_cell(n) {
                    continue;
                }
                let slot = match s.nodes[..s.len].iter().position(|&m| m == n) {
                    Some(k) => k,
                    None => {
                        s.nodes[s.len] = n;
                        s.len += 1;
                        s.len - 1
                    }
                };
                s.coef[j][slot] += w;
            }
        }
        s
    }

    fn jacobian(&self, u: &VectorField, d: usize) -> SmallMat {
        let mut m = SmallMat::zeros(d);
        for j in 0..d {
            for i in 0..d {
                let v: f64 = (0..self.len).map(|k| self.coef[j][k] * u.get(self.nodes[k], i)).sum();
                m.set(i, j, v);
            }
        }
        m
    }
}

struct Assembler<'a> {
    p: &'a MomentumProblem,
    grid: Grid,
    d: usize,
    stencils: Vec<CellStencil>,
    dof: Vec<usize>,
    ndof: usize,
}

const NO_DOF: usize = usize::MAX;

impl<'a> Assembler<'a> {
    fn new(p: &'a MomentumProblem) -> Self {
        let grid = *p.grid();
        let d = grid.dim();
        let stencils = (0..grid.cell_count())
            .into_par_iter()
            .map(|c| CellStencil::new(&grid, c))
            .collect();
        let mut dof = vec![NO_DOF; grid.cell_count()];
        let mut k = 0;
        for (c, slot) in dof.iter_mut().enumerate() {
            if !grid.is_boundary_cell(c) {
                *slot = k;
                k += 1;
            }
        }
        Self {
            p,
            grid,
            d,
            stencils,
            dof,
            ndof: k * d,
        }
    }

    fn jacobians(&self, u: &VectorField) -> Vec<SmallMat> {
        self.stencils
            .par_iter()
            .map(|s| s.jacobian(u, self.d))
            .collect()
    }

    fn damping_potential(&self, j: &SmallMat) -> f64 {
        if self.p.alpha > 0.0 {
            self.p.alpha / self.p.q * j.norm().powf(self.p.q)
        } else {
            0.0
        }
    }

    fn damping_flux(&self, j: &SmallMat) -> SmallMat {
        if self.p.alpha > 0.0 {
            let n = j.norm();
            if n == 0.0 {
                SmallMat::zeros(self.d)
            } else {
                j.scale(self.p.alpha * n.powf(self.p.q - 2.0))
            }
        } else {
            SmallMat::zeros(self.d)
        }
    }

    fn energy(&self, u: &VectorField) -> f64 {
        let vol = self.grid.cell_volume();
        let per_cell: Vec<f64> = (0..self.grid.cell_count())
            .into_par_iter()
            .map(|c| {
                let j = self.stencils[c].jacobian(u, self.d);
                let mut e = self.p.stress.potential(&j.sym()) + self.damping_potential(&j);
                if self.dof[c] != NO_DOF {
                    let uc = u.at(c);
                    let u2: f64 = uc.iter().map(|v| v * v).sum();
                    let fu: f64 = uc.iter().zip(self.p.force.at(c)).map(|(a, b)| a * b).sum();
                    e += 0.5 * self.p.zeroth(c) * u2 - fu;
                }
                e
            })
            .collect();
        per_cell.iter().sum::<f64>() * vol
    }

    /// `Φ(u + t dir) - Φ(u)` summed from per-cell increments, so it stays
    /// accurate when the change is far below the size of `Φ`.
    fn energy_change(&self, u: &VectorField, dir: &VectorField, t: f64) -> f64 {
        let vol = self.grid.cell_volume();
        let d = self.d;
        let alpha = self.p.alpha;
        let q = self.p.q;
        let per_cell: Vec<f64> = (0..self.grid.cell_count())
            .into_par_iter()
            .map(|c| {
                let s = &self.stencils[c];
                let j = s.jacobian(u, d);
                let dj = s.jacobian(dir, d).scale(t);
                let mut e = self.p.stress.potential_increment(&j.sym(), &dj.sym());
                if alpha > 0.0 {
                    let ds = 2.0 * j.ddot(&dj) + dj.ddot(&dj);
                    e += alpha / q * crate::constitutive::pow_increment(j.ddot(&j), ds, q);
                }
                if self.dof[c] != NO_DOF {
                    let z = self.p.zeroth(c);
                    for i in 0..d {
                        let ui = u.get(c, i);
                        let di = t * dir.get(c, i);
                        e += 0.5 * z * di * (2.0 * ui + di) - self.p.force.get(c, i) * di;
                    }
                }
                e
            })
            .collect();
        per_cell.iter().sum::<f64>() * vol
    }

    /// `(1/vol) ∂Φ/∂u` on unknown cells, zero elsewhere.
    fn residual(&self, u: &VectorField) -> VectorField {
        let d = self.d;
        let flux: Vec<SmallMat> = (0..self.grid.cell_count())
            .into_par_iter()
            .map(|c| {
                let j = self.stencils[c].jacobian(u, d);
                self.p.stress.stress(&j.sym()).add(&self.damping_flux(&j))
            })
            .collect();
        let mut r = VectorField::zeros(self.grid);
        for (c, s) in self.stencils.iter().enumerate() {
            for k in 0..s.len {
                let n = s.nodes[k];
                for i in 0..d {
                    let v: f64 = (0..d).map(|j| s.coef[j][k] * flux[c].get(i, j)).sum();
                    r.set(n, i, r.get(n, i) + v);
                }
            }
        }
        for c in 0..self.grid.cell_count() {
            if self.dof[c] == NO_DOF {
                continue;
            }
            let z = self.p.zeroth(c);
            for i in 0..d {
                let v = r.get(c, i) + z * u.get(c, i) - self.p.force.get(c, i);
                r.set(c, i, v);
            }
        }
        r
    }

    /// Lagged system matrix (scaled by cell volume) at the strain field `jac`.
    fn matrix(&self, coeffs: &[CellCoef]) -> CsrMatrix {
        let d = self.d;
        let vol = self.grid.cell_volume();
        let locals: Vec<Vec<(usize, usize, f64)>> = (0..self.grid.cell_count())
            .into_par_iter()
            .map(|c| {
                let s = &self.stencils[c];
                let cf = &coeffs[c];
                let nl = s.len * d;
                let mut out = Vec::with_capacity(nl * nl);
                let mut local = vec![0.0; nl * nl];
                for a in 0..nl {
                    let (na, i) = (a / d, a % d);
                    for b in a..nl {
                        let (nb, k) = (b / d, b % d);
                        let mut v = 0.0;
                        for j in 0..d {
                            let wa = s.coef[j][na];
                            if wa == 0.0 {
                                continue;
                            }
                            for l in 0..d {
                                let wb = s.coef[l][nb];
                                if wb == 0.0 {
                                    continue;
                                }
                                let sym = 0.5
                                    * (f64::from(u8::from(i == k && j == l))
                                        + f64::from(u8::from(i == l && j == k)));
                                let full = f64::from(u8::from(i == k && j == l));
                                let tr = f64::from(u8::from(i == j && k == l));
                                let cc = cf.shear * sym
                                    + cf.bulk * tr
                                    + cf.damp * full
                                    + cf.rank * cf.dir.get(i, j) * cf.dir.get(k, l)
                                    + cf.damp_rank * cf.damp_dir.get(i, j) * cf.damp_dir.get(k, l);
                                v += wa * wb * cc;
                            }
                        }
                        local[a * nl + b] = v * vol;
                        local[b * nl + a] = v * vol;
                    }
                }
                for a in 0..nl {
                    let ga = self.dof[s.nodes[a / d]] * d + a % d;
                    for b in 0..nl {
                        let v = local[a * nl + b];
                        if v != 0.0 {
                            out.push((ga, self.dof[s.nodes[b / d]] * d + b % d, v));
                        }
                    }
                }
                out
            })
            .collect();
        let mut t: Vec<(usize, usize, f64)> = locals.into_iter().flatten().collect();
        for c in 0..self.grid.cell_count() {
            let z = self.p.zeroth(c);
            if self.dof[c] != NO_DOF && z != 0.0 {
                for i in 0..d {
                    let g = self.dof[c] * d + i;
                    t.push((g, g, z * vol));
                }
            }
        }
        CsrMatrix::from_triplets(self.ndof, &t)
    }

    fn coefficients(&self, jac: &[SmallMat], floor_rel: f64, mode: Linearization) -> Vec<CellCoef> {
        let scale = jac.iter().map(|j| j.norm()).fold(0.0, f64::max);
        let floor = (floor_rel * scale).max(1e-300);
        let (alpha, q) = (self.p.alpha, self.p.q);
        let zero = SmallMat::zeros(self.d);
        jac.par_iter()
            .map(|j| {
                let jn = j.norm();
                let damp = if alpha > 0.0 { alpha * jn.max(floor).powf(q - 2.0) } else { 0.0 };
                match mode {
                    Linearization::Rest => {
                        let (shear, bulk) = newtonian_coefficients(&self.p.stress);
                        CellCoef { shear, bulk, damp: alpha, rank: 0.0, dir: zero, damp_rank: 0.0, damp_dir: zero }
                    }
                    Linearization::Lagged => {
                        let lc = self.p.stress.lagged(&j.sym(), floor);
                        CellCoef { shear: lc.shear, bulk: lc.bulk, damp, rank: 0.0, dir: zero, damp_rank: 0.0, damp_dir: zero }
                    }
                    Linearization::Tangent => {
                        let t = self.p.stress.tangent(&j.sym(), floor);
                        let (damp_rank, damp_dir) = if alpha > 0.0 && jn > 0.0 {
                            ((q - 2.0) * damp, j.scale(1.0 / jn))
                        } else {
                            (0.0, zero)
                        };
                        CellCoef { shear: t.shear, bulk: t.bulk, damp, rank: t.rank, dir: t.dir, damp_rank, damp_dir }
                    }
                }
            })
            .collect()
    }

    fn to_dofs(&self, v: &VectorField) -> Vec<f64> {
        let mut x = vec![0.0; self.ndof];
        for c in 0..self.grid.cell_count() {
            if self.dof[c] != NO_DOF {
                for i in 0..self.d {
                    x[self.dof[c] * self.d + i] = v.get(c, i);
                }
            }
        }
        x
    }

    fn dofs_to_field(&self, x: &[f64]) -> VectorField {
        let mut v = VectorField::zeros(self.grid);
        for c in 0..self.grid.cell_count() {
            if self.dof[c] != NO_DOF {
                for i in 0..self.d {
                    v.set(c, i, x[self.dof[c] * self.d + i]);
                }
            }
        }
        v
    }
}

/// Per-cell linearization: `shear P_sym + bulk I⊗I + rank dir⊗dir` on the
/// symmetric gradient plus `damp Id + damp_rank damp_dir⊗damp_dir` on the full one.
#[derive(Clone, Copy, Debug)]
struct CellCoef {
    shear: f64,
    bulk: f64,
    damp: f64,
    rank: f64,
    dir: SmallMat,
    damp_rank: f64,
    damp_dir: SmallMat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Linearization {
    /// Linear-law coefficients, used for the first step from rest.
    Rest,
    Lagged,
    Tangent,
}

fn newtonian_coefficients(stress: &StressModel) -> (f64, f64) {
    match stress {
        StressModel::PowerLaw(p) => (p.mu0, p.lambda0),
        StressModel::HerschelBulkley(p) => (p.nu + p.tau_star / p.eps_reg, 0.0),
    }
}

fn l2(v: &VectorField) -> f64 {
    lebesgue_norm(v, 2.0).unwrap_or(f64::INFINITY)
}

fn dot_vol(a: &VectorField, b: &VectorField) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>() * a.grid().cell_volume()
}

/// Discrete energy `Φ(u)` of the momentum problem.
pub fn momentum_energy(p: &MomentumProblem, u: &VectorField) -> Result<f64> {
    p.validate()?;
    u.check_same_grid(&p.force)?;
    Ok(Assembler::new(p).energy(u))
}

/// Strong-form residual `(1/vol) ∂Φ/∂u`; zero on the outer layer.
pub fn momentum_residual(p: &MomentumProblem, u: &VectorField) -> Result<VectorField> {
    p.validate()?;
    u.check_same_grid(&p.force)?;
    Ok(Assembler::new(p).residual(u))
}

/// The volume-scaled lagged system matrix at `u` over interior unknowns
/// (cell-major, component-interleaved).
pub fn lagged_matrix(p: &MomentumProblem, u: &VectorField) -> Result<CsrMatrix> {
    p.validate()?;
    let asm = Assembler::new(p);
    let jac = asm.jacobians(u);
    let coeffs = asm.coefficients(&jac, MomentumOptions::default().coef_floor, Linearization::Lagged);
    Ok(asm.matrix(&coeffs))
}

pub fn solve_momentum(p: &MomentumProblem, u0: &VectorField) -> Result<(VectorField, MomentumReport)> {
    solve_momentum_with(p, u0, &MomentumOptions::default())
}

/// Lagged-coefficient (Kačanov) iteration with an energy line search.
pub fn solve_momentum_with(
    p: &MomentumProblem,
    u0: &VectorField,
    opts: &MomentumOptions,
) -> Result<(VectorField, MomentumReport)> {
    solve_momentum_cached(p, u0, opts, &mut FactorCache::new())
}

/// [`solve_momentum_with`] reusing factorizations held in `cache` across calls
/// on the same grid.
pub fn solve_momentum_cached(
    p: &MomentumProblem,
    u0: &VectorField,
    opts: &MomentumOptions,
    cache: &mut FactorCache,
) -> Result<(VectorField, MomentumReport)> {
    p.validate()?;
    u0.check_same_grid(&p.force)?;
    ensure(u0.vanishes_on_boundary(), || {
        "initial guess must vanish on boundary cells".into()
    })?;
    let asm = Assembler::new(p);
    let fnorm = l2(&p.force);
    let mut u = u0.clone();
    let mut res = asm.residual(&u);
    let mut rnorm = l2(&res);
    let reference = if fnorm > 0.0 { fnorm } else { rnorm };
    let target = opts.tol * reference;
    let mut energy = asm.energy(&u);
    let mut report = MomentumReport {
        energies: vec![energy],
        ..Default::default()
    };
    if rnorm <= target {
        report.converged = true;
        report.residual = if reference > 0.0 { rnorm / reference } else { 0.0 };
        return Ok((u, report));
    }
    let mut tangent = false;
    for it in 1..=opts.max_iter {
        let mode = if u.data().iter().all(|&v| v == 0.0) {
            Linearization::Rest
        } else if tangent {
            Linearization::Tangent
        } else {
            Linearization::Lagged
        };
        let jac = asm.jacobians(&u);
        let coeffs = asm.coefficients(&jac, opts.coef_floor, mode);
        let k = asm.matrix(&coeffs);
        let mut rhs = asm.to_dofs(&res);
        let vol = asm.grid.cell_volume();
        rhs.iter_mut().for_each(|v| *v *= -vol);
        let (dx, stats) = linalg::solve_cached(&k, &rhs, &opts.linear, cache)?;
        report.linear_backward_error = stats.backward_error;
        let dir = asm.dofs_to_field(&dx);
        let slope0 = dot_vol(&res, &dir);
        if !(slope0 < 0.0) {
            if rnorm <= target.max(1e3 * f64::EPSILON * reference) {
                break;
            }
            return Err(Error::Divergence {
                solver: "momentum",
                reason: format!("lagged direction is not a descent direction (slope {slope0:e})"),
            });
        }
        let trial = |t: f64| {
            let mut w = u.clone();
            w.axpy(t, &dir);
            let de = asm.energy_change(&u, &dir, t);
            let r = asm.residual(&w);
            let st = dot_vol(&r, &dir);
            (w, de, r, st)
        };
        let armijo = |t: f64, de: f64| de <= opts.armijo * t * slope0;

        let (w1, de1, r1, s1) = trial(1.0);
        let mut chosen: Option<(f64, VectorField, f64, VectorField)> = None;
        if armijo(1.0, de1) {
            let mut best = (1.0, w1, de1, r1);
            let mut slope = s1;
            let mut t = 1.0;
            while slope < 0.5 * slope0 && t < 1e6 {
                t *= 2.0;
                let (wt, det, rt, st) = trial(t);
                if det < best.2 && armijo(t, det) {
                    best = (t, wt, det, rt);
                    slope = st;
                } else {
                    break;
                }
            }
            chosen = Some(best);
        } else {
            let mut t = if s1 > 0.0 {
                (slope0 / (slope0 - s1)).clamp(1e-3, 0.9)
            } else {
                0.5
            };
            for _ in 0..opts.max_halvings {
                let (wt, det, rt, _) = trial(t);
                if armijo(t, det) {
                    chosen = Some((t, wt, det, rt));
                    break;
                }
                t *= 0.5;
            }
        }
        let Some((t, w, de, r)) = chosen else {
            if rnorm <= target.max(1e3 * f64::EPSILON * reference) {
                break;
            }
            return Err(Error::Divergence {
                solver: "momentum",
                reason: format!(
                    "line search exhausted after {} halvings (relative residual {:e})",
                    opts.max_halvings,
                    rnorm / reference
                ),
            });
        };
        u = w;
        energy += de;
        report.energy_changes.push(de);
        res = r;
        let previous = rnorm;
        rnorm = l2(&res);
        if mode == Linearization::Tangent {
            report.tangent_steps += 1;
        } else if opts.tangent_switch > 0.0 && mode == Linearization::Lagged && rnorm > opts.tangent_switch * previous {
            tangent = true;
        }
        report.iterations = it;
        report.energies.push(energy);
        report.step_lengths.push(t);
        report.residuals.push(rnorm / reference);
        if !u.is_finite() {
            return Err(Error::NotFinite("momentum iterate"));
        }
        if rnorm <= target {
            report.converged = true;
            break;
        }
    }
    report.residual = rnorm / reference;
    if !report.converged {
        if rnorm <= target.max(1e3 * f64::EPSILON * reference) {
            report.converged = true;
        } else {
            return Err(Error::NonConvergence {
                solver: "momentum",
                iterations: report.iterations,
                residual: report.residual,
            });
        }
    }
    Ok((u, report))
}

/// Data entering the momentum right-hand side.
#[derive(Clone, Copy, Debug)]
pub struct FAssemblyInputs<'a> {
    pub rho: &'a ScalarField,
    pub v: &'a VectorField,
    pub delta: f64,
    pub eta: f64,
    pub eps: f64,
    pub pressure: PressureLaw,
    pub f: &'a VectorField,
    pub g: &'a VectorField,
}

/// The five parts of `F(ϱ, v)`, each already carrying its sign.
#[derive(Clone, Debug)]
pub struct FTerms {
    /// `-div(ϱ w ⊗ v)`, `w = ω_δ ∗ T_δ v`
    pub convection: VectorField,
    /// `-a T_δ(ω_δ ∗ ∇ϱ^γ)`
    pub pressure: VectorField,
    /// `-(η/2) ϱ v`
    pub relaxation: VectorField,
    /// `-ε (∇v)(∇ϱ)`
    pub diffusion: VectorField,
    /// `ϱ f + g`
    pub body: VectorField,
}

impl FTerms {
    pub fn total(&self) -> VectorField {
        let mut t = self.convection.clone();
        t.axpy(1.0, &self.pressure);
        t.axpy(1.0, &self.relaxation);
        t.axpy(1.0, &self.diffusion);
        t.axpy(1.0, &self.body);
        t
    }
}

/// `ω_δ ∗ T_δ(v)`, the transport field seen by the continuity equation.
pub fn transport_field(v: &VectorField, delta: f64) -> VectorField {
    mollify(&truncate(v, delta), delta)
}

pub fn assemble_f_terms(inp: &FAssemblyInputs) -> Result<FTerms> {
    let FAssemblyInputs {
        rho,
        v,
        delta,
        eta,
        eps,
        pressure,
        f,
        g,
    } = *inp;
    rho.check_same_grid(v)?;
    rho.check_same_grid(f)?;
    rho.check_same_grid(g)?;
    pressure.validate()?;
    ensure(rho.min() >= 0.0, || format!("density must be nonnegative, min {}", rho.min()))?;
    let grid = *rho.grid();
    let d = grid.dim();
    let w = transport_field(v, delta);

    let mut convection = VectorField::zeros(grid);
    for i in 0..d {
        let mut flux = VectorField::zeros(grid);
        for c in 0..grid.cell_count() {
            let s = rho.get(c) * v.get(c, i);
            for j in 0..d {
                flux.set(c, j, s * w.get(c, j));
            }
        }
        let dv = div(&flux);
        for c in 0..grid.cell_count() {
            convection.set(c, i, -dv.get(c));
        }
    }

    let p_rho = rho.map(|r| r.powf(pressure.gamma));
    let mut press = truncate(&mollify(&grad(&p_rho), delta), delta);
    press.data_mut().iter_mut().for_each(|x| *x *= -pressure.a);

    let relaxation = v.times_scalar(rho).scaled(-0.5 * eta);
    let diffusion = grad_times_grad(v, rho)?.scaled(-eps);
    let mut body = f.times_scalar(rho);
    body.axpy(1.0, g);
    Ok(FTerms {
        convection,
        pressure: press,
        relaxation,
        diffusion,
        body,
    })
}

#[allow(non_snake_case)]
pub fn assemble_F(inp: &FAssemblyInputs) -> Result<VectorField> {
    Ok(assemble_f_terms(inp)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{HbRegParams, PowerLawParams};

    fn newtonian() -> StressModel {
        StressModel::PowerLaw(PowerLawParams::new(1.0, 0.0, 2.0).unwrap())
    }

    fn smooth_force(g: Grid) -> VectorField {
        VectorField::from_fn(g, |x| [(3.0 * x[1]).sin() + 0.5, x[0] * x[0] - 0.2, 0.0])
    }

    #[test]
    fn zero_force_gives_zero() {
        let g = Grid::new_2d(10, 10, 1.0, 1.0).unwrap();
        let p = MomentumProblem::new(newtonian(), 0.1, 3.0, VectorField::zeros(g));
        let (u, rep) = solve_momentum(&p, &VectorField::zeros(g)).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn matrix_is_bitwise_symmetric() {
        let g = Grid::new_2d(9, 8, 1.0, 1.2).unwrap();
        let stress = StressModel::PowerLaw(PowerLawParams::new(0.7, 0.4, 1.6).unwrap());
        let p = MomentumProblem::new(stress, 0.05, 3.0, smooth_force(g));
        let mut u = VectorField::from_fn(g, |x| [x[0] * x[1], (x[0] - x[1]).sin(), 0.0]);
        u.zero_boundary();
        assert!(lagged_matrix(&p, &u).unwrap().is_symmetric_bitwise());
    }

    #[test]
    fn residual_is_energy_gradient() {
        let g = Grid::new_2d(7, 6, 1.0, 1.0).unwrap();
        let stress = StressModel::PowerLaw(PowerLawParams::new(1.0, 0.5, 2.6).unwrap());
        let p = MomentumProblem::new(stress, 0.2, 3.5, smooth_force(g));
        let mut u = VectorField::from_fn(g, |x| [x[0] * x[1] + 0.3, (x[0] - 2.0 * x[1]).cos(), 0.0]);
        u.zero_boundary();
        let r = momentum_residual(&p, &u).unwrap();
        let vol = g.cell_volume();
        for c in [g.index([2, 2, 0]), g.index([1, 4, 0]), g.index([5, 1, 0])] {
            for i in 0..2 {
                let h = 1e-6;
                let mut up = u.clone();
                up.set(c, i, u.get(c, i) + h);
                let mut um = u.clone();
                um.set(c, i, u.get(c, i) - h);
                let fd = (momentum_energy(&p, &up).unwrap() - momentum_energy(&p, &um).unwrap())
                    / (2.0 * h * vol);
                assert!((fd - r.get(c, i)).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} {}", r.get(c, i));
            }
        }
    }

    #[test]
    fn kacanov_energy_decreases() {
        let g = Grid::new_2d(12, 12, 1.0, 1.0).unwrap();
        for r in [1.5, 2.0, 3.0] {
            let stress = StressModel::PowerLaw(PowerLawParams::new(1.0, 0.3, r).unwrap());
            let p = MomentumProblem::new(stress, 0.01, 3.0, smooth_force(g));
            let (_, rep) = match solve_momentum(&p, &VectorField::zeros(g)) {
                Ok(x) => x,
                Err(e) => panic!("r = {r}: {e}"),
            };
            assert!(rep.converged);
            assert!(rep.residual <= 1e-9);
            for w in rep.energies.windows(2) {
                assert!(w[1] <= w[0], "r = {r}: {} > {}", w[1], w[0]);
            }
            assert!(rep.energy_changes.iter().all(|&de| de < 0.0));
        }
    }

    #[test]
    fn hb_model_converges() {
        let g = Grid::new_2d(12, 12, 1.0, 1.0).unwrap();
        let stress = StressModel::HerschelBulkley(HbRegParams::new(0.5, 1.0, 2.0, 0.05).unwrap());
        let mut p = MomentumProblem::new(stress, 0.01, 3.0, smooth_force(g));
        p.beta = 1.0;
        p.rho = Some(ScalarField::constant(g, 1.0));
        let (_, rep) = solve_momentum(&p, &VectorField::zeros(g)).unwrap();
        assert!(rep.converged);
    }

    #[test]
    fn f_for_constant_state() {
        let g = Grid::new_2d(8, 8, 1.0, 1.0).unwrap();
        let rho = ScalarField::constant(g, 2.0);
        let v = VectorField::zeros(g);
        let f = VectorField::constant(g, &[0.5, -1.0]);
        let gg = VectorField::constant(g, &[0.1, 0.2]);
        let inp = FAssemblyInputs {
            rho: &rho,
            v: &v,
            delta: 0.2,
            eta: 0.1,
            eps: 0.1,
            pressure: PressureLaw::new(1.0, 1.4).unwrap(),
            f: &f,
            g: &gg,
        };
        let ff = assemble_F(&inp).unwrap();
        for c in 0..g.cell_count() {
            assert!((ff.get(c, 0) - 1.1).abs() < 1e-12);
            assert!((ff.get(c, 1) + 1.8).abs() < 1e-12);
        }
        let zero = VectorField::zeros(g);
        let inp0 = FAssemblyInputs { f: &zero, g: &zero, ..inp };
        assert!(assemble_F(&inp0).unwrap().data().iter().all(|&x| x.abs() < 1e-12));
    }
}

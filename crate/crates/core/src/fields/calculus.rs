use rayon::prelude::*;

use super::{Field, Grid, ScalarField, SymTensorField, VectorField};
use crate::constitutive::SmallMat;
use crate::error::Result;

/// Derivative stencil of cell `c` along `axis`: up to three (cell, weight) pairs.
///
/// Centered in the interior and on periodic grids; second-order one-sided on
/// the first and last layer of a bounded grid.
#[inline]
pub(crate) fn diff_stencil(grid: &Grid, c: usize, axis: usize) -> [(usize, f64); 3] {
    let h = grid.h(axis);
    match (grid.neighbor(c, axis, -1), grid.neighbor(c, axis, 1)) {
        (Some(m), Some(p)) => [(m, -0.5 / h), (p, 0.5 / h), (c, 0.0)],
        (None, Some(p)) => {
            let pp = grid.neighbor(c, axis, 2).expect("grid has at least 4 cells");
            [(c, -1.5 / h), (p, 2.0 / h), (pp, -0.5 / h)]
        }
        (Some(m), None) => {
            let mm = grid.neighbor(c, axis, -2).expect("grid has at least 4 cells");
            [(c, 1.5 / h), (m, -2.0 / h), (mm, 0.5 / h)]
        }
        (None, None) => unreachable!("axis with a single cell"),
    }
}

#[inline]
fn apply_stencil(values: &[f64], stride: usize, offset: usize, s: &[(usize, f64); 3]) -> f64 {
    s.iter().map(|&(n, w)| w * values[n * stride + offset]).sum()
}

/// Partial derivative of a scalar field.
pub fn partial(f: &ScalarField, axis: usize) -> ScalarField {
    let g = *f.grid();
    let data = (0..g.cell_count())
        .into_par_iter()
        .map(|c| apply_stencil(f.values(), 1, 0, &diff_stencil(&g, c, axis)))
        .collect();
    ScalarField::from_parts(g, data)
}

pub fn grad(f: &ScalarField) -> VectorField {
    let g = *f.grid();
    let d = g.dim();
    let mut out = vec![0.0; g.cell_count() * d];
    out.par_chunks_mut(d).enumerate().for_each(|(c, row)| {
        for (a, slot) in row.iter_mut().enumerate() {
            *slot = apply_stencil(f.values(), 1, 0, &diff_stencil(&g, c, a));
        }
    });
    VectorField::from_parts(g, out)
}

/// Velocity gradient at one cell, `J[i][j] = d_j v_i`.
pub fn jacobian_at(v: &VectorField, c: usize) -> SmallMat {
    let g = v.grid();
    let d = g.dim();
    let mut m = SmallMat::zeros(d);
    for j in 0..d {
        let s = diff_stencil(g, c, j);
        for i in 0..d {
            m.set(i, j, apply_stencil(v.data(), d, i, &s));
        }
    }
    m
}

pub fn jacobian(v: &VectorField) -> Vec<SmallMat> {
    (0..v.grid().cell_count())
        .into_par_iter()
        .map(|c| jacobian_at(v, c))
        .collect()
}

pub fn sym_grad(v: &VectorField) -> SymTensorField {
    let j = jacobian(v);
    SymTensorField::from_cells(*v.grid(), |c| j[c].sym())
}

/// Divergence with zero values outside the grid: the negative adjoint of
/// [`grad`] for fields vanishing on the outer layer.
pub fn div(v: &VectorField) -> ScalarField {
    let g = *v.grid();
    let d = g.dim();
    let data = (0..g.cell_count())
        .into_par_iter()
        .map(|c| {
            let mut s = 0.0;
            for a in 0..d {
                let h = g.h(a);
                let p = g.neighbor(c, a, 1).map_or(0.0, |n| v.get(n, a));
                let m = g.neighbor(c, a, -1).map_or(0.0, |n| v.get(n, a));
                s += (p - m) / (2.0 * h);
            }
            s
        })
        .collect();
    ScalarField::from_parts(g, data)
}

/// Trace of the one-sided-closure gradient; exact for affine fields everywhere.
pub fn div_closed(v: &VectorField) -> ScalarField {
    let g = *v.grid();
    let d = g.dim();
    let data = (0..g.cell_count())
        .into_par_iter()
        .map(|c| {
            (0..d)
                .map(|a| apply_stencil(v.data(), d, a, &diff_stencil(&g, c, a)))
                .sum()
        })
        .collect();
    ScalarField::from_parts(g, data)
}

/// Five-point (seven-point in 3D) Laplacian with zero normal flux.
pub fn neumann_laplacian(f: &ScalarField) -> ScalarField {
    let g = *f.grid();
    let data = (0..g.cell_count())
        .into_par_iter()
        .map(|c| {
            let fc = f.get(c);
            let mut s = 0.0;
            for a in 0..g.dim() {
                let h2 = g.h(a) * g.h(a);
                for o in [-1, 1] {
                    if let Some(n) = g.neighbor(c, a, o) {
                        s += (f.get(n) - fc) / h2;
                    }
                }
            }
            s
        })
        .collect();
    ScalarField::from_parts(g, data)
}

/// Row of `(∇u)(∇ϱ)`: `Σ_j ∂_j u_i ∂_j ϱ`.
pub(crate) fn grad_times_grad(u: &VectorField, rho: &ScalarField) -> Result<VectorField> {
    u.check_same_grid(rho)?;
    let gr = grad(rho);
    let g = *u.grid();
    let d = g.dim();
    let mut out = VectorField::zeros(g);
    for c in 0..g.cell_count() {
        let j = jacobian_at(u, c);
        for i in 0..d {
            let s: f64 = (0..d).map(|k| j.get(i, k) * gr.get(c, k)).sum();
            out.set(c, i, s);
        }
    }
    Ok(out)
}

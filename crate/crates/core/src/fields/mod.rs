//! Structured-grid fields and discrete calculus.

mod calculus;
mod dump;
mod grid;
mod mollify;

pub(crate) use calculus::{diff_stencil, grad_times_grad};
pub use calculus::{
    div, div_closed, grad, jacobian, jacobian_at, neumann_laplacian, partial, sym_grad,
};
pub use dump::{read_dump, write_dump, DumpHeader, FieldKind};
pub use grid::Grid;
pub use mollify::{extend_zero, mollify, restrict, truncate, InteriorMask, MollifierKernel};

use crate::constitutive::SmallMat;
use crate::error::{Error, Result};

/// Common storage contract: `components()` values per cell, interleaved.
pub trait Field: Clone + Sized {
    fn grid(&self) -> &Grid;
    /// Values stored per cell on `grid`.
    fn components_on(grid: &Grid) -> usize;
    fn components(&self) -> usize {
        Self::components_on(self.grid())
    }
    fn data(&self) -> &[f64];
    fn data_mut(&mut self) -> &mut [f64];
    fn from_parts(grid: Grid, data: Vec<f64>) -> Self;

    /// Weight of each component in the pointwise inner product
    /// (2 for stored off-diagonal tensor entries).
    fn component_weight(&self, _k: usize) -> f64 {
        1.0
    }

    fn zeros_like(&self) -> Self {
        Self::from_parts(*self.grid(), vec![0.0; self.data().len()])
    }

    /// Pointwise Euclidean/Frobenius magnitude at cell `c`.
    fn magnitude_at(&self, c: usize) -> f64 {
        let k = self.components();
        let d = &self.data()[c * k..(c + 1) * k];
        d.iter()
            .enumerate()
            .map(|(i, v)| self.component_weight(i) * v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    fn axpy(&mut self, a: f64, other: &Self) {
        for (x, y) in self.data_mut().iter_mut().zip(other.data()) {
            *x += a * y;
        }
    }

    fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.data_mut().iter_mut().for_each(|v| *v *= a);
        out
    }

    fn check_same_grid(&self, other: &impl Field) -> Result<()> {
        if self.grid() == other.grid() {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

macro_rules! impl_field {
    ($ty:ident) => {
        impl Field for $ty {
            fn grid(&self) -> &Grid {
                &self.grid
            }
            fn components_on(grid: &Grid) -> usize {
                Self::components_for(grid.dim())
            }
            fn data(&self) -> &[f64] {
                &self.data
            }
            fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }
            fn from_parts(grid: Grid, data: Vec<f64>) -> Self {
                assert_eq!(
                    data.len(),
                    grid.cell_count() * Self::components_for(grid.dim()),
                    "value count must match cell count"
                );
                Self { grid, data }
            }
            fn component_weight(&self, k: usize) -> f64 {
                self.weight_of(k)
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    data: Vec<f64>,
}

/// Symmetric tensors stored as the upper triangle, row by row:
/// (xx, xy, yy) in 2D and (xx, xy, xz, yy, yz, zz) in 3D.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTensorField {
    grid: Grid,
    data: Vec<f64>,
}

impl_field!(ScalarField);
impl_field!(VectorField);
impl_field!(SymTensorField);

impl ScalarField {
    fn components_for(_dim: usize) -> usize {
        1
    }
    fn weight_of(&self, _k: usize) -> f64 {
        1.0
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.cell_count()],
        }
    }

    /// Samples `f` at cell centers.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let data = (0..grid.cell_count()).map(|c| f(grid.center(c))).collect();
        Self { grid, data }
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize) -> f64 {
        self.data[c]
    }

    #[inline]
    pub fn set(&mut self, c: usize, v: f64) {
        self.data[c] = v;
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Midpoint-rule integral over the grid.
    pub fn integral(&self) -> f64 {
        self.data.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn mean(&self) -> f64 {
        self.integral() / self.grid.volume()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl VectorField {
    fn components_for(dim: usize) -> usize {
        dim
    }
    fn weight_of(&self, _k: usize) -> f64 {
        1.0
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.cell_count() * grid.dim()],
        }
    }

    pub fn constant(grid: Grid, value: &[f64]) -> Self {
        let d = grid.dim();
        assert_eq!(value.len(), d, "constant vector must have d components");
        let mut data = Vec::with_capacity(grid.cell_count() * d);
        for _ in 0..grid.cell_count() {
            data.extend_from_slice(value);
        }
        Self { grid, data }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let d = grid.dim();
        let mut data = Vec::with_capacity(grid.cell_count() * d);
        for c in 0..grid.cell_count() {
            let v = f(grid.center(c));
            data.extend_from_slice(&v[..d]);
        }
        Self { grid, data }
    }

    /// Builds a vector field from per-component scalar fields.
    pub fn from_components(parts: &[ScalarField]) -> Result<Self> {
        let grid = *parts[0].grid();
        if parts.len() != grid.dim() {
            return Err(Error::InvalidParameter(format!(
                "need {} components, got {}",
                grid.dim(),
                parts.len()
            )));
        }
        for p in parts {
            p.check_same_grid(&parts[0])?;
        }
        let d = grid.dim();
        let mut data = vec![0.0; grid.cell_count() * d];
        for (k, p) in parts.iter().enumerate() {
            for c in 0..grid.cell_count() {
                data[c * d + k] = p.get(c);
            }
        }
        Ok(Self { grid, data })
    }

    pub fn component(&self, k: usize) -> ScalarField {
        let d = self.grid.dim();
        ScalarField {
            grid: self.grid,
            data: (0..self.grid.cell_count()).map(|c| self.data[c * d + k]).collect(),
        }
    }

    #[inline]
    pub fn get(&self, c: usize, k: usize) -> f64 {
        self.data[c * self.grid.dim() + k]
    }

    #[inline]
    pub fn set(&mut self, c: usize, k: usize, v: f64) {
        let d = self.grid.dim();
        self.data[c * d + k] = v;
    }

    #[inline]
    pub fn at(&self, c: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.data[c * d..(c + 1) * d]
    }

    /// Pointwise product with a scalar field.
    pub fn times_scalar(&self, s: &ScalarField) -> Self {
        let d = self.grid.dim();
        let mut out = self.clone();
        for c in 0..self.grid.cell_count() {
            for k in 0..d {
                out.data[c * d + k] *= s.get(c);
            }
        }
        out
    }

    /// True when every cell of the outer layer holds the zero vector.
    pub fn vanishes_on_boundary(&self) -> bool {
        (0..self.grid.cell_count())
            .filter(|&c| self.grid.is_boundary_cell(c))
            .all(|c| self.at(c).iter().all(|&v| v == 0.0))
    }

    /// Zeroes the outer layer of cells.
    pub fn zero_boundary(&mut self) {
        let d = self.grid.dim();
        for c in 0..self.grid.cell_count() {
            if self.grid.is_boundary_cell(c) {
                self.data[c * d..(c + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

impl SymTensorField {
    fn components_for(dim: usize) -> usize {
        dim * (dim + 1) / 2
    }

    fn weight_of(&self, k: usize) -> f64 {
        let d = self.grid.dim();
        let (i, j) = sym_pair(d, k);
        if i == j {
            1.0
        } else {
            2.0
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.cell_count() * Self::components_for(grid.dim())],
        }
    }

    /// Stores the symmetric part of `f(c)` at every cell.
    pub fn from_cells(grid: Grid, f: impl Fn(usize) -> SmallMat) -> Self {
        let mut out = Self::zeros(grid);
        for c in 0..grid.cell_count() {
            out.set_tensor(c, &f(c));
        }
        out
    }

    pub fn tensor_at(&self, c: usize) -> SmallMat {
        let d = self.grid.dim();
        let k = Self::components_for(d);
        let mut m = SmallMat::zeros(d);
        for (slot, v) in self.data[c * k..(c + 1) * k].iter().enumerate() {
            let (i, j) = sym_pair(d, slot);
            m.set(i, j, *v);
            m.set(j, i, *v);
        }
        m
    }

    pub fn set_tensor(&mut self, c: usize, m: &SmallMat) {
        let d = self.grid.dim();
        let k = Self::components_for(d);
        for slot in 0..k {
            let (i, j) = sym_pair(d, slot);
            self.data[c * k + slot] = 0.5 * (m.get(i, j) + m.get(j, i));
        }
    }
}

/// (row, col) of the `slot`-th stored upper-triangle entry.
pub(crate) fn sym_pair(d: usize, slot: usize) -> (usize, usize) {
    match (d, slot) {
        (2, 0) => (0, 0),
        (2, 1) => (0, 1),
        (2, 2) => (1, 1),
        (3, 0) => (0, 0),
        (3, 1) => (0, 1),
        (3, 2) => (0, 2),
        (3, 3) => (1, 1),
        (3, 4) => (1, 2),
        (3, 5) => (2, 2),
        _ => panic!("invalid symmetric slot {slot} for dimension {d}"),
    }
}

/// Discrete L^p norm (sum |f_c|^p vol)^(1/p); p = infinity gives the max norm.
pub fn lebesgue_norm<F: Field>(f: &F, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidParameter(format!("L^p norm needs p >= 1, got {p}")));
    }
    let cells = f.grid().cell_count();
    if p.is_infinite() {
        return Ok((0..cells).map(|c| f.magnitude_at(c)).fold(0.0, f64::max));
    }
    let vol = f.grid().cell_volume();
    let s: f64 = (0..cells).map(|c| f.magnitude_at(c).powf(p)).sum();
    Ok((s * vol).powf(1.0 / p))
}

/// Cell-volume weighted inner product.
pub fn inner<F: Field>(f: &F, g: &F) -> Result<f64> {
    f.check_same_grid(g)?;
    let k = f.components();
    let vol = f.grid().cell_volume();
    let mut s = 0.0;
    for (i, (a, b)) in f.data().iter().zip(g.data()).enumerate() {
        s += f.component_weight(i % k) * a * b;
    }
    Ok(s * vol)
}

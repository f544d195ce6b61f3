use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Cell-centered structured grid on the box `origin + (0, extent)`, d in {2, 3}.
///
/// Cell `c` has multi-index `(i, j, k)` with `c = i + nx (j + ny k)`; for d = 2
/// the third axis has a single cell. A periodic grid is a torus with no
/// boundary cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    n: [usize; 3],
    extent: [f64; 3],
    origin: [f64; 3],
    periodic: bool,
}

impl Grid {
    pub fn new_2d(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        Self::build(2, [nx, ny, 1], [lx, ly, 1.0])
    }

    pub fn new_3d(nx: usize, ny: usize, nz: usize, lx: f64, ly: f64, lz: f64) -> Result<Self> {
        Self::build(3, [nx, ny, nz], [lx, ly, lz])
    }

    /// Square/cubic grid with `n` cells per side on `(0, len)^d`.
    pub fn uniform(dim: usize, n: usize, len: f64) -> Result<Self> {
        match dim {
            2 => Self::new_2d(n, n, len, len),
            3 => Self::new_3d(n, n, n, len, len, len),
            d => Err(crate::Error::UnsupportedDimension(d)),
        }
    }

    fn build(dim: usize, n: [usize; 3], extent: [f64; 3]) -> Result<Self> {
        for a in 0..dim {
            ensure(n[a] >= 4, || format!("need at least 4 cells per axis, got {}", n[a]))?;
            ensure(extent[a] > 0.0 && extent[a].is_finite(), || {
                format!("extent must be positive, got {}", extent[a])
            })?;
        }
        Ok(Self {
            dim,
            n,
            extent,
            origin: [0.0; 3],
            periodic: false,
        })
    }

    /// Same cells, but with periodic wrap-around in every direction.
    pub fn into_periodic(self) -> Self {
        Self {
            periodic: true,
            ..self
        }
    }

    /// Grid padded by `pad` cells on each side of every axis, same spacing.
    pub fn enlarged(&self, pad: usize) -> Self {
        let mut n = self.n;
        let mut extent = self.extent;
        let mut origin = self.origin;
        for a in 0..self.dim {
            let h = self.h(a);
            n[a] += 2 * pad;
            extent[a] += 2.0 * pad as f64 * h;
            origin[a] -= pad as f64 * h;
        }
        Self {
            dim: self.dim,
            n,
            extent,
            origin,
            periodic: false,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    #[inline]
    pub fn n(&self, axis: usize) -> usize {
        self.n[axis]
    }

    #[inline]
    pub fn extent(&self, axis: usize) -> f64 {
        self.extent[axis]
    }

    #[inline]
    pub fn origin(&self, axis: usize) -> f64 {
        self.origin[axis]
    }

    #[inline]
    pub fn h(&self, axis: usize) -> f64 {
        self.extent[axis] / self.n[axis] as f64
    }

    pub fn min_h(&self) -> f64 {
        (0..self.dim).map(|a| self.h(a)).fold(f64::INFINITY, f64::min)
    }

    pub fn max_h(&self) -> f64 {
        (0..self.dim).map(|a| self.h(a)).fold(0.0, f64::max)
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.h(a)).product()
    }

    /// |Omega|
    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|a| self.extent[a]).product()
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.n[0],
            _ => self.n[0] * self.n[1],
        }
    }

    #[inline]
    pub fn index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.n[0] * (idx[1] + self.n[1] * idx[2])
    }

    #[inline]
    pub fn multi_index(&self, c: usize) -> [usize; 3] {
        let i = c % self.n[0];
        let rest = c / self.n[0];
        [i, rest % self.n[1], rest / self.n[1]]
    }

    pub fn center(&self, c: usize) -> [f64; 3] {
        let idx = self.multi_index(c);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.origin[a] + (idx[a] as f64 + 0.5) * self.h(a);
        }
        x
    }

    /// Neighbor `offset` cells away along `axis`; wraps on periodic grids.
    #[inline]
    pub fn neighbor(&self, c: usize, axis: usize, offset: isize) -> Option<usize> {
        let idx = self.multi_index(c);
        let n = self.n[axis] as isize;
        let mut j = idx[axis] as isize + offset;
        if self.periodic {
            j = j.rem_euclid(n);
        } else if j < 0 || j >= n {
            return None;
        }
        let mut out = idx;
        out[axis] = j as usize;
        Some(self.index(out))
    }

    /// Distance from the cell center to the boundary of the box.
    pub fn dist_to_boundary(&self, c: usize) -> f64 {
        if self.periodic {
            return f64::INFINITY;
        }
        let x = self.center(c);
        (0..self.dim)
            .map(|a| {
                let rel = x[a] - self.origin[a];
                rel.min(self.extent[a] - rel)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Cells in the outermost layer (none on a periodic grid).
    #[inline]
    pub fn is_boundary_cell(&self, c: usize) -> bool {
        if self.periodic {
            return false;
        }
        let idx = self.multi_index(c);
        (0..self.dim).any(|a| idx[a] == 0 || idx[a] + 1 == self.n[a])
    }

    /// Normalized coordinates `(x - origin) / extent` of a cell center.
    pub fn unit_center(&self, c: usize) -> [f64; 3] {
        let x = self.center(c);
        let mut out = [0.0; 3];
        for a in 0..self.dim {
            out[a] = (x[a] - self.origin[a]) / self.extent[a];
        }
        out
    }
}

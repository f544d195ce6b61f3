use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};
use rayon::prelude::*;

use super::{Field, Grid};

/// Discrete quartic bump `(1 - |x|²/δ²)²` on `|x| < δ`, weights summing to one.
#[derive(Clone, Debug)]
pub struct MollifierKernel {
    delta: f64,
    taps: Vec<([isize; 3], f64)>,
}

impl MollifierKernel {
    /// `None` when the kernel would not resolve a single neighbor.
    pub fn new(grid: &Grid, delta: f64) -> Option<Self> {
        if !(delta > 0.0) || delta <= grid.min_h() {
            return None;
        }
        let d = grid.dim();
        let mut reach = [0isize; 3];
        for (a, r) in reach.iter_mut().enumerate().take(d) {
            *r = (delta / grid.h(a)).floor() as isize;
            if grid.is_periodic() {
                *r = (*r).min(((grid.n(a) - 1) / 2) as isize);
            }
        }
        let mut taps = Vec::new();
        for k in -reach[2]..=reach[2] {
            for j in -reach[1]..=reach[1] {
                for i in -reach[0]..=reach[0] {
                    let o = [i, j, k];
                    let r2: f64 = (0..d)
                        .map(|a| (o[a] as f64 * grid.h(a)).powi(2))
                        .sum::<f64>()
                        / (delta * delta);
                    if r2 < 1.0 {
                        taps.push((o, (1.0 - r2).powi(2)));
                    }
                }
            }
        }
        let total: f64 = taps.iter().map(|t| t.1).sum();
        taps.iter_mut().for_each(|t| t.1 /= total);
        Some(Self { delta, taps })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn taps(&self) -> &[([isize; 3], f64)] {
        &self.taps
    }

    fn shifted(grid: &Grid, c: usize, o: [isize; 3]) -> Option<usize> {
        let idx = grid.multi_index(c);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let n = grid.n(a) as isize;
            let mut j = idx[a] as isize + o[a];
            if grid.is_periodic() {
                j = j.rem_euclid(n);
            } else if j < 0 || j >= n {
                return None;
            }
            out[a] = j as usize;
        }
        Some(grid.index(out))
    }

    /// Convolution with zero values outside a bounded grid.
    pub fn apply<F: Field>(&self, f: &F) -> F {
        let g = *f.grid();
        let k = f.components();
        let src = f.data();
        let mut out = vec![0.0; src.len()];
        out.par_chunks_mut(k).enumerate().for_each(|(c, row)| {
            for &(o, w) in &self.taps {
                if let Some(n) = Self::shifted(&g, c, o) {
                    for (m, slot) in row.iter_mut().enumerate() {
                        *slot += w * src[n * k + m];
                    }
                }
            }
        });
        F::from_parts(g, out)
    }
}

/// `ω_δ ∗ f` with zero extension; identity (with a warning) when δ does not
/// exceed the smallest grid spacing.
pub fn mollify<F: Field>(f: &F, delta: f64) -> F {
    match MollifierKernel::new(f.grid(), delta) {
        Some(k) => k.apply(f),
        None => {
            if delta > 0.0 {
                static WARNED: AtomicBool = AtomicBool::new(false);
                if WARNED.swap(true, Ordering::Relaxed) {
                    debug!("mollifier radius {delta:e} is below the grid spacing; using identity");
                } else {
                    warn!("mollifier radius {delta:e} is below the grid spacing; using identity");
                }
            }
            f.clone()
        }
    }
}

/// Cells at distance at least `2δ` from the boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct InteriorMask {
    grid: Grid,
    inside: Vec<bool>,
}

impl InteriorMask {
    pub fn new(grid: &Grid, delta: f64) -> Self {
        let inside = (0..grid.cell_count())
            .map(|c| grid.dist_to_boundary(c) >= 2.0 * delta)
            .collect();
        Self { grid: *grid, inside }
    }

    pub fn contains(&self, c: usize) -> bool {
        self.inside[c]
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn apply<F: Field>(&self, f: &F) -> F {
        assert_eq!(f.grid(), &self.grid, "mask and field grids differ");
        let k = f.components();
        let mut out = f.clone();
        for (c, row) in out.data_mut().chunks_mut(k).enumerate() {
            if !self.inside[c] {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }
}

/// `T_δ f`: zero on every cell closer than `2δ` to the boundary.
pub fn truncate<F: Field>(f: &F, delta: f64) -> F {
    InteriorMask::new(f.grid(), delta).apply(f)
}

/// Zero extension onto the grid padded by `pad` cells per side.
pub fn extend_zero<F: Field>(f: &F, pad: usize) -> F {
    let g = *f.grid();
    let big = g.enlarged(pad);
    let k = f.components();
    let mut out = vec![0.0; big.cell_count() * k];
    for c in 0..g.cell_count() {
        let idx = g.multi_index(c);
        let mut bi = idx;
        for (a, b) in bi.iter_mut().enumerate().take(g.dim()) {
            *b = idx[a] + pad;
        }
        let bc = big.index(bi);
        out[bc * k..(bc + 1) * k].copy_from_slice(&f.data()[c * k..(c + 1) * k]);
    }
    F::from_parts(big, out)
}

/// Inverse of [`extend_zero`]: the original window of a padded field.
pub fn restrict<F: Field>(f: &F, grid: &Grid, pad: usize) -> F {
    let big = *f.grid();
    let k = f.components();
    let mut out = vec![0.0; grid.cell_count() * k];
    for c in 0..grid.cell_count() {
        let idx = grid.multi_index(c);
        let mut bi = idx;
        for (a, b) in bi.iter_mut().enumerate().take(grid.dim()) {
            *b = idx[a] + pad;
        }
        let bc = big.index(bi);
        out[c * k..(c + 1) * k].copy_from_slice(&f.data()[bc * k..(bc + 1) * k]);
    }
    F::from_parts(*grid, out)
}

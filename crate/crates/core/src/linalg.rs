//! Sparse matrices and the linear solvers behind the continuity and momentum steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compressed sparse row matrix (square).
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl CsrMatrix {
    /// Builds the matrix from `(row, col, value)` triplets; duplicates are summed
    /// in input order so the result is deterministic.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n + 1];
        for &(i, _, _) in triplets {
            counts[i + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut order = vec![0usize; triplets.len()];
        let mut next = counts.clone();
        for (t, &(i, _, _)) in triplets.iter().enumerate() {
            order[next[i]] = t;
            next[i] += 1;
        }
        let mut row_ptr = vec![0usize; n + 1];
        let mut col = Vec::with_capacity(triplets.len());
        let mut val = Vec::with_capacity(triplets.len());
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for i in 0..n {
            scratch.clear();
            for &t in &order[counts[i]..counts[i + 1]] {
                scratch.push((triplets[t].1, triplets[t].2));
            }
            scratch.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < scratch.len() {
                let j = scratch[k].0;
                let mut s = 0.0;
                while k < scratch.len() && scratch[k].0 == j {
                    s += scratch[k].1;
                    k += 1;
                }
                col.push(j);
                val.push(s);
            }
            row_ptr[i + 1] = col.len();
        }
        Self { n, row_ptr, col, val }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col[r.clone()].iter().copied().zip(self.val[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col[r.clone()].binary_search(&j) {
            Ok(k) => self.val[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Max row sum of absolute values.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Exact (bit-level) symmetry of the stored pattern and values.
    pub fn is_symmetric_bitwise(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i).to_bits() == v.to_bits()))
    }

    /// Replaces row `i` with the given sparse entries.
    pub fn with_row(&self, i: usize, entries: &[(usize, f64)]) -> Self {
        let mut t = Vec::with_capacity(self.nnz() + entries.len());
        for r in 0..self.n {
            if r == i {
                t.extend(entries.iter().map(|&(j, v)| (r, j, v)));
            } else {
                t.extend(self.row(r).map(|(j, v)| (r, j, v)));
            }
        }
        Self::from_triplets(self.n, &t)
    }

    /// Lower/upper bandwidth over rows `0..rows`.
    fn bandwidth(&self, rows: usize) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for i in 0..rows {
            for (j, _) in self.row(i) {
                if j < i {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        (kl, ku)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }
}

/// Normwise backward error `|Ax - b|_inf / (|A|_inf |x|_inf + |b|_inf)`.
pub fn backward_error(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let r = a.mul_vec(x);
    let res = r.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let xn = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let bn = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let denom = a.norm_inf() * xn + bn;
    if denom == 0.0 {
        0.0
    } else {
        res / denom
    }
}

/// Banded LU factorization without pivoting, with an optional block of dense
/// trailing rows (used for the mass-constraint row).
///
/// Intended for matrices that are diagonally dominant or symmetric positive
/// definite, where no pivoting is needed.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    band_rows: usize,
    band: Vec<f64>,
    tail: Vec<Vec<f64>>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix, dense_tail: usize) -> Result<Self> {
        let n = a.n();
        if dense_tail > n {
            return Err(Error::InvalidParameter("dense tail longer than matrix".into()));
        }
        let band_rows = n - dense_tail;
        let (kl, ku) = a.bandwidth(band_rows);
        let w = kl + ku + 1;
        let mut band = vec![0.0; band_rows * w];
        for i in 0..band_rows {
            for (j, v) in a.row(i) {
                band[i * w + (j + kl - i)] = v;
            }
        }
        let mut tail: Vec<Vec<f64>> = (band_rows..n)
            .map(|i| {
                let mut r = vec![0.0; n];
                for (j, v) in a.row(i) {
                    r[j] = v;
                }
                r
            })
            .collect();
        let scale = a.norm_inf().max(f64::MIN_POSITIVE);
        for k in 0..band_rows {
            let piv = band[k * w + kl];
            if !(piv.abs() > 1e-300 * scale) || !piv.is_finite() {
                return Err(Error::Singular(format!("zero pivot at row {k}")));
            }
            let hi = (k + ku).min(n - 1);
            let (head, rest) = band.split_at_mut((k + 1) * w);
            let urow = &head[k * w..];
            for i in k + 1..(k + kl + 1).min(band_rows) {
                let ri = &mut rest[(i - k - 1) * w..(i - k) * w];
                let lik = ri[k + kl - i];
                if lik == 0.0 {
                    continue;
                }
                let m = lik / piv;
                ri[k + kl - i] = m;
                for j in k + 1..=hi {
                    ri[j + kl - i] -= m * urow[j + kl - k];
                }
            }
            for t in tail.iter_mut() {
                let m = t[k] / piv;
                if m == 0.0 {
                    continue;
                }
                t[k] = m;
                for j in k + 1..=hi {
                    t[j] -= m * urow[j + kl - k];
                }
            }
        }
        for r in 0..dense_tail {
            let k = band_rows + r;
            let (done, todo) = tail.split_at_mut(r + 1);
            let urow = &done[r];
            let piv = urow[k];
            if !(piv.abs() > 1e-300 * scale) || !piv.is_finite() {
                return Err(Error::Singular(format!("zero pivot at dense row {k}")));
            }
            for t in todo.iter_mut() {
                let m = t[k] / piv;
                t[k] = m;
                for j in k + 1..n {
                    t[j] -= m * urow[j];
                }
            }
        }
        Ok(Self {
            n,
            kl,
            ku,
            band_rows,
            band,
            tail,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let w = self.kl + self.ku + 1;
        let kl = self.kl;
        let mut y = b.to_vec();
        for i in 0..self.band_rows {
            let lo = i.saturating_sub(kl);
            let mut s = y[i];
            for k in lo..i {
                s -= self.band[i * w + (k + kl - i)] * y[k];
            }
            y[i] = s;
        }
        for (r, t) in self.tail.iter().enumerate() {
            let i = self.band_rows + r;
            let s: f64 = (0..i).map(|k| t[k] * y[k]).sum();
            y[i] -= s;
        }
        for r in (0..self.tail.len()).rev() {
            let i = self.band_rows + r;
            let t = &self.tail[r];
            let s: f64 = (i + 1..n).map(|j| t[j] * y[j]).sum();
            y[i] = (y[i] - s) / t[i];
        }
        for i in (0..self.band_rows).rev() {
            let hi = (i + self.ku).min(n - 1);
            let mut s = y[i];
            for j in i + 1..=hi {
                s -= self.band[i * w + (j + kl - i)] * y[j];
            }
            y[i] = s / self.band[i * w + kl];
        }
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearMethod {
    Direct,
    Iterative,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinearOptions {
    /// Unknown counts up to this size use the direct banded factorization.
    pub direct_limit: usize,
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Symmetric positive definite: use conjugate gradients when iterating.
    pub spd: bool,
    /// Number of trailing dense rows.
    pub dense_tail: usize,
}

impl Default for LinearOptions {
    fn default() -> Self {
        Self {
            direct_limit: 2 * 128 * 128,
            rel_tol: 1e-12,
            max_iter: 20_000,
            spd: false,
            dense_tail: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinearStats {
    pub method: LinearMethod,
    pub iterations: usize,
    pub backward_error: f64,
}

/// Solves `A x = b`, directly (with one refinement step) for small systems and
/// with a Jacobi-preconditioned Krylov method otherwise.
pub fn solve(a: &CsrMatrix, b: &[f64], opts: &LinearOptions) -> Result<(Vec<f64>, LinearStats)> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotFinite("linear right-hand side"));
    }
    if a.n() <= opts.direct_limit {
        let lu = BandedLu::factor(a, opts.dense_tail)?;
        return direct_solve(a, b, &lu);
    }
    let (x, it) = if opts.spd {
        pcg(a, b, opts)?
    } else {
        bicgstab(a, b, opts)?
    };
    let be = backward_error(a, &x, b);
    Ok((
        x,
        LinearStats {
            method: LinearMethod::Iterative,
            iterations: it,
            backward_error: be,
        },
    ))
}

fn direct_solve(a: &CsrMatrix, b: &[f64], lu: &BandedLu) -> Result<(Vec<f64>, LinearStats)> {
    let mut x = lu.solve(b);
    let ax = a.mul_vec(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
    let dx = lu.solve(&r);
    x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotFinite("direct solve"));
    }
    let be = backward_error(a, &x, b);
    Ok((
        x,
        LinearStats {
            method: LinearMethod::Direct,
            iterations: 1,
            backward_error: be,
        },
    ))
}

/// Factorization of an earlier matrix in a sequence of slowly varying SPD
/// systems, reused as a conjugate-gradient preconditioner.
#[derive(Clone, Debug, Default)]
pub struct FactorCache {
    lu: Option<BandedLu>,
    pub factorizations: usize,
    pub reused_solves: usize,
}

impl FactorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.lu = None;
    }
}

const REUSE_MAX_ITER: usize = 30;

/// Like [`solve`], but for SPD systems within the direct limit first tries
/// conjugate gradients preconditioned by the cached factorization, and
/// refactors when that fails to converge quickly.
pub fn solve_cached(
    a: &CsrMatrix,
    b: &[f64],
    opts: &LinearOptions,
    cache: &mut FactorCache,
) -> Result<(Vec<f64>, LinearStats)> {
    if !opts.spd || a.n() > opts.direct_limit || opts.dense_tail > 0 {
        return solve(a, b, opts);
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotFinite("linear right-hand side"));
    }
    if let Some(lu) = cache.lu.as_ref().filter(|lu| lu.n == a.n()) {
        if let Ok((x, it)) = pcg_with(a, b, opts.rel_tol, REUSE_MAX_ITER, |r| lu.solve(r)) {
            if x.iter().all(|v| v.is_finite()) {
                cache.reused_solves += 1;
                let be = backward_error(a, &x, b);
                return Ok((
                    x,
                    LinearStats {
                        method: LinearMethod::Iterative,
                        iterations: it,
                        backward_error: be,
                    },
                ));
            }
        }
    }
    let lu = BandedLu::factor(a, 0)?;
    let out = direct_solve(a, b, &lu)?;
    cache.lu = Some(lu);
    cache.factorizations += 1;
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn jacobi(a: &CsrMatrix) -> Vec<f64> {
    a.diagonal()
        .into_iter()
        .map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect()
}

fn pcg(a: &CsrMatrix, b: &[f64], opts: &LinearOptions) -> Result<(Vec<f64>, usize)> {
    let minv = jacobi(a);
    pcg_with(a, b, opts.rel_tol, opts.max_iter, |r| r.iter().zip(&minv).map(|(p, q)| p * q).collect())
}

fn pcg_with(
    a: &CsrMatrix,
    b: &[f64],
    rel_tol: f64,
    max_iter: usize,
    precond: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<(Vec<f64>, usize)> {
    let n = a.n();
    let bn = norm2(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.to_vec();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Singular("matrix is not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rn = norm2(&r);
        if rn <= rel_tol * bn {
            return Ok((x, it));
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NonConvergence {
        solver: "conjugate gradients",
        iterations: max_iter,
        residual: norm2(&r) / bn,
    })
}

fn bicgstab(a: &CsrMatrix, b: &[f64], opts: &LinearOptions) -> Result<(Vec<f64>, usize)> {
    let n = a.n();
    let minv = jacobi(a);
    let bn = norm2(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.to_vec();
    let r0 = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    for it in 1..=opts.max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph: Vec<f64> = p.iter().zip(&minv).map(|(a, m)| a * m).collect();
        a.mul_vec_into(&ph, &mut v);
        alpha = rho / dot(&r0, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= opts.rel_tol * bn {
            for i in 0..n {
                x[i] += alpha * ph[i];
            }
            return Ok((x, it));
        }
        let sh: Vec<f64> = s.iter().zip(&minv).map(|(a, m)| a * m).collect();
        a.mul_vec_into(&sh, &mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm2(&r) <= opts.rel_tol * bn {
            return Ok((x, it));
        }
        if omega == 0.0 || !omega.is_finite() {
            break;
        }
    }
    Err(Error::NonConvergence {
        solver: "bicgstab",
        iterations: opts.max_iter,
        residual: norm2(&r) / bn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dominant(n: usize, width: usize, seed: u64, dense_last: bool) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            let mut off = 0.0;
            for j in i.saturating_sub(width)..(i + width + 1).min(n) {
                if j != i && rng.random_bool(0.6) {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    off += v.abs();
                    t.push((i, j, v));
                }
            }
            t.push((i, i, off + 1.0));
        }
        let a = CsrMatrix::from_triplets(n, &t);
        if dense_last {
            let row: Vec<(usize, f64)> = (0..n).map(|j| (j, 1.0 / n as f64)).collect();
            a.with_row(n - 1, &row)
        } else {
            a
        }
    }

    #[test]
    fn duplicates_are_summed() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, -1.0), (1, 1, 4.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.nnz(), 3);
        assert!(!a.is_symmetric_bitwise());
    }

    #[test]
    fn banded_lu_matches_residual() {
        for (seed, dense) in [(1, false), (2, true), (3, true)] {
            let a = random_dominant(60, 5, seed, dense);
            let b: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
            let opts = LinearOptions {
                dense_tail: usize::from(dense),
                ..Default::default()
            };
            let (x, st) = solve(&a, &b, &opts).unwrap();
            assert_eq!(st.method, LinearMethod::Direct);
            assert!(st.backward_error < 1e-15, "{}", st.backward_error);
            assert!(backward_error(&a, &x, &b) < 1e-15);
        }
    }

    #[test]
    fn iterative_paths_converge() {
        let a = random_dominant(80, 4, 9, false);
        let b: Vec<f64> = (0..80).map(|i| 1.0 + i as f64 * 0.01).collect();
        let opts = LinearOptions {
            direct_limit: 0,
            ..Default::default()
        };
        let (x, st) = solve(&a, &b, &opts).unwrap();
        assert_eq!(st.method, LinearMethod::Iterative);
        let (xd, _) = solve(&a, &b, &LinearOptions::default()).unwrap();
        for (p, q) in x.iter().zip(&xd) {
            assert!((p - q).abs() < 1e-9);
        }

        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.5));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let s = CsrMatrix::from_triplets(n, &t);
        assert!(s.is_symmetric_bitwise());
        let b = vec![1.0; n];
        let (x, _) = solve(
            &s,
            &b,
            &LinearOptions {
                direct_limit: 0,
                spd: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(backward_error(&s, &x, &b) < 1e-13);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CsrMatrix::from_triplets(3, &[(0, 0, 1.0), (1, 1, 0.0), (2, 2, 1.0)]);
        assert!(matches!(BandedLu::factor(&a, 0), Err(Error::Singular(_))));
    }
}

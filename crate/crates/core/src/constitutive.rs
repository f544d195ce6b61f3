//! Pointwise constitutive laws: power-law and regularized Herschel-Bulkley
//! stresses, the barotropic pressure, and the admissibility calculus for the
//! exponent pair (r, gamma).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Dense d x d matrix with d in {1, 2, 3}, stored inline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmallMat {
    dim: usize,
    a: [[f64; 3]; 3],
}

impl SmallMat {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=3).contains(&dim), "SmallMat supports 1 <= dim <= 3");
        Self {
            dim,
            a: [[0.0; 3]; 3],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.a[i][i] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Self::zeros(entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m.a[i][i] = v;
        }
        m
    }

    /// Builds a matrix from row slices; all rows must have length `rows.len()`.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), dim, "matrix must be square");
            for (j, &v) in row.iter().enumerate() {
                m.a[i][j] = v;
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i][j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i][i]).sum()
    }

    /// Frobenius norm |A| = sqrt(A:A).
    pub fn norm(&self) -> f64 {
        self.ddot(self).sqrt()
    }

    /// Double contraction A:B.
    pub fn ddot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += self.a[i][j] * other.a[i][j];
            }
        }
        s
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.a[i][j] *= s;
            }
        }
        m
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.a[i][j] += other.a[i][j];
            }
        }
        m
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn transpose(&self) -> Self {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.a[i][j] = self.a[j][i];
            }
        }
        m
    }

    /// (A + A^T) / 2
    pub fn sym(&self) -> Self {
        self.add(&self.transpose()).scale(0.5)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..i {
                worst = worst.max((self.a[i][j] - self.a[j][i]).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        (0..self.dim).all(|i| (0..self.dim).all(|j| self.a[i][j].is_finite()))
    }

    /// Rejects NaN/inf entries and matrices that are not symmetric up to a
    /// relative tolerance of 1e-12.
    pub fn check_symmetric(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NotFinite("stress argument"));
        }
        let asym = self.max_asymmetry();
        let scale = self.norm().max(1.0);
        if asym > 1e-12 * scale {
            return Err(Error::NonSymmetric(asym));
        }
        Ok(())
    }
}

/// `s^(p)` with the convention `0^p = 0` for any p, which keeps
/// `|A|^(r-2) A` continuous at the origin for r < 2.
#[inline]
pub(crate) fn signed_pow_times(s: f64, p: f64) -> f64 {
    if s == 0.0 {
        0.0
    } else {
        s.abs().powf(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawParams {
    pub mu0: f64,
    pub lambda0: f64,
    pub r: f64,
}

impl PowerLawParams {
    pub fn new(mu0: f64, lambda0: f64, r: f64) -> Result<Self> {
        let p = Self { mu0, lambda0, r };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.mu0 > 0.0, || format!("mu0 must be > 0, got {}", self.mu0))?;
        ensure(self.lambda0 >= 0.0, || {
            format!("lambda0 must be >= 0, got {}", self.lambda0)
        })?;
        ensure(self.r > 1.0, || format!("r must be > 1, got {}", self.r))
    }

    /// Upper growth constant: |S(A)| <= C1 |A|^(r-1).
    pub fn growth_upper(&self, dim: usize) -> f64 {
        self.mu0 + self.lambda0 * (dim as f64).powf(self.r / 2.0)
    }

    /// Lower growth constant: S(A):A >= C2 |A|^r.
    pub fn growth_lower(&self) -> f64 {
        self.mu0
    }
}

/// Regularized Herschel-Bulkley law: nu |A|^(r-2) A + tau_star g_eps(|A|) A.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HbRegParams {
    pub tau_star: f64,
    pub nu: f64,
    pub r: f64,
    pub eps_reg: f64,
}

impl HbRegParams {
    pub fn new(tau_star: f64, nu: f64, r: f64, eps_reg: f64) -> Result<Self> {
        let p = Self {
            tau_star,
            nu,
            r,
            eps_reg,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.tau_star > 0.0, || "tau_star must be > 0".into())?;
        ensure(self.nu > 0.0, || "nu must be > 0".into())?;
        ensure(self.r > 1.0, || "r must be > 1".into())?;
        ensure(self.eps_reg > 0.0, || "eps_reg must be > 0".into())
    }

    pub fn with_eps_reg(&self, eps_reg: f64) -> Self {
        Self { eps_reg, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureLaw {
    pub a: f64,
    pub gamma: f64,
}

impl PressureLaw {
    pub fn new(a: f64, gamma: f64) -> Result<Self> {
        let p = Self { a, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.a > 0.0, || format!("pressure coefficient a must be > 0, got {}", self.a))?;
        ensure(self.gamma > 1.0, || format!("gamma must be > 1, got {}", self.gamma))
    }
}

/// p(rho) = a rho^gamma
pub fn eval_pressure(rho: f64, law: &PressureLaw) -> Result<f64> {
    if rho.is_nan() {
        return Err(Error::NotFinite("density"));
    }
    ensure(rho >= 0.0, || format!("density must be >= 0, got {rho}"))?;
    Ok(law.a * rho.powf(law.gamma))
}

/// S(A) = mu0 |A|^(r-2) A + lambda0 |tr A|^(r-2) tr A I.
pub fn eval_stress_power_law(a: &SmallMat, p: &PowerLawParams) -> Result<SmallMat> {
    a.check_symmetric()?;
    p.validate()?;
    Ok(power_law_stress(a, p))
}

pub(crate) fn power_law_stress(a: &SmallMat, p: &PowerLawParams) -> SmallMat {
    let n = a.norm();
    let tr = a.trace();
    let shear = p.mu0 * signed_pow_times(n, p.r - 2.0);
    let bulk = p.lambda0 * signed_pow_times(tr, p.r - 2.0) * tr;
    a.scale(shear).add(&SmallMat::identity(a.dim()).scale(bulk))
}

/// Blend of the Herschel-Bulkley regularizer: g_eps = 1/m_eps on
/// [eps/2, 3eps/2], where m_eps(s) = eps (1 + u^2/2 + 0.3 u^2 (1-u)^2),
/// u = (s - eps/2)/eps. m_eps >= max(eps, s) and m_eps is C^1 across both
/// junctions.
fn hb_blend_denominator(s: f64, eps: f64) -> (f64, f64) {
    let u = (s - 0.5 * eps) / eps;
    let w = 1.0 - u;
    let m = eps * (1.0 + 0.5 * u * u + 0.3 * u * u * w * w);
    // dm/ds = u + 0.6 u (1-u)(1-2u)
    let dm = u + 0.6 * u * w * (1.0 - 2.0 * u);
    (m, dm)
}

/// g_eps(s): 1/eps on [0, eps/2], 1/s on [3eps/2, inf), C^1 non-increasing blend
/// in between.
pub fn hb_g_eps(s: f64, eps: f64) -> Result<f64> {
    ensure(eps > 0.0, || format!("eps must be > 0, got {eps}"))?;
    ensure(s >= 0.0, || format!("s must be >= 0, got {s}"))?;
    Ok(g_eps(s, eps))
}

#[inline]
pub(crate) fn g_eps(s: f64, eps: f64) -> f64 {
    if s <= 0.5 * eps {
        1.0 / eps
    } else if s >= 1.5 * eps {
        1.0 / s
    } else {
        1.0 / hb_blend_denominator(s, eps).0
    }
}

/// Analytic derivative g_eps'(s).
pub fn hb_g_eps_derivative(s: f64, eps: f64) -> f64 {
    if s <= 0.5 * eps {
        0.0
    } else if s >= 1.5 * eps {
        -1.0 / (s * s)
    } else {
        let (m, dm) = hb_blend_denominator(s, eps);
        -dm / (m * m)
    }
}

// 16-point Gauss-Legendre nodes/weights on [-1, 1] (positive half).
const GL16_X: [f64; 8] = [
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_8,
    0.755_404_408_355_003,
    0.865_631_202_387_831_8,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
const GL16_W: [f64; 8] = [
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_6,
    0.169_156_519_395_002_5,
    0.149_595_988_816_576_7,
    0.124_628_971_255_533_9,
    0.095_158_511_682_492_78,
    0.062_253_523_938_647_89,
    0.027_152_459_411_754_095,
];

fn gauss16(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut s = 0.0;
    for k in 0..8 {
        s += GL16_W[k] * (f(c - h * GL16_X[k]) + f(c + h * GL16_X[k]));
    }
    s * h
}

/// G_eps(s) = integral_0^s g_eps(t) t dt, the potential of the plastic part.
pub(crate) fn hb_plastic_potential(s: f64, eps: f64) -> f64 {
    let lo = 0.5 * eps;
    let hi = 1.5 * eps;
    if s <= lo {
        return s * s / (2.0 * eps);
    }
    let plateau = lo * lo / (2.0 * eps);
    let blend_end = s.min(hi);
    let blend = gauss16(lo, blend_end, |t| t / hb_blend_denominator(t, eps).0);
    plateau + blend + (s - hi).max(0.0)
}

fn gauss16_len(a: f64, len: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = 0.5 * len;
    let c = a + h;
    let mut s = 0.0;
    for k in 0..8 {
        s += GL16_W[k] * (f(c - h * GL16_X[k]) + f(c + h * GL16_X[k]));
    }
    s * h
}

/// G_eps(n0 + dn) - G_eps(n0), accurate when dn is tiny relative to n0.
fn hb_plastic_increment(n0: f64, n1: f64, dn: f64, ds: f64, eps: f64) -> f64 {
    let piece = |s: f64| {
        if s <= 0.5 * eps {
            0
        } else if s >= 1.5 * eps {
            2
        } else {
            1
        }
    };
    match (piece(n0), piece(n1)) {
        (0, 0) => ds / (2.0 * eps),
        (2, 2) => dn,
        (1, 1) => gauss16_len(n0, dn, |t| t / hb_blend_denominator(t, eps).0),
        _ => hb_plastic_potential(n1, eps) - hb_plastic_potential(n0, eps),
    }
}

/// `(|a|^2 + ds)^(p/2) - |a|^p` from `old_sq = |a|^2` and the exact increment `ds`.
pub(crate) fn pow_increment(old_sq: f64, ds: f64, p: f64) -> f64 {
    if old_sq == 0.0 {
        return ds.max(0.0).powf(0.5 * p);
    }
    let ratio = (ds / old_sq).max(-1.0);
    if ratio == -1.0 {
        return -old_sq.powf(0.5 * p);
    }
    old_sq.powf(0.5 * p) * (0.5 * p * ratio.ln_1p()).exp_m1()
}

/// P_eps(A) = tau_star g_eps(|A|) A.
pub fn hb_plastic_stress(a: &SmallMat, p: &HbRegParams) -> SmallMat {
    let mut out = a.scale(p.tau_star * g_eps(a.norm(), p.eps_reg));
    // On the 1/s branch |P| equals tau_star up to rounding.
    while out.norm() > p.tau_star {
        out = out.scale(1.0 - f64::EPSILON);
    }
    out
}

/// Full regularized stress nu |A|^(r-2) A + P_eps(A).
pub fn eval_stress_hb_reg(a: &SmallMat, p: &HbRegParams) -> Result<SmallMat> {
    a.check_symmetric()?;
    p.validate()?;
    Ok(hb_stress(a, p))
}

pub(crate) fn hb_stress(a: &SmallMat, p: &HbRegParams) -> SmallMat {
    let n = a.norm();
    let coef = p.nu * signed_pow_times(n, p.r - 2.0) + p.tau_star * g_eps(n, p.eps_reg);
    a.scale(coef)
}

/// Frozen coefficients of a stress law at a given strain: S = shear A + bulk (tr A) I.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaggedCoefficients {
    pub shear: f64,
    pub bulk: f64,
}

/// Tangent of a stress law: `shear P_sym + bulk I⊗I + rank dir⊗dir`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tangent {
    pub shear: f64,
    pub bulk: f64,
    pub rank: f64,
    pub dir: SmallMat,
}

/// Stress model consumed by the momentum solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StressModel {
    PowerLaw(PowerLawParams),
    HerschelBulkley(HbRegParams),
}

impl StressModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            StressModel::PowerLaw(p) => p.validate(),
            StressModel::HerschelBulkley(p) => p.validate(),
        }
    }

    pub fn exponent(&self) -> f64 {
        match self {
            StressModel::PowerLaw(p) => p.r,
            StressModel::HerschelBulkley(p) => p.r,
        }
    }

    /// Checked evaluation of S(A).
    pub fn eval(&self, a: &SmallMat) -> Result<SmallMat> {
        match self {
            StressModel::PowerLaw(p) => eval_stress_power_law(a, p),
            StressModel::HerschelBulkley(p) => eval_stress_hb_reg(a, p),
        }
    }

    #[inline]
    pub(crate) fn stress(&self, a: &SmallMat) -> SmallMat {
        match self {
            StressModel::PowerLaw(p) => power_law_stress(a, p),
            StressModel::HerschelBulkley(p) => hb_stress(a, p),
        }
    }

    /// Energy density W with dW/dA = S(A) on symmetric matrices.
    pub fn potential(&self, a: &SmallMat) -> f64 {
        match self {
            StressModel::PowerLaw(p) => {
                let n = a.norm();
                let tr = a.trace().abs();
                (p.mu0 * n.powf(p.r) + p.lambda0 * tr.powf(p.r)) / p.r
            }
            StressModel::HerschelBulkley(p) => {
                let n = a.norm();
                p.nu * n.powf(p.r) / p.r + p.tau_star * hb_plastic_potential(n, p.eps_reg)
            }
        }
    }

    /// `W(A + dA) - W(A)` evaluated without cancellation.
    pub fn potential_increment(&self, a: &SmallMat, da: &SmallMat) -> f64 {
        let old_sq = a.ddot(a);
        let ds = 2.0 * a.ddot(da) + da.ddot(da);
        match self {
            StressModel::PowerLaw(p) => {
                let tr = a.trace();
                let dtr = da.trace();
                let shear = p.mu0 / p.r * pow_increment(old_sq, ds, p.r);
                let bulk = if p.lambda0 > 0.0 {
                    p.lambda0 / p.r * pow_increment(tr * tr, dtr * (2.0 * tr + dtr), p.r)
                } else {
                    0.0
                };
                shear + bulk
            }
            StressModel::HerschelBulkley(p) => {
                let n0 = old_sq.sqrt();
                let n1 = (old_sq + ds).max(0.0).sqrt();
                let dn = if n0 + n1 > 0.0 { ds / (n0 + n1) } else { 0.0 };
                p.nu / p.r * pow_increment(old_sq, ds, p.r)
                    + p.tau_star * hb_plastic_increment(n0, n1, dn, ds, p.eps_reg)
            }
        }
    }

    /// Lagged (Kacanov) coefficients; `floor` guards the |A|^(r-2) factor.
    pub fn lagged(&self, a: &SmallMat, floor: f64) -> LaggedCoefficients {
        match self {
            StressModel::PowerLaw(p) => {
                let n = a.norm().max(floor);
                let tr = a.trace().abs().max(floor);
                LaggedCoefficients {
                    shear: p.mu0 * n.powf(p.r - 2.0),
                    bulk: if p.lambda0 > 0.0 {
                        p.lambda0 * tr.powf(p.r - 2.0)
                    } else {
                        0.0
                    },
                }
            }
            StressModel::HerschelBulkley(p) => {
                let raw = a.norm();
                let n = raw.max(floor);
                LaggedCoefficients {
                    shear: p.nu * n.powf(p.r - 2.0) + p.tau_star * g_eps(raw, p.eps_reg),
                    bulk: 0.0,
                }
            }
        }
    }

    /// Exact tangent dS/dA as `shear P + bulk I⊗I + rank Â⊗Â`, `Â = A/|A|`;
    /// `floor` guards the |A|^(r-2) and |tr A|^(r-2) factors.
    pub fn tangent(&self, a: &SmallMat, floor: f64) -> Tangent {
        let raw = a.norm();
        let n = raw.max(floor);
        let dir = if raw > 0.0 { a.scale(1.0 / raw) } else { SmallMat::zeros(a.dim()) };
        match self {
            StressModel::PowerLaw(p) => {
                let s = p.mu0 * n.powf(p.r - 2.0);
                let tr = a.trace().abs().max(floor);
                Tangent {
                    shear: s,
                    bulk: if p.lambda0 > 0.0 {
                        p.lambda0 * (p.r - 1.0) * tr.powf(p.r - 2.0)
                    } else {
                        0.0
                    },
                    rank: if raw > 0.0 { (p.r - 2.0) * s } else { 0.0 },
                    dir,
                }
            }
            StressModel::HerschelBulkley(p) => {
                let visc = p.nu * n.powf(p.r - 2.0);
                let g = g_eps(raw, p.eps_reg);
                Tangent {
                    shear: visc + p.tau_star * g,
                    bulk: 0.0,
                    rank: if raw > 0.0 {
                        (p.r - 2.0) * visc + p.tau_star * hb_g_eps_derivative(raw, p.eps_reg) * raw
                    } else {
                        0.0
                    },
                    dir,
                }
            }
        }
    }

    /// The yield-stress part P_eps(A), if the model has one.
    pub fn plastic_part(&self, a: &SmallMat) -> Option<SmallMat> {
        match self {
            StressModel::PowerLaw(_) => None,
            StressModel::HerschelBulkley(p) => Some(hb_plastic_stress(a, p)),
        }
    }
}

/// Which of the two admissibility conditions applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdmissibleBranch {
    /// d > r > 3d/(d+2) with gamma above the r-dependent threshold.
    Subcritical,
    /// r >= d, any gamma > 1.
    Supercritical,
    /// r <= 3d/(d+2): no gamma works.
    BelowRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub d: usize,
    pub r: f64,
    pub gamma: f64,
    pub admissible: bool,
    pub r_lower: f64,
    pub gamma_lower: f64,
    pub branch: AdmissibleBranch,
    pub q1_star: Option<f64>,
    pub q2_star: Option<f64>,
    pub open_ended: bool,
}

fn check_dim(d: usize) -> Result<()> {
    if d == 2 || d == 3 {
        Ok(())
    } else {
        Err(Error::UnsupportedDimension(d))
    }
}

pub fn admissible(d: usize, r: f64, gamma: f64) -> Result<AdmissibilityReport> {
    check_dim(d)?;
    ensure(r > 1.0 && gamma > 1.0, || {
        format!("r and gamma must exceed 1, got r = {r}, gamma = {gamma}")
    })?;
    let df = d as f64;
    let r_lower = 3.0 * df / (df + 2.0);
    let (branch, gamma_lower) = if r >= df {
        (AdmissibleBranch::Supercritical, 1.0)
    } else if r > r_lower {
        let denom = (df + 2.0) * r - 3.0 * df;
        (AdmissibleBranch::Subcritical, df * (r - 1.0) / denom)
    } else {
        (AdmissibleBranch::BelowRange, f64::INFINITY)
    };
    let ok = gamma > gamma_lower;
    let (q1, q2, open) = if ok {
        let q = dual_exponents_unchecked(df, r, gamma);
        (Some(q.q1_star), Some(q.q2_star), q.open_ended)
    } else {
        (None, None, false)
    };
    Ok(AdmissibilityReport {
        d,
        r,
        gamma,
        admissible: ok,
        r_lower,
        gamma_lower,
        branch,
        q1_star: q1,
        q2_star: q2,
        open_ended: open,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualExponents {
    pub q1_star: f64,
    pub q2_star: f64,
    /// r = d: any q with 1/q > (r-1)/(r gamma) works; the supremum is reported.
    pub open_ended: bool,
}

pub fn dual_exponents(d: usize, r: f64, gamma: f64) -> Result<DualExponents> {
    let rep = admissible(d, r, gamma)?;
    if !rep.admissible {
        return Err(Error::Inadmissible { d, r, gamma });
    }
    Ok(dual_exponents_unchecked(d as f64, r, gamma))
}

fn dual_exponents_unchecked(d: f64, r: f64, gamma: f64) -> DualExponents {
    let tail = (r - 1.0) / (r * gamma);
    if r < d {
        DualExponents {
            q1_star: 1.0 / (1.0 / r - 1.0 / d + tail),
            q2_star: 1.0 / (2.0 / r - 2.0 / d + tail),
            open_ended: false,
        }
    } else {
        DualExponents {
            q1_star: 1.0 / tail,
            q2_star: 1.0 / tail,
            open_ended: r == d,
        }
    }
}

//! JSON run configuration.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nnflow::constitutive::{admissible, HbRegParams, PowerLawParams, PressureLaw, StressModel};
use nnflow::fields::{Grid, ScalarField, VectorField};
use nnflow::linalg::LinearOptions;
use nnflow::momentum::MomentumOptions;
use nnflow::outer::{
    GeometricLadder, HbData, LadderSchedule, LevelParams, OuterOptions, PhysicalData, Relaxation, Rung,
};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub ladder: LadderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hb: Option<HbConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub d: usize,
    pub extents: Vec<f64>,
    pub n: usize,
    pub mass: f64,
    pub gamma: f64,
    #[serde(default = "one")]
    pub a: f64,
    pub r: f64,
    pub mu0: f64,
    #[serde(default)]
    pub lambda0: f64,
    pub q: f64,
    pub f: ForceSpec,
    pub g: ForceSpec,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Uniform,
    Shear,
    VortexForcing,
}

/// A force given as a constant vector or as a named analytic preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ForceSpec {
    Constant {
        constant: Vec<f64>,
    },
    Preset {
        preset: Preset,
        #[serde(default = "one")]
        amplitude: f64,
    },
}

impl ForceSpec {
    pub fn sample(&self, grid: &Grid) -> Result<VectorField, CliError> {
        let d = grid.dim();
        match self {
            ForceSpec::Constant { constant } => {
                if constant.len() != d {
                    return Err(CliError::Config(format!(
                        "constant force has {} components, expected {d}",
                        constant.len()
                    )));
                }
                Ok(VectorField::constant(*grid, constant))
            }
            ForceSpec::Preset { preset, amplitude } => {
                let a = *amplitude;
                let mut v = VectorField::zeros(*grid);
                for c in 0..grid.cell_count() {
                    let x = grid.unit_center(c);
                    let z = if d == 3 { (PI * x[2]).sin() } else { 1.0 };
                    match preset {
                        Preset::Uniform => v.set(c, 0, a),
                        Preset::Shear => v.set(c, 0, a * (PI * x[1]).cos()),
                        Preset::VortexForcing => {
                            v.set(c, 0, a * z * (PI * x[0]).sin() * (2.0 * PI * x[1]).sin());
                            v.set(c, 1, -a * z * (2.0 * PI * x[0]).sin() * (PI * x[1]).sin());
                        }
                    }
                }
                Ok(v)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LadderConfig {
    Explicit { rungs: Vec<Rung> },
    Geometric(GeometricLadder),
}

impl LadderConfig {
    pub fn rungs(&self) -> Result<Vec<Rung>, CliError> {
        match self {
            LadderConfig::Explicit { rungs } => Ok(rungs.clone()),
            LadderConfig::Geometric(g) => Ok(g.rungs()?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HbConfig {
    pub tau_star: f64,
    pub nu: f64,
    /// Descending regularization widths.
    pub eps_reg: Vec<f64>,
    pub alpha_hb: f64,
    #[serde(default)]
    pub beta: f64,
    /// Constant value of the reference density.
    pub rho_check: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub theta: f64,
    pub min_theta: f64,
    pub stagnation_window: usize,
    pub relaxation: Relaxation,
    pub momentum_tol: f64,
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = OuterOptions::default();
        Self {
            tol: o.tol,
            max_iter: o.max_iter,
            theta: o.theta,
            min_theta: o.min_theta,
            stagnation_window: o.stagnation_window,
            relaxation: o.relaxation,
            momentum_tol: o.momentum.tol,
            warm_start: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub fields: bool,
    #[serde(default = "yes")]
    pub diagnostics: bool,
}

fn yes() -> bool {
    true
}

/// Oscillatory forcing family `f_k = f + amplitude sin(2πk x_1) e_component`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub wavenumbers: Vec<f64>,
    pub amplitude: f64,
    #[serde(default)]
    pub component: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        let p = &self.problem;
        if p.extents.len() != p.d {
            return Err(CliError::Config(format!(
                "extents has {} entries, expected d = {}",
                p.extents.len(),
                p.d
            )));
        }
        let g = match p.d {
            2 => Grid::new_2d(p.n, p.n, p.extents[0], p.extents[1])?,
            3 => Grid::new_3d(p.n, p.n, p.n, p.extents[0], p.extents[1], p.extents[2])?,
            d => return Err(CliError::Config(format!("d must be 2 or 3, got {d}"))),
        };
        Ok(g)
    }

    pub fn stress(&self, eps_reg: Option<f64>) -> Result<StressModel, CliError> {
        let p = &self.problem;
        Ok(match &self.hb {
            Some(h) => StressModel::HerschelBulkley(HbRegParams::new(
                h.tau_star,
                h.nu,
                p.r,
                eps_reg.unwrap_or(h.eps_reg[0]),
            )?),
            None => StressModel::PowerLaw(PowerLawParams::new(p.mu0, p.lambda0, p.r)?),
        })
    }

    /// Level parameters at the first rung, with forces sampled on the grid.
    pub fn base_level(&self) -> Result<LevelParams, CliError> {
        let grid = self.grid()?;
        let p = &self.problem;
        let rungs = self.ladder.rungs()?;
        let first = rungs
            .first()
            .ok_or_else(|| CliError::Config("ladder has no rungs".into()))?;
        let hb = self.hb.as_ref().map(|h| HbData {
            alpha_hb: h.alpha_hb,
            beta: h.beta,
            rho_check: ScalarField::constant(grid, h.rho_check),
        });
        Ok(LevelParams {
            alpha: first.alpha,
            delta: first.delta,
            eps: first.eps,
            eta: first.eta,
            q: p.q,
            physical: PhysicalData {
                mass: p.mass,
                pressure: PressureLaw::new(p.a, p.gamma)?,
                stress: self.stress(None)?,
                f: p.f.sample(&grid)?,
                g: p.g.sample(&grid)?,
            },
            hb,
        })
    }

    pub fn schedule(&self) -> Result<LadderSchedule, CliError> {
        let base = self.base_level()?;
        Ok(LadderSchedule::from_rungs(&base, &self.ladder.rungs()?, self.solver.warm_start)?)
    }

    pub fn outer_options(&self) -> OuterOptions {
        let s = &self.solver;
        OuterOptions {
            tol: s.tol,
            max_iter: s.max_iter,
            theta: s.theta,
            min_theta: s.min_theta,
            stagnation_window: s.stagnation_window,
            relaxation: s.relaxation,
            post_check: true,
            diagnostics: self.output.diagnostics,
            momentum: MomentumOptions {
                tol: s.momentum_tol,
                ..OuterOptions::default().momentum
            },
            linear: LinearOptions::default(),
        }
    }

    /// Checks everything that can be checked before solving. Every failure is
    /// a [`CliError::Config`].
    pub fn validate(&self) -> Result<(), CliError> {
        self.check().map_err(CliError::into_config)
    }

    fn check(&self) -> Result<(), CliError> {
        let p = &self.problem;
        let report = admissible(p.d, p.r, p.gamma)?;
        if !report.admissible {
            return Err(CliError::Config(format!(
                "(d, r, gamma) = ({}, {}, {}) is not admissible (gamma must exceed {})",
                p.d, p.r, p.gamma, report.gamma_lower
            )));
        }
        if let Some(h) = &self.hb {
            if h.eps_reg.is_empty() {
                return Err(CliError::Config("hb.eps_reg must not be empty".into()));
            }
            if h.eps_reg.iter().any(|&e| !e.is_finite() || e <= 0.0) || h.eps_reg.windows(2).any(|w| w[1] > w[0]) {
                return Err(CliError::Config("hb.eps_reg must be positive and descending".into()));
            }
            if !(p.gamma > 1.0 && p.gamma <= 2.0) {
                return Err(CliError::Config(format!(
                    "Herschel–Bulkley runs need 1 < gamma <= 2, got {}",
                    p.gamma
                )));
            }
            if h.rho_check < 0.0 {
                return Err(CliError::Config("hb.rho_check must be nonnegative".into()));
            }
        }
        if let Some(s) = &self.study {
            if s.component >= p.d {
                return Err(CliError::Config(format!("study.component must be < {}", p.d)));
            }
            if s.wavenumbers.is_empty() {
                return Err(CliError::Config("study.wavenumbers must not be empty".into()));
            }
        }
        let schedule = self.schedule()?;
        for level in &schedule.levels {
            level.validate()?;
        }
        Ok(())
    }
}

//! Run configuration: TOML with sections, defaults for every key, and
//! validation that reports all violations at once.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dissipation::{DissipationParams, DragModel, PulledBackDrag};
use crate::energy::{isotropic_equilibrium_dilation, ElasticParams, ElasticTensor};
use crate::error::{Error, Result};
use crate::grid::{read_snapshot, DeformationField, FluidGrid, Lattice, Rect, SolidGrid};
use crate::injectivity::GuardTolerances;
use crate::minimizer::{MinimizeOptions, StepContext, StepParams};
use crate::scheme::{ForceFn, InitialData, Problem};
use crate::toy::ToyEnergy;

/// Relative tolerance for "is an integer" checks on `h/τ` and `T/h`.
const RATIO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for the randomized `check` suites.
    pub seed: u64,
    pub domain: DomainConfig,
    pub physics: PhysicsConfig,
    pub scheme: SchemeConfig,
    pub guard: GuardConfig,
    pub initial: InitialConfig,
    pub force: ForceConfig,
    pub output: OutputConfig,
    pub toy: ToyConfig,
    pub study: StudyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pinning {
    LeftEdge,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    /// Reference body `Q` as `[x0, y0, x1, y1]`.
    pub solid: [f64; 4],
    pub solid_nodes: [usize; 2],
    /// Container `Ω`.
    pub container: [f64; 4],
    pub container_nodes: [usize; 2],
    pub pinning: Pinning,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            solid: [0.0, 0.0, 1.0, 1.0],
            solid_nodes: [17, 17],
            container: [-0.5, -0.5, 1.5, 1.5],
            container_nodes: [33, 33],
            pinning: Pinning::LeftEdge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DragKind {
    Isotropic,
    PulledBack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub rho_s: f64,
    pub rho_f: f64,
    pub nu: f64,
    pub drag_a0: f64,
    pub drag: DragKind,
    pub mu: f64,
    pub lambda: f64,
    pub a: f64,
    pub q: f64,
    pub a0: f64,
    pub k0_order: usize,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            rho_s: 1.0,
            rho_f: 1.0,
            nu: 0.1,
            drag_a0: 1.0,
            drag: DragKind::Isotropic,
            mu: 1.0,
            lambda: 1.0,
            a: 9.0,
            q: 4.0,
            a0: 0.5,
            k0_order: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub tau: f64,
    pub h: f64,
    pub horizon: f64,
    pub warm_start: bool,
    pub gtol: f64,
    pub max_iter: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        let l = crate::lbfgs::LbfgsOptions::default();
        SchemeConfig {
            tau: 0.0025,
            h: 0.05,
            horizon: 0.5,
            warm_start: false,
            gtol: l.gtol,
            max_iter: l.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardConfig {
    pub gap_tol: f64,
    pub clearance_tol: f64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            gap_tol: 1e-6,
            clearance_tol: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DeformationInit {
    Identity,
    /// `x ↦ (c + s(x₁ − c), x₂)` about the centre of `Q`.
    UniaxialStretch {
        stretch: f64,
    },
    /// Uniform dilation about the centre of `Q` to the stress-free state of the density.
    EquilibriumDilation,
    /// Snapshot with two columns on the solid lattice.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RateInit {
    Zero,
    /// `b = (−rate · (x₁ − x₀), 0)` with `x₀` the left end of `Q`.
    Compression {
        rate: f64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VelocityInit {
    Zero,
    /// Snapshot with two columns on the container lattice.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub eta0: DeformationInit,
    pub b: RateInit,
    pub v0: VelocityInit,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig {
            eta0: DeformationInit::Identity,
            b: RateInit::Compression { rate: 3.0 },
            v0: VelocityInit::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ForceConfig {
    Zero,
    /// A gradient field: the pressure absorbs it and it does no work.
    Constant {
        fx: f64,
        fy: f64,
    },
    /// `f = (amplitude · sin(π(y − y₀)/L), 0)` with `[y₀, y₀ + L]` the container height.
    Shear {
        amplitude: f64,
    },
}

impl Default for ForceConfig {
    fn default() -> Self {
        ForceConfig::Shear { amplitude: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Snapshot every this many steps; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyEnergyKind {
    Zero,
    Quadratic,
    DoubleWell,
}

impl From<ToyEnergyKind> for ToyEnergy {
    fn from(k: ToyEnergyKind) -> Self {
        match k {
            ToyEnergyKind::Zero => ToyEnergy::Zero,
            ToyEnergyKind::Quadratic => ToyEnergy::Quadratic,
            ToyEnergyKind::DoubleWell => ToyEnergy::DoubleWell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub energy: ToyEnergyKind,
    pub x0: Vec<f64>,
    pub xstar: Vec<f64>,
    pub tau: f64,
    pub h: f64,
    pub horizon: f64,
    /// Also run the naive scheme at step `tau`.
    pub naive: bool,
    /// Local tolerance of the reference integrator.
    pub reference_tol: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            energy: ToyEnergyKind::DoubleWell,
            x0: vec![1.5, 0.3],
            xstar: vec![0.0, 0.3],
            tau: 0.0025,
            h: 0.05,
            horizon: 10.0,
            naive: true,
            reference_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Toy levels, each run at `τ = h²`.
    pub toy_hs: Vec<f64>,
    pub toy_horizon: f64,
    /// FPSI levels as `[τ, h]`; empty skips the FPSI study.
    pub fpsi_levels: Vec<[f64; 2]>,
    pub fpsi_horizon: f64,
    pub fpsi_solid_nodes: [usize; 2],
    pub fpsi_container_nodes: [usize; 2],
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            toy_hs: vec![0.1, 0.05, 0.025, 0.0125],
            toy_horizon: 2.0,
            fpsi_levels: vec![[0.02, 0.04], [0.01, 0.04], [0.005, 0.04], [0.0025, 0.04]],
            fpsi_horizon: 0.16,
            fpsi_solid_nodes: [9, 9],
            fpsi_container_nodes: [17, 17],
        }
    }
}

fn rect(r: [f64; 4]) -> Rect {
    Rect::new(r[0], r[1], r[2], r[3])
}

fn is_integer_ratio(num: f64, den: f64) -> bool {
    let r = num / den;
    r >= 1.0 - RATIO_TOL && (r - r.round()).abs() <= RATIO_TOL * r.max(1.0)
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
        other => other,
    })
}

impl RunConfig {
    /// The effective config as TOML.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn elastic(&self) -> ElasticParams {
        let p = &self.physics;
        ElasticParams {
            tensor: ElasticTensor::Isotropic {
                mu: p.mu,
                lambda: p.lambda,
            },
            a: p.a,
            q: p.q,
            h_reg_weight: 0.0,
            a0: p.a0,
            k0_order: p.k0_order,
        }
        .with_h(self.scheme.h)
    }

    pub fn dissipation(&self) -> DissipationParams {
        let p = &self.physics;
        DissipationParams {
            nu: p.nu,
            drag_a0: p.drag_a0,
            drag_model: match p.drag {
                DragKind::Isotropic => DragModel::Isotropic,
                DragKind::PulledBack => DragModel::Custom(Arc::new(PulledBackDrag { a0: p.drag_a0 })),
            },
            h_rate_weight: self.scheme.h,
            k0_order: p.k0_order,
        }
    }

    /// All violated constraints.
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.elastic().violations();
        if self.seed > i64::MAX as u64 {
            out.push(format!("seed must be at most {}, got {}", i64::MAX, self.seed));
        }
        out.extend(self.dissipation().violations());
        let d = &self.domain;
        for (name, n) in [("solid_nodes", d.solid_nodes), ("container_nodes", d.container_nodes)] {
            if n[0] < 4 || n[1] < 4 {
                out.push(format!("domain.{name} must be at least 4 in each direction, got {n:?}"));
            }
        }
        for (name, r) in [("solid", d.solid), ("container", d.container)] {
            if !(r[2] > r[0] && r[3] > r[1]) {
                out.push(format!("domain.{name} must satisfy x1 > x0 and y1 > y0, got {r:?}"));
            }
        }
        let (q, o) = (d.solid, d.container);
        if !(q[0] > o[0] && q[1] > o[1] && q[2] < o[2] && q[3] < o[3]) {
            out.push(format!("the solid {q:?} must lie strictly inside the container {o:?}"));
        }
        let p = &self.physics;
        if !(p.rho_s > 0.0 && p.rho_f > 0.0) {
            out.push(format!(
                "densities must satisfy rho_s > 0 and rho_f > 0, got {} and {}",
                p.rho_s, p.rho_f
            ));
        }
        let s = &self.scheme;
        if !(s.tau > 0.0 && s.h > 0.0 && s.horizon > 0.0) {
            out.push(format!(
                "scheme.tau, scheme.h and scheme.horizon must be > 0, got {}, {}, {}",
                s.tau, s.h, s.horizon
            ));
        } else {
            if !is_integer_ratio(s.h, s.tau) {
                out.push(format!("h/tau must be a positive integer, got h/tau = {}", s.h / s.tau));
            }
            if !is_integer_ratio(s.horizon, s.h) {
                out.push(format!(
                    "horizon/h must be a positive integer (no partial final window), got {}",
                    s.horizon / s.h
                ));
            }
        }
        if !(s.gtol > 0.0) || s.max_iter == 0 {
            out.push("scheme.gtol must be > 0 and scheme.max_iter >= 1".into());
        }
        let g = &self.guard;
        if !(g.gap_tol > 0.0 && g.clearance_tol >= 0.0) {
            out.push(format!(
                "guard tolerances must satisfy gap_tol > 0 and clearance_tol >= 0, got {} and {}",
                g.gap_tol, g.clearance_tol
            ));
        }
        if let DeformationInit::UniaxialStretch { stretch } = self.initial.eta0 {
            if !(stretch > 0.0) {
                out.push(format!("initial.eta0 stretch must be > 0, got {stretch}"));
            }
        }
        let t = &self.toy;
        if t.x0.is_empty() || t.x0.len() != t.xstar.len() {
            out.push(format!(
                "toy.x0 and toy.xstar must be nonempty and of equal length, got {} and {}",
                t.x0.len(),
                t.xstar.len()
            ));
        }
        if !(t.tau > 0.0 && t.h > 0.0 && t.horizon > 0.0 && t.reference_tol > 0.0) {
            out.push("toy.tau, toy.h, toy.horizon and toy.reference_tol must be > 0".into());
        } else if !is_integer_ratio(t.h, t.tau) {
            out.push(format!("toy h/tau must be a positive integer, got {}", t.h / t.tau));
        }
        let st = &self.study;
        if st.toy_hs.len() < 2 || st.toy_hs.iter().any(|&h| !(h > 0.0)) {
            out.push("study.toy_hs needs at least two positive levels".into());
        }
        if !(st.toy_horizon > 0.0) {
            out.push("study.toy_horizon must be > 0".into());
        }
        for lvl in &st.fpsi_levels {
            let [tau, h] = *lvl;
            if !(tau > 0.0 && h > 0.0) || !is_integer_ratio(h, tau) || !is_integer_ratio(st.fpsi_horizon, h) {
                out.push(format!(
                    "study.fpsi_levels entry {lvl:?} needs h/tau and fpsi_horizon/h to be positive integers"
                ));
            }
        }
        if st
            .fpsi_solid_nodes
            .iter()
            .chain(&st.fpsi_container_nodes)
            .any(|&n| n < 4)
        {
            out.push("study grid sizes must be at least 4 in each direction".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Applies command-line overrides and revalidates.
    pub fn with_overrides(mut self, tau: Option<f64>, h: Option<f64>, horizon: Option<f64>) -> Result<Self> {
        if let Some(t) = tau {
            self.scheme.tau = t;
        }
        if let Some(v) = h {
            self.scheme.h = v;
        }
        if let Some(t) = horizon {
            self.scheme.horizon = t;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn steps_per_window(&self) -> usize {
        (self.scheme.h / self.scheme.tau).round() as usize
    }

    /// Files referenced by the initial data selectors.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if let DeformationInit::File { path } = &self.initial.eta0 {
            out.push(path.clone());
        }
        if let RateInit::File { path } = &self.initial.b {
            out.push(path.clone());
        }
        if let VelocityInit::File { path } = &self.initial.v0 {
            out.push(path.clone());
        }
        out
    }

    pub fn force(&self) -> ForceFn {
        let o = self.domain.container;
        match self.force {
            ForceConfig::Zero => crate::scheme::zero_force(),
            ForceConfig::Constant { fx, fy } => Arc::new(move |_, _| [fx, fy]),
            ForceConfig::Shear { amplitude } => {
                let (y0, len) = (o[1], o[3] - o[1]);
                Arc::new(move |_, x| [amplitude * (std::f64::consts::PI * (x[1] - y0) / len).sin(), 0.0])
            }
        }
    }

    /// Builds the discrete problem and initial data.
    pub fn build_problem(&self) -> Result<(Problem, InitialData)> {
        self.validate()?;
        let d = &self.domain;
        let ls = Lattice::new(d.solid_nodes[0], d.solid_nodes[1], rect(d.solid))?;
        let pinned = match d.pinning {
            Pinning::LeftEdge => SolidGrid::left_edge(&ls),
            Pinning::None => vec![],
        };
        let solid = SolidGrid::new(ls, pinned)?;
        let fluid = FluidGrid::new(Lattice::new(
            d.container_nodes[0],
            d.container_nodes[1],
            rect(d.container),
        )?);
        let ctx = StepContext::new(solid, fluid, self.physics.k0_order);
        let params = StepParams {
            tau: self.scheme.tau,
            h: self.scheme.h,
            rho_s: self.physics.rho_s,
            rho_f: self.physics.rho_f,
            elastic: self.elastic(),
            dissipation: self.dissipation(),
        };
        let mut minimize = MinimizeOptions::default();
        minimize.lbfgs.gtol = self.scheme.gtol;
        minimize.lbfgs.max_iter = self.scheme.max_iter;
        let problem = Problem {
            ctx,
            params,
            steps_per_window: self.steps_per_window(),
            force: self.force(),
            guard: GuardTolerances {
                gap_tol: self.guard.gap_tol,
                clearance_tol: self.guard.clearance_tol,
            },
            minimize,
            warm_start: self.scheme.warm_start,
        };
        let init = self.initial_data(&problem)?;
        Ok((problem, init))
    }

    fn initial_data(&self, problem: &Problem) -> Result<InitialData> {
        let solid = &problem.ctx.solid;
        let fluid = &problem.ctx.fluid;
        let q = self.domain.solid;
        let c = [0.5 * (q[0] + q[2]), 0.5 * (q[1] + q[3])];
        let eta0 = match &self.initial.eta0 {
            DeformationInit::Identity => DeformationField::identity(solid),
            DeformationInit::UniaxialStretch { stretch } => {
                let s = *stretch;
                DeformationField::from_fn(solid, |x| [c[0] + s * (x[0] - c[0]), x[1]])
            }
            DeformationInit::EquilibriumDilation => {
                let s = isotropic_equilibrium_dilation(&problem.params.elastic);
                DeformationField::from_fn(solid, |x| [c[0] + s * (x[0] - c[0]), c[1] + s * (x[1] - c[1])])
            }
            DeformationInit::File { path } => DeformationField {
                values: read_vector_file(path, &solid.lattice)?,
            },
        };
        let b = match &self.initial.b {
            RateInit::Zero => vec![[0.0; 2]; solid.num_nodes()],
            RateInit::Compression { rate } => (0..solid.num_nodes())
                .map(|n| [-rate * (solid.lattice.coords(n)[0] - q[0]), 0.0])
                .collect(),
            RateInit::File { path } => read_vector_file(path, &solid.lattice)?,
        };
        let v0 = match &self.initial.v0 {
            VelocityInit::Zero => vec![[0.0; 2]; fluid.num_nodes()],
            VelocityInit::File { path } => read_vector_file(path, &fluid.lattice)?,
        };
        Ok(InitialData { eta0, b, v0 })
    }
}

/// Reads a two-column snapshot and checks it lives on `lattice`.
fn read_vector_file(path: &Path, lattice: &Lattice) -> Result<Vec<[f64; 2]>> {
    let file = std::fs::File::open(path)?;
    let (lat, cols) = read_snapshot(std::io::BufReader::new(file))?;
    let same = lat.nx == lattice.nx
        && lat.ny == lattice.ny
        && (lat.dx - lattice.dx).abs() <= 1e-12 * lattice.dx
        && (lat.dy - lattice.dy).abs() <= 1e-12 * lattice.dy;
    if !same || cols.len() != 2 {
        return Err(Error::Config(vec![format!(
            "{}: expected a two-column snapshot on a {}x{} lattice",
            path.display(),
            lattice.nx,
            lattice.ny
        )]));
    }
    Ok(cols[0].iter().zip(&cols[1]).map(|(&x, &y)| [x, y]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn violations(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(Error::Config(v)) => v,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(parse_config(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn exponent_constraint_is_cited() {
        let v = violations("[physics]\na = 3.0\nq = 4.0\n");
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("a > 2q/(q-2) = 4"), "{v:?}");
    }

    #[test]
    fn all_violations_are_collected() {
        let v = violations("[physics]\na = 3.0\nnu = -1.0\n[scheme]\ntau = 0.003\n[domain]\nsolid_nodes = [3, 17]\n");
        assert!(v.len() >= 4, "{v:?}");
        assert!(v.iter().any(|m| m.contains("h/tau")));
        assert!(v.iter().any(|m| m.contains("nu > 0")));
        assert!(v.iter().any(|m| m.contains("solid_nodes")));
    }

    #[test]
    fn partial_final_window_rejected() {
        let v = violations("[scheme]\nhorizon = 0.52\n");
        assert!(v[0].contains("horizon/h"), "{v:?}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let v = violations("seed = 1\n[scheme]\ntau = \"fast\"\n");
        assert!(v[0].contains("line 3"), "{v:?}");
        let v = violations("[scheme]\ntua = 0.1\n");
        assert!(v[0].contains("line 2") && v[0].contains("tua"), "{v:?}");
    }

    #[test]
    fn tagged_selectors() {
        let cfg = parse_config(
            "[initial]\neta0 = { kind = \"uniaxial-stretch\", stretch = 1.1 }\nb = { kind = \"zero\" }\n[force]\nkind = \"constant\"\nfx = 1.0\nfy = 0.0\n",
        )
        .unwrap();
        assert_eq!(cfg.initial.eta0, DeformationInit::UniaxialStretch { stretch: 1.1 });
        assert_eq!(cfg.force, ForceConfig::Constant { fx: 1.0, fy: 0.0 });
        let (p, init) = cfg.build_problem().unwrap();
        assert_eq!(p.steps_per_window, 20);
        assert!((init.eta0.values[0][0] - (0.5 - 1.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn overrides_revalidate() {
        assert!(RunConfig::default().with_overrides(Some(0.01), None, None).is_ok());
        assert!(RunConfig::default().with_overrides(Some(0.03), None, None).is_err());
    }
}

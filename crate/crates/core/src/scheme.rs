//! The two-scale driver: inner minimizing-movement steps of size `τ` over a
//! window of length `h`, windows glued through delayed velocities, and the
//! energy ledger.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::energy::{min_det_flat, regularized_energy};
use crate::error::{check_len, Error, Result};
use crate::flowmap::{
    advance_nodal, jacobian_det_bounds, lipschitz, straighten_velocity, volume_bound, FlowHistory, FlowMap,
};
use crate::grid::{discrete_divergence, stream_to_velocity, DeformationField, Rect, StreamVelocity};
use crate::injectivity::{ciarlet_necas_gap, collision_guard, GuardDecision, GuardTolerances};
use crate::minimizer::{
    certificate_tolerance, minimize, MinimizeOptions, MinimizeStatus, StepContext, StepData, StepFunctional,
    StepParams, StepTerms,
};

/// Force density `f(t, x)` on the container.
pub type ForceFn = Arc<dyn Fn(f64, [f64; 2]) -> [f64; 2] + Send + Sync>;

pub fn zero_force() -> ForceFn {
    Arc::new(|_, _| [0.0, 0.0])
}

pub struct Problem {
    pub ctx: StepContext,
    pub params: StepParams,
    /// `h/τ`.
    pub steps_per_window: usize,
    pub force: ForceFn,
    pub guard: GuardTolerances,
    pub minimize: MinimizeOptions,
    /// Warm-start each step from the previous minimizer.
    pub warm_start: bool,
}

impl Problem {
    pub fn container(&self) -> Rect {
        self.ctx.fluid.lattice.extent()
    }

    pub fn window_length(&self) -> f64 {
        self.params.tau * self.steps_per_window as f64
    }

    fn sample_force(&self, t: f64) -> Vec<[f64; 2]> {
        let lat = &self.ctx.fluid.lattice;
        (0..lat.num_nodes()).map(|n| (self.force)(t, lat.coords(n))).collect()
    }
}

/// Data entering one window.
#[derive(Debug, Clone)]
pub struct WindowData {
    pub t0: f64,
    pub eta0: DeformationField,
    /// `ζ_k` per inner step, per solid node.
    pub zeta: Vec<Vec<[f64; 2]>>,
    /// `w_k` per inner step, per fluid node.
    pub w: Vec<Vec<[f64; 2]>>,
    /// `f_k` per inner step, per fluid node (midpoint samples).
    pub f: Vec<Vec<[f64; 2]>>,
}

/// One ledger row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub window: usize,
    pub step: usize,
    pub time: f64,
    pub iterations: usize,
    pub status: MinimizeStatus,
    pub value_at_min: f64,
    pub value_at_rest: f64,
    pub certificate_gap: f64,
    pub gradient_norm: f64,
    pub line_search_rejections: usize,
    pub stored_energy: f64,
    /// `ρ_s/2 ‖∂_t η‖²`.
    pub solid_kinetic: f64,
    /// `ρ_f/2 ‖v‖²`.
    pub fluid_kinetic: f64,
    /// `ρ_f/2 ‖v∘Φ_k‖²`.
    pub transported_kinetic: f64,
    /// `ρ_s/2 ‖ζ_k‖² + ρ_f/2 ‖w_k‖²`.
    pub delayed_kinetic: f64,
    /// `2R_h`.
    pub kelvin_voigt: f64,
    /// `2A`.
    pub drag: f64,
    /// `ν‖εv‖²`.
    pub strain: f64,
    /// `h‖D v‖²`.
    pub velocity_reg: f64,
    /// `⟨f, v⟩`.
    pub work: f64,
    pub min_det: f64,
    pub phi_det_min: f64,
    pub phi_det_max: f64,
    pub lipschitz: f64,
    pub max_divergence: f64,
    pub gap: f64,
}

impl StepRecord {
    pub fn dissipation(&self) -> f64 {
        self.kelvin_voigt + self.drag + self.strain + self.velocity_reg
    }
}

pub const LEDGER_COLUMNS: &[&str] = &[
    "window",
    "step",
    "time",
    "iterations",
    "status",
    "value_at_min",
    "value_at_rest",
    "certificate_gap",
    "gradient_norm",
    "line_search_rejections",
    "stored_energy",
    "solid_kinetic",
    "fluid_kinetic",
    "transported_kinetic",
    "delayed_kinetic",
    "kelvin_voigt",
    "drag",
    "strain",
    "velocity_reg",
    "work",
    "min_det",
    "phi_det_min",
    "phi_det_max",
    "lipschitz",
    "max_divergence",
    "gap",
];

/// Per-window energy balance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowReport {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub stored_start: f64,
    pub stored_end: f64,
    /// `Σ τ [2R_h + 2A + ν‖εv‖² + h‖Dv‖²]`.
    pub dissipation: f64,
    /// Window average of `ρ_s/2 ‖ζ‖² + ρ_f/2 ‖w‖²`.
    pub kinetic_in: f64,
    /// Window average of `ρ_s/2 ‖∂_t η‖² + ρ_f/2 ‖v∘Φ‖²`.
    pub kinetic_out: f64,
    /// Solid part of `kinetic_out`; the next window's solid `kinetic_in` equals it.
    pub solid_kinetic_out: f64,
    pub work: f64,
    /// `lhs − rhs` of the window inequality.
    pub excess: f64,
    pub allowed_slack: f64,
    /// Largest `|‖v∘Φ_k‖² − ‖v‖²|` in the window.
    pub volume_defect: f64,
    /// The same defect relative to `‖v‖²`.
    pub relative_volume_defect: f64,
    /// `exp(C τ Σ τ Lip(v)²) − 1` at window end.
    pub volume_bound: f64,
    pub max_phi_det_deviation: f64,
    /// `‖η(t_start) − η(t_end)‖_{L²(Q)}`.
    pub drift: f64,
}

impl WindowReport {
    pub fn lhs(&self) -> f64 {
        self.stored_end + self.dissipation + self.kinetic_out
    }

    pub fn rhs(&self) -> f64 {
        self.stored_start + self.kinetic_in + self.work
    }

    pub fn holds(&self) -> bool {
        self.excess <= self.allowed_slack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HaltReason {
    HorizonReached,
    CollisionDetected { time: f64, reason: String },
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tau: f64,
    pub steps_per_window: usize,
    pub times: Vec<f64>,
    pub deformations: Vec<DeformationField>,
    /// `streams[k]` is the velocity on `[t_k, t_{k+1}]`; one shorter than `times`.
    pub streams: Vec<StreamVelocity>,
    pub flow: FlowHistory,
    pub ledger: Vec<StepRecord>,
    pub windows: Vec<WindowReport>,
    /// Fluid kinetic hand-off defect between consecutive windows.
    pub handoff_defects: Vec<f64>,
    pub halt: HaltReason,
}

impl Trajectory {
    pub fn min_det(&self) -> f64 {
        self.ledger.iter().map(|r| r.min_det).fold(f64::INFINITY, f64::min)
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has an initial state")
    }

    /// The ledger as CSV with the column order of [`LEDGER_COLUMNS`].
    pub fn ledger_csv(&self) -> String {
        let mut s = LEDGER_COLUMNS.join(",");
        s.push('\n');
        for r in &self.ledger {
            let status = match r.status {
                MinimizeStatus::Converged => "converged",
                MinimizeStatus::MaxIter => "max_iter",
                MinimizeStatus::CollisionGuard => "collision",
            };
            let _ = writeln!(
                s,
                "{},{},{:e},{},{},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.window,
                r.step,
                r.time,
                r.iterations,
                status,
                r.value_at_min,
                r.value_at_rest,
                r.certificate_gap,
                r.gradient_norm,
                r.line_search_rejections,
                r.stored_energy,
                r.solid_kinetic,
                r.fluid_kinetic,
                r.transported_kinetic,
                r.delayed_kinetic,
                r.kelvin_voigt,
                r.drag,
                r.strain,
                r.velocity_reg,
                r.work,
                r.min_det,
                r.phi_det_min,
                r.phi_det_max,
                r.lipschitz,
                r.max_divergence,
                r.gap
            );
        }
        s
    }
}

/// Outcome of one window.
#[derive(Debug, Clone)]
pub struct WindowSegment {
    pub deformations: Vec<DeformationField>,
    pub streams: Vec<StreamVelocity>,
    pub maps: Vec<FlowMap>,
    pub ledger: Vec<StepRecord>,
    pub report: Option<WindowReport>,
    pub collision: Option<(f64, String)>,
}

fn l2_diff(weights: &[f64], a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    weights
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (p, q))| w * ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)))
        .sum::<f64>()
        .sqrt()
}

fn weighted_sq(weights: &[f64], a: &[[f64; 2]]) -> f64 {
    weights
        .iter()
        .zip(a)
        .map(|(w, p)| w * (p[0] * p[0] + p[1] * p[1]))
        .sum()
}

/// Runs the `h/τ` inner steps of one window and assembles the next window's data.
pub fn solve_window(problem: &Problem, data: &WindowData, index: usize) -> Result<(WindowSegment, Option<WindowData>)> {
    let ctx = &problem.ctx;
    let p = &problem.params;
    let n = problem.steps_per_window;
    let (tau, h) = (p.tau, p.h);
    check_len(n, data.zeta.len())?;
    check_len(n, data.w.len())?;
    check_len(n, data.f.len())?;

    let sw = &ctx.solid.node_weights;
    let flat_lat = &ctx.fluid.lattice;
    let stored_start = regularized_energy(&ctx.solid, &data.eta0, &p.elastic)?
        .total
        .value()
        .ok_or(Error::InfiniteEnergy)?;

    let mut eta = data.eta0.clone();
    let mut psi = StreamVelocity::zero(&ctx.fluid);
    let mut phi = FlowMap::identity(&ctx.fluid);
    let mut seg = WindowSegment {
        deformations: vec![],
        streams: vec![],
        maps: vec![phi.clone()],
        ledger: vec![],
        report: None,
        collision: None,
    };
    let mut velocities = Vec::with_capacity(n);
    let mut rates = Vec::with_capacity(n);
    let mut opts = problem.minimize.clone();
    opts.guard = Some((problem.guard, problem.container()));

    let (mut dissipation, mut kin_in, mut kin_out, mut solid_out, mut work) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut slack, mut defect, mut rel_defect, mut sum_lip) = (0.0, 0.0f64, 0.0f64, 0.0);
    let mut phi_dev = 0.0f64;
    let mut stored_end = stored_start;

    for k in 0..n {
        let t = data.t0 + k as f64 * tau;
        opts.warm_start = if problem.warm_start && k > 0 {
            Some((eta.clone(), psi.clone()))
        } else {
            None
        };
        let mut func = StepFunctional::new(
            ctx,
            p,
            StepData {
                eta_k: &eta,
                phi_k: &phi,
                zeta_k: &data.zeta[k],
                w_k: &data.w[k],
                f_k: &data.f[k],
            },
        )?;
        let (eta1, psi1, rep) = minimize(&mut func, &opts)?;
        if rep.status == MinimizeStatus::CollisionGuard {
            seg.collision = Some((t + tau, rep.guard_reason.clone().unwrap_or_default()));
            return Ok((seg, None));
        }
        let terms: StepTerms = func.terms(&eta1, &psi1)?;
        let v = stream_to_velocity(&ctx.fluid, &psi1)?;
        let div = discrete_divergence(flat_lat, &v)?;
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x[0].abs()).max(x[1].abs()));
        let max_div = div.iter().fold(0.0f64, |m, d| m.max(d.abs())) * flat_lat.dx.min(flat_lat.dy) / vmax.max(1e-300);
        let lip = lipschitz(flat_lat, &v);
        sum_lip += tau * lip * lip;
        let phi1 = advance_nodal(&ctx.fluid, &phi, &v, tau)?;
        let (dmin, dmax) = jacobian_det_bounds(&ctx.fluid, &phi1);
        phi_dev = phi_dev.max((dmax - 1.0).abs()).max((1.0 - dmin).abs());

        let rec = StepRecord {
            window: index,
            step: index * n + k,
            time: t + tau,
            iterations: rep.iterations,
            status: rep.status,
            value_at_min: rep.value_at_min,
            value_at_rest: rep.value_at_rest,
            certificate_gap: rep.certificate_gap(),
            gradient_norm: rep.final_gradient_norm,
            line_search_rejections: rep.line_search_rejections,
            stored_energy: terms.stored.total.or_inf(),
            solid_kinetic: 0.5 * p.rho_s * terms.rate_sq,
            fluid_kinetic: 0.5 * p.rho_f * terms.velocity_sq,
            transported_kinetic: 0.5 * p.rho_f * terms.transported_sq,
            delayed_kinetic: 0.5 * (p.rho_s * terms.zeta_sq + p.rho_f * terms.w_sq),
            kelvin_voigt: 2.0 * terms.kelvin_voigt + h * terms.rate_reg,
            drag: 2.0 * terms.drag,
            strain: p.dissipation.nu * terms.strain,
            velocity_reg: p.dissipation.h_rate_weight * terms.velocity_reg,
            work: terms.work,
            min_det: rep.min_det,
            phi_det_min: dmin,
            phi_det_max: dmax,
            lipschitz: lip,
            max_divergence: max_div,
            gap: rep.injectivity.map_or(0.0, |r| r.gap),
        };
        dissipation += tau * rec.dissipation();
        kin_in += rec.delayed_kinetic / n as f64;
        kin_out += (rec.solid_kinetic + rec.transported_kinetic) / n as f64;
        solid_out += rec.solid_kinetic / n as f64;
        work += tau * rec.work;
        slack += certificate_tolerance(rep.value_at_rest);
        let d = (terms.transported_sq - terms.velocity_sq).abs();
        defect = defect.max(d);
        if terms.velocity_sq > 0.0 {
            rel_defect = rel_defect.max(d / terms.velocity_sq);
        }
        stored_end = rec.stored_energy;

        let r: Vec<[f64; 2]> = eta1
            .values
            .iter()
            .zip(&eta.values)
            .map(|(a, b)| [(a[0] - b[0]) / tau, (a[1] - b[1]) / tau])
            .collect();
        rates.push(r);
        velocities.push(v);
        seg.ledger.push(rec);
        seg.deformations.push(eta1.clone());
        seg.streams.push(psi1.clone());
        seg.maps.push(phi1.clone());
        eta = eta1;
        psi = psi1;
        phi = phi1;
    }

    let scale = 1.0 + stored_start.abs() + kin_in;
    let mut report = WindowReport {
        index,
        t_start: data.t0,
        t_end: data.t0 + h,
        stored_start,
        stored_end,
        dissipation,
        kinetic_in: kin_in,
        kinetic_out: kin_out,
        solid_kinetic_out: solid_out,
        work,
        excess: 0.0,
        allowed_slack: (n as f64 * 1e-9 * scale).max(slack),
        volume_defect: defect,
        relative_volume_defect: rel_defect,
        volume_bound: volume_bound(tau, sum_lip),
        max_phi_det_deviation: phi_dev,
        drift: l2_diff(sw, &data.eta0.values, &eta.values),
    };
    report.excess = report.lhs() - report.rhs();
    seg.report = Some(report);

    let w_next = straighten_velocity(&ctx.fluid, &velocities, &seg.maps)?;
    let t1 = data.t0 + h;
    let next = WindowData {
        t0: t1,
        eta0: eta,
        zeta: rates,
        w: w_next,
        f: (0..n)
            .map(|k| problem.sample_force(t1 + (k as f64 + 0.5) * tau))
            .collect(),
    };
    Ok((seg, Some(next)))
}

/// Initial data `(η₀, b, v₀)`; `b` per solid node, `v₀` per fluid node.
#[derive(Debug, Clone)]
pub struct InitialData {
    pub eta0: DeformationField,
    pub b: Vec<[f64; 2]>,
    pub v0: Vec<[f64; 2]>,
}

/// Window average of `ρ_s/2 ‖ζ‖² + ρ_f/2 ‖w‖²` for given delayed data.
pub fn delayed_kinetic(problem: &Problem, data: &WindowData) -> f64 {
    let ctx = &problem.ctx;
    let p = &problem.params;
    let n = data.zeta.len().max(1) as f64;
    data.zeta
        .iter()
        .zip(&data.w)
        .map(|(z, w)| {
            0.5 * p.rho_s * weighted_sq(&ctx.solid.node_weights, z)
                + 0.5 * p.rho_f * weighted_sq(&ctx.fluid.node_weights, w)
        })
        .sum::<f64>()
        / n
}

/// Glues windows over `[0, horizon]`; the first window uses `ζ ≡ b`, `w ≡ v₀`.
pub fn solve_horizon(problem: &Problem, init: &InitialData, horizon: f64) -> Result<Trajectory> {
    let ctx = &problem.ctx;
    let (tau, n) = (problem.params.tau, problem.steps_per_window);
    check_len(ctx.solid.num_nodes(), init.eta0.values.len())?;
    check_len(ctx.solid.num_nodes(), init.b.len())?;
    check_len(ctx.fluid.num_nodes(), init.v0.len())?;
    let h = problem.window_length();
    let windows = (horizon / h).round();
    if !(horizon > 0.0) || (windows * h - horizon).abs() > 1e-9 * horizon || windows < 1.0 {
        return Err(Error::Config(vec![format!(
            "horizon T = {horizon} must be a positive integer multiple of h = {h}"
        )]));
    }
    if !regularized_energy(&ctx.solid, &init.eta0, &problem.params.elastic)?
        .total
        .is_finite()
    {
        return Err(Error::InfiniteEnergy);
    }
    let rep = ciarlet_necas_gap(&ctx.solid, &init.eta0, Some(&problem.container()))?;
    if let GuardDecision::Halt(why) = collision_guard(&rep, &problem.guard, ctx.solid.area()) {
        return Err(Error::CollisionDetected { time: 0.0, reason: why });
    }

    let mut data = WindowData {
        t0: 0.0,
        eta0: init.eta0.clone(),
        zeta: vec![init.b.clone(); n],
        w: vec![init.v0.clone(); n],
        f: (0..n).map(|k| problem.sample_force((k as f64 + 0.5) * tau)).collect(),
    };
    let mut traj = Trajectory {
        tau,
        steps_per_window: n,
        times: vec![0.0],
        deformations: vec![init.eta0.clone()],
        streams: vec![],
        flow: FlowHistory::new(tau, n),
        ledger: vec![],
        windows: vec![],
        handoff_defects: vec![],
        halt: HaltReason::HorizonReached,
    };
    for m in 0..windows as usize {
        let (seg, next) = solve_window(problem, &data, m)?;
        let steps = seg.deformations.len();
        for k in 0..steps {
            traj.times.push(data.t0 + (k + 1) as f64 * tau);
        }
        traj.deformations.extend(seg.deformations);
        traj.streams.extend(seg.streams);
        traj.ledger.extend(seg.ledger);
        if let Some((time, reason)) = seg.collision {
            traj.halt = HaltReason::CollisionDetected { time, reason };
            return Ok(traj);
        }
        traj.flow.push_window(seg.maps)?;
        let report = seg.report.expect("completed window has a report");
        traj.windows.push(report);
        let next = next.expect("completed window hands off");
        // fluid hand-off: kinetic out uses v∘Φ_k, the next window sees w_k = v∘Φ_k∘Φ_N⁻¹
        let next_in = delayed_kinetic(problem, &next);
        traj.handoff_defects.push((next_in - report.kinetic_out).abs());
        data = next;
    }
    Ok(traj)
}

/// `max_t ‖η_a(t) − η_b(t)‖_{L²}` over the common time grid of `b` (coarser `τ`).
pub fn trajectory_distance(problem: &Problem, fine: &Trajectory, coarse: &Trajectory) -> f64 {
    let w = &problem.ctx.solid.node_weights;
    let mut worst = 0.0f64;
    for (t, eta) in coarse.times.iter().zip(&coarse.deformations) {
        if let Some(i) = fine.times.iter().position(|s| (s - t).abs() <= 1e-9 * (1.0 + t.abs())) {
            worst = worst.max(l2_diff(w, &fine.deformations[i].values, &eta.values));
        }
    }
    worst
}

/// One refinement level of an FPSI convergence study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementRow {
    pub tau: f64,
    pub h: f64,
    /// Distance to the previous (coarser) level; `NaN` on the first.
    pub distance: f64,
    /// `log2(previous distance / distance)`; `NaN` where undefined.
    pub order: f64,
}

/// Runs `build(τ, h)` for each pair and compares successive levels.
pub fn refinement_study(
    levels: &[(f64, f64)],
    horizon: f64,
    build: &(dyn Fn(f64, f64) -> Result<(Problem, InitialData)> + Sync),
) -> Result<Vec<RefinementRow>> {
    let runs = crate::study::parallel_map(levels, |&(tau, h)| {
        let (problem, init) = build(tau, h)?;
        let traj = solve_horizon(&problem, &init, horizon)?;
        Ok((problem, traj))
    });
    let runs: Vec<(Problem, Trajectory)> = runs.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(levels.len());
    let mut prev = f64::NAN;
    for (i, &(tau, h)) in levels.iter().enumerate() {
        let distance = if i == 0 {
            f64::NAN
        } else {
            trajectory_distance(&runs[i].0, &runs[i].1, &runs[i - 1].1)
        };
        let order = if prev.is_finite() && distance > 0.0 {
            (prev / distance).log2()
        } else {
            f64::NAN
        };
        rows.push(RefinementRow {
            tau,
            h,
            distance,
            order,
        });
        prev = distance;
    }
    Ok(rows)
}

/// Min det over all stored deformations.
pub fn deformation_det_floor(problem: &Problem, traj: &Trajectory) -> f64 {
    traj.deformations
        .iter()
        .map(|e| min_det_flat(&problem.ctx.solid, &e.flat()))
        .fold(f64::INFINITY, f64::min)
}

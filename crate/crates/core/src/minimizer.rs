//! The per-step functional over (deformation, stream function) and its minimization.
//!
//! With `r = (η − η_k)/τ` and `v = curl ψ`,
//!
//! ```text
//! F(η, ψ) = E_h(η) + τ [ R(η_k, r) + h/2 ‖D r‖² + A(η_k, r − v∘η_k) + ν/2 ‖εv‖² + h/2 ‖D v‖² ]
//!         + τ/(2h) [ ρ_s ‖r − ζ_k‖² + ρ_f ‖v∘Φ_k − w_k‖² ] − τ ⟨f_k, v⟩.
//! ```

use std::sync::Arc;

use nalgebra::Matrix2;

use crate::dissipation::{
    eulerian_to_lagrangian, kelvin_voigt_operator, lumped_apply, lumped_drag, lumped_quadratic, DissipationParams,
    FluidForms,
};
use crate::energy::{energy_flat, min_det_flat, ElasticParams, Energy, EnergyBreakdown};
use crate::error::{check_len, Error, Result};
use crate::flowmap::FlowMap;
use crate::grid::{flatten, unflatten, DeformationField, FluidGrid, SolidGrid, StreamVelocity, WeightedOp};
use crate::injectivity::{ciarlet_necas_gap, collision_guard, GuardDecision, GuardTolerances, InjectivityReport};
use crate::lbfgs::{self, LbfgsOptions, Objective, StopReason};
use crate::linalg::{dot, BandedSpd, SparseOp};

#[derive(Debug, Clone)]
pub struct StepParams {
    pub tau: f64,
    pub h: f64,
    pub rho_s: f64,
    pub rho_f: f64,
    /// `h_reg_weight` should be `h^{a0}`.
    pub elastic: ElasticParams,
    /// `h_rate_weight` should be `h`.
    pub dissipation: DissipationParams,
}

/// Grids and step-independent operators shared by every step of a run.
#[derive(Debug)]
pub struct StepContext {
    pub solid: SolidGrid,
    pub fluid: FluidGrid,
    pub forms: FluidForms,
    pub solid_reg: Arc<WeightedOp>,
    /// Flat solid index → free unknown index.
    free_of_flat: Vec<Option<usize>>,
    free: Vec<usize>,
    psi_identity: Vec<Option<usize>>,
}

impl StepContext {
    pub fn new(solid: SolidGrid, fluid: FluidGrid, k0_order: usize) -> Self {
        let mut free_of_flat = vec![None; 2 * solid.num_nodes()];
        let mut free = Vec::new();
        for n in 0..solid.num_nodes() {
            if !solid.is_dirichlet(n) {
                for c in 0..2 {
                    free_of_flat[2 * n + c] = Some(free.len());
                    free.push(2 * n + c);
                }
            }
        }
        StepContext {
            forms: FluidForms::new(&fluid, k0_order),
            solid_reg: solid.difference(k0_order),
            psi_identity: (0..fluid.num_dofs()).map(Some).collect(),
            solid,
            fluid,
            free_of_flat,
            free,
        }
    }

    pub fn num_free_eta(&self) -> usize {
        self.free.len()
    }
}

/// Data fixed during one step.
#[derive(Debug, Clone, Copy)]
pub struct StepData<'a> {
    pub eta_k: &'a DeformationField,
    pub phi_k: &'a FlowMap,
    /// Delayed solid rate, per solid node.
    pub zeta_k: &'a [[f64; 2]],
    /// Delayed fluid velocity, per fluid node.
    pub w_k: &'a [[f64; 2]],
    /// Force density, per fluid node.
    pub f_k: &'a [[f64; 2]],
}

/// The individual quadratic pieces of the functional at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerms {
    pub stored: EnergyBreakdown,
    /// `R(η_k, r)`.
    pub kelvin_voigt: f64,
    /// `‖D r‖²`.
    pub rate_reg: f64,
    /// `A(η_k, r − v∘η_k)`.
    pub drag: f64,
    /// `‖εv‖²`.
    pub strain: f64,
    /// `‖D v‖²`.
    pub velocity_reg: f64,
    /// `‖r − ζ_k‖²`.
    pub solid_inertia: f64,
    /// `‖v∘Φ_k − w_k‖²`.
    pub fluid_inertia: f64,
    /// `⟨f_k, v⟩`.
    pub work: f64,
    pub rate_sq: f64,
    pub zeta_sq: f64,
    /// `‖v∘Φ_k‖²`.
    pub transported_sq: f64,
    pub w_sq: f64,
    /// `‖v‖²`.
    pub velocity_sq: f64,
    pub value: Energy,
}

pub struct StepFunctional<'a> {
    ctx: &'a StepContext,
    params: &'a StepParams,
    eta_k: Vec<f64>,
    zeta: Vec<f64>,
    w: Vec<f64>,
    work: Vec<f64>,
    kv: WeightedOp,
    abar: Vec<Matrix2<f64>>,
    p_eta: SparseOp,
    p_phi: SparseOp,
    pre_eta: Option<BandedSpd>,
    pre_psi: Option<BandedSpd>,
}

fn weighted_sq(w: &[f64], x: &[f64]) -> f64 {
    w.iter()
        .enumerate()
        .map(|(n, wn)| wn * (x[2 * n] * x[2 * n] + x[2 * n + 1] * x[2 * n + 1]))
        .sum()
}

fn scale_pairs(w: &[f64], x: &mut [f64], s: f64) {
    for (n, wn) in w.iter().enumerate() {
        x[2 * n] *= s * wn;
        x[2 * n + 1] *= s * wn;
    }
}

impl<'a> StepFunctional<'a> {
    pub fn new(ctx: &'a StepContext, params: &'a StepParams, data: StepData<'_>) -> Result<Self> {
        let (solid, fluid) = (&ctx.solid, &ctx.fluid);
        check_len(solid.num_nodes(), data.eta_k.values.len())?;
        check_len(solid.num_nodes(), data.zeta_k.len())?;
        check_len(fluid.num_nodes(), data.phi_k.values.len())?;
        check_len(fluid.num_nodes(), data.w_k.len())?;
        check_len(fluid.num_nodes(), data.f_k.len())?;
        let eta_k = data.eta_k.flat();
        let mut wf = flatten(data.f_k);
        scale_pairs(&fluid.node_weights, &mut wf, 1.0);
        let work = fluid.curl.apply_transpose(&wf);
        let p_phi = eulerian_to_lagrangian(fluid, &data.phi_k.values)?;
        Ok(StepFunctional {
            kv: kelvin_voigt_operator(solid, &eta_k),
            abar: lumped_drag(solid, &eta_k, &params.dissipation),
            p_eta: eulerian_to_lagrangian(fluid, &data.eta_k.values)?,
            p_phi,
            eta_k,
            zeta: flatten(data.zeta_k),
            w: flatten(data.w_k),
            work,
            ctx,
            params,
            pre_eta: None,
            pre_psi: None,
        })
    }

    pub fn num_unknowns(&self) -> usize {
        self.ctx.num_free_eta() + self.ctx.fluid.num_dofs()
    }

    /// Packs fields into the unknown vector `[free η entries; ψ]`.
    pub fn pack(&self, eta: &[f64], psi: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = self.ctx.free.iter().map(|&i| eta[i]).collect();
        z.extend_from_slice(psi);
        z
    }

    /// Unpacks the unknown vector; Dirichlet entries come from `η_k`.
    pub fn unpack(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut eta = self.eta_k.clone();
        let nf = self.ctx.num_free_eta();
        for (k, &i) in self.ctx.free.iter().enumerate() {
            eta[i] = z[k];
        }
        (eta, z[nf..].to_vec())
    }

    pub fn rest_point(&self) -> Vec<f64> {
        self.pack(&self.eta_k, &vec![0.0; self.ctx.fluid.num_dofs()])
    }

    /// All pieces of the functional at `(η, ψ)`.
    pub fn terms_flat(&self, eta: &[f64], psi: &[f64]) -> StepTerms {
        let (ctx, p) = (self.ctx, self.params);
        let tau = p.tau;
        let stored = energy_flat(&ctx.solid, &p.elastic, p.elastic.h_reg_weight, eta, None);
        let r: Vec<f64> = eta.iter().zip(&self.eta_k).map(|(a, b)| (a - b) / tau).collect();
        let v_eta = self.p_eta.apply(psi);
        let phi: Vec<f64> = r.iter().zip(&v_eta).map(|(a, b)| a - b).collect();
        let (strain, velocity_reg) = ctx.forms.evaluate(&p.dissipation, psi, None);
        let rz: Vec<f64> = r.iter().zip(&self.zeta).map(|(a, b)| a - b).collect();
        let v_phi = self.p_phi.apply(psi);
        let vw: Vec<f64> = v_phi.iter().zip(&self.w).map(|(a, b)| a - b).collect();
        let v = ctx.fluid.curl.apply(psi);
        let (sw, fw) = (&ctx.solid.node_weights, &ctx.fluid.node_weights);
        let mut t = StepTerms {
            stored,
            kelvin_voigt: self.kv.norm_sq(&r),
            rate_reg: ctx.solid_reg.norm_sq(&r),
            drag: lumped_quadratic(&self.abar, &phi),
            strain,
            velocity_reg,
            solid_inertia: weighted_sq(sw, &rz),
            fluid_inertia: weighted_sq(fw, &vw),
            work: dot(&self.work, psi),
            rate_sq: weighted_sq(sw, &r),
            zeta_sq: weighted_sq(sw, &self.zeta),
            transported_sq: weighted_sq(fw, &v_phi),
            w_sq: weighted_sq(fw, &self.w),
            velocity_sq: weighted_sq(fw, &v),
            value: Energy::Infinite,
        };
        if let Energy::Finite(e) = stored.total {
            t.value = Energy::Finite(self.combine(e, &t));
        }
        t
    }

    fn combine(&self, e: f64, t: &StepTerms) -> f64 {
        let p = self.params;
        let (tau, h, d) = (p.tau, p.h, &p.dissipation);
        e + tau
            * (t.kelvin_voigt
                + 0.5 * h * t.rate_reg
                + t.drag
                + 0.5 * d.nu * t.strain
                + 0.5 * d.h_rate_weight * t.velocity_reg)
            + tau / (2.0 * h) * (p.rho_s * t.solid_inertia + p.rho_f * t.fluid_inertia)
            - tau * t.work
    }

    /// Value and gradient over full fields; the η gradient is zero on `P`.
    fn value_and_gradient(&self, eta: &[f64], psi: &[f64], g_eta: &mut [f64], g_psi: &mut [f64]) -> Energy {
        let (ctx, p) = (self.ctx, self.params);
        let (tau, h) = (p.tau, p.h);
        let stored = energy_flat(&ctx.solid, &p.elastic, p.elastic.h_reg_weight, eta, Some(g_eta));
        let Energy::Finite(e) = stored.total else {
            return Energy::Infinite;
        };
        let r: Vec<f64> = eta.iter().zip(&self.eta_k).map(|(a, b)| (a - b) / tau).collect();

        // Kelvin–Voigt and its regularizer: τ R(r) has η-gradient 2 KᵀWK r.
        let nk = self.kv.normal(&r);
        let kelvin_voigt = dot(&nk, &r);
        let nr = ctx.solid_reg.normal(&r);
        let rate_reg = dot(&nr, &r);

        let v_eta = self.p_eta.apply(psi);
        let phi: Vec<f64> = r.iter().zip(&v_eta).map(|(a, b)| a - b).collect();
        let aphi = lumped_apply(&self.abar, &phi);
        let drag = 0.5 * dot(&aphi, &phi);

        let mut rz: Vec<f64> = r.iter().zip(&self.zeta).map(|(a, b)| a - b).collect();
        let solid_inertia = weighted_sq(&ctx.solid.node_weights, &rz);
        scale_pairs(&ctx.solid.node_weights, &mut rz, 1.0);

        for i in 0..g_eta.len() {
            g_eta[i] += 2.0 * nk[i] + h * nr[i] + aphi[i] + p.rho_s / h * rz[i];
        }
        ctx.solid.mask_dirichlet(g_eta);

        let (strain, velocity_reg) = ctx.forms.evaluate(&p.dissipation, psi, Some(g_psi));
        g_psi.iter_mut().for_each(|v| *v *= tau);
        self.p_eta.apply_transpose_add(&aphi, -tau, g_psi);
        let v_phi = self.p_phi.apply(psi);
        let mut vw: Vec<f64> = v_phi.iter().zip(&self.w).map(|(a, b)| a - b).collect();
        let fluid_inertia = weighted_sq(&ctx.fluid.node_weights, &vw);
        scale_pairs(&ctx.fluid.node_weights, &mut vw, 1.0);
        self.p_phi.apply_transpose_add(&vw, tau * p.rho_f / h, g_psi);
        for (g, f) in g_psi.iter_mut().zip(&self.work) {
            *g -= tau * f;
        }

        let d = &p.dissipation;
        Energy::Finite(
            e + tau
                * (kelvin_voigt
                    + 0.5 * h * rate_reg
                    + drag
                    + 0.5 * d.nu * strain
                    + 0.5 * d.h_rate_weight * velocity_reg)
                + tau / (2.0 * h) * (p.rho_s * solid_inertia + p.rho_f * fluid_inertia)
                - tau * dot(&self.work, psi),
        )
    }

    pub fn evaluate(&self, eta: &DeformationField, psi: &StreamVelocity) -> Result<Energy> {
        check_len(self.ctx.solid.num_nodes(), eta.values.len())?;
        check_len(self.ctx.fluid.num_dofs(), psi.psi.len())?;
        Ok(self.terms_flat(&eta.flat(), &psi.psi).value)
    }

    pub fn terms(&self, eta: &DeformationField, psi: &StreamVelocity) -> Result<StepTerms> {
        check_len(self.ctx.solid.num_nodes(), eta.values.len())?;
        check_len(self.ctx.fluid.num_dofs(), psi.psi.len())?;
        Ok(self.terms_flat(&eta.flat(), &psi.psi))
    }

    /// Analytic gradient: per solid node (zero on `P`) and per stream DOF.
    pub fn gradient(&self, eta: &DeformationField, psi: &StreamVelocity) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
        check_len(self.ctx.solid.num_nodes(), eta.values.len())?;
        check_len(self.ctx.fluid.num_dofs(), psi.psi.len())?;
        let mut ge = vec![0.0; 2 * self.ctx.solid.num_nodes()];
        let mut gp = vec![0.0; self.ctx.fluid.num_dofs()];
        match self.value_and_gradient(&eta.flat(), &psi.psi, &mut ge, &mut gp) {
            Energy::Infinite => Err(Error::InfiniteEnergy),
            Energy::Finite(_) => Ok((unflatten(&ge), gp)),
        }
    }

    /// Value and gradient in the packed unknowns.
    pub fn eval_packed(&self, z: &[f64], grad: Option<&mut [f64]>) -> Energy {
        let (eta, psi) = self.unpack(z);
        match grad {
            None => self.terms_flat(&eta, &psi).value,
            Some(g) => {
                let mut ge = vec![0.0; eta.len()];
                let nf = self.ctx.num_free_eta();
                let (g_free, g_psi) = g.split_at_mut(nf);
                let val = self.value_and_gradient(&eta, &psi, &mut ge, g_psi);
                for (k, &i) in self.ctx.free.iter().enumerate() {
                    g_free[k] = ge[i];
                }
                val
            }
        }
    }

    /// Block-diagonal preconditioner from the quadratic parts of the functional.
    pub fn build_preconditioner(&mut self) -> Result<()> {
        let (ctx, p) = (self.ctx, self.params);
        let (tau, h) = (p.tau, p.h);
        let d = &p.dissipation;

        let dof = &ctx.free_of_flat;
        let bw = ctx
            .solid_reg
            .op
            .gram_bandwidth(dof)
            .max(self.kv.op.gram_bandwidth(dof))
            .max(1);
        let mut be = BandedSpd::zeros(ctx.num_free_eta(), bw);
        ctx.solid_reg.op.accumulate_gram(
            Some(&ctx.solid_reg.weights),
            p.elastic.h_reg_weight + h / tau,
            dof,
            &mut be,
        );
        self.kv
            .op
            .accumulate_gram(Some(&self.kv.weights), 2.0 / tau, dof, &mut be);
        for n in 0..ctx.solid.num_nodes() {
            let a = self.abar[n] / tau;
            let m = p.rho_s / (tau * h) * ctx.solid.node_weights[n];
            for (c, e) in [(0usize, 0usize), (1, 1), (1, 0)] {
                if let (Some(i), Some(j)) = (dof[2 * n + c], dof[2 * n + e]) {
                    be.add(i, j, a[(c, e)] + if c == e { m } else { 0.0 });
                }
            }
        }
        let shift = 1e-10 * be.max_diagonal().max(1e-300);
        be.shift_diagonal(shift);
        be.factor()
            .map_err(|i| Error::Solver(format!("solid preconditioner not positive at row {i}")))?;

        let pid = &ctx.psi_identity;
        let forms = &ctx.forms;
        let bw = [
            forms.strain.op.gram_bandwidth(pid),
            forms.regularizer.op.gram_bandwidth(pid),
            self.p_phi.gram_bandwidth(pid),
            self.p_eta.gram_bandwidth(pid),
        ]
        .into_iter()
        .max()
        .unwrap_or(1)
        .max(1);
        let mut bp = BandedSpd::zeros(ctx.fluid.num_dofs(), bw);
        forms
            .strain
            .op
            .accumulate_gram(Some(&forms.strain.weights), tau * d.nu, pid, &mut bp);
        if d.h_rate_weight > 0.0 {
            forms
                .regularizer
                .op
                .accumulate_gram(Some(&forms.regularizer.weights), tau * d.h_rate_weight, pid, &mut bp);
        }
        let fw: Vec<f64> = ctx.fluid.node_weights.iter().flat_map(|&w| [w, w]).collect();
        self.p_phi.accumulate_gram(Some(&fw), tau * p.rho_f / h, pid, &mut bp);
        // τ Pᵀ ā P with ā replaced by its largest eigenvalue per node
        let aw: Vec<f64> = self
            .abar
            .iter()
            .flat_map(|a| {
                let l = a.symmetric_eigenvalues().max();
                [l, l]
            })
            .collect();
        self.p_eta.accumulate_gram(Some(&aw), tau, pid, &mut bp);
        let shift = 1e-6 * bp.max_diagonal().max(1e-300);
        bp.shift_diagonal(shift);
        bp.factor()
            .map_err(|i| Error::Solver(format!("fluid preconditioner not positive at row {i}")))?;
        self.pre_eta = Some(be);
        self.pre_psi = Some(bp);
        Ok(())
    }
}

impl Objective for StepFunctional<'_> {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
        self.eval_packed(x, Some(grad)).value()
    }

    fn precondition(&self, g: &[f64]) -> Vec<f64> {
        let nf = self.ctx.num_free_eta();
        match (&self.pre_eta, &self.pre_psi) {
            (Some(be), Some(bp)) => {
                let mut out = be.solve(&g[..nf]);
                out.extend(bp.solve(&g[nf..]));
                out
            }
            _ => g.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinimizeStatus {
    Converged,
    MaxIter,
    CollisionGuard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeReport {
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub value_at_min: f64,
    pub value_at_rest: f64,
    pub line_search_rejections: usize,
    pub status: MinimizeStatus,
    pub stop_reason: StopReason,
    pub min_det: f64,
    pub injectivity: Option<InjectivityReport>,
    pub guard_reason: Option<String>,
}

impl MinimizeReport {
    /// `value_at_min − value_at_rest`; the certificate requires this to be ≤ tolerance.
    pub fn certificate_gap(&self) -> f64 {
        self.value_at_min - self.value_at_rest
    }
}

#[derive(Debug, Clone, Default)]
pub struct MinimizeOptions {
    pub lbfgs: LbfgsOptions,
    pub guard: Option<(GuardTolerances, crate::grid::Rect)>,
    /// Start from this point instead of the rest point when it has a lower value.
    pub warm_start: Option<(DeformationField, StreamVelocity)>,
}

/// Certificate tolerance relative to the rest value.
pub fn certificate_tolerance(value_at_rest: f64) -> f64 {
    1e-10 * (1.0 + value_at_rest.abs())
}

/// Minimizes the step functional starting from `(η_k, 0)` (or a better warm start).
pub fn minimize(
    func: &mut StepFunctional<'_>,
    opts: &MinimizeOptions,
) -> Result<(DeformationField, StreamVelocity, MinimizeReport)> {
    let rest = func.rest_point();
    let value_at_rest = func.eval_packed(&rest, None).value().ok_or(Error::InfiniteEnergy)?;
    let mut start = rest;
    if let Some((eta, psi)) = &opts.warm_start {
        let z = func.pack(&eta.flat(), &psi.psi);
        if let Energy::Finite(v) = func.eval_packed(&z, None) {
            if v < value_at_rest {
                start = z;
            }
        }
    }
    func.build_preconditioner()?;
    let res = lbfgs::minimize(func, start, &opts.lbfgs).ok_or(Error::InfiniteEnergy)?;
    let (eta, psi) = func.unpack(&res.x);
    let value_at_min = func.eval_packed(&res.x, None).value().ok_or(Error::InfiniteEnergy)?;
    let mut status = match res.reason {
        StopReason::Gradient | StopReason::Decrease => MinimizeStatus::Converged,
        StopReason::LineSearch | StopReason::Budget => MinimizeStatus::MaxIter,
    };
    if value_at_min > value_at_rest + certificate_tolerance(value_at_rest) {
        status = MinimizeStatus::MaxIter;
    }
    let eta = DeformationField::from_flat(&eta);
    let mut injectivity = None;
    let mut guard_reason = None;
    if let Some((tol, omega)) = &opts.guard {
        let rep = ciarlet_necas_gap(&func.ctx.solid, &eta, Some(omega))?;
        if let GuardDecision::Halt(why) = collision_guard(&rep, tol, func.ctx.solid.area()) {
            status = MinimizeStatus::CollisionGuard;
            guard_reason = Some(why);
        }
        injectivity = Some(rep);
    }
    let report = MinimizeReport {
        iterations: res.iterations,
        final_gradient_norm: res.gradient_norm,
        value_at_min,
        value_at_rest,
        line_search_rejections: res.rejections,
        status,
        stop_reason: res.reason,
        min_det: min_det_flat(&func.ctx.solid, &eta.flat()),
        injectivity,
        guard_reason,
    };
    Ok((eta, StreamVelocity { psi }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Lattice, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn context(pinned: bool) -> StepContext {
        let ls = Lattice::new(7, 7, Rect::new(0.0, 0.0, 1.0, 1.0)).unwrap();
        let dir = if pinned { SolidGrid::left_edge(&ls) } else { vec![] };
        let solid = SolidGrid::new(ls, dir).unwrap();
        let fluid = FluidGrid::new(Lattice::new(13, 13, Rect::new(-1.0, -1.0, 2.0, 2.0)).unwrap());
        StepContext::new(solid, fluid, 3)
    }

    fn params() -> StepParams {
        let h = 0.1;
        StepParams {
            tau: 0.01,
            h,
            rho_s: 1.0,
            rho_f: 1.0,
            elastic: ElasticParams::default().with_h(h),
            dissipation: DissipationParams {
                h_rate_weight: h,
                ..Default::default()
            },
        }
    }

    #[test]
    fn rest_value_is_regularized_energy() {
        let ctx = context(true);
        let p = params();
        let eta = DeformationField::from_fn(&ctx.solid, |x| [1.05 * x[0], x[1] + 0.02 * x[0] * x[0]]);
        let phi = FlowMap::identity(&ctx.fluid);
        let zs = vec![[0.0; 2]; ctx.solid.num_nodes()];
        let zf = vec![[0.0; 2]; ctx.fluid.num_nodes()];
        let f = StepFunctional::new(
            &ctx,
            &p,
            StepData {
                eta_k: &eta,
                phi_k: &phi,
                zeta_k: &zs,
                w_k: &zf,
                f_k: &zf,
            },
        )
        .unwrap();
        let e = crate::energy::regularized_energy(&ctx.solid, &eta, &p.elastic).unwrap();
        assert_eq!(f.evaluate(&eta, &StreamVelocity::zero(&ctx.fluid)).unwrap(), e.total);
    }

    #[test]
    fn packed_gradient_matches_central_differences() {
        let ctx = context(true);
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eta = DeformationField::from_fn(&ctx.solid, |x| [1.1 * x[0], 1.1 * x[1]]);
        let phi = FlowMap {
            values: (0..ctx.fluid.num_nodes())
                .map(|n| {
                    let y = ctx.fluid.lattice.coords(n);
                    if ctx.fluid.lattice.is_boundary(n) {
                        y
                    } else {
                        [
                            y[0] + 0.01 * rng.gen_range(-1.0..1.0),
                            y[1] + 0.01 * rng.gen_range(-1.0..1.0),
                        ]
                    }
                })
                .collect(),
        };
        let zs: Vec<[f64; 2]> = (0..ctx.solid.num_nodes())
            .map(|_| [rng.gen_range(-1.0..1.0), 0.3])
            .collect();
        let wf: Vec<[f64; 2]> = (0..ctx.fluid.num_nodes())
            .map(|_| [rng.gen_range(-1.0..1.0), -0.2])
            .collect();
        let ff: Vec<[f64; 2]> = (0..ctx.fluid.num_nodes())
            .map(|_| [0.5, rng.gen_range(-1.0..1.0)])
            .collect();
        let f = StepFunctional::new(
            &ctx,
            &p,
            StepData {
                eta_k: &eta,
                phi_k: &phi,
                zeta_k: &zs,
                w_k: &wf,
                f_k: &ff,
            },
        )
        .unwrap();
        let mut z = f.rest_point();
        for v in z.iter_mut() {
            *v += 1e-3 * rng.gen_range(-1.0..1.0);
        }
        let mut g = vec![0.0; z.len()];
        f.eval_packed(&z, Some(&mut g)).value().unwrap();
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let eps = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += eps;
            let fp = f.eval_packed(&zp, None).value().unwrap();
            zp[i] -= 2.0 * eps;
            let fm = f.eval_packed(&zp, None).value().unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * scale, "component {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn minimize_certifies_descent() {
        let ctx = context(true);
        let p = params();
        let eta = DeformationField::from_fn(&ctx.solid, |x| [x[0] + 0.1 * x[0] * x[0], x[1]]);
        let phi = FlowMap::identity(&ctx.fluid);
        let zs = vec![[0.5, 0.0]; ctx.solid.num_nodes()];
        let zf = vec![[0.0; 2]; ctx.fluid.num_nodes()];
        let mut f = StepFunctional::new(
            &ctx,
            &p,
            StepData {
                eta_k: &eta,
                phi_k: &phi,
                zeta_k: &zs,
                w_k: &zf,
                f_k: &zf,
            },
        )
        .unwrap();
        let (eta1, psi1, rep) = minimize(&mut f, &MinimizeOptions::default()).unwrap();
        assert_eq!(rep.status, MinimizeStatus::Converged, "{rep:?}");
        assert!(rep.value_at_min <= rep.value_at_rest);
        assert!(rep.min_det > 0.0);
        // pinned nodes stay put
        for n in SolidGrid::left_edge(&ctx.solid.lattice) {
            assert_eq!(eta1.values[n], eta.values[n]);
        }
        let (ge, gp) = f.gradient(&eta1, &psi1).unwrap();
        let gn = (flatten(&ge).iter().map(|v| v * v).sum::<f64>() + gp.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!(gn / (f.num_unknowns() as f64).sqrt() < 1e-6, "gradient {gn}");
    }
}

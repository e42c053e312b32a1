//! Invariant suites on random fields: analytic gradients against central
//! differences, adjoint pairs, and identities of the discretization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dissipation::{
    drag_partials, drag_potential, eulerian_to_lagrangian, fluid_dissipation, fluid_dissipation_partial,
    kelvin_voigt_partial, kelvin_voigt_rate, DissipationParams, DragModel, PulledBackDrag,
};
use crate::energy::{
    regularized_energy, regularized_energy_gradient, stored_energy, stored_energy_gradient, ElasticParams,
};
use crate::error::Result;
use crate::flowmap::{advance, jacobian_det_bounds, FlowMap};
use crate::grid::{
    discrete_divergence, flatten, stream_to_velocity, unflatten, DeformationField, FluidGrid, Lattice, Rect, SolidGrid,
    StreamVelocity,
};
use crate::linalg::dot;
use crate::minimizer::{StepContext, StepData, StepFunctional, StepParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub states: usize,
    /// Worst relative error seen.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

pub const GRADIENT_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;

/// `max_i |fd_i − g_i| / max(‖g‖_∞, ‖fd‖_∞)` with central differences of `f`.
pub fn fd_relative_error(x: &[f64], g: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    let mut fd = vec![0.0; x.len()];
    for i in 0..x.len() {
        let e = FD_STEP * (1.0 + x[i].abs());
        xp[i] = x[i] + e;
        let fp = f(&xp);
        xp[i] = x[i] - e;
        let fm = f(&xp);
        xp[i] = x[i];
        fd[i] = (fp - fm) / (2.0 * e);
    }
    let scale = g.iter().chain(&fd).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn unit_square(n: usize) -> Lattice {
    Lattice::new(n, n, Rect::new(0.0, 0.0, 1.0, 1.0)).expect("valid lattice")
}

/// A random admissible deformation: a smooth random dilation-shear of `Q`
/// plus small nodal noise.
fn random_deformation(grid: &SolidGrid, rng: &mut ChaCha8Rng) -> DeformationField {
    let (a, b, c, d) = (
        rng.gen_range(0.85..1.2),
        rng.gen_range(-0.15..0.15),
        rng.gen_range(-0.15..0.15),
        rng.gen_range(0.85..1.2),
    );
    let (k1, k2) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
    let noise = 0.02 * grid.lattice.dx;
    let mut eta = DeformationField::from_fn(grid, |x| {
        [
            a * x[0] + b * x[1] + k1 * (std::f64::consts::PI * x[1]).sin(),
            c * x[0] + d * x[1] + k2 * (std::f64::consts::PI * x[0]).sin(),
        ]
    });
    for p in eta.values.iter_mut() {
        p[0] += noise * rng.gen_range(-1.0..1.0);
        p[1] += noise * rng.gen_range(-1.0..1.0);
    }
    eta
}

fn random_vectors(n: usize, amp: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [amp * rng.gen_range(-1.0..1.0), amp * rng.gen_range(-1.0..1.0)])
        .collect()
}

fn random_stream(fluid: &FluidGrid, amp: f64, rng: &mut ChaCha8Rng) -> StreamVelocity {
    StreamVelocity {
        psi: (0..fluid.num_dofs()).map(|_| amp * rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn elastic() -> ElasticParams {
    ElasticParams::default().with_h(0.1)
}

fn result(name: &str, states: usize, worst: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        states,
        worst,
        tolerance,
    }
}

/// Gradient suites for `E`, `E_h`, `R`, `A`, the fluid dissipation and the
/// step functional, each at `states` random admissible states.
pub fn gradient_suites(seed: u64, states: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let solid = SolidGrid::new(unit_square(6), vec![])?;
    let pinned = SolidGrid::new(unit_square(6), SolidGrid::left_edge(&unit_square(6)))?;
    let fluid = FluidGrid::new(Lattice::new(11, 11, Rect::new(-0.5, -0.5, 1.5, 1.5))?);
    let p = elastic();
    let mut worst = [0.0f64; 6];

    for s in 0..states {
        let eta = random_deformation(&solid, &mut rng);
        let x = eta.flat();
        let energy_of = |reg: bool| {
            let solid = &solid;
            move |y: &[f64]| {
                let e = DeformationField::from_flat(y);
                let b = if reg {
                    regularized_energy(solid, &e, &p)
                } else {
                    stored_energy(solid, &e, &p)
                };
                b.map(|b| b.total.or_inf()).unwrap_or(f64::NAN)
            }
        };
        let g = flatten(&stored_energy_gradient(&solid, &eta, &p)?);
        worst[0] = worst[0].max(fd_relative_error(&x, &g, energy_of(false)));
        let g = flatten(&regularized_energy_gradient(&solid, &eta, &p)?);
        worst[1] = worst[1].max(fd_relative_error(&x, &g, energy_of(true)));

        let rate = random_vectors(solid.num_nodes(), 1.0, &mut rng);
        let g = flatten(&kelvin_voigt_partial(&solid, &eta, &rate)?);
        worst[2] = worst[2].max(fd_relative_error(&flatten(&rate), &g, |y| {
            kelvin_voigt_rate(&solid, &eta, &unflatten(y)).unwrap_or(f64::NAN)
        }));

        // drag: alternate between the isotropic and the pulled-back model
        let mut dp = DissipationParams::default();
        if s % 2 == 1 {
            dp.drag_model = DragModel::Custom(std::sync::Arc::new(PulledBackDrag { a0: 0.7 }));
        }
        let eta_in = DeformationField {
            values: eta
                .values
                .iter()
                .map(|q| [0.2 + 0.6 * q[0], 0.2 + 0.6 * q[1]])
                .collect(),
        };
        let psi = random_stream(&fluid, 0.05, &mut rng);
        let (gs, gf) = drag_partials(&solid, &fluid, &eta_in, &rate, &psi, &dp)?;
        let pmap = eulerian_to_lagrangian(&fluid, &eta_in.values)?;
        let nb = 2 * solid.num_nodes();
        let mut z = flatten(&rate);
        z.extend_from_slice(&psi.psi);
        let mut g = flatten(&gs);
        g.extend_from_slice(&gf);
        worst[3] = worst[3].max(fd_relative_error(&z, &g, |y| {
            let vp = pmap.apply(&y[nb..]);
            let rel: Vec<f64> = y[..nb].iter().zip(&vp).map(|(a, b)| a - b).collect();
            drag_potential(&solid, &eta_in, &unflatten(&rel), &dp).unwrap_or(f64::NAN)
        }));

        let fp = DissipationParams {
            h_rate_weight: 0.1,
            ..Default::default()
        };
        let g = fluid_dissipation_partial(&fluid, &psi, &fp)?;
        worst[4] = worst[4].max(fd_relative_error(&psi.psi, &g, |y| {
            fluid_dissipation(&fluid, &StreamVelocity { psi: y.to_vec() }, &fp).unwrap_or(f64::NAN)
        }));

        worst[5] = worst[5].max(step_functional_error(&pinned, &fluid, &mut rng)?);
    }
    let names = [
        "gradient: stored energy E",
        "gradient: regularized energy E_h",
        "gradient: Kelvin-Voigt dissipation R",
        "gradient: drag potential A",
        "gradient: fluid dissipation",
        "gradient: step functional",
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| result(n, states, w, GRADIENT_TOL))
        .collect())
}

fn step_functional_error(solid: &SolidGrid, fluid: &FluidGrid, rng: &mut ChaCha8Rng) -> Result<f64> {
    let ctx = StepContext::new(
        SolidGrid::new(solid.lattice.clone(), solid.dirichlet_set().to_vec())?,
        FluidGrid::new(fluid.lattice.clone()),
        3,
    );
    let h = 0.1;
    let params = StepParams {
        tau: 0.01,
        h,
        rho_s: 1.0,
        rho_f: 1.0,
        elastic: ElasticParams::default().with_h(h),
        dissipation: DissipationParams {
            h_rate_weight: h,
            ..Default::default()
        },
    };
    let eta = random_deformation(&ctx.solid, rng);
    let eta = DeformationField {
        values: eta
            .values
            .iter()
            .map(|q| [0.1 + 0.8 * q[0], 0.1 + 0.8 * q[1]])
            .collect(),
    };
    let lat = &ctx.fluid.lattice;
    let phi = FlowMap {
        values: (0..lat.num_nodes())
            .map(|n| {
                let y = lat.coords(n);
                if lat.is_boundary(n) {
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
    let zeta = random_vectors(ctx.solid.num_nodes(), 1.0, rng);
    let w = random_vectors(lat.num_nodes(), 0.5, rng);
    let f = random_vectors(lat.num_nodes(), 1.0, rng);
    let func = StepFunctional::new(
        &ctx,
        &params,
        StepData {
            eta_k: &eta,
            phi_k: &phi,
            zeta_k: &zeta,
            w_k: &w,
            f_k: &f,
        },
    )?;
    let mut z = func.rest_point();
    for v in z.iter_mut() {
        *v += 1e-3 * rng.gen_range(-1.0..1.0);
    }
    let mut g = vec![0.0; z.len()];
    func.eval_packed(&z, Some(&mut g));
    Ok(fd_relative_error(&z, &g, |y| func.eval_packed(y, None).or_inf()))
}

/// Adjoint and identity suites.
pub fn structure_suites(seed: u64, states: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let fluid = FluidGrid::new(Lattice::new(17, 17, Rect::new(0.0, 0.0, 1.0, 1.0))?);
    let solid = SolidGrid::new(unit_square(9), vec![])?;
    let (mut adj, mut div, mut ident, mut action) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..states {
        // ⟨P ψ, φ⟩ = ⟨ψ, Pᵀ φ⟩ for the pull-back of velocities to deformed nodes
        let eta = random_deformation(&solid, &mut rng);
        let pts: Vec<[f64; 2]> = eta
            .values
            .iter()
            .map(|q| [0.3 + 0.45 * q[0], 0.3 + 0.45 * q[1]])
            .collect();
        let p = eulerian_to_lagrangian(&fluid, &pts)?;
        let psi = random_stream(&fluid, 1.0, &mut rng);
        let phi = flatten(&random_vectors(pts.len(), 1.0, &mut rng));
        let lhs = dot(&p.apply(&psi.psi), &phi);
        let rhs = dot(&psi.psi, &p.apply_transpose(&phi));
        adj = adj.max((lhs - rhs).abs() / (lhs.abs() + rhs.abs()).max(1e-300));

        // exact discrete incompressibility
        let v = stream_to_velocity(&fluid, &psi)?;
        let d = discrete_divergence(&fluid.lattice, &v)?;
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x[0].abs()).max(x[1].abs()));
        div = div.max(d.iter().fold(0.0f64, |m, x| m.max(x.abs())) * fluid.lattice.dx / vmax);

        // zero velocity leaves the identity map and its Jacobian unchanged
        let id = FlowMap::identity(&fluid);
        let next = advance(&fluid, &id, &StreamVelocity::zero(&fluid), 0.1)?;
        let (lo, hi) = jacobian_det_bounds(&fluid, &next);
        ident = ident.max((lo - 1.0).abs()).max((hi - 1.0).abs());

        // drag action and reaction: ⟨∂_ḃ A, ḃ⟩ + ⟨∂_ψ A, ψ⟩ = 2A for the pulled-back velocity
        let rate = random_vectors(solid.num_nodes(), 1.0, &mut rng);
        let eta_in = DeformationField { values: pts.clone() };
        let dp = DissipationParams::default();
        let (gs, gf) = drag_partials(&solid, &fluid, &eta_in, &rate, &psi, &dp)?;
        let vp = p.apply(&psi.psi);
        let rel: Vec<f64> = flatten(&rate).iter().zip(&vp).map(|(a, b)| a - b).collect();
        let a = drag_potential(&solid, &eta_in, &unflatten(&rel), &dp)?;
        let euler = dot(&flatten(&gs), &flatten(&rate)) + dot(&gf, &psi.psi);
        action = action.max((euler - 2.0 * a).abs() / a.abs().max(1e-300));
    }
    Ok(vec![
        result("adjoint: velocity pull-back", states, adj, 1e-12),
        result("identity: discrete divergence", states, div, 1e-13),
        result("identity: flow map at rest", states, ident, 1e-14),
        result("identity: drag action-reaction", states, action, 1e-12),
    ])
}

/// All suites.
pub fn run_checks(seed: u64, states: usize) -> Result<Vec<CheckResult>> {
    let mut out = gradient_suites(seed, states)?;
    out.extend(structure_suites(seed, states)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_a_few_states() {
        for r in run_checks(11, 3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}

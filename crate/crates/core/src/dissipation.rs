//! Kelvin–Voigt solid dissipation, the drag potential, and fluid viscous dissipation.
//!
//! All three are quadratic forms in the rate, so each is stored as a weighted
//! sparse operator and the partial derivatives are its normal operator.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::Matrix2;

use crate::error::{check_len, Result};
use crate::grid::{
    cell_matrix, flatten, unflatten, DeformationField, FluidGrid, SolidGrid, StreamVelocity, WeightedOp,
};
use crate::linalg::{dot, SparseOp};

/// Pluggable drag matrix `a(F)`; must be symmetric positive semi-definite when `det F > 0`.
pub trait DragMatrix: Debug + Send + Sync {
    fn matrix(&self, f: &Matrix2<f64>) -> Matrix2<f64>;
}

/// `a(F) = a0 · det(F) · (F Fᵀ)⁻¹`, the pull-back of an isotropic spatial drag.
#[derive(Debug, Clone, Copy)]
pub struct PulledBackDrag {
    pub a0: f64,
}

impl DragMatrix for PulledBackDrag {
    fn matrix(&self, f: &Matrix2<f64>) -> Matrix2<f64> {
        let b = f * f.transpose();
        let inv = b.try_inverse().unwrap_or_else(Matrix2::zeros);
        self.a0 * f.determinant() * inv
    }
}

#[derive(Debug, Clone)]
pub enum DragModel {
    /// `a(F) = drag_a0 · I`.
    Isotropic,
    Custom(Arc<dyn DragMatrix>),
}

#[derive(Debug, Clone)]
pub struct DissipationParams {
    pub nu: f64,
    pub drag_a0: f64,
    pub drag_model: DragModel,
    /// Weight `h` of the rate regularizer `(h/2)‖D^{k0} v‖²`; zero disables it.
    pub h_rate_weight: f64,
    pub k0_order: usize,
}

impl Default for DissipationParams {
    fn default() -> Self {
        DissipationParams {
            nu: 0.1,
            drag_a0: 1.0,
            drag_model: DragModel::Isotropic,
            h_rate_weight: 0.0,
            k0_order: 3,
        }
    }
}

impl DissipationParams {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.nu > 0.0) {
            out.push(format!("viscosity must satisfy nu > 0, got {}", self.nu));
        }
        if !(self.drag_a0 >= 0.0) {
            out.push(format!(
                "drag coefficient must satisfy drag_a0 >= 0, got {}",
                self.drag_a0
            ));
        }
        if !(self.h_rate_weight >= 0.0) {
            out.push(format!(
                "rate regularizer weight must be >= 0, got {}",
                self.h_rate_weight
            ));
        }
        out
    }

    pub fn drag_matrix(&self, f: &Matrix2<f64>) -> Matrix2<f64> {
        match &self.drag_model {
            DragModel::Isotropic => self.drag_a0 * Matrix2::identity(),
            DragModel::Custom(m) => m.matrix(f),
        }
    }
}

/// Linear map `ḃ ↦ (Ḟᵀ F + Fᵀ Ḟ)` per cell at fixed `F = ∇η`, rows
/// `(M11, M22, M12)` weighted so that `norm_sq` is `R(η, ḃ)`.
pub fn kelvin_voigt_operator(grid: &SolidGrid, eta_flat: &[f64]) -> WeightedOp {
    let g = grid.grad.apply(eta_flat);
    let w = grid.lattice.cell_area();
    let mut op = SparseOp::new(2 * grid.num_nodes());
    let mut weights = Vec::new();
    let mut row = Vec::new();
    let gr = |cell: usize, c: usize, a: usize| 4 * cell + 2 * a + c;
    for cell in 0..grid.lattice.num_cells() {
        let f = cell_matrix(&g, cell);
        for (i, j, wt) in [(0, 0, w), (1, 1, w), (0, 1, 2.0 * w)] {
            row.clear();
            for c in 0..2 {
                row.extend(grid.grad.row(gr(cell, c, i)).map(|(k, v)| (k, v * f[(c, j)])));
                row.extend(grid.grad.row(gr(cell, c, j)).map(|(k, v)| (k, v * f[(c, i)])));
            }
            op.push_row(&row);
            weights.push(wt);
        }
    }
    WeightedOp { op, weights }
}

/// `∫_Q |(∇η̇)ᵀ∇η + (∇η)ᵀ∇η̇|²`.
pub fn kelvin_voigt_rate(grid: &SolidGrid, eta: &DeformationField, eta_dot: &[[f64; 2]]) -> Result<f64> {
    check_len(grid.num_nodes(), eta.values.len())?;
    check_len(grid.num_nodes(), eta_dot.len())?;
    Ok(kelvin_voigt_operator(grid, &eta.flat()).norm_sq(&flatten(eta_dot)))
}

/// `D₂R(η, η̇)`, rows on `P` zeroed.
pub fn kelvin_voigt_partial(grid: &SolidGrid, eta: &DeformationField, eta_dot: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    check_len(grid.num_nodes(), eta.values.len())?;
    check_len(grid.num_nodes(), eta_dot.len())?;
    let mut g = kelvin_voigt_operator(grid, &eta.flat()).normal(&flatten(eta_dot));
    g.iter_mut().for_each(|v| *v *= 2.0);
    grid.mask_dirichlet(&mut g);
    Ok(unflatten(&g))
}

/// Node-lumped drag matrices `ā_n = Σ_{cells ∋ n} (|cell|/4) a(∇η|_cell)`.
pub fn lumped_drag(grid: &SolidGrid, eta_flat: &[f64], params: &DissipationParams) -> Vec<Matrix2<f64>> {
    let lat = &grid.lattice;
    let mut out = vec![Matrix2::zeros(); lat.num_nodes()];
    let q = 0.25 * lat.cell_area();
    let g = match params.drag_model {
        DragModel::Isotropic => None,
        DragModel::Custom(_) => Some(grid.grad.apply(eta_flat)),
    };
    for cell in 0..lat.num_cells() {
        let a = match &g {
            None => params.drag_a0 * Matrix2::identity(),
            Some(g) => params.drag_matrix(&cell_matrix(g, cell)),
        };
        for n in lat.cell_corners(cell) {
            out[n] += q * a;
        }
    }
    out
}

pub(crate) fn lumped_quadratic(abar: &[Matrix2<f64>], phi: &[f64]) -> f64 {
    abar.iter()
        .enumerate()
        .map(|(n, a)| {
            let (x, y) = (phi[2 * n], phi[2 * n + 1]);
            a[(0, 0)] * x * x + 2.0 * a[(0, 1)] * x * y + a[(1, 1)] * y * y
        })
        .sum::<f64>()
        * 0.5
}

pub(crate) fn lumped_apply(abar: &[Matrix2<f64>], phi: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; phi.len()];
    for (n, a) in abar.iter().enumerate() {
        let (x, y) = (phi[2 * n], phi[2 * n + 1]);
        out[2 * n] = a[(0, 0)] * x + a[(0, 1)] * y;
        out[2 * n + 1] = a[(1, 0)] * x + a[(1, 1)] * y;
    }
    out
}

/// `A(η, φ) = ∫_Q ½ φᵀ a(∇η) φ`.
pub fn drag_potential(
    grid: &SolidGrid,
    eta: &DeformationField,
    relative: &[[f64; 2]],
    params: &DissipationParams,
) -> Result<f64> {
    check_len(grid.num_nodes(), eta.values.len())?;
    check_len(grid.num_nodes(), relative.len())?;
    let abar = lumped_drag(grid, &eta.flat(), params);
    Ok(lumped_quadratic(&abar, &flatten(relative)))
}

/// Operator `ψ ↦ v∘η` (interleaved) for the deformed nodes of `eta`.
pub fn eulerian_to_lagrangian(fluid: &FluidGrid, eta: &[[f64; 2]]) -> Result<SparseOp> {
    let interp = crate::grid::expand_components(&fluid.lattice.interpolation(eta)?);
    Ok(interp.compose(&fluid.curl))
}

/// Partials of `A(η, η̇ − v∘η)` with respect to the solid rate and the stream DOFs.
pub fn drag_partials(
    solid: &SolidGrid,
    fluid: &FluidGrid,
    eta: &DeformationField,
    eta_dot: &[[f64; 2]],
    psi: &StreamVelocity,
    params: &DissipationParams,
) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
    check_len(solid.num_nodes(), eta.values.len())?;
    check_len(solid.num_nodes(), eta_dot.len())?;
    check_len(fluid.num_dofs(), psi.psi.len())?;
    let p = eulerian_to_lagrangian(fluid, &eta.values)?;
    let vp = p.apply(&psi.psi);
    let phi: Vec<f64> = flatten(eta_dot).iter().zip(&vp).map(|(b, v)| b - v).collect();
    let abar = lumped_drag(solid, &eta.flat(), params);
    let mut d_solid = lumped_apply(&abar, &phi);
    let d_fluid: Vec<f64> = p.apply_transpose(&d_solid).iter().map(|v| -v).collect();
    solid.mask_dirichlet(&mut d_solid);
    Ok((unflatten(&d_solid), d_fluid))
}

/// The fluid quadratic forms on stream DOFs: `‖εv‖²` and `‖D^{k0} v‖²`.
#[derive(Debug, Clone)]
pub struct FluidForms {
    pub strain: WeightedOp,
    pub regularizer: WeightedOp,
}

impl FluidForms {
    pub fn new(fluid: &FluidGrid, k0_order: usize) -> Self {
        let eps = fluid.symmetric_gradient();
        let diff = fluid.difference(k0_order);
        FluidForms {
            strain: WeightedOp {
                op: eps.op.compose(&fluid.curl),
                weights: eps.weights,
            },
            regularizer: WeightedOp {
                op: diff.op.compose(&fluid.curl),
                weights: diff.weights.clone(),
            },
        }
    }

    /// `ν/2 ‖εv‖² + h/2 ‖D^{k0} v‖²` and, if requested, its gradient.
    pub fn evaluate(&self, params: &DissipationParams, psi: &[f64], grad: Option<&mut [f64]>) -> (f64, f64) {
        let reg_on = params.h_rate_weight > 0.0;
        match grad {
            Some(g) => {
                let ns = self.strain.normal(psi);
                let strain = dot(&ns, psi);
                let (mut reg, nr) = (
                    0.0,
                    if reg_on {
                        Some(self.regularizer.normal(psi))
                    } else {
                        None
                    },
                );
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi = params.nu * ns[i];
                }
                if let Some(nr) = nr {
                    reg = dot(&nr, psi);
                    for (gi, r) in g.iter_mut().zip(&nr) {
                        *gi += params.h_rate_weight * r;
                    }
                }
                (strain, reg)
            }
            None => (
                self.strain.norm_sq(psi),
                if reg_on { self.regularizer.norm_sq(psi) } else { 0.0 },
            ),
        }
    }
}

/// `ν/2 ∫_Ω |εv|² + h/2 ‖D^{k0} v‖²`.
pub fn fluid_dissipation(fluid: &FluidGrid, psi: &StreamVelocity, params: &DissipationParams) -> Result<f64> {
    check_len(fluid.num_dofs(), psi.psi.len())?;
    let (s, r) = FluidForms::new(fluid, params.k0_order).evaluate(params, &psi.psi, None);
    Ok(0.5 * params.nu * s + 0.5 * params.h_rate_weight * r)
}

/// Gradient of [`fluid_dissipation`] with respect to the stream DOFs.
pub fn fluid_dissipation_partial(
    fluid: &FluidGrid,
    psi: &StreamVelocity,
    params: &DissipationParams,
) -> Result<Vec<f64>> {
    check_len(fluid.num_dofs(), psi.psi.len())?;
    let mut g = vec![0.0; fluid.num_dofs()];
    FluidForms::new(fluid, params.k0_order).evaluate(params, &psi.psi, Some(&mut g));
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Lattice, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solid(n: usize) -> SolidGrid {
        SolidGrid::new(Lattice::new(n, n, Rect::new(0.0, 0.0, 1.0, 1.0)).unwrap(), vec![]).unwrap()
    }

    fn fluid(n: usize) -> FluidGrid {
        FluidGrid::new(Lattice::new(n, n, Rect::new(-1.0, -1.0, 2.0, 2.0)).unwrap())
    }

    #[test]
    fn kelvin_voigt_closed_forms() {
        let g = solid(5);
        let id = DeformationField::identity(&g);
        let zero = vec![[0.0; 2]; g.num_nodes()];
        assert_eq!(kelvin_voigt_rate(&g, &id, &zero).unwrap(), 0.0);
        let shear: Vec<[f64; 2]> = (0..g.num_nodes()).map(|n| [g.lattice.coords(n)[0], 0.0]).collect();
        assert!((kelvin_voigt_rate(&g, &id, &shear).unwrap() - 4.0).abs() < 1e-12);
        let spin: Vec<[f64; 2]> = (0..g.num_nodes())
            .map(|n| {
                let p = g.lattice.coords(n);
                [-p[1], p[0]]
            })
            .collect();
        assert!(kelvin_voigt_rate(&g, &id, &spin).unwrap().abs() < 1e-24);
    }

    #[test]
    fn kelvin_voigt_partial_is_linear_and_frame_indifferent() {
        let g = solid(6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eta = DeformationField::from_fn(&g, |x| [x[0] + 0.1 * x[1] * x[1], x[1] - 0.05 * x[0]]);
        let b: Vec<[f64; 2]> = (0..g.num_nodes())
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let b2: Vec<[f64; 2]> = b.iter().map(|v| [2.0 * v[0], 2.0 * v[1]]).collect();
        let p1 = kelvin_voigt_partial(&g, &eta, &b).unwrap();
        let p2 = kelvin_voigt_partial(&g, &eta, &b2).unwrap();
        for (u, v) in p1.iter().zip(&p2) {
            assert!((2.0 * u[0] - v[0]).abs() < 1e-12 && (2.0 * u[1] - v[1]).abs() < 1e-12);
        }
        let r = kelvin_voigt_rate(&g, &eta, &b).unwrap();
        assert!((kelvin_voigt_rate(&g, &eta, &b2).unwrap() - 4.0 * r).abs() < 1e-12 * r);
        let (c, s) = (0.4f64.cos(), 0.4f64.sin());
        let rot = |v: &[f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let reta = DeformationField {
            values: eta.values.iter().map(rot).collect(),
        };
        let rb: Vec<[f64; 2]> = b.iter().map(rot).collect();
        assert!((kelvin_voigt_rate(&g, &reta, &rb).unwrap() - r).abs() < 1e-12 * r);
    }

    #[test]
    fn drag_closed_forms() {
        let g = solid(5);
        let id = DeformationField::identity(&g);
        let params = DissipationParams {
            drag_a0: 2.0,
            ..Default::default()
        };
        let phi = vec![[1.0, 0.0]; g.num_nodes()];
        assert!((drag_potential(&g, &id, &phi, &params).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(
            drag_potential(&g, &id, &vec![[0.0; 2]; g.num_nodes()], &params).unwrap(),
            0.0
        );
        let pulled = DissipationParams {
            drag_model: DragModel::Custom(Arc::new(PulledBackDrag { a0: 1.0 })),
            ..Default::default()
        };
        let iso = DissipationParams::default();
        let a = drag_potential(&g, &id, &phi, &pulled).unwrap();
        let b = drag_potential(&g, &id, &phi, &iso).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn drag_partials_vanish_when_comoving_and_pair_up() {
        let s = solid(5);
        let f = fluid(13);
        let psi = StreamVelocity::from_fn(&f, |p| {
            let bump = |t: f64| (std::f64::consts::PI * (t + 1.0) / 3.0).sin().powi(2);
            0.3 * bump(p[0]) * bump(p[1])
        });
        let eta = DeformationField::from_fn(&s, |x| [0.2 + 0.6 * x[0], 0.1 + 0.7 * x[1] + 0.05 * x[0]]);
        let p = eulerian_to_lagrangian(&f, &eta.values).unwrap();
        let comoving = unflatten(&p.apply(&psi.psi));
        let params = DissipationParams::default();
        let (ds, df) = drag_partials(&s, &f, &eta, &comoving, &psi, &params).unwrap();
        assert!(ds.iter().all(|v| v[0].abs() < 1e-14 && v[1].abs() < 1e-14));
        assert!(df.iter().all(|v| v.abs() < 1e-14));

        // action–reaction: a fluid perturbation ξ and the solid rate b = ξ∘η it induces
        let eta_dot = vec![[0.3, -0.1]; s.num_nodes()];
        let (ds, df) = drag_partials(&s, &f, &eta, &eta_dot, &psi, &params).unwrap();
        let xi = StreamVelocity::from_fn(&f, |q| (q[0] - 0.5) * (q[1] - 0.5) * (1.0 - q[0] * q[0] / 4.0));
        let b = p.apply(&xi.psi);
        let pair = dot(&flatten(&ds), &b) + dot(&df, &xi.psi);
        assert!(pair.abs() < 1e-12, "pairing {pair}");
    }

    #[test]
    fn fluid_forms_vanish_on_rigid_rotation_interior() {
        let f = fluid(9);
        let params = DissipationParams::default();
        assert_eq!(fluid_dissipation(&f, &StreamVelocity::zero(&f), &params).unwrap(), 0.0);
        // ψ = −½|x−c|² gives v = rigid rotation in the interior; the
        // boundary layer of cells carries all of εv.
        let psi = StreamVelocity::from_fn(&f, |p| -0.5 * ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)));
        let v = crate::grid::stream_to_velocity(&f, &psi).unwrap();
        let eps = f.symmetric_gradient();
        let rows = eps.op.apply(&flatten(&v));
        let l = &f.lattice;
        for cell in 0..l.num_cells() {
            let corners = l.cell_corners(cell);
            let deep = corners.iter().all(|&n| {
                let (i, j) = l.node_ij(n);
                i >= 2 && j >= 2 && i + 2 < l.nx && j + 2 < l.ny
            });
            if deep {
                for k in 0..3 {
                    assert!(rows[3 * cell + k].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fluid_partial_matches_central_differences() {
        let f = fluid(9);
        let params = DissipationParams {
            h_rate_weight: 0.1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let psi = StreamVelocity {
            psi: (0..f.num_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let an = fluid_dissipation_partial(&f, &psi, &params).unwrap();
        let scale = an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let eps = 1e-5;
        for i in 0..f.num_dofs() {
            let mut p = psi.clone();
            p.psi[i] += eps;
            let fp = fluid_dissipation(&f, &p, &params).unwrap();
            p.psi[i] -= 2.0 * eps;
            let fm = fluid_dissipation(&f, &p, &params).unwrap();
            assert!(((fp - fm) / (2.0 * eps) - an[i]).abs() < 1e-6 * scale);
        }
    }
}

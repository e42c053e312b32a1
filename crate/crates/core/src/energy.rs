//! Stored energy of the solid and its regularized variant.
//!
//! Per cell, with `F = ∇η` and `H = ∇²η`,
//! `W = ⅛|FᵀF − I|²_𝓒 + det(F)^{-a} + (1/q)|H|^q`,
//! integrated by the midpoint rule. The regularizer adds `(h^{a0}/2)‖D^{k0}η‖²`.

use nalgebra::{Matrix2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::{cell_matrix, write_cell_matrix, DeformationField, SolidGrid};

/// Either a finite energy value or the barrier marker `+∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Energy {
    Finite(f64),
    Infinite,
}

impl Energy {
    pub fn is_finite(&self) -> bool {
        matches!(self, Energy::Finite(_))
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Energy::Finite(v) => Some(v),
            Energy::Infinite => None,
        }
    }

    /// The value, with `+∞` for the marker; for comparisons and display only.
    pub fn or_inf(&self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }
}

/// Elasticity tensor acting on symmetric 2×2 matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElasticTensor {
    /// `|M|²_𝓒 = 2μ|M|² + λ tr(M)²`.
    Isotropic { mu: f64, lambda: f64 },
    /// Symmetric 3×3 matrix in Mandel form, acting on `(M11, M22, √2·M12)`.
    Mandel { c: [[f64; 3]; 3] },
}

impl ElasticTensor {
    pub fn mandel(&self) -> nalgebra::Matrix3<f64> {
        match *self {
            ElasticTensor::Isotropic { mu, lambda } => nalgebra::Matrix3::new(
                2.0 * mu + lambda,
                lambda,
                0.0,
                lambda,
                2.0 * mu + lambda,
                0.0,
                0.0,
                0.0,
                2.0 * mu,
            ),
            ElasticTensor::Mandel { c } => nalgebra::Matrix3::from_fn(|i, j| c[i][j]),
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        let m = self.mandel();
        (m - m.transpose()).norm() <= 1e-12 * m.norm() && m.cholesky().is_some()
    }
}

fn to_mandel(m: &Matrix2<f64>) -> Vector3<f64> {
    Vector3::new(m[(0, 0)], m[(1, 1)], std::f64::consts::SQRT_2 * m[(0, 1)])
}

fn from_mandel(v: &Vector3<f64>) -> Matrix2<f64> {
    let off = v[2] / std::f64::consts::SQRT_2;
    Matrix2::new(v[0], off, off, v[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub tensor: ElasticTensor,
    /// Determinant-penalty exponent.
    pub a: f64,
    /// Second-gradient exponent.
    pub q: f64,
    /// `h^{a0}`, the weight of the regularizer.
    pub h_reg_weight: f64,
    pub a0: f64,
    pub k0_order: usize,
}

impl Default for ElasticParams {
    fn default() -> Self {
        ElasticParams {
            tensor: ElasticTensor::Isotropic { mu: 1.0, lambda: 1.0 },
            a: 9.0,
            q: 4.0,
            h_reg_weight: 0.0,
            a0: 0.5,
            k0_order: 3,
        }
    }
}

impl ElasticParams {
    /// Sets the regularizer weight to `h^{a0}`.
    pub fn with_h(mut self, h: f64) -> Self {
        self.h_reg_weight = h.powf(self.a0);
        self
    }

    /// All violated constraints, as readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.q > 2.0) {
            out.push(format!(
                "second-gradient exponent must satisfy q > 2, got q = {}",
                self.q
            ));
        } else {
            let bound = 2.0 * self.q / (self.q - 2.0);
            if !(self.a > bound) {
                out.push(format!(
                    "determinant exponent must satisfy a > 2q/(q-2) = {bound}, got a = {}",
                    self.a
                ));
            }
        }
        if !(self.a0 > 0.0 && self.a0 < 1.0) {
            out.push(format!(
                "regularization exponent must satisfy 0 < a0 < 1, got a0 = {}",
                self.a0
            ));
        }
        if !(self.h_reg_weight >= 0.0) {
            out.push(format!("regularizer weight must be >= 0, got {}", self.h_reg_weight));
        }
        if self.k0_order == 0 {
            out.push("k0_order must be at least 1".into());
        }
        if !self.tensor.is_positive_definite() {
            out.push("elastic tensor must be symmetric positive definite on symmetric matrices".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub stvk: f64,
    pub det_penalty: f64,
    pub second_gradient: f64,
    pub regularizer: f64,
    pub total: Energy,
}

/// Cell density of the first-gradient part; returns `None` if `det F <= 0`.
/// When `dw` is given it receives `∂W/∂F`.
fn first_gradient_density(
    c: &nalgebra::Matrix3<f64>,
    a: f64,
    f: &Matrix2<f64>,
    dw: Option<&mut Matrix2<f64>>,
) -> Option<(f64, f64)> {
    let det = f.determinant();
    if !(det > 0.0) {
        return None;
    }
    let strain = f.transpose() * f - Matrix2::identity();
    let m = to_mandel(&strain);
    let cm = c * m;
    let stvk = 0.125 * m.dot(&cm);
    let pen = det.powf(-a);
    if let Some(dw) = dw {
        let s = from_mandel(&cm);
        let cof = Matrix2::new(f[(1, 1)], -f[(1, 0)], -f[(0, 1)], f[(0, 0)]);
        *dw = 0.5 * f * s - (a * pen / det) * cof;
    }
    Some((stvk, pen))
}

const HESS_WEIGHTS: [f64; 3] = [1.0, 2.0, 1.0];

/// Stored energy (and optionally its gradient) on a flat nodal vector.
/// `reg_weight` multiplies `½‖D^{k0}η‖²`; pass 0 for the unregularized energy.
pub(crate) fn energy_flat(
    grid: &SolidGrid,
    p: &ElasticParams,
    reg_weight: f64,
    x: &[f64],
    grad: Option<&mut [f64]>,
) -> EnergyBreakdown {
    let lat = &grid.lattice;
    let w = lat.cell_area();
    let c = p.tensor.mandel();
    let g = grid.grad.apply(x);
    let h = grid.hess.apply(x);
    let mut dg = grad.as_ref().map(|_| vec![0.0; g.len()]);
    let mut dh = grad.as_ref().map(|_| vec![0.0; h.len()]);
    let (mut stvk, mut pen, mut sec) = (0.0, 0.0, 0.0);
    let mut finite = true;
    for cell in 0..lat.num_cells() {
        let f = cell_matrix(&g, cell);
        let mut dw = Matrix2::zeros();
        match first_gradient_density(&c, p.a, &f, dg.as_ref().map(|_| &mut dw)) {
            Some((s, d)) => {
                stvk += w * s;
                pen += w * d;
                if let Some(dg) = dg.as_mut() {
                    write_cell_matrix(dg, cell, &(w * dw));
                }
            }
            None => finite = false,
        }
        let rows = &h[6 * cell..6 * cell + 6];
        let norm_sq: f64 = (0..6).map(|r| HESS_WEIGHTS[r / 2] * rows[r] * rows[r]).sum();
        sec += w * norm_sq.powf(0.5 * p.q) / p.q;
        if let Some(dh) = dh.as_mut() {
            let scale = w * norm_sq.powf(0.5 * p.q - 1.0);
            for r in 0..6 {
                dh[6 * cell + r] = scale * HESS_WEIGHTS[r / 2] * rows[r];
            }
        }
    }
    let (mut reg, mut dreg) = (0.0, None);
    if reg_weight > 0.0 {
        let d = grid.difference(p.k0_order);
        if grad.is_some() {
            let n = d.normal(x);
            reg = 0.5 * reg_weight * crate::linalg::dot(&n, x);
            dreg = Some(n);
        } else {
            reg = 0.5 * reg_weight * d.norm_sq(x);
        }
    }
    if !finite {
        return EnergyBreakdown {
            stvk,
            det_penalty: f64::INFINITY,
            second_gradient: sec,
            regularizer: reg,
            total: Energy::Infinite,
        };
    }
    if let Some(out) = grad {
        out.iter_mut().for_each(|v| *v = 0.0);
        grid.grad.apply_transpose_add(dg.as_ref().unwrap(), 1.0, out);
        grid.hess.apply_transpose_add(dh.as_ref().unwrap(), 1.0, out);
        if let Some(n) = dreg {
            for (o, v) in out.iter_mut().zip(n) {
                *o += reg_weight * v;
            }
        }
        grid.mask_dirichlet(out);
    }
    EnergyBreakdown {
        stvk,
        det_penalty: pen,
        second_gradient: sec,
        regularizer: reg,
        total: Energy::Finite(stvk + pen + sec + reg),
    }
}

pub fn stored_energy(grid: &SolidGrid, eta: &DeformationField, p: &ElasticParams) -> Result<EnergyBreakdown> {
    check_len(grid.num_nodes(), eta.values.len())?;
    Ok(energy_flat(grid, p, 0.0, &eta.flat(), None))
}

pub fn regularized_energy(grid: &SolidGrid, eta: &DeformationField, p: &ElasticParams) -> Result<EnergyBreakdown> {
    check_len(grid.num_nodes(), eta.values.len())?;
    Ok(energy_flat(grid, p, p.h_reg_weight, &eta.flat(), None))
}

fn gradient_impl(grid: &SolidGrid, eta: &DeformationField, p: &ElasticParams, reg: f64) -> Result<Vec<[f64; 2]>> {
    check_len(grid.num_nodes(), eta.values.len())?;
    let mut g = vec![0.0; 2 * grid.num_nodes()];
    match energy_flat(grid, p, reg, &eta.flat(), Some(&mut g)).total {
        Energy::Infinite => Err(Error::InfiniteEnergy),
        Energy::Finite(_) => Ok(crate::grid::unflatten(&g)),
    }
}

/// Gradient of [`stored_energy`] with respect to nodal positions; rows on `P` are zero.
pub fn stored_energy_gradient(grid: &SolidGrid, eta: &DeformationField, p: &ElasticParams) -> Result<Vec<[f64; 2]>> {
    gradient_impl(grid, eta, p, 0.0)
}

pub fn regularized_energy_gradient(
    grid: &SolidGrid,
    eta: &DeformationField,
    p: &ElasticParams,
) -> Result<Vec<[f64; 2]>> {
    gradient_impl(grid, eta, p, p.h_reg_weight)
}

pub(crate) fn min_det_flat(grid: &SolidGrid, x: &[f64]) -> f64 {
    let g = grid.grad.apply(x);
    (0..grid.lattice.num_cells())
        .map(|c| cell_matrix(&g, c).determinant())
        .fold(f64::INFINITY, f64::min)
}

/// Smallest `det ∇η` over the quadrature points.
pub fn min_determinant(grid: &SolidGrid, eta: &DeformationField) -> Result<f64> {
    check_len(grid.num_nodes(), eta.values.len())?;
    Ok(min_det_flat(grid, &eta.flat()))
}

/// Isotropic equilibrium dilation `s` of the first-gradient density, i.e. the
/// root of `d/ds W(sI) = 0`; for the default parameters it is not 1 because the
/// determinant penalty pushes outward.
pub fn isotropic_equilibrium_dilation(p: &ElasticParams) -> f64 {
    let c = p.tensor.mandel();
    let dw = |s: f64| {
        let mut d = Matrix2::zeros();
        first_gradient_density(&c, p.a, &(s * Matrix2::identity()), Some(&mut d));
        d[(0, 0)] + d[(1, 1)]
    };
    let (mut lo, mut hi) = (0.5, 4.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dw(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Lattice, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> SolidGrid {
        SolidGrid::new(Lattice::new(n, n, Rect::new(0.0, 0.0, 1.0, 1.0)).unwrap(), vec![]).unwrap()
    }

    fn identity_tensor() -> ElasticTensor {
        // 2μ = 1, λ = 0 gives |M|²_𝓒 = |M|²
        ElasticTensor::Isotropic { mu: 0.5, lambda: 0.0 }
    }

    #[test]
    fn identity_energy() {
        let g = grid(6);
        let e = stored_energy(&g, &DeformationField::identity(&g), &ElasticParams::default()).unwrap();
        assert!(e.stvk.abs() < 1e-14 && e.second_gradient.abs() < 1e-14);
        assert!((e.det_penalty - 1.0).abs() < 1e-14);
        assert_eq!(e.total, Energy::Finite(e.stvk + e.det_penalty + e.second_gradient));
    }

    #[test]
    fn uniaxial_stretch_closed_form() {
        let g = grid(5);
        let p = ElasticParams {
            tensor: identity_tensor(),
            a: 8.0,
            ..Default::default()
        };
        let eta = DeformationField::from_fn(&g, |x| [2.0 * x[0], x[1]]);
        let e = stored_energy(&g, &eta, &p).unwrap();
        assert!((e.stvk - 1.125).abs() < 1e-13);
        assert!((e.det_penalty - 0.00390625).abs() < 1e-15);
        assert!(e.second_gradient.abs() < 1e-14);
        assert_eq!(min_determinant(&g, &eta).unwrap(), 2.0);
    }

    #[test]
    fn folded_cell_is_infinite() {
        let g = grid(5);
        let mut eta = DeformationField::identity(&g);
        let n = g.lattice.node(2, 2);
        eta.values[n] = [0.9, 0.9];
        let e = stored_energy(&g, &eta, &ElasticParams::default()).unwrap();
        assert_eq!(e.total, Energy::Infinite);
        assert!(matches!(
            stored_energy_gradient(&g, &eta, &ElasticParams::default()),
            Err(Error::InfiniteEnergy)
        ));
    }

    #[test]
    fn regularizer_vanishes_on_affine_maps() {
        let g = grid(6);
        let p = ElasticParams::default().with_h(0.1);
        let eta = DeformationField::from_fn(&g, |x| [1.1 * x[0] + 0.2 * x[1], 0.9 * x[1] - 0.1 * x[0]]);
        let e = regularized_energy(&g, &eta, &p).unwrap();
        assert!(e.regularizer.abs() < 1e-20);
        let zero_reg = ElasticParams { h_reg_weight: 0.0, ..p };
        let wiggle = DeformationField::from_fn(&g, |x| [x[0] + 0.01 * (9.0 * x[1]).sin(), x[1]]);
        assert_eq!(
            regularized_energy(&g, &wiggle, &zero_reg).unwrap(),
            stored_energy(&g, &wiggle, &zero_reg).unwrap()
        );
    }

    #[test]
    fn rotation_and_translation_invariance() {
        let g = grid(7);
        let p = ElasticParams::default();
        let eta = DeformationField::from_fn(&g, |x| [x[0] + 0.05 * (3.0 * x[1]).sin(), x[1] + 0.1 * x[0] * x[0]]);
        let e0 = stored_energy(&g, &eta, &p).unwrap();
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let rot = DeformationField {
            values: eta
                .values
                .iter()
                .map(|v| [c * v[0] - s * v[1] + 3.0, s * v[0] + c * v[1] - 1.0])
                .collect(),
        };
        let e1 = stored_energy(&g, &rot, &p).unwrap();
        let (a, b) = (e0.total.or_inf(), e1.total.or_inf());
        assert!((a - b).abs() < 1e-12 * a.abs());
        let shifted = DeformationField {
            values: eta.values.iter().map(|v| [v[0] + 0.3, v[1] - 0.2]).collect(),
        };
        let g0 = stored_energy_gradient(&g, &eta, &p).unwrap();
        let g1 = stored_energy_gradient(&g, &shifted, &p).unwrap();
        for (u, v) in g0.iter().zip(&g1) {
            assert!((u[0] - v[0]).abs() < 1e-10 && (u[1] - v[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let g = grid(6);
        let p = ElasticParams::default().with_h(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = DeformationField::identity(&g)
            .flat()
            .iter()
            .map(|v| v + 0.02 * rng.gen_range(-1.0..1.0))
            .collect();
        let mut an = vec![0.0; x.len()];
        energy_flat(&g, &p, p.h_reg_weight, &x, Some(&mut an));
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fp = energy_flat(&g, &p, p.h_reg_weight, &xp, None).total.or_inf();
            let fm = energy_flat(&g, &p, p.h_reg_weight, &xm, None).total.or_inf();
            worst = worst.max(((fp - fm) / (2.0 * eps) - an[i]).abs());
        }
        assert!(worst / scale < 1e-6, "relative error {}", worst / scale);
    }

    #[test]
    fn dirichlet_rows_are_zero() {
        let l = Lattice::new(5, 5, Rect::new(0.0, 0.0, 1.0, 1.0)).unwrap();
        let g = SolidGrid::new(l.clone(), SolidGrid::left_edge(&l)).unwrap();
        let eta = DeformationField::from_fn(&g, |x| [1.2 * x[0], x[1] + 0.1 * x[0] * x[0]]);
        let gr = stored_energy_gradient(&g, &eta, &ElasticParams::default()).unwrap();
        for n in SolidGrid::left_edge(&l) {
            assert_eq!(gr[n], [0.0, 0.0]);
        }
    }

    #[test]
    fn equilibrium_dilation_is_stationary() {
        let p = ElasticParams::default();
        let s = isotropic_equilibrium_dilation(&p);
        assert!(s > 1.1 && s < 1.2, "s = {s}");
        let g = grid(5);
        let eta = DeformationField::from_fn(&g, |x| [s * x[0], s * x[1]]);
        let gr = stored_energy_gradient(&g, &eta, &p).unwrap();
        // only boundary nodes feel traction-free imbalance; interior sums cancel
        for n in 0..g.num_nodes() {
            if !g.lattice.is_boundary(n) {
                assert!(gr[n][0].abs() < 1e-10 && gr[n][1].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constraint_violations_are_reported() {
        let p = ElasticParams {
            a: 3.0,
            q: 4.0,
            ..Default::default()
        };
        let v = p.violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("a > 2q/(q-2) = 4"));
    }
}

//! Discrete Lagrangian flow map of the fluid, built by composing `id + τv`.

use nalgebra::{Matrix2, Vector2};

use crate::error::{check_len, Error, Result};
use crate::grid::{nodal_gradient, sample, sample_jacobian, stream_to_velocity, FluidGrid, Lattice, StreamVelocity};

pub const INVERSION_TOL: f64 = 1e-10;
pub const INVERSION_MAX_ITER: usize = 50;

/// Nodal images `Φ(y_n)` of the container grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    pub values: Vec<[f64; 2]>,
}

impl FlowMap {
    pub fn identity(fluid: &FluidGrid) -> Self {
        FlowMap {
            values: (0..fluid.num_nodes()).map(|n| fluid.lattice.coords(n)).collect(),
        }
    }

    /// Bilinear evaluation at an arbitrary point of `Ω`.
    pub fn eval(&self, lattice: &Lattice, p: [f64; 2]) -> Result<[f64; 2]> {
        sample(lattice, &self.values, p)
    }

    /// Solves `Φ(x) = y` by Newton iteration on the bilinear interpolant,
    /// starting from `y`. `node` only labels the error.
    pub fn invert_point(&self, lattice: &Lattice, y: [f64; 2], node: usize) -> Result<[f64; 2]> {
        let ext = lattice.extent();
        let mut x = y;
        let mut residual = f64::INFINITY;
        for _ in 0..=INVERSION_MAX_ITER {
            let fx = self.eval(lattice, x)?;
            let r = Vector2::new(fx[0] - y[0], fx[1] - y[1]);
            residual = r.norm();
            if residual <= INVERSION_TOL {
                return Ok(x);
            }
            let j = sample_jacobian(lattice, &self.values, x)?;
            let Some(step) = j.try_inverse().map(|ji| ji * r) else {
                break;
            };
            x = [
                (x[0] - step[0]).clamp(ext.x0, ext.x1),
                (x[1] - step[1]).clamp(ext.y0, ext.y1),
            ];
        }
        Err(Error::InversionFailure { node, residual })
    }

    /// `Φ⁻¹` sampled at the grid nodes.
    pub fn inverse(&self, lattice: &Lattice) -> Result<FlowMap> {
        let values = (0..lattice.num_nodes())
            .map(|n| self.invert_point(lattice, lattice.coords(n), n))
            .collect::<Result<_>>()?;
        Ok(FlowMap { values })
    }
}

/// Clamps a point that left `Ω` by less than one cell; farther excursions are errors.
fn clamp_into(lattice: &Lattice, p: [f64; 2]) -> Result<[f64; 2]> {
    let e = lattice.extent();
    let outside = (e.x0 - p[0]).max(p[0] - e.x1) > lattice.dx || (e.y0 - p[1]).max(p[1] - e.y1) > lattice.dy;
    if outside || !p[0].is_finite() || !p[1].is_finite() {
        return Err(Error::OutOfDomain { point: p });
    }
    Ok([p[0].clamp(e.x0, e.x1), p[1].clamp(e.y0, e.y1)])
}

/// `Φ_{k+1} = (id + τ v) ∘ Φ_k` for a nodal velocity.
pub fn advance_nodal(fluid: &FluidGrid, phi: &FlowMap, v: &[[f64; 2]], tau: f64) -> Result<FlowMap> {
    check_len(fluid.num_nodes(), phi.values.len())?;
    check_len(fluid.num_nodes(), v.len())?;
    let lat = &fluid.lattice;
    let values = phi
        .values
        .iter()
        .map(|&y| {
            let u = sample(lat, v, y)?;
            clamp_into(lat, [y[0] + tau * u[0], y[1] + tau * u[1]])
        })
        .collect::<Result<_>>()?;
    Ok(FlowMap { values })
}

pub fn advance(fluid: &FluidGrid, phi: &FlowMap, v: &StreamVelocity, tau: f64) -> Result<FlowMap> {
    advance_nodal(fluid, phi, &stream_to_velocity(fluid, v)?, tau)
}

/// Minimum and maximum of `det ∇Φ` (central differences at interior nodes).
pub fn jacobian_det_bounds(fluid: &FluidGrid, phi: &FlowMap) -> (f64, f64) {
    let lat = &fluid.lattice;
    (0..lat.num_nodes())
        .filter(|&n| !lat.is_boundary(n))
        .map(|n| nodal_gradient(lat, &phi.values, n).determinant())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)))
}

/// Lipschitz constant (Frobenius) of the bilinear interpolant of a nodal
/// velocity: its gradient is affine on each cell, so the maximum sits at a corner.
pub fn lipschitz(lattice: &Lattice, v: &[[f64; 2]]) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..lattice.num_cells() {
        let [a, b, cc, d] = lattice.cell_corners(c);
        let diff = |p: [f64; 2], q: [f64; 2], h: f64| [(p[0] - q[0]) / h, (p[1] - q[1]) / h];
        // x-derivatives on the bottom/top edges, y-derivatives on the left/right edges
        let gx = [diff(v[b], v[a], lattice.dx), diff(v[d], v[cc], lattice.dx)];
        let gy = [diff(v[cc], v[a], lattice.dy), diff(v[d], v[b], lattice.dy)];
        for x in gx {
            for y in gy {
                worst = worst.max(Matrix2::new(x[0], y[0], x[1], y[1]).norm());
            }
        }
    }
    worst
}

/// Constant in `|det(I + τA) − 1| ≤ C τ² |A|²` for trace-free 2×2 `A`:
/// `det(I + τA) = 1 + τ tr A + τ² det A` and `|det A| ≤ ½|A|²_F`.
pub const DET_EXPANSION_C: f64 = 0.5;

/// `exp(C τ Σ τ L_k²) − 1`.
pub fn volume_bound(tau: f64, sum_tau_lip_sq: f64) -> f64 {
    (DET_EXPANSION_C * tau * sum_tau_lip_sq).exp_m1()
}

/// Per-window flow maps `Φ^m_0 = id, …, Φ^m_N`, relative to each window's start.
#[derive(Debug, Clone)]
pub struct FlowHistory {
    pub tau: f64,
    pub steps_per_window: usize,
    pub windows: Vec<Vec<FlowMap>>,
}

impl FlowHistory {
    pub fn new(tau: f64, steps_per_window: usize) -> Self {
        FlowHistory {
            tau,
            steps_per_window,
            windows: Vec::new(),
        }
    }

    pub fn push_window(&mut self, maps: Vec<FlowMap>) -> Result<()> {
        check_len(self.steps_per_window + 1, maps.len())?;
        self.windows.push(maps);
        Ok(())
    }

    fn total_steps(&self) -> usize {
        self.windows.len() * self.steps_per_window
    }

    fn index(&self, t: f64) -> Result<(usize, usize)> {
        let f = t / self.tau;
        let i = f.round();
        if (f - i).abs() > 1e-6 || i < 0.0 || i as usize > self.total_steps() {
            return Err(Error::Config(vec![format!(
                "time {t} is not a step time within the solved horizon [0, {}]",
                self.total_steps() as f64 * self.tau
            )]));
        }
        let i = i as usize;
        let n = self.steps_per_window;
        Ok(if i == self.total_steps() && i > 0 {
            (i / n - 1, n)
        } else {
            (i / n, i % n)
        })
    }

    /// Image at time `t + s` of the particle located at `p` at time `t`.
    pub fn map_point(&self, lattice: &Lattice, t: f64, s: f64, p: [f64; 2]) -> Result<[f64; 2]> {
        let (m1, k1) = self.index(t)?;
        let (m2, k2) = self.index(t + s)?;
        let n = self.steps_per_window;
        let inv = |m: usize, k: usize, x: [f64; 2]| self.windows[m][k].invert_point(lattice, x, 0);
        let fwd = |m: usize, k: usize, x: [f64; 2]| self.windows[m][k].eval(lattice, x);
        let mut x = p;
        if (m1, k1) <= (m2, k2) {
            x = inv(m1, k1, x)?;
            if m1 == m2 {
                return fwd(m2, k2, x);
            }
            x = fwd(m1, n, x)?;
            for m in m1 + 1..m2 {
                x = fwd(m, n, x)?;
            }
            fwd(m2, k2, x)
        } else {
            x = inv(m1, k1, x)?;
            if m1 != m2 {
                for m in (m2 + 1..m1).rev() {
                    x = inv(m, n, x)?;
                }
                x = inv(m2, n, x)?;
            }
            fwd(m2, k2, x)
        }
    }

    /// The map sending particle positions at time `t` to positions at `t + s`, sampled at nodes.
    pub fn compose_windows(&self, lattice: &Lattice, t: f64, s: f64) -> Result<FlowMap> {
        let values = (0..lattice.num_nodes())
            .map(|n| {
                self.map_point(lattice, t, s, lattice.coords(n)).map_err(|e| match e {
                    Error::InversionFailure { residual, .. } => Error::InversionFailure { node: n, residual },
                    e => e,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FlowMap { values })
    }
}

/// Delayed fluid data for the next window: `w_k = v_{k+1} ∘ Φ_k ∘ Φ_N⁻¹`.
///
/// `velocities[k]` is the nodal velocity `v_{k+1}`; `maps` are `Φ_0, …, Φ_N`.
pub fn straighten_velocity(
    fluid: &FluidGrid,
    velocities: &[Vec<[f64; 2]>],
    maps: &[FlowMap],
) -> Result<Vec<Vec<[f64; 2]>>> {
    check_len(velocities.len() + 1, maps.len())?;
    let lat = &fluid.lattice;
    let end = maps.last().expect("at least one map");
    let pulled: Vec<[f64; 2]> = (0..lat.num_nodes())
        .map(|n| end.invert_point(lat, lat.coords(n), n))
        .collect::<Result<_>>()?;
    velocities
        .iter()
        .zip(maps)
        .map(|(v, phi)| {
            pulled
                .iter()
                .map(|&z| sample(lat, v, phi.eval(lat, z)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Largest edge stretch `|Φ(y_a) − Φ(y_b)| / |y_a − y_b|` over grid edges.
pub fn edge_stretch(lattice: &Lattice, phi: &FlowMap) -> f64 {
    let mut worst: f64 = 0.0;
    for n in 0..lattice.num_nodes() {
        let (i, j) = lattice.node_ij(n);
        let p = Vector2::from(phi.values[n]);
        if i + 1 < lattice.nx {
            let q = Vector2::from(phi.values[lattice.node(i + 1, j)]);
            worst = worst.max((q - p).norm() / lattice.dx);
        }
        if j + 1 < lattice.ny {
            let q = Vector2::from(phi.values[lattice.node(i, j + 1)]);
            worst = worst.max((q - p).norm() / lattice.dy);
        }
    }
    worst
}

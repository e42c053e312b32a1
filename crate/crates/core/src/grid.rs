//! Structured grids on the reference solid `Q` and the container `Ω`,
//! the discrete fields living on them, and the stencils acting on those fields.
//!
//! Layout conventions:
//! * nodes are numbered row-major, `n = j * nx + i`;
//! * vector fields are interleaved, component `c` of node `n` sits at `2n + c`;
//! * cells are numbered `j * (nx - 1) + i` and carry midpoint quadrature.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use nalgebra::Matrix2;

use crate::error::{check_len, Error, Result};
use crate::linalg::SparseOp;

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// Distance from an interior point to the rectangle boundary.
    pub fn distance_to_boundary(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.x0)
            .min(self.x1 - p[0])
            .min(p[1] - self.y0)
            .min(self.y1 - p[1])
    }
}

/// Tensor-product node lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Lattice {
    pub fn new(nx: usize, ny: usize, extent: Rect) -> Result<Self> {
        let mut errs = Vec::new();
        if nx < 4 || ny < 4 {
            errs.push(format!("grid needs at least 4 nodes per axis, got {nx}x{ny}"));
        }
        if !(extent.x1 > extent.x0 && extent.y1 > extent.y0) {
            errs.push(format!("degenerate rectangle {extent:?}"));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(Lattice {
            nx,
            ny,
            x0: extent.x0,
            y0: extent.y0,
            dx: (extent.x1 - extent.x0) / (nx - 1) as f64,
            dy: (extent.y1 - extent.y0) / (ny - 1) as f64,
        })
    }

    pub fn extent(&self) -> Rect {
        Rect::new(
            self.x0,
            self.y0,
            self.x0 + (self.nx - 1) as f64 * self.dx,
            self.y0 + (self.ny - 1) as f64 * self.dy,
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn num_cells(&self) -> usize {
        (self.nx - 1) * (self.ny - 1)
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn node_ij(&self, n: usize) -> (usize, usize) {
        (n % self.nx, n / self.nx)
    }

    pub fn coords(&self, n: usize) -> [f64; 2] {
        let (i, j) = self.node_ij(n);
        [self.x0 + i as f64 * self.dx, self.y0 + j as f64 * self.dy]
    }

    pub fn is_boundary(&self, n: usize) -> bool {
        let (i, j) = self.node_ij(n);
        i == 0 || j == 0 || i == self.nx - 1 || j == self.ny - 1
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    /// Midpoint-rule weights, one per cell.
    pub fn cell_weights(&self) -> Vec<f64> {
        vec![self.cell_area(); self.num_cells()]
    }

    /// Trapezoidal nodal weights (corner-lumped cells); they sum to the area.
    pub fn node_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.num_nodes()];
        let q = 0.25 * self.cell_area();
        for j in 0..self.ny - 1 {
            for i in 0..self.nx - 1 {
                for (a, b) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    w[self.node(i + a, j + b)] += q;
                }
            }
        }
        w
    }

    /// The four corner nodes of a cell, ordered (i,j), (i+1,j), (i,j+1), (i+1,j+1).
    pub fn cell_corners(&self, cell: usize) -> [usize; 4] {
        let (i, j) = (cell % (self.nx - 1), cell / (self.nx - 1));
        [
            self.node(i, j),
            self.node(i + 1, j),
            self.node(i, j + 1),
            self.node(i + 1, j + 1),
        ]
    }

    /// Scalar gradient at cell centers: rows `2 cell + a` hold `∂_a u`.
    pub fn cell_gradient_scalar(&self) -> SparseOp {
        let mut op = SparseOp::new(self.num_nodes());
        let (hx, hy) = (0.5 / self.dx, 0.5 / self.dy);
        for cell in 0..self.num_cells() {
            let [n00, n10, n01, n11] = self.cell_corners(cell);
            op.push_row(&[(n10, hx), (n11, hx), (n00, -hx), (n01, -hx)]);
            op.push_row(&[(n01, hy), (n11, hy), (n00, -hy), (n10, -hy)]);
        }
        op
    }

    /// Second derivative weights of the cubic through four consecutive nodes
    /// (offsets 0..4), evaluated at offset `s`, in units of the spacing.
    fn cubic_second_derivative(s: f64) -> [f64; 4] {
        let mut w = [0.0; 4];
        for (k, wk) in w.iter_mut().enumerate() {
            let others: Vec<f64> = (0..4).filter(|&m| m != k).map(|m| m as f64).collect();
            let denom: f64 = others.iter().map(|&m| k as f64 - m).product();
            *wk = (6.0 * s - 2.0 * others.iter().sum::<f64>()) / denom;
        }
        w
    }

    /// Scalar Hessian at cell centers: rows `3 cell + {0: xx, 1: xy, 2: yy}`.
    ///
    /// Pure second derivatives use a four-node window along the axis (shifted
    /// inward at the boundary) averaged over the two node lines of the cell;
    /// the mixed derivative is the cell's bilinear twist.
    pub fn cell_hessian_scalar(&self) -> SparseOp {
        let mut op = SparseOp::new(self.num_nodes());
        for cell in 0..self.num_cells() {
            let (i, j) = (cell % (self.nx - 1), cell / (self.nx - 1));

            let sx = i.saturating_sub(1).min(self.nx - 4);
            let wx = Self::cubic_second_derivative(i as f64 + 0.5 - sx as f64);
            let mut row = Vec::with_capacity(8);
            for jj in [j, j + 1] {
                for (k, w) in wx.iter().enumerate() {
                    row.push((self.node(sx + k, jj), 0.5 * w / (self.dx * self.dx)));
                }
            }
            op.push_row(&row);

            let [n00, n10, n01, n11] = self.cell_corners(cell);
            let c = 1.0 / (self.dx * self.dy);
            op.push_row(&[(n11, c), (n00, c), (n10, -c), (n01, -c)]);

            let sy = j.saturating_sub(1).min(self.ny - 4);
            let wy = Self::cubic_second_derivative(j as f64 + 0.5 - sy as f64);
            row.clear();
            for ii in [i, i + 1] {
                for (k, w) in wy.iter().enumerate() {
                    row.push((self.node(ii, sy + k), 0.5 * w / (self.dy * self.dy)));
                }
            }
            op.push_row(&row);
        }
        op
    }

    /// All forward differences `Δ_x^a Δ_y^b / (dx^a dy^b)` with `a + b = order`,
    /// with weights `binom(order, a) · dx · dy` so that the weighted squared norm
    /// approximates `‖∇^order u‖²_{L²}`.
    pub fn forward_difference_scalar(&self, order: usize) -> (SparseOp, Vec<f64>) {
        let mut op = SparseOp::new(self.num_nodes());
        let mut weights = Vec::new();
        for a in 0..=order {
            let b = order - a;
            if a >= self.nx || b >= self.ny {
                continue;
            }
            let binom = binomial(order, a) as f64;
            let scale = 1.0 / (self.dx.powi(a as i32) * self.dy.powi(b as i32));
            for j in 0..self.ny - b {
                for i in 0..self.nx - a {
                    let mut row = Vec::with_capacity((a + 1) * (b + 1));
                    for p in 0..=a {
                        for r in 0..=b {
                            let sign = if (a - p + b - r).is_multiple_of(2) { 1.0 } else { -1.0 };
                            let c = sign * (binomial(a, p) * binomial(b, r)) as f64 * scale;
                            row.push((self.node(i + p, j + r), c));
                        }
                    }
                    op.push_row(&row);
                    weights.push(binom * self.cell_area());
                }
            }
        }
        (op, weights)
    }

    /// Locates `p` in a cell; returns `(cell_i, cell_j, s, t)` with local
    /// coordinates in `[0, 1]`, or `None` outside the lattice (beyond round-off).
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, usize, f64, f64)> {
        let fx = (p[0] - self.x0) / self.dx;
        let fy = (p[1] - self.y0) / self.dy;
        let slop = 1e-9;
        let (mx, my) = ((self.nx - 1) as f64, (self.ny - 1) as f64);
        if !(fx >= -slop && fy >= -slop && fx <= mx + slop && fy <= my + slop) {
            return None;
        }
        let fx = fx.clamp(0.0, mx);
        let fy = fy.clamp(0.0, my);
        let i = (fx.floor() as usize).min(self.nx - 2);
        let j = (fy.floor() as usize).min(self.ny - 2);
        Some((i, j, fx - i as f64, fy - j as f64))
    }

    /// Bilinear interpolation weights: a scalar operator from nodes to points.
    pub fn interpolation(&self, points: &[[f64; 2]]) -> Result<SparseOp> {
        let mut op = SparseOp::new(self.num_nodes());
        for &p in points {
            let (i, j, s, t) = self.locate(p).ok_or(Error::OutOfDomain { point: p })?;
            op.push_row(&[
                (self.node(i, j), (1.0 - s) * (1.0 - t)),
                (self.node(i + 1, j), s * (1.0 - t)),
                (self.node(i, j + 1), (1.0 - s) * t),
                (self.node(i + 1, j + 1), s * t),
            ]);
        }
        Ok(op)
    }
}

pub(crate) fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
}

/// Lifts a scalar operator to interleaved 2-vectors: row `r` becomes rows `2r`, `2r + 1`.
pub fn expand_components(scalar: &SparseOp) -> SparseOp {
    let mut op = SparseOp::new(2 * scalar.ncols());
    let mut row = Vec::new();
    for r in 0..scalar.nrows() {
        for c in 0..2 {
            row.clear();
            row.extend(scalar.row(r).map(|(n, v)| (2 * n + c, v)));
            op.push_row(&row);
        }
    }
    op
}

/// A vector operator with quadrature weights per output row.
#[derive(Debug, Clone)]
pub struct WeightedOp {
    pub op: SparseOp,
    pub weights: Vec<f64>,
}

impl WeightedOp {
    pub fn norm_sq(&self, x: &[f64]) -> f64 {
        self.op.weighted_norm_sq(x, &self.weights)
    }

    /// Gradient of `½ · norm_sq`.
    pub fn normal(&self, x: &[f64]) -> Vec<f64> {
        self.op.weighted_normal(x, &self.weights)
    }
}

#[derive(Debug, Default)]
struct DifferenceCache(Mutex<HashMap<usize, Arc<WeightedOp>>>);

impl DifferenceCache {
    fn get(&self, lattice: &Lattice, order: usize) -> Arc<WeightedOp> {
        let mut map = self.0.lock().expect("difference cache poisoned");
        map.entry(order)
            .or_insert_with(|| {
                let (scalar, w) = lattice.forward_difference_scalar(order);
                let weights = w.iter().flat_map(|&x| [x, x]).collect();
                Arc::new(WeightedOp {
                    op: expand_components(&scalar),
                    weights,
                })
            })
            .clone()
    }
}

/// Reference grid on `Q` with its Dirichlet set `P` and cached stencils.
#[derive(Debug)]
pub struct SolidGrid {
    pub lattice: Lattice,
    dirichlet: Vec<usize>,
    is_dirichlet: Vec<bool>,
    /// Vector gradient at cells; `F[c][a]` sits at row `4 cell + 2a + c`.
    pub grad: SparseOp,
    /// Vector Hessian at cells; `∂_k η_c` (k ∈ {xx, xy, yy}) sits at row `6 cell + 2k + c`.
    pub hess: SparseOp,
    pub node_weights: Vec<f64>,
    diffs: DifferenceCache,
}

impl SolidGrid {
    pub fn new(lattice: Lattice, dirichlet: Vec<usize>) -> Result<Self> {
        let mut is_dirichlet = vec![false; lattice.num_nodes()];
        let mut errs = Vec::new();
        for &n in &dirichlet {
            if n >= lattice.num_nodes() || !lattice.is_boundary(n) {
                errs.push(format!("Dirichlet node {n} is not a boundary node"));
            } else {
                is_dirichlet[n] = true;
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut dirichlet = dirichlet;
        dirichlet.sort_unstable();
        dirichlet.dedup();
        Ok(SolidGrid {
            grad: expand_components(&lattice.cell_gradient_scalar()),
            hess: expand_components(&lattice.cell_hessian_scalar()),
            node_weights: lattice.node_weights(),
            lattice,
            dirichlet,
            is_dirichlet,
            diffs: DifferenceCache::default(),
        })
    }

    /// Nodes on the left edge `x = x0`.
    pub fn left_edge(lattice: &Lattice) -> Vec<usize> {
        (0..lattice.ny).map(|j| lattice.node(0, j)).collect()
    }

    pub fn dirichlet_set(&self) -> &[usize] {
        &self.dirichlet
    }

    pub fn is_dirichlet(&self, n: usize) -> bool {
        self.is_dirichlet[n]
    }

    pub fn num_nodes(&self) -> usize {
        self.lattice.num_nodes()
    }

    pub fn area(&self) -> f64 {
        self.lattice.extent().area()
    }

    pub fn difference(&self, order: usize) -> Arc<WeightedOp> {
        self.diffs.get(&self.lattice, order)
    }

    /// Zeroes the rows of a flat nodal vector that belong to `P`.
    pub fn mask_dirichlet(&self, g: &mut [f64]) {
        for &n in &self.dirichlet {
            g[2 * n] = 0.0;
            g[2 * n + 1] = 0.0;
        }
    }
}

/// Container grid on `Ω` with stream-function degrees of freedom on interior nodes.
#[derive(Debug)]
pub struct FluidGrid {
    pub lattice: Lattice,
    dof_of_node: Vec<Option<usize>>,
    node_of_dof: Vec<usize>,
    /// `ψ` DOFs → nodal velocity (interleaved).
    pub curl: SparseOp,
    /// Nodal velocity → cell gradient, `∇v[c][a]` at row `4 cell + 2a + c`.
    pub grad: SparseOp,
    pub node_weights: Vec<f64>,
    diffs: DifferenceCache,
}

impl FluidGrid {
    pub fn new(lattice: Lattice) -> Self {
        let mut dof_of_node = vec![None; lattice.num_nodes()];
        let mut node_of_dof = Vec::new();
        for n in 0..lattice.num_nodes() {
            if !lattice.is_boundary(n) {
                dof_of_node[n] = Some(node_of_dof.len());
                node_of_dof.push(n);
            }
        }
        let curl = Self::build_curl(&lattice, &dof_of_node, node_of_dof.len());
        FluidGrid {
            grad: expand_components(&lattice.cell_gradient_scalar()),
            node_weights: lattice.node_weights(),
            curl,
            lattice,
            dof_of_node,
            node_of_dof,
            diffs: DifferenceCache::default(),
        }
    }

    /// `v = (∂ψ/∂y, −∂ψ/∂x)` with central differences. Boundary nodes carry
    /// `ψ = 0`; the even ghost reflection `ψ_{-1} = ψ_1` makes the normal
    /// derivative vanish, so boundary velocities are identically zero.
    fn build_curl(lattice: &Lattice, dof_of_node: &[Option<usize>], ndof: usize) -> SparseOp {
        let mut op = SparseOp::new(ndof);
        let (hx, hy) = (0.5 / lattice.dx, 0.5 / lattice.dy);
        let dof = |i: usize, j: usize| dof_of_node[lattice.node(i, j)];
        for n in 0..lattice.num_nodes() {
            if lattice.is_boundary(n) {
                op.push_row(&[]);
                op.push_row(&[]);
                continue;
            }
            let (i, j) = lattice.node_ij(n);
            let mut vx = Vec::new();
            if let Some(d) = dof(i, j + 1) {
                vx.push((d, hy));
            }
            if let Some(d) = dof(i, j - 1) {
                vx.push((d, -hy));
            }
            op.push_row(&vx);
            let mut vy = Vec::new();
            if let Some(d) = dof(i + 1, j) {
                vy.push((d, -hx));
            }
            if let Some(d) = dof(i - 1, j) {
                vy.push((d, hx));
            }
            op.push_row(&vy);
        }
        op
    }

    pub fn num_dofs(&self) -> usize {
        self.node_of_dof.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.lattice.num_nodes()
    }

    pub fn dof_of_node(&self, n: usize) -> Option<usize> {
        self.dof_of_node[n]
    }

    pub fn node_of_dof(&self, d: usize) -> usize {
        self.node_of_dof[d]
    }

    pub fn area(&self) -> f64 {
        self.lattice.extent().area()
    }

    pub fn boundary_set(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&n| self.lattice.is_boundary(n)).collect()
    }

    pub fn difference(&self, order: usize) -> Arc<WeightedOp> {
        self.diffs.get(&self.lattice, order)
    }

    /// Symmetric gradient rows `ε11, ε22, ε12` per cell, weighted so that the
    /// weighted squared norm equals `∫ |εv|²` by the midpoint rule.
    pub fn symmetric_gradient(&self) -> WeightedOp {
        let mut op = SparseOp::new(2 * self.num_nodes());
        let mut weights = Vec::new();
        let area = self.lattice.cell_area();
        let mut row = Vec::new();
        for cell in 0..self.lattice.num_cells() {
            let g = |c: usize, a: usize| 4 * cell + 2 * a + c;
            for (c, a, w) in [(0, 0, 1.0), (1, 1, 1.0)] {
                row.clear();
                row.extend(self.grad.row(g(c, a)));
                op.push_row(&row);
                weights.push(w * area);
            }
            row.clear();
            row.extend(self.grad.row(g(0, 1)).map(|(k, v)| (k, 0.5 * v)));
            row.extend(self.grad.row(g(1, 0)).map(|(k, v)| (k, 0.5 * v)));
            op.push_row(&row);
            weights.push(2.0 * area);
        }
        WeightedOp { op, weights }
    }
}

/// Nodal deformation `η: Q → Ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub values: Vec<[f64; 2]>,
}

impl DeformationField {
    pub fn from_fn(grid: &SolidGrid, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        DeformationField {
            values: (0..grid.num_nodes()).map(|n| f(grid.lattice.coords(n))).collect(),
        }
    }

    pub fn identity(grid: &SolidGrid) -> Self {
        Self::from_fn(grid, |x| x)
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.values)
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        DeformationField {
            values: unflatten(flat),
        }
    }
}

/// Stream-function values on the interior nodes of the container grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamVelocity {
    pub psi: Vec<f64>,
}

impl StreamVelocity {
    pub fn zero(grid: &FluidGrid) -> Self {
        StreamVelocity {
            psi: vec![0.0; grid.num_dofs()],
        }
    }

    /// Samples `ψ` at interior nodes (boundary values are implicitly zero).
    pub fn from_fn(grid: &FluidGrid, f: impl Fn([f64; 2]) -> f64) -> Self {
        StreamVelocity {
            psi: (0..grid.num_dofs())
                .map(|d| f(grid.lattice.coords(grid.node_of_dof(d))))
                .collect(),
        }
    }
}

pub fn flatten(v: &[[f64; 2]]) -> Vec<f64> {
    v.iter().flat_map(|p| [p[0], p[1]]).collect()
}

pub fn unflatten(v: &[f64]) -> Vec<[f64; 2]> {
    v.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Reads the 2×2 matrix of cell `cell` from a vector-gradient output,
/// with entry `(c, a)` = `∂_a u_c`.
pub fn cell_matrix(values: &[f64], cell: usize) -> Matrix2<f64> {
    let g = &values[4 * cell..4 * cell + 4];
    Matrix2::new(g[0], g[2], g[1], g[3])
}

/// Scatters `dW/dF` of a cell back into the gradient-output layout.
pub fn write_cell_matrix(out: &mut [f64], cell: usize, m: &Matrix2<f64>) {
    out[4 * cell] = m[(0, 0)];
    out[4 * cell + 1] = m[(1, 0)];
    out[4 * cell + 2] = m[(0, 1)];
    out[4 * cell + 3] = m[(1, 1)];
}

/// `∇η` at every cell center.
pub fn gradient_of_deformation(grid: &SolidGrid, eta: &DeformationField) -> Result<Vec<Matrix2<f64>>> {
    check_len(grid.num_nodes(), eta.values.len())?;
    let g = grid.grad.apply(&eta.flat());
    Ok((0..grid.lattice.num_cells()).map(|c| cell_matrix(&g, c)).collect())
}

/// `∇²η` at every cell center: one symmetric 2×2 Hessian per component.
pub fn hessian_of_deformation(grid: &SolidGrid, eta: &DeformationField) -> Result<Vec<[Matrix2<f64>; 2]>> {
    check_len(grid.num_nodes(), eta.values.len())?;
    let h = grid.hess.apply(&eta.flat());
    Ok((0..grid.lattice.num_cells())
        .map(|cell| {
            let at = |k: usize, c: usize| h[6 * cell + 2 * k + c];
            [0, 1].map(|c| Matrix2::new(at(0, c), at(1, c), at(1, c), at(2, c)))
        })
        .collect())
}

/// Nodal velocity of a stream function.
pub fn stream_to_velocity(grid: &FluidGrid, psi: &StreamVelocity) -> Result<Vec<[f64; 2]>> {
    check_len(grid.num_dofs(), psi.psi.len())?;
    Ok(unflatten(&grid.curl.apply(&psi.psi)))
}

/// Central-difference divergence at interior nodes (boundary entries are 0).
pub fn discrete_divergence(lattice: &Lattice, v: &[[f64; 2]]) -> Result<Vec<f64>> {
    check_len(lattice.num_nodes(), v.len())?;
    let mut div = vec![0.0; lattice.num_nodes()];
    for (n, d) in div.iter_mut().enumerate() {
        if lattice.is_boundary(n) {
            continue;
        }
        let (i, j) = lattice.node_ij(n);
        *d = (v[lattice.node(i + 1, j)][0] - v[lattice.node(i - 1, j)][0]) / (2.0 * lattice.dx)
            + (v[lattice.node(i, j + 1)][1] - v[lattice.node(i, j - 1)][1]) / (2.0 * lattice.dy);
    }
    Ok(div)
}

/// Central-difference gradient of a nodal vector field at an interior node,
/// entry `(c, a)` = `∂_a u_c`.
pub fn nodal_gradient(lattice: &Lattice, u: &[[f64; 2]], n: usize) -> Matrix2<f64> {
    let (i, j) = lattice.node_ij(n);
    let (e, w) = (u[lattice.node(i + 1, j)], u[lattice.node(i - 1, j)]);
    let (nn, s) = (u[lattice.node(i, j + 1)], u[lattice.node(i, j - 1)]);
    let (hx, hy) = (0.5 / lattice.dx, 0.5 / lattice.dy);
    Matrix2::new(
        (e[0] - w[0]) * hx,
        (nn[0] - s[0]) * hy,
        (e[1] - w[1]) * hx,
        (nn[1] - s[1]) * hy,
    )
}

/// Result of [`interpolate_eulerian`]: the point values plus the weight
/// structure whose transpose maps point forces back to nodes.
#[derive(Debug, Clone)]
pub struct Interpolation {
    pub weights: SparseOp,
}

impl Interpolation {
    /// `Wᵀ w`: nodal vectors receiving the point vectors `w`.
    pub fn adjoint(&self, w: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let mut out = vec![[0.0; 2]; self.weights.ncols()];
        for (r, wr) in w.iter().enumerate() {
            for (n, v) in self.weights.row(r) {
                out[n][0] += v * wr[0];
                out[n][1] += v * wr[1];
            }
        }
        out
    }
}

/// Bilinear interpolation of a nodal vector field at arbitrary points.
pub fn interpolate_eulerian(
    lattice: &Lattice,
    field: &[[f64; 2]],
    points: &[[f64; 2]],
) -> Result<(Vec<[f64; 2]>, Interpolation)> {
    check_len(lattice.num_nodes(), field.len())?;
    let weights = lattice.interpolation(points)?;
    let values = (0..points.len())
        .map(|r| {
            weights.row(r).fold([0.0; 2], |acc, (n, w)| {
                [acc[0] + w * field[n][0], acc[1] + w * field[n][1]]
            })
        })
        .collect();
    Ok((values, Interpolation { weights }))
}

/// Evaluates the bilinear interpolant of a nodal vector field at one point.
pub fn sample(lattice: &Lattice, field: &[[f64; 2]], p: [f64; 2]) -> Result<[f64; 2]> {
    let (i, j, s, t) = lattice.locate(p).ok_or(Error::OutOfDomain { point: p })?;
    let f = |a: usize, b: usize| field[lattice.node(i + a, j + b)];
    let w = [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t];
    let c = [f(0, 0), f(1, 0), f(0, 1), f(1, 1)];
    Ok([
        w.iter().zip(&c).map(|(w, c)| w * c[0]).sum(),
        w.iter().zip(&c).map(|(w, c)| w * c[1]).sum(),
    ])
}

/// Jacobian of the bilinear interpolant at `p`, entry `(c, a)` = `∂_a u_c`.
pub fn sample_jacobian(lattice: &Lattice, field: &[[f64; 2]], p: [f64; 2]) -> Result<Matrix2<f64>> {
    let (i, j, s, t) = lattice.locate(p).ok_or(Error::OutOfDomain { point: p })?;
    let f = |a: usize, b: usize| field[lattice.node(i + a, j + b)];
    let (f00, f10, f01, f11) = (f(0, 0), f(1, 0), f(0, 1), f(1, 1));
    let mut m = Matrix2::zeros();
    for c in 0..2 {
        m[(c, 0)] = ((1.0 - t) * (f10[c] - f00[c]) + t * (f11[c] - f01[c])) / lattice.dx;
        m[(c, 1)] = ((1.0 - s) * (f01[c] - f00[c]) + s * (f11[c] - f10[c])) / lattice.dy;
    }
    Ok(m)
}

/// Writes a nodal snapshot: header `nx ny x0 y0 dx dy`, then `i j value…` rows.
pub fn write_snapshot<W: Write>(out: &mut W, lattice: &Lattice, columns: &[&[f64]]) -> Result<()> {
    writeln!(
        out,
        "{} {} {} {} {} {}",
        lattice.nx, lattice.ny, lattice.x0, lattice.y0, lattice.dx, lattice.dy
    )?;
    for n in 0..lattice.num_nodes() {
        let (i, j) = lattice.node_ij(n);
        write!(out, "{i} {j}")?;
        for col in columns {
            write!(out, " {}", col[n])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parses a snapshot written by [`write_snapshot`]; returns the lattice and
/// the per-node value rows.
pub fn read_snapshot<R: BufRead>(input: R) -> Result<(Lattice, Vec<Vec<f64>>)> {
    let mut lines = input.lines();
    let bad = |line: usize, msg: &str| Error::Io(format!("snapshot line {line}: {msg}"));
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))??;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 6 {
        return Err(bad(1, "expected `nx ny x0 y0 dx dy`"));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| bad(1, &e.to_string()));
    let num = |s: &str| s.parse::<f64>().map_err(|e| bad(1, &e.to_string()));
    let lattice = Lattice {
        nx: int(h[0])?,
        ny: int(h[1])?,
        x0: num(h[2])?,
        y0: num(h[3])?,
        dx: num(h[4])?,
        dy: num(h[5])?,
    };
    let mut rows = vec![Vec::new(); lattice.num_nodes()];
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = k + 2;
        let mut it = line.split_whitespace();
        let mut next_int = || -> Result<usize> {
            it.next()
                .ok_or_else(|| bad(lineno, "missing index"))?
                .parse::<usize>()
                .map_err(|e| bad(lineno, &e.to_string()))
        };
        let (i, j) = (next_int()?, next_int()?);
        if i >= lattice.nx || j >= lattice.ny {
            return Err(bad(lineno, "index out of range"));
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().skip(2).map(str::parse::<f64>).collect();
        rows[lattice.node(i, j)] = vals.map_err(|e| bad(lineno, &e.to_string()))?;
    }
    Ok((lattice, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_solid(n: usize) -> SolidGrid {
        SolidGrid::new(Lattice::new(n, n, Rect::new(0.0, 0.0, 1.0, 1.0)).unwrap(), vec![]).unwrap()
    }

    fn fluid(n: usize) -> FluidGrid {
        FluidGrid::new(Lattice::new(n, n, Rect::new(-1.0, -1.0, 2.0, 2.0)).unwrap())
    }

    #[test]
    fn quadrature_weights_sum_to_area() {
        let l = Lattice::new(7, 5, Rect::new(-0.3, 0.1, 1.9, 0.8)).unwrap();
        let area = l.extent().area();
        let cells: f64 = l.cell_weights().iter().sum();
        let nodes: f64 = l.node_weights().iter().sum();
        assert!((cells - area).abs() <= 1e-14 * area);
        assert!((nodes - area).abs() <= 1e-14 * area);
    }

    #[test]
    fn identity_gradient_and_zero_hessian() {
        let g = unit_solid(6);
        let eta = DeformationField::identity(&g);
        for f in gradient_of_deformation(&g, &eta).unwrap() {
            assert!((f - Matrix2::identity()).norm() < 1e-13);
        }
        for h in hessian_of_deformation(&g, &eta).unwrap() {
            assert!(h[0].norm() < 1e-10 && h[1].norm() < 1e-10);
        }
    }

    #[test]
    fn stretch_gradient_is_diagonal() {
        let g = unit_solid(5);
        let eta = DeformationField::from_fn(&g, |x| [2.0 * x[0], x[1]]);
        for f in gradient_of_deformation(&g, &eta).unwrap() {
            assert!((f - Matrix2::new(2.0, 0.0, 0.0, 1.0)).norm() < 1e-13);
        }
    }

    #[test]
    fn quadratic_hessian_is_exact_everywhere() {
        let g = unit_solid(7);
        let eta = DeformationField::from_fn(&g, |x| [x[0] * x[0], x[1]]);
        for h in hessian_of_deformation(&g, &eta).unwrap() {
            assert!((h[0][(0, 0)] - 2.0).abs() < 1e-9);
            assert!(h[0][(0, 1)].abs() < 1e-9 && h[0][(1, 1)].abs() < 1e-9);
            assert!(h[1].norm() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_structural_error() {
        let g = unit_solid(5);
        let eta = DeformationField {
            values: vec![[0.0; 2]; 3],
        };
        assert!(matches!(
            gradient_of_deformation(&g, &eta),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn curl_of_xy_is_linear_field() {
        // ψ = x·y restricted to interior rows: v = (x, −y) at nodes whose
        // neighbours are all interior.
        let f = fluid(9);
        let psi = StreamVelocity::from_fn(&f, |p| p[0] * p[1]);
        let v = stream_to_velocity(&f, &psi).unwrap();
        let l = &f.lattice;
        for n in 0..l.num_nodes() {
            let (i, j) = l.node_ij(n);
            if i < 2 || j < 2 || i > l.nx - 3 || j > l.ny - 3 {
                continue;
            }
            let p = l.coords(n);
            assert!((v[n][0] - p[0]).abs() < 1e-12);
            assert!((v[n][1] + p[1]).abs() < 1e-12);
        }
        let div = discrete_divergence(l, &v).unwrap();
        assert!(div.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn zero_stream_gives_zero_velocity() {
        let f = fluid(6);
        let v = stream_to_velocity(&f, &StreamVelocity::zero(&f)).unwrap();
        assert!(v.iter().all(|x| x[0] == 0.0 && x[1] == 0.0));
    }

    #[test]
    fn interpolation_reproduces_affine_fields() {
        let f = fluid(8);
        let l = &f.lattice;
        let field: Vec<[f64; 2]> = (0..l.num_nodes())
            .map(|n| {
                let p = l.coords(n);
                [1.0 + 2.0 * p[0] - p[1], -0.5 + 0.25 * p[1]]
            })
            .collect();
        let pts = [[0.13, 0.77], [-0.99, 1.5], [1.999, -0.2]];
        let (vals, _) = interpolate_eulerian(l, &field, &pts).unwrap();
        for (v, p) in vals.iter().zip(&pts) {
            assert!((v[0] - (1.0 + 2.0 * p[0] - p[1])).abs() < 1e-12);
            assert!((v[1] - (-0.5 + 0.25 * p[1])).abs() < 1e-12);
        }
        assert!(matches!(
            interpolate_eulerian(l, &field, &[[2.5, 0.0]]),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn fourth_order_window_weights() {
        let w = Lattice::cubic_second_derivative(1.5);
        for (a, b) in w.iter().zip([0.5, -0.5, -0.5, 0.5]) {
            assert!((a - b).abs() < 1e-14);
        }
        let w = Lattice::cubic_second_derivative(0.5);
        for (a, b) in w.iter().zip([1.5, -3.5, 2.5, -0.5]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn third_differences_vanish_on_quadratics() {
        let g = unit_solid(6);
        let d = g.difference(3);
        let eta = DeformationField::from_fn(&g, |x| [x[0] * x[1] + x[0] * x[0], 3.0 - x[1] * x[1]]);
        assert!(d.norm_sq(&eta.flat()) < 1e-16);
    }

    #[test]
    fn snapshot_round_trip() {
        let l = Lattice::new(4, 5, Rect::new(0.0, 0.0, 1.5, 2.0)).unwrap();
        let a: Vec<f64> = (0..l.num_nodes()).map(|n| n as f64 * 0.5).collect();
        let b: Vec<f64> = (0..l.num_nodes()).map(|n| -(n as f64)).collect();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &l, &[&a, &b]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("4 5 0 0 0.5 0.5\n0 0 0 -0\n"));
        let (l2, rows) = read_snapshot(&buf[..]).unwrap();
        assert_eq!(l2, l);
        for n in 0..l.num_nodes() {
            assert_eq!(rows[n], vec![a[n], b[n]]);
        }
    }
}

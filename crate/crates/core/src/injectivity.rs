//! Discrete Ciarlet–Nečas check and the collision guard.
//!
//! Cells are mapped bilinearly, so each deformed cell is a straight-edged
//! quadrilateral and the midpoint value of `det ∇η` integrates it exactly.
//! Consequently the gap vanishes to round-off whenever the deformed boundary
//! is a simple curve, and equals the overlapped area otherwise.

use crate::error::{check_len, Result};
use crate::grid::{cell_matrix, DeformationField, Rect, SolidGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectivityReport {
    /// `|η(Q)|`.
    pub deformed_area: f64,
    /// `∫_Q det ∇η`.
    pub det_integral: f64,
    pub gap: f64,
    /// Distance of the free boundary to itself and to `∂Ω`.
    pub min_boundary_clearance: f64,
    /// Whether the deformed boundary polygon has no crossing segment pairs.
    pub boundary_simple: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuardTolerances {
    /// Relative to `|Q|`.
    pub gap_tol: f64,
    pub clearance_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GuardDecision {
    Pass,
    Halt(String),
}

/// Boundary nodes of the reference grid in counter-clockwise order.
pub fn boundary_loop(grid: &SolidGrid) -> Vec<usize> {
    let l = &grid.lattice;
    let mut out = Vec::with_capacity(2 * (l.nx + l.ny));
    out.extend((0..l.nx).map(|i| l.node(i, 0)));
    out.extend((1..l.ny).map(|j| l.node(l.nx - 1, j)));
    out.extend((0..l.nx - 1).rev().map(|i| l.node(i, l.ny - 1)));
    out.extend((1..l.ny - 1).rev().map(|j| l.node(0, j)));
    out
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Proper or touching intersection of closed segments `pq` and `rs`.
fn segments_intersect(p: [f64; 2], q: [f64; 2], r: [f64; 2], s: [f64; 2]) -> bool {
    let d1 = cross(r, s, p);
    let d2 = cross(r, s, q);
    let d3 = cross(p, q, r);
    let d4 = cross(p, q, s);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: [f64; 2], b: [f64; 2], c: [f64; 2], d: f64| {
        d == 0.0 && c[0] >= a[0].min(b[0]) && c[0] <= a[0].max(b[0]) && c[1] >= a[1].min(b[1]) && c[1] <= a[1].max(b[1])
    };
    on(r, s, p, d1) || on(r, s, q, d2) || on(p, q, r, d3) || on(p, q, s, d4)
}

fn polygon_is_simple(pts: &[[f64; 2]]) -> bool {
    let n = pts.len();
    for a in 0..n {
        for b in a + 2..n {
            if a == 0 && b == n - 1 {
                continue;
            }
            if segments_intersect(pts[a], pts[(a + 1) % n], pts[b], pts[(b + 1) % n]) {
                return false;
            }
        }
    }
    true
}

fn shoelace(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    0.5 * (0..n)
        .map(|k| {
            let (p, q) = (pts[k], pts[(k + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
}

/// Exact area of a union of polygons by vertical slab decomposition.
pub fn union_area(polys: &[Vec<[f64; 2]>]) -> f64 {
    let edges: Vec<([f64; 2], [f64; 2])> = polys
        .iter()
        .flat_map(|p| (0..p.len()).map(move |k| (p[k], p[(k + 1) % p.len()])))
        .filter(|(a, b)| a[0] != b[0])
        .collect();
    let mut xs: Vec<f64> = polys.iter().flatten().map(|p| p[0]).collect();
    for i in 0..edges.len() {
        for j in i + 1..edges.len() {
            let ((p, q), (r, s)) = (edges[i], edges[j]);
            let d1 = [q[0] - p[0], q[1] - p[1]];
            let d2 = [s[0] - r[0], s[1] - r[1]];
            let rp = [r[0] - p[0], r[1] - p[1]];
            let denom = d1[0] * d2[1] - d1[1] * d2[0];
            if denom == 0.0 {
                continue;
            }
            let t = (rp[0] * d2[1] - rp[1] * d2[0]) / denom;
            let u = (rp[0] * d1[1] - rp[1] * d1[0]) / denom;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
                xs.push(p[0] + t * (q[0] - p[0]));
            }
        }
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.dedup();
    let mut area = 0.0;
    let mut ys: Vec<f64> = Vec::new();
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for w in xs.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        if x1 - x0 <= 0.0 {
            continue;
        }
        let xm = 0.5 * (x0 + x1);
        intervals.clear();
        for poly in polys {
            ys.clear();
            for k in 0..poly.len() {
                let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
                if (a[0] <= xm) != (b[0] <= xm) {
                    ys.push(a[1] + (xm - a[0]) / (b[0] - a[0]) * (b[1] - a[1]));
                }
            }
            ys.sort_by(|a, b| a.total_cmp(b));
            for pair in ys.chunks_exact(2) {
                intervals.push((pair[0], pair[1]));
            }
        }
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut len = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for &(lo, hi) in &intervals {
            match cur {
                Some((c0, c1)) if lo <= c1 => cur = Some((c0, c1.max(hi))),
                Some((c0, c1)) => {
                    len += c1 - c0;
                    cur = Some((lo, hi));
                }
                None => cur = Some((lo, hi)),
            }
        }
        if let Some((c0, c1)) = cur {
            len += c1 - c0;
        }
        area += len * (x1 - x0);
    }
    area
}

fn distance_to_rect(rect: &Rect, p: [f64; 2]) -> f64 {
    if rect.contains(p) {
        rect.distance_to_boundary(p)
    } else {
        0.0
    }
}

/// Computes the Ciarlet–Nečas report. Clearance to `∂Ω` is included only when
/// `container` is given.
pub fn ciarlet_necas_gap(
    grid: &SolidGrid,
    eta: &DeformationField,
    container: Option<&Rect>,
) -> Result<InjectivityReport> {
    check_len(grid.num_nodes(), eta.values.len())?;
    let lat = &grid.lattice;
    let g = grid.grad.apply(&eta.flat());
    let w = lat.cell_area();
    let det_integral: f64 = (0..lat.num_cells()).map(|c| w * cell_matrix(&g, c).determinant()).sum();

    let ring = boundary_loop(grid);
    let pts: Vec<[f64; 2]> = ring.iter().map(|&n| eta.values[n]).collect();
    let boundary_simple = polygon_is_simple(&pts);
    let deformed_area = if boundary_simple {
        shoelace(&pts).abs()
    } else {
        let quads: Vec<Vec<[f64; 2]>> = (0..lat.num_cells())
            .map(|c| {
                let [a, b, cc, d] = lat.cell_corners(c);
                vec![eta.values[a], eta.values[b], eta.values[d], eta.values[cc]]
            })
            .collect();
        union_area(&quads)
    };

    // free boundary segments: at least one endpoint off the Dirichlet set
    let m = ring.len();
    let seg_len = lat.dx.max(lat.dy);
    let free: Vec<([f64; 2], [f64; 2])> = (0..m)
        .filter(|&k| !(grid.is_dirichlet(ring[k]) && grid.is_dirichlet(ring[(k + 1) % m])))
        .map(|k| {
            let (a, b) = (ring[k], ring[(k + 1) % m]);
            let (ra, rb) = (lat.coords(a), lat.coords(b));
            let (pa, pb) = (eta.values[a], eta.values[b]);
            (
                [0.5 * (ra[0] + rb[0]), 0.5 * (ra[1] + rb[1])],
                [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])],
            )
        })
        .collect();
    let mut clearance = f64::INFINITY;
    if let Some(rect) = container {
        for (_, p) in &free {
            clearance = clearance.min(distance_to_rect(rect, *p));
        }
    }
    for i in 0..free.len() {
        for j in i + 1..free.len() {
            let (ri, pi) = free[i];
            let (rj, pj) = free[j];
            if (ri[0] - rj[0]).hypot(ri[1] - rj[1]) < 4.0 * seg_len {
                continue;
            }
            clearance = clearance.min((pi[0] - pj[0]).hypot(pi[1] - pj[1]));
        }
    }
    Ok(InjectivityReport {
        deformed_area,
        det_integral,
        gap: (deformed_area - det_integral).abs(),
        min_boundary_clearance: clearance,
        boundary_simple,
    })
}

pub fn collision_guard(report: &InjectivityReport, tol: &GuardTolerances, reference_area: f64) -> GuardDecision {
    if !report.boundary_simple {
        return GuardDecision::Halt("deformed boundary intersects itself".into());
    }
    if report.gap > tol.gap_tol * reference_area {
        return GuardDecision::Halt(format!(
            "Ciarlet-Necas gap {:.3e} exceeds {:.3e}",
            report.gap,
            tol.gap_tol * reference_area
        ));
    }
    if report.min_boundary_clearance < tol.clearance_tol {
        return GuardDecision::Halt(format!(
            "boundary clearance {:.3e} below {:.3e}",
            report.min_boundary_clearance, tol.clearance_tol
        ));
    }
    GuardDecision::Pass
}

/// Runs the guard over a sequence of states; returns the first index it halts on.
pub fn first_guard_halt(
    grid: &SolidGrid,
    states: &[DeformationField],
    container: Option<&Rect>,
    tol: &GuardTolerances,
) -> Result<Option<(usize, String)>> {
    for (k, eta) in states.iter().enumerate() {
        let rep = ciarlet_necas_gap(grid, eta, container)?;
        if let GuardDecision::Halt(why) = collision_guard(&rep, tol, grid.area()) {
            return Ok(Some((k, why)));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Lattice;

    fn grid(n: usize) -> SolidGrid {
        SolidGrid::new(Lattice::new(n, n, Rect::new(0.0, 0.0, 1.0, 1.0)).unwrap(), vec![]).unwrap()
    }

    #[test]
    fn identity_and_affine_have_zero_gap() {
        let g = grid(6);
        let id = ciarlet_necas_gap(&g, &DeformationField::identity(&g), None).unwrap();
        assert!(id.gap < 1e-15 && id.boundary_simple);
        assert!((id.det_integral - 1.0).abs() < 1e-15);
        let eta = DeformationField::from_fn(&g, |x| [1.3 * x[0] + 0.4 * x[1] - 2.0, -0.2 * x[0] + 0.8 * x[1]]);
        let r = ciarlet_necas_gap(&g, &eta, None).unwrap();
        assert!(r.gap < 1e-14);
        assert!((r.deformed_area - (1.3 * 0.8 + 0.4 * 0.2)).abs() < 1e-14);
    }

    #[test]
    fn union_of_overlapping_squares() {
        let sq = |x: f64, y: f64| vec![[x, y], [x + 1.0, y], [x + 1.0, y + 1.0], [x, y + 1.0]];
        let a = union_area(&[sq(0.0, 0.0), sq(0.5, 0.5)]);
        assert!((a - 1.75).abs() < 1e-14);
        let tri = vec![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]];
        assert!((union_area(&[tri.clone(), tri]) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn polar_wrap_overlap_is_detected() {
        let g = grid(41);
        let (r0, th) = (1.0, 2.0 * std::f64::consts::PI + 1.0);
        let eta = DeformationField::from_fn(&g, |x| {
            let rad = r0 + x[1];
            [rad * (th * x[0]).cos(), -rad * (th * x[0]).sin()]
        });
        let rep = ciarlet_necas_gap(&g, &eta, None).unwrap();
        let overlap = 0.5 * (th - 2.0 * std::f64::consts::PI) * ((r0 + 1.0).powi(2) - r0 * r0);
        assert!(!rep.boundary_simple);
        assert!(
            rep.gap > 0.9 * overlap && rep.gap < 1.1 * overlap,
            "gap {} vs {}",
            rep.gap,
            overlap
        );
    }

    #[test]
    fn guard_thresholds() {
        let g = grid(5);
        let omega = Rect::new(-1.0, -1.0, 2.0, 2.0);
        let tol = GuardTolerances {
            gap_tol: 1e-6,
            clearance_tol: 0.1,
        };
        let rep = ciarlet_necas_gap(&g, &DeformationField::identity(&g), Some(&omega)).unwrap();
        assert!((rep.min_boundary_clearance - 1.0).abs() < 1e-14);
        assert_eq!(collision_guard(&rep, &tol, 1.0), GuardDecision::Pass);
        let near = DeformationField::from_fn(&g, |x| [x[0] + 0.95, x[1]]);
        let rep = ciarlet_necas_gap(&g, &near, Some(&omega)).unwrap();
        assert!(matches!(collision_guard(&rep, &tol, 1.0), GuardDecision::Halt(_)));
    }

    #[test]
    fn gap_is_rigid_motion_invariant() {
        let g = grid(7);
        let eta = DeformationField::from_fn(&g, |x| [x[0] + 0.1 * (x[1] * 3.0).sin(), x[1] + 0.05 * x[0] * x[0]]);
        let a = ciarlet_necas_gap(&g, &eta, None).unwrap();
        let (c, s) = (1.1f64.cos(), 1.1f64.sin());
        let moved = DeformationField {
            values: eta
                .values
                .iter()
                .map(|v| [c * v[0] - s * v[1] + 5.0, s * v[0] + c * v[1] - 2.0])
                .collect(),
        };
        let b = ciarlet_necas_gap(&g, &moved, None).unwrap();
        assert!((a.gap - b.gap).abs() < 1e-12);
        assert!((a.det_integral - b.det_integral).abs() < 1e-12);
    }
}

//! Sparse linear operators and a banded Cholesky factorization.
//!
//! Every discrete differential operator in the crate is stored as a
//! [`SparseOp`], so that a quadratic term `½ Σ_r w_r (L x)_r²` and its
//! gradient `Lᵀ W L x` always share one stencil definition.

/// Row-compressed sparse matrix acting on flat `f64` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp {
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseOp {
    pub fn new(ncols: usize) -> Self {
        SparseOp {
            ncols,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Appends a row; repeated columns are summed.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        let start = self.cols.len();
        for &(c, v) in entries {
            debug_assert!(c < self.ncols, "column {c} out of range {}", self.ncols);
            if let Some(k) = self.cols[start..].iter().position(|&x| x == c) {
                self.vals[start + k] += v;
            } else {
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        (0..self.nrows())
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `y += scale · Lᵀ z`.
    pub fn apply_transpose_add(&self, z: &[f64], scale: f64, y: &mut [f64]) {
        debug_assert_eq!(z.len(), self.nrows());
        debug_assert_eq!(y.len(), self.ncols);
        for (r, &zr) in z.iter().enumerate() {
            if zr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                y[c] += scale * v * zr;
            }
        }
    }

    pub fn apply_transpose(&self, z: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.apply_transpose_add(z, 1.0, &mut y);
        y
    }

    /// Matrix product `self · inner` (apply `inner` first).
    pub fn compose(&self, inner: &SparseOp) -> SparseOp {
        assert_eq!(self.ncols, inner.nrows(), "operator composition shape mismatch");
        let mut out = SparseOp::new(inner.ncols);
        let mut acc = vec![0.0; inner.ncols];
        let mut seen = vec![false; inner.ncols];
        let mut touched: Vec<usize> = Vec::new();
        for r in 0..self.nrows() {
            for (k, a) in self.row(r) {
                for (c, b) in inner.row(k) {
                    if !seen[c] {
                        seen[c] = true;
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            touched.sort_unstable();
            let entries: Vec<(usize, f64)> = touched.iter().map(|&c| (c, acc[c])).collect();
            out.push_row(&entries);
            for &c in &touched {
                acc[c] = 0.0;
                seen[c] = false;
            }
            touched.clear();
        }
        out
    }

    /// Weighted squared norm `Σ_r w_r (L x)_r²`.
    pub fn weighted_norm_sq(&self, x: &[f64], weights: &[f64]) -> f64 {
        debug_assert_eq!(weights.len(), self.nrows());
        (0..self.nrows())
            .map(|r| {
                let lx: f64 = self.row(r).map(|(c, v)| v * x[c]).sum();
                weights[r] * lx * lx
            })
            .sum()
    }

    /// `Lᵀ W L x`, the gradient of `½ Σ w_r (L x)_r²`.
    pub fn weighted_normal(&self, x: &[f64], weights: &[f64]) -> Vec<f64> {
        let mut lx = self.apply(x);
        for (v, w) in lx.iter_mut().zip(weights) {
            *v *= w;
        }
        self.apply_transpose(&lx)
    }

    /// Adds `scale · Lᵀ W L` restricted to the columns mapped by `dof`
    /// (`dof[c] = None` drops the column) into `band`.
    pub fn accumulate_gram(&self, weights: Option<&[f64]>, scale: f64, dof: &[Option<usize>], band: &mut BandedSpd) {
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for r in 0..self.nrows() {
            let w = weights.map_or(1.0, |w| w[r]) * scale;
            if w == 0.0 {
                continue;
            }
            entries.clear();
            entries.extend(self.row(r).filter_map(|(c, v)| dof[c].map(|d| (d, v))));
            for &(i, vi) in &entries {
                for &(j, vj) in &entries {
                    if j <= i {
                        band.add(i, j, w * vi * vj);
                    }
                }
            }
        }
    }

    /// Largest `|i − j|` among DOF pairs coupled through a common row.
    pub fn gram_bandwidth(&self, dof: &[Option<usize>]) -> usize {
        let mut bw = 0;
        for r in 0..self.nrows() {
            let (mut lo, mut hi) = (usize::MAX, 0usize);
            for (c, _) in self.row(r) {
                if let Some(d) = dof[c] {
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
            }
            if lo != usize::MAX {
                bw = bw.max(hi - lo);
            }
        }
        bw
    }
}

/// Symmetric positive definite matrix in lower band storage.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    // data[i * (bw + 1) + (i - j)] holds A[i][j] for i - bw <= j <= i
    data: Vec<f64>,
    factored: bool,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandedSpd {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
            factored: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Adds to the lower-triangle entry `(i, j)`, `j <= i`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && i - j <= self.bw, "entry ({i},{j}) outside band {}", self.bw);
        self.data[i * (self.bw + 1) + (i - j)] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[i * (self.bw + 1) + (i - j)]
        }
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).fold(0.0, f64::max)
    }

    pub fn shift_diagonal(&mut self, s: f64) {
        for i in 0..self.n {
            self.add(i, i, s);
        }
    }

    /// In-place Cholesky `A = L Lᵀ`. Returns the first non-positive pivot on failure.
    pub fn factor(&mut self) -> Result<(), usize> {
        let w = self.bw + 1;
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            for j in j0..=i {
                let mut s = self.data[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(self.bw));
                for k in k0..j {
                    s -= self.data[i * w + (i - k)] * self.data[j * w + (j - k)];
                }
                if j == i {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(i);
                    }
                    self.data[i * w] = s.sqrt();
                } else {
                    self.data[i * w + (i - j)] = s / self.data[j * w];
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solves `A x = b` with a factored matrix.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert!(self.factored, "solve called before factor");
        let w = self.bw + 1;
        let mut y = b.to_vec();
        for i in 0..self.n {
            let mut s = y[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.data[i * w + (i - k)] * y[k];
            }
            y[i] = s / self.data[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for k in (i + 1)..(i + 1 + self.bw).min(self.n) {
                s -= self.data[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.data[i * w];
        }
        y
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_matches_sequential_application() {
        let mut a = SparseOp::new(3);
        a.push_row(&[(0, 1.0), (2, -2.0)]);
        a.push_row(&[(1, 3.0)]);
        let mut b = SparseOp::new(2);
        b.push_row(&[(0, 1.0)]);
        b.push_row(&[(0, 0.5), (1, 0.5)]);
        b.push_row(&[(1, 4.0)]);
        let ab = a.compose(&b);
        let x = [0.3, -1.7];
        assert_eq!(ab.apply(&x), a.apply(&b.apply(&x)));
    }

    #[test]
    fn banded_cholesky_solves_tridiagonal() {
        let n = 6;
        let mut m = BandedSpd::zeros(n, 1);
        for i in 0..n {
            m.add(i, i, 2.0);
            if i > 0 {
                m.add(i, i - 1, -1.0);
            }
        }
        let x: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
        let b: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = 2.0 * x[i];
                if i > 0 {
                    s -= x[i - 1];
                }
                if i + 1 < n {
                    s -= x[i + 1];
                }
                s
            })
            .collect();
        m.factor().unwrap();
        let sol = m.solve(&b);
        for (s, e) in sol.iter().zip(&x) {
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_matches_normal_operator() {
        let mut l = SparseOp::new(4);
        l.push_row(&[(0, 1.0), (1, -1.0)]);
        l.push_row(&[(1, 2.0), (3, 1.0)]);
        l.push_row(&[(2, 1.0), (3, -0.5)]);
        l.push_row(&[(0, 0.25), (2, 1.0)]);
        let w = [1.0, 0.5, 2.0, 1.5];
        let dof: Vec<Option<usize>> = (0..4).map(Some).collect();
        let mut band = BandedSpd::zeros(4, l.gram_bandwidth(&dof));
        l.accumulate_gram(Some(&w), 1.0, &dof, &mut band);
        let x = [0.1, -0.4, 0.7, 1.3];
        let direct = l.weighted_normal(&x, &w);
        for i in 0..4 {
            let bx: f64 = (0..4).map(|j| band.get(i, j) * x[j]).sum();
            assert!((bx - direct[i]).abs() < 1e-14);
        }
    }
}

//! A unit-mass particle `ẍ = −∇E(x)` in `ℝⁿ`: the naive backward-Euler
//! minimization, the two-scale time-delayed scheme, the window estimate check
//! and an adaptive Dormand–Prince reference.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyEnergy {
    /// `E = 0`.
    Zero,
    /// `E = ½|x|²`.
    Quadratic,
    /// `E = (|x|² − 1)²`.
    DoubleWell,
}

impl ToyEnergy {
    pub fn is_convex(self) -> bool {
        !matches!(self, ToyEnergy::DoubleWell)
    }

    pub fn value(self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        match self {
            ToyEnergy::Zero => 0.0,
            ToyEnergy::Quadratic => 0.5 * r2,
            ToyEnergy::DoubleWell => (r2 - 1.0).powi(2),
        }
    }

    pub fn gradient(self, x: &[f64]) -> Vec<f64> {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        match self {
            ToyEnergy::Zero => vec![0.0; x.len()],
            ToyEnergy::Quadratic => x.to_vec(),
            ToyEnergy::DoubleWell => x.iter().map(|v| 4.0 * (r2 - 1.0) * v).collect(),
        }
    }

    pub fn hessian(self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let r2: f64 = x.iter().map(|v| v * v).sum();
        match self {
            ToyEnergy::Zero => DMatrix::zeros(n, n),
            ToyEnergy::Quadratic => DMatrix::identity(n, n),
            ToyEnergy::DoubleWell => {
                let v = DVector::from_column_slice(x);
                DMatrix::identity(n, n) * (4.0 * (r2 - 1.0)) + &v * v.transpose() * 8.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    /// Difference quotients `(x_k − x_{k−1})/τ`; the first entry is the initial velocity.
    pub velocities: Vec<Vec<f64>>,
    /// `E(x_k) + ½|rate_k|²`.
    pub energies: Vec<f64>,
    /// Steps whose inner solve did not reach tolerance.
    pub unconverged_steps: Vec<usize>,
}

impl ToyTrajectory {
    fn start(e: ToyEnergy, x0: &[f64], xstar: &[f64]) -> Self {
        ToyTrajectory {
            times: vec![0.0],
            positions: vec![x0.to_vec()],
            velocities: vec![xstar.to_vec()],
            energies: vec![e.value(x0) + 0.5 * sq(xstar)],
            unconverged_steps: vec![],
        }
    }

    fn push(&mut self, e: ToyEnergy, t: f64, x: Vec<f64>, r: Vec<f64>) {
        self.energies.push(e.value(&x) + 0.5 * sq(&r));
        self.times.push(t);
        self.positions.push(x);
        self.velocities.push(r);
    }

    /// Position at `t` by linear interpolation between stored steps.
    pub fn position_at(&self, t: f64) -> Vec<f64> {
        let i = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1);
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let s = if t1 > t0 {
            ((t - t0) / (t1 - t0)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.positions[i - 1]
            .iter()
            .zip(&self.positions[i])
            .map(|(a, b)| a + s * (b - a))
            .collect()
    }
}

fn sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Minimizes `E(x) + c/2 |x − y|²` from `start` by damped Newton; returns
/// the minimizer and whether the stationarity tolerance was met.
fn minimize_step(e: ToyEnergy, c: f64, y: &[f64], start: &[f64]) -> (Vec<f64>, bool) {
    let n = y.len();
    let g_of = |x: &[f64]| e.value(x) + 0.5 * c * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let grad_of = |x: &[f64]| -> DVector<f64> {
        let ge = e.gradient(x);
        DVector::from_iterator(n, (0..n).map(|i| ge[i] + c * (x[i] - y[i])))
    };
    let mut x = start.to_vec();
    let mut gx = g_of(&x);
    for _ in 0..200 {
        let g = grad_of(&x);
        let scale = c * (1.0 + sq(&x).sqrt());
        if g.norm() <= 1e-14 * scale {
            return (x, true);
        }
        let hess = e.hessian(&x) + DMatrix::identity(n, n) * c;
        let dir = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&g),
            None => -&g / c,
        };
        let slope = g.dot(&dir);
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-20 {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
            let gt = g_of(&trial);
            if gt <= gx + 1e-4 * alpha * slope {
                let moved = trial.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                x = trial;
                gx = gt;
                accepted = true;
                if moved <= 1e-16 * (1.0 + sq(&x).sqrt()) {
                    return (x, true);
                }
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no representable decrease: accept if stationary to roundoff
            return (x.clone(), grad_of(&x).norm() <= 1e-10 * scale);
        }
    }
    let ok = grad_of(&x).norm() <= 1e-10 * c * (1.0 + sq(&x).sqrt());
    (x, ok)
}

/// Backward Euler: `0 = ∇E(x_{k+1}) + (rate_{k+1} − rate_k)/τ`, solved as the
/// minimization of `E(x) + |x − x_k − τ rate_k|² / (2τ²)`.
pub fn naive_scheme(e: ToyEnergy, x0: &[f64], xstar: &[f64], tau: f64, horizon: f64) -> Result<ToyTrajectory> {
    check_toy(x0, xstar, tau, horizon)?;
    let steps = (horizon / tau - 1e-9).ceil() as usize;
    let mut traj = ToyTrajectory::start(e, x0, xstar);
    let (mut x, mut r) = (x0.to_vec(), xstar.to_vec());
    let c = 1.0 / (tau * tau);
    for k in 0..steps {
        let y: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a + tau * b).collect();
        let (x1, ok) = minimize_step(e, c, &y, &x);
        if !ok {
            traj.unconverged_steps.push(k);
        }
        r = x1.iter().zip(&x).map(|(a, b)| (a - b) / tau).collect();
        x = x1;
        traj.push(e, (k + 1) as f64 * tau, x.clone(), r.clone());
    }
    Ok(traj)
}

fn check_toy(x0: &[f64], xstar: &[f64], tau: f64, horizon: f64) -> Result<()> {
    let mut errs = vec![];
    if x0.len() != xstar.len() || x0.is_empty() {
        errs.push(format!(
            "x0 and x* must have the same positive dimension ({} vs {})",
            x0.len(),
            xstar.len()
        ));
    }
    if !(tau > 0.0) {
        errs.push(format!("tau = {tau} must be positive"));
    }
    if !(horizon > 0.0) {
        errs.push(format!("T = {horizon} must be positive"));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

/// Steps per window `h/τ`, rejecting non-integer ratios.
pub fn steps_per_window(tau: f64, h: f64) -> Result<usize> {
    let n = (h / tau).round();
    if n < 1.0 || (n * tau - h).abs() > 1e-9 * h {
        return Err(Error::Config(vec![format!(
            "h/tau = {} must be a positive integer",
            h / tau
        )]));
    }
    Ok(n as usize)
}

/// The two-scale scheme: per window, `x_{k+1}` minimizes
/// `E(x) + τ/(2h) |(x − x_k)/τ − ζ_k|²` with `ζ` the previous window's rates
/// (`ζ ≡ x*` on the first window). Runs whole windows until `T` is covered.
pub fn two_scale_scheme(
    e: ToyEnergy,
    x0: &[f64],
    xstar: &[f64],
    tau: f64,
    h: f64,
    horizon: f64,
) -> Result<ToyTrajectory> {
    check_toy(x0, xstar, tau, horizon)?;
    let n = steps_per_window(tau, h)?;
    let windows = (horizon / h - 1e-9).ceil() as usize;
    let mut traj = ToyTrajectory::start(e, x0, xstar);
    let mut zeta = vec![xstar.to_vec(); n];
    let mut x = x0.to_vec();
    let c = 1.0 / (tau * h);
    for m in 0..windows {
        let mut rates = Vec::with_capacity(n);
        for (k, z) in zeta.iter().enumerate() {
            let y: Vec<f64> = x.iter().zip(z).map(|(a, b)| a + tau * b).collect();
            let (x1, ok) = minimize_step(e, c, &y, &x);
            let step = m * n + k;
            if !ok {
                traj.unconverged_steps.push(step);
            }
            let r: Vec<f64> = x1.iter().zip(&x).map(|(a, b)| (a - b) / tau).collect();
            x = x1;
            traj.push(e, (step + 1) as f64 * tau, x.clone(), r.clone());
            rates.push(r);
        }
        zeta = rates;
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPairCheck {
    pub a: usize,
    pub b: usize,
    /// `E(x(b)) − E(x(a)) + ½ avg_b |rate|² − ½ avg_a |rate|²`; must be ≤ `slack`.
    pub excess: f64,
    pub slack: f64,
}

impl WindowPairCheck {
    pub fn holds(&self) -> bool {
        self.excess <= self.slack
    }
}

/// Window-average kinetic terms `½ avg_{[mh−h, mh]} |rate|²` for `m = 0..`,
/// with the initial velocity standing in for the window before `0`.
fn window_kinetic(traj: &ToyTrajectory, n: usize) -> Vec<f64> {
    let windows = (traj.times.len() - 1) / n;
    let mut out = vec![0.5 * sq(&traj.velocities[0])];
    for m in 0..windows {
        let s: f64 = (1..=n).map(|k| sq(&traj.velocities[m * n + k])).sum();
        out.push(0.5 * s / n as f64);
    }
    out
}

/// Checks `E(x(b)) − E(x(a)) ≤ −½ avg_{[b−h,b]}|rate|² + ½ avg_{[a−h,a]}|rate|²`
/// for all window boundaries `a < b`.
pub fn hyperbolic_estimate_check(traj: &ToyTrajectory, e: ToyEnergy, tau: f64, h: f64) -> Result<Vec<WindowPairCheck>> {
    let n = steps_per_window(tau, h)?;
    let kin = window_kinetic(traj, n);
    let pot: Vec<f64> = (0..kin.len()).map(|m| e.value(&traj.positions[m * n])).collect();
    let mut out = Vec::new();
    for a in 0..kin.len() {
        for b in a + 1..kin.len() {
            let scale = 1.0 + pot[a].abs() + kin[a];
            out.push(WindowPairCheck {
                a,
                b,
                excess: pot[b] - pot[a] + kin[b] - kin[a],
                slack: ((b - a) * n) as f64 * 1e-12 * scale,
            });
        }
    }
    Ok(out)
}

/// `sup_t E(x(t))` over the stored steps.
pub fn sup_energy(traj: &ToyTrajectory, e: ToyEnergy) -> f64 {
    traj.positions
        .iter()
        .map(|x| e.value(x))
        .fold(f64::NEG_INFINITY, f64::max)
}

// Dormand–Prince 5(4) tableau
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn rhs(e: ToyEnergy, y: &[f64]) -> Vec<f64> {
    let n = y.len() / 2;
    let g = e.gradient(&y[..n]);
    y[n..].iter().copied().chain(g.iter().map(|v| -v)).collect()
}

/// Adaptive Dormand–Prince integration of `ẍ = −∇E(x)`, landing exactly on
/// each of `outputs` (ascending, may be negative for backward integration
/// as long as all share a sign). Returns `(x, ẋ)` at each output time.
pub fn reference_at(
    e: ToyEnergy,
    x0: &[f64],
    xstar: &[f64],
    outputs: &[f64],
    tol: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let d = x0.len();
    let mut y: Vec<f64> = x0.iter().chain(xstar).copied().collect();
    let mut t = 0.0f64;
    let mut dt = tol.powf(0.2) * 0.1;
    let mut out = Vec::with_capacity(outputs.len());
    for &target in outputs {
        let dir = if target >= t { 1.0 } else { -1.0 };
        while (target - t) * dir > 0.0 {
            let step = dt.min((target - t).abs());
            if step < 1e-14 * (1.0 + t.abs()) && (target - t).abs() > step {
                return Err(Error::Solver(format!("reference integrator step underflow at t = {t}")));
            }
            let hs = dir * step;
            let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
            for s in 0..7 {
                let ys: Vec<f64> = (0..2 * d)
                    .map(|i| y[i] + hs * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>())
                    .collect();
                k.push(rhs(e, &ys));
            }
            let y5: Vec<f64> = (0..2 * d)
                .map(|i| y[i] + hs * (0..7).map(|s| B5[s] * k[s][i]).sum::<f64>())
                .collect();
            let err = (0..2 * d)
                .map(|i| {
                    let e4 = hs * (0..7).map(|s| (B5[s] - B4[s]) * k[s][i]).sum::<f64>();
                    let sc = tol * (1.0 + y[i].abs().max(y5[i].abs()));
                    (e4 / sc).powi(2)
                })
                .sum::<f64>()
                / (2 * d) as f64;
            let err = err.sqrt();
            if err <= 1.0 {
                t += hs;
                if (target - t).abs() <= 1e-15 * (1.0 + target.abs()) {
                    t = target;
                }
                y = y5;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            dt = step * factor;
            if dt < 1e-14 * (1.0 + t.abs()) {
                return Err(Error::Solver(format!("reference integrator step underflow at t = {t}")));
            }
        }
        out.push((y[..d].to_vec(), y[d..].to_vec()));
    }
    Ok(out)
}

/// Reference trajectory on the uniform grid `t_k = k·T/samples`.
pub fn reference_integrate(e: ToyEnergy, x0: &[f64], xstar: &[f64], horizon: f64, tol: f64) -> Result<ToyTrajectory> {
    check_toy(x0, xstar, 1.0, horizon)?;
    let samples = 1000usize;
    let times: Vec<f64> = (1..=samples).map(|k| horizon * k as f64 / samples as f64).collect();
    let states = reference_at(e, x0, xstar, &times, tol)?;
    let mut traj = ToyTrajectory::start(e, x0, xstar);
    for (t, (x, v)) in times.into_iter().zip(states) {
        traj.push(e, t, x, v);
    }
    Ok(traj)
}

/// `sup_k |x_k − x_ref(t_k)|` over the steps of `traj` with `t_k ≤ T`.
pub fn sup_error_against_reference(traj: &ToyTrajectory, e: ToyEnergy, horizon: f64, tol: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..traj.times.len())
        .filter(|&k| traj.times[k] <= horizon + 1e-12)
        .collect();
    let times: Vec<f64> = idx.iter().map(|&k| traj.times[k]).collect();
    let reference = reference_at(e, &traj.positions[0], &traj.velocities[0], &times, tol)?;
    Ok(idx
        .iter()
        .zip(&reference)
        .map(|(&k, (x, _))| sq(&traj.positions[k].iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt())
        .fold(0.0, f64::max))
}

/// A double-well instance on which the naive scheme gains energy.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveFailure {
    pub seed: u64,
    /// 1-based index of the successful draw.
    pub attempt: usize,
    pub x0: Vec<f64>,
    pub xstar: Vec<f64>,
    pub tau: f64,
    pub horizon: f64,
    /// Step `k` with `energy[k+1] > energy[k]`.
    pub step: usize,
    pub increase: f64,
}

/// One refinement level of [`hyperbolic_scan`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanLevel {
    pub h: f64,
    pub tau: f64,
    pub pairs: usize,
    pub failed_pairs: usize,
    pub sup_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperbolicScan {
    pub levels: Vec<ScanLevel>,
}

impl HyperbolicScan {
    /// Largest relative increase of `sup_t E` from one level to the next.
    pub fn max_sup_growth(&self) -> f64 {
        self.levels
            .windows(2)
            .map(|w| (w[1].sup_energy - w[0].sup_energy) / w[0].sup_energy.abs().max(1e-300))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Every pair holds and `sup_t E` grows by at most `growth_tol` between levels.
    pub fn satisfied(&self, growth_tol: f64) -> bool {
        self.levels.iter().all(|l| l.failed_pairs == 0) && self.max_sup_growth() <= growth_tol
    }
}

pub const SUP_GROWTH_TOL: f64 = 0.01;

/// Runs the two-scale scheme with `τ = h²` at each `h` and checks the window
/// estimate and the growth of `sup_t E`. Levels run in parallel.
pub fn hyperbolic_scan(e: ToyEnergy, x0: &[f64], xstar: &[f64], hs: &[f64], horizon: f64) -> Result<HyperbolicScan> {
    let levels = crate::study::parallel_map(hs, |&h| -> Result<ScanLevel> {
        let tau = h * h;
        let traj = two_scale_scheme(e, x0, xstar, tau, h, horizon)?;
        let checks = hyperbolic_estimate_check(&traj, e, tau, h)?;
        Ok(ScanLevel {
            h,
            tau,
            pairs: checks.len(),
            failed_pairs: checks.iter().filter(|c| !c.holds()).count(),
            sup_energy: sup_energy(&traj, e),
        })
    });
    Ok(HyperbolicScan {
        levels: levels.into_iter().collect::<Result<_>>()?,
    })
}

/// Draws initial data from a seeded generator until the naive scheme on the
/// double well shows an increase of `E + ½|rate|²` larger than `min_increase`
/// while the two-scale scheme on the same data passes [`hyperbolic_scan`]
/// at `hs`.
pub fn search_naive_failure(
    seed: u64,
    tau: f64,
    horizon: f64,
    hs: &[f64],
    max_attempts: usize,
    min_increase: f64,
) -> Result<Option<NaiveFailure>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = ToyEnergy::DoubleWell;
    for attempt in 1..=max_attempts {
        let x0 = vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
        let xstar = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let traj = naive_scheme(e, &x0, &xstar, tau, horizon)?;
        let Some((step, increase)) = largest_energy_increase(&traj) else {
            continue;
        };
        if increase <= min_increase || !hyperbolic_scan(e, &x0, &xstar, hs, horizon)?.satisfied(SUP_GROWTH_TOL) {
            continue;
        }
        return Ok(Some(NaiveFailure {
            seed,
            attempt,
            x0,
            xstar,
            tau,
            horizon,
            step,
            increase,
        }));
    }
    Ok(None)
}

/// The step with the largest increase of the discrete energy, if any step increases it.
pub fn largest_energy_increase(traj: &ToyTrajectory) -> Option<(usize, f64)> {
    traj.energies
        .windows(2)
        .enumerate()
        .map(|(k, w)| (k, w[1] - w[0]))
        .filter(|&(_, d)| d > 0.0)
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

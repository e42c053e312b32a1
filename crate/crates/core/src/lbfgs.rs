//! Preconditioned limited-memory BFGS with a strong-Wolfe line search.
//!
//! Objectives may return `None` (the `+∞` barrier value); the line search
//! treats such trial points as too long and shrinks the step.

use std::collections::VecDeque;

use crate::linalg::{dot, norm};

pub trait Objective {
    /// Value at `x`, writing the gradient into `grad`; `None` means `+∞`.
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> Option<f64>;

    /// Approximate inverse Hessian applied to `g`.
    fn precondition(&self, g: &[f64]) -> Vec<f64> {
        g.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    /// Stop when `‖g‖₂ / √n ≤ gtol`.
    pub gtol: f64,
    /// Stop when `f_prev − f ≤ ftol · max(1, |f|)`.
    pub ftol: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            gtol: 1e-8,
            ftol: 1e-12,
            max_iter: 500,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Gradient,
    Decrease,
    LineSearch,
    Budget,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub rejections: usize,
    pub reason: StopReason,
}

struct Counters {
    evaluations: usize,
    rejections: usize,
}

struct Trial {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

fn scaled_norm(g: &[f64]) -> f64 {
    norm(g) / (g.len().max(1) as f64).sqrt()
}

fn try_point<O: Objective>(obj: &mut O, x: &[f64], d: &[f64], alpha: f64, c: &mut Counters) -> Option<Trial> {
    let xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
    let mut g = vec![0.0; x.len()];
    c.evaluations += 1;
    match obj.eval(&xa, &mut g) {
        Some(f) if f.is_finite() => Some(Trial { alpha, x: xa, f, g }),
        _ => {
            c.rejections += 1;
            None
        }
    }
}

fn interpolate(lo: f64, flo: f64, dlo: f64, hi: f64, fhi: f64) -> f64 {
    let span = hi - lo;
    let denom = 2.0 * (fhi - flo - dlo * span);
    let mut a = if denom.abs() > 0.0 {
        lo - dlo * span * span / denom
    } else {
        f64::NAN
    };
    let (a_min, a_max) = (lo.min(hi), lo.max(hi));
    let margin = 0.1 * (a_max - a_min);
    if !a.is_finite() || a < a_min + margin || a > a_max - margin {
        a = 0.5 * (lo + hi);
    }
    a
}

/// Strong-Wolfe line search; falls back to the best Armijo point if the
/// curvature condition cannot be met within the budget.
fn line_search<O: Objective>(
    obj: &mut O,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    opts: &LbfgsOptions,
    c: &mut Counters,
) -> Option<Trial> {
    let dphi0 = dot(g0, d);
    let armijo = |t: &Trial| t.f <= f0 + opts.c1 * t.alpha * dphi0;
    let mut best: Option<Trial> = None;
    let keep_best = |best: &mut Option<Trial>, t: &Trial| {
        if armijo(t) && best.as_ref().is_none_or(|b| t.f < b.f) {
            *best = Some(Trial {
                alpha: t.alpha,
                x: t.x.clone(),
                f: t.f,
                g: t.g.clone(),
            });
        }
    };

    // bracketing phase
    let (mut a_prev, mut f_prev, mut d_prev) = (0.0, f0, dphi0);
    let mut a = 1.0;
    let mut bracket: Option<(f64, f64, f64, f64, f64)> = None; // (lo, flo, dlo, hi, fhi)
    let mut budget = opts.max_line_search;
    while budget > 0 {
        budget -= 1;
        let Some(t) = try_point(obj, x, d, a, c) else {
            a = a_prev + 0.25 * (a - a_prev);
            continue;
        };
        keep_best(&mut best, &t);
        let da = dot(&t.g, d);
        if !armijo(&t) || (a_prev > 0.0 && t.f >= f_prev) {
            bracket = Some((a_prev, f_prev, d_prev, a, t.f));
            break;
        }
        if da.abs() <= -opts.c2 * dphi0 {
            return Some(t);
        }
        if da >= 0.0 {
            bracket = Some((a, t.f, da, a_prev, f_prev));
            break;
        }
        a_prev = a;
        f_prev = t.f;
        d_prev = da;
        a *= 2.0;
    }

    // zoom phase
    if let Some((mut lo, mut flo, mut dlo, mut hi, mut fhi)) = bracket {
        while budget > 0 {
            budget -= 1;
            let a = interpolate(lo, flo, dlo, hi, fhi);
            if (hi - lo).abs() <= 1e-16 * lo.abs().max(1.0) {
                break;
            }
            let Some(t) = try_point(obj, x, d, a, c) else {
                hi = a;
                fhi = f64::INFINITY;
                continue;
            };
            keep_best(&mut best, &t);
            let da = dot(&t.g, d);
            if !armijo(&t) || t.f >= flo {
                hi = a;
                fhi = t.f;
            } else {
                if da.abs() <= -opts.c2 * dphi0 {
                    return Some(t);
                }
                if da * (hi - lo) >= 0.0 {
                    hi = lo;
                    fhi = flo;
                }
                lo = a;
                flo = t.f;
                dlo = da;
            }
        }
    }
    best
}

/// Minimizes `obj` from `x0`, which must have a finite value.
pub fn minimize<O: Objective>(obj: &mut O, x0: Vec<f64>, opts: &LbfgsOptions) -> Option<LbfgsResult> {
    let n = x0.len();
    let mut c = Counters {
        evaluations: 1,
        rejections: 0,
    };
    let mut g = vec![0.0; n];
    let mut f = obj.eval(&x0, &mut g)?;
    let initial_value = f;
    let mut x = x0;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut reason = StopReason::Budget;
    let mut iterations = 0;

    if scaled_norm(&g) <= opts.gtol {
        reason = StopReason::Gradient;
    } else {
        while iterations < opts.max_iter {
            iterations += 1;
            let mut d = direction(obj, &g, &mem);
            if dot(&d, &g) >= 0.0 {
                mem.clear();
                d = obj.precondition(&g).iter().map(|v| -v).collect();
            }
            let trial = match line_search(obj, &x, f, &g, &d, opts, &mut c) {
                Some(t) => t,
                None if !mem.is_empty() => {
                    mem.clear();
                    let d: Vec<f64> = obj.precondition(&g).iter().map(|v| -v).collect();
                    match line_search(obj, &x, f, &g, &d, opts, &mut c) {
                        Some(t) => t,
                        None => {
                            reason = StopReason::LineSearch;
                            break;
                        }
                    }
                }
                None => {
                    reason = StopReason::LineSearch;
                    break;
                }
            };
            let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * norm(&s) * norm(&y) {
                if mem.len() == opts.memory {
                    mem.pop_front();
                }
                mem.push_back((s, y, 1.0 / sy));
            }
            let decrease = f - trial.f;
            x = trial.x;
            f = trial.f;
            g = trial.g;
            if scaled_norm(&g) <= opts.gtol {
                reason = StopReason::Gradient;
                break;
            }
            if decrease <= opts.ftol * f.abs().max(1.0) {
                reason = StopReason::Decrease;
                break;
            }
        }
    }
    Some(LbfgsResult {
        gradient_norm: scaled_norm(&g),
        x,
        value: f,
        initial_value,
        iterations,
        evaluations: c.evaluations,
        rejections: c.rejections,
        reason,
    })
}

/// Two-loop recursion with `H₀ = γ P⁻¹`, `γ = sᵀy / yᵀP⁻¹y` from the newest pair.
fn direction<O: Objective>(obj: &O, g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    let mut r = obj.precondition(&q);
    if let Some((s, y, _)) = mem.back() {
        let py = obj.precondition(y);
        let gamma = dot(s, y) / dot(y, &py);
        if gamma.is_finite() && gamma > 0.0 {
            r.iter_mut().for_each(|v| *v *= gamma);
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &r);
        for (ri, si) in r.iter_mut().zip(s) {
            *ri += (a - b) * si;
        }
    }
    r.iter_mut().for_each(|v| *v = -*v);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn eval(&mut self, x: &[f64], g: &mut [f64]) -> Option<f64> {
            let n = x.len();
            let mut f = 0.0;
            g.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n - 1 {
                let a = x[i + 1] - x[i] * x[i];
                let b = 1.0 - x[i];
                f += 100.0 * a * a + b * b;
                g[i] += -400.0 * a * x[i] - 2.0 * b;
                g[i + 1] += 200.0 * a;
            }
            Some(f)
        }
    }

    /// `Σ −log(x_i) + x_i`, infinite for non-positive entries; minimum at 1.
    struct LogBarrier;

    impl Objective for LogBarrier {
        fn eval(&mut self, x: &[f64], g: &mut [f64]) -> Option<f64> {
            if x.iter().any(|&v| v <= 0.0) {
                return None;
            }
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = 1.0 - 1.0 / xi;
            }
            Some(x.iter().map(|v| v - v.ln()).sum())
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(&mut Rosenbrock, vec![-1.2, 1.0, -0.5, 0.8], &LbfgsOptions::default()).unwrap();
        assert_eq!(r.reason, StopReason::Gradient);
        for v in &r.x {
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert!(r.value <= r.initial_value);
    }

    #[test]
    fn barrier_trials_are_rejected() {
        let r = minimize(&mut LogBarrier, vec![0.01, 30.0, 5.0], &LbfgsOptions::default()).unwrap();
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(r.rejections > 0);
    }

    #[test]
    fn start_at_minimum_takes_no_iterations() {
        let r = minimize(&mut LogBarrier, vec![1.0; 3], &LbfgsOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.reason, StopReason::Gradient);
    }
}

//! Refinement studies and the thread-pooled sweep helper.

use crate::config::RunConfig;
use crate::error::Result;
use crate::scheme::{refinement_study, RefinementRow};
use crate::toy::{naive_scheme, sup_error_against_reference, two_scale_scheme, ToyEnergy, ToyTrajectory};

/// Worker count from `FPSI_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("FPSI_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on isolated worker threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = thread_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("study worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every item mapped")).collect()
}

/// One level of a toy refinement study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStudyRow {
    pub h: f64,
    pub tau: f64,
    /// `sup_t |x(t) − x_ref(t)|` on `[0, T]`.
    pub sup_error: f64,
    /// `sup_t |x_h(t) − x_{prev}(t)|` on the coarser grid; `NaN` on the first level.
    pub cauchy: f64,
    /// `log2` of successive error ratios per halving of `h`; `NaN` on the first level.
    pub order: f64,
}

fn observed_order(prev: f64, cur: f64, prev_h: f64, h: f64) -> f64 {
    if prev > 0.0 && cur > 0.0 {
        (prev / cur).ln() / (prev_h / h).ln()
    } else {
        f64::NAN
    }
}

/// Two-scale scheme at `τ = h²` for each `h`, compared with the adaptive reference.
pub fn toy_two_scale_study(
    e: ToyEnergy,
    x0: &[f64],
    xstar: &[f64],
    hs: &[f64],
    horizon: f64,
    tol: f64,
) -> Result<Vec<ToyStudyRow>> {
    let runs = parallel_map(hs, |&h| -> Result<(ToyTrajectory, f64)> {
        let tau = h * h;
        let traj = two_scale_scheme(e, x0, xstar, tau, h, horizon)?;
        let err = sup_error_against_reference(&traj, e, horizon, tol)?;
        Ok((traj, err))
    });
    let runs: Vec<(ToyTrajectory, f64)> = runs.into_iter().collect::<Result<_>>()?;
    Ok(rows(hs, &runs, |h| h * h))
}

/// Naive scheme at step `τ = h` for each `h`, compared with the adaptive reference.
pub fn toy_naive_study(
    e: ToyEnergy,
    x0: &[f64],
    xstar: &[f64],
    hs: &[f64],
    horizon: f64,
    tol: f64,
) -> Result<Vec<ToyStudyRow>> {
    let runs = parallel_map(hs, |&h| -> Result<(ToyTrajectory, f64)> {
        let traj = naive_scheme(e, x0, xstar, h, horizon)?;
        let err = sup_error_against_reference(&traj, e, horizon, tol)?;
        Ok((traj, err))
    });
    let runs: Vec<(ToyTrajectory, f64)> = runs.into_iter().collect::<Result<_>>()?;
    Ok(rows(hs, &runs, |h| h))
}

fn rows(hs: &[f64], runs: &[(ToyTrajectory, f64)], tau_of: impl Fn(f64) -> f64) -> Vec<ToyStudyRow> {
    let mut out: Vec<ToyStudyRow> = Vec::with_capacity(hs.len());
    for (i, (&h, (traj, err))) in hs.iter().zip(runs).enumerate() {
        let (cauchy, order) = if i == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let coarse = &runs[i - 1].0;
            let d = coarse
                .times
                .iter()
                .zip(&coarse.positions)
                .map(|(&t, x)| {
                    let y = traj.position_at(t);
                    x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max);
            (d, observed_order(out[i - 1].sup_error, *err, hs[i - 1], h))
        };
        out.push(ToyStudyRow {
            h,
            tau: tau_of(h),
            sup_error: *err,
            cauchy,
            order,
        });
    }
    out
}

/// Errors strictly decrease from level to level.
pub fn is_monotone(rows: &[ToyStudyRow]) -> bool {
    rows.windows(2).all(|w| w[1].sup_error < w[0].sup_error)
}

/// Each FPSI level `[τ, h]` on the config's problem with the grid replaced by
/// the study grid.
pub fn fpsi_study(cfg: &RunConfig) -> Result<Vec<RefinementRow>> {
    let st = &cfg.study;
    let mut base = cfg.clone();
    base.domain.solid_nodes = st.fpsi_solid_nodes;
    base.domain.container_nodes = st.fpsi_container_nodes;
    base.scheme.horizon = st.fpsi_horizon;
    let levels: Vec<(f64, f64)> = st.fpsi_levels.iter().map(|l| (l[0], l[1])).collect();
    let build = |tau: f64, h: f64| {
        let mut c = base.clone();
        c.scheme.tau = tau;
        c.scheme.h = h;
        c.build_problem()
    };
    refinement_study(&levels, st.fpsi_horizon, &build)
}

//! Human-driver trajectory prediction with Newell's car-following model.
//!
//! A follower `k` reproduces its leader's trajectory delayed by `tau` in time
//! and `w·tau` in space: `p_k(t) = p_j(t - tau) - w·tau`. Because a cubic
//! stays a cubic under that map, predictions reuse [`CubicTrajectory`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{Registry, RegistryError, VehicleId};
use crate::trajectory::{quadratic_roots, CubicTrajectory};

/// Backward wave speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewellParams {
    pub w: f64,
}

impl NewellParams {
    pub fn new(w: f64) -> Result<Self, PredictionError> {
        if !(w > 0.0) {
            return Err(PredictionError::WaveSpeed(w));
        }
        Ok(NewellParams { w })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictionError {
    #[error("wave speed must be positive, got {0}")]
    WaveSpeed(f64),
    #[error("follower at {follower} m is not behind its leader at {leader} m")]
    Ordering { follower: f64, leader: f64 },
    #[error("no time shift within {0} s reproduces the follower position")]
    NoShift(f64),
    #[error("trajectory does not reach the conflict point within the horizon")]
    NoExit,
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Largest time shift searched for.
pub const MAX_TIME_SHIFT: f64 = 1000.0;

/// Default look-ahead for exit-time roots.
pub const PREDICTION_HORIZON: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord {
    pub id: VehicleId,
    pub leader: Option<VehicleId>,
    pub trajectory: CubicTrajectory,
    /// Absent for free-flow predictions.
    pub tau: Option<f64>,
    /// Absent when the vehicle does not reach the conflict point within the
    /// horizon.
    pub predicted_exit: Option<f64>,
    pub made_at: f64,
    /// Set when a leader existed but no valid shift did, so the record fell
    /// back to free flow.
    pub degraded: bool,
}

/// Finds `tau > 0` with `p_j(t_now - tau) - w·tau = p_k_now`.
///
/// The left-hand side starts above `p_k_now` at `tau = 0` and decreases
/// strictly while the leader never reverses, so a geometrically grown bracket
/// followed by bisection finds the unique root.
pub fn solve_time_shift(
    p_k_now: f64,
    leader: &CubicTrajectory,
    t_now: f64,
    params: &NewellParams,
) -> Result<f64, PredictionError> {
    let p_j_now = leader.position(t_now);
    if !(p_k_now < p_j_now) {
        return Err(PredictionError::Ordering {
            follower: p_k_now,
            leader: p_j_now,
        });
    }
    let f = |tau: f64| leader.position(t_now - tau) - params.w * tau - p_k_now;

    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > MAX_TIME_SHIFT {
            return Err(PredictionError::NoShift(MAX_TIME_SHIFT));
        }
    }
    // -f is increasing in tau with derivative v_j(t - tau) + w
    Ok(bracketed_root(
        |tau| (-f(tau), leader.speed(t_now - tau) + params.w),
        lo,
        hi,
    ))
}

/// Root of `g` in `[lo, hi]` given `g(lo) < 0 <= g(hi)`, where `g` returns
/// its value and derivative. Newton steps are taken while they stay inside
/// the shrinking bracket; otherwise the bracket is bisected.
fn bracketed_root(g: impl Fn(f64) -> (f64, f64), mut lo: f64, mut hi: f64) -> f64 {
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (gx, dg) = g(x);
        if gx == 0.0 {
            return x;
        }
        if gx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - gx / dg;
        let next = if dg > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) || next <= lo || next >= hi {
            return next.clamp(lo, hi);
        }
        x = next;
    }
    x
}

/// Coefficients of `p_j(t - tau) - w·tau`.
///
/// In absolute-time coefficients this is `a_k = a_j`, `b_k = b_j - 3 a_j tau`,
/// `c_k = c_j + 3 a_j tau² - 2 b_j tau`,
/// `d_k = d_j - a_j tau³ + b_j tau² - c_j tau - w tau`. The same map applies
/// to coefficients about any origin, which is how it is evaluated here.
pub fn shift_trajectory(leader: &CubicTrajectory, tau: f64, params: &NewellParams) -> CubicTrajectory {
    let [a, b, c, d] = leader.local();
    let shifted = [
        a,
        b - 3.0 * a * tau,
        c + 3.0 * a * tau * tau - 2.0 * b * tau,
        d - a * tau.powi(3) + b * tau * tau - c * tau - params.w * tau,
    ];
    CubicTrajectory::from_local(leader.origin(), shifted, leader.t0() + tau, leader.tf() + tau)
}

/// Smallest time `t >= traj.t0()` with `p(t) = 0`, searched up to `horizon`
/// seconds ahead.
///
/// The interval is cut at the stationary points of the position so that each
/// piece is monotone; the first piece that reaches the conflict point is
/// bisected.
pub fn predicted_exit_time(traj: &CubicTrajectory, horizon: f64) -> Result<f64, PredictionError> {
    let t_ref = traj.t0();
    if traj.position(t_ref) >= 0.0 {
        return Ok(t_ref);
    }
    let t_end = t_ref + horizon;
    let [a, b, c, _] = traj.recentered(t_ref);
    let mut cuts: Vec<f64> = quadratic_roots(3.0 * a, 2.0 * b, c)
        .into_iter()
        .map(|s| t_ref + s)
        .filter(|&t| t > t_ref && t < t_end)
        .collect();
    cuts.push(t_end);

    // Within the horizon grow the bracket geometrically from 1 s so that
    // near-term exits are resolved on short intervals.
    let mut lo = t_ref;
    for cut in cuts {
        let mut step = 1.0;
        while lo < cut {
            let hi = (lo + step).min(cut);
            if traj.position(hi) >= 0.0 {
                return Ok(bisect_root(traj, lo, hi));
            }
            lo = hi;
            step *= 2.0;
        }
    }
    Err(PredictionError::NoExit)
}

fn bisect_root(traj: &CubicTrajectory, lo: f64, hi: f64) -> f64 {
    // p(lo) < 0 <= p(hi) and p is monotone on the piece
    bracketed_root(|t| (traj.position(t), traj.speed(t)), lo, hi)
}

/// Read-only view used to build predictions at one instant.
pub struct PredictionContext<'a> {
    pub registry: &'a Registry,
    /// Trajectories already known at this instant: committed CAV plans and
    /// predictions made earlier in the same pass.
    pub known: &'a BTreeMap<VehicleId, CubicTrajectory>,
    pub params: NewellParams,
    pub horizon: f64,
}

fn free_flow(id: VehicleId, leader: Option<VehicleId>, t_now: f64, p: f64, v: f64, horizon: f64, degraded: bool) -> PredictionRecord {
    let traj = CubicTrajectory::affine(t_now, p, v, t_now + horizon);
    let exit = predicted_exit_time(&traj, horizon).ok();
    PredictionRecord {
        id,
        leader,
        trajectory: traj.with_interval(t_now, exit.unwrap_or(t_now + horizon)),
        tau: None,
        predicted_exit: exit,
        made_at: t_now,
        degraded,
    }
}

/// Predicts vehicle `k` from its (projected, inside the merging zone) leader.
///
/// Without a leader the vehicle keeps its current speed. A leader that cannot
/// be matched by a positive time shift degrades the record to free flow.
pub fn predict_hdv(k: VehicleId, t_now: f64, ctx: &PredictionContext<'_>) -> Result<PredictionRecord, PredictionError> {
    let state = ctx.registry.state(k)?;
    let leader = ctx.registry.leader(k)?;
    let Some(j) = leader else {
        return Ok(free_flow(k, None, t_now, state.p, state.v, ctx.horizon, false));
    };
    let leader_traj = match ctx.known.get(&j) {
        Some(t) => *t,
        None => {
            let s = ctx.registry.state(j)?;
            CubicTrajectory::affine(t_now, s.p, s.v, t_now + ctx.horizon)
        }
    };
    let tau = match solve_time_shift(state.p, &leader_traj, t_now, &ctx.params) {
        Ok(tau) if tau > 0.0 => tau,
        _ => return Ok(free_flow(k, leader, t_now, state.p, state.v, ctx.horizon, true)),
    };
    let shifted = shift_trajectory(&leader_traj, tau, &ctx.params).with_interval(t_now, t_now + ctx.horizon);
    let exit = predicted_exit_time(&shifted, ctx.horizon).ok();
    Ok(PredictionRecord {
        id: k,
        leader,
        trajectory: shifted.with_interval(t_now, exit.unwrap_or(t_now + ctx.horizon)),
        tau: Some(tau),
        predicted_exit: exit,
        made_at: t_now,
        degraded: false,
    })
}

/// Predicts every in-zone vehicle that has no entry in `plans`, front to back
/// so that each leader is resolved before its followers.
pub fn predict_all(
    registry: &Registry,
    t_now: f64,
    plans: &BTreeMap<VehicleId, CubicTrajectory>,
    params: NewellParams,
    horizon: f64,
) -> Result<BTreeMap<VehicleId, PredictionRecord>, PredictionError> {
    let mut known = plans.clone();
    let mut out = BTreeMap::new();
    for id in prediction_order(registry, plans)? {
        let rec = {
            let ctx = PredictionContext {
                registry,
                known: &known,
                params,
                horizon,
            };
            predict_hdv(id, t_now, &ctx)?
        };
        known.insert(id, rec.trajectory);
        out.insert(id, rec);
    }
    Ok(out)
}

/// Brings `records`, made by [`predict_all`] at `t_now`, up to date after the
/// plan of `changed` was committed or dropped. Only `changed` and vehicles
/// whose leader chain reaches it are predicted again; the result equals a
/// fresh `predict_all` with the new `plans`.
pub fn refresh_predictions(
    registry: &Registry,
    t_now: f64,
    plans: &BTreeMap<VehicleId, CubicTrajectory>,
    params: NewellParams,
    horizon: f64,
    records: &mut BTreeMap<VehicleId, PredictionRecord>,
    changed: VehicleId,
) -> Result<(), PredictionError> {
    if plans.contains_key(&changed) {
        records.remove(&changed);
    }
    let mut known = plans.clone();
    known.extend(records.iter().map(|(&id, r)| (id, r.trajectory)));
    let mut dirty = BTreeSet::from([changed]);
    for id in prediction_order(registry, plans)? {
        let leader = match records.get(&id) {
            Some(r) if id != changed => r.leader,
            _ => registry.leader(id)?,
        };
        if id != changed && !leader.is_some_and(|l| dirty.contains(&l)) {
            continue;
        }
        dirty.insert(id);
        let rec = {
            let ctx = PredictionContext {
                registry,
                known: &known,
                params,
                horizon,
            };
            predict_hdv(id, t_now, &ctx)?
        };
        known.insert(id, rec.trajectory);
        records.insert(id, rec);
    }
    Ok(())
}

/// In-zone vehicles without a plan, front to back (ties to the lower id).
fn prediction_order(
    registry: &Registry,
    plans: &BTreeMap<VehicleId, CubicTrajectory>,
) -> Result<Vec<VehicleId>, PredictionError> {
    let mut order: Vec<_> = registry
        .active()
        .iter()
        .filter(|id| !plans.contains_key(id))
        .map(|&id| registry.state(id).map(|s| (id, s.p)))
        .collect::<Result<_, _>>()?;
    order.sort_by(|x, y| match y.1.partial_cmp(&x.1).unwrap_or(Ordering::Equal) {
        Ordering::Equal => x.0.cmp(&y.0),
        o => o,
    });
    Ok(order.into_iter().map(|(id, _)| id).collect())
}

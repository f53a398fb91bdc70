//! Upper-level minimal-time planning.
//!
//! Starting from the kinematic lower bound, exit times are stepped forward on
//! a fixed grid and the first one whose cubic satisfies the control, speed,
//! no-conflict and rear-end constraints is returned.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{ConstraintParams, VehicleId};
use crate::trajectory::{bounds_check, quadratic_roots, solve_boundary, BoundKind, BoundaryConditions, CubicTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct PlannerSettings {
    /// Exit-time grid spacing.
    pub step: f64,
    /// Sampling spacing of the rear-end check, on top of its analytic
    /// stationary points.
    pub check_step: f64,
    /// Upper end of the search as a multiple of the lower bound.
    pub upper_factor: f64,
    /// Absolute cap on the travel time searched.
    pub upper_cap: f64,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        PlannerSettings {
            step: 0.1,
            check_step: 0.05,
            upper_factor: 6.0,
            upper_cap: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("vehicle is not upstream of the conflict point (p = {0})")]
    OutsideZone(f64),
    #[error("negative speed {0}")]
    NegativeSpeed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborExit {
    pub id: VehicleId,
    pub tf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRequest {
    pub id: VehicleId,
    pub t_plan: f64,
    pub p: f64,
    pub v: f64,
    /// Conflict-point crossing times of neighbor-road vehicles, frozen at
    /// `t_plan`.
    pub neighbor_exits: Vec<NeighborExit>,
    /// Same-road predecessor trajectory; the rear-end constraint applies
    /// until its `tf`.
    pub predecessor: Option<CubicTrajectory>,
    /// Committed plan of the same-road follower, if it has one. A re-plan
    /// must keep the follower clear of the rear-end envelope until the
    /// planning vehicle exits, so that committed plans stay consistent.
    pub follower: Option<CubicTrajectory>,
    pub limits: ConstraintParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanOutcome {
    Planned { tf: f64, trajectory: CubicTrajectory },
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveConstraint {
    /// The kinematic lower bound itself was feasible.
    LowerBound,
    Bounds(BoundKind),
    NoConflict(VehicleId),
    RearEnd,
    /// The committed plan of the follower would violate its rear-end
    /// constraint.
    FollowerRearEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub outcome: PlanOutcome,
    /// Number of candidate exit times evaluated.
    pub iterations: usize,
    /// Constraints that rejected the grid point just before the returned one.
    pub active: Vec<ActiveConstraint>,
}

impl PlanResult {
    pub fn planned(&self) -> Option<(f64, CubicTrajectory)> {
        match self.outcome {
            PlanOutcome::Planned { tf, trajectory } => Some((tf, trajectory)),
            PlanOutcome::Infeasible => None,
        }
    }
}

/// Kinematic travel-time bounds from `(p, v)`, measured from the plan epoch.
///
/// The lower bound accelerates at `u_max` up to `v_max` and then cruises; a
/// vehicle already above `v_max` cruises at its current speed.
pub fn feasible_time_range(
    p: f64,
    v: f64,
    limits: &ConstraintParams,
    settings: &PlannerSettings,
) -> Result<(f64, f64), PlanError> {
    if !(p < 0.0) {
        return Err(PlanError::OutsideZone(p));
    }
    if v < 0.0 {
        return Err(PlanError::NegativeSpeed(v));
    }
    let dist = -p;
    let lower = if v >= limits.v_max {
        dist / v
    } else {
        let t_acc = (limits.v_max - v) / limits.u_max;
        let d_acc = v * t_acc + 0.5 * limits.u_max * t_acc * t_acc;
        if d_acc >= dist {
            (-v + (v * v + 2.0 * limits.u_max * dist).sqrt()) / limits.u_max
        } else {
            t_acc + (dist - d_acc) / limits.v_max
        }
    };
    let upper = (settings.upper_factor * lower).min(settings.upper_cap).max(lower);
    Ok((lower, upper))
}

/// Tolerance on the crossing-gap comparison, so that grid points landing on
/// `t_k + t_min` up to rounding are accepted.
const GAP_TOLERANCE: f64 = 1e-9;

pub fn check_no_conflict(tf_i: f64, neighbor_exits: &[f64], t_min: f64) -> bool {
    neighbor_exits.iter().all(|&tk| (tf_i - tk).abs() >= t_min - GAP_TOLERANCE)
}

/// Neighbor exits sorted by time, for logarithmic conflict lookups.
struct ExitIndex(Vec<(f64, VehicleId)>);

impl ExitIndex {
    fn new(neighbors: &[NeighborExit]) -> Self {
        let mut v: Vec<_> = neighbors.iter().map(|n| (n.tf, n.id)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ExitIndex(v)
    }

    /// Earliest-exiting neighbor closer than `t_min` to `tf_i`.
    fn first_conflict(&self, tf_i: f64, t_min: f64) -> Option<VehicleId> {
        let w = t_min - GAP_TOLERANCE;
        let start = self.0.partition_point(|e| e.0 < tf_i - w).saturating_sub(1);
        self.0[start..]
            .iter()
            .take_while(|e| e.0 <= tf_i + w + GAP_TOLERANCE)
            .find(|e| (tf_i - e.0).abs() < w)
            .map(|e| e.1)
    }
}

const GAP_FN_TOLERANCE: f64 = 1e-9;

/// Verifies `p_pred - p_i - d_min - t_h·v_i >= 0` on `[t_a, t_b]` and returns
/// the earliest violation time otherwise.
///
/// The margin is a cubic, so its minimum is attained at an endpoint or at a
/// root of its quadratic derivative; those points are checked first. Only
/// when one of them fails is the regular grid of the bracketing segment
/// scanned, and the onset is then located by bisection, the margin being
/// monotone there.
pub fn check_rear_end(
    traj_i: &CubicTrajectory,
    traj_pred: &CubicTrajectory,
    d_min: f64,
    t_h: f64,
    interval: (f64, f64),
    check_step: f64,
) -> Result<(), f64> {
    let (ta, tb) = interval;
    if !(tb >= ta) {
        return Ok(());
    }
    let g = |t: f64| traj_pred.position(t) - traj_i.position(t) - d_min - t_h * traj_i.speed(t);
    let bad = |t: f64| g(t) < -GAP_FN_TOLERANCE;

    let [pa, pb, pc, _] = traj_pred.recentered(ta);
    let [ea, eb, ec, _] = traj_i.recentered(ta);
    let dg = [
        3.0 * (pa - ea),
        2.0 * (pb - eb) - 6.0 * t_h * ea,
        pc - ec - 2.0 * t_h * eb,
    ];
    let mut buf = [ta, tb, ta, ta];
    let mut len = 2;
    for s in quadratic_roots(dg[0], dg[1], dg[2]) {
        let t = ta + s;
        if t > ta && t < tb {
            buf[len] = t;
            len += 1;
        }
    }
    let critical = &mut buf[..len];
    critical.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let Some(k) = critical.iter().position(|&t| bad(t)) else {
        return Ok(());
    };
    if k == 0 {
        return Err(critical[0]);
    }
    // grid points of the segment ending at the first failing critical point
    let (seg_a, seg_b) = (critical[k - 1], critical[k]);
    let mut lo = seg_a;
    let mut hi = seg_b;
    if check_step > 0.0 {
        let first = ((seg_a - ta) / check_step).floor() as usize + 1;
        let mut j = first;
        loop {
            let t = ta + j as f64 * check_step;
            if t >= seg_b {
                break;
            }
            if t > seg_a {
                if bad(t) {
                    hi = t;
                    break;
                }
                lo = t;
            }
            j += 1;
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if bad(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(hi)
}

fn rejections(
    req: &PlanRequest,
    exits: &ExitIndex,
    traj: &CubicTrajectory,
    tf: f64,
    settings: &PlannerSettings,
) -> Vec<ActiveConstraint> {
    let mut out = Vec::new();
    if let Err(v) = bounds_check(traj, &req.limits) {
        out.push(ActiveConstraint::Bounds(v.kind));
    }
    if let Some(k) = exits.first_conflict(tf, req.limits.t_min) {
        out.push(ActiveConstraint::NoConflict(k));
    }
    if let Some(pred) = &req.predecessor {
        let end = tf.min(pred.tf());
        if check_rear_end(traj, pred, req.limits.d_min, req.limits.t_h, (req.t_plan, end), settings.check_step).is_err() {
            out.push(ActiveConstraint::RearEnd);
        }
    }
    if let Some(fol) = &req.follower {
        let end = tf.min(fol.tf());
        if check_rear_end(fol, traj, req.limits.d_min, req.limits.t_h, (req.t_plan, end), settings.check_step).is_err() {
            out.push(ActiveConstraint::FollowerRearEnd);
        }
    }
    out
}

fn admissible(
    req: &PlanRequest,
    exits: &ExitIndex,
    traj: &CubicTrajectory,
    tf: f64,
    settings: &PlannerSettings,
) -> bool {
    exits.first_conflict(tf, req.limits.t_min).is_none()
        && bounds_check(traj, &req.limits).is_ok()
        && req.predecessor.as_ref().is_none_or(|pred| {
            let end = tf.min(pred.tf());
            check_rear_end(traj, pred, req.limits.d_min, req.limits.t_h, (req.t_plan, end), settings.check_step).is_ok()
        })
        && req.follower.as_ref().is_none_or(|fol| {
            let end = tf.min(fol.tf());
            check_rear_end(fol, traj, req.limits.d_min, req.limits.t_h, (req.t_plan, end), settings.check_step).is_ok()
        })
}

/// Constraints of `req` violated by a trajectory that reaches the conflict
/// point at `traj.tf()`, checked over `[req.t_plan, traj.tf()]`. Empty when the
/// trajectory is admissible.
pub fn violated_constraints(req: &PlanRequest, traj: &CubicTrajectory, settings: &PlannerSettings) -> Vec<ActiveConstraint> {
    let tf = traj.tf();
    rejections(req, &ExitIndex::new(&req.neighbor_exits), &traj.with_interval(req.t_plan, tf), tf, settings)
}

/// Returns the earliest grid exit time whose cubic satisfies every
/// constraint, or `Infeasible` when none up to the upper bound does.
pub fn plan(req: &PlanRequest, settings: &PlannerSettings) -> Result<PlanResult, PlanError> {
    let (lower, upper) = feasible_time_range(req.p, req.v, &req.limits, settings)?;
    let exits = ExitIndex::new(&req.neighbor_exits);
    let mut last_rejected: Option<CubicTrajectory> = None;
    let mut n = 0usize;
    loop {
        let travel = lower + n as f64 * settings.step;
        if travel > upper + 1e-9 {
            break;
        }
        n += 1;
        let tf = req.t_plan + travel;
        let Ok(traj) = solve_boundary(&BoundaryConditions::to_conflict_point(req.t_plan, tf, req.p, req.v)) else {
            continue;
        };
        if admissible(req, &exits, &traj, tf, settings) {
            let active = match last_rejected {
                Some(prev) => rejections(req, &exits, &prev, prev.tf(), settings),
                None => vec![ActiveConstraint::LowerBound],
            };
            return Ok(PlanResult {
                outcome: PlanOutcome::Planned { tf, trajectory: traj },
                iterations: n,
                active,
            });
        }
        last_rejected = Some(traj);
    }
    let active = match last_rejected {
        Some(prev) => rejections(req, &exits, &prev, prev.tf(), settings),
        None => vec![ActiveConstraint::LowerBound],
    };
    Ok(PlanResult {
        outcome: PlanOutcome::Infeasible,
        iterations: n,
        active,
    })
}

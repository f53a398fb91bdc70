//! Time-to-conflict metrics and the re-planning trigger.

use serde::{Deserialize, Serialize};

use crate::scenario::{Registry, RegistryError, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskParams {
    /// Critical time-to-conflict behind a same-road predecessor.
    pub t_cr_same: f64,
    /// Critical crossing gap to a neighbor-road vehicle.
    pub t_cr_neighbor: f64,
    /// Speeds below this always trigger a re-plan.
    pub v_tilde: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConflictMetrics {
    pub t_same: Option<f64>,
    pub t_neighbor: Option<f64>,
}

/// Time until the gap to the predecessor shrinks to `d_min` at current speeds.
/// Defined only while closing in.
pub fn time_to_conflict_same(p_i: f64, v_i: f64, p_k: f64, v_k: f64, d_min: f64) -> Option<f64> {
    let closing = v_i - v_k;
    if closing > 0.0 {
        Some(((p_k - p_i - d_min) / closing).max(0.0))
    } else {
        None
    }
}

/// Gap between the two vehicles' constant-speed arrivals at `d_min` upstream
/// of the conflict point. Undefined for a stopped vehicle.
pub fn time_to_conflict_neighbor(p_i: f64, v_i: f64, p_k: f64, v_k: f64, d_min: f64) -> Option<f64> {
    if !(v_i > 0.0 && v_k > 0.0) {
        return None;
    }
    Some(((-p_i - d_min) / v_i - (-p_k - d_min) / v_k).abs())
}

pub fn should_replan(metrics: &ConflictMetrics, v_i: f64, in_merging_zone: bool, params: &RiskParams) -> bool {
    let same = metrics.t_same.is_some_and(|t| t < params.t_cr_same);
    let neighbor = in_merging_zone && metrics.t_neighbor.is_some_and(|t| t < params.t_cr_neighbor);
    same || neighbor || v_i < params.v_tilde
}

/// Metrics for vehicle `i` against its same-road predecessor and, inside the
/// merging zone, against the neighbor-road vehicle whose crossing estimate is
/// closest to its own.
pub fn conflict_metrics(registry: &Registry, i: VehicleId) -> Result<ConflictMetrics, RegistryError> {
    let ego = *registry.state(i)?;
    let d_min = registry.limits().d_min;
    let t_same = match registry.predecessor(i, false)? {
        Some(k) => {
            let s = registry.state(k)?;
            time_to_conflict_same(ego.p, ego.v, s.p, s.v, d_min)
        }
        None => None,
    };
    let t_neighbor = if registry.geometry().in_merging_zone(ego.p) {
        let (_, others) = registry.neighbors(i)?;
        others
            .into_iter()
            .filter_map(|k| {
                let s = registry.state(k).ok()?;
                if s.p >= 0.0 {
                    return None;
                }
                time_to_conflict_neighbor(ego.p, ego.v, s.p, s.v, d_min)
            })
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    } else {
        None
    };
    Ok(ConflictMetrics { t_same, t_neighbor })
}

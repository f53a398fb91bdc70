//! Evaluation metrics and the post-hoc safety audit of a simulation log.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{EventKind, SimLog};
use crate::scenario::{ConstraintParams, Road, VehicleId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no vehicle has exited")]
    NoExits,
    #[error("output flux needs at least two exits at distinct times")]
    TooFewExits,
}

/// Mean of `t_exit - t_entry` over exited vehicles.
pub fn average_travel_time(log: &SimLog) -> Result<f64, MetricError> {
    let (n, sum) = log
        .vehicles
        .iter()
        .filter_map(|s| s.travel_time())
        .fold((0usize, 0.0), |(n, s), t| (n + 1, s + t));
    if n == 0 {
        return Err(MetricError::NoExits);
    }
    Ok(sum / n as f64)
}

/// Exit rate in veh/h over the window from the first to the last exit:
/// `(exits - 1) · 3600 / (last - first)`.
pub fn output_flux(log: &SimLog) -> Result<f64, MetricError> {
    flux_of(log.vehicles.iter().filter_map(|s| s.t_exit))
}

pub fn flux_of(exits: impl IntoIterator<Item = f64>) -> Result<f64, MetricError> {
    let (mut n, mut first, mut last) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
    for t in exits {
        n += 1;
        first = first.min(t);
        last = last.max(t);
    }
    if n < 2 || !(last > first) {
        return Err(MetricError::TooFewExits);
    }
    Ok((n - 1) as f64 * 3600.0 / (last - first))
}

/// Trapezoidal integral of `v · max(0, u)` over time-ordered `(t, v, u)`
/// samples.
pub fn energy_per_mass(samples: &[(f64, f64, f64)]) -> f64 {
    let f = |&(_, v, u): &(f64, f64, f64)| v * u.max(0.0);
    samples
        .windows(2)
        .map(|w| 0.5 * (f(&w[0]) + f(&w[1])) * (w[1].0 - w[0].0))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Same-road gap below `d_min + t_h · v` of the follower.
    RearEnd,
    /// Cross-road conflict-point crossings closer than `t_min`.
    Crossing,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::RearEnd => "rear_end",
            ViolationKind::Crossing => "crossing",
        }
    }
}

/// One violation episode. Rear-end deficits at consecutive steps between the
/// same pair form a single episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub t: f64,
    pub t_end: f64,
    /// (follower, leader) for rear-end, (first, second) crossing for crossing.
    pub ids: (VehicleId, VehicleId),
    /// Worst deficit: metres for rear-end, seconds for crossing.
    pub magnitude: f64,
    /// Worst observed value: smallest gap in metres, or the crossing time gap.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SafetyReport {
    pub violations: Vec<Violation>,
}

impl SafetyReport {
    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    /// Rear-end episodes whose gap fell below `distance`.
    pub fn gaps_below(&self, distance: f64) -> usize {
        self.violations
            .iter()
            .filter(|v| v.kind == ViolationKind::RearEnd && v.value < distance)
            .count()
    }

    /// Crossing pairs closer in time than `gap`.
    pub fn crossings_below(&self, gap: f64) -> usize {
        self.violations
            .iter()
            .filter(|v| v.kind == ViolationKind::Crossing && v.value < gap)
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Tolerance on audited deficits, absorbing rounding in the logged states.
pub const AUDIT_TOLERANCE: f64 = 1e-9;

/// Scans every logged step for same-road rear-end deficits and every
/// cross-road pair of exits for crossing-gap deficits.
pub fn safety_audit(log: &SimLog, limits: &ConstraintParams) -> SafetyReport {
    let mut out: Vec<Violation> = Vec::new();
    // open episode per (follower, leader): index into `out` and last step time
    let mut open: BTreeMap<(VehicleId, VehicleId), (usize, f64)> = BTreeMap::new();
    let join = 1.5 * log.dt;

    let mut start = 0;
    while start < log.records.len() {
        let t = log.records[start].t;
        let end = start + log.records[start..].iter().take_while(|r| r.t == t).count();
        for road in [Road::Main, Road::Ramp] {
            let mut lane: Vec<_> = log.records[start..end].iter().filter(|r| r.road == road).collect();
            lane.sort_by(|a, b| b.p.total_cmp(&a.p).then(a.id.cmp(&b.id)));
            for w in lane.windows(2) {
                let (lead, fol) = (w[0], w[1]);
                let gap = lead.p - fol.p;
                let deficit = limits.safe_distance(fol.v) - gap;
                if deficit <= AUDIT_TOLERANCE {
                    continue;
                }
                let key = (fol.id, lead.id);
                match open.get_mut(&key) {
                    Some((idx, last)) if t - *last <= join => {
                        let v = &mut out[*idx];
                        v.t_end = t;
                        v.magnitude = v.magnitude.max(deficit);
                        v.value = v.value.min(gap);
                        *last = t;
                    }
                    _ => {
                        open.insert(key, (out.len(), t));
                        out.push(Violation {
                            kind: ViolationKind::RearEnd,
                            t,
                            t_end: t,
                            ids: key,
                            magnitude: deficit,
                            value: gap,
                        });
                    }
                }
            }
        }
        start = end;
    }

    let mut exits: Vec<_> = log
        .vehicles
        .iter()
        .filter_map(|s| s.t_exit.map(|t| (t, s.id, s.road)))
        .collect();
    exits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (j, &(tj, idj, rj)) in exits.iter().enumerate() {
        for &(ti, idi, ri) in exits[..j].iter().rev() {
            let gap = tj - ti;
            if gap >= limits.t_min - AUDIT_TOLERANCE {
                break;
            }
            if ri != rj {
                out.push(Violation {
                    kind: ViolationKind::Crossing,
                    t: tj,
                    t_end: tj,
                    ids: (idi, idj),
                    magnitude: limits.t_min - gap,
                    value: gap,
                });
            }
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.kind.cmp(&b.kind)).then(a.ids.cmp(&b.ids)));
    SafetyReport { violations: out }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub vehicles: usize,
    pub exited: usize,
    pub cavs: usize,
    /// Seconds; absent when no vehicle exited.
    pub avg_travel_time: Option<f64>,
    /// veh/h; absent with fewer than two exits.
    pub output_flux: Option<f64>,
    /// Mean energy per unit mass over exited vehicles, (m/s)².
    pub mean_energy: Option<f64>,
    /// Audit and engine violation counts by kind.
    pub violations: BTreeMap<String, usize>,
    pub replans: usize,
    pub infeasible_plans: usize,
    pub deferred_arrivals: usize,
    pub end_time: f64,
}

impl RunMetrics {
    pub fn from_log(log: &SimLog, limits: &ConstraintParams) -> Self {
        let audit = safety_audit(log, limits);
        Self::with_audit(log, limits, &audit)
    }

    pub fn with_audit(log: &SimLog, limits: &ConstraintParams, audit: &SafetyReport) -> Self {
        let exited: Vec<_> = log.exited().collect();
        let mean_energy = if exited.is_empty() {
            None
        } else {
            Some(exited.iter().map(|s| s.energy).sum::<f64>() / exited.len() as f64)
        };
        let mut violations = BTreeMap::new();
        violations.insert("rear_end".to_string(), audit.count(ViolationKind::RearEnd));
        violations.insert("rear_end_below_d_min".to_string(), audit.gaps_below(limits.d_min));
        violations.insert("crossing".to_string(), audit.count(ViolationKind::Crossing));
        violations.insert(
            "crossing_below_half_t_min".to_string(),
            audit.crossings_below(0.5 * limits.t_min),
        );
        violations.insert("model_breakdown".to_string(), log.count(EventKind::ModelBreakdown));
        RunMetrics {
            vehicles: log.vehicles.len(),
            exited: exited.len(),
            cavs: log
                .vehicles
                .iter()
                .filter(|s| s.class == crate::scenario::VehicleClass::Cav)
                .count(),
            avg_travel_time: average_travel_time(log).ok(),
            output_flux: output_flux(log).ok(),
            mean_energy,
            violations,
            replans: log.count(EventKind::Replan),
            infeasible_plans: log.count(EventKind::Infeasible),
            deferred_arrivals: log.count(EventKind::Deferred),
            end_time: log.end_time,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{StepRecord, VehicleSummary};
    use crate::scenario::VehicleClass;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn limits() -> ConstraintParams {
        ConstraintParams::new(-3.0, 2.0, 0.0, 25.0, 2.0, 10.0, 1.0).unwrap()
    }

    fn summary(id: u32, road: Road, t_entry: f64, t_exit: Option<f64>) -> VehicleSummary {
        VehicleSummary {
            id: VehicleId(id),
            class: VehicleClass::Cav,
            road,
            t_scheduled: t_entry,
            t_entry,
            t_exit,
            energy: 0.0,
            plans: 1,
            replans: 0,
        }
    }

    fn log_of(vehicles: Vec<VehicleSummary>) -> SimLog {
        SimLog {
            dt: 0.05,
            vehicles,
            ..SimLog::default()
        }
    }

    fn record(t: f64, id: u32, road: Road, p: f64, v: f64) -> StepRecord {
        StepRecord {
            t,
            id: VehicleId(id),
            class: VehicleClass::Hdv,
            road,
            p,
            v,
            u: 0.0,
            plan_epoch: 0,
            replanned: false,
        }
    }

    #[test]
    fn travel_time_examples() {
        let one = log_of(vec![summary(1, Road::Main, 0.0, Some(12.5))]);
        assert_eq!(average_travel_time(&one).unwrap(), 12.5);
        let two = log_of(vec![
            summary(1, Road::Main, 0.0, Some(12.0)),
            summary(2, Road::Ramp, 3.0, Some(17.0)),
        ]);
        assert_eq!(average_travel_time(&two).unwrap(), 13.0);
        let none = log_of(vec![summary(1, Road::Main, 0.0, None)]);
        assert_eq!(average_travel_time(&none), Err(MetricError::NoExits));
    }

    #[test]
    fn flux_examples() {
        assert_eq!(flux_of([10.0, 14.0]).unwrap(), 900.0);
        // 1000 exits spread evenly over 2400 s
        let spread = (0..1000).map(|n| n as f64 * 2400.0 / 999.0);
        assert_relative_eq!(flux_of(spread).unwrap(), 999.0 * 1.5, max_relative = 1e-12);
        assert_relative_eq!(flux_of((0..10).map(|n| 3.0 * n as f64)).unwrap(), 1200.0, max_relative = 1e-12);
        assert_eq!(flux_of([5.0]), Err(MetricError::TooFewExits));
        assert_eq!(flux_of([5.0, 5.0]), Err(MetricError::TooFewExits));
    }

    #[test]
    fn energy_examples() {
        let cruise: Vec<_> = (0..=40).map(|n| (n as f64 * 0.05, 24.0, 0.0)).collect();
        assert_eq!(energy_per_mass(&cruise), 0.0);
        let braking: Vec<_> = (0..=40).map(|n| (n as f64 * 0.05, 24.0 - 0.1 * n as f64, -2.0)).collect();
        assert_eq!(energy_per_mass(&braking), 0.0);
        let rectangle: Vec<_> = (0..=40).map(|n| (n as f64 * 0.05, 10.0, 1.0)).collect();
        assert_relative_eq!(energy_per_mass(&rectangle), 20.0, max_relative = 1e-12);
    }

    #[test]
    fn energy_matches_closed_form_on_a_cubic() {
        // v(t) = 20 + t^2 - t^3/3, u(t) = 2t - t^2 > 0 on (0, 2), < 0 on (2, 3)
        let v = |t: f64| 20.0 + t * t - t * t * t / 3.0;
        let u = |t: f64| 2.0 * t - t * t;
        let samples: Vec<_> = (0..=3000).map(|n| n as f64 * 1e-3).map(|t| (t, v(t), u(t))).collect();
        // integral of v·u over [0, 2]: antiderivative of (20 + t² − t³/3)(2t − t²)
        let big_f = |t: f64| {
            20.0 * t * t - 20.0 * t.powi(3) / 3.0 + t.powi(4) / 2.0 - t.powi(5) / 5.0 - t.powi(5) * 2.0 / 15.0
                + t.powi(6) / 18.0
        };
        let exact = big_f(2.0) - big_f(0.0);
        assert_relative_eq!(energy_per_mass(&samples), exact, max_relative = 1e-3);
    }

    #[test]
    fn audit_reports_a_short_same_road_gap() {
        let mut log = log_of(vec![summary(1, Road::Main, 0.0, None), summary(2, Road::Main, 0.0, None)]);
        log.records = vec![record(0.0, 1, Road::Main, -100.0, 0.0), record(0.0, 2, Road::Main, -109.0, 0.0)];
        let report = safety_audit(&log, &limits());
        assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        assert_eq!(v.kind, ViolationKind::RearEnd);
        assert_eq!(v.ids, (VehicleId(2), VehicleId(1)));
        assert_relative_eq!(v.magnitude, 1.0, max_relative = 1e-12);
        assert_eq!(v.value, 9.0);
        assert_eq!(report.gaps_below(10.0), 1);

        // with speed the headway term adds t_h · v
        log.records[1].v = 5.0;
        let report = safety_audit(&log, &limits());
        assert_relative_eq!(report.violations[0].magnitude, 6.0, max_relative = 1e-12);
    }

    #[test]
    fn audit_merges_consecutive_deficits_into_one_episode() {
        let mut log = log_of(vec![summary(1, Road::Ramp, 0.0, None), summary(2, Road::Ramp, 0.0, None)]);
        for n in 0..4 {
            let t = n as f64 * 0.05;
            log.records.push(record(t, 1, Road::Ramp, -100.0, 0.0));
            log.records.push(record(t, 2, Road::Ramp, -109.0 + 0.5 * n as f64, 0.0));
        }
        let report = safety_audit(&log, &limits());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].value, 7.5);
        assert_eq!(report.violations[0].t_end, 0.15000000000000002);
    }

    #[test]
    fn audit_ignores_cross_road_distances() {
        let mut log = log_of(vec![summary(1, Road::Main, 0.0, None), summary(2, Road::Ramp, 0.0, None)]);
        log.records = vec![record(0.0, 1, Road::Main, -100.0, 0.0), record(0.0, 2, Road::Ramp, -101.0, 0.0)];
        assert!(safety_audit(&log, &limits()).is_empty());
    }

    #[test]
    fn audit_reports_close_crossings_on_opposite_roads_only() {
        let log = log_of(vec![
            summary(1, Road::Main, 0.0, Some(10.0)),
            summary(2, Road::Ramp, 0.0, Some(11.9)),
            summary(3, Road::Ramp, 0.0, Some(12.5)),
        ]);
        let report = safety_audit(&log, &limits());
        assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        assert_eq!(v.kind, ViolationKind::Crossing);
        assert_eq!(v.ids, (VehicleId(1), VehicleId(2)));
        assert_relative_eq!(v.magnitude, 0.1, max_relative = 1e-9);
        assert_eq!(report.crossings_below(1.0), 0);
        assert_eq!(report.crossings_below(2.0), 1);
    }

    #[test]
    fn run_metrics_counts() {
        let log = log_of(vec![
            summary(1, Road::Main, 0.0, Some(12.0)),
            summary(2, Road::Ramp, 2.0, Some(16.0)),
            summary(3, Road::Ramp, 4.0, None),
        ]);
        let m = RunMetrics::from_log(&log, &limits());
        assert_eq!((m.vehicles, m.exited, m.cavs), (3, 2, 3));
        assert_eq!(m.avg_travel_time, Some(13.0));
        assert_eq!(m.output_flux, Some(900.0));
        assert_eq!(m.violations["crossing"], 0);
    }

    proptest! {
        #[test]
        fn energy_is_non_negative(samples in prop::collection::vec((0.0f64..30.0, -3.0f64..3.0), 0..50)) {
            let s: Vec<_> = samples.iter().enumerate().map(|(n, &(v, u))| (n as f64 * 0.05, v, u)).collect();
            prop_assert!(energy_per_mass(&s) >= 0.0);
        }

        #[test]
        fn travel_time_ignores_record_order(
            trips in prop::collection::vec((0.0f64..100.0, 5.0f64..60.0), 1..20),
            seed in any::<u64>(),
        ) {
            let vehicles: Vec<_> = trips
                .iter()
                .enumerate()
                .map(|(n, &(t0, d))| summary(n as u32 + 1, Road::Main, t0, Some(t0 + d)))
                .collect();
            let mut log = log_of(vehicles);
            log.records = (0..trips.len()).map(|n| record(0.0, n as u32 + 1, Road::Main, -10.0 * n as f64, 0.0)).collect();
            let before = average_travel_time(&log).unwrap();
            let k = (seed % log.records.len() as u64) as usize;
            log.records.rotate_left(k);
            log.records.reverse();
            prop_assert_eq!(before, average_travel_time(&log).unwrap());
        }

        #[test]
        fn flux_is_non_negative(exits in prop::collection::vec(0.0f64..5000.0, 2..100)) {
            if let Ok(f) = flux_of(exits) {
                prop_assert!(f >= 0.0);
            }
        }
    }
}

#![allow(dead_code)]

use merge_core::engine::{ScriptedArrival, SimConfig};
use merge_core::human::IdmParams;
use merge_core::predictor::NewellParams;
use merge_core::risk::RiskParams;
use merge_core::scenario::{ConstraintParams, Geometry, Road, VehicleClass};

pub fn limits() -> ConstraintParams {
    ConstraintParams::new(-3.0, 2.0, 0.0, 25.0, 2.0, 10.0, 1.0).unwrap()
}

/// Simulation setup of the highway study: 300 m control zone, 75 m merging
/// zone, arrivals at 22–24 m/s.
pub fn highway(volume: f64, penetration: f64, vehicles: usize, seed: u64) -> SimConfig {
    SimConfig {
        geometry: Geometry::new(300.0, 75.0).unwrap(),
        limits: limits(),
        newell: NewellParams { w: 5.0 },
        risk: RiskParams {
            t_cr_same: 3.0,
            t_cr_neighbor: 2.0,
            v_tilde: 12.5,
        },
        idm: IdmParams {
            v_bar: 23.0,
            d_underbar: 10.0,
            time_gap: 2.0,
            a: 1.0,
            b: 1.5,
        },
        perturbation: 0.3,
        volume,
        penetration,
        arrival_speed: (22.0, 24.0),
        inter_arrival_sd: None,
        dt: 0.05,
        vehicles,
        seed,
        replanning: true,
        planner: Default::default(),
        replan_cooldown: 0.5,
        fallback_retry: 1.0,
        max_time: None,
        arrivals: None,
    }
}

pub fn scripted(list: &[(f64, Road, VehicleClass, f64)]) -> SimConfig {
    SimConfig {
        arrivals: Some(
            list.iter()
                .map(|&(t, road, class, v0)| ScriptedArrival { t, road, class, v0 })
                .collect(),
        ),
        ..highway(1500.0, 0.0, 0, 1)
    }
}

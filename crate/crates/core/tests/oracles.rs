//! Closed forms and the planner checked against independent computations:
//! linear solves, dense sampling and exhaustive fine-grid search.

mod common;

use merge_core::planner::{feasible_time_range, plan, NeighborExit, PlanRequest, PlannerSettings};
use merge_core::predictor::{predicted_exit_time, shift_trajectory, solve_time_shift, NewellParams};
use merge_core::scenario::{ConstraintParams, VehicleId};
use merge_core::trajectory::{bounds_check, solve_boundary, BoundaryConditions, CubicTrajectory};
use nalgebra::{Matrix4, Vector4};
use proptest::prelude::*;

const W: NewellParams = NewellParams { w: 5.0 };

/// Cubic through the boundary conditions by a general 4×4 solve in local time.
fn cubic_by_linear_solve(t0: f64, tf: f64, p0: f64, v0: f64) -> [f64; 4] {
    let h = tf - t0;
    #[rustfmt::skip]
    let m = Matrix4::new(
        0.0, 0.0, 0.0, 1.0,
        0.0, 0.0, 1.0, 0.0,
        h * h * h, h * h, h, 1.0,
        6.0 * h, 2.0, 0.0, 0.0,
    );
    let x = m.lu().solve(&Vector4::new(p0, v0, 0.0, 0.0)).unwrap();
    [x[0], x[1], x[2], x[3]]
}

/// Control and speed bounds by sampling every millisecond.
/// Sample indices `0..=n`, endpoints first: violations mostly sit at the
/// ends, so rejections are found early. The sample set is unchanged.
fn ends_first(n: usize) -> impl Iterator<Item = usize> {
    [n, 0].into_iter().chain(1..n)
}

fn dense_bounds_ok(traj: &CubicTrajectory, l: &ConstraintParams) -> bool {
    let n = ((traj.tf() - traj.t0()) / 1e-3).ceil() as usize;
    ends_first(n).all(|k| {
        let t = (traj.t0() + k as f64 * 1e-3).min(traj.tf());
        let (v, u) = (traj.speed(t), traj.control(t));
        v >= l.v_min - 1e-9 && v <= l.v_max + 1e-9 && u >= l.u_min - 1e-9 && u <= l.u_max + 1e-9
    })
}

fn dense_rear_end_ok(ego: &CubicTrajectory, pred: &CubicTrajectory, l: &ConstraintParams, until: f64) -> bool {
    let n = ((until - ego.t0()) / 1e-3).ceil().max(0.0) as usize;
    ends_first(n).all(|k| {
        let t = (ego.t0() + k as f64 * 1e-3).min(until);
        pred.position(t) - ego.position(t) >= l.safe_distance(ego.speed(t)) - 1e-9
    })
}

/// First exit time on a 1 ms grid, from the kinematic lower bound, that
/// satisfies every constraint.
fn brute_force_tf(req: &PlanRequest, settings: &PlannerSettings) -> Option<f64> {
    let l = &req.limits;
    let (lower, upper) = feasible_time_range(req.p, req.v, l, settings).unwrap();
    let steps = ((upper - lower) / 1e-3).floor() as usize;
    (0..=steps).map(|k| req.t_plan + lower + k as f64 * 1e-3).find(|&tf| {
        if req.neighbor_exits.iter().any(|e| (tf - e.tf).abs() < l.t_min - 1e-9) {
            return false;
        }
        let local = cubic_by_linear_solve(req.t_plan, tf, req.p, req.v);
        let traj = CubicTrajectory::from_local(req.t_plan, local, req.t_plan, tf);
        dense_bounds_ok(&traj, l)
            && req
                .predecessor
                .is_none_or(|pred| dense_rear_end_ok(&traj, &pred, l, tf.min(pred.tf())))
    })
}

fn instance() -> impl Strategy<Value = PlanRequest> {
    (
        -300.0f64..-60.0,
        12.0f64..25.0,
        prop::collection::vec(0.0f64..20.0, 0..3),
        prop::option::of((20.0f64..80.0, 8.0f64..24.0)),
    )
        .prop_map(|(p, v, exits, pred)| PlanRequest {
            id: VehicleId(1),
            t_plan: 0.0,
            p,
            v,
            neighbor_exits: exits
                .into_iter()
                .enumerate()
                .map(|(n, tf)| NeighborExit {
                    id: VehicleId(n as u32 + 2),
                    tf,
                })
                .collect(),
            predecessor: pred.map(|(ahead, vp)| {
                let pp = p + ahead + 10.0 + v;
                CubicTrajectory::affine(0.0, pp, vp, -pp / vp)
            }),
            follower: None,
            limits: common::limits(),
        })
}

proptest! {
    #[test]
    fn boundary_solve_matches_linear_algebra(t0 in 0.0f64..500.0, h in 2.0f64..40.0, p0 in -300.0f64..-5.0, v0 in 0.0f64..25.0) {
        let traj = solve_boundary(&BoundaryConditions::to_conflict_point(t0, t0 + h, p0, v0)).unwrap();
        let expected = cubic_by_linear_solve(t0, t0 + h, p0, v0);
        for (x, y) in traj.recentered(t0).iter().zip(expected) {
            prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
        prop_assert!(traj.position(t0 + h).abs() < 1e-9 * p0.abs());
        prop_assert!(traj.control(t0 + h).abs() < 1e-9);
    }

    #[test]
    fn newell_shift_identity(
        a in -0.05f64..0.05, b in -1.0f64..1.0, c in 5.0f64..25.0, d in -300.0f64..-50.0,
        tau in 0.0f64..5.0, s in 0.0f64..10.0,
    ) {
        let leader = CubicTrajectory::from_coefficients(a, b, c, d, 0.0, 10.0);
        let shifted = shift_trajectory(&leader, tau, &W);
        let t = tau + s;
        let expected = leader.position(t - tau) - W.w * tau;
        prop_assert!((shifted.position(t) - expected).abs() < 1e-9 * expected.abs().max(1.0));
        prop_assert!((shifted.speed(t) - leader.speed(t - tau)).abs() < 1e-9 * c.max(1.0));
    }

    #[test]
    fn time_shift_solves_the_newell_condition(
        vj in 5.0f64..25.0, pj in -200.0f64..-20.0, behind in 11.0f64..80.0, t_now in 0.0f64..100.0,
    ) {
        let leader = CubicTrajectory::affine(t_now - 50.0, pj - 50.0 * vj, vj, t_now + 60.0);
        let pk = pj - behind;
        let tau = solve_time_shift(pk, &leader, t_now, &W).unwrap();
        prop_assert!((leader.position(t_now - tau) - W.w * tau - pk).abs() < 1e-9 * pk.abs());
        // constant-speed leader: tau = gap / (v + w)
        prop_assert!((tau - behind / (vj + W.w)).abs() < 1e-9 * tau.max(1.0));
    }

    #[test]
    fn predicted_exit_hits_the_conflict_point(
        t0 in 0.0f64..100.0, h in 3.0f64..40.0, p0 in -300.0f64..-5.0, v0 in 1.0f64..25.0,
    ) {
        let traj = solve_boundary(&BoundaryConditions::to_conflict_point(t0, t0 + h, p0, v0)).unwrap();
        if let Ok(t) = predicted_exit_time(&traj, 120.0) {
            prop_assert!(traj.position(t).abs() < 1e-6);
            prop_assert!(t <= t0 + h + 1e-9);
        }
    }

    #[test]
    fn bounds_check_agrees_with_dense_sampling(
        t0 in 0.0f64..100.0, h in 5.0f64..30.0, p0 in -300.0f64..-50.0, v0 in 5.0f64..25.0,
    ) {
        let traj = solve_boundary(&BoundaryConditions::to_conflict_point(t0, t0 + h, p0, v0)).unwrap();
        prop_assert_eq!(bounds_check(&traj, &common::limits()).is_ok(), dense_bounds_ok(&traj, &common::limits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn planner_matches_fine_grid_search(req in instance()) {
        let settings = PlannerSettings::default();
        let oracle = brute_force_tf(&req, &settings);
        let planned = plan(&req, &settings).unwrap().planned().map(|(tf, _)| tf);
        match (oracle, planned) {
            (Some(best), Some(tf)) => {
                prop_assert!(tf >= best - 1e-3 - 1e-9, "planner {} beats the oracle {}", tf, best);
                prop_assert!(tf - best <= settings.step + 1e-9, "planner {} vs oracle {}", tf, best);
            }
            (None, None) => {}
            (o, p) => prop_assert!(false, "oracle {:?} vs planner {:?}", o, p),
        }
    }
}

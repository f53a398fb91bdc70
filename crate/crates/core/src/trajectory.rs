//! Energy-optimal unconstrained trajectories.
//!
//! With no active state or control constraint the optimal acceleration is
//! affine in time, so position is a cubic `p(t) = a t³ + b t² + c t + d`. The
//! same representation carries the affine free-flow and time-shifted human
//! predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::ConstraintParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("final time {tf} must be after initial time {t0}")]
    EmptyInterval { t0: f64, tf: f64 },
}

/// Cubic position profile valid on `[t0, tf]`.
///
/// Coefficients are stored about an internal time origin to keep evaluation
/// well conditioned late in long runs; [`CubicTrajectory::coefficients`]
/// returns the expanded absolute-time form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicTrajectory {
    origin: f64,
    local: [f64; 4],
    t0: f64,
    tf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicSample {
    pub p: f64,
    pub v: f64,
    pub u: f64,
}

impl CubicTrajectory {
    /// Builds a trajectory from absolute-time coefficients.
    pub fn from_coefficients(a: f64, b: f64, c: f64, d: f64, t0: f64, tf: f64) -> Self {
        CubicTrajectory {
            origin: 0.0,
            local: [a, b, c, d],
            t0,
            tf,
        }
    }

    /// Builds a trajectory from coefficients in local time `s = t - origin`.
    pub fn from_local(origin: f64, local: [f64; 4], t0: f64, tf: f64) -> Self {
        CubicTrajectory { origin, local, t0, tf }
    }

    /// Constant-speed trajectory through `p` at time `t`.
    pub fn affine(t: f64, p: f64, v: f64, tf: f64) -> Self {
        CubicTrajectory {
            origin: t,
            local: [0.0, 0.0, v, p],
            t0: t,
            tf,
        }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn local(&self) -> [f64; 4] {
        self.local
    }

    pub fn with_interval(mut self, t0: f64, tf: f64) -> Self {
        self.t0 = t0;
        self.tf = tf;
        self
    }

    /// `(a, b, c, d)` such that `p(t) = a t³ + b t² + c t + d` in absolute time.
    pub fn coefficients(&self) -> (f64, f64, f64, f64) {
        let [a, b, c, d] = self.recentered(0.0);
        (a, b, c, d)
    }

    /// Coefficients about a new origin `o`, i.e. of `q(s) = p(o + s)`.
    pub fn recentered(&self, o: f64) -> [f64; 4] {
        let [a, b, c, d] = self.local;
        let h = o - self.origin;
        [
            a,
            3.0 * a * h + b,
            3.0 * a * h * h + 2.0 * b * h + c,
            ((a * h + b) * h + c) * h + d,
        ]
    }

    pub fn position(&self, t: f64) -> f64 {
        let [a, b, c, d] = self.local;
        let s = t - self.origin;
        ((a * s + b) * s + c) * s + d
    }

    pub fn speed(&self, t: f64) -> f64 {
        let [a, b, c, _] = self.local;
        let s = t - self.origin;
        (3.0 * a * s + 2.0 * b) * s + c
    }

    pub fn control(&self, t: f64) -> f64 {
        let [a, b, _, _] = self.local;
        6.0 * a * (t - self.origin) + 2.0 * b
    }

    /// Evaluates position, speed and control. Times outside `[t0, tf]` are
    /// extrapolated.
    pub fn eval(&self, t: f64) -> KinematicSample {
        KinematicSample {
            p: self.position(t),
            v: self.speed(t),
            u: self.control(t),
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t0 && t <= self.tf
    }
}

/// Boundary data of the low-level energy problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryConditions {
    pub t0: f64,
    pub tf: f64,
    pub p0: f64,
    pub v0: f64,
    pub pf: f64,
    pub uf: f64,
}

impl BoundaryConditions {
    /// Entry-to-conflict-point conditions: `p(tf) = 0`, `u(tf) = 0`.
    pub fn to_conflict_point(t0: f64, tf: f64, p0: f64, v0: f64) -> Self {
        BoundaryConditions {
            t0,
            tf,
            p0,
            v0,
            pf: 0.0,
            uf: 0.0,
        }
    }
}

/// Solves `p(t0)=p0, v(t0)=v0, p(tf)=pf, u(tf)=uf` for the cubic.
///
/// In local time `s = t - t0` the first two conditions fix `d` and `c`
/// directly; the remaining pair is a 2×2 triangular system in `a` and `b`.
pub fn solve_boundary(bc: &BoundaryConditions) -> Result<CubicTrajectory, TrajectoryError> {
    if !(bc.tf > bc.t0) {
        return Err(TrajectoryError::EmptyInterval { t0: bc.t0, tf: bc.tf });
    }
    let h = bc.tf - bc.t0;
    let d = bc.p0;
    let c = bc.v0;
    // u(h) = 6 a h + 2 b = uf  and  a h³ + b h² + c h + d = pf
    let a = (bc.p0 + bc.v0 * h + 0.5 * bc.uf * h * h - bc.pf) / (2.0 * h * h * h);
    let b = 0.5 * bc.uf - 3.0 * a * h;
    Ok(CubicTrajectory::from_local(bc.t0, [a, b, c, d], bc.t0, bc.tf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    ControlBelow,
    ControlAbove,
    SpeedBelow,
    SpeedAbove,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundViolation {
    pub kind: BoundKind,
    /// Earliest time in `[t0, tf]` at which the bound is exceeded.
    pub t: f64,
    /// Largest excess over the interval.
    pub magnitude: f64,
}

/// Slack below which a bound counts as respected. Absorbs rounding in the
/// coefficient solve so that cruising at exactly `v_max` passes.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Up to two real roots, ascending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Roots {
    buf: [f64; 2],
    len: usize,
}

impl Roots {
    fn new(r: &[f64]) -> Self {
        let mut buf = [0.0; 2];
        buf[..r.len()].copy_from_slice(r);
        Roots { buf, len: r.len() }
    }

    #[cfg(test)]
    pub(crate) fn as_slice(&self) -> &[f64] {
        &self.buf[..self.len]
    }
}

impl IntoIterator for Roots {
    type Item = f64;
    type IntoIter = std::iter::Take<std::array::IntoIter<f64, 2>>;

    fn into_iter(self) -> Self::IntoIter {
        self.buf.into_iter().take(self.len)
    }
}

/// Real roots of `a x² + b x + c` in ascending order.
pub(crate) fn quadratic_roots(a: f64, b: f64, c: f64) -> Roots {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return Roots::new(&[]);
    }
    if a.abs() <= 1e-14 * scale {
        if b.abs() <= 1e-14 * scale {
            return Roots::new(&[]);
        }
        return Roots::new(&[-c / b]);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Roots::new(&[]);
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    if q == 0.0 {
        return Roots::new(&[0.0]);
    }
    let (x, y) = (q / a, c / q);
    if x == y {
        Roots::new(&[x])
    } else if x < y {
        Roots::new(&[x, y])
    } else {
        Roots::new(&[y, x])
    }
}

/// Earliest `t` in `[t0, t1]` where `f` (a polynomial of degree ≤ 2 in
/// `s = t - t0` given by `q = [q2, q1, q0]`) is strictly positive beyond the
/// tolerance, together with the maximum value of `f` on the interval.
fn first_excess(q: [f64; 3], t0: f64, t1: f64) -> Option<(f64, f64)> {
    let f = |s: f64| (q[0] * s + q[1]) * s + q[2];
    let h = t1 - t0;
    let mut peak = f(0.0).max(f(h));
    if q[0] != 0.0 {
        let s_star = -q[1] / (2.0 * q[0]);
        if s_star > 0.0 && s_star < h {
            peak = peak.max(f(s_star));
        }
    }
    if peak <= BOUND_TOLERANCE {
        return None;
    }
    if f(0.0) > BOUND_TOLERANCE {
        return Some((t0, peak));
    }
    // f(0) is within tolerance and the peak is not, so f crosses the
    // tolerance level upwards somewhere in (0, h].
    let onset = quadratic_roots(q[0], q[1], q[2] - BOUND_TOLERANCE)
        .into_iter()
        .filter(|&s| s >= 0.0 && s <= h)
        .find(|&s| {
            let ds = 1e-9 * h.max(1.0);
            f((s + ds).min(h)) > BOUND_TOLERANCE
        })
        .unwrap_or(0.0);
    Some((t0 + onset, peak))
}

/// Checks control and speed bounds over `[t0, tf]` analytically and returns
/// the violation with the earliest onset.
///
/// Control is affine so its extremes sit at the endpoints; speed is quadratic
/// and additionally peaks at its stationary point when that lies inside.
pub fn bounds_check(traj: &CubicTrajectory, limits: &ConstraintParams) -> Result<(), BoundViolation> {
    let (t0, tf) = (traj.t0, traj.tf);
    let [a, b, c, _] = traj.recentered(t0);
    let u = [0.0, 6.0 * a, 2.0 * b];
    let v = [3.0 * a, 2.0 * b, c];
    let neg = |q: [f64; 3]| [-q[0], -q[1], -q[2]];
    let shift = |q: [f64; 3], k: f64| [q[0], q[1], q[2] + k];

    let candidates = [
        (BoundKind::ControlBelow, neg(shift(u, -limits.u_min))),
        (BoundKind::ControlAbove, shift(u, -limits.u_max)),
        (BoundKind::SpeedBelow, neg(shift(v, -limits.v_min))),
        (BoundKind::SpeedAbove, shift(v, -limits.v_max)),
    ];
    let worst = candidates
        .into_iter()
        .filter_map(|(kind, q)| first_excess(q, t0, tf).map(|(t, magnitude)| BoundViolation { kind, t, magnitude }))
        .min_by(|x, y| x.t.partial_cmp(&y.t).unwrap());
    match worst {
        Some(v) => Err(v),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn limits() -> ConstraintParams {
        ConstraintParams::new(-3.0, 2.0, 0.0, 25.0, 2.0, 10.0, 1.0).unwrap()
    }

    fn coeffs_close(traj: &CubicTrajectory, expected: (f64, f64, f64, f64)) {
        let (a, b, c, d) = traj.coefficients();
        assert_relative_eq!(a, expected.0, epsilon = 1e-12);
        assert_relative_eq!(b, expected.1, epsilon = 1e-12);
        assert_relative_eq!(c, expected.2, epsilon = 1e-12);
        assert_relative_eq!(d, expected.3, epsilon = 1e-9);
    }

    #[test]
    fn cruise_case_is_pure_constant_speed() {
        let t = solve_boundary(&BoundaryConditions::to_conflict_point(0.0, 12.5, -300.0, 24.0)).unwrap();
        coeffs_close(&t, (0.0, 0.0, 24.0, -300.0));
    }

    #[test]
    fn ten_second_case() {
        let t = solve_boundary(&BoundaryConditions::to_conflict_point(0.0, 10.0, -300.0, 24.0)).unwrap();
        coeffs_close(&t, (-0.03, 0.9, 24.0, -300.0));
        assert_relative_eq!(t.control(10.0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn time_translated_cruise() {
        let t = solve_boundary(&BoundaryConditions::to_conflict_point(5.0, 17.5, -300.0, 24.0)).unwrap();
        coeffs_close(&t, (0.0, 0.0, 24.0, -420.0));
    }

    #[test]
    fn empty_interval_rejected() {
        let bc = BoundaryConditions::to_conflict_point(3.0, 3.0, -300.0, 24.0);
        assert!(solve_boundary(&bc).is_err());
        let bc = BoundaryConditions::to_conflict_point(3.0, 2.0, -300.0, 24.0);
        assert!(solve_boundary(&bc).is_err());
    }

    #[test]
    fn eval_examples() {
        let cruise = CubicTrajectory::from_coefficients(0.0, 0.0, 24.0, -300.0, 0.0, 12.5);
        let s = cruise.eval(0.0);
        assert_eq!((s.p, s.v, s.u), (-300.0, 24.0, 0.0));

        let cubic = CubicTrajectory::from_coefficients(-0.03, 0.9, 24.0, -300.0, 0.0, 10.0);
        let s = cubic.eval(10.0);
        assert_relative_eq!(s.p, 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.v, 33.0, epsilon = 1e-12);
        assert_relative_eq!(s.u, 0.0, epsilon = 1e-12);
        assert_eq!(cubic.eval(4.2), cubic.eval(4.2));
    }

    #[test]
    fn bounds_examples() {
        let lim = limits();
        let cruise = CubicTrajectory::from_coefficients(0.0, 0.0, 24.0, -300.0, 0.0, 12.5);
        assert!(bounds_check(&cruise, &lim).is_ok());

        let fast = CubicTrajectory::from_coefficients(-0.03, 0.9, 24.0, -300.0, 0.0, 10.0);
        let v = bounds_check(&fast, &lim).unwrap_err();
        assert_eq!(v.kind, BoundKind::SpeedAbove);
        assert_relative_eq!(v.magnitude, 8.0, epsilon = 1e-9);
        // v(t) = -0.09 t² + 1.8 t + 24 reaches 25 at t = 10 - sqrt(100 - 100/9)
        let onset = 10.0 - (100.0f64 - 1.0 / 0.09).sqrt();
        assert_relative_eq!(v.t, onset, epsilon = 1e-6);

        let pushy = CubicTrajectory::from_coefficients(0.0, 1.5, 10.0, -300.0, 0.0, 5.0);
        let v = bounds_check(&pushy, &lim).unwrap_err();
        assert_eq!(v.kind, BoundKind::ControlAbove);
        assert_eq!(v.t, 0.0);
    }

    #[test]
    fn quadratic_roots_cases() {
        assert_eq!(quadratic_roots(1.0, -3.0, 2.0).as_slice(), [1.0, 2.0]);
        assert_eq!(quadratic_roots(0.0, 2.0, -4.0).as_slice(), [2.0]);
        assert!(quadratic_roots(1.0, 0.0, 1.0).as_slice().is_empty());
        assert!(quadratic_roots(0.0, 0.0, 1.0).as_slice().is_empty());
    }

    proptest! {
        #[test]
        fn boundary_residuals_small(
            t0 in 0.0f64..3000.0,
            h in 1.0f64..100.0,
            p0 in -400.0f64..-1.0,
            v0 in 0.0f64..30.0,
            pf in -1.0f64..1.0,
            uf in -1.0f64..1.0,
        ) {
            let bc = BoundaryConditions { t0, tf: t0 + h, p0, v0, pf, uf };
            let t = solve_boundary(&bc).unwrap();
            let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1.0);
            prop_assert!(rel(t.position(t0), p0) < 1e-9);
            prop_assert!(rel(t.speed(t0), v0) < 1e-9);
            prop_assert!(rel(t.position(t0 + h), pf) < 1e-9);
            prop_assert!(rel(t.control(t0 + h), uf) < 1e-9);
        }

        #[test]
        fn derivatives_match_finite_differences(
            a in -0.1f64..0.1, b in -2.0f64..2.0, c in 0.0f64..30.0, d in -300.0f64..0.0,
            t in 0.0f64..20.0,
        ) {
            let traj = CubicTrajectory::from_coefficients(a, b, c, d, 0.0, 20.0);
            let h = 1e-3;
            let fd_v = (traj.position(t + h) - traj.position(t - h)) / (2.0 * h);
            let fd_u = (traj.speed(t + h) - traj.speed(t - h)) / (2.0 * h);
            // central differences are exact up to the a·h² term
            prop_assert!((fd_v - traj.speed(t)).abs() <= a.abs() * h * h + 1e-7);
            prop_assert!((fd_u - traj.control(t)).abs() < 1e-7);
        }

        #[test]
        fn recentering_preserves_values(
            a in -0.1f64..0.1, b in -2.0f64..2.0, c in 0.0f64..30.0, d in -300.0f64..0.0,
            o in -50.0f64..50.0, t in -20.0f64..20.0,
        ) {
            let traj = CubicTrajectory::from_coefficients(a, b, c, d, 0.0, 20.0);
            let moved = CubicTrajectory::from_local(o, traj.recentered(o), 0.0, 20.0);
            prop_assert!((moved.position(t) - traj.position(t)).abs() < 1e-8);
            prop_assert!((moved.speed(t) - traj.speed(t)).abs() < 1e-10);
        }
    }
}

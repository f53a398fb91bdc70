//! Intelligent driver model for human-driven vehicles, with per-driver
//! parameter perturbation and virtual projection inside the merging zone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{ConstraintParams, Registry, RegistryError, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Desired speed.
    pub v_bar: f64,
    /// Desired standstill distance.
    pub d_underbar: f64,
    /// Desired time gap.
    #[serde(rename = "T")]
    pub time_gap: f64,
    /// Maximum acceleration.
    pub a: f64,
    /// Comfortable deceleration.
    pub b: f64,
}

impl IdmParams {
    pub fn validate(&self) -> Result<(), IdmError> {
        for (name, v) in [
            ("v_bar", self.v_bar),
            ("d_underbar", self.d_underbar),
            ("T", self.time_gap),
            ("a", self.a),
            ("b", self.b),
        ] {
            if !(v > 0.0) {
                return Err(IdmError::Parameter(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverProfile {
    pub id: VehicleId,
    pub params: IdmParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IdmError {
    #[error("IDM parameter `{0}` must be positive")]
    Parameter(&'static str),
    #[error("non-positive gap {gap} m to leader {leader}")]
    GapNonPositive { gap: f64, leader: VehicleId },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// IDM acceleration behind a leader `gap` metres ahead, clamped to the control
/// bounds. The desired gap is floored at zero before it enters the
/// interaction term.
///
/// Returns `None` when `gap <= 0`, where the model is undefined.
pub fn idm_accel(v_k: f64, v_j: f64, gap: f64, params: &IdmParams, limits: &ConstraintParams) -> Option<f64> {
    if !(gap > 0.0) {
        return None;
    }
    let s_star = (params.d_underbar + v_k * params.time_gap
        - v_k * (v_j - v_k) / (2.0 * (params.a * params.b).sqrt()))
    .max(0.0);
    let u = params.a * (1.0 - (v_k / params.v_bar).powi(4) - (s_star / gap).powi(2));
    Some(u.clamp(limits.u_min, limits.u_max))
}

/// Free-road IDM acceleration, clamped.
pub fn idm_free(v_k: f64, params: &IdmParams, limits: &ConstraintParams) -> f64 {
    (params.a * (1.0 - (v_k / params.v_bar).powi(4))).clamp(limits.u_min, limits.u_max)
}

/// Scales every parameter by an independent uniform factor in
/// `[1 - width, 1 + width]`.
pub fn perturb_params(base: &IdmParams, width: f64, seed: u64) -> IdmParams {
    if width == 0.0 {
        return *base;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = || rng.gen_range(1.0 - width..=1.0 + width);
    IdmParams {
        v_bar: base.v_bar * f(),
        d_underbar: base.d_underbar * f(),
        time_gap: base.time_gap * f(),
        a: base.a * f(),
        b: base.b * f(),
    }
}

/// Control input of vehicle `k` under IDM, following its leader (projected
/// when `k` is inside the merging zone) or the free road.
pub fn hdv_control(
    k: VehicleId,
    registry: &Registry,
    params: &IdmParams,
    limits: &ConstraintParams,
) -> Result<f64, IdmError> {
    let ego = registry.state(k)?;
    match registry.leader(k)? {
        Some(j) => {
            let lead = registry.state(j)?;
            let gap = lead.p - ego.p;
            idm_accel(ego.v, lead.v, gap, params, limits).ok_or(IdmError::GapNonPositive { gap, leader: j })
        }
        None => Ok(idm_free(ego.v, params, limits)),
    }
}

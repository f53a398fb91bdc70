//! Road geometry, vehicle registry and the set/ordering queries used by every
//! other layer.
//!
//! Positions are measured along each road with the conflict point at the
//! origin, so every vehicle inside the control zone has `p` in
//! `[-control_zone_length, 0]`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Cav,
    Hdv,
}

impl VehicleClass {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Cav => "CAV",
            VehicleClass::Hdv => "HDV",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Road {
    Main,
    Ramp,
}

impl Road {
    pub fn other(self) -> Road {
        match self {
            Road::Main => Road::Ramp,
            Road::Ramp => Road::Main,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Road::Main => "main",
            Road::Ramp => "ramp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("control_zone_length must be positive, got {0}")]
    ControlZone(f64),
    #[error("merging_zone_length must lie in (0, control_zone_length], got {0}")]
    MergingZone(f64),
}

/// Control zone and merging zone lengths. The conflict point is the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub control_zone_length: f64,
    pub merging_zone_length: f64,
}

impl Geometry {
    pub fn new(control_zone_length: f64, merging_zone_length: f64) -> Result<Self, GeometryError> {
        let g = Geometry {
            control_zone_length,
            merging_zone_length,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.control_zone_length > 0.0) {
            return Err(GeometryError::ControlZone(self.control_zone_length));
        }
        if !(self.merging_zone_length > 0.0 && self.merging_zone_length <= self.control_zone_length) {
            return Err(GeometryError::MergingZone(self.merging_zone_length));
        }
        Ok(())
    }

    /// Position of the control zone entry.
    pub fn entry_position(&self) -> f64 {
        -self.control_zone_length
    }

    pub fn in_merging_zone(&self, p: f64) -> bool {
        p >= -self.merging_zone_length && p <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid constraint parameter `{field}`: {reason}")]
pub struct ConstraintError {
    pub field: &'static str,
    pub reason: &'static str,
}

/// Control, speed and safety bounds shared by the planner, the human model
/// and the audits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintParams {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub t_min: f64,
    pub d_min: f64,
    pub t_h: f64,
}

impl ConstraintParams {
    pub fn new(
        u_min: f64,
        u_max: f64,
        v_min: f64,
        v_max: f64,
        t_min: f64,
        d_min: f64,
        t_h: f64,
    ) -> Result<Self, ConstraintError> {
        let c = ConstraintParams {
            u_min,
            u_max,
            v_min,
            v_max,
            t_min,
            d_min,
            t_h,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        let err = |field, reason| Err(ConstraintError { field, reason });
        if !(self.u_min < 0.0) {
            return err("u_min", "must be negative");
        }
        if !(self.u_max > 0.0) {
            return err("u_max", "must be positive");
        }
        if !(self.v_min >= 0.0) {
            return err("v_min", "must be non-negative");
        }
        if !(self.v_max > self.v_min) {
            return err("v_max", "must exceed v_min");
        }
        if !(self.t_min > 0.0) {
            return err("t_min", "must be positive");
        }
        if !(self.d_min > 0.0) {
            return err("d_min", "must be positive");
        }
        if !(self.t_h > 0.0) {
            return err("t_h", "must be positive");
        }
        Ok(())
    }

    /// Rear-end envelope: required distance behind a predecessor at speed `v`.
    pub fn safe_distance(&self, v: f64) -> f64 {
        self.d_min + self.t_h * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub class: VehicleClass,
    pub road: Road,
    pub p: f64,
    pub v: f64,
    /// Last applied control input.
    pub u: f64,
    pub t_entry: f64,
    pub t_exit: Option<f64>,
}

impl VehicleState {
    pub fn in_zone(&self) -> bool {
        self.t_exit.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalSpec {
    pub class: VehicleClass,
    pub road: Road,
    pub v0: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("vehicle {0} is not inside the control zone")]
    NotInZone(VehicleId),
    #[error("arrival at t={t} precedes the previous arrival at t={last}")]
    OutOfOrder { t: f64, last: f64 },
    #[error("arrival speed {v0} outside [{lo}, {hi}]")]
    SpeedOutOfRange { v0: f64, lo: f64, hi: f64 },
    #[error("entry blocked by vehicle {blocker}: gap {gap:.3} m < required {required:.3} m")]
    Deferred {
        blocker: VehicleId,
        gap: f64,
        required: f64,
    },
}

/// Vehicle registry. Ids are assigned in entry order starting from 1, so the
/// id doubles as the index into the state vector.
#[derive(Debug, Clone)]
pub struct Registry {
    geometry: Geometry,
    limits: ConstraintParams,
    arrival_speed: (f64, f64),
    vehicles: Vec<VehicleState>,
    active: Vec<VehicleId>,
    last_arrival: f64,
}

impl Registry {
    pub fn new(geometry: Geometry, limits: ConstraintParams, arrival_speed: (f64, f64)) -> Self {
        Registry {
            geometry,
            limits,
            arrival_speed,
            vehicles: Vec::new(),
            active: Vec::new(),
            last_arrival: f64::NEG_INFINITY,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn limits(&self) -> &ConstraintParams {
        &self.limits
    }

    /// Whether a vehicle entering `road` at speed `v0` right now would start
    /// outside the rear-end envelope of the last vehicle on that road.
    pub fn entry_clearance(&self, road: Road, v0: f64) -> Result<(), RegistryError> {
        let p0 = self.geometry.entry_position();
        if let Some(last) = self.last_on_road(road) {
            let s = self.state(last)?;
            let gap = s.p - p0;
            let required = self.limits.safe_distance(v0);
            if gap < required {
                return Err(RegistryError::Deferred {
                    blocker: last,
                    gap,
                    required,
                });
            }
        }
        Ok(())
    }

    pub fn register_arrival(&mut self, spec: ArrivalSpec, t: f64) -> Result<VehicleId, RegistryError> {
        if t < self.last_arrival {
            return Err(RegistryError::OutOfOrder {
                t,
                last: self.last_arrival,
            });
        }
        let (lo, hi) = self.arrival_speed;
        if !(spec.v0 >= lo && spec.v0 <= hi) {
            return Err(RegistryError::SpeedOutOfRange { v0: spec.v0, lo, hi });
        }
        self.entry_clearance(spec.road, spec.v0)?;

        let id = VehicleId(self.vehicles.len() as u32 + 1);
        self.vehicles.push(VehicleState {
            id,
            class: spec.class,
            road: spec.road,
            p: self.geometry.entry_position(),
            v: spec.v0,
            u: 0.0,
            t_entry: t,
            t_exit: None,
        });
        self.active.push(id);
        self.last_arrival = t;
        Ok(id)
    }

    pub fn state(&self, id: VehicleId) -> Result<&VehicleState, RegistryError> {
        id.0.checked_sub(1)
            .and_then(|i| self.vehicles.get(i as usize))
            .ok_or(RegistryError::UnknownVehicle(id))
    }

    pub fn state_mut(&mut self, id: VehicleId) -> Result<&mut VehicleState, RegistryError> {
        id.0.checked_sub(1)
            .and_then(|i| self.vehicles.get_mut(i as usize))
            .ok_or(RegistryError::UnknownVehicle(id))
    }

    fn in_zone_state(&self, id: VehicleId) -> Result<&VehicleState, RegistryError> {
        let s = self.state(id)?;
        if !s.in_zone() {
            return Err(RegistryError::NotInZone(id));
        }
        Ok(s)
    }

    /// Removes the vehicle from the in-zone set. Its state stays queryable.
    pub fn mark_exited(&mut self, id: VehicleId, t: f64) -> Result<(), RegistryError> {
        self.state_mut(id)?.t_exit = Some(t);
        self.active.retain(|&a| a != id);
        Ok(())
    }

    /// In-zone vehicle ids in ascending order.
    pub fn active(&self) -> &[VehicleId] {
        &self.active
    }

    pub fn all(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn last_on_road(&self, road: Road) -> Option<VehicleId> {
        self.active
            .iter()
            .rev()
            .copied()
            .find(|&id| self.vehicles[id.0 as usize - 1].road == road)
    }

    /// Splits the other in-zone vehicles into same-road and neighbor-road sets.
    pub fn neighbors(&self, i: VehicleId) -> Result<(Vec<VehicleId>, Vec<VehicleId>), RegistryError> {
        let road = self.in_zone_state(i)?.road;
        let (same, other) = self
            .active
            .iter()
            .copied()
            .filter(|&j| j != i)
            .partition(|&j| self.vehicles[j.0 as usize - 1].road == road);
        Ok((same, other))
    }

    /// Immediate predecessor of `i`.
    ///
    /// Without projection this is the largest same-road id below `i`. With
    /// projection, the nearest vehicle ahead by position on either road, where
    /// positions are totally ordered by (position, lower id first); ties
    /// between candidates go to the lower id.
    pub fn predecessor(&self, i: VehicleId, projected: bool) -> Result<Option<VehicleId>, RegistryError> {
        let ego = self.in_zone_state(i)?;
        if !projected {
            return Ok(self
                .active
                .iter()
                .rev()
                .copied()
                .filter(|&j| j < i)
                .find(|&j| self.vehicles[j.0 as usize - 1].road == ego.road));
        }
        let best = self
            .active
            .iter()
            .copied()
            .filter(|&j| j != i)
            .map(|j| &self.vehicles[j.0 as usize - 1])
            .filter(|s| s.p > ego.p || (s.p == ego.p && s.id < ego.id))
            .min_by(|a, b| match a.p.partial_cmp(&b.p).unwrap_or(Ordering::Equal) {
                Ordering::Equal => a.id.cmp(&b.id),
                o => o,
            });
        Ok(best.map(|s| s.id))
    }

    /// Predecessor with projection switched on exactly when `i` is inside the
    /// merging zone.
    pub fn leader(&self, i: VehicleId) -> Result<Option<VehicleId>, RegistryError> {
        let p = self.in_zone_state(i)?.p;
        self.predecessor(i, self.geometry.in_merging_zone(p))
    }
}

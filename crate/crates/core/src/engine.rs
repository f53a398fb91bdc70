//! Discrete-time closed-loop simulation.
//!
//! Each step admits due arrivals, plans or re-plans CAVs in id order against a
//! frozen snapshot, resolves every vehicle's control from that same snapshot
//! and then integrates all vehicles together.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::human::{hdv_control, perturb_params, IdmError, IdmParams};
use crate::metrics::energy_per_mass;
use crate::planner::{plan, violated_constraints, NeighborExit, PlanOutcome, PlanRequest, PlannerSettings};
use crate::predictor::{predict_all, refresh_predictions, NewellParams, PredictionRecord, PREDICTION_HORIZON};
use crate::risk::{conflict_metrics, should_replan, RiskParams};
use crate::rng::{mix, stream, Purpose};
use crate::scenario::{ArrivalSpec, ConstraintParams, Geometry, Registry, RegistryError, Road, VehicleClass, VehicleId};
use crate::trajectory::CubicTrajectory;

/// Shortest admissible inter-arrival time on one road.
pub const MIN_HEADWAY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedArrival {
    pub t: f64,
    pub road: Road,
    pub class: VehicleClass,
    pub v0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub geometry: Geometry,
    pub limits: ConstraintParams,
    pub newell: NewellParams,
    pub risk: RiskParams,
    /// Base IDM parameters; HDVs draw perturbed copies, CAVs in fallback use
    /// them unperturbed.
    pub idm: IdmParams,
    /// Half-width of the multiplicative IDM perturbation.
    pub perturbation: f64,
    /// Total traffic volume over both roads, veh/h.
    pub volume: f64,
    /// Fraction of CAVs.
    pub penetration: f64,
    pub arrival_speed: (f64, f64),
    /// Standard deviation of the per-road inter-arrival time; defaults to half
    /// its mean.
    #[serde(default)]
    pub inter_arrival_sd: Option<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Number of vehicles to generate; ignored with scripted arrivals.
    #[serde(default)]
    pub vehicles: usize,
    #[serde(default)]
    pub seed: u64,
    /// Risk-triggered re-planning.
    #[serde(default = "default_true")]
    pub replanning: bool,
    #[serde(default)]
    pub planner: PlannerSettings,
    /// Minimum time between two risk-triggered re-plans of one vehicle.
    #[serde(default = "default_cooldown")]
    pub replan_cooldown: f64,
    /// Interval between plan attempts of a CAV in fallback.
    #[serde(default = "default_retry")]
    pub fallback_retry: f64,
    /// Simulated-time cap; defaults to the last arrival plus one hour.
    #[serde(default)]
    pub max_time: Option<f64>,
    /// Fixed arrival list replacing the random arrival process.
    #[serde(default)]
    pub arrivals: Option<Vec<ScriptedArrival>>,
}

fn default_dt() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}
fn default_cooldown() -> f64 {
    0.5
}
fn default_retry() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

fn check(ok: bool, field: &str, reason: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError {
            field: field.to_string(),
            reason: reason.to_string(),
        })
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.geometry;
        check(
            g.control_zone_length.is_finite() && g.control_zone_length > 0.0,
            "geometry.control_zone_length",
            "must be positive",
        )?;
        check(
            g.merging_zone_length > 0.0 && g.merging_zone_length <= g.control_zone_length,
            "geometry.merging_zone_length",
            "must lie in (0, control_zone_length]",
        )?;
        self.limits.validate().map_err(|e| ConfigError {
            field: format!("limits.{}", e.field),
            reason: e.reason.to_string(),
        })?;
        check(self.newell.w > 0.0, "newell.w", "must be positive")?;
        check(self.risk.t_cr_same > 0.0, "risk.t_cr_same", "must be positive")?;
        check(self.risk.t_cr_neighbor > 0.0, "risk.t_cr_neighbor", "must be positive")?;
        check(self.risk.v_tilde >= 0.0, "risk.v_tilde", "must be non-negative")?;
        self.idm.validate().map_err(|e| match e {
            IdmError::Parameter(name) => ConfigError {
                field: format!("idm.{name}"),
                reason: "must be positive".into(),
            },
            other => ConfigError {
                field: "idm".into(),
                reason: other.to_string(),
            },
        })?;
        check(
            (0.0..1.0).contains(&self.perturbation),
            "perturbation",
            "must lie in [0, 1)",
        )?;
        check(self.volume.is_finite() && self.volume > 0.0, "volume", "must be positive")?;
        check(
            (0.0..=1.0).contains(&self.penetration),
            "penetration",
            "must lie in [0, 1]",
        )?;
        let (lo, hi) = self.arrival_speed;
        check(
            lo >= 0.0 && hi >= lo && hi.is_finite(),
            "arrival_speed",
            "must be a range [lo, hi] with 0 <= lo <= hi",
        )?;
        if let Some(sd) = self.inter_arrival_sd {
            check(sd.is_finite() && sd >= 0.0, "inter_arrival_sd", "must be non-negative")?;
        }
        check(self.dt.is_finite() && self.dt > 0.0, "dt", "must be positive")?;
        let p = &self.planner;
        check(p.step > 0.0, "planner.step", "must be positive")?;
        check(p.check_step >= 0.0, "planner.check_step", "must be non-negative")?;
        check(p.upper_factor >= 1.0, "planner.upper_factor", "must be at least 1")?;
        check(p.upper_cap > 0.0, "planner.upper_cap", "must be positive")?;
        check(self.replan_cooldown >= 0.0, "replan_cooldown", "must be non-negative")?;
        check(self.fallback_retry > 0.0, "fallback_retry", "must be positive")?;
        if let Some(m) = self.max_time {
            check(m > 0.0, "max_time", "must be positive")?;
        }
        match &self.arrivals {
            Some(list) => {
                check(!list.is_empty(), "arrivals", "must not be empty")?;
                for (n, a) in list.iter().enumerate() {
                    check(a.t.is_finite() && a.t >= 0.0, &format!("arrivals[{n}].t"), "must be non-negative")?;
                    check(
                        a.v0 >= lo && a.v0 <= hi,
                        &format!("arrivals[{n}].v0"),
                        "must lie within arrival_speed",
                    )?;
                }
                check(
                    list.windows(2).all(|w| w[0].t <= w[1].t),
                    "arrivals",
                    "must be sorted by time",
                )?;
            }
            None => check(self.vehicles >= 1, "vehicles", "must be at least 1")?,
        }
        Ok(())
    }
}

/// One entry of the arrival schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub t: f64,
    pub road: Road,
    pub class: VehicleClass,
    pub v0: f64,
    pub driver_seed: u64,
}

fn road_index(road: Road) -> u64 {
    match road {
        Road::Main => 0,
        Road::Ramp => 1,
    }
}

/// Arrival schedule sorted by time (main road first on ties).
///
/// Every draw is keyed by the arrival's slot `(road, n-th arrival on that
/// road)`, so runs that differ only in penetration see the same arrival times,
/// speeds and drivers, and their CAV sets are nested.
pub fn generate_arrivals(cfg: &SimConfig) -> Vec<Arrival> {
    if let Some(list) = &cfg.arrivals {
        return list
            .iter()
            .enumerate()
            .map(|(n, a)| Arrival {
                t: a.t,
                road: a.road,
                class: a.class,
                v0: a.v0,
                driver_seed: mix(&[cfg.seed, Purpose::Driver as u64, n as u64]),
            })
            .collect();
    }
    let mean = 7200.0 / cfg.volume;
    let sd = cfg.inter_arrival_sd.unwrap_or(0.5 * mean);
    let normal = Normal::new(mean, sd).expect("validated standard deviation");
    let (lo, hi) = cfg.arrival_speed;

    let mut all = Vec::with_capacity(2 * cfg.vehicles);
    for (road, purpose) in [(Road::Main, Purpose::ArrivalMain), (Road::Ramp, Purpose::ArrivalRamp)] {
        let mut t = 0.0;
        for n in 0..cfg.vehicles as u64 {
            let mut rng = stream(cfg.seed, purpose, n);
            let gap = (0..1000)
                .map(|_| normal.sample(&mut rng))
                .find(|&g| g >= MIN_HEADWAY)
                .unwrap_or(MIN_HEADWAY);
            t += gap;
            let slot = mix(&[road_index(road), n]);
            let class = if stream(cfg.seed, Purpose::Class, slot).gen::<f64>() < cfg.penetration {
                VehicleClass::Cav
            } else {
                VehicleClass::Hdv
            };
            let v0 = if hi > lo {
                stream(cfg.seed, Purpose::EntrySpeed, slot).gen_range(lo..=hi)
            } else {
                lo
            };
            all.push(Arrival {
                t,
                road,
                class,
                v0,
                driver_seed: mix(&[cfg.seed, Purpose::Driver as u64, slot]),
            });
        }
    }
    all.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.road.cmp(&b.road)));
    all.truncate(cfg.vehicles);
    all
}

/// Semi-implicit Euler step: the speed is updated first and the new speed
/// advances the position. With `floor` the speed is clamped at zero.
pub fn integrate(p: f64, v: f64, u: f64, dt: f64, floor: bool) -> (f64, f64) {
    let mut v1 = v + u * dt;
    if floor && v1 < 0.0 {
        v1 = 0.0;
    }
    (p + v1 * dt, v1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub id: VehicleId,
    pub class: VehicleClass,
    pub road: Road,
    pub p: f64,
    pub v: f64,
    /// Control applied over `[t, t + dt)`.
    pub u: f64,
    /// Number of plans committed so far (0 for HDVs and unplanned CAVs).
    pub plan_epoch: u32,
    /// A risk-triggered re-plan was committed at this step.
    pub replanned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VehicleSummary {
    pub id: VehicleId,
    pub class: VehicleClass,
    pub road: Road,
    /// Scheduled arrival time; entry can be later when deferred.
    pub t_scheduled: f64,
    pub t_entry: f64,
    pub t_exit: Option<f64>,
    /// Energy per unit mass spent inside the control zone.
    pub energy: f64,
    pub plans: u32,
    pub replans: u32,
}

impl VehicleSummary {
    pub fn travel_time(&self) -> Option<f64> {
        self.t_exit.map(|t| t - self.t_entry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// IDM gap to the leader was not positive; `u_min` was applied.
    ModelBreakdown,
    /// No feasible exit time; the CAV runs the fallback controller.
    Infeasible,
    /// Risk-triggered re-plan committed.
    Replan,
    /// Entry postponed to keep the rear-end envelope at the entry point.
    Deferred,
    /// Simulation stopped at the time cap with vehicles still inside.
    Timeout,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ModelBreakdown => "model_breakdown",
            EventKind::Infeasible => "infeasible",
            EventKind::Replan => "replan",
            EventKind::Deferred => "deferred",
            EventKind::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub kind: EventKind,
    pub t: f64,
    pub ids: Vec<VehicleId>,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub dt: f64,
    /// Ordered by `(t, id)`.
    pub records: Vec<StepRecord>,
    /// Indexed by id − 1.
    pub vehicles: Vec<VehicleSummary>,
    pub events: Vec<Event>,
    pub end_time: f64,
}

impl SimLog {
    pub fn exited(&self) -> impl Iterator<Item = &VehicleSummary> {
        self.vehicles.iter().filter(|s| s.t_exit.is_some())
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

#[derive(Debug, Clone)]
struct Agent {
    driver: IdmParams,
    plan: Option<CubicTrajectory>,
    /// Time of the last plan attempt.
    attempted: f64,
    epoch: u32,
    replans: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlanReason {
    Entry,
    Retry,
    Risk,
}

/// Simulation state. `step` advances it by one `dt`.
pub struct Simulation {
    cfg: SimConfig,
    registry: Registry,
    queues: [VecDeque<Arrival>; 2],
    /// Whether the current head of each queue has already been reported as
    /// deferred.
    reported: [bool; 2],
    agents: Vec<Agent>,
    scheduled: Vec<f64>,
    k: u64,
    t_cap: f64,
    finished: bool,
    log: SimLog,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let arrivals = generate_arrivals(&cfg);
        let last = arrivals.last().map_or(0.0, |a| a.t);
        let mut queues = [VecDeque::new(), VecDeque::new()];
        for a in arrivals {
            queues[road_index(a.road) as usize].push_back(a);
        }
        Ok(Simulation {
            registry: Registry::new(cfg.geometry, cfg.limits, cfg.arrival_speed),
            queues,
            reported: [false; 2],
            agents: Vec::new(),
            scheduled: Vec::new(),
            k: 0,
            t_cap: cfg.max_time.unwrap_or(last + 3600.0),
            finished: false,
            log: SimLog {
                dt: cfg.dt,
                ..SimLog::default()
            },
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.cfg.dt
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Committed plan of a CAV, if any.
    pub fn plan_of(&self, id: VehicleId) -> Option<&CubicTrajectory> {
        self.agents.get(id.0 as usize - 1).and_then(|a| a.plan.as_ref())
    }

    /// IDM parameters the vehicle uses when it is not following a plan.
    pub fn driver_of(&self, id: VehicleId) -> Option<&IdmParams> {
        self.agents.get(id.0 as usize - 1).map(|a| &a.driver)
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Vehicles still waiting to enter.
    pub fn pending(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn log(&self) -> &SimLog {
        &self.log
    }

    /// Runs to completion and returns the log.
    pub fn finish_run(mut self) -> SimLog {
        while !self.finished {
            self.step();
        }
        self.log
    }

    pub fn step(&mut self) {
        if self.finished {
            return;
        }
        let t = self.time();
        let dt = self.cfg.dt;
        let arrived = self.admit(t);
        let replanned = self.plan_pass(t, &arrived);

        // Every control comes from the state at `t`.
        let limits = self.cfg.limits;
        let active = self.registry.active().to_vec();
        let mut controls = Vec::with_capacity(active.len());
        for &id in &active {
            let agent = &self.agents[id.0 as usize - 1];
            let u = match &agent.plan {
                Some(traj) => traj.control(t + 0.5 * dt),
                None => match hdv_control(id, &self.registry, &agent.driver, &limits) {
                    Ok(u) => u,
                    Err(IdmError::GapNonPositive { gap, leader }) => {
                        self.log.events.push(Event {
                            kind: EventKind::ModelBreakdown,
                            t,
                            ids: vec![id, leader],
                            magnitude: -gap,
                        });
                        limits.u_min
                    }
                    Err(e) => panic!("control of vehicle {id}: {e}"),
                },
            };
            controls.push(u);
        }

        for (&id, &u) in active.iter().zip(&controls) {
            let epoch = self.agents[id.0 as usize - 1].epoch;
            let s = self.registry.state_mut(id).expect("active vehicle");
            s.u = u;
            self.log.records.push(StepRecord {
                t,
                id,
                class: s.class,
                road: s.road,
                p: s.p,
                v: s.v,
                u,
                plan_epoch: epoch,
                replanned: replanned.contains(&id),
            });
            let p0 = s.p;
            let (p1, v1) = integrate(s.p, s.v, u, dt, true);
            s.p = p1;
            s.v = v1;
            if p1 >= 0.0 {
                // linear interpolation of the crossing within the step
                let frac = if p1 > p0 { -p0 / (p1 - p0) } else { 1.0 };
                self.registry.mark_exited(id, t + frac * dt).expect("active vehicle");
            }
        }

        self.k += 1;
        let now = self.time();
        if self.registry.active().is_empty() && self.pending() == 0 {
            self.finish(now);
        } else if now > self.t_cap {
            self.log.events.push(Event {
                kind: EventKind::Timeout,
                t: now,
                ids: self.registry.active().to_vec(),
                magnitude: self.pending() as f64,
            });
            self.finish(now);
        }
    }

    /// Registers due arrivals in schedule order and returns the new CAVs. A
    /// blocked head of queue holds back its road until the entry envelope
    /// clears.
    fn admit(&mut self, t: f64) -> Vec<VehicleId> {
        let eps = 1e-9 * self.cfg.dt;
        let mut arrived = Vec::new();
        let mut blocked = [false, false];
        loop {
            let next = (0..2)
                .filter(|&r| !blocked[r])
                .filter_map(|r| self.queues[r].front().map(|a| (r, *a)))
                .filter(|(_, a)| a.t <= t + eps)
                .min_by(|x, y| x.1.t.total_cmp(&y.1.t).then(x.0.cmp(&y.0)));
            let Some((r, a)) = next else { break };
            let spec = ArrivalSpec {
                class: a.class,
                road: a.road,
                v0: a.v0,
            };
            match self.registry.register_arrival(spec, t) {
                Ok(id) => {
                    self.queues[r].pop_front();
                    self.reported[r] = false;
                    let driver = match a.class {
                        VehicleClass::Hdv => perturb_params(&self.cfg.idm, self.cfg.perturbation, a.driver_seed),
                        // a CAV without a plan keeps the spacing its plans keep
                        VehicleClass::Cav => IdmParams {
                            d_underbar: self.cfg.limits.d_min,
                            time_gap: self.cfg.limits.t_h,
                            ..self.cfg.idm
                        },
                    };
                    self.agents.push(Agent {
                        driver,
                        plan: None,
                        attempted: f64::NEG_INFINITY,
                        epoch: 0,
                        replans: 0,
                    });
                    self.scheduled.push(a.t);
                    if a.class == VehicleClass::Cav {
                        arrived.push(id);
                    }
                }
                Err(RegistryError::Deferred { blocker, gap, required }) => {
                    blocked[r] = true;
                    if !self.reported[r] {
                        self.reported[r] = true;
                        self.log.events.push(Event {
                            kind: EventKind::Deferred,
                            t,
                            ids: vec![blocker],
                            magnitude: required - gap,
                        });
                    }
                }
                Err(e) => panic!("arrival rejected: {e}"),
            }
        }
        arrived
    }

    fn predictions(&self, t: f64) -> BTreeMap<VehicleId, PredictionRecord> {
        predict_all(&self.registry, t, &self.committed(), self.cfg.newell, PREDICTION_HORIZON)
            .expect("in-zone vehicles are registered")
    }

    /// Updates cached predictions after the plan of `changed` was committed
    /// or dropped.
    fn refresh(&self, t: f64, preds: &mut Option<BTreeMap<VehicleId, PredictionRecord>>, changed: VehicleId) {
        if let Some(records) = preds {
            let plans = self.committed();
            refresh_predictions(&self.registry, t, &plans, self.cfg.newell, PREDICTION_HORIZON, records, changed)
                .expect("in-zone vehicles are registered");
        }
    }

    fn committed(&self) -> BTreeMap<VehicleId, CubicTrajectory> {
        self.registry
            .active()
            .iter()
            .filter_map(|&id| self.agents[id.0 as usize - 1].plan.map(|p| (id, p)))
            .collect()
    }

    /// Plans CAVs that just entered, retries CAVs in fallback and re-plans
    /// CAVs whose risk trigger fires. Requests are served in id order and each
    /// sees the plans committed before it in the same step. Returns the ids
    /// re-planned on risk.
    fn plan_pass(&mut self, t: f64, arrived: &[VehicleId]) -> Vec<VehicleId> {
        let eps = 1e-9;
        let mut due = Vec::new();
        for &id in self.registry.active() {
            let s = self.registry.state(id).expect("active vehicle");
            if s.class != VehicleClass::Cav {
                continue;
            }
            let agent = &self.agents[id.0 as usize - 1];
            let since = t - agent.attempted;
            let reason = if arrived.contains(&id) {
                Some(PlanReason::Entry)
            } else if agent.plan.is_none() {
                (since >= self.cfg.fallback_retry - eps).then_some(PlanReason::Retry)
            } else if self.cfg.replanning && since >= self.cfg.replan_cooldown - eps {
                let m = conflict_metrics(&self.registry, id).expect("active vehicle");
                let in_mz = self.registry.geometry().in_merging_zone(s.p);
                should_replan(&m, s.v, in_mz, &self.cfg.risk).then_some(PlanReason::Risk)
            } else {
                None
            };
            if let Some(r) = reason {
                due.push((id, r));
            }
        }

        let mut replanned = Vec::new();
        let mut preds: Option<BTreeMap<VehicleId, PredictionRecord>> = None;
        for (id, reason) in due {
            let records = preds.get_or_insert_with(|| self.predictions(t));
            let req = self.request(id, t, records);
            let result = plan(&req, &self.cfg.planner);
            let agent = &mut self.agents[id.0 as usize - 1];
            agent.attempted = t;
            let Ok(result) = result else {
                // at the conflict point already: keep the current controller
                continue;
            };
            match result.outcome {
                PlanOutcome::Planned { tf, trajectory } => {
                    let previous = agent.plan.replace(trajectory);
                    agent.epoch += 1;
                    if reason == PlanReason::Risk {
                        agent.replans += 1;
                        replanned.push(id);
                        self.log.events.push(Event {
                            kind: EventKind::Replan,
                            t,
                            ids: vec![id],
                            magnitude: previous.map_or(0.0, |p| tf - p.tf()),
                        });
                    }
                    self.refresh(t, &mut preds, id);
                }
                PlanOutcome::Infeasible => {
                    // A committed plan that still satisfies every constraint of
                    // the fresh snapshot is kept; the grid of the new search
                    // need not contain its exit time.
                    let keep = agent
                        .plan
                        .is_some_and(|p| p.tf() > t && violated_constraints(&req, &p, &self.cfg.planner).is_empty());
                    if !keep && agent.plan.take().is_some() {
                        self.refresh(t, &mut preds, id);
                    }
                    self.log.events.push(Event {
                        kind: EventKind::Infeasible,
                        t,
                        ids: vec![id],
                        magnitude: result.iterations as f64,
                    });
                }
            }
        }
        replanned
    }

    fn request(&self, i: VehicleId, t: f64, preds: &BTreeMap<VehicleId, PredictionRecord>) -> PlanRequest {
        let s = self.registry.state(i).expect("active vehicle");
        let plan_of = |k: VehicleId| self.agents[k.0 as usize - 1].plan;
        let (_, others) = self.registry.neighbors(i).expect("active vehicle");
        let neighbor_exits = others
            .into_iter()
            .filter(|&k| !follows(k, i, preds))
            .filter_map(|k| {
                let tf = match plan_of(k) {
                    Some(p) => Some(p.tf()),
                    None => preds.get(&k).and_then(|r| r.predicted_exit),
                };
                tf.map(|tf| NeighborExit { id: k, tf })
            })
            // vehicles that crossed less than t_min ago still bound the exit
            .chain(self.recently_exited(s.road.other(), t))
            .collect();
        let predecessor = self
            .registry
            .predecessor(i, false)
            .expect("active vehicle")
            .and_then(|j| plan_of(j).or_else(|| preds.get(&j).map(|r| r.trajectory)));
        let follower = self
            .registry
            .active()
            .iter()
            .copied()
            .filter(|&k| k > i)
            .find(|&k| self.registry.state(k).is_ok_and(|f| f.road == s.road))
            .and_then(plan_of);
        PlanRequest {
            id: i,
            t_plan: t,
            p: s.p,
            v: s.v,
            neighbor_exits,
            predecessor,
            follower,
            limits: self.cfg.limits,
        }
    }

    /// Crossings on `road` within `t_min` before `t`.
    fn recently_exited(&self, road: Road, t: f64) -> Vec<NeighborExit> {
        let horizon = t - self.cfg.limits.t_min;
        self.registry
            .all()
            .iter()
            .rev()
            .filter(|s| s.road == road)
            .filter_map(|s| s.t_exit.filter(|&te| te > horizon).map(|tf| NeighborExit { id: s.id, tf }))
            .collect()
    }

    fn finish(&mut self, now: f64) {
        self.finished = true;
        self.log.end_time = now;
        let mut samples: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); self.registry.len()];
        for r in &self.log.records {
            samples[r.id.0 as usize - 1].push((r.t, r.v, r.u));
        }
        self.log.vehicles = self
            .registry
            .all()
            .iter()
            .zip(&self.agents)
            .zip(&self.scheduled)
            .zip(&samples)
            .map(|(((s, a), &sched), samp)| VehicleSummary {
                id: s.id,
                class: s.class,
                road: s.road,
                t_scheduled: sched,
                t_entry: s.t_entry,
                t_exit: s.t_exit,
                energy: energy_per_mass(samp),
                plans: a.epoch,
                replans: a.replans,
            })
            .collect();
    }
}

/// Whether the prediction of `k` is derived, through a chain of time-shifted
/// leaders, from the trajectory of `i`. Such a vehicle follows `i` and its
/// predicted crossing moves with `i`'s own plan.
fn follows(k: VehicleId, i: VehicleId, preds: &BTreeMap<VehicleId, PredictionRecord>) -> bool {
    let mut cur = k;
    for _ in 0..=preds.len() {
        let Some(rec) = preds.get(&cur) else { return false };
        match (rec.leader, rec.tau) {
            (Some(l), Some(_)) if l == i => return true,
            (Some(l), Some(_)) => cur = l,
            _ => return false,
        }
    }
    false
}

/// Runs a configuration to completion.
pub fn run(cfg: SimConfig) -> Result<SimLog, ConfigError> {
    Ok(Simulation::new(cfg)?.finish_run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn step_examples() {
        let (p, v) = integrate(-100.0, 24.0, 0.0, 0.05, true);
        assert_relative_eq!(p + 100.0, 1.2, max_relative = 1e-9);
        assert_eq!(v, 24.0);

        let (p, v) = integrate(-100.0, 24.0, 2.0, 0.05, true);
        assert_relative_eq!(v, 24.1, max_relative = 1e-12);
        assert_relative_eq!(p + 100.0, 1.205, max_relative = 1e-9);

        assert_eq!(integrate(-50.0, 0.0, -3.0, 0.05, true), (-50.0, 0.0));
    }

    #[test]
    fn follows_walks_the_leader_chain() {
        let rec = |leader: Option<u32>, tau: Option<f64>| PredictionRecord {
            id: VehicleId(0),
            leader: leader.map(VehicleId),
            trajectory: CubicTrajectory::affine(0.0, -100.0, 20.0, 5.0),
            tau,
            predicted_exit: None,
            made_at: 0.0,
            degraded: false,
        };
        let preds: BTreeMap<_, _> = [
            (VehicleId(3), rec(Some(2), Some(1.0))),
            (VehicleId(4), rec(Some(3), Some(1.0))),
            (VehicleId(5), rec(None, None)),
        ]
        .into_iter()
        .collect();
        assert!(follows(VehicleId(4), VehicleId(2), &preds));
        assert!(follows(VehicleId(3), VehicleId(2), &preds));
        assert!(!follows(VehicleId(5), VehicleId(2), &preds));
        assert!(!follows(VehicleId(4), VehicleId(1), &preds));
    }
}

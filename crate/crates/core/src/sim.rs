//! Deterministic 1-second-tick microscopic simulator.
//!
//! Dynamics per tick, in this order:
//!
//! 1. Vehicles whose scheduled time has arrived are inserted at position 0 of
//!    their first lane when the lane tail is at least `vehicle_len + min_gap`
//!    from the start; blocked vehicles wait outside the network and retry.
//! 2. Lanes are processed downstream-first (boundary exit lanes, interior
//!    lanes, boundary entry lanes; by id within each group) and each lane
//!    front to back. A vehicle's displacement is the largest of `v_max`, the
//!    gap behind its (already updated) leader, and the stop line. The lane
//!    head crosses to position 0 of its next route lane when it reaches the
//!    stop line, its movement is green and the target lane tail is clear.
//!    A head that finishes its last route lane leaves the network.
//! 3. The clock advances and yellow countdowns tick down.
//!
//! Speed is instantaneous: the speed recorded for a tick is exactly the
//! displacement during that tick, so the summed speed samples equal the
//! odometer distance of every vehicle.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TscError};
use crate::network::{IntersectionId, LaneId, RoadNetwork, PHASES_PER_INTERSECTION};

/// Speed below which a vehicle counts as waiting.
pub const WAITING_SPEED_MPS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VehicleId(pub usize);

/// Which clock reading counts as a vehicle's entry time in travel-time metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryClock {
    /// Tick at which the vehicle was actually inserted.
    #[default]
    Actual,
    /// The schedule time, so blocked spawns count their wait outside the network.
    Scheduled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub v_max_mps: f64,
    pub vehicle_len_m: f64,
    pub min_gap_m: f64,
    /// Fixed at 1; kept for completeness of the run manifest.
    pub tick_s: u32,
    pub t_phase_s: u32,
    pub yellow_s: u32,
    pub t_tsc_s: u32,
    pub seed: u64,
    pub entry_clock: EntryClock,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            v_max_mps: 11.11,
            vehicle_len_m: 5.0,
            min_gap_m: 2.5,
            tick_s: 1,
            t_phase_s: 15,
            yellow_s: 3,
            t_tsc_s: 3600,
            seed: 0,
            entry_clock: EntryClock::Actual,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TscError::InvalidArgument(m));
        if self.tick_s != 1 {
            return bad(format!("tick must be 1 s, got {}", self.tick_s));
        }
        if !(self.v_max_mps > 0.0 && self.v_max_mps.is_finite()) {
            return bad(format!("v_max must be positive, got {}", self.v_max_mps));
        }
        if !(self.vehicle_len_m > 0.0) || self.min_gap_m < 0.0 {
            return bad("vehicle length must be positive and min gap non-negative".into());
        }
        if self.t_phase_s == 0 || self.t_tsc_s % self.t_phase_s != 0 {
            return bad(format!(
                "episode length {} must be a positive multiple of the phase interval {}",
                self.t_tsc_s, self.t_phase_s
            ));
        }
        if self.yellow_s >= self.t_phase_s {
            return bad(format!(
                "yellow {} s must be shorter than the phase interval {} s",
                self.yellow_s, self.t_phase_s
            ));
        }
        Ok(())
    }

    /// Number of decisions per episode, `t_tsc / t_phase`.
    pub fn decisions(&self) -> usize {
        (self.t_tsc_s / self.t_phase_s) as usize
    }

    /// Bumper-to-bumper spacing between consecutive front positions.
    pub fn headway_m(&self) -> f64 {
        self.vehicle_len_m + self.min_gap_m
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEntry {
    pub enter_s: u32,
    pub route: Vec<LaneId>,
}

/// Vehicles to release into the network, one route each.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSchedule {
    pub entries: Vec<FlowEntry>,
}

impl FlowSchedule {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every route runs from a boundary entry lane to a boundary exit
    /// lane through valid movements.
    pub fn validate(&self, net: &RoadNetwork) -> Result<()> {
        for (k, e) in self.entries.iter().enumerate() {
            let fail = |m: String| Err(TscError::invalid(format!("flow entry {k}: {m}")));
            let (Some(&first), Some(&last)) = (e.route.first(), e.route.last()) else {
                return fail("empty route".into());
            };
            for &l in &e.route {
                net.try_lane(l)?;
            }
            if !net.lane(first).is_boundary_entry {
                return fail(format!("route starts on {first}, not a boundary entry lane"));
            }
            if !net.lane(last).is_boundary_exit {
                return fail(format!("route ends on {last}, not a boundary exit lane"));
            }
            for w in e.route.windows(2) {
                if !net.connects(w[0], w[1]) {
                    return fail(format!("no movement from {} to {}", w[0], w[1]));
                }
            }
        }
        Ok(())
    }

    /// CSV, one vehicle per line: `enter_s,lane_0;lane_1;...;lane_k`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("enter_s,route\n");
        for e in &self.entries {
            let route: Vec<String> = e.route.iter().map(|l| l.0.to_string()).collect();
            let _ = writeln!(out, "{},{}", e.enter_s, route.join(";"));
        }
        out
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<FlowSchedule> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("enter_s")) {
                continue;
            }
            let perr = |msg: String| TscError::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg,
            };
            let (t, route) = line
                .split_once(',')
                .ok_or_else(|| perr(format!("expected `enter_s,route`, got `{line}`")))?;
            let enter_s = t
                .trim()
                .parse()
                .map_err(|e| perr(format!("bad enter time `{t}`: {e}")))?;
            let route = route
                .split(';')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map(LaneId)
                        .map_err(|e| perr(format!("bad lane id `{s}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(FlowEntry { enter_s, route });
        }
        Ok(FlowSchedule { entries })
    }

    pub fn load(path: &Path) -> Result<FlowSchedule> {
        let text = std::fs::read_to_string(path).map_err(|e| TscError::io(path, e))?;
        FlowSchedule::from_csv(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| TscError::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleStatus {
    Pending,
    Active,
    Departed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: VehicleId,
    pub route: Vec<LaneId>,
    pub lane_index: usize,
    pub pos_m: f64,
    /// Displacement during the most recent tick.
    pub speed_mps: f64,
    pub scheduled_enter_s: u32,
    pub actual_enter_s: Option<u32>,
    pub leave_s: Option<u32>,
    pub jurisdiction: IntersectionId,
    pub jurisdiction_enter_s: u32,
    pub status: VehicleStatus,
    /// Summed length of route lanes already completed.
    completed_m: f64,
    /// Clock value after this vehicle's last update; guards against moving twice per tick.
    moved_until: u32,
}

impl Vehicle {
    pub fn lane(&self) -> LaneId {
        self.route[self.lane_index]
    }

    /// Odometer reading from geometry: completed lanes plus position on the current lane.
    pub fn distance_m(&self) -> f64 {
        self.completed_m + self.pos_m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalState {
    /// Last selected phase; stays set through the yellow that precedes it.
    pub phase: usize,
    pub yellow_remaining: u32,
}

/// One vehicle's speed over one tick, attributed to the jurisdiction it occupied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickSample {
    /// Start of the tick interval `(tick, tick + 1]`.
    pub tick: u32,
    pub vehicle: VehicleId,
    pub jurisdiction: IntersectionId,
    pub speed_mps: f64,
}

/// Vehicle crossing a jurisdiction boundary. `from == None` is insertion,
/// `to == None` is departure from the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JurisdictionEvent {
    pub time: u32,
    pub vehicle: VehicleId,
    pub from: Option<IntersectionId>,
    pub to: Option<IntersectionId>,
}

/// Everything that happened during one decision interval `(t_start, t_end]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub decision: usize,
    pub t_start: u32,
    pub t_end: u32,
    pub samples: Vec<TickSample>,
    /// Vehicles in the network at `t_start` and where they were.
    pub present_at_start: Vec<(VehicleId, IntersectionId)>,
    pub events: Vec<JurisdictionEvent>,
}

/// Per-tick vehicle snapshot: lane and position at the start of the tick,
/// speed over the tick.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: u32,
    pub vehicle: VehicleId,
    pub lane: LaneId,
    pub pos_m: f64,
    pub speed_mps: f64,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("tick,vehicle,lane,pos,speed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.tick, r.vehicle.0, r.lane.0, r.pos_m, r.speed_mps);
    }
    out
}

#[derive(Clone, Debug)]
pub struct SimState {
    net: Arc<RoadNetwork>,
    config: SimConfig,
    clock: u32,
    vehicles: Vec<Vehicle>,
    lane_queues: Vec<VecDeque<VehicleId>>,
    signals: Vec<SignalState>,
    arrival_order: Vec<VehicleId>,
    next_arrival: usize,
    waiting: Vec<VehicleId>,
    departed: Vec<VehicleId>,
    active: usize,
    lane_order: Vec<LaneId>,
    samples: Vec<TickSample>,
    events: Vec<JurisdictionEvent>,
    trace: Option<Vec<TraceRow>>,
}

impl SimState {
    pub fn new(net: Arc<RoadNetwork>, schedule: &FlowSchedule, config: SimConfig) -> Result<SimState> {
        config.validate()?;
        schedule.validate(&net)?;
        Ok(Self::from_entries(net, &schedule.entries, config))
    }

    fn from_entries(net: Arc<RoadNetwork>, entries: &[FlowEntry], config: SimConfig) -> SimState {
        let vehicles: Vec<Vehicle> = entries
            .iter()
            .enumerate()
            .map(|(k, e)| Vehicle {
                id: VehicleId(k),
                route: e.route.clone(),
                lane_index: 0,
                pos_m: 0.0,
                speed_mps: 0.0,
                scheduled_enter_s: e.enter_s,
                actual_enter_s: None,
                leave_s: None,
                jurisdiction: net.lane(e.route[0]).jurisdiction,
                jurisdiction_enter_s: 0,
                status: VehicleStatus::Pending,
                completed_m: 0.0,
                moved_until: 0,
            })
            .collect();
        let mut arrival_order: Vec<VehicleId> = vehicles.iter().map(|v| v.id).collect();
        arrival_order.sort_by_key(|v| (vehicles[v.0].scheduled_enter_s, v.0));

        let group = |l: &crate::network::Lane| {
            if l.is_boundary_exit {
                0
            } else if l.is_boundary_entry {
                2
            } else {
                1
            }
        };
        let mut lane_order: Vec<LaneId> = net.lanes.iter().map(|l| l.id).collect();
        lane_order.sort_by_key(|&l| (group(net.lane(l)), l.0));

        SimState {
            lane_queues: vec![VecDeque::new(); net.lanes.len()],
            signals: vec![
                SignalState {
                    phase: 0,
                    yellow_remaining: 0
                };
                net.num_intersections()
            ],
            net,
            config,
            clock: 0,
            vehicles,
            arrival_order,
            next_arrival: 0,
            waiting: Vec::new(),
            departed: Vec::new(),
            active: 0,
            lane_order,
            samples: Vec::new(),
            events: Vec::new(),
            trace: None,
        }
    }

    /// Builds a mid-episode state with vehicles placed directly on lanes,
    /// given as `(lane, pos_m, speed_mps)`. Routes continue straight through
    /// each downstream intersection to the grid edge. Signals start at
    /// `phases` with no yellow pending.
    pub fn with_placed_vehicles(
        net: Arc<RoadNetwork>,
        config: SimConfig,
        placements: &[(LaneId, f64, f64)],
        phases: &[usize],
    ) -> Result<SimState> {
        let entries = placements
            .iter()
            .map(|&(lane, _, _)| {
                let mut route = vec![lane];
                let mut cur = lane;
                while let Some((_, m)) = net.try_lane(cur).ok().and_then(|_| net.movement_of_lane(cur)) {
                    cur = m.to_lanes[1];
                    route.push(cur);
                }
                Ok(FlowEntry { enter_s: 0, route })
            })
            .collect::<Result<Vec<_>>>()?;
        config.validate()?;
        let mut state = SimState::from_entries(net, &entries, config);
        if phases.len() != state.net.num_intersections() {
            return Err(TscError::invalid("one phase per intersection required"));
        }
        for (x, &p) in phases.iter().enumerate() {
            if p >= PHASES_PER_INTERSECTION {
                return Err(TscError::invalid(format!("phase {p} out of range 0..4")));
            }
            state.signals[x].phase = p;
        }
        for (k, &(lane, pos, speed)) in placements.iter().enumerate() {
            let length = state.net.lane(lane).length_m;
            if !(0.0..=length).contains(&pos) || !(0.0..=state.config.v_max_mps).contains(&speed) {
                return Err(TscError::invalid(format!(
                    "placement {k} out of bounds: pos {pos}, speed {speed}"
                )));
            }
            let veh = &mut state.vehicles[k];
            veh.status = VehicleStatus::Active;
            veh.actual_enter_s = Some(0);
            veh.pos_m = pos;
            veh.speed_mps = speed;
            state.lane_queues[lane.0].push_back(VehicleId(k));
        }
        state.active = placements.len();
        state.next_arrival = placements.len();
        let headway = state.config.headway_m();
        for queue in &mut state.lane_queues {
            let vehicles = &state.vehicles;
            queue
                .make_contiguous()
                .sort_by(|a, b| vehicles[b.0].pos_m.total_cmp(&vehicles[a.0].pos_m));
            for w in queue.iter().collect::<Vec<_>>().windows(2) {
                if vehicles[w[0].0].pos_m - vehicles[w[1].0].pos_m < headway {
                    return Err(TscError::invalid(format!(
                        "vehicles {} and {} closer than {headway} m",
                        w[0].0, w[1].0
                    )));
                }
            }
        }
        Ok(state)
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.trace.as_deref()
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.net
    }

    pub fn network_arc(&self) -> &Arc<RoadNetwork> {
        &self.net
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    pub fn is_finished(&self) -> bool {
        self.clock >= self.config.t_tsc_s
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: VehicleId) -> &Vehicle {
        &self.vehicles[id.0]
    }

    /// Vehicles on `lane`, downstream-most first.
    pub fn lane_vehicles(&self, lane: LaneId) -> impl Iterator<Item = &Vehicle> + '_ {
        self.lane_queues[lane.0].iter().map(move |v| &self.vehicles[v.0])
    }

    pub fn active_vehicles(&self) -> impl Iterator<Item = &Vehicle> + '_ {
        self.lane_queues.iter().flatten().map(move |v| &self.vehicles[v.0])
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn departed_count(&self) -> usize {
        self.departed.len()
    }

    pub fn inserted_count(&self) -> usize {
        self.active + self.departed.len()
    }

    /// Vehicles whose time has come but that could not yet be inserted.
    pub fn blocked_count(&self) -> usize {
        self.waiting.len()
    }

    pub fn signal(&self, x: IntersectionId) -> SignalState {
        self.signals[x.0]
    }

    /// Selects the phase of one intersection. Switching to a different phase
    /// starts a yellow interval during which every gated movement is red.
    pub fn set_phase(&mut self, x: IntersectionId, phase: usize) -> Result<()> {
        if phase >= PHASES_PER_INTERSECTION {
            return Err(TscError::invalid(format!("phase {phase} out of range 0..4")));
        }
        let sig = self
            .signals
            .get_mut(x.0)
            .ok_or_else(|| TscError::NotFound(x.to_string()))?;
        if sig.phase != phase {
            sig.phase = phase;
            sig.yellow_remaining = self.config.yellow_s;
        }
        Ok(())
    }

    /// Whether the lane's movement may discharge during the current tick.
    pub fn is_green(&self, lane: LaneId) -> bool {
        let Some((x, m)) = self.net.movement_of_lane(lane) else {
            return true;
        };
        if !m.is_gated() {
            return true;
        }
        let sig = &self.signals[x.0];
        sig.yellow_remaining == 0 && self.net.intersection(x).phases[sig.phase].movements.contains(&m.index)
    }

    fn lane_has_room(&self, lane: LaneId) -> bool {
        self.lane_queues[lane.0]
            .back()
            .is_none_or(|v| self.vehicles[v.0].pos_m >= self.config.headway_m())
    }

    fn insert_arrivals(&mut self) {
        let t = self.clock;
        while let Some(&v) = self.arrival_order.get(self.next_arrival) {
            if self.vehicles[v.0].scheduled_enter_s > t {
                break;
            }
            self.waiting.push(v);
            self.next_arrival += 1;
        }
        let waiting = std::mem::take(&mut self.waiting);
        for v in waiting {
            let lane = self.vehicles[v.0].route[0];
            if !self.lane_has_room(lane) {
                self.waiting.push(v);
                continue;
            }
            let jurisdiction = self.net.lane(lane).jurisdiction;
            let veh = &mut self.vehicles[v.0];
            veh.status = VehicleStatus::Active;
            veh.actual_enter_s = Some(t);
            veh.jurisdiction = jurisdiction;
            veh.jurisdiction_enter_s = t;
            veh.pos_m = 0.0;
            veh.speed_mps = 0.0;
            self.lane_queues[lane.0].push_back(v);
            self.active += 1;
            self.events.push(JurisdictionEvent {
                time: t,
                vehicle: v,
                from: None,
                to: Some(jurisdiction),
            });
        }
    }

    /// Advances the simulation by one second.
    pub fn advance_tick(&mut self) -> Result<()> {
        if self.is_finished() {
            return Err(TscError::Contract(format!(
                "episode already finished at t = {}",
                self.clock
            )));
        }
        let t = self.clock;
        let v_max = self.config.v_max_mps;
        let headway = self.config.headway_m();
        self.insert_arrivals();

        for li in 0..self.lane_order.len() {
            let lane = self.lane_order[li];
            let length = self.net.lane(lane).length_m;
            let mut idx = 0;
            while idx < self.lane_queues[lane.0].len() {
                let v = self.lane_queues[lane.0][idx];
                if self.vehicles[v.0].moved_until > t {
                    idx += 1;
                    continue;
                }
                let (start_pos, start_jur) = {
                    let veh = &self.vehicles[v.0];
                    (veh.pos_m, veh.jurisdiction)
                };
                let speed;
                if idx > 0 {
                    let leader = self.lane_queues[lane.0][idx - 1];
                    let limit = self.vehicles[leader.0].pos_m - headway;
                    let new_pos = (start_pos + v_max).min(limit).max(start_pos);
                    speed = new_pos - start_pos;
                    self.vehicles[v.0].pos_m = new_pos;
                    idx += 1;
                } else if start_pos + v_max < length {
                    speed = v_max;
                    self.vehicles[v.0].pos_m = start_pos + v_max;
                    idx += 1;
                } else {
                    speed = length - start_pos;
                    let veh = &self.vehicles[v.0];
                    if veh.lane_index + 1 == veh.route.len() {
                        self.lane_queues[lane.0].pop_front();
                        let veh = &mut self.vehicles[v.0];
                        veh.pos_m = length;
                        veh.leave_s = Some(t + 1);
                        veh.status = VehicleStatus::Departed;
                        self.active -= 1;
                        self.departed.push(v);
                        self.events.push(JurisdictionEvent {
                            time: t + 1,
                            vehicle: v,
                            from: Some(start_jur),
                            to: None,
                        });
                    } else {
                        let next = veh.route[veh.lane_index + 1];
                        if self.is_green(lane) && self.lane_has_room(next) {
                            self.lane_queues[lane.0].pop_front();
                            self.lane_queues[next.0].push_back(v);
                            let next_jur = self.net.lane(next).jurisdiction;
                            let veh = &mut self.vehicles[v.0];
                            veh.lane_index += 1;
                            veh.completed_m += length;
                            veh.pos_m = 0.0;
                            if next_jur != start_jur {
                                veh.jurisdiction = next_jur;
                                veh.jurisdiction_enter_s = t + 1;
                                self.events.push(JurisdictionEvent {
                                    time: t + 1,
                                    vehicle: v,
                                    from: Some(start_jur),
                                    to: Some(next_jur),
                                });
                            }
                        } else {
                            self.vehicles[v.0].pos_m = length;
                            idx += 1;
                        }
                    }
                }
                let veh = &mut self.vehicles[v.0];
                veh.speed_mps = speed;
                veh.moved_until = t + 1;
                self.samples.push(TickSample {
                    tick: t,
                    vehicle: v,
                    jurisdiction: start_jur,
                    speed_mps: speed,
                });
                if let Some(trace) = self.trace.as_mut() {
                    trace.push(TraceRow {
                        tick: t,
                        vehicle: v,
                        lane,
                        pos_m: start_pos,
                        speed_mps: speed,
                    });
                }
            }
        }

        self.clock = t + 1;
        for sig in &mut self.signals {
            sig.yellow_remaining = sig.yellow_remaining.saturating_sub(1);
        }
        Ok(())
    }

    /// Applies one phase per intersection at a decision boundary and
    /// simulates one decision interval.
    pub fn run_decision_step(&mut self, joint_phases: &[usize]) -> Result<StepRecord> {
        let t_phase = self.config.t_phase_s;
        if self.clock % t_phase != 0 || self.is_finished() {
            return Err(TscError::Contract(format!(
                "decision step requested at t = {} (phase interval {t_phase}, horizon {})",
                self.clock, self.config.t_tsc_s
            )));
        }
        if joint_phases.len() != self.net.num_intersections() {
            return Err(TscError::invalid(format!(
                "expected {} phases, got {}",
                self.net.num_intersections(),
                joint_phases.len()
            )));
        }
        for (x, &p) in joint_phases.iter().enumerate() {
            self.set_phase(IntersectionId(x), p)?;
        }
        let t_start = self.clock;
        let present_at_start = self.active_vehicles().map(|v| (v.id, v.jurisdiction)).collect();
        self.samples.clear();
        self.events.clear();
        let t_end = (t_start + t_phase).min(self.config.t_tsc_s);
        while self.clock < t_end {
            self.advance_tick()?;
        }
        Ok(StepRecord {
            decision: (t_start / t_phase) as usize,
            t_start,
            t_end,
            samples: std::mem::take(&mut self.samples),
            present_at_start,
            events: std::mem::take(&mut self.events),
        })
    }

    /// (entry, exit) seconds of every inserted vehicle, truncating vehicles
    /// still in the network at the current clock. Entry follows `entry_clock`.
    pub fn travel_intervals(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let clock = self.config.entry_clock;
        self.vehicles.iter().filter_map(move |v| {
            let enter = v.actual_enter_s?;
            let enter = match clock {
                EntryClock::Actual => enter,
                EntryClock::Scheduled => v.scheduled_enter_s,
            };
            Some((enter, v.leave_s.unwrap_or(self.clock)))
        })
    }

    /// Vehicles scheduled but never inserted.
    pub fn unserved_count(&self) -> usize {
        self.vehicles
            .iter()
            .filter(|v| v.status == VehicleStatus::Pending)
            .count()
    }

    pub fn travel_time_stats(&self) -> Result<TravelTimeStats> {
        if !self.is_finished() {
            return Err(TscError::Contract(format!(
                "travel time requested at t = {} before the episode ends at {}",
                self.clock, self.config.t_tsc_s
            )));
        }
        let intervals: Vec<(u32, u32)> = self.travel_intervals().collect();
        Ok(TravelTimeStats {
            average_travel_time_s: average_travel_time(&intervals)?,
            vehicles: intervals.len(),
            departed: self.departed_count(),
            active: self.active_count(),
            unserved: self.unserved_count(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TravelTimeStats {
    pub average_travel_time_s: f64,
    pub vehicles: usize,
    pub departed: usize,
    pub active: usize,
    pub unserved: usize,
}

/// Mean of `exit - entry` over (entry, exit) pairs.
pub fn average_travel_time(intervals: &[(u32, u32)]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(TscError::UndefinedMetric(
            "average travel time of zero vehicles".into(),
        ));
    }
    let total: u64 = intervals.iter().map(|&(e, l)| u64::from(l - e)).sum();
    Ok(total as f64 / intervals.len() as f64)
}

//! Per-intersection rewards and the episode-level accounting identities.
//!
//! The distance-gap reward charges every attributed vehicle-second
//! `v_max - v_t`. Because the simulator's speed samples are exact
//! displacements, summing it over all steps and intersections gives
//! `total distance - v_max * total in-network time` with no discretization
//! error; [`ifdg_travel_time_identity`] checks this against the odometers.
//! The step-wise travel time reward charges residence seconds and sums to
//! the negative total travel time, checked by [`stt_accumulation`].

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TscError};
use crate::features::{pressure, queue_length};
use crate::network::IntersectionId;
use crate::sim::{SimState, StepRecord, VehicleId};

/// Negative distance gap of vehicles attributed to `x` during the step, in meters.
pub fn ifdg_reward(record: &StepRecord, x: IntersectionId, v_max: f64) -> f64 {
    -record
        .samples
        .iter()
        .filter(|s| s.jurisdiction == x)
        .map(|s| v_max - s.speed_mps)
        .sum::<f64>()
}

/// [`ifdg_reward`] for every intersection in one pass.
pub fn ifdg_rewards(record: &StepRecord, n: usize, v_max: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for s in &record.samples {
        out[s.jurisdiction.0] -= v_max - s.speed_mps;
    }
    out
}

/// Negative residence seconds of vehicles in each jurisdiction during the
/// step, rebuilt from who was present at the step start plus the boundary
/// events (not from the per-tick samples).
pub fn stt_rewards(record: &StepRecord, n: usize) -> Vec<i64> {
    let mut open: std::collections::HashMap<VehicleId, (IntersectionId, u32)> = record
        .present_at_start
        .iter()
        .map(|&(v, x)| (v, (x, record.t_start)))
        .collect();
    let mut out = vec![0i64; n];
    for e in &record.events {
        if e.from.is_some() {
            if let Some((x, since)) = open.remove(&e.vehicle) {
                out[x.0] -= i64::from(e.time - since);
            }
        }
        if let Some(to) = e.to {
            open.insert(e.vehicle, (to, e.time));
        }
    }
    for (_, (x, since)) in open {
        out[x.0] -= i64::from(record.t_end - since);
    }
    out
}

pub fn stt_reward(record: &StepRecord, x: IntersectionId) -> i64 {
    let n = record
        .present_at_start
        .iter()
        .map(|p| p.1 .0)
        .chain(record.events.iter().flat_map(|e| e.from.into_iter().chain(e.to)).map(|x| x.0))
        .max()
        .map_or(0, |m| m + 1)
        .max(x.0 + 1);
    stt_rewards(record, n)[x.0]
}

/// `-sum (1 - v / v_max)` over vehicles on the entering lanes, evaluated now.
pub fn timeloss_reward(state: &SimState, x: IntersectionId) -> f64 {
    let v_max = state.config().v_max_mps;
    -state
        .network()
        .intersection(x)
        .entering_lanes
        .iter()
        .flat_map(|&l| state.lane_vehicles(l))
        .map(|v| 1.0 - v.speed_mps / v_max)
        .sum::<f64>()
}

pub fn queue_reward(state: &SimState, x: IntersectionId) -> f64 {
    -(queue_length(state, x) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureForm {
    /// `-|pressure|`
    #[default]
    Absolute,
    /// `-pressure`
    Signed,
}

pub fn pressure_reward(state: &SimState, x: IntersectionId, form: PressureForm) -> f64 {
    let p = pressure(state, x) as f64;
    match form {
        PressureForm::Absolute => -p.abs(),
        PressureForm::Signed => -p,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Ifdg,
    Stt,
    Queue,
    Pressure,
    Timeloss,
}

impl RewardKind {
    pub const ALL: [RewardKind; 5] = [
        RewardKind::Ifdg,
        RewardKind::Stt,
        RewardKind::Queue,
        RewardKind::Pressure,
        RewardKind::Timeloss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Ifdg => "ifdg",
            RewardKind::Stt => "stt",
            RewardKind::Queue => "queue",
            RewardKind::Pressure => "pressure",
            RewardKind::Timeloss => "timeloss",
        }
    }
}

impl FromStr for RewardKind {
    type Err = TscError;

    fn from_str(s: &str) -> Result<Self> {
        RewardKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TscError::invalid(format!("unknown reward `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub d: usize,
    pub intersection: usize,
    pub ifdg: f64,
    pub stt: f64,
    pub queue: f64,
    pub pressure: f64,
    pub timeloss: f64,
}

impl RewardRow {
    pub fn get(&self, kind: RewardKind) -> f64 {
        match kind {
            RewardKind::Ifdg => self.ifdg,
            RewardKind::Stt => self.stt,
            RewardKind::Queue => self.queue,
            RewardKind::Pressure => self.pressure,
            RewardKind::Timeloss => self.timeloss,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JurisdictionInterval {
    pub intersection: IntersectionId,
    pub enter_s: u32,
    pub leave_s: u32,
}

/// Reward records of one episode plus per-vehicle accounting used by the
/// identity checks.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RewardLedger {
    n_intersections: usize,
    v_max: f64,
    pressure_form: PressureForm,
    rows: Vec<RewardRow>,
    vehicle_gap: Vec<f64>,
    intervals: Vec<Vec<JurisdictionInterval>>,
    open: Vec<Option<(IntersectionId, u32)>>,
}

impl RewardLedger {
    pub fn new(n_intersections: usize, v_max: f64, pressure_form: PressureForm) -> Self {
        RewardLedger {
            n_intersections,
            v_max,
            pressure_form,
            ..Default::default()
        }
    }

    pub fn for_state(state: &SimState, pressure_form: PressureForm) -> Self {
        let mut ledger = Self::new(state.network().num_intersections(), state.config().v_max_mps, pressure_form);
        let n = state.vehicles().len();
        ledger.vehicle_gap = vec![0.0; n];
        ledger.intervals = vec![Vec::new(); n];
        ledger.open = vec![None; n];
        ledger
    }

    /// Time-loss rewards, to be sampled at the decision instant.
    pub fn timeloss_at(state: &SimState) -> Vec<f64> {
        (0..state.network().num_intersections())
            .map(|x| timeloss_reward(state, IntersectionId(x)))
            .collect()
    }

    fn ensure_vehicle(&mut self, v: VehicleId) {
        if v.0 >= self.vehicle_gap.len() {
            self.vehicle_gap.resize(v.0 + 1, 0.0);
            self.intervals.resize(v.0 + 1, Vec::new());
            self.open.resize(v.0 + 1, None);
        }
    }

    /// Appends one decision step. `timeloss_at_start` comes from
    /// [`RewardLedger::timeloss_at`] before the step; queue and pressure are
    /// sampled from `state_after`.
    pub fn record_step(&mut self, record: &StepRecord, timeloss_at_start: &[f64], state_after: &SimState) {
        let n = self.n_intersections;
        let ifdg = ifdg_rewards(record, n, self.v_max);
        let stt = stt_rewards(record, n);
        for x in 0..n {
            let id = IntersectionId(x);
            self.rows.push(RewardRow {
                d: record.decision,
                intersection: x,
                ifdg: ifdg[x],
                stt: stt[x] as f64,
                queue: queue_reward(state_after, id),
                pressure: pressure_reward(state_after, id, self.pressure_form),
                timeloss: timeloss_at_start[x],
            });
        }
        for &(v, x) in &record.present_at_start {
            self.ensure_vehicle(v);
            if self.open[v.0].is_none() && self.intervals[v.0].is_empty() {
                self.open[v.0] = Some((x, record.t_start));
            }
        }
        for s in &record.samples {
            self.ensure_vehicle(s.vehicle);
            self.vehicle_gap[s.vehicle.0] += self.v_max - s.speed_mps;
        }
        for e in &record.events {
            self.ensure_vehicle(e.vehicle);
            if let Some((x, since)) = self.open[e.vehicle.0].take() {
                self.intervals[e.vehicle.0].push(JurisdictionInterval {
                    intersection: x,
                    enter_s: since,
                    leave_s: e.time,
                });
            }
            if let Some(to) = e.to {
                self.open[e.vehicle.0] = Some((to, e.time));
            }
        }
    }

    /// Closes the intervals of vehicles still in the network at `t_end`.
    pub fn finish(&mut self, t_end: u32) {
        for (v, slot) in self.open.iter_mut().enumerate() {
            if let Some((x, since)) = slot.take() {
                self.intervals[v].push(JurisdictionInterval {
                    intersection: x,
                    enter_s: since,
                    leave_s: t_end,
                });
            }
        }
    }

    pub fn rows(&self) -> &[RewardRow] {
        &self.rows
    }

    pub fn n_intersections(&self) -> usize {
        self.n_intersections
    }

    pub fn decisions(&self) -> usize {
        self.rows.last().map_or(0, |r| r.d + 1)
    }

    /// `series[d][x]` for one reward kind.
    pub fn matrix(&self, kind: RewardKind) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_intersections]; self.decisions()];
        for r in &self.rows {
            out[r.d][r.intersection] = r.get(kind);
        }
        out
    }

    pub fn series(&self, kind: RewardKind) -> Vec<f64> {
        self.rows.iter().map(|r| r.get(kind)).collect()
    }

    /// Per-intersection totals over the episode.
    pub fn totals(&self, kind: RewardKind) -> Vec<f64> {
        let mut out = vec![0.0; self.n_intersections];
        for r in &self.rows {
            out[r.intersection] += r.get(kind);
        }
        out
    }

    /// Running integral of `v_max - v_t` over the vehicle's lifetime.
    pub fn vehicle_gap(&self, v: VehicleId) -> f64 {
        self.vehicle_gap.get(v.0).copied().unwrap_or(0.0)
    }

    pub fn intervals(&self, v: VehicleId) -> &[JurisdictionInterval] {
        self.intervals.get(v.0).map_or(&[], Vec::as_slice)
    }

    /// Checks each inserted vehicle's jurisdiction intervals tile
    /// `[x_e, x_l]` without gaps or overlaps. Call after [`RewardLedger::finish`].
    pub fn check_tiling(&self, state: &SimState) -> Result<()> {
        for v in state.vehicles() {
            let Some(enter) = v.actual_enter_s else { continue };
            let leave = v.leave_s.unwrap_or(state.clock());
            let iv = self.intervals(v.id);
            let mut t = enter;
            for i in iv {
                if i.enter_s != t || i.leave_s < i.enter_s {
                    return Err(TscError::Contract(format!(
                        "vehicle {} intervals do not tile: {iv:?}",
                        v.id.0
                    )));
                }
                t = i.leave_s;
            }
            if t != leave {
                return Err(TscError::Contract(format!(
                    "vehicle {} intervals end at {t}, lifetime ends at {leave}",
                    v.id.0
                )));
            }
        }
        Ok(())
    }

    /// CSV `d,intersection,r_ifdg,r_stt,r_queue,r_pressure,r_timeloss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d,intersection,r_ifdg,r_stt,r_queue,r_pressure,r_timeloss\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.d, r.intersection, r.ifdg, r.stt, r.queue, r.pressure, r.timeloss
            );
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<RewardRow>> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: String| TscError::Parse {
                path: "reward ledger".into(),
                line: lineno + 1,
                msg,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(perr(format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| perr(format!("`{s}`: {e}")));
            rows.push(RewardRow {
                d: f[0].parse().map_err(|e| perr(format!("`{}`: {e}", f[0])))?,
                intersection: f[1].parse().map_err(|e| perr(format!("`{}`: {e}", f[1])))?,
                ifdg: num(f[2])?,
                stt: num(f[3])?,
                queue: num(f[4])?,
                pressure: num(f[5])?,
                timeloss: num(f[6])?,
            });
        }
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
    /// `abs_diff / |rhs|`, or `abs_diff` when `rhs` is zero.
    pub rel_diff: f64,
}

/// Compares the summed distance-gap rewards against
/// `sum(distance) - v_max * sum(in-network seconds)` taken from the
/// vehicles' odometers and entry/exit clocks.
pub fn ifdg_travel_time_identity(ledger: &RewardLedger, state: &SimState) -> IdentityCheck {
    let lhs: f64 = ledger.rows.iter().map(|r| r.ifdg).sum();
    let v_max = state.config().v_max_mps;
    let mut distance = 0.0;
    let mut seconds = 0u64;
    for v in state.vehicles() {
        let Some(enter) = v.actual_enter_s else { continue };
        let leave = v.leave_s.unwrap_or(state.clock());
        distance += v.distance_m();
        seconds += u64::from(leave - enter);
    }
    let rhs = distance - v_max * seconds as f64;
    let abs_diff = (lhs - rhs).abs();
    IdentityCheck {
        lhs,
        rhs,
        abs_diff,
        rel_diff: if rhs == 0.0 { abs_diff } else { abs_diff / rhs.abs() },
    }
}

/// `(-sum r_stt, total in-network seconds)`; equal for every episode.
pub fn stt_accumulation(ledger: &RewardLedger, state: &SimState) -> (i64, i64) {
    let lhs: i64 = -ledger.rows.iter().map(|r| r.stt as i64).sum::<i64>();
    let rhs: i64 = state
        .vehicles()
        .iter()
        .filter_map(|v| {
            let enter = v.actual_enter_s?;
            Some(i64::from(v.leave_s.unwrap_or(state.clock()) - enter))
        })
        .sum();
    (lhs, rhs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub a: RewardKind,
    pub b: RewardKind,
    /// `None` when either series is constant.
    pub pearson: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub samples: usize,
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationTable {
    pub fn get(&self, a: RewardKind, b: RewardKind) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| (e.a, e.b) == (a, b) || (e.a, e.b) == (b, a))
            .and_then(|e| e.pearson)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# normalization: per-series z-score over (intersection, decision) samples\n");
        out.push_str("series_a,series_b,pearson\n");
        for e in &self.entries {
            let r = e.pearson.map_or_else(|| "NA".to_string(), |r| r.to_string());
            let _ = writeln!(out, "{},{},{r}", e.a.name(), e.b.name());
        }
        out
    }
}

fn z_scores(xs: &[f64]) -> Option<Vec<f64>> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (std > 1e-12 * (1.0 + mean.abs())).then(|| xs.iter().map(|x| (x - mean) / std).collect())
}

/// Pearson correlation of two equally long series via z-scores.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let za = z_scores(a)?;
    let zb = z_scores(b)?;
    Some(za.iter().zip(&zb).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64)
}

/// Pairwise correlations of all reward series over (intersection, decision)
/// samples, self-pairs included.
pub fn reward_correlation_report(rows: &[RewardRow]) -> Result<CorrelationTable> {
    let decisions = rows.iter().map(|r| r.d).collect::<std::collections::BTreeSet<_>>();
    if decisions.len() < 2 {
        return Err(TscError::invalid(format!(
            "correlation needs at least 2 decision steps, got {}",
            decisions.len()
        )));
    }
    let series: Vec<Vec<f64>> = RewardKind::ALL
        .iter()
        .map(|&k| rows.iter().map(|r| r.get(k)).collect())
        .collect();
    let mut entries = Vec::new();
    for (i, &a) in RewardKind::ALL.iter().enumerate() {
        for (j, &b) in RewardKind::ALL.iter().enumerate().skip(i) {
            entries.push(CorrelationEntry {
                a,
                b,
                pearson: pearson(&series[i], &series[j]),
            });
        }
    }
    Ok(CorrelationTable {
        samples: rows.len(),
        entries,
    })
}

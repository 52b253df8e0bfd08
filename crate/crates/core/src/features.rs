//! Per-intersection observations.
//!
//! The raw observation has 28 values: the last selected phase (one-hot, 4),
//! efficient pressure per movement (12) and running vehicles within the
//! effective range per movement (12). The augmented observation appends the
//! previous decision's raw observation and a 2-D sinusoidal position
//! encoding of the grid cell.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TscError};
use crate::network::{IntersectionId, LaneId, Movement, MOVEMENTS_PER_INTERSECTION, PHASES_PER_INTERSECTION};
use crate::sim::{SimState, WAITING_SPEED_MPS};

pub const RAW_DIM: usize = PHASES_PER_INTERSECTION + 2 * MOVEMENTS_PER_INTERSECTION;
pub const DEFAULT_ENCODING_DIM: usize = 16;
pub const AUGMENTED_DIM: usize = 2 * RAW_DIM + DEFAULT_ENCODING_DIM;

/// Waiting vehicles on one lane.
pub fn lane_queue(state: &SimState, lane: LaneId) -> usize {
    state
        .lane_vehicles(lane)
        .filter(|v| v.speed_mps < WAITING_SPEED_MPS)
        .count()
}

/// Waiting vehicles on the intersection's entering lanes.
pub fn queue_length(state: &SimState, x: IntersectionId) -> usize {
    state
        .network()
        .intersection(x)
        .entering_lanes
        .iter()
        .map(|&l| lane_queue(state, l))
        .sum()
}

/// Waiting vehicles on entering lanes minus waiting vehicles on exiting lanes.
pub fn pressure(state: &SimState, x: IntersectionId) -> i64 {
    let inter = state.network().intersection(x);
    let up: usize = inter.entering_lanes.iter().map(|&l| lane_queue(state, l)).sum();
    let down: usize = inter.exiting_lanes.iter().map(|&l| lane_queue(state, l)).sum();
    up as i64 - down as i64
}

/// Upstream queue minus the average queue over the lanes the movement
/// discharges into. With one dedicated lane per movement the upstream
/// average is the single lane's queue.
pub fn efficient_pressure(state: &SimState, movement: &Movement) -> f64 {
    let up = lane_queue(state, movement.from_lane) as f64;
    let down: usize = movement.to_lanes.iter().map(|&l| lane_queue(state, l)).sum();
    up - down as f64 / movement.to_lanes.len() as f64
}

/// Moving vehicles on the movement's lane within `range_m` of the stop line.
pub fn running_in_range(state: &SimState, movement: &Movement, range_m: f64) -> usize {
    let length = state.network().lane(movement.from_lane).length_m;
    state
        .lane_vehicles(movement.from_lane)
        .filter(|v| v.speed_mps >= WAITING_SPEED_MPS && length - v.pos_m <= range_m)
        .count()
}

/// 2-D sinusoidal encoding: the first `dim / 2` values encode the row, the
/// rest the column; each half interleaves sin/cos at frequencies
/// `10000^(-2k / (dim / 2))`.
pub fn position_encoding(grid_pos: (usize, usize), dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(TscError::invalid(format!(
            "position encoding dimension must be a positive multiple of 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for coord in [grid_pos.0, grid_pos.1] {
        for k in 0..half / 2 {
            let freq = 10000f64.powf(-((2 * k) as f64) / half as f64);
            let arg = coord as f64 * freq;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawObservation(pub Vec<f64>);

impl RawObservation {
    pub fn zeros() -> Self {
        RawObservation(vec![0.0; RAW_DIM])
    }

    pub fn phase_onehot(&self) -> &[f64] {
        &self.0[..PHASES_PER_INTERSECTION]
    }

    pub fn efficient_pressure(&self) -> &[f64] {
        &self.0[PHASES_PER_INTERSECTION..PHASES_PER_INTERSECTION + MOVEMENTS_PER_INTERSECTION]
    }

    pub fn running_in_range(&self) -> &[f64] {
        &self.0[PHASES_PER_INTERSECTION + MOVEMENTS_PER_INTERSECTION..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedObservation(pub Vec<f64>);

impl AugmentedObservation {
    pub fn current(&self) -> &[f64] {
        &self.0[..RAW_DIM]
    }

    pub fn previous(&self) -> &[f64] {
        &self.0[RAW_DIM..2 * RAW_DIM]
    }

    pub fn encoding(&self) -> &[f64] {
        &self.0[2 * RAW_DIM..]
    }
}

/// What stands in for the previous observation at the first decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstPrevious {
    #[default]
    Zeros,
    Duplicate,
}

pub fn raw_observation(state: &SimState, x: IntersectionId, range_m: f64) -> RawObservation {
    let inter = state.network().intersection(x);
    let mut v = vec![0.0; RAW_DIM];
    v[state.signal(x).phase] = 1.0;
    for m in &inter.movements {
        v[PHASES_PER_INTERSECTION + m.index] = efficient_pressure(state, m);
        v[PHASES_PER_INTERSECTION + MOVEMENTS_PER_INTERSECTION + m.index] =
            running_in_range(state, m, range_m) as f64;
    }
    RawObservation(v)
}

/// Per-intersection concatenation `[current, previous-or-zeros, encoding]`.
pub fn augment(
    current: &[RawObservation],
    previous: Option<&[RawObservation]>,
    encodings: &[Vec<f64>],
) -> Result<Vec<AugmentedObservation>> {
    if encodings.len() != current.len() || previous.is_some_and(|p| p.len() != current.len()) {
        return Err(TscError::invalid(format!(
            "observation lists disagree: {} current, {:?} previous, {} encodings",
            current.len(),
            previous.map(<[_]>::len),
            encodings.len()
        )));
    }
    let zeros = RawObservation::zeros();
    Ok(current
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let prev = previous.map_or(&zeros, |p| &p[i]);
            let mut v = Vec::with_capacity(2 * RAW_DIM + encodings[i].len());
            v.extend_from_slice(&s.0);
            v.extend_from_slice(&prev.0);
            v.extend_from_slice(&encodings[i]);
            AugmentedObservation(v)
        })
        .collect())
}

/// Stateful builder of augmented observations over an episode.
#[derive(Clone, Debug)]
pub struct Observer {
    pub range_m: f64,
    pub first_previous: FirstPrevious,
    encodings: Vec<Vec<f64>>,
    previous: Option<Vec<RawObservation>>,
}

impl Observer {
    pub fn new(state: &SimState, range_m: f64, encoding_dim: usize, first_previous: FirstPrevious) -> Result<Observer> {
        if !(range_m > 0.0) {
            return Err(TscError::invalid(format!("effective range must be positive, got {range_m}")));
        }
        let encodings = state
            .network()
            .intersections
            .iter()
            .map(|x| position_encoding(x.grid_pos, encoding_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Observer {
            range_m,
            first_previous,
            encodings,
            previous: None,
        })
    }

    /// Effective range equal to the distance covered in one decision interval.
    pub fn default_range(state: &SimState) -> f64 {
        let c = state.config();
        c.v_max_mps * f64::from(c.t_phase_s)
    }

    pub fn encodings(&self) -> &[Vec<f64>] {
        &self.encodings
    }

    pub fn raw(&self, state: &SimState) -> Vec<RawObservation> {
        (0..state.network().num_intersections())
            .map(|x| raw_observation(state, IntersectionId(x), self.range_m))
            .collect()
    }

    /// Observes the current state and remembers it as the next step's previous.
    pub fn observe(&mut self, state: &SimState) -> Result<Vec<AugmentedObservation>> {
        let current = self.raw(state);
        let previous = match (&self.previous, self.first_previous) {
            (Some(p), _) => Some(p.as_slice()),
            (None, FirstPrevious::Zeros) => None,
            (None, FirstPrevious::Duplicate) => Some(current.as_slice()),
        };
        let out = augment(&current, previous, &self.encodings)?;
        self.previous = Some(current);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{movement_index, RoadNetwork, Side, TurnKind};
    use crate::sim::{FlowEntry, FlowSchedule, SimConfig};
    use std::sync::Arc;

    #[test]
    fn encoding_at_origin_is_sin0_cos1() {
        let p = position_encoding((0, 0), 16).unwrap();
        assert_eq!(p.len(), 16);
        for (k, v) in p.iter().enumerate() {
            assert_eq!(*v, if k % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn encoding_halves_are_separable() {
        let a = position_encoding((0, 0), 16).unwrap();
        let b = position_encoding((1, 0), 16).unwrap();
        assert_ne!(a[..8], b[..8]);
        assert_eq!(a[8..], b[8..]);
        assert!(position_encoding((0, 0), 10).is_err());
        assert!(position_encoding((0, 0), 0).is_err());
    }

    #[test]
    fn encodings_distinct_on_4x4() {
        let codes: Vec<Vec<f64>> = (0..16)
            .map(|k| position_encoding((k / 4, k % 4), 16).unwrap())
            .collect();
        for i in 0..16 {
            for j in i + 1..16 {
                let d: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d.sqrt() > 1e-3, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn augment_layout() {
        let cur = vec![RawObservation((0..28).map(f64::from).collect())];
        let enc = vec![position_encoding((1, 2), 16).unwrap()];
        let out = augment(&cur, None, &enc).unwrap();
        assert_eq!(out[0].0.len(), AUGMENTED_DIM);
        assert_eq!(AUGMENTED_DIM, 72);
        assert_eq!(out[0].current(), cur[0].0.as_slice());
        assert!(out[0].previous().iter().all(|&v| v == 0.0));
        assert_eq!(out[0].encoding(), enc[0].as_slice());
        assert!(augment(&cur, None, &[]).is_err());
    }

    #[test]
    fn observer_previous_slot() {
        let net = Arc::new(RoadNetwork::build_grid(1, 2, 300.0).unwrap());
        let s = SimState::new(net, &FlowSchedule::default(), SimConfig::default()).unwrap();
        let mut obs = Observer::new(&s, 166.65, 16, FirstPrevious::Zeros).unwrap();
        let first = obs.observe(&s).unwrap();
        assert!(first[0].previous().iter().all(|&v| v == 0.0));
        let second = obs.observe(&s).unwrap();
        assert_eq!(second[1].previous(), first[1].current());
        let mut dup = Observer::new(&s, 166.65, 16, FirstPrevious::Duplicate).unwrap();
        let first = dup.observe(&s).unwrap();
        assert_eq!(first[0].previous(), first[0].current());
        assert_eq!(first[0].current()[..4], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn moving_vehicle_out_of_range_not_counted() {
        let net = Arc::new(RoadNetwork::build_grid(1, 1, 300.0).unwrap());
        let x = net.intersection(IntersectionId(0)).clone();
        let m = x.movement(movement_index(Side::West, TurnKind::Through)).clone();
        let route = vec![m.from_lane, m.to_lanes[1]];
        let mut s = SimState::new(
            net,
            &FlowSchedule { entries: vec![FlowEntry { enter_s: 0, route }] },
            SimConfig::default(),
        )
        .unwrap();
        // 9 ticks -> 99.99 m, i.e. 200 m from the stop line.
        for _ in 0..9 {
            s.advance_tick().unwrap();
        }
        assert_eq!(running_in_range(&s, &m, 166.65), 0);
        s.advance_tick().unwrap();
        s.advance_tick().unwrap();
        assert_eq!(running_in_range(&s, &m, 166.65), 0);
        s.advance_tick().unwrap();
        // 133.32 m travelled, 166.68 m away: still outside by 3 cm.
        assert_eq!(running_in_range(&s, &m, 166.65), 0);
        s.advance_tick().unwrap();
        assert_eq!(running_in_range(&s, &m, 166.65), 1);
        assert_eq!(lane_queue(&s, m.from_lane), 0);
    }
}

//! Randomized mid-episode states for oracle tests and benchmarks.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::network::{LaneId, RoadNetwork, PHASES_PER_INTERSECTION};
use crate::sim::{FlowEntry, FlowSchedule, SimConfig, SimState};

/// Random `(lane, pos, speed)` placements respecting the minimum spacing.
///
/// Each lane receives up to `max_per_lane` vehicles packed back from the
/// stop line with random gaps. About half of them are stopped; a few sit
/// just below the waiting threshold to exercise it.
pub fn random_placements<R: Rng>(
    net: &RoadNetwork,
    config: &SimConfig,
    rng: &mut R,
    max_per_lane: usize,
) -> Vec<(LaneId, f64, f64)> {
    let headway = config.headway_m();
    let mut out = Vec::new();
    for lane in &net.lanes {
        let count = rng.random_range(0..=max_per_lane);
        let mut pos = lane.length_m - rng.random_range(0.0..15.0);
        for _ in 0..count {
            if pos < 0.0 {
                break;
            }
            let speed = match rng.random_range(0..10) {
                0..=4 => 0.0,
                5 => 0.05,
                _ => rng.random_range(0.1..=config.v_max_mps),
            };
            out.push((lane.id, pos, speed));
            pos -= headway + rng.random_range(0.0..40.0);
        }
    }
    out
}

/// A random state: placements from [`random_placements`] and random phases.
pub fn random_state<R: Rng>(
    net: &Arc<RoadNetwork>,
    config: &SimConfig,
    rng: &mut R,
    max_per_lane: usize,
) -> Result<SimState> {
    let placements = random_placements(net, config, rng, max_per_lane);
    let phases: Vec<usize> = (0..net.num_intersections())
        .map(|_| rng.random_range(0..PHASES_PER_INTERSECTION))
        .collect();
    SimState::with_placed_vehicles(net.clone(), config.clone(), &placements, &phases)
}

/// A random route: starts on a boundary entry lane and picks a uniformly
/// random downstream lane at every intersection until it exits the grid.
pub fn random_route<R: Rng>(net: &RoadNetwork, rng: &mut R) -> Vec<LaneId> {
    let entries: Vec<LaneId> = net.boundary_entry_lanes().map(|l| l.id).collect();
    let mut lane = entries[rng.random_range(0..entries.len())];
    let mut route = vec![lane];
    while let Some((_, m)) = net.movement_of_lane(lane) {
        lane = m.to_lanes[rng.random_range(0..m.to_lanes.len())];
        route.push(lane);
    }
    route
}

/// `count` vehicles on random routes with entry times uniform in `[0, horizon)`.
pub fn random_schedule<R: Rng>(net: &RoadNetwork, rng: &mut R, count: usize, horizon_s: u32) -> FlowSchedule {
    let mut entries: Vec<FlowEntry> = (0..count)
        .map(|_| FlowEntry {
            enter_s: rng.random_range(0..horizon_s),
            route: random_route(net, rng),
        })
        .collect();
    entries.sort_by_key(|e| e.enter_s);
    FlowSchedule { entries }
}

//! Classical phase selection rules and a name-keyed controller registry.
//!
//! The scoring functions are pure and evaluate one intersection; the
//! [`Controller`] trait wraps them for the episode loop so that learned
//! policies can share the same selection path.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TscError};
use crate::features::{efficient_pressure, lane_queue, running_in_range, Observer};
use crate::network::{IntersectionId, Movement, PHASES_PER_INTERSECTION};
use crate::sim::SimState;

pub const DEFAULT_CYCLE: [usize; PHASES_PER_INTERSECTION] = [0, 1, 2, 3];

/// Index of the largest score, lowest index on ties.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn fixed_time(d: usize, cycle: &[usize; PHASES_PER_INTERSECTION]) -> usize {
    cycle[d % PHASES_PER_INTERSECTION]
}

pub fn validate_cycle(cycle: &[usize]) -> Result<[usize; PHASES_PER_INTERSECTION]> {
    let mut seen = [false; PHASES_PER_INTERSECTION];
    if cycle.len() != PHASES_PER_INTERSECTION {
        return Err(TscError::invalid(format!("cycle {cycle:?} must list 4 phases")));
    }
    for &p in cycle {
        if p >= PHASES_PER_INTERSECTION || std::mem::replace(&mut seen[p], true) {
            return Err(TscError::invalid(format!("cycle {cycle:?} is not a permutation of 0..4")));
        }
    }
    Ok([cycle[0], cycle[1], cycle[2], cycle[3]])
}

/// Waiting vehicles on the from-lane minus those on all of its downstream lanes.
pub fn movement_pressure(state: &SimState, m: &Movement) -> i64 {
    let down: usize = m.to_lanes.iter().map(|&l| lane_queue(state, l)).sum();
    lane_queue(state, m.from_lane) as i64 - down as i64
}

fn phase_scores(state: &SimState, x: IntersectionId, score: impl Fn(&Movement) -> f64) -> [f64; PHASES_PER_INTERSECTION] {
    let inter = state.network().intersection(x);
    std::array::from_fn(|p| inter.phase_movements(p).map(&score).sum())
}

pub fn max_pressure(state: &SimState, x: IntersectionId) -> usize {
    argmax_lowest(&phase_scores(state, x, |m| movement_pressure(state, m) as f64))
}

pub fn efficient_mp(state: &SimState, x: IntersectionId) -> usize {
    argmax_lowest(&phase_scores(state, x, |m| efficient_pressure(state, m)))
}

/// How the current phase's request is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvancedVariant {
    /// Running vehicles in range plus the phase's efficient pressure.
    #[default]
    Combined,
    /// Running vehicles in range only.
    RunningOnly,
}

impl AdvancedVariant {
    pub fn name(self) -> &'static str {
        match self {
            AdvancedVariant::Combined => "combined",
            AdvancedVariant::RunningOnly => "running_only",
        }
    }
}

impl FromStr for AdvancedVariant {
    type Err = TscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(AdvancedVariant::Combined),
            "running_only" => Ok(AdvancedVariant::RunningOnly),
            _ => Err(TscError::invalid(format!("unknown advanced-mp variant `{s}`"))),
        }
    }
}

/// Scores used by [`advanced_mp`], exposed for inspection.
pub fn advanced_mp_scores(
    state: &SimState,
    x: IntersectionId,
    range_m: f64,
    variant: AdvancedVariant,
) -> [f64; PHASES_PER_INTERSECTION] {
    let current = state.signal(x).phase;
    let mut scores = phase_scores(state, x, |m| efficient_pressure(state, m));
    let running: f64 = state
        .network()
        .intersection(x)
        .phase_movements(current)
        .map(|m| running_in_range(state, m, range_m) as f64)
        .sum();
    scores[current] = match variant {
        AdvancedVariant::Combined => scores[current] + running,
        AdvancedVariant::RunningOnly => running,
    };
    scores
}

/// Ties prefer the current phase, then the lowest id.
pub fn advanced_mp(state: &SimState, x: IntersectionId, range_m: f64, variant: AdvancedVariant) -> usize {
    let scores = advanced_mp_scores(state, x, range_m, variant);
    let current = state.signal(x).phase;
    let best = argmax_lowest(&scores);
    if scores[current] >= scores[best] {
        current
    } else {
        best
    }
}

/// Selects one phase per intersection at each decision boundary.
pub trait Controller: Send {
    fn name(&self) -> &str;

    /// Called once before an episode starts.
    fn reset(&mut self, _state: &SimState) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, state: &SimState, d: usize) -> Result<Vec<usize>>;

    /// Settings worth recording next to results.
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "name": self.name() })
    }
}

impl fmt::Debug for dyn Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Controller({})", self.name())
    }
}

fn per_intersection(state: &SimState, f: impl Fn(IntersectionId) -> usize) -> Vec<usize> {
    (0..state.network().num_intersections()).map(|x| f(IntersectionId(x))).collect()
}

#[derive(Clone, Debug)]
pub struct FixedTime {
    pub cycle: [usize; PHASES_PER_INTERSECTION],
}

impl Controller for FixedTime {
    fn name(&self) -> &str {
        "fixed"
    }

    fn decide(&mut self, state: &SimState, d: usize) -> Result<Vec<usize>> {
        Ok(vec![fixed_time(d, &self.cycle); state.network().num_intersections()])
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "name": "fixed", "cycle": self.cycle })
    }
}

#[derive(Clone, Debug)]
pub struct MaxPressure;

impl Controller for MaxPressure {
    fn name(&self) -> &str {
        "maxpressure"
    }

    fn decide(&mut self, state: &SimState, _d: usize) -> Result<Vec<usize>> {
        Ok(per_intersection(state, |x| max_pressure(state, x)))
    }
}

#[derive(Clone, Debug)]
pub struct EfficientMaxPressure;

impl Controller for EfficientMaxPressure {
    fn name(&self) -> &str {
        "efficientmp"
    }

    fn decide(&mut self, state: &SimState, _d: usize) -> Result<Vec<usize>> {
        Ok(per_intersection(state, |x| efficient_mp(state, x)))
    }
}

#[derive(Clone, Debug)]
pub struct AdvancedMaxPressure {
    /// `None` uses `v_max * T_phase` of the running simulation.
    pub range_m: Option<f64>,
    pub variant: AdvancedVariant,
}

impl AdvancedMaxPressure {
    fn range(&self, state: &SimState) -> f64 {
        self.range_m.unwrap_or_else(|| Observer::default_range(state))
    }
}

impl Controller for AdvancedMaxPressure {
    fn name(&self) -> &str {
        "advancedmp"
    }

    fn decide(&mut self, state: &SimState, _d: usize) -> Result<Vec<usize>> {
        let range = self.range(state);
        Ok(per_intersection(state, |x| advanced_mp(state, x, range, self.variant)))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "name": "advancedmp",
            "range_m": self.range_m,
            "variant": self.variant.name(),
        })
    }
}

/// Construction options shared by all registered controllers; each
/// factory reads the fields it needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerParams {
    pub cycle: Option<Vec<usize>>,
    pub range_m: Option<f64>,
    pub advanced_variant: AdvancedVariant,
    /// Trained network for learned controllers.
    pub checkpoint: Option<PathBuf>,
}

pub type ControllerFactory = Box<dyn Fn(&ControllerParams) -> Result<Box<dyn Controller>> + Send + Sync>;

/// Controllers keyed by name.
pub struct ControllerRegistry {
    factories: BTreeMap<String, ControllerFactory>,
}

impl Default for ControllerRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

impl ControllerRegistry {
    pub fn empty() -> Self {
        ControllerRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// `fixed`, `maxpressure`, `efficientmp`, `advancedmp`.
    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register("fixed", |p| {
            let cycle = match &p.cycle {
                Some(c) => validate_cycle(c)?,
                None => DEFAULT_CYCLE,
            };
            Ok(Box::new(FixedTime { cycle }))
        });
        r.register("maxpressure", |_| Ok(Box::new(MaxPressure)));
        r.register("efficientmp", |_| Ok(Box::new(EfficientMaxPressure)));
        r.register("advancedmp", |p| {
            if let Some(range) = p.range_m {
                if !(range > 0.0 && range.is_finite()) {
                    return Err(TscError::invalid(format!("effective range must be positive, got {range}")));
                }
            }
            Ok(Box::new(AdvancedMaxPressure {
                range_m: p.range_m,
                variant: p.advanced_variant,
            }))
        });
        r
    }

    /// Adds or replaces a factory.
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&ControllerParams) -> Result<Box<dyn Controller>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, name: &str, params: &ControllerParams) -> Result<Box<dyn Controller>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            TscError::NotFound(format!(
                "controller `{name}` (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(params)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::network::{NetworkSpec, Side, TurnKind};
    use crate::sim::SimConfig;

    fn single() -> Arc<crate::network::RoadNetwork> {
        Arc::new(NetworkSpec { rows: 1, cols: 1, lane_length_m: 300.0 }.build().unwrap())
    }

    fn from_lane(net: &crate::network::RoadNetwork, side: Side, kind: TurnKind) -> crate::network::LaneId {
        net.intersections[0].entering_lanes[crate::network::movement_index(side, kind)]
    }

    fn stopped_queue(lane: crate::network::LaneId, n: usize) -> Vec<(crate::network::LaneId, f64, f64)> {
        (0..n).map(|k| (lane, 295.0 - 7.5 * k as f64, 0.0)).collect()
    }

    #[test]
    fn fixed_time_cycle() {
        let c = DEFAULT_CYCLE;
        assert_eq!((0..4).map(|d| fixed_time(d, &c)).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(fixed_time(4, &c), 0);
        assert_eq!(fixed_time(241, &c), 1);
        assert!(validate_cycle(&[0, 1, 1, 3]).is_err());
        assert!(validate_cycle(&[0, 1, 2]).is_err());
        assert_eq!(validate_cycle(&[3, 2, 1, 0]).unwrap(), [3, 2, 1, 0]);
    }

    #[test]
    fn empty_network_choices() {
        let net = single();
        let s = SimState::with_placed_vehicles(net, SimConfig::default(), &[], &[2]).unwrap();
        let x = IntersectionId(0);
        assert_eq!(max_pressure(&s, x), 0);
        assert_eq!(efficient_mp(&s, x), 0);
        assert_eq!(advanced_mp(&s, x, 166.65, AdvancedVariant::Combined), 2);
    }

    #[test]
    fn max_pressure_picks_ns_through() {
        let net = single();
        let mut placed = stopped_queue(from_lane(&net, Side::North, TurnKind::Through), 6);
        placed.extend(stopped_queue(from_lane(&net, Side::South, TurnKind::Through), 5));
        placed.extend(stopped_queue(from_lane(&net, Side::East, TurnKind::Left), 2));
        placed.extend(stopped_queue(from_lane(&net, Side::West, TurnKind::Through), 2));
        let s = SimState::with_placed_vehicles(net, SimConfig::default(), &placed, &[3]).unwrap();
        // Phase pressures by hand: NS-through 11, NS-left 0, EW-through 2, EW-left 2.
        assert_eq!(max_pressure(&s, IntersectionId(0)), 0);
    }

    #[test]
    fn advanced_keeps_current_with_running_vehicles() {
        let net = single();
        let lane = from_lane(&net, Side::East, TurnKind::Through);
        let mut placed: Vec<_> = (0..5).map(|k| (lane, 290.0 - 20.0 * k as f64, 8.0)).collect();
        placed.extend(stopped_queue(from_lane(&net, Side::North, TurnKind::Left), 4));
        let s = SimState::with_placed_vehicles(net, SimConfig::default(), &placed, &[2]).unwrap();
        let x = IntersectionId(0);
        assert_eq!(advanced_mp_scores(&s, x, 166.65, AdvancedVariant::Combined), [0.0, 4.0, 5.0, 0.0]);
        assert_eq!(advanced_mp(&s, x, 166.65, AdvancedVariant::Combined), 2);
        // A range that covers only the first vehicle drops the request below 4.
        assert_eq!(advanced_mp(&s, x, 15.0, AdvancedVariant::RunningOnly), 1);
    }

    #[test]
    fn registry_lookup() {
        let r = ControllerRegistry::with_builtin();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["advancedmp", "efficientmp", "fixed", "maxpressure"]);
        let c = r.create("maxpressure", &ControllerParams::default()).unwrap();
        assert_eq!(c.name(), "maxpressure");
        assert!(matches!(r.create("colight", &ControllerParams::default()), Err(TscError::NotFound(_))));
        let bad = ControllerParams {
            cycle: Some(vec![0, 0, 1, 2]),
            ..Default::default()
        };
        assert!(r.create("fixed", &bad).is_err());
    }
}

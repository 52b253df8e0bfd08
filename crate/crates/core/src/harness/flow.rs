//! Synthetic vehicle schedules: a base flow over shortest boundary-to-boundary
//! routes, then copies of a sample of vehicles re-inserted inside a rush window.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TscError};
use crate::network::{IntersectionId, LaneId, RoadNetwork, Side, TurnKind, LANES_PER_ROAD};
use crate::sim::{FlowEntry, FlowSchedule};

/// Width of the arrival-statistics bins.
pub const STATS_BIN_S: u32 = 300;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasePattern {
    /// Uniform endpoints, uniform enter times.
    #[default]
    Uniform,
    /// Endpoints on the middle row and column weighted by `hotspot_weight`.
    PeakedOd,
    /// Triangular enter-time density rising to the middle of the horizon and back.
    RushHourRamp,
}

impl std::str::FromStr for BasePattern {
    type Err = TscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BasePattern::Uniform),
            "peaked_od" | "peaked-od" => Ok(BasePattern::PeakedOd),
            "rush_hour_ramp" | "rush-hour-ramp" => Ok(BasePattern::RushHourRamp),
            other => Err(TscError::invalid(format!(
                "unknown flow pattern `{other}` (uniform, peaked_od, rush_hour_ramp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowSynthesisSpec {
    pub pattern: BasePattern,
    /// Vehicles in the base flow.
    pub total_vehicles: usize,
    /// Copies re-inserted per resampled vehicle (fractional values round the total).
    pub fluctuation_factor: f64,
    /// Share of base vehicles that get re-inserted copies.
    pub resample_fraction: f64,
    /// `[t0, t1)` for re-assigned enter times; `None` is the middle third of the horizon.
    pub rush_window_s: Option<(u32, u32)>,
    pub horizon_s: u32,
    pub hotspot_weight: f64,
    pub seed: u64,
}

impl Default for FlowSynthesisSpec {
    fn default() -> Self {
        FlowSynthesisSpec {
            pattern: BasePattern::Uniform,
            total_vehicles: 1000,
            fluctuation_factor: 1.0,
            resample_fraction: 0.0,
            rush_window_s: None,
            horizon_s: 3600,
            hotspot_weight: 4.0,
            seed: 0,
        }
    }
}

impl FlowSynthesisSpec {
    pub fn rush_window(&self) -> (u32, u32) {
        self.rush_window_s
            .unwrap_or((self.horizon_s / 3, 2 * self.horizon_s / 3))
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_vehicles == 0 {
            return Err(TscError::invalid("flow synthesis needs at least one vehicle"));
        }
        if !(0.0..=1.0).contains(&self.resample_fraction) {
            return Err(TscError::invalid(format!(
                "resample fraction must lie in [0, 1], got {}",
                self.resample_fraction
            )));
        }
        if !(self.fluctuation_factor >= 0.0 && self.fluctuation_factor.is_finite()) {
            return Err(TscError::invalid(format!(
                "fluctuation factor must be finite and non-negative, got {}",
                self.fluctuation_factor
            )));
        }
        if self.horizon_s == 0 {
            return Err(TscError::invalid("flow horizon must be positive"));
        }
        let (t0, t1) = self.rush_window();
        if t0 >= t1 || t1 > self.horizon_s {
            return Err(TscError::invalid(format!(
                "rush window [{t0}, {t1}) must be non-empty and inside [0, {})",
                self.horizon_s
            )));
        }
        if !(self.hotspot_weight > 0.0) {
            return Err(TscError::invalid("hotspot weight must be positive"));
        }
        Ok(())
    }
}

/// A boundary road: the intersection and the side it touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Endpoint {
    pub intersection: IntersectionId,
    pub side: Side,
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{:?}", self.intersection, self.side)
    }
}

/// Boundary roads in intersection, then side order.
pub fn boundary_endpoints(net: &RoadNetwork) -> Vec<Endpoint> {
    net.intersections
        .iter()
        .flat_map(|x| {
            Side::ALL
                .into_iter()
                .filter(|s| x.neighbors[s.index()].is_none())
                .map(|side| Endpoint {
                    intersection: x.id,
                    side,
                })
        })
        .collect()
}

/// Fewest-intersection lane route entering at `from` and leaving at `to`;
/// ties resolve towards left, through, right in that order. The final
/// lane is the through slot of the exit road.
pub fn shortest_route(net: &RoadNetwork, from: Endpoint, to: Endpoint) -> Result<Vec<LaneId>> {
    // State: (intersection, approach side); parent pointers for the path.
    let key = |x: IntersectionId, s: Side| x.0 * 4 + s.index();
    let mut parent: Vec<Option<(usize, TurnKind)>> = vec![None; net.num_intersections() * 4];
    let mut seen = vec![false; parent.len()];
    let start = key(from.intersection, from.side);
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    let mut found = None;
    'search: while let Some(k) = queue.pop_front() {
        let (x, approach) = (IntersectionId(k / 4), Side::from_index(k % 4));
        for kind in TurnKind::ALL {
            let exit = kind.exit_side(approach);
            match net.intersection(x).neighbors[exit.index()] {
                None if x == to.intersection && exit == to.side => {
                    found = Some((k, kind));
                    break 'search;
                }
                None => {}
                Some(y) => {
                    let next = key(y, exit.opposite());
                    if !seen[next] {
                        seen[next] = true;
                        parent[next] = Some((k, kind));
                        queue.push_back(next);
                    }
                }
            }
        }
    }
    let (last, last_kind) = found.ok_or_else(|| {
        TscError::invalid(format!("no route from boundary road {from} to boundary road {to}"))
    })?;
    let mut steps = vec![(last, last_kind)];
    let mut k = last;
    while let Some((p, kind)) = parent[k] {
        steps.push((p, kind));
        k = p;
    }
    steps.reverse();
    let mut route: Vec<LaneId> = steps
        .iter()
        .map(|&(k, kind)| {
            let x = net.intersection(IntersectionId(k / 4));
            x.entering_lanes[(k % 4) * LANES_PER_ROAD + kind.index()]
        })
        .collect();
    let end = net.intersection(to.intersection);
    route.push(end.exiting_lanes[to.side.index() * LANES_PER_ROAD + TurnKind::Through.index()]);
    Ok(route)
}

fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Arrival counts per bin and their summary, as in a dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub vehicles: usize,
    pub bin_s: u32,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: usize,
    pub min: usize,
}

impl FlowStats {
    /// Bins cover `[0, horizon)`; arrivals at or after the horizon are ignored.
    pub fn compute(flow: &FlowSchedule, horizon_s: u32, bin_s: u32) -> FlowStats {
        let bins = horizon_s.div_ceil(bin_s).max(1) as usize;
        let mut counts = vec![0usize; bins];
        for e in &flow.entries {
            if e.enter_s < horizon_s {
                counts[(e.enter_s / bin_s) as usize] += 1;
            }
        }
        let n = bins as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
        FlowStats {
            vehicles: flow.len(),
            bin_s,
            mean,
            std: var.sqrt(),
            max: counts.iter().copied().max().unwrap_or(0),
            min: counts.iter().copied().min().unwrap_or(0),
            counts,
        }
    }

    /// `mean,std,max,min` header plus one row.
    pub fn to_csv(&self) -> String {
        format!("mean,std,max,min\n{},{},{},{}\n", self.mean, self.std, self.max, self.min)
    }
}

#[derive(Clone, Debug)]
pub struct SynthesizedFlow {
    pub base: FlowSchedule,
    pub flow: FlowSchedule,
    pub base_stats: FlowStats,
    pub stats: FlowStats,
}

/// Builds the base flow and applies the re-insertion step.
pub fn synthesize_flow(net: &RoadNetwork, spec: &FlowSynthesisSpec) -> Result<SynthesizedFlow> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ends = boundary_endpoints(net);
    let weights: Vec<f64> = ends
        .iter()
        .map(|e| {
            let (r, c) = net.intersection(e.intersection).grid_pos;
            let central = match e.side {
                Side::East | Side::West => r == net.rows / 2,
                Side::North | Side::South => c == net.cols / 2,
            };
            if spec.pattern == BasePattern::PeakedOd && central {
                spec.hotspot_weight
            } else {
                1.0
            }
        })
        .collect();
    let mut routes = std::collections::HashMap::new();
    let mut base = Vec::with_capacity(spec.total_vehicles);
    for _ in 0..spec.total_vehicles {
        let from = weighted_pick(&weights, &mut rng);
        let to = loop {
            let to = weighted_pick(&weights, &mut rng);
            if to != from || ends.len() == 1 {
                break to;
            }
        };
        let route = match routes.get(&(from, to)) {
            Some(r) => Vec::clone(r),
            None => {
                let r = shortest_route(net, ends[from], ends[to])?;
                routes.insert((from, to), r.clone());
                r
            }
        };
        let h = spec.horizon_s;
        let enter_s = match spec.pattern {
            BasePattern::RushHourRamp => {
                let u = (rng.random::<f64>() + rng.random::<f64>()) / 2.0;
                ((u * h as f64) as u32).min(h - 1)
            }
            _ => rng.random_range(0..h),
        };
        base.push(FlowEntry { enter_s, route });
    }
    base.sort_by_key(|e| e.enter_s);
    let base = FlowSchedule { entries: base };

    let mut entries = base.entries.clone();
    let chosen = (spec.resample_fraction * base.len() as f64).round() as usize;
    if chosen > 0 {
        let picks = sample(&mut rng, base.len(), chosen).into_vec();
        let copies = (chosen as f64 * spec.fluctuation_factor).round() as usize;
        let (t0, t1) = spec.rush_window();
        for j in 0..copies {
            entries.push(FlowEntry {
                enter_s: rng.random_range(t0..t1),
                route: base.entries[picks[j % chosen]].route.clone(),
            });
        }
    }
    entries.sort_by_key(|e| e.enter_s);
    let flow = FlowSchedule { entries };
    flow.validate(net)?;
    Ok(SynthesizedFlow {
        base_stats: FlowStats::compute(&base, spec.horizon_s, STATS_BIN_S),
        stats: FlowStats::compute(&flow, spec.horizon_s, STATS_BIN_S),
        base,
        flow,
    })
}

/// Writes `flow.csv`, `flow_stats.csv` and `flow_stats.json` into `dir`.
pub fn write_flow(dir: &Path, flow: &SynthesizedFlow) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TscError::io(dir, e))?;
    flow.flow.save(&dir.join("flow.csv"))?;
    super::write_text(&dir.join("flow_stats.csv"), &flow.stats.to_csv())?;
    crate::learner::write_json(&dir.join("flow_stats.json"), &flow.stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(r: usize, c: usize) -> RoadNetwork {
        RoadNetwork::build_grid(r, c, 300.0).unwrap()
    }

    #[test]
    fn routes_are_valid_and_shortest_on_straight_crossings() {
        let net = grid(3, 3);
        let ends = boundary_endpoints(&net);
        assert_eq!(ends.len(), 12);
        for &a in &ends {
            for &b in &ends {
                let route = shortest_route(&net, a, b).unwrap();
                FlowSchedule {
                    entries: vec![FlowEntry { enter_s: 0, route: route.clone() }],
                }
                .validate(&net)
                .unwrap();
                if a.side == b.side.opposite() && a.intersection != b.intersection {
                    let (ra, ca) = net.intersection(a.intersection).grid_pos;
                    let (rb, cb) = net.intersection(b.intersection).grid_pos;
                    if ra == rb || ca == cb {
                        assert_eq!(route.len(), 4, "{a} -> {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn u_turn_on_single_intersection_is_an_error() {
        let net = grid(1, 1);
        let e = Endpoint { intersection: IntersectionId(0), side: Side::North };
        let err = shortest_route(&net, e, e).unwrap_err().to_string();
        assert!(err.contains("0:North"), "{err}");
    }

    #[test]
    fn zero_fraction_is_the_base_flow() {
        let net = grid(2, 2);
        for pattern in [BasePattern::Uniform, BasePattern::PeakedOd, BasePattern::RushHourRamp] {
            let spec = FlowSynthesisSpec { pattern, total_vehicles: 300, fluctuation_factor: 3.0, ..Default::default() };
            let f = synthesize_flow(&net, &spec).unwrap();
            assert_eq!(f.flow, f.base);
            assert_eq!(f.stats, f.base_stats);
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let net = grid(1, 1);
        for spec in [
            FlowSynthesisSpec { total_vehicles: 0, ..Default::default() },
            FlowSynthesisSpec { resample_fraction: 1.5, ..Default::default() },
            FlowSynthesisSpec { rush_window_s: Some((10, 10)), ..Default::default() },
        ] {
            assert!(synthesize_flow(&net, &spec).is_err());
        }
    }
}

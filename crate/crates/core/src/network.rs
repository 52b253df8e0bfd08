//! Static road-network model: a grid of 4-way intersections joined by
//! three-lane directed roads.
//!
//! Every road carries one dedicated lane per turn kind (left, through,
//! right). A lane entering an intersection belongs to that intersection's
//! jurisdiction; lanes that leave the grid on its perimeter belong to the
//! intersection they leave from. Together these rules partition all lanes.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TscError};

pub const MOVEMENTS_PER_INTERSECTION: usize = 12;
pub const PHASES_PER_INTERSECTION: usize = 4;
pub const LANES_PER_ROAD: usize = 3;

/// Default uniform lane length in meters.
pub const DEFAULT_LANE_LENGTH_M: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntersectionId(pub usize);

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lane {}", self.0)
    }
}

impl fmt::Display for IntersectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "intersection {}", self.0)
    }
}

/// Compass side of an intersection, in clockwise order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    North,
    East,
    South,
    West,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::North, Side::East, Side::South, Side::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Side {
        Side::ALL[i % 4]
    }

    pub fn opposite(self) -> Side {
        Side::from_index(self.index() + 2)
    }

    /// Grid offset (d_row, d_col) of the neighbor on this side. Row 0 is north.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Side::North => (-1, 0),
            Side::East => (0, 1),
            Side::South => (1, 0),
            Side::West => (0, -1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TurnKind {
    Left,
    Through,
    Right,
}

impl TurnKind {
    pub const ALL: [TurnKind; 3] = [TurnKind::Left, TurnKind::Through, TurnKind::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Side through which a vehicle arriving from `approach` leaves.
    ///
    /// Arriving from the north means heading south; a left turn then heads
    /// east. With sides numbered clockwise that is `approach + 1`, through is
    /// `approach + 2` and right is `approach + 3`.
    pub fn exit_side(self, approach: Side) -> Side {
        Side::from_index(approach.index() + self.index() + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub length_m: f64,
    /// Owning intersection for reward attribution.
    pub jurisdiction: IntersectionId,
    pub upstream: Option<IntersectionId>,
    pub downstream: Option<IntersectionId>,
    /// Direction of travel.
    pub heading: Side,
    /// Which dedicated slot of the road this lane is (left/through/right).
    pub slot: TurnKind,
    pub is_boundary_entry: bool,
    pub is_boundary_exit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    /// Index 0..12 within the intersection: `approach * 3 + kind`.
    pub index: usize,
    pub approach: Side,
    pub kind: TurnKind,
    pub from_lane: LaneId,
    /// The three lanes of the road this movement discharges into.
    pub to_lanes: [LaneId; LANES_PER_ROAD],
}

impl Movement {
    pub fn is_gated(&self) -> bool {
        self.kind != TurnKind::Right
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub id: usize,
    /// Movement indices released by this phase.
    pub movements: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    pub grid_pos: (usize, usize),
    /// Indexed by `approach * 3 + kind`.
    pub entering_lanes: [LaneId; MOVEMENTS_PER_INTERSECTION],
    /// Indexed by `exit_side * 3 + slot`.
    pub exiting_lanes: [LaneId; MOVEMENTS_PER_INTERSECTION],
    pub movements: Vec<Movement>,
    pub phases: Vec<Phase>,
    pub neighbors: [Option<IntersectionId>; 4],
}

impl Intersection {
    pub fn movement(&self, index: usize) -> &Movement {
        &self.movements[index]
    }

    pub fn phase_movements(&self, phase: usize) -> impl Iterator<Item = &Movement> {
        self.phases[phase].movements.iter().map(|&m| &self.movements[m])
    }
}

pub fn movement_index(approach: Side, kind: TurnKind) -> usize {
    approach.index() * LANES_PER_ROAD + kind.index()
}

/// The fixed four-phase plan: NS-through, NS-left, EW-through, EW-left.
/// Right turns are never part of a phase.
pub fn phase_table() -> Vec<Phase> {
    use Side::*;
    use TurnKind::*;
    let pairs = [
        (North, South, Through),
        (North, South, Left),
        (East, West, Through),
        (East, West, Left),
    ];
    pairs
        .iter()
        .enumerate()
        .map(|(id, &(a, b, kind))| Phase {
            id,
            movements: [movement_index(a, kind), movement_index(b, kind)],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub rows: usize,
    pub cols: usize,
    pub lane_length_m: f64,
    pub intersections: Vec<Intersection>,
    pub lanes: Vec<Lane>,
    /// For each lane feeding an intersection: (intersection, movement index).
    lane_movement: Vec<Option<(IntersectionId, usize)>>,
}

impl RoadNetwork {
    /// Builds a `rows x cols` grid with uniform lane length.
    pub fn build_grid(rows: usize, cols: usize, lane_length_m: f64) -> Result<RoadNetwork> {
        if rows == 0 || cols == 0 {
            return Err(TscError::invalid(format!(
                "grid must have at least one row and column, got {rows}x{cols}"
            )));
        }
        if !(lane_length_m > 0.0) || !lane_length_m.is_finite() {
            return Err(TscError::invalid(format!(
                "lane length must be positive, got {lane_length_m}"
            )));
        }

        let n = rows * cols;
        let neighbor = |x: usize, side: Side| -> Option<usize> {
            let (r, c) = (x / cols, x % cols);
            let (dr, dc) = side.offset();
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            (nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols)
                .then(|| nr as usize * cols + nc as usize)
        };

        let mut lanes = Vec::new();
        let mut entering = vec![[LaneId(0); MOVEMENTS_PER_INTERSECTION]; n];
        for (x, slots) in entering.iter_mut().enumerate() {
            for approach in Side::ALL {
                let upstream = neighbor(x, approach);
                for kind in TurnKind::ALL {
                    let id = LaneId(lanes.len());
                    lanes.push(Lane {
                        id,
                        length_m: lane_length_m,
                        jurisdiction: IntersectionId(x),
                        upstream: upstream.map(IntersectionId),
                        downstream: Some(IntersectionId(x)),
                        heading: approach.opposite(),
                        slot: kind,
                        is_boundary_entry: upstream.is_none(),
                        is_boundary_exit: false,
                    });
                    slots[movement_index(approach, kind)] = id;
                }
            }
        }

        let mut exiting = vec![[LaneId(0); MOVEMENTS_PER_INTERSECTION]; n];
        for (x, slots) in exiting.iter_mut().enumerate() {
            for side in Side::ALL {
                for kind in TurnKind::ALL {
                    let slot = side.index() * LANES_PER_ROAD + kind.index();
                    slots[slot] = match neighbor(x, side) {
                        Some(y) => entering[y][movement_index(side.opposite(), kind)],
                        None => {
                            let id = LaneId(lanes.len());
                            lanes.push(Lane {
                                id,
                                length_m: lane_length_m,
                                jurisdiction: IntersectionId(x),
                                upstream: Some(IntersectionId(x)),
                                downstream: None,
                                heading: side,
                                slot: kind,
                                is_boundary_entry: false,
                                is_boundary_exit: true,
                            });
                            id
                        }
                    };
                }
            }
        }

        let phases = phase_table();
        let mut lane_movement = vec![None; lanes.len()];
        let intersections = (0..n)
            .map(|x| {
                let movements: Vec<Movement> = Side::ALL
                    .iter()
                    .flat_map(|&approach| {
                        TurnKind::ALL.iter().map(move |&kind| (approach, kind))
                    })
                    .map(|(approach, kind)| {
                        let index = movement_index(approach, kind);
                        let out = kind.exit_side(approach).index() * LANES_PER_ROAD;
                        let from_lane = entering[x][index];
                        lane_movement[from_lane.0] = Some((IntersectionId(x), index));
                        Movement {
                            index,
                            approach,
                            kind,
                            from_lane,
                            to_lanes: [exiting[x][out], exiting[x][out + 1], exiting[x][out + 2]],
                        }
                    })
                    .collect();
                let mut neighbors = [None; 4];
                for side in Side::ALL {
                    neighbors[side.index()] = neighbor(x, side).map(IntersectionId);
                }
                Intersection {
                    id: IntersectionId(x),
                    grid_pos: (x / cols, x % cols),
                    entering_lanes: entering[x],
                    exiting_lanes: exiting[x],
                    movements,
                    phases: phases.clone(),
                    neighbors,
                }
            })
            .collect();

        Ok(RoadNetwork {
            rows,
            cols,
            lane_length_m,
            intersections,
            lanes,
            lane_movement,
        })
    }

    pub fn num_intersections(&self) -> usize {
        self.intersections.len()
    }

    pub fn intersection(&self, id: IntersectionId) -> &Intersection {
        &self.intersections[id.0]
    }

    pub fn intersection_at(&self, row: usize, col: usize) -> Option<IntersectionId> {
        (row < self.rows && col < self.cols).then(|| IntersectionId(row * self.cols + col))
    }

    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.0]
    }

    pub fn try_lane(&self, id: LaneId) -> Result<&Lane> {
        self.lanes
            .get(id.0)
            .ok_or_else(|| TscError::NotFound(format!("{id} (network has {} lanes)", self.lanes.len())))
    }

    /// The unique intersection that owns `lane` for reward attribution.
    pub fn jurisdiction_of(&self, lane: LaneId) -> Result<IntersectionId> {
        self.try_lane(lane).map(|l| l.jurisdiction)
    }

    /// The movement a lane feeds, if it is an entering lane.
    pub fn movement_of_lane(&self, lane: LaneId) -> Option<(IntersectionId, &Movement)> {
        self.lane_movement
            .get(lane.0)
            .copied()
            .flatten()
            .map(|(x, m)| (x, &self.intersections[x.0].movements[m]))
    }

    /// True when a vehicle on `from` may continue onto `to` through one intersection.
    pub fn connects(&self, from: LaneId, to: LaneId) -> bool {
        self.movement_of_lane(from)
            .is_some_and(|(_, m)| m.to_lanes.contains(&to))
    }

    pub fn boundary_entry_lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.iter().filter(|l| l.is_boundary_entry)
    }

    pub fn boundary_exit_lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.iter().filter(|l| l.is_boundary_exit)
    }

    /// Grid hop distance between two intersections (Manhattan distance).
    pub fn hops(&self, a: IntersectionId, b: IntersectionId) -> usize {
        let (ra, ca) = self.intersection(a).grid_pos;
        let (rb, cb) = self.intersection(b).grid_pos;
        ra.abs_diff(rb) + ca.abs_diff(cb)
    }
}

/// Parsed form of a network spec file.
///
/// Grammar, one directive per line; `#` starts a comment and blank lines
/// are ignored:
///
/// ```text
/// grid <rows> <cols> <lane_length_m>
/// ```
///
/// Exactly one `grid` directive is required. Unknown directives are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub rows: usize,
    pub cols: usize,
    pub lane_length_m: f64,
}

impl NetworkSpec {
    pub fn parse(text: &str, origin: &str) -> Result<NetworkSpec> {
        let mut spec = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| TscError::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "grid" => {
                    if spec.is_some() {
                        return Err(perr("duplicate grid directive".into()));
                    }
                    if fields.len() != 4 {
                        return Err(perr(format!(
                            "expected `grid <rows> <cols> <lane_length_m>`, got `{line}`"
                        )));
                    }
                    let rows = fields[1]
                        .parse()
                        .map_err(|e| perr(format!("bad rows `{}`: {e}", fields[1])))?;
                    let cols = fields[2]
                        .parse()
                        .map_err(|e| perr(format!("bad cols `{}`: {e}", fields[2])))?;
                    let lane_length_m = fields[3]
                        .parse()
                        .map_err(|e| perr(format!("bad lane length `{}`: {e}", fields[3])))?;
                    spec = Some(NetworkSpec {
                        rows,
                        cols,
                        lane_length_m,
                    });
                }
                other => return Err(perr(format!("unknown directive `{other}`"))),
            }
        }
        spec.ok_or_else(|| TscError::Parse {
            path: origin.to_string(),
            line: 0,
            msg: "missing grid directive".into(),
        })
    }

    pub fn load(path: &Path) -> Result<NetworkSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| TscError::io(path, e))?;
        NetworkSpec::parse(&text, &path.display().to_string())
    }

    pub fn build(&self) -> Result<RoadNetwork> {
        RoadNetwork::build_grid(self.rows, self.cols, self.lane_length_m)
    }

    pub fn to_text(&self) -> String {
        format!("grid {} {} {}\n", self.rows, self.cols, self.lane_length_m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn single_intersection_counts() {
        let net = RoadNetwork::build_grid(1, 1, 300.0).unwrap();
        assert_eq!(net.num_intersections(), 1);
        assert_eq!(net.boundary_entry_lanes().count(), 12);
        assert_eq!(net.boundary_exit_lanes().count(), 12);
        assert_eq!(net.lanes.len(), 24);
    }

    #[test]
    fn jinan_shape() {
        let net = RoadNetwork::build_grid(4, 3, 300.0).unwrap();
        assert_eq!(net.num_intersections(), 12);
        assert_eq!(net.intersection_at(3, 2), Some(IntersectionId(11)));
        // 2*(4+3) perimeter roads in each direction, 3 lanes each
        assert_eq!(net.boundary_entry_lanes().count(), 42);
        assert_eq!(net.boundary_exit_lanes().count(), 42);
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(matches!(
            RoadNetwork::build_grid(0, 3, 300.0),
            Err(TscError::InvalidArgument(_))
        ));
        assert!(matches!(
            RoadNetwork::build_grid(2, 0, 300.0),
            Err(TscError::InvalidArgument(_))
        ));
        assert!(RoadNetwork::build_grid(2, 2, 0.0).is_err());
    }

    #[test]
    fn jurisdiction_partition_by_exhaustive_walk() {
        let net = RoadNetwork::build_grid(2, 2, 300.0).unwrap();
        // Collect each intersection's claimed lanes from its own structure:
        // all entering lanes plus exiting lanes that leave the grid.
        let mut claimed: Vec<HashSet<LaneId>> = vec![HashSet::new(); 4];
        for x in &net.intersections {
            claimed[x.id.0].extend(x.entering_lanes.iter().copied());
            for &l in &x.exiting_lanes {
                if net.lane(l).is_boundary_exit {
                    claimed[x.id.0].insert(l);
                }
            }
        }
        let mut union = HashSet::new();
        for (i, set) in claimed.iter().enumerate() {
            for (j, other) in claimed.iter().enumerate() {
                if i != j {
                    assert!(set.is_disjoint(other), "{i} and {j} overlap");
                }
            }
            union.extend(set.iter().copied());
        }
        assert_eq!(union.len(), net.lanes.len());
        for lane in &net.lanes {
            let owner = net.jurisdiction_of(lane.id).unwrap();
            assert!(claimed[owner.0].contains(&lane.id));
        }
    }

    #[test]
    fn interior_lane_owned_downstream_exit_lane_upstream() {
        let net = RoadNetwork::build_grid(2, 2, 300.0).unwrap();
        let a = net.intersection_at(0, 0).unwrap();
        let b = net.intersection_at(0, 1).unwrap();
        let east = Side::East.index() * 3;
        for &l in &net.intersection(a).exiting_lanes[east..east + 3] {
            let lane = net.lane(l);
            assert_eq!(lane.upstream, Some(a));
            assert_eq!(lane.downstream, Some(b));
            assert_eq!(net.jurisdiction_of(l).unwrap(), b);
        }
        let north = Side::North.index() * 3;
        for &l in &net.intersection(a).exiting_lanes[north..north + 3] {
            assert!(net.lane(l).is_boundary_exit);
            assert_eq!(net.jurisdiction_of(l).unwrap(), a);
        }
        assert!(matches!(
            net.jurisdiction_of(LaneId(9999)),
            Err(TscError::NotFound(_))
        ));
    }

    #[test]
    fn interior_lane_is_exit_of_upstream_and_entry_of_downstream() {
        let net = RoadNetwork::build_grid(3, 3, 300.0).unwrap();
        for lane in net.lanes.iter().filter(|l| !l.is_boundary_entry && !l.is_boundary_exit) {
            let up = net.intersection(lane.upstream.unwrap());
            let down = net.intersection(lane.downstream.unwrap());
            assert!(up.exiting_lanes.contains(&lane.id));
            assert!(down.entering_lanes.contains(&lane.id));
        }
    }

    #[test]
    fn phase_table_convention() {
        let phases = phase_table();
        assert_eq!(phases.len(), 4);
        let ns_through = &phases[0];
        assert_eq!(
            ns_through.movements,
            [
                movement_index(Side::North, TurnKind::Through),
                movement_index(Side::South, TurnKind::Through)
            ]
        );
        let mut all: Vec<usize> = phases.iter().flat_map(|p| p.movements).collect();
        all.sort();
        let non_right: Vec<usize> = (0..12).filter(|m| m % 3 != TurnKind::Right.index()).collect();
        assert_eq!(all, non_right);
        let net = RoadNetwork::build_grid(1, 1, 300.0).unwrap();
        let x = &net.intersections[0];
        for p in 0..4 {
            for m in x.phase_movements(p) {
                assert_ne!(m.kind, TurnKind::Right);
                assert!(m.is_gated());
            }
        }
    }

    #[test]
    fn movements_connect_own_lanes() {
        let net = RoadNetwork::build_grid(2, 3, 300.0).unwrap();
        for x in &net.intersections {
            assert_eq!(x.movements.len(), 12);
            for m in &x.movements {
                assert!(x.entering_lanes.contains(&m.from_lane));
                for t in m.to_lanes {
                    assert!(x.exiting_lanes.contains(&t));
                    assert!(net.connects(m.from_lane, t));
                }
            }
            for p in &x.phases {
                let a = x.movement(p.movements[0]);
                let b = x.movement(p.movements[1]);
                assert_eq!(a.kind, b.kind);
                assert_eq!(a.approach.opposite(), b.approach);
            }
        }
    }

    #[test]
    fn rotation_by_180_is_isomorphic() {
        let net = RoadNetwork::build_grid(3, 2, 250.0).unwrap();
        let rot = |x: IntersectionId| {
            let (r, c) = net.intersection(x).grid_pos;
            net.intersection_at(net.rows - 1 - r, net.cols - 1 - c).unwrap()
        };
        let side = |s: Side| s.opposite();
        // Map each movement (x, approach, kind) to its rotated image and check
        // the image's lanes have the same boundary structure.
        let signature = |l: LaneId| {
            let lane = net.lane(l);
            (lane.is_boundary_entry, lane.is_boundary_exit, lane.slot)
        };
        for x in &net.intersections {
            let y = net.intersection(rot(x.id));
            for m in &x.movements {
                let image = y.movement(movement_index(side(m.approach), m.kind));
                assert_eq!(signature(m.from_lane), signature(image.from_lane));
                for k in 0..3 {
                    assert_eq!(signature(m.to_lanes[k]), signature(image.to_lanes[k]));
                }
            }
        }
    }

    #[test]
    fn spec_file_round_trip_and_errors() {
        let spec = NetworkSpec::parse("# demo\n\ngrid 4 3 300 # jinan shape\n", "mem").unwrap();
        assert_eq!(spec, NetworkSpec { rows: 4, cols: 3, lane_length_m: 300.0 });
        assert_eq!(NetworkSpec::parse(&spec.to_text(), "mem").unwrap(), spec);
        assert!(NetworkSpec::parse("", "mem").is_err());
        assert!(NetworkSpec::parse("grid 2 2", "mem").is_err());
        assert!(NetworkSpec::parse("ring 5", "mem").is_err());
        assert!(NetworkSpec::parse("grid 2 2 300\ngrid 1 1 10", "mem").is_err());
    }
}

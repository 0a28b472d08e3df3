//! Grid A* path planning over scene occupancy.
//!
//! The grid is implicit: the scene bounds (plus start and goal) padded on
//! every side, cut into cubes of `grid_res`. A cell is traversable when the
//! agent box centered on it hits no occupied sample.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Point3};
use crate::graph::SceneGraph;

/// Hard cap on grid cells.
pub const MAX_GRID_CELLS: usize = 64_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("grid resolution must be positive and finite, got {0}")]
    BadResolution(f64),
    #[error("agent half extents must be non-negative and finite")]
    BadAgent,
    #[error("padding must be non-negative and finite")]
    BadPadding,
    #[error("start and goal coincide")]
    SameEndpoints,
    #[error("start or goal is not finite")]
    NonFiniteEndpoint,
    #[error("grid of {0} cells exceeds the limit")]
    GridTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PlanMode {
    Full3d,
    /// Plan in the horizontal plane at this height (up axis = z).
    Slice(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub start: Point3,
    pub goal: Point3,
    pub grid_res: f64,
    pub agent_half_extents: Point3,
    pub mode: PlanMode,
    pub padding: f64,
}

impl PlanRequest {
    pub fn new(start: Point3, goal: Point3) -> Self {
        PlanRequest {
            start,
            goal,
            grid_res: 0.1,
            agent_half_extents: Point3::ZERO,
            mode: PlanMode::Full3d,
            padding: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.grid_res > 0.0 && self.grid_res.is_finite()) {
            return Err(PlanError::BadResolution(self.grid_res));
        }
        let h = self.agent_half_extents;
        if !h.is_finite() || h.x < 0.0 || h.y < 0.0 || h.z < 0.0 {
            return Err(PlanError::BadAgent);
        }
        if !(self.padding >= 0.0 && self.padding.is_finite()) {
            return Err(PlanError::BadPadding);
        }
        if !self.start.is_finite() || !self.goal.is_finite() {
            return Err(PlanError::NonFiniteEndpoint);
        }
        if let PlanMode::Slice(z) = self.mode {
            if !z.is_finite() {
                return Err(PlanError::NonFiniteEndpoint);
            }
        }
        if self.start == self.goal {
            return Err(PlanError::SameEndpoints);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Success,
    StartBlocked,
    GoalBlocked,
    NoPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub status: PlanStatus,
    /// Cell centers from the start cell to the goal cell.
    pub waypoints: Vec<Point3>,
    pub cost: f64,
    pub expanded: usize,
}

impl PlanResult {
    fn failed(status: PlanStatus, expanded: usize) -> Self {
        PlanResult {
            status,
            waypoints: Vec::new(),
            cost: f64::INFINITY,
            expanded,
        }
    }
}

/// Per-axis sample offsets covering `[-h, h]` at spacing at most `res`,
/// always including both ends and zero.
fn offsets(h: f64, res: f64) -> Vec<f64> {
    if h <= 0.0 {
        return vec![0.0];
    }
    let n = libm::ceil(2.0 * h / res) as usize;
    let mut out: Vec<f64> = (0..=n).map(|i| -h + 2.0 * h * i as f64 / n as f64).collect();
    if n % 2 == 1 {
        out.push(0.0);
    }
    out
}

/// True when no sample of the agent box centered at `center` is occupied.
/// Samples are the corners, the center and a lattice of spacing at most
/// `res` across the box.
pub fn cell_free(graph: &SceneGraph, center: Point3, half: Point3, res: f64) -> bool {
    let (ox, oy, oz) = (offsets(half.x, res), offsets(half.y, res), offsets(half.z, res));
    let agent = Aabb::from_center_half(center, half);
    let near: Vec<_> = graph
        .nodes
        .iter()
        .filter(|n| n.octree.root().aabb().intersects(&agent))
        .collect();
    if near.is_empty() {
        return true;
    }
    for &dz in &oz {
        for &dy in &oy {
            for &dx in &ox {
                let p = center + Point3::new(dx, dy, dz);
                if near.iter().any(|n| n.contains(p) && n.octree.is_occupied(p)) {
                    return false;
                }
            }
        }
    }
    true
}

/// The implicit planning grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanGrid {
    pub origin: Point3,
    pub res: f64,
    pub dims: [usize; 3],
    pub slice_z: Option<f64>,
}

impl PlanGrid {
    pub fn new(graph: &SceneGraph, req: &PlanRequest) -> Result<Self, PlanError> {
        req.validate()?;
        let mut bounds = Aabb::new(req.start.min(req.goal), req.start.max(req.goal));
        if let Some(b) = graph.bounds() {
            bounds = bounds.union(&b);
        }
        let bounds = bounds.expanded(req.padding);
        let res = req.grid_res;
        let cells = |lo: f64, hi: f64| (libm::ceil((hi - lo) / res) as usize).max(1);
        let mut dims = [
            cells(bounds.min.x, bounds.max.x),
            cells(bounds.min.y, bounds.max.y),
            cells(bounds.min.z, bounds.max.z),
        ];
        let slice_z = match req.mode {
            PlanMode::Full3d => None,
            PlanMode::Slice(z) => {
                dims[2] = 1;
                Some(z)
            }
        };
        let total = dims[0].saturating_mul(dims[1]).saturating_mul(dims[2]);
        if total > MAX_GRID_CELLS {
            return Err(PlanError::GridTooLarge(total));
        }
        Ok(PlanGrid {
            origin: bounds.min,
            res,
            dims,
            slice_z,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn cell(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    /// Cell containing `p`, clamped to the grid.
    pub fn cell_of(&self, p: Point3) -> [usize; 3] {
        let along = |v: f64, o: f64, n: usize| {
            let i = libm::floor((v - o) / self.res);
            if i <= 0.0 {
                0
            } else {
                (i as usize).min(n - 1)
            }
        };
        let k = if self.slice_z.is_some() {
            0
        } else {
            along(p.z, self.origin.z, self.dims[2])
        };
        [
            along(p.x, self.origin.x, self.dims[0]),
            along(p.y, self.origin.y, self.dims[1]),
            k,
        ]
    }

    pub fn center(&self, c: [usize; 3]) -> Point3 {
        let at = |o: f64, i: usize| o + (i as f64 + 0.5) * self.res;
        Point3::new(
            at(self.origin.x, c[0]),
            at(self.origin.y, c[1]),
            self.slice_z.unwrap_or_else(|| at(self.origin.z, c[2])),
        )
    }

    /// Neighbor offsets: 26 in 3-D, 8 in a slice.
    pub fn moves(&self) -> Vec<[i64; 3]> {
        let zs: &[i64] = if self.slice_z.is_some() { &[0] } else { &[-1, 0, 1] };
        let mut out = Vec::new();
        for di in [-1i64, 0, 1] {
            for dj in [-1i64, 0, 1] {
                for &dk in zs {
                    if (di, dj, dk) != (0, 0, 0) {
                        out.push([di, dj, dk]);
                    }
                }
            }
        }
        out
    }

    pub fn step(&self, c: [usize; 3], m: [i64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as i64 + m[a];
            if v < 0 || v >= self.dims[a] as i64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(out)
    }

    /// Traversability of every cell, computed eagerly.
    pub fn free_map(&self, graph: &SceneGraph, half: Point3) -> Vec<bool> {
        (0..self.len())
            .map(|i| cell_free(graph, self.center(self.cell(i)), half, self.res))
            .collect()
    }
}

#[derive(Clone, Copy)]
struct Open {
    f: f64,
    g: f64,
    cell: [usize; 3],
    idx: usize,
}

impl PartialEq for Open {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Open {}
impl PartialOrd for Open {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Open {
    // min-heap on (f, cell)
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.total_cmp(&self.f).then_with(|| o.cell.cmp(&self.cell))
    }
}

const UNKNOWN: u8 = 0;
const FREE: u8 = 1;
const BLOCKED: u8 = 2;

/// A* from the start cell to the goal cell with a Euclidean heuristic and
/// center-distance edge costs. Cells are tested lazily and cached.
pub fn plan(graph: &SceneGraph, req: &PlanRequest) -> Result<PlanResult, PlanError> {
    let grid = PlanGrid::new(graph, req)?;
    let half = req.agent_half_extents;
    let mut state = vec![UNKNOWN; grid.len()];
    let mut free = |idx: usize, c: [usize; 3]| {
        if state[idx] == UNKNOWN {
            state[idx] = if cell_free(graph, grid.center(c), half, grid.res) { FREE } else { BLOCKED };
        }
        state[idx] == FREE
    };

    let (sc, gc) = (grid.cell_of(req.start), grid.cell_of(req.goal));
    let (si, gi) = (grid.index(sc), grid.index(gc));
    if !free(si, sc) {
        return Ok(PlanResult::failed(PlanStatus::StartBlocked, 0));
    }
    if !free(gi, gc) {
        return Ok(PlanResult::failed(PlanStatus::GoalBlocked, 0));
    }

    let goal_center = grid.center(gc);
    let h = |c: [usize; 3]| grid.center(c).distance(goal_center);
    let moves: Vec<([i64; 3], f64)> = grid
        .moves()
        .into_iter()
        .map(|m| {
            let d = libm::sqrt((m[0] * m[0] + m[1] * m[1] + m[2] * m[2]) as f64);
            (m, d * grid.res)
        })
        .collect();

    let mut g = vec![f64::INFINITY; grid.len()];
    let mut parent = vec![usize::MAX; grid.len()];
    let mut closed = vec![false; grid.len()];
    let mut open = BinaryHeap::new();
    g[si] = 0.0;
    open.push(Open {
        f: h(sc),
        g: 0.0,
        cell: sc,
        idx: si,
    });
    let mut expanded = 0usize;
    while let Some(cur) = open.pop() {
        if closed[cur.idx] || cur.g > g[cur.idx] {
            continue;
        }
        closed[cur.idx] = true;
        expanded += 1;
        if cur.idx == gi {
            let mut path = vec![gi];
            while let Some(&last) = path.last() {
                if last == si {
                    break;
                }
                path.push(parent[last]);
            }
            path.reverse();
            return Ok(PlanResult {
                status: PlanStatus::Success,
                waypoints: path.iter().map(|&i| grid.center(grid.cell(i))).collect(),
                cost: g[gi],
                expanded,
            });
        }
        for &(m, w) in &moves {
            let Some(nc) = grid.step(cur.cell, m) else { continue };
            let ni = grid.index(nc);
            if closed[ni] || !free(ni, nc) {
                continue;
            }
            let ng = cur.g + w;
            if ng < g[ni] {
                g[ni] = ng;
                parent[ni] = cur.idx;
                open.push(Open {
                    f: ng + h(nc),
                    g: ng,
                    cell: nc,
                    idx: ni,
                });
            }
        }
    }
    Ok(PlanResult::failed(PlanStatus::NoPath, expanded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::graph::{build_graph, NodeInput};
    use alloc::collections::VecDeque;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn slab(id: u32, lo: Point3, hi: Point3, step: f64) -> NodeInput {
        let mut points = Vec::new();
        let n = |a: f64, b: f64| (libm::ceil((b - a) / step) as usize).max(1);
        let (nx, ny, nz) = (n(lo.x, hi.x), n(lo.y, hi.y), n(lo.z, hi.z));
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    points.push(Point3::new(
                        lo.x + (hi.x - lo.x) * i as f64 / nx as f64,
                        lo.y + (hi.y - lo.y) * j as f64 / ny as f64,
                        lo.z + (hi.z - lo.z) * k as f64 / nz as f64,
                    ));
                }
            }
        }
        NodeInput {
            id,
            caption: "obstacle".to_string(),
            feature: vec![1.0, 0.0],
            points,
        }
    }

    fn graph(inputs: Vec<NodeInput>) -> SceneGraph {
        let cfg = PipelineConfig {
            max_depth: 5,
            ..PipelineConfig::default()
        };
        build_graph(inputs, 2, &cfg).unwrap()
    }

    /// Uniform-cost search on an explicit free map.
    fn ucs(grid: &PlanGrid, free: &[bool], s: usize, t: usize) -> Option<f64> {
        let moves = grid.moves();
        let mut dist = vec![f64::INFINITY; grid.len()];
        let mut done = vec![false; grid.len()];
        dist[s] = 0.0;
        loop {
            let mut best = None;
            for i in 0..grid.len() {
                if !done[i] && dist[i].is_finite() && best.is_none_or(|b: usize| dist[i] < dist[b]) {
                    best = Some(i);
                }
            }
            let u = best?;
            if u == t {
                return Some(dist[u]);
            }
            done[u] = true;
            for m in &moves {
                if let Some(c) = grid.step(grid.cell(u), *m) {
                    let v = grid.index(c);
                    let w = grid.res * libm::sqrt((m[0] * m[0] + m[1] * m[1] + m[2] * m[2]) as f64);
                    if free[v] && dist[u] + w < dist[v] {
                        dist[v] = dist[u] + w;
                    }
                }
            }
        }
    }

    #[test]
    fn empty_scene_straight_line() {
        let g = SceneGraph::empty(2, &PipelineConfig::default());
        let req = PlanRequest {
            padding: 0.2,
            ..PlanRequest::new(Point3::new(0.05, 0.05, 0.02), Point3::new(1.05, 0.05, 0.02))
        };
        let r = plan(&g, &req).unwrap();
        assert_eq!(r.status, PlanStatus::Success);
        assert!((r.cost - 1.0).abs() < 1e-9, "{}", r.cost);
        assert!(r.waypoints.last().unwrap().distance(req.goal) <= req.grid_res);
        for w in r.waypoints.windows(2) {
            let d = w[1] - w[0];
            assert!(d.abs().max_component() <= req.grid_res * 1.000001);
        }
    }

    #[test]
    fn blocked_endpoints() {
        let g = graph(vec![slab(1, Point3::new(1.0, -1.0, 0.0), Point3::new(1.4, 1.0, 1.0), 0.02)]);
        let inside = Point3::new(1.2, 0.0, 0.5);
        let r = plan(&g, &PlanRequest::new(Point3::new(0.0, 0.0, 0.5), inside)).unwrap();
        assert_eq!(r.status, PlanStatus::GoalBlocked);
        let r = plan(&g, &PlanRequest::new(inside, Point3::new(0.0, 0.0, 0.5))).unwrap();
        assert_eq!(r.status, PlanStatus::StartBlocked);
        assert!(cell_free(&g, Point3::new(5.0, 5.0, 5.0), Point3::splat(0.1), 0.1));
        assert!(!cell_free(&g, inside, Point3::ZERO, 0.1));
    }

    #[test]
    fn bad_requests() {
        let g = SceneGraph::empty(2, &PipelineConfig::default());
        let p = Point3::ZERO;
        assert_eq!(plan(&g, &PlanRequest::new(p, p)), Err(PlanError::SameEndpoints));
        let mut r = PlanRequest::new(p, Point3::new(1.0, 0.0, 0.0));
        r.grid_res = 0.0;
        assert!(matches!(plan(&g, &r), Err(PlanError::BadResolution(_))));
        r.grid_res = 0.1;
        r.agent_half_extents = Point3::new(-0.1, 0.0, 0.0);
        assert_eq!(plan(&g, &r), Err(PlanError::BadAgent));
    }

    #[test]
    fn door_gap_matches_oracle() {
        // wall at x in [1, 1.2] with a gap at y in [0.4, 0.8]; slice planning
        let g = graph(vec![
            slab(1, Point3::new(1.0, -1.0, 0.0), Point3::new(1.2, 0.4, 1.0), 0.02),
            slab(2, Point3::new(1.0, 0.8, 0.0), Point3::new(1.2, 2.0, 1.0), 0.02),
        ]);
        let req = PlanRequest {
            mode: PlanMode::Slice(0.5),
            padding: 0.0,
            ..PlanRequest::new(Point3::new(0.05, -0.9, 0.5), Point3::new(2.0, -0.9, 0.5))
        };
        let r = plan(&g, &req).unwrap();
        assert_eq!(r.status, PlanStatus::Success);
        assert!(r.waypoints.iter().any(|w| w.x > 1.0 && w.x < 1.2 && w.y > 0.4 && w.y < 0.8));
        let grid = PlanGrid::new(&g, &req).unwrap();
        let free = grid.free_map(&g, req.agent_half_extents);
        let oracle = ucs(&grid, &free, grid.index(grid.cell_of(req.start)), grid.index(grid.cell_of(req.goal))).unwrap();
        assert!((r.cost - oracle).abs() < 1e-9);
        for w in &r.waypoints {
            assert!(cell_free(&g, *w, req.agent_half_extents, req.grid_res));
        }
    }

    #[test]
    fn under_table_clearance() {
        // room closed on all sides except through the gap under the table top
        let table = slab(1, Point3::new(0.8, -1.0, 0.4), Point3::new(1.6, 1.0, 0.45), 0.02);
        let wall_above = slab(2, Point3::new(1.0, -1.0, 0.45), Point3::new(1.4, 1.0, 2.0), 0.02);
        let g = graph(vec![table, wall_above]);
        let start = Point3::new(0.3, 0.0, 0.15);
        let goal = Point3::new(2.1, 0.0, 0.15);
        // padding 0 in y and z closes the room: floor at z=0 is the grid edge
        let base = PlanRequest {
            padding: 0.0,
            grid_res: 0.1,
            ..PlanRequest::new(start, goal)
        };
        let thin = plan(&g, &PlanRequest { agent_half_extents: Point3::new(0.05, 0.05, 0.1), ..base }).unwrap();
        assert_eq!(thin.status, PlanStatus::Success);
        assert!(thin.waypoints.iter().any(|w| w.x > 1.0 && w.x < 1.4 && w.z < 0.4));
        let tall = plan(&g, &PlanRequest { agent_half_extents: Point3::new(0.05, 0.05, 0.5), ..base }).unwrap();
        assert_ne!(tall.status, PlanStatus::Success);
    }

    #[test]
    fn bfs_cost_in_open_slice() {
        let g = SceneGraph::empty(2, &PipelineConfig::default());
        let req = PlanRequest {
            mode: PlanMode::Slice(0.0),
            padding: 0.05,
            ..PlanRequest::new(Point3::new(0.05, 0.05, 0.0), Point3::new(0.75, 0.35, 0.0))
        };
        let r = plan(&g, &req).unwrap();
        // octile distance over 7 x 3 cells
        let expect = 0.1 * (3.0 * core::f64::consts::SQRT_2 + 4.0);
        assert!((r.cost - expect).abs() < 1e-9);
        // BFS hop count equals the waypoint count minus one
        let grid = PlanGrid::new(&g, &req).unwrap();
        let mut hops = vec![usize::MAX; grid.len()];
        let s = grid.index(grid.cell_of(req.start));
        hops[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for m in grid.moves() {
                if let Some(c) = grid.step(grid.cell(u), m) {
                    let v = grid.index(c);
                    if hops[v] == usize::MAX {
                        hops[v] = hops[u] + 1;
                        q.push_back(v);
                    }
                }
            }
        }
        assert_eq!(hops[grid.index(grid.cell_of(req.goal))], r.waypoints.len() - 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn astar_matches_ucs(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut inputs = Vec::new();
            for id in 0..rng.random_range(1..5u32) {
                let c = Point3::new(rng.random_range(0.3..1.7), rng.random_range(0.3..1.7), 0.0);
                let h = Point3::new(rng.random_range(0.05..0.4), rng.random_range(0.05..0.4), 0.1);
                inputs.push(slab(id, c - h, c + h, 0.02));
            }
            let g = graph(inputs);
            let req = PlanRequest {
                mode: PlanMode::Slice(0.0),
                padding: 0.2,
                ..PlanRequest::new(Point3::new(-0.1, -0.1, 0.0), Point3::new(2.1, 2.1, 0.0))
            };
            let r = plan(&g, &req).unwrap();
            let grid = PlanGrid::new(&g, &req).unwrap();
            let free = grid.free_map(&g, req.agent_half_extents);
            let (s, t) = (grid.index(grid.cell_of(req.start)), grid.index(grid.cell_of(req.goal)));
            match ucs(&grid, &free, s, t) {
                Some(c) if free[s] && free[t] => {
                    prop_assert_eq!(r.status, PlanStatus::Success);
                    prop_assert!((r.cost - c).abs() < 1e-9);
                    for w in &r.waypoints {
                        prop_assert!(free[grid.index(grid.cell_of(*w))]);
                    }
                }
                _ => prop_assert_ne!(r.status, PlanStatus::Success),
            }
        }
    }
}

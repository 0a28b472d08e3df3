//! Per-instance occupancy octrees with per-axis node extents.
//!
//! In adaptive mode the root box is the point cloud's bounding box grown by
//! `delta` on every face, so nodes follow the object's aspect ratio. Classic
//! mode uses a cube whose side is the largest extent plus `2 * delta`.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::MAX_OCTREE_DEPTH;
use crate::geometry::{self, Aabb, GeometryError, Point3, PointGrid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OctreeError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("max depth {0} exceeds the supported limit")]
    DepthTooLarge(u8),
    #[error("expansion margin must be positive and finite")]
    BadDelta,
    #[error("tree has no occupied leaves")]
    NoOccupiedLeaves,
    #[error("dilation radius must be positive")]
    NonPositiveDilation,
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("point cloud contains a non-finite coordinate")]
    NonFinitePoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("octree record truncated")]
    Truncated,
    #[error("octree record malformed: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuildMode {
    #[default]
    Adaptive,
    Classic,
}

impl BuildMode {
    pub fn as_u8(self) -> u8 {
        match self {
            BuildMode::Adaptive => 0,
            BuildMode::Classic => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(BuildMode::Adaptive),
            1 => Some(BuildMode::Classic),
            _ => None,
        }
    }
}

/// Marks an absent child.
pub const NO_CHILD: u32 = u32::MAX;

/// Slack on box membership, in units of machine epsilon relative to the
/// magnitude of the box coordinates. Centers are accumulated level by level,
/// so faces shared by neighboring nodes can differ by a few ulps.
const CONTAINS_SLACK_EPS: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OctreeNode {
    pub center: Point3,
    /// Half of the node's side length on each axis.
    pub half: Point3,
    pub depth: u8,
    pub occupied: bool,
    /// Arena index per octant; octant bit 0 is +x, bit 1 +y, bit 2 +z.
    pub children: [u32; 8],
}

impl OctreeNode {
    pub fn child_mask(&self) -> u8 {
        self.children
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != NO_CHILD)
            .fold(0u8, |m, (o, _)| m | (1 << o))
    }

    pub fn is_leaf(&self) -> bool {
        self.children.iter().all(|c| *c == NO_CHILD)
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_center_half(self.center, self.half)
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half.x * self.half.y * self.half.z
    }

    /// Closed-box membership.
    pub fn contains(&self, p: Point3) -> bool {
        let within = |pc: f64, c: f64, h: f64| {
            let slack = CONTAINS_SLACK_EPS * f64::EPSILON * (libm::fabs(c) + h);
            libm::fabs(pc - c) <= h + slack
        };
        within(p.x, self.center.x, self.half.x)
            && within(p.y, self.center.y, self.half.y)
            && within(p.z, self.center.z, self.half.z)
    }

    /// Center and half extents of the box for `octant`, whether or not that
    /// child exists.
    pub fn octant_box(&self, octant: usize) -> (Point3, Point3) {
        let h = self.half * 0.5;
        let sign = |bit: usize| if octant & bit != 0 { 1.0 } else { -1.0 };
        let c = Point3::new(
            self.center.x + sign(1) * h.x,
            self.center.y + sign(2) * h.y,
            self.center.z + sign(4) * h.z,
        );
        (c, h)
    }
}

fn octant_of(c: Point3, p: Point3) -> usize {
    (p.x >= c.x) as usize | ((p.y >= c.y) as usize) << 1 | ((p.z >= c.z) as usize) << 2
}

/// Bytes in the per-tree header of the canonical encoding: mode u8,
/// max_depth u8, delta f64, point_count u64, bbox f64[6],
/// min_leaf_points u32, node_count u32.
pub const TREE_HEADER_BYTES: usize = 1 + 1 + 8 + 8 + 48 + 4 + 4;
/// Bytes per node record: depth u8, center f64[3], half f64[3], flags u8,
/// child mask u8.
pub const NODE_RECORD_BYTES: usize = 1 + 24 + 24 + 1 + 1;

const FLAG_OCCUPIED: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOctree {
    pub mode: BuildMode,
    /// Bounding box of the input cloud before expansion.
    pub bbox: Aabb,
    pub delta: f64,
    pub max_depth: u8,
    pub min_leaf_points: u32,
    pub point_count: u64,
    /// Preorder arena; the root is node 0.
    pub nodes: Vec<OctreeNode>,
}

/// Build parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub max_depth: u8,
    pub delta: f64,
    pub mode: BuildMode,
    pub min_leaf_points: u32,
    /// Collapse internal nodes whose eight children are all occupied leaves.
    pub prune_full: bool,
}

impl BuildOptions {
    pub fn new(max_depth: u8, delta: f64, mode: BuildMode) -> Self {
        BuildOptions {
            max_depth,
            delta,
            mode,
            min_leaf_points: 1,
            prune_full: false,
        }
    }
}

struct Pending {
    center: Point3,
    half: Point3,
    depth: u8,
    occupied: bool,
    children: Vec<(usize, Pending)>,
}

struct Builder<'a> {
    points: &'a [Point3],
    root_half: Point3,
    opts: BuildOptions,
}

impl Builder<'_> {
    fn half_at(&self, depth: u8) -> Point3 {
        self.root_half / libm::pow(2.0, depth as f64)
    }

    fn node(&self, center: Point3, depth: u8, members: Vec<u32>) -> Option<Pending> {
        if members.is_empty() {
            return None;
        }
        let half = self.half_at(depth);
        if depth == self.opts.max_depth {
            if (members.len() as u64) < self.opts.min_leaf_points as u64 {
                return None;
            }
            return Some(Pending {
                center,
                half,
                depth,
                occupied: true,
                children: Vec::new(),
            });
        }
        let mut buckets: [Vec<u32>; 8] = Default::default();
        for &i in &members {
            buckets[octant_of(center, self.points[i as usize])].push(i);
        }
        drop(members);
        let child_half = self.half_at(depth + 1);
        let mut children = Vec::new();
        for (o, bucket) in buckets.into_iter().enumerate() {
            let sign = |bit: usize| if o & bit != 0 { 1.0 } else { -1.0 };
            let c = Point3::new(
                center.x + sign(1) * child_half.x,
                center.y + sign(2) * child_half.y,
                center.z + sign(4) * child_half.z,
            );
            if let Some(child) = self.node(c, depth + 1, bucket) {
                children.push((o, child));
            }
        }
        if children.is_empty() {
            return None;
        }
        let full = children.len() == 8 && children.iter().all(|(_, c)| c.occupied && c.children.is_empty());
        if self.opts.prune_full && full {
            children.clear();
            return Some(Pending {
                center,
                half,
                depth,
                occupied: true,
                children,
            });
        }
        Some(Pending {
            center,
            half,
            depth,
            occupied: false,
            children,
        })
    }
}

fn flatten(p: Pending, out: &mut Vec<OctreeNode>) -> u32 {
    let idx = out.len();
    out.push(OctreeNode {
        center: p.center,
        half: p.half,
        depth: p.depth,
        occupied: p.occupied,
        children: [NO_CHILD; 8],
    });
    for (o, child) in p.children {
        let c = flatten(child, out);
        out[idx].children[o] = c;
    }
    idx as u32
}

impl AdaptiveOctree {
    /// Builds the tree over `cloud`. Subdivision continues in every occupied
    /// node until `max_depth`; only nodes holding points are created.
    pub fn build(cloud: &[Point3], opts: BuildOptions) -> Result<Self, OctreeError> {
        if opts.max_depth > MAX_OCTREE_DEPTH {
            return Err(OctreeError::DepthTooLarge(opts.max_depth));
        }
        if !(opts.delta > 0.0 && opts.delta.is_finite()) {
            return Err(OctreeError::BadDelta);
        }
        if cloud.iter().any(|p| !p.is_finite()) {
            return Err(OctreeError::NonFinitePoint);
        }
        let bbox = geometry::aabb_of(cloud).map_err(|_| OctreeError::EmptyCloud)?;
        let center = (bbox.min + bbox.max) * 0.5;
        let ext = bbox.extent();
        let root_half = match opts.mode {
            BuildMode::Adaptive => ext * 0.5 + Point3::splat(opts.delta),
            BuildMode::Classic => Point3::splat(ext.max_component() * 0.5 + opts.delta),
        };
        let builder = Builder {
            points: cloud,
            root_half,
            opts,
        };
        let root = builder
            .node(center, 0, (0..cloud.len() as u32).collect())
            .unwrap_or(Pending {
                center,
                half: root_half,
                depth: 0,
                occupied: false,
                children: Vec::new(),
            });
        let mut nodes = Vec::new();
        flatten(root, &mut nodes);
        Ok(AdaptiveOctree {
            mode: opts.mode,
            bbox,
            delta: opts.delta,
            max_depth: opts.max_depth,
            min_leaf_points: opts.min_leaf_points,
            point_count: cloud.len() as u64,
            nodes,
        })
    }

    pub fn root(&self) -> &OctreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, idx: u32) -> &OctreeNode {
        &self.nodes[idx as usize]
    }

    /// Occupied nodes (leaves, or collapsed full nodes).
    pub fn occupied_nodes(&self) -> impl Iterator<Item = &OctreeNode> {
        self.nodes.iter().filter(|n| n.occupied)
    }

    pub fn occupied_volume(&self) -> f64 {
        self.occupied_nodes().map(OctreeNode::volume).sum()
    }

    /// Recursive occupancy descent: outside the node is free, an occupied
    /// node is occupied, otherwise ask the children.
    pub fn is_occupied(&self, p: Point3) -> bool {
        self.traverse(0, p)
    }

    fn traverse(&self, idx: u32, p: Point3) -> bool {
        let node = self.node(idx);
        if !node.contains(p) {
            return false;
        }
        if node.occupied {
            return true;
        }
        node.children
            .iter()
            .filter(|c| **c != NO_CHILD)
            .any(|&c| self.traverse(c, p))
    }

    /// Length in bytes of [`AdaptiveOctree::encode`].
    pub fn storage_size(&self) -> usize {
        TREE_HEADER_BYTES + self.nodes.len() * NODE_RECORD_BYTES
    }

    /// Canonical little-endian encoding: header then preorder node records.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.mode.as_u8());
        out.push(self.max_depth);
        out.extend_from_slice(&self.delta.to_le_bytes());
        out.extend_from_slice(&self.point_count.to_le_bytes());
        for v in self.bbox.min.to_array().into_iter().chain(self.bbox.max.to_array()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.min_leaf_points.to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        for n in &self.nodes {
            out.push(n.depth);
            for v in n.center.to_array().into_iter().chain(n.half.to_array()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(if n.occupied { FLAG_OCCUPIED } else { 0 });
            out.push(n.child_mask());
        }
    }

    /// Decodes one tree from the front of `bytes`; returns it with the number
    /// of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), DecodeError> {
        let mut r = Reader { bytes, pos: 0 };
        let mode = BuildMode::from_u8(r.u8()?).ok_or(DecodeError::Malformed("unknown build mode"))?;
        let max_depth = r.u8()?;
        if max_depth > MAX_OCTREE_DEPTH {
            return Err(DecodeError::Malformed("max depth out of range"));
        }
        let delta = r.f64()?;
        let point_count = r.u64()?;
        let min = r.point()?;
        let max = r.point()?;
        if !(min.x <= max.x && min.y <= max.y && min.z <= max.z) {
            return Err(DecodeError::Malformed("inverted bounding box"));
        }
        let min_leaf_points = r.u32()?;
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(DecodeError::Malformed("tree without root"));
        }
        if bytes.len().saturating_sub(r.pos) < count.saturating_mul(NODE_RECORD_BYTES) {
            return Err(DecodeError::Truncated);
        }
        let mut nodes = Vec::with_capacity(count);
        let mut masks = Vec::with_capacity(count);
        for _ in 0..count {
            let depth = r.u8()?;
            let center = r.point()?;
            let half = r.point()?;
            let flags = r.u8()?;
            if flags & !FLAG_OCCUPIED != 0 {
                return Err(DecodeError::Malformed("unknown node flags"));
            }
            masks.push(r.u8()?);
            nodes.push(OctreeNode {
                center,
                half,
                depth,
                occupied: flags & FLAG_OCCUPIED != 0,
                children: [NO_CHILD; 8],
            });
        }
        // Rebuild child links from the preorder layout.
        let mut next = 1usize;
        link(&mut nodes, &masks, 0, &mut next, max_depth)?;
        if next != count {
            return Err(DecodeError::Malformed("node count disagrees with child masks"));
        }
        if nodes[0].depth != 0 {
            return Err(DecodeError::Malformed("root depth must be 0"));
        }
        let tree = AdaptiveOctree {
            mode,
            bbox: Aabb { min, max },
            delta,
            max_depth,
            min_leaf_points,
            point_count,
            nodes,
        };
        Ok((tree, r.pos))
    }
}

fn link(nodes: &mut [OctreeNode], masks: &[u8], idx: usize, next: &mut usize, max_depth: u8) -> Result<(), DecodeError> {
    let depth = nodes[idx].depth;
    let mask = masks[idx];
    if mask != 0 && depth >= max_depth {
        return Err(DecodeError::Malformed("children below max depth"));
    }
    for o in 0..8 {
        if mask & (1 << o) == 0 {
            continue;
        }
        let c = *next;
        if c >= nodes.len() {
            return Err(DecodeError::Malformed("child mask references missing nodes"));
        }
        if nodes[c].depth != depth + 1 {
            return Err(DecodeError::Malformed("child depth mismatch"));
        }
        *next += 1;
        nodes[idx].children[o] = c as u32;
        link(nodes, masks, c, next, max_depth)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos.checked_add(N).ok_or(DecodeError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        let mut a = [0u8; N];
        a.copy_from_slice(s);
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        let v = f64::from_le_bytes(self.take()?);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DecodeError::Malformed("non-finite coordinate"))
        }
    }

    fn point(&mut self) -> Result<Point3, DecodeError> {
        Ok(Point3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

/// Monte Carlo estimate of how much of the occupied volume lies within
/// `delta_r` of the cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EorReport {
    pub eor: f64,
    pub octree_volume: f64,
    pub intersection_volume: f64,
    pub sample_count: u64,
}

/// Samples the union of occupied nodes uniformly (each node chosen with
/// probability proportional to its volume) and counts samples within
/// `delta_r` of any cloud point.
pub fn eor(
    tree: &AdaptiveOctree,
    cloud: &[Point3],
    delta_r: f64,
    samples: u64,
    seed: u64,
) -> Result<EorReport, OctreeError> {
    if !(delta_r > 0.0) {
        return Err(OctreeError::NonPositiveDilation);
    }
    if samples == 0 {
        return Err(OctreeError::ZeroSamples);
    }
    let leaves: Vec<&OctreeNode> = tree.occupied_nodes().collect();
    if leaves.is_empty() {
        return Err(OctreeError::NoOccupiedLeaves);
    }
    if cloud.is_empty() {
        return Err(OctreeError::EmptyCloud);
    }
    let mut cumulative = Vec::with_capacity(leaves.len());
    let mut total = 0.0;
    for l in &leaves {
        total += l.volume();
        cumulative.push(total);
    }
    let grid = PointGrid::new(cloud, 2.0 * delta_r).map_err(|e| match e {
        GeometryError::NonPositiveResolution => OctreeError::NonPositiveDilation,
        _ => OctreeError::EmptyCloud,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..samples {
        let pick = rng.random::<f64>() * total;
        let i = cumulative.partition_point(|c| *c <= pick).min(leaves.len() - 1);
        let l = leaves[i];
        let s = Point3::new(
            l.center.x + l.half.x * rng.random_range(-1.0..=1.0),
            l.center.y + l.half.y * rng.random_range(-1.0..=1.0),
            l.center.z + l.half.z * rng.random_range(-1.0..=1.0),
        );
        if grid.any_within(s, delta_r) {
            hits += 1;
        }
    }
    let ratio = hits as f64 / samples as f64;
    Ok(EorReport {
        eor: ratio,
        octree_volume: total,
        intersection_volume: ratio * total,
        sample_count: samples,
    })
}

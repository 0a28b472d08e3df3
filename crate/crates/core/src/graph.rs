//! Scene graph over object instances: nodes carry semantics, centroid and
//! octree; edges carry a spatial relation, distance and displacement.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{PipelineConfig, UpAxis};
use crate::geometry::{self, Aabb, Point3};
use crate::octree::{AdaptiveOctree, BuildMode, BuildOptions, OctreeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("{instances} instances but {features} fused features")]
    CountMismatch { instances: usize, features: usize },
    #[error("node {id}: {source}")]
    Octree { id: u32, source: OctreeError },
    #[error("duplicate node id {0}")]
    DuplicateId(u32),
    #[error("node {id}: feature length {got}, expected {expected}")]
    FeatureDim { id: u32, expected: usize, got: usize },
}

/// Closed relation vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Above,
    Below,
    Front,
    Back,
    Left,
    Right,
    Contain,
    Included,
    Far,
    Close,
    None,
}

impl Relation {
    pub const ALL: [Relation; 11] = [
        Relation::Above,
        Relation::Below,
        Relation::Front,
        Relation::Back,
        Relation::Left,
        Relation::Right,
        Relation::Contain,
        Relation::Included,
        Relation::Far,
        Relation::Close,
        Relation::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Front => "front",
            Relation::Back => "back",
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Contain => "contain",
            Relation::Included => "included",
            Relation::Far => "far",
            Relation::Close => "close",
            Relation::None => "none",
        }
    }

    pub fn inverse(self) -> Relation {
        match self {
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::Front => Relation::Back,
            Relation::Back => Relation::Front,
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
            Relation::Contain => Relation::Included,
            Relation::Included => Relation::Contain,
            other => other,
        }
    }

    /// Comparative relations are answered by distance ranking, not edges.
    pub fn is_comparative(self) -> bool {
        matches!(self, Relation::Far | Relation::Close)
    }

    pub fn as_u8(self) -> u8 {
        Relation::ALL.iter().position(|r| *r == self).unwrap_or(10) as u8
    }

    pub fn from_u8(v: u8) -> Option<Relation> {
        Relation::ALL.get(v as usize).copied()
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown relation {0:?}")]
pub struct UnknownRelation(pub String);

impl FromStr for Relation {
    type Err = UnknownRelation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Relation::ALL
            .iter()
            .copied()
            .find(|r| r.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| UnknownRelation(String::from(s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: u32,
    pub caption: String,
    pub feature: Vec<f32>,
    /// Centroid of the instance points.
    pub center: Point3,
    /// Tight bounds of the instance points.
    pub aabb: Aabb,
    pub octree: AdaptiveOctree,
}

impl GraphNode {
    /// Membership in the node's octree root box.
    pub fn contains(&self, p: Point3) -> bool {
        self.octree.root().contains(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: u32,
    pub to: u32,
    /// Where `to` sits relative to `from`; `contain` means `from` contains `to`.
    pub relation: Relation,
    pub distance: f64,
    /// `center(to) - center(from)`.
    pub vector: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub feature_dim: usize,
    pub up_axis: UpAxis,
    pub config: PipelineConfig,
    /// Ascending id.
    pub nodes: Vec<GraphNode>,
    /// Ascending (from, to).
    pub edges: Vec<GraphEdge>,
}

/// Relation of `b` with respect to `a`.
pub fn classify_relation(a: &GraphNode, b: &GraphNode, cfg: &PipelineConfig) -> Relation {
    classify_boxes(a.center, &a.aabb, b.center, &b.aabb, cfg)
}

pub fn classify_boxes(ca: Point3, a: &Aabb, cb: Point3, b: &Aabb, cfg: &PipelineConfig) -> Relation {
    if a.contains_box(b, cfg.eps_c) {
        return Relation::Contain;
    }
    if b.contains_box(a, cfg.eps_c) {
        return Relation::Included;
    }
    let v = cb - ca;
    let (up, lr, fb) = cfg.up_axis.axes();
    let (vu, vl, vf) = (v.axis(up), v.axis(lr), v.axis(fb));
    if libm::fabs(vu) >= cfg.dominance_ratio * libm::fabs(vl).max(libm::fabs(vf)) {
        if vu >= 0.0 {
            Relation::Above
        } else {
            Relation::Below
        }
    } else if libm::fabs(vl) >= libm::fabs(vf) {
        if vl >= 0.0 {
            Relation::Right
        } else {
            Relation::Left
        }
    } else if vf >= 0.0 {
        Relation::Front
    } else {
        Relation::Back
    }
}

/// Everything needed to make one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInput {
    pub id: u32,
    pub caption: String,
    pub feature: Vec<f32>,
    pub points: Vec<Point3>,
}

pub fn build_node(input: NodeInput, cfg: &PipelineConfig, mode: BuildMode) -> Result<GraphNode, GraphError> {
    let id = input.id;
    let opts = BuildOptions {
        max_depth: cfg.max_depth,
        delta: cfg.delta,
        mode,
        min_leaf_points: cfg.min_leaf_points,
        prune_full: cfg.prune_full,
    };
    let octree = AdaptiveOctree::build(&input.points, opts).map_err(|source| GraphError::Octree { id, source })?;
    let center = geometry::centroid(&input.points).map_err(|_| GraphError::Octree {
        id,
        source: OctreeError::EmptyCloud,
    })?;
    Ok(GraphNode {
        id,
        caption: input.caption,
        feature: input.feature,
        center,
        aabb: octree.bbox,
        octree,
    })
}

/// Builds nodes (adaptive octrees) and relation edges. An edge pair joins
/// two nodes closer than `tau_r`, or where one box contains the other.
pub fn build_graph(inputs: Vec<NodeInput>, feature_dim: usize, cfg: &PipelineConfig) -> Result<SceneGraph, GraphError> {
    let mut nodes = Vec::with_capacity(inputs.len());
    for input in inputs {
        if input.feature.len() != feature_dim {
            return Err(GraphError::FeatureDim {
                id: input.id,
                expected: feature_dim,
                got: input.feature.len(),
            });
        }
        nodes.push(build_node(input, cfg, BuildMode::Adaptive)?);
    }
    assemble(nodes, feature_dim, cfg)
}

/// Sorts nodes by id and derives all edges.
pub fn assemble(mut nodes: Vec<GraphNode>, feature_dim: usize, cfg: &PipelineConfig) -> Result<SceneGraph, GraphError> {
    nodes.sort_by_key(|n| n.id);
    for w in nodes.windows(2) {
        if w[0].id == w[1].id {
            return Err(GraphError::DuplicateId(w[0].id));
        }
    }
    let edges = derive_edges(&nodes, cfg);
    Ok(SceneGraph {
        feature_dim,
        up_axis: cfg.up_axis,
        config: cfg.clone(),
        nodes,
        edges,
    })
}

pub fn derive_edges(nodes: &[GraphNode], cfg: &PipelineConfig) -> Vec<GraphEdge> {
    let mut edges = Vec::new();
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            let v = b.center - a.center;
            let d = v.norm();
            let rel = classify_relation(a, b, cfg);
            let nested = matches!(rel, Relation::Contain | Relation::Included);
            if d < cfg.tau_r || nested {
                edges.push(GraphEdge {
                    from: a.id,
                    to: b.id,
                    relation: rel,
                    distance: d,
                    vector: v,
                });
                edges.push(GraphEdge {
                    from: b.id,
                    to: a.id,
                    relation: rel.inverse(),
                    distance: d,
                    vector: -v,
                });
            }
        }
    }
    edges.sort_by_key(|e| (e.from, e.to));
    edges
}

impl SceneGraph {
    pub fn empty(feature_dim: usize, cfg: &PipelineConfig) -> Self {
        SceneGraph {
            feature_dim,
            up_axis: cfg.up_axis,
            config: cfg.clone(),
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn node(&self, id: u32) -> Option<&GraphNode> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .ok()
            .map(|i| &self.nodes[i])
    }

    /// Outgoing edges of `id`, ascending by target.
    pub fn edges_from(&self, id: u32) -> &[GraphEdge] {
        let lo = self.edges.partition_point(|e| e.from < id);
        let hi = self.edges.partition_point(|e| e.from <= id);
        &self.edges[lo..hi]
    }

    /// Scene-level occupancy: the first node whose box contains `p` and
    /// whose octree reports `p` occupied answers true.
    pub fn is_occupied(&self, p: Point3) -> bool {
        self.nodes
            .iter()
            .any(|n| n.contains(p) && n.octree.is_occupied(p))
    }

    /// Union of all node root boxes, if any.
    pub fn bounds(&self) -> Option<Aabb> {
        self.nodes
            .iter()
            .map(|n| n.octree.root().aabb())
            .reduce(|a, b| a.union(&b))
    }
}

/// Free-function form of [`SceneGraph::is_occupied`].
pub fn scene_is_occupied(graph: &SceneGraph, p: Point3) -> bool {
    graph.is_occupied(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn box_points(center: Point3, size: Point3, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                center
                    + Point3::new(
                        size.x * rng.random_range(-0.5..=0.5),
                        size.y * rng.random_range(-0.5..=0.5),
                        size.z * rng.random_range(-0.5..=0.5),
                    )
            })
            .collect()
    }

    fn input(id: u32, points: Vec<Point3>) -> NodeInput {
        NodeInput {
            id,
            caption: alloc::format!("obj{id}"),
            feature: vec![1.0, 0.0],
            points,
        }
    }

    fn node_at(id: u32, c: Point3) -> GraphNode {
        build_node(
            input(id, vec![c - Point3::splat(0.05), c + Point3::splat(0.05)]),
            &PipelineConfig::default(),
            BuildMode::Adaptive,
        )
        .unwrap()
    }

    #[test]
    fn classify_examples() {
        let cfg = PipelineConfig::default();
        let a = node_at(0, Point3::ZERO);
        assert_eq!(classify_relation(&a, &node_at(1, Point3::new(0.0, 0.0, 1.0)), &cfg), Relation::Above);
        assert_eq!(classify_relation(&a, &node_at(1, Point3::new(1.0, 0.2, 0.1)), &cfg), Relation::Right);
        assert_eq!(classify_relation(&a, &node_at(1, Point3::new(0.1, -1.0, 0.2)), &cfg), Relation::Back);
        let big = build_node(
            input(2, vec![Point3::splat(-1.0), Point3::splat(1.0)]),
            &cfg,
            BuildMode::Adaptive,
        )
        .unwrap();
        assert_eq!(classify_relation(&big, &a, &cfg), Relation::Contain);
        assert_eq!(classify_relation(&a, &big, &cfg), Relation::Included);
    }

    #[test]
    fn up_axis_override() {
        let cfg = PipelineConfig {
            up_axis: UpAxis::Y,
            ..PipelineConfig::default()
        };
        let a = node_at(0, Point3::ZERO);
        assert_eq!(classify_relation(&a, &node_at(1, Point3::new(0.0, 1.0, 0.2)), &cfg), Relation::Above);
        assert_eq!(classify_relation(&a, &node_at(1, Point3::new(0.0, 0.1, 1.0)), &cfg), Relation::Front);
    }

    #[test]
    fn edge_threshold_and_containment() {
        let cfg = PipelineConfig::default();
        let near = assemble(vec![node_at(0, Point3::ZERO), node_at(1, Point3::new(2.5, 0.0, 0.0))], 2, &cfg).unwrap();
        assert_eq!(near.edges.len(), 2);
        let far = assemble(vec![node_at(0, Point3::ZERO), node_at(1, Point3::new(3.5, 0.0, 0.0))], 2, &cfg).unwrap();
        assert!(far.edges.is_empty());
        let one = assemble(vec![node_at(0, Point3::ZERO)], 2, &cfg).unwrap();
        assert!(one.edges.is_empty());

        let room = build_node(
            input(5, vec![Point3::new(-5.0, -5.0, 0.0), Point3::new(5.0, 5.0, 3.0)]),
            &cfg,
            BuildMode::Adaptive,
        )
        .unwrap();
        let g = assemble(vec![room, node_at(1, Point3::new(4.0, 4.0, 2.0))], 2, &cfg).unwrap();
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.edges_from(5)[0].relation, Relation::Contain);
        assert_eq!(g.edges_from(1)[0].relation, Relation::Included);
    }

    #[test]
    fn relation_text_round_trip() {
        for r in Relation::ALL {
            assert_eq!(r.as_str().parse::<Relation>().unwrap(), r);
            assert_eq!(Relation::from_u8(r.as_u8()), Some(r));
            assert_eq!(r.inverse().inverse(), r);
        }
        assert!("sideways".parse::<Relation>().is_err());
    }

    fn random_graph(seed: u64, n: usize) -> SceneGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..n as u32)
            .map(|id| {
                let c = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0));
                let s = Point3::new(rng.random_range(0.05..1.5), rng.random_range(0.05..1.5), rng.random_range(0.05..1.5));
                let count = rng.random_range(1..200);
                input(id * 3 + 1, box_points(c, s, count, &mut rng))
            })
            .collect();
        build_graph(inputs, 2, &PipelineConfig::default()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn edges_pair_up(seed in any::<u64>(), n in 0usize..12) {
            let g = random_graph(seed, n);
            for e in &g.edges {
                prop_assert!(e.from != e.to);
                prop_assert!((e.distance - e.vector.norm()).abs() < 1e-9);
                let back = g.edges_from(e.to).iter().find(|r| r.to == e.from).unwrap();
                prop_assert_eq!(back.relation, e.relation.inverse());
                prop_assert_eq!(back.vector, -e.vector);
                prop_assert_eq!(back.distance, e.distance);
                prop_assert!(g.node(e.from).is_some() && g.node(e.to).is_some());
            }
        }

        #[test]
        fn relations_survive_translation(seed in any::<u64>(), n in 2usize..8, dx in -50.0f64..50.0, dy in -50.0f64..50.0, dz in -50.0f64..50.0) {
            let cfg = PipelineConfig::default();
            let g = random_graph(seed, n);
            let shift = Point3::new(dx, dy, dz);
            for a in &g.nodes {
                for b in &g.nodes {
                    if a.id == b.id { continue; }
                    let before = classify_boxes(a.center, &a.aabb, b.center, &b.aabb, &cfg);
                    let after = classify_boxes(a.center + shift, &a.aabb.translated(shift), b.center + shift, &b.aabb.translated(shift), &cfg);
                    // shifting can move a tie across the rounding boundary;
                    // only compare when the decision is not razor-thin
                    let v = b.center - a.center;
                    let margin = (v.z.abs() - v.x.abs().max(v.y.abs())).abs().min((v.x.abs() - v.y.abs()).abs());
                    if margin > 1e-9 || matches!(before, Relation::Contain | Relation::Included) {
                        prop_assert_eq!(before, after);
                    }
                }
            }
        }

        #[test]
        fn scene_occupancy_matches_leaf_union(seed in any::<u64>(), n in 1usize..8) {
            let g = random_graph(seed, n);
            let bounds = g.bounds().unwrap().expanded(0.2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let leaves: Vec<Aabb> = g.nodes.iter().flat_map(|n| n.octree.occupied_nodes().map(|l| l.aabb())).collect();
            for _ in 0..300 {
                let p = Point3::new(
                    rng.random_range(bounds.min.x..bounds.max.x),
                    rng.random_range(bounds.min.y..bounds.max.y),
                    rng.random_range(bounds.min.z..bounds.max.z),
                );
                prop_assert_eq!(g.is_occupied(p), leaves.iter().any(|b| b.contains(p)));
            }
        }
    }
}

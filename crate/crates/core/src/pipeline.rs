//! End-to-end graph construction and representation statistics.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cgsm::{self, CgsmError, InstanceMap};
use crate::config::{ConfigError, PipelineConfig};
use crate::geometry::Point3;
use crate::graph::{self, GraphError, GraphNode, NodeInput, SceneGraph};
use crate::ifa::{self, FeatureProvider, IfaError, PoolNote};
use crate::ingest::{self, DropCounts, IngestError, SceneBundle};
use crate::octree::{self, AdaptiveOctree, BuildMode, BuildOptions, OctreeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("merge: {0}")]
    Cgsm(#[from] CgsmError),
    #[error("feature aggregation: {0}")]
    Ifa(#[from] IfaError),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("octree statistics for node {id}: {source}")]
    Stats { id: u32, source: OctreeError },
}

/// Counters from one build.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub segments: usize,
    pub drops: DropCounts,
    pub instances: usize,
    pub removed_sources: Vec<u32>,
    pub nodes: usize,
    pub edges: usize,
    /// Instances whose pool fell back to merged features.
    pub pool_notes: Vec<(u32, PoolNote)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub graph: SceneGraph,
    /// Points of every node, aligned with `graph.nodes`.
    pub node_points: Vec<Vec<Point3>>,
    pub instances: InstanceMap,
    pub report: BuildReport,
}

/// Runs ingest, merging, feature aggregation and graph construction.
/// Node ids are instance indices in ascending instance-id order.
pub fn build_scene(
    bundle: &SceneBundle,
    cfg: &PipelineConfig,
    provider: &dyn FeatureProvider,
) -> Result<BuildOutput, PipelineError> {
    cfg.validate()?;
    let (segments, drops) = ingest::filter_and_build_counted(bundle, cfg)?;
    let instances = cgsm::run_cgsm(&segments, cfg)?;

    let mut pools = Vec::with_capacity(instances.instances.len());
    let mut pool_notes = Vec::new();
    for m in &instances.instances {
        let pool = ifa::refine_pool(m, bundle, provider, cfg)?;
        if let Some(note) = pool.note {
            pool_notes.push((m.id, note));
        }
        pools.push(ifa::major_cluster(&pool, cfg.eps_f, cfg.feature_min_pts as usize));
    }
    let fused = ifa::fuse(&pools, cfg)?;

    let mut inputs = Vec::with_capacity(pools.len());
    let mut node_points = Vec::with_capacity(pools.len());
    for (k, ((m, pool), f)) in instances.instances.iter().zip(&pools).zip(&fused).enumerate() {
        node_points.push(m.points.clone());
        inputs.push(NodeInput {
            id: k as u32,
            caption: pool.dominant_caption(),
            feature: f.f_star_f32(),
            points: m.points.clone(),
        });
    }
    let graph = if inputs.is_empty() {
        SceneGraph::empty(bundle.feature_dim, cfg)
    } else {
        graph::build_graph(inputs, bundle.feature_dim, cfg)?
    };
    let report = BuildReport {
        segments: segments.len(),
        drops,
        instances: instances.instances.len(),
        removed_sources: instances.removed_sources.clone(),
        nodes: graph.nodes.len(),
        edges: graph.edges.len(),
        pool_notes,
    };
    Ok(BuildOutput {
        graph,
        node_points,
        instances,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub id: u32,
    pub caption: String,
    pub point_count: usize,
    pub octree_bytes: usize,
    pub octree_nodes: usize,
    pub eor_adaptive: f64,
    pub eor_classic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub nodes: Vec<NodeStats>,
    pub total_points: usize,
    pub total_octree_bytes: usize,
    /// Raw xyz float32 size of all node points.
    pub raw_point_bytes: usize,
    pub meor_adaptive: f64,
    pub meor_classic: f64,
}

/// EOR of `tree` over its own points, with the configured dilation and
/// sample budget. `salt` decorrelates the sampling streams of different
/// nodes.
pub fn tree_eor(tree: &AdaptiveOctree, points: &[Point3], cfg: &PipelineConfig, salt: u64) -> Result<f64, OctreeError> {
    let seed = cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    octree::eor(tree, points, cfg.delta_r, cfg.eor_samples as u64, seed).map(|r| r.eor)
}

/// Per-node storage and EOR for the stored (adaptive) octree and for a
/// classic rebuild at the same depth.
pub fn node_stats(node: &GraphNode, points: &[Point3], cfg: &PipelineConfig) -> Result<NodeStats, PipelineError> {
    let id = node.id;
    let err = |source| PipelineError::Stats { id, source };
    let classic = AdaptiveOctree::build(
        points,
        BuildOptions {
            max_depth: node.octree.max_depth,
            delta: node.octree.delta,
            mode: BuildMode::Classic,
            min_leaf_points: node.octree.min_leaf_points,
            prune_full: cfg.prune_full,
        },
    )
    .map_err(err)?;
    Ok(NodeStats {
        id,
        caption: node.caption.clone(),
        point_count: points.len(),
        octree_bytes: node.octree.storage_size(),
        octree_nodes: node.octree.nodes.len(),
        eor_adaptive: tree_eor(&node.octree, points, cfg, id as u64).map_err(err)?,
        eor_classic: tree_eor(&classic, points, cfg, id as u64).map_err(err)?,
    })
}

/// Statistics over every node; `node_points` is aligned with `graph.nodes`.
pub fn scene_stats(graph: &SceneGraph, node_points: &[Vec<Point3>], cfg: &PipelineConfig) -> Result<SceneStats, PipelineError> {
    let mut nodes = Vec::with_capacity(graph.nodes.len());
    for (node, points) in graph.nodes.iter().zip(node_points) {
        nodes.push(node_stats(node, points, cfg)?);
    }
    let n = nodes.len().max(1) as f64;
    let total_points = nodes.iter().map(|s| s.point_count).sum();
    Ok(SceneStats {
        meor_adaptive: nodes.iter().map(|s| s.eor_adaptive).sum::<f64>() / n,
        meor_classic: nodes.iter().map(|s| s.eor_classic).sum::<f64>() / n,
        total_octree_bytes: nodes.iter().map(|s| s.octree_bytes).sum(),
        raw_point_bytes: 12 * total_points,
        total_points,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifa::PassThrough;
    use crate::ingest::{Frame, RawSegment, SegmentGeometry};
    use alloc::string::ToString;
    use alloc::vec;

    fn cube_points(c: Point3, s: f64, n: usize) -> Vec<Point3> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let f = |x: usize| (x as f64 / (n - 1) as f64 - 0.5) * s;
                    out.push(c + Point3::new(f(i), f(j), f(k)));
                }
            }
        }
        out
    }

    fn raw(points: Vec<Point3>, f: Vec<f32>, caption: &str) -> RawSegment {
        RawSegment {
            pixel_count: None,
            geometry: SegmentGeometry::Points(points),
            f_v: f.clone(),
            f_c: f,
            caption: caption.to_string(),
        }
    }

    #[test]
    fn two_objects_over_two_frames() {
        let a = cube_points(Point3::new(0.0, 0.0, 0.2), 0.2, 8);
        let b = cube_points(Point3::new(1.0, 0.0, 0.2), 0.2, 8);
        let mut f0 = Frame::new(0);
        f0.segments = vec![raw(a.clone(), vec![1.0, 0.0], "box"), raw(b.clone(), vec![0.0, 1.0], "ball")];
        let mut f1 = Frame::new(1);
        f1.segments = vec![raw(a, vec![1.0, 0.1], "box"), raw(b, vec![0.1, 1.0], "ball")];
        let bundle = SceneBundle {
            feature_dim: 2,
            frames: vec![f0, f1],
        };
        let out = build_scene(&bundle, &PipelineConfig::default(), &PassThrough).unwrap();
        assert_eq!(out.report.segments, 4);
        assert_eq!(out.graph.nodes.len(), 2);
        assert_eq!(out.graph.edges.len(), 2);
        assert_eq!(out.graph.nodes[0].caption, "box");
        assert_eq!(out.graph.nodes[1].caption, "ball");
        let stats = scene_stats(
            &out.graph,
            &out.node_points,
            &PipelineConfig {
                eor_samples: 20_000,
                ..PipelineConfig::default()
            },
        )
        .unwrap();
        assert_eq!(stats.total_points, 2 * 512 * 2);
        assert!(stats.meor_adaptive > 0.0 && stats.meor_adaptive <= 1.0);
        // cubes: adaptive and classic boxes coincide
        assert!((stats.meor_adaptive - stats.meor_classic).abs() < 0.02);
    }

    #[test]
    fn empty_bundle_gives_empty_graph() {
        let bundle = SceneBundle {
            feature_dim: 4,
            frames: vec![],
        };
        let out = build_scene(&bundle, &PipelineConfig::default(), &PassThrough).unwrap();
        assert!(out.graph.nodes.is_empty());
        assert_eq!(out.graph.feature_dim, 4);
    }
}

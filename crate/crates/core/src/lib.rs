//! Octree-graph scene representation.
//!
//! Turns per-frame, feature-annotated point-cloud segments into merged object
//! instances ([`cgsm`]), fuses their semantic features ([`ifa`]), represents
//! each instance as an adaptive octree with per-axis node extents
//! ([`octree`]), and links instances into a scene graph with spatial relation
//! edges ([`graph`]). Occupancy queries, text retrieval ([`retrieval`]) and
//! grid path planning ([`planning`]) run on top of the graph.
//!
//! The crate is `no_std` and only needs an allocator. File formats, network
//! clients and the command line live in the companion `ograph` crate.
#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod cgsm;
pub mod cluster;
pub mod config;
pub mod embed;
pub mod geometry;
pub mod graph;
pub mod ifa;
pub mod ingest;
pub mod octree;
pub mod pipeline;
pub mod planning;
pub mod retrieval;

pub use config::{ConfigError, NeighborMode, PipelineConfig, UpAxis};
pub use geometry::{Aabb, Point3, VoxelKey, VoxelSet};
pub use graph::{GraphEdge, GraphNode, Relation, SceneGraph};
pub use octree::{AdaptiveOctree, BuildMode, BuildOptions, OctreeNode};

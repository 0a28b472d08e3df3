//! Scene-graph files.
//!
//! Binary layout (little-endian): magic `OGRF`, u32 version, u32 length +
//! config JSON, u32 feature dimension, u8 up axis, u32 node count, nodes,
//! u32 edge count, edges, CRC32 of everything before it.
//!
//! A node is u32 id, u32 length + UTF-8 caption, f32 feature, f64 center,
//! f64 aabb min/max, then the octree in its own canonical encoding. An edge
//! is u32 from, u32 to, u8 relation, f64 distance, f64 vector.
//!
//! The points sidecar (`OGPT`) stores every node's points as f64 so that
//! statistics can be recomputed after a build.

use ograph_core::config::{PipelineConfig, UpAxis};
use ograph_core::graph::{GraphEdge, GraphNode, Relation, SceneGraph};
use ograph_core::{AdaptiveOctree, Aabb, Point3};
use thiserror::Error;

pub const GRAPH_MAGIC: &[u8; 4] = b"OGRF";
pub const GRAPH_VERSION: u32 = 1;
pub const POINTS_MAGIC: &[u8; 4] = b"OGPT";
pub const POINTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("file is truncated")]
    TruncatedFile,
    #[error("corrupt file: {0}")]
    CorruptFile(String),
}

fn corrupt(reason: impl Into<String>) -> CodecError {
    CodecError::CorruptFile(reason.into())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn point(&mut self, p: Point3) {
        p.to_array().into_iter().for_each(|v| self.f64(v));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(CodecError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn point(&mut self) -> Result<Point3, CodecError> {
        Ok(Point3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn count(&mut self, min_record: usize) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_record) > self.bytes.len().saturating_sub(self.pos) {
            return Err(CodecError::TruncatedFile);
        }
        Ok(n)
    }
}

/// Splits off and verifies the trailing checksum; returns the payload.
fn checked_payload<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<&'a [u8], CodecError> {
    if bytes.len() < 12 {
        return Err(CodecError::TruncatedFile);
    }
    if &bytes[..4] != magic {
        return Err(corrupt("bad magic"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let v = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes"));
    if v != version {
        return Err(corrupt(format!("unsupported version {v}")));
    }
    Ok(payload)
}

pub fn save_graph(graph: &SceneGraph) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(GRAPH_MAGIC);
    w.u32(GRAPH_VERSION);
    w.bytes(&serde_json::to_vec(&graph.config).expect("config serializes"));
    w.u32(graph.feature_dim as u32);
    w.u8(graph.up_axis.as_u8());
    w.u32(graph.nodes.len() as u32);
    let mut tree = Vec::new();
    for n in &graph.nodes {
        w.u32(n.id);
        w.bytes(n.caption.as_bytes());
        n.feature.iter().for_each(|v| w.f32(*v));
        w.point(n.center);
        w.point(n.aabb.min);
        w.point(n.aabb.max);
        tree.clear();
        n.octree.encode(&mut tree);
        w.buf.extend_from_slice(&tree);
    }
    w.u32(graph.edges.len() as u32);
    for e in &graph.edges {
        w.u32(e.from);
        w.u32(e.to);
        w.u8(e.relation.as_u8());
        w.f64(e.distance);
        w.point(e.vector);
    }
    w.finish()
}

pub fn load_graph(bytes: &[u8]) -> Result<SceneGraph, CodecError> {
    let payload = checked_payload(bytes, GRAPH_MAGIC, GRAPH_VERSION)?;
    let mut r = Reader { bytes: payload, pos: 8 };
    let config: PipelineConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| corrupt(format!("config block: {e}")))?;
    let feature_dim = r.u32()? as usize;
    let up_axis = UpAxis::from_u8(r.u8()?).ok_or_else(|| corrupt("unknown up axis"))?;
    let node_count = r.count(4 + 4 + 72)?;
    let mut nodes: Vec<GraphNode> = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let id = r.u32()?;
        let caption = std::str::from_utf8(r.bytes()?)
            .map_err(|_| corrupt("caption is not UTF-8"))?
            .to_string();
        let feature = (0..feature_dim).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        let center = r.point()?;
        let aabb = Aabb {
            min: r.point()?,
            max: r.point()?,
        };
        let (octree, used) = AdaptiveOctree::decode(&payload[r.pos..]).map_err(|e| match e {
            ograph_core::octree::DecodeError::Truncated => CodecError::TruncatedFile,
            ograph_core::octree::DecodeError::Malformed(m) => corrupt(format!("node {id} octree: {m}")),
        })?;
        r.pos += used;
        if nodes.last().is_some_and(|p| p.id >= id) {
            return Err(corrupt("node ids not strictly ascending"));
        }
        nodes.push(GraphNode {
            id,
            caption,
            feature,
            center,
            aabb,
            octree,
        });
    }
    let edge_count = r.count(4 + 4 + 1 + 32)?;
    let mut edges: Vec<GraphEdge> = Vec::with_capacity(edge_count);
    for _ in 0..edge_count {
        let from = r.u32()?;
        let to = r.u32()?;
        let relation = Relation::from_u8(r.u8()?).ok_or_else(|| corrupt("unknown relation"))?;
        let distance = r.f64()?;
        let vector = r.point()?;
        edges.push(GraphEdge {
            from,
            to,
            relation,
            distance,
            vector,
        });
    }
    if r.pos != payload.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(SceneGraph {
        feature_dim,
        up_axis,
        config,
        nodes,
        edges,
    })
}

/// Lossless structured-text export.
pub fn export_text(graph: &SceneGraph) -> String {
    serde_json::to_string_pretty(graph).expect("graph serializes")
}

pub fn import_text(text: &str) -> Result<SceneGraph, CodecError> {
    serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))
}

/// Node points keyed by node id.
pub fn save_points(nodes: &[(u32, &[Point3])]) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(POINTS_MAGIC);
    w.u32(POINTS_VERSION);
    w.u32(nodes.len() as u32);
    for (id, pts) in nodes {
        w.u32(*id);
        w.u32(pts.len() as u32);
        pts.iter().for_each(|p| w.point(*p));
    }
    w.finish()
}

pub fn load_points(bytes: &[u8]) -> Result<Vec<(u32, Vec<Point3>)>, CodecError> {
    let payload = checked_payload(bytes, POINTS_MAGIC, POINTS_VERSION)?;
    let mut r = Reader { bytes: payload, pos: 8 };
    let n = r.count(8)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u32()?;
        let count = r.count(24)?;
        let pts = (0..count).map(|_| r.point()).collect::<Result<Vec<_>, _>>()?;
        out.push((id, pts));
    }
    if r.pos != payload.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(out)
}

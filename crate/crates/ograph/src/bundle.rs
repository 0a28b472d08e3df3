//! Scene bundle files: a line-oriented JSON manifest plus a little-endian
//! float32 blob.
//!
//! The first manifest line is a header naming the feature dimension and the
//! blob file (relative to the manifest). Every further line is one frame.
//! Offsets and counts are in float32 elements, not bytes.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ograph_core::ingest::{DepthMap, Frame, Intrinsics, Mask, Pose, RawSegment, SceneBundle, SegmentGeometry};
use ograph_core::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BUNDLE_FORMAT: &str = "ograph-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("blob: {0}")]
    Blob(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    feature_dim: usize,
    blob: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanRef {
    offset: u64,
    count: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRef {
    offset: u64,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixel_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<SpanRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<GridRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<GridRef>,
    f_v: u64,
    f_c: u64,
    caption: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<[f64; 16]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_size: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<GridRef>,
    segments: Vec<SegmentRecord>,
}

#[derive(Default)]
struct BlobWriter {
    data: Vec<f32>,
}

impl BlobWriter {
    fn push(&mut self, values: impl IntoIterator<Item = f32>) -> u64 {
        let at = self.data.len() as u64;
        self.data.extend(values);
        at
    }

    fn points(&mut self, pts: &[Point3]) -> SpanRef {
        let offset = self.push(pts.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]));
        SpanRef {
            offset,
            count: pts.len() as u64,
        }
    }

    fn depth(&mut self, g: &DepthMap) -> GridRef {
        GridRef {
            offset: self.push(g.data.iter().copied()),
            width: g.width,
            height: g.height,
        }
    }

    fn mask(&mut self, g: &Mask) -> GridRef {
        GridRef {
            offset: self.push(g.data.iter().map(|b| if *b { 1.0 } else { 0.0 })),
            width: g.width,
            height: g.height,
        }
    }
}

/// Default blob path for a manifest: same stem, `.bin` extension.
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the manifest at `manifest` and the blob beside it.
pub fn write_bundle(bundle: &SceneBundle, manifest: &Path) -> Result<(), BundleError> {
    let blob_path = blob_path_for(manifest);
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| BundleError::Blob(format!("cannot name blob for {}", manifest.display())))?
        .to_string();
    let mut blob = BlobWriter::default();
    let mut lines = Vec::with_capacity(bundle.frames.len() + 1);
    let header = Header {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        feature_dim: bundle.feature_dim,
        blob: blob_name,
    };
    lines.push(serde_json::to_string(&header).expect("header serializes"));
    for f in &bundle.frames {
        let mut segments = Vec::with_capacity(f.segments.len());
        for s in &f.segments {
            let (points, mask, depth) = match &s.geometry {
                SegmentGeometry::Points(p) => (Some(blob.points(p)), None, None),
                SegmentGeometry::Mask { mask, depth } => (None, Some(blob.mask(mask)), Some(blob.depth(depth))),
            };
            segments.push(SegmentRecord {
                pixel_count: s.pixel_count,
                points,
                mask,
                depth,
                f_v: blob.push(s.f_v.iter().copied()),
                f_c: blob.push(s.f_c.iter().copied()),
                caption: s.caption.clone(),
            });
        }
        let record = FrameRecord {
            t: f.t,
            pose: f.pose.map(|p| p.0),
            intrinsics: f.intrinsics.map(|k| [k.fx, k.fy, k.cx, k.cy]),
            image_size: f.image_size.map(|(w, h)| [w, h]),
            depth: f.depth.as_ref().map(|d| blob.depth(d)),
            segments,
        };
        lines.push(serde_json::to_string(&record).expect("frame serializes"));
    }

    let file = fs::File::create(manifest).map_err(io_err(manifest))?;
    let mut w = BufWriter::new(file);
    for l in &lines {
        writeln!(w, "{l}").map_err(io_err(manifest))?;
    }
    w.flush().map_err(io_err(manifest))?;

    let mut bytes = Vec::with_capacity(blob.data.len() * 4);
    for v in &blob.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&blob_path, bytes).map_err(io_err(&blob_path))
}

struct Blob {
    data: Vec<f32>,
}

impl Blob {
    fn slice(&self, offset: u64, count: u64) -> Result<&[f32], BundleError> {
        let start = usize::try_from(offset).map_err(|_| BundleError::Blob("offset overflow".into()))?;
        let len = usize::try_from(count).map_err(|_| BundleError::Blob("count overflow".into()))?;
        let end = start
            .checked_add(len)
            .filter(|e| *e <= self.data.len())
            .ok_or_else(|| BundleError::Blob(format!("range {start}+{len} exceeds {} elements", self.data.len())))?;
        Ok(&self.data[start..end])
    }

    fn points(&self, r: SpanRef) -> Result<Vec<Point3>, BundleError> {
        let count = r.count.checked_mul(3).ok_or_else(|| BundleError::Blob("count overflow".into()))?;
        Ok(self
            .slice(r.offset, count)?
            .chunks_exact(3)
            .map(|c| Point3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect())
    }

    fn depth(&self, r: GridRef) -> Result<DepthMap, BundleError> {
        let n = r.width as u64 * r.height as u64;
        Ok(DepthMap::new(r.width, r.height, self.slice(r.offset, n)?.to_vec()))
    }

    fn mask(&self, r: GridRef) -> Result<Mask, BundleError> {
        let n = r.width as u64 * r.height as u64;
        Ok(Mask::new(
            r.width,
            r.height,
            self.slice(r.offset, n)?.iter().map(|v| *v != 0.0).collect(),
        ))
    }
}

/// Reads a manifest and its blob.
pub fn read_bundle(manifest: &Path) -> Result<SceneBundle, BundleError> {
    let file = fs::File::open(manifest).map_err(io_err(manifest))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let bad = |line: usize, reason: String| BundleError::Manifest { line: line + 1, reason };

    let header: Header = loop {
        match lines.next() {
            None => return Err(bad(0, "missing header".into())),
            Some((i, l)) => {
                let l = l.map_err(io_err(manifest))?;
                if l.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&l).map_err(|e| bad(i, e.to_string()))?;
            }
        }
    };
    if header.format != BUNDLE_FORMAT {
        return Err(bad(0, format!("unknown format `{}`", header.format)));
    }
    if header.version != BUNDLE_VERSION {
        return Err(bad(0, format!("unsupported version {}", header.version)));
    }
    let blob_path = manifest.parent().unwrap_or(Path::new(".")).join(&header.blob);
    let raw = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if raw.len() % 4 != 0 {
        return Err(BundleError::Blob(format!("length {} is not a multiple of 4", raw.len())));
    }
    let blob = Blob {
        data: raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
    };

    let dim = header.feature_dim as u64;
    let mut frames = Vec::new();
    for (i, l) in lines {
        let l = l.map_err(io_err(manifest))?;
        if l.trim().is_empty() {
            continue;
        }
        let r: FrameRecord = serde_json::from_str(&l).map_err(|e| bad(i, e.to_string()))?;
        let mut segments = Vec::with_capacity(r.segments.len());
        for s in r.segments {
            let geometry = match (s.points, s.mask, s.depth) {
                (Some(p), None, None) => SegmentGeometry::Points(blob.points(p)?),
                (None, Some(m), Some(d)) => SegmentGeometry::Mask {
                    mask: blob.mask(m)?,
                    depth: blob.depth(d)?,
                },
                _ => return Err(bad(i, "segment needs either points or mask plus depth".into())),
            };
            segments.push(RawSegment {
                pixel_count: s.pixel_count,
                geometry,
                f_v: blob.slice(s.f_v, dim)?.to_vec(),
                f_c: blob.slice(s.f_c, dim)?.to_vec(),
                caption: s.caption,
            });
        }
        frames.push(Frame {
            t: r.t,
            pose: r.pose.map(Pose),
            intrinsics: r.intrinsics.map(|[fx, fy, cx, cy]| Intrinsics { fx, fy, cx, cy }),
            image_size: r.image_size.map(|[w, h]| (w, h)),
            depth: r.depth.map(|d| blob.depth(d)).transpose()?,
            segments,
        });
    }
    Ok(SceneBundle {
        feature_dim: header.feature_dim,
        frames,
    })
}

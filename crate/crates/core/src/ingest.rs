//! Scene bundles: per-frame segments with features, mask lifting and the
//! size filters that turn raw proposals into [`Segment`]s.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::geometry::{self, GeometryError, Point3, VoxelSet};

/// Tolerance on the rotation block of a camera pose.
pub const POSE_ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestError {
    #[error("frame {t}: pose required to lift a mask")]
    MissingPose { t: u32 },
    #[error("frame {t}: intrinsics required to lift a mask")]
    MissingIntrinsics { t: u32 },
    #[error("frame {t}: mask is {mask:?} but depth is {depth:?}")]
    ShapeMismatch {
        t: u32,
        mask: (u32, u32),
        depth: (u32, u32),
    },
    #[error("frame {t} segment {index}: feature length {got}, expected {expected}")]
    BadFeatureDim {
        t: u32,
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("frame {t} segment {index}: non-finite feature value")]
    NonFiniteFeature { t: u32, index: usize },
    #[error("frame {t}: rotation block of the pose is not orthonormal")]
    BadPose { t: u32 },
    #[error("frame {t}: grid has {got} cells, expected {expected}")]
    BadGrid { t: u32, expected: usize, got: usize },
    #[error("frame {t} follows frame {prev}; frames must be in increasing time order")]
    FramesOutOfOrder { prev: u32, t: u32 },
    #[error("frame {t} segment {index}: non-finite point")]
    NonFinitePoint { t: u32, index: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Row-major 4×4 camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose(pub [f64; 16]);

impl Pose {
    pub const IDENTITY: Pose = Pose([
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ]);

    fn r(&self, row: usize, col: usize) -> f64 {
        self.0[row * 4 + col]
    }

    pub fn translation(&self) -> Point3 {
        Point3::new(self.r(0, 3), self.r(1, 3), self.r(2, 3))
    }

    /// Camera frame to world frame.
    pub fn apply(&self, p: Point3) -> Point3 {
        let t = self.translation();
        Point3::new(
            self.r(0, 0) * p.x + self.r(0, 1) * p.y + self.r(0, 2) * p.z + t.x,
            self.r(1, 0) * p.x + self.r(1, 1) * p.y + self.r(1, 2) * p.z + t.y,
            self.r(2, 0) * p.x + self.r(2, 1) * p.y + self.r(2, 2) * p.z + t.z,
        )
    }

    /// World frame to camera frame (rigid inverse).
    pub fn apply_inverse(&self, p: Point3) -> Point3 {
        let q = p - self.translation();
        Point3::new(
            self.r(0, 0) * q.x + self.r(1, 0) * q.y + self.r(2, 0) * q.z,
            self.r(0, 1) * q.x + self.r(1, 1) * q.y + self.r(2, 1) * q.z,
            self.r(0, 2) * q.x + self.r(1, 2) * q.y + self.r(2, 2) * q.z,
        )
    }

    /// Rotation block is orthonormal within `tol` and the last row is (0,0,0,1).
    pub fn is_rigid(&self, tol: f64) -> bool {
        if self.0.iter().any(|v| !v.is_finite()) {
            return false;
        }
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..3).map(|k| self.r(k, a) * self.r(k, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if libm::fabs(d - want) > tol {
                    return false;
                }
            }
        }
        let last = [self.r(3, 0), self.r(3, 1), self.r(3, 2), self.r(3, 3)];
        last.iter().zip([0.0, 0.0, 0.0, 1.0]).all(|(v, w)| libm::fabs(v - w) <= tol)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Pixel coordinates (column, row) of a camera-frame point; `None` when
    /// the point is not in front of the camera.
    pub fn project(&self, p: Point3) -> Option<(f64, f64)> {
        if !(p.z > 0.0) {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn back_project(&self, u: f64, v: f64, d: f64) -> Point3 {
        Point3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d)
    }
}

/// Row-major 2D grid; cell (u, v) is column u of row v.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(width: u32, height: u32, data: Vec<T>) -> Self {
        Grid {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Grid::new(width, height, alloc::vec![value; width as usize * height as usize])
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, u: u32, v: u32) -> T {
        self.data[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, value: T) {
        self.data[v as usize * self.width as usize + u as usize] = value;
    }

    fn well_formed(&self) -> bool {
        self.data.len() == self.width as usize * self.height as usize
    }
}

pub type Mask = Grid<bool>;
pub type DepthMap = Grid<f32>;

/// Geometry of a raw segment: already in world coordinates, or a mask over
/// a depth image to be lifted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SegmentGeometry {
    Points(Vec<Point3>),
    Mask { mask: Mask, depth: DepthMap },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSegment {
    pub pixel_count: Option<u32>,
    pub geometry: SegmentGeometry,
    pub f_v: Vec<f32>,
    pub f_c: Vec<f32>,
    pub caption: String,
}

impl RawSegment {
    /// Explicit pixel count, else the number of set mask cells.
    pub fn effective_pixel_count(&self) -> Option<u32> {
        self.pixel_count.or(match &self.geometry {
            SegmentGeometry::Mask { mask, .. } => Some(mask.data.iter().filter(|b| **b).count() as u32),
            SegmentGeometry::Points(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: u32,
    pub pose: Option<Pose>,
    pub intrinsics: Option<Intrinsics>,
    /// Image (width, height) in pixels, when known.
    pub image_size: Option<(u32, u32)>,
    /// Full-frame depth, used for visibility checks.
    pub depth: Option<DepthMap>,
    pub segments: Vec<RawSegment>,
}

impl Frame {
    pub fn new(t: u32) -> Self {
        Frame {
            t,
            pose: None,
            intrinsics: None,
            image_size: None,
            depth: None,
            segments: Vec::new(),
        }
    }

    /// Image size, falling back to the frame depth map's dimensions.
    pub fn resolved_image_size(&self) -> Option<(u32, u32)> {
        self.image_size.or(self.depth.as_ref().map(|d| d.dims()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneBundle {
    pub feature_dim: usize,
    pub frames: Vec<Frame>,
}

impl SceneBundle {
    pub fn frame(&self, t: u32) -> Option<&Frame> {
        self.frames
            .binary_search_by_key(&t, |f| f.t)
            .ok()
            .map(|i| &self.frames[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Points supplied in world coordinates.
    PreLifted,
    /// Points back-projected from a mask and depth grid.
    Lifted,
}

/// A filtered, denoised segment ready for merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub t: u32,
    /// Position of the raw segment within its frame.
    pub index: u32,
    pub points: Vec<Point3>,
    pub voxels: VoxelSet,
    pub f_v: Vec<f32>,
    pub f_c: Vec<f32>,
    pub caption: String,
    pub provenance: Provenance,
}

/// Back-projects every masked pixel with positive depth into world space.
pub fn lift_mask(frame: &Frame, mask: &Mask, depth: &DepthMap) -> Result<Vec<Point3>, IngestError> {
    let pose = frame.pose.ok_or(IngestError::MissingPose { t: frame.t })?;
    let k = frame
        .intrinsics
        .ok_or(IngestError::MissingIntrinsics { t: frame.t })?;
    if mask.dims() != depth.dims() {
        return Err(IngestError::ShapeMismatch {
            t: frame.t,
            mask: mask.dims(),
            depth: depth.dims(),
        });
    }
    for len in [mask.data.len(), depth.data.len()] {
        if len != mask.width as usize * mask.height as usize {
            return Err(IngestError::BadGrid {
                t: frame.t,
                expected: mask.width as usize * mask.height as usize,
                got: len,
            });
        }
    }
    let mut out = Vec::new();
    for v in 0..mask.height {
        for u in 0..mask.width {
            let d = depth.get(u, v) as f64;
            if mask.get(u, v) && d > 0.0 && d.is_finite() {
                out.push(pose.apply(k.back_project(u as f64, v as f64, d)));
            }
        }
    }
    Ok(out)
}

/// Share of a mask's boundary pixels that lie on the image border.
///
/// A boundary pixel is a set pixel with a 4-neighbor that is unset or
/// outside the image. Returns 0 for an empty mask.
pub fn border_fraction(mask: &Mask) -> f64 {
    let (w, h) = mask.dims();
    let mut boundary = 0usize;
    let mut on_border = 0usize;
    for v in 0..h {
        for u in 0..w {
            if !mask.get(u, v) {
                continue;
            }
            let edge = u == 0 || v == 0 || u + 1 == w || v + 1 == h;
            let interior_gap = !edge
                && (!mask.get(u - 1, v) || !mask.get(u + 1, v) || !mask.get(u, v - 1) || !mask.get(u, v + 1));
            if edge || interior_gap {
                boundary += 1;
            }
            if edge {
                on_border += 1;
            }
        }
    }
    if boundary == 0 {
        0.0
    } else {
        on_border as f64 / boundary as f64
    }
}

/// Why a raw segment did not become a [`Segment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DropCounts {
    pub too_few_pixels: usize,
    pub marginal: usize,
    pub too_few_points: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.too_few_pixels + self.marginal + self.too_few_points
    }
}

fn check_features(t: u32, index: usize, seg: &RawSegment, dim: usize) -> Result<(), IngestError> {
    for f in [&seg.f_v, &seg.f_c] {
        if f.len() != dim {
            return Err(IngestError::BadFeatureDim {
                t,
                index,
                expected: dim,
                got: f.len(),
            });
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(IngestError::NonFiniteFeature { t, index });
        }
    }
    Ok(())
}

/// Validates the bundle, lifts masks, applies the pixel, marginal and point
/// filters and denoises each segment, keeping its largest density cluster.
pub fn filter_and_build(bundle: &SceneBundle, cfg: &PipelineConfig) -> Result<Vec<Segment>, IngestError> {
    filter_and_build_counted(bundle, cfg).map(|(s, _)| s)
}

pub fn filter_and_build_counted(
    bundle: &SceneBundle,
    cfg: &PipelineConfig,
) -> Result<(Vec<Segment>, DropCounts), IngestError> {
    let mut out = Vec::new();
    let mut drops = DropCounts::default();
    let mut prev: Option<u32> = None;
    for frame in &bundle.frames {
        if let Some(p) = prev {
            if frame.t <= p {
                return Err(IngestError::FramesOutOfOrder { prev: p, t: frame.t });
            }
        }
        prev = Some(frame.t);
        if let Some(pose) = &frame.pose {
            if !pose.is_rigid(POSE_ORTHONORMAL_TOL) {
                return Err(IngestError::BadPose { t: frame.t });
            }
        }
        if let Some(d) = &frame.depth {
            if !d.well_formed() {
                return Err(IngestError::BadGrid {
                    t: frame.t,
                    expected: d.width as usize * d.height as usize,
                    got: d.data.len(),
                });
            }
        }
        for (index, raw) in frame.segments.iter().enumerate() {
            check_features(frame.t, index, raw, bundle.feature_dim)?;
            if raw
                .effective_pixel_count()
                .is_some_and(|n| n < cfg.min_pixels)
            {
                drops.too_few_pixels += 1;
                continue;
            }
            let (points, provenance) = match &raw.geometry {
                SegmentGeometry::Points(p) => {
                    if p.iter().any(|q| !q.is_finite()) {
                        return Err(IngestError::NonFinitePoint { t: frame.t, index });
                    }
                    (p.clone(), Provenance::PreLifted)
                }
                SegmentGeometry::Mask { mask, depth } => {
                    let lifted = lift_mask(frame, mask, depth)?;
                    if border_fraction(mask) > cfg.marginal_border_fraction {
                        drops.marginal += 1;
                        continue;
                    }
                    (lifted, Provenance::Lifted)
                }
            };
            let points = if points.is_empty() {
                points
            } else {
                let labels = geometry::dbscan_points(&points, cfg.denoise_eps, cfg.denoise_min_pts as usize)?;
                geometry::largest_cluster(&points, &labels)
            };
            if points.len() < cfg.min_points as usize {
                drops.too_few_points += 1;
                continue;
            }
            let voxels = geometry::voxelize(&points, cfg.voxel_size)?;
            out.push(Segment {
                id: out.len() as u32,
                t: frame.t,
                index: index as u32,
                points,
                voxels,
                f_v: raw.f_v.clone(),
                f_c: raw.f_c.clone(),
                caption: raw.caption.clone(),
                provenance,
            });
        }
    }
    Ok((out, drops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn unit_k() -> Intrinsics {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    fn posed_frame() -> Frame {
        Frame {
            pose: Some(Pose::IDENTITY),
            intrinsics: Some(unit_k()),
            ..Frame::new(0)
        }
    }

    #[test]
    fn lift_principal_ray_and_offset_pixel() {
        let f = posed_frame();
        let mask = Grid::new(2, 1, vec![true, false]);
        let depth = Grid::new(2, 1, vec![2.0, 2.0]);
        assert_eq!(lift_mask(&f, &mask, &depth).unwrap(), vec![Point3::new(0.0, 0.0, 2.0)]);

        let mask = Grid::new(2, 1, vec![false, true]);
        assert_eq!(lift_mask(&f, &mask, &depth).unwrap(), vec![Point3::new(2.0, 0.0, 2.0)]);
    }

    #[test]
    fn lift_skips_zero_depth_and_checks_inputs() {
        let f = posed_frame();
        let mask = Grid::filled(3, 3, true);
        assert!(lift_mask(&f, &mask, &Grid::filled(3, 3, 0.0)).unwrap().is_empty());
        assert!(matches!(
            lift_mask(&f, &mask, &Grid::filled(2, 3, 1.0)),
            Err(IngestError::ShapeMismatch { .. })
        ));
        let bare = Frame::new(4);
        assert_eq!(
            lift_mask(&bare, &mask, &Grid::filled(3, 3, 1.0)),
            Err(IngestError::MissingPose { t: 4 })
        );
    }

    #[test]
    fn lift_applies_pose_translation_and_rotation() {
        // 90 degrees about z, then shift by (1, 2, 3)
        let pose = Pose([
            0.0, -1.0, 0.0, 1.0, //
            1.0, 0.0, 0.0, 2.0, //
            0.0, 0.0, 1.0, 3.0, //
            0.0, 0.0, 0.0, 1.0,
        ]);
        assert!(pose.is_rigid(POSE_ORTHONORMAL_TOL));
        let f = Frame {
            pose: Some(pose),
            ..posed_frame()
        };
        let pts = lift_mask(&f, &Grid::new(2, 1, vec![false, true]), &Grid::new(2, 1, vec![0.0, 2.0])).unwrap();
        // camera point (2, 0, 2) rotates to (0, 2, 2)
        assert_eq!(pts, vec![Point3::new(1.0, 4.0, 5.0)]);
        assert_eq!(pose.apply_inverse(pts[0]), Point3::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn border_fraction_cases() {
        let mut m = Grid::filled(5, 5, false);
        m.set(2, 2, true);
        assert_eq!(border_fraction(&m), 0.0);
        let full = Grid::filled(4, 4, true);
        assert_eq!(border_fraction(&full), 1.0);
        // 2x4 strip on the left edge: of its 8 boundary pixels, the two
        // facing right from rows 1 and 2 are off the border
        let mut strip = Grid::filled(6, 4, false);
        for v in 0..4 {
            strip.set(0, v, true);
            strip.set(1, v, true);
        }
        assert_eq!(border_fraction(&strip), 0.75);
    }

    fn cube_points(n_side: usize, spacing: f64, origin: Point3) -> Vec<Point3> {
        let mut v = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                for k in 0..n_side {
                    v.push(origin + Point3::new(i as f64, j as f64, k as f64) * spacing);
                }
            }
        }
        v
    }

    fn raw(points: Vec<Point3>, pixels: Option<u32>) -> RawSegment {
        RawSegment {
            pixel_count: pixels,
            geometry: SegmentGeometry::Points(points),
            f_v: vec![1.0, 0.0],
            f_c: vec![0.0, 1.0],
            caption: String::from("thing"),
        }
    }

    #[test]
    fn size_filters() {
        let cfg = PipelineConfig::default();
        let mut f = Frame::new(0);
        f.segments.push(raw(cube_points(4, 0.01, Point3::ZERO), Some(24)));
        f.segments.push(raw(cube_points(4, 0.01, Point3::ZERO), Some(25)));
        // 49 dense points survive denoising but fail the point filter
        f.segments.push(raw(cube_points(4, 0.01, Point3::ZERO)[..49].to_vec(), None));
        let bundle = SceneBundle {
            feature_dim: 2,
            frames: vec![f],
        };
        let (segs, drops) = filter_and_build_counted(&bundle, &cfg).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].index, 1);
        assert_eq!(segs[0].points.len(), 64);
        assert_eq!(drops.too_few_pixels, 1);
        assert_eq!(drops.too_few_points, 1);
        assert_eq!(segs[0].voxels, geometry::voxelize(&segs[0].points, cfg.voxel_size).unwrap());
    }

    #[test]
    fn denoise_keeps_largest_cluster() {
        let cfg = PipelineConfig::default();
        let mut pts = cube_points(4, 0.01, Point3::ZERO);
        pts.push(Point3::new(5.0, 5.0, 5.0));
        let mut f = Frame::new(0);
        f.segments.push(raw(pts, None));
        let segs = filter_and_build(
            &SceneBundle {
                feature_dim: 2,
                frames: vec![f],
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(segs[0].points.len(), 64);
    }

    #[test]
    fn empty_bundle_and_bad_dims() {
        let cfg = PipelineConfig::default();
        assert!(filter_and_build(&SceneBundle::default(), &cfg).unwrap().is_empty());
        let mut f = Frame::new(3);
        let mut s = raw(cube_points(4, 0.01, Point3::ZERO), None);
        s.f_c = vec![1.0];
        f.segments.push(s);
        let err = filter_and_build(
            &SceneBundle {
                feature_dim: 2,
                frames: vec![f],
            },
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::BadFeatureDim { t: 3, got: 1, .. }));
    }

    #[test]
    fn ids_follow_frame_order() {
        let cfg = PipelineConfig::default();
        let frames = (0..3)
            .map(|t| {
                let mut f = Frame::new(t * 10);
                for k in 0..2 {
                    f.segments
                        .push(raw(cube_points(4, 0.01, Point3::new(k as f64, 0.0, 0.0)), None));
                }
                f
            })
            .collect();
        let segs = filter_and_build(
            &SceneBundle {
                feature_dim: 2,
                frames,
            },
            &cfg,
        )
        .unwrap();
        let order: Vec<(u32, u32, u32)> = segs.iter().map(|s| (s.id, s.t, s.index)).collect();
        assert_eq!(
            order,
            vec![(0, 0, 0), (1, 0, 1), (2, 10, 0), (3, 10, 1), (4, 20, 0), (5, 20, 1)]
        );
    }

    #[test]
    fn marginal_mask_dropped_only_with_grids() {
        let cfg = PipelineConfig::default();
        let mut f = posed_frame();
        f.intrinsics = Some(Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 10.0,
            cy: 10.0,
        });
        // 8x8 block in the corner of a 20x20 image: 15 boundary pixels on the
        // border out of 15 + 13 total
        let mut mask = Grid::filled(20, 20, false);
        let mut centered = Grid::filled(20, 20, false);
        for v in 0..8 {
            for u in 0..8 {
                mask.set(u, v, true);
                centered.set(u + 6, v + 6, true);
            }
        }
        let depth = Grid::filled(20, 20, 1.0f32);
        for m in [mask.clone(), centered] {
            f.segments.push(RawSegment {
                pixel_count: None,
                geometry: SegmentGeometry::Mask {
                    mask: m,
                    depth: depth.clone(),
                },
                f_v: vec![1.0, 0.0],
                f_c: vec![1.0, 0.0],
                caption: String::from("x"),
            });
        }
        assert!(border_fraction(&mask) > 0.4);
        let (segs, drops) = filter_and_build_counted(
            &SceneBundle {
                feature_dim: 2,
                frames: vec![f],
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(drops.marginal, 1);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].index, 1);
        assert_eq!(segs[0].provenance, Provenance::Lifted);
    }
}

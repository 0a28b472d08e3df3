//! Seeded synthetic scenes with ground truth.
//!
//! Objects are boxes, rods or plates resting on the floor of a square room,
//! each with a unique caption. Every frame observes a random subset of the
//! objects as noisy surface samples; some observations are cut into slabs
//! (over-segmentation) and a fraction of extra segments covers two objects
//! at once (planted under-segments).

use std::collections::BTreeSet;

use ograph_core::embed::{self, HashEmbedder};
use ograph_core::ingest::{Frame, RawSegment, SceneBundle, SegmentGeometry};
use ograph_core::{Aabb, Point3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CAPTIONS: &[&str] = &[
    "chair", "table", "lamp", "sofa", "bookshelf", "monitor", "plant", "vase", "cabinet", "bed", "desk", "stool",
    "television", "piano", "mirror", "radiator", "curtain", "guitar", "bench", "dresser", "fridge", "oven", "sink",
    "toilet", "bathtub", "printer", "speaker", "pillow", "basket", "umbrella", "ladder", "broom", "suitcase", "fan",
    "heater", "clock",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Rod,
    Plate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: u32,
    pub shapes: Vec<Shape>,
    pub frames: u32,
    /// Surface samples per square meter of each observation.
    pub surface_density: f64,
    pub observe_prob: f64,
    pub split_prob: f64,
    pub max_splits: u32,
    /// Standard deviation of per-point position noise, meters.
    pub jitter: f64,
    /// Standard deviation of per-dimension feature noise before
    /// normalization.
    pub feature_noise: f64,
    /// Planted under-segments per regular segment.
    pub under_segment_rate: f64,
    pub feature_dim: usize,
    /// Side of the square room, meters.
    pub room: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            objects: 8,
            shapes: vec![Shape::Box, Shape::Rod, Shape::Plate],
            frames: 6,
            surface_density: 6000.0,
            observe_prob: 0.8,
            split_prob: 0.5,
            max_splits: 3,
            jitter: 0.003,
            feature_noise: 0.05,
            under_segment_rate: 0.1,
            feature_dim: 32,
            room: 6.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("bad spec: {0}")]
    BadSpec(String),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: &str| Err(SpecError::BadSpec(m.into()));
        if self.objects as usize > CAPTIONS.len() {
            return bad("more objects than distinct captions");
        }
        if self.objects > 0 && self.shapes.is_empty() {
            return bad("shapes must not be empty");
        }
        if self.objects > 0 && self.frames == 0 {
            return bad("frames must be positive");
        }
        if !(0.0..=1.0).contains(&self.observe_prob) || !(0.0..=1.0).contains(&self.split_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.under_segment_rate >= 0.0 && self.under_segment_rate <= 1.0) {
            return bad("under_segment_rate must lie in [0, 1]");
        }
        if self.max_splits == 0 {
            return bad("max_splits must be at least 1");
        }
        if !(self.jitter >= 0.0 && self.feature_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.surface_density >= 100.0 && self.surface_density.is_finite()) {
            return bad("surface_density must be at least 100 points per square meter");
        }
        if !(self.room > 0.0 && self.room.is_finite()) {
            return bad("room must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub id: u32,
    pub caption: String,
    pub shape: Shape,
    pub center: Point3,
    pub size: Point3,
}

impl GtObject {
    pub fn aabb(&self) -> Aabb {
        Aabb::from_center_half(self.center, self.size * 0.5)
    }
}

/// Ground truth for one raw segment, addressed by frame and position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtSegment {
    pub t: u32,
    pub index: u32,
    /// Objects the segment covers; two for a planted under-segment.
    pub objects: Vec<u32>,
    pub under_segment: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub objects: Vec<GtObject>,
    pub segments: Vec<GtSegment>,
}

impl GroundTruth {
    pub fn segment(&self, t: u32, index: u32) -> Option<&GtSegment> {
        self.segments.iter().find(|s| s.t == t && s.index == index)
    }
}

fn random_size(shape: Shape, rng: &mut ChaCha8Rng) -> Point3 {
    match shape {
        Shape::Box => Point3::new(rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)),
        Shape::Rod => {
            let long = rng.random_range(0.6..1.2);
            let thin = rng.random_range(0.05..0.1);
            match rng.random_range(0..3) {
                0 => Point3::new(long, thin, thin),
                1 => Point3::new(thin, long, thin),
                _ => Point3::new(thin, thin, long),
            }
        }
        Shape::Plate => {
            let (a, b) = (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0));
            let thin = rng.random_range(0.02..0.05);
            if rng.random_bool(0.5) {
                Point3::new(a, b, thin)
            } else {
                Point3::new(a, thin, b)
            }
        }
    }
}

/// Uniform samples on the surface of an axis-aligned box.
pub fn surface_points(center: Point3, size: Point3, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let h = size * 0.5;
    let areas = [size.y * size.z, size.x * size.z, size.x * size.y];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && pick >= 2.0 * areas[axis] {
                pick -= 2.0 * areas[axis];
                axis += 1;
            }
            let sign = if pick < areas[axis] { -1.0 } else { 1.0 };
            let mut p = [
                rng.random_range(-h.x..=h.x),
                rng.random_range(-h.y..=h.y),
                rng.random_range(-h.z..=h.z),
            ];
            p[axis] = sign * h.axis(axis);
            center + Point3::from_array(p)
        })
        .collect()
}

fn surface_area(size: Point3) -> f64 {
    2.0 * (size.x * size.y + size.y * size.z + size.x * size.z)
}

/// Closest pair of points between two floor footprints.
fn footprint_link(a: &GtObject, b: &GtObject) -> (Point3, Point3) {
    let clamp = |p: Point3, o: &GtObject| {
        let h = o.size * 0.5;
        Point3::new(p.x.clamp(o.center.x - h.x, o.center.x + h.x), p.y.clamp(o.center.y - h.y, o.center.y + h.y), 0.0)
    };
    // alternating projection between two convex sets converges to a closest pair
    let mut pa = clamp(b.center, a);
    let mut pb = clamp(pa, b);
    for _ in 0..8 {
        pa = clamp(pb, a);
        pb = clamp(pa, b);
    }
    (pa, pb)
}

fn footprint_gap(a: &GtObject, b: &GtObject) -> f64 {
    let (pa, pb) = footprint_link(a, b);
    pa.distance(pb)
}

const STRIP_WIDTH: f64 = 0.1;

/// Floor samples on a strip joining the footprints of `a` and `b`.
fn floor_strip(a: &GtObject, b: &GtObject, density: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let (pa, pb) = footprint_link(a, b);
    let d = pb - pa;
    let len = d.norm();
    if len == 0.0 {
        return Vec::new();
    }
    let side = Point3::new(-d.y / len, d.x / len, 0.0);
    let n = (len * STRIP_WIDTH * density).ceil() as usize;
    (0..n)
        .map(|_| pa + d * rng.random_range(0.0..=1.0) + side * rng.random_range(-STRIP_WIDTH / 2.0..=STRIP_WIDTH / 2.0))
        .collect()
}

/// Uniform samples inside an axis-aligned box.
pub fn volume_points(center: Point3, size: Point3, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let h = size * 0.5;
    (0..n)
        .map(|_| {
            center
                + Point3::new(
                    rng.random_range(-h.x..=h.x),
                    rng.random_range(-h.y..=h.y),
                    rng.random_range(-h.z..=h.z),
                )
        })
        .collect()
}

/// A seeded elongated object (rod or plate) with aspect ratio at least 4,
/// sampled on its surface.
pub fn elongated_object(rng: &mut ChaCha8Rng, n: usize) -> (Shape, Point3, Vec<Point3>) {
    let shape = if rng.random_bool(0.5) { Shape::Rod } else { Shape::Plate };
    let size = random_size(shape, rng);
    debug_assert!(size.max_component() >= 4.0 * size.x.min(size.y).min(size.z));
    (shape, size, surface_points(Point3::ZERO, size, n, rng))
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<GtObject>, SpecError> {
    let mut names: Vec<usize> = (0..CAPTIONS.len()).collect();
    names.shuffle(rng);
    let mut objects: Vec<GtObject> = Vec::new();
    for id in 0..spec.objects {
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let size = random_size(shape, rng);
        let mut placed = None;
        for _ in 0..1000 {
            let h = size * 0.5;
            if h.x * 2.0 >= spec.room || h.y * 2.0 >= spec.room {
                break;
            }
            let c = Point3::new(
                rng.random_range(h.x..spec.room - h.x),
                rng.random_range(h.y..spec.room - h.y),
                h.z,
            );
            let b = Aabb::from_center_half(c, h).expanded(0.15);
            if objects.iter().all(|o| !o.aabb().intersects(&b)) {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| SpecError::BadSpec("room too small for the requested objects".into()))?;
        objects.push(GtObject {
            id,
            caption: CAPTIONS[names[id as usize]].to_string(),
            shape,
            center,
            size,
        });
    }
    Ok(objects)
}

struct Noise {
    point: Option<Normal<f64>>,
    feature: Option<Normal<f64>>,
}

impl Noise {
    fn jitter(&self, pts: &mut [Point3], rng: &mut ChaCha8Rng) {
        if let Some(n) = &self.point {
            for p in pts {
                *p = *p + Point3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            }
        }
    }

    fn feature(&self, base: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let noisy: Vec<f32> = match &self.feature {
            Some(n) => base.iter().map(|x| x + n.sample(rng) as f32).collect(),
            None => base.to_vec(),
        };
        embed::normalized(&noisy).unwrap_or_else(|| base.to_vec())
    }
}

/// Splits `pts` into `k` slabs along the longest axis of `size`.
fn slabs(pts: Vec<Point3>, center: Point3, size: Point3, k: usize) -> Vec<Vec<Point3>> {
    let axis = (0..3).max_by(|a, b| size.axis(*a).total_cmp(&size.axis(*b))).expect("three axes");
    let lo = center.axis(axis) - size.axis(axis) / 2.0;
    let mut out = vec![Vec::new(); k];
    for p in pts {
        let f = ((p.axis(axis) - lo) / size.axis(axis) * k as f64).floor();
        out[(f.max(0.0) as usize).min(k - 1)].push(p);
    }
    out
}

/// Builds the bundle and its ground truth. Same spec, same output.
pub fn generate(spec: &SceneSpec) -> Result<(SceneBundle, GroundTruth), SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects = place_objects(spec, &mut rng)?;
    let embedder = HashEmbedder::new(spec.feature_dim);
    let visual: Vec<Vec<f32>> = objects
        .iter()
        .map(|o| embedder.embed_text(&o.caption).expect("non-empty caption"))
        .collect();
    let caption_base: Vec<Vec<f32>> = objects
        .iter()
        .map(|o| embedder.embed_text(&format!("a photo of a {}", o.caption)).expect("non-empty caption"))
        .collect();
    let noise = Noise {
        point: (spec.jitter > 0.0).then(|| Normal::new(0.0, spec.jitter).expect("valid sigma")),
        feature: (spec.feature_noise > 0.0).then(|| Normal::new(0.0, spec.feature_noise).expect("valid sigma")),
    };
    let count = |o: &GtObject| (surface_area(o.size) * spec.surface_density).ceil() as usize;

    // which objects each frame sees; every object is seen at least once
    let mut seen: Vec<Vec<u32>> = (0..spec.frames)
        .map(|_| objects.iter().filter(|_| rng.random_bool(spec.observe_prob)).map(|o| o.id).collect())
        .collect();
    for o in &objects {
        if !seen.iter().any(|s| s.contains(&o.id)) {
            let t = rng.random_range(0..spec.frames as usize);
            seen[t].push(o.id);
            seen[t].sort_unstable();
        }
    }

    let mut frames: Vec<Frame> = (0..spec.frames).map(Frame::new).collect();
    let mut truth = GroundTruth {
        objects: objects.clone(),
        segments: Vec::new(),
    };
    let mut regular = 0usize;
    for (t, ids) in seen.iter().enumerate() {
        for &id in ids {
            let o = &objects[id as usize];
            let mut pts = surface_points(o.center, o.size, count(o), &mut rng);
            noise.jitter(&mut pts, &mut rng);
            let k = if spec.max_splits > 1 && rng.random_bool(spec.split_prob) {
                rng.random_range(2..=spec.max_splits) as usize
            } else {
                1
            };
            for piece in slabs(pts, o.center, o.size, k) {
                let frame = &mut frames[t];
                truth.segments.push(GtSegment {
                    t: t as u32,
                    index: frame.segments.len() as u32,
                    objects: vec![id],
                    under_segment: false,
                });
                frame.segments.push(RawSegment {
                    pixel_count: None,
                    geometry: SegmentGeometry::Points(piece),
                    f_v: noise.feature(&visual[id as usize], &mut rng),
                    f_c: noise.feature(&caption_base[id as usize], &mut rng),
                    caption: o.caption.clone(),
                });
                regular += 1;
            }
        }
    }

    let planted = if objects.len() >= 2 && spec.under_segment_rate > 0.0 {
        ((spec.under_segment_rate * regular as f64).round() as usize).max(1)
    } else {
        0
    };
    let mut used = BTreeSet::new();
    for _ in 0..planted {
        // an object and one of its two nearest neighbors, described by the first
        let a = rng.random_range(0..objects.len());
        let mut near: Vec<usize> = (0..objects.len()).filter(|&j| j != a).collect();
        near.sort_by(|&i, &j| {
            let d = |k: usize| footprint_gap(&objects[a], &objects[k]);
            d(i).total_cmp(&d(j)).then(i.cmp(&j))
        });
        let b = near[rng.random_range(0..near.len().min(2))];
        let t = rng.random_range(0..spec.frames) as usize;
        if !used.insert((a.min(b), a.max(b), t)) {
            continue;
        }
        let (oa, ob) = (&objects[a], &objects[b]);
        let mut pts = surface_points(oa.center, oa.size, count(oa), &mut rng);
        pts.extend(surface_points(ob.center, ob.size, count(ob), &mut rng));
        // the mask bleeds across the floor between the two objects
        pts.extend(floor_strip(oa, ob, spec.surface_density, &mut rng));
        noise.jitter(&mut pts, &mut rng);
        let frame = &mut frames[t];
        truth.segments.push(GtSegment {
            t: t as u32,
            index: frame.segments.len() as u32,
            objects: vec![oa.id, ob.id],
            under_segment: true,
        });
        frame.segments.push(RawSegment {
            pixel_count: None,
            geometry: SegmentGeometry::Points(pts),
            f_v: noise.feature(&visual[a], &mut rng),
            f_c: noise.feature(&caption_base[a], &mut rng),
            caption: oa.caption.clone(),
        });
    }

    Ok((
        SceneBundle {
            feature_dim: spec.feature_dim,
            frames,
        },
        truth,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SceneSpec {
            seed: 7,
            ..SceneSpec::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&SceneSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(generate(&SceneSpec { seed: 7, ..SceneSpec::default() }).unwrap(), other);
    }

    #[test]
    fn zero_objects_gives_empty_frames() {
        let (b, gt) = generate(&SceneSpec {
            objects: 0,
            ..SceneSpec::default()
        })
        .unwrap();
        assert!(b.frames.iter().all(|f| f.segments.is_empty()));
        assert!(gt.segments.is_empty());
    }

    #[test]
    fn truth_marks_planted_under_segments() {
        let spec = SceneSpec {
            objects: 10,
            under_segment_rate: 0.2,
            seed: 3,
            ..SceneSpec::default()
        };
        let (b, gt) = generate(&spec).unwrap();
        let total: usize = b.frames.iter().map(|f| f.segments.len()).sum();
        assert_eq!(total, gt.segments.len());
        let under: Vec<_> = gt.segments.iter().filter(|s| s.under_segment).collect();
        let regular = total - under.len();
        assert!(!under.is_empty());
        assert!(under.len() as f64 <= 0.2 * regular as f64 + 1.0);
        for s in under {
            assert_eq!(s.objects.len(), 2);
            assert_ne!(s.objects[0], s.objects[1]);
        }
    }

    #[test]
    fn objects_do_not_overlap_and_captions_are_unique() {
        let (_, gt) = generate(&SceneSpec {
            objects: 15,
            seed: 11,
            ..SceneSpec::default()
        })
        .unwrap();
        let captions: BTreeSet<_> = gt.objects.iter().map(|o| o.caption.clone()).collect();
        assert_eq!(captions.len(), 15);
        for (i, a) in gt.objects.iter().enumerate() {
            for b in &gt.objects[i + 1..] {
                assert!(!a.aabb().intersects(&b.aabb()));
            }
        }
    }

    #[test]
    fn elongated_objects_have_aspect_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (_, size, pts) = elongated_object(&mut rng, 100);
            let min = size.x.min(size.y).min(size.z);
            assert!(size.max_component() >= 4.0 * min);
            assert_eq!(pts.len(), 100);
        }
    }

    #[test]
    fn bad_specs_rejected() {
        for spec in [
            SceneSpec {
                objects: 100,
                ..SceneSpec::default()
            },
            SceneSpec {
                observe_prob: 1.5,
                ..SceneSpec::default()
            },
            SceneSpec {
                frames: 0,
                ..SceneSpec::default()
            },
        ] {
            assert!(generate(&spec).is_err());
        }
    }
}

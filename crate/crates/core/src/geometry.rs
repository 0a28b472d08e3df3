//! Point-cloud primitives: points, axis-aligned boxes, voxel hashing and
//! density-based denoising.

use alloc::vec::Vec;
use core::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{self, Labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("voxel resolution must be positive")]
    NonPositiveResolution,
    #[error("contained voxel set is empty")]
    EmptyContained,
    #[error("clustering radius must be positive")]
    NonPositiveEps,
    #[error("minimum cluster size must be at least 1")]
    InvalidMinPts,
}

/// A point in world coordinates, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub const fn splat(v: f64) -> Self {
        Point3 { x: v, y: v, z: v }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Component by axis index (0 = x, 1 = y, 2 = z).
    pub fn axis(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        libm::sqrt(self.norm_squared())
    }

    pub fn distance(self, o: Point3) -> f64 {
        (self - o).norm()
    }

    pub fn distance_squared(self, o: Point3) -> f64 {
        (self - o).norm_squared()
    }

    pub fn min(self, o: Point3) -> Point3 {
        Point3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Point3) -> Point3 {
        Point3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn abs(self) -> Point3 {
        Point3::new(libm::fabs(self.x), libm::fabs(self.y), libm::fabs(self.z))
    }

    /// Componentwise product.
    pub fn mul_elem(self, o: Point3) -> Point3 {
        Point3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn max_component(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn min_component(self) -> f64 {
        self.x.min(self.y).min(self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Point3 {
    type Output = Point3;
    fn div(self, s: f64) -> Point3 {
        Point3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// Ordered list of points.
pub type PointCloud = Vec<Point3>;

/// Arithmetic mean of a non-empty cloud.
pub fn centroid(cloud: &[Point3]) -> Result<Point3, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let sum = cloud.iter().fold(Point3::ZERO, |acc, &p| acc + p);
    Ok(sum / cloud.len() as f64)
}

/// Axis-aligned box with `min <= max` componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        debug_assert!(min.x <= max.x && min.y <= max.y && min.z <= max.z);
        Aabb { min, max }
    }

    pub fn from_center_half(center: Point3, half: Point3) -> Self {
        Aabb::new(center - half, center + half)
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Point3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    /// Closed-box membership.
    pub fn contains(&self, p: Point3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// `other` lies inside `self` grown by `margin` on every face.
    pub fn contains_box(&self, other: &Aabb, margin: f64) -> bool {
        other.min.x >= self.min.x - margin
            && other.min.y >= self.min.y - margin
            && other.min.z >= self.min.z - margin
            && other.max.x <= self.max.x + margin
            && other.max.y <= self.max.y + margin
            && other.max.z <= self.max.z + margin
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        self.min.x <= other.max.x
            && other.min.x <= self.max.x
            && self.min.y <= other.max.y
            && other.min.y <= self.max.y
            && self.min.z <= other.max.z
            && other.min.z <= self.max.z
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb::new(self.min.min(other.min), self.max.max(other.max))
    }

    pub fn expanded(&self, by: f64) -> Aabb {
        Aabb::new(self.min - Point3::splat(by), self.max + Point3::splat(by))
    }

    pub fn translated(&self, by: Point3) -> Aabb {
        Aabb::new(self.min + by, self.max + by)
    }
}

/// Componentwise bounds of a non-empty cloud.
pub fn aabb_of(cloud: &[Point3]) -> Result<Aabb, GeometryError> {
    let (first, rest) = cloud.split_first().ok_or(GeometryError::EmptyCloud)?;
    let (min, max) = rest
        .iter()
        .fold((*first, *first), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    Ok(Aabb::new(min, max))
}

/// Integer cell index at a fixed resolution: `floor(coordinate / v)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoxelKey {
    pub i: i64,
    pub j: i64,
    pub k: i64,
}

impl VoxelKey {
    pub const fn new(i: i64, j: i64, k: i64) -> Self {
        VoxelKey { i, j, k }
    }

    pub fn of(p: Point3, v: f64) -> Self {
        VoxelKey {
            i: libm::floor(p.x / v) as i64,
            j: libm::floor(p.y / v) as i64,
            k: libm::floor(p.z / v) as i64,
        }
    }

    pub fn offset(self, di: i64, dj: i64, dk: i64) -> Self {
        VoxelKey::new(self.i + di, self.j + dj, self.k + dk)
    }
}

/// Sorted, duplicate-free set of voxel keys.
///
/// Sorted storage keeps intersections linear and iteration deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VoxelSet(Vec<VoxelKey>);

impl VoxelSet {
    pub fn new() -> Self {
        VoxelSet(Vec::new())
    }

    pub fn from_keys(mut keys: Vec<VoxelKey>) -> Self {
        keys.sort_unstable();
        keys.dedup();
        VoxelSet(keys)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keys(&self) -> &[VoxelKey] {
        &self.0
    }

    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.0.binary_search(key).is_ok()
    }

    pub fn is_subset(&self, other: &VoxelSet) -> bool {
        self.intersection_len(other) == self.len()
    }

    pub fn intersection_len(&self, other: &VoxelSet) -> usize {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                core::cmp::Ordering::Less => i += 1,
                core::cmp::Ordering::Greater => j += 1,
                core::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn union(&self, other: &VoxelSet) -> VoxelSet {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                core::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                core::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                core::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        VoxelSet(out)
    }
}

/// Occupied voxel keys of `cloud` at resolution `v`.
pub fn voxelize(cloud: &[Point3], v: f64) -> Result<VoxelSet, GeometryError> {
    if !(v > 0.0) {
        return Err(GeometryError::NonPositiveResolution);
    }
    Ok(VoxelSet::from_keys(
        cloud.iter().map(|&p| VoxelKey::of(p, v)).collect(),
    ))
}

/// `|a ∩ b| / |a ∪ b|`, defined as 0 when both sets are empty.
pub fn voxel_iou(a: &VoxelSet, b: &VoxelSet) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of `contained` that lies inside `container`.
pub fn voxel_ior(container: &VoxelSet, contained: &VoxelSet) -> Result<f64, GeometryError> {
    if contained.is_empty() {
        return Err(GeometryError::EmptyContained);
    }
    Ok(container.intersection_len(contained) as f64 / contained.len() as f64)
}

/// Uniform hash grid over a point cloud for fixed-radius neighbor queries.
#[derive(Debug, Clone)]
pub struct PointGrid<'a> {
    points: &'a [Point3],
    cell: f64,
    entries: Vec<(VoxelKey, u32)>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Point3], cell: f64) -> Result<Self, GeometryError> {
        if !(cell > 0.0) {
            return Err(GeometryError::NonPositiveResolution);
        }
        let mut entries: Vec<(VoxelKey, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, &p)| (VoxelKey::of(p, cell), i as u32))
            .collect();
        entries.sort_unstable();
        Ok(PointGrid {
            points,
            cell,
            entries,
        })
    }

    pub fn points(&self) -> &'a [Point3] {
        self.points
    }

    /// Entries with keys in `lo..=hi`; contiguous because keys sort
    /// lexicographically.
    fn key_range(&self, lo: VoxelKey, hi: VoxelKey) -> &[(VoxelKey, u32)] {
        let a = self.entries.partition_point(|e| e.0 < lo);
        let b = a + self.entries[a..].partition_point(|e| e.0 <= hi);
        &self.entries[a..b]
    }

    fn cell_span(&self, lo: f64, hi: f64) -> (i64, i64) {
        (libm::floor(lo / self.cell) as i64, libm::floor(hi / self.cell) as i64)
    }

    /// Visits every grid entry in the cells overlapped by the box of
    /// half-width `radius` around `p`; stops early when `f` returns true.
    fn scan(&self, p: Point3, radius: f64, mut f: impl FnMut(usize) -> bool) -> bool {
        let (i0, i1) = self.cell_span(p.x - radius, p.x + radius);
        let (j0, j1) = self.cell_span(p.y - radius, p.y + radius);
        let (k0, k1) = self.cell_span(p.z - radius, p.z + radius);
        for i in i0..=i1 {
            for j in j0..=j1 {
                for &(_, idx) in self.key_range(VoxelKey::new(i, j, k0), VoxelKey::new(i, j, k1)) {
                    if f(idx as usize) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Calls `f` with the index of every point within `radius` of `p`
    /// (inclusive). Indices arrive grouped by cell, not globally sorted.
    pub fn for_each_within(&self, p: Point3, radius: f64, mut f: impl FnMut(usize)) {
        let r2 = radius * radius;
        self.scan(p, radius, |idx| {
            if self.points[idx].distance_squared(p) <= r2 {
                f(idx);
            }
            false
        });
    }

    /// True if any point lies within `radius` of `p`.
    pub fn any_within(&self, p: Point3, radius: f64) -> bool {
        let r2 = radius * radius;
        self.scan(p, radius, |idx| self.points[idx].distance_squared(p) <= r2)
    }
}

/// Density clustering of a point cloud with Euclidean radius `eps`.
///
/// A point's neighborhood includes itself, so `min_pts = 1` makes every
/// point a core point.
pub fn dbscan_points(cloud: &[Point3], eps: f64, min_pts: usize) -> Result<Labels, GeometryError> {
    if !(eps > 0.0) {
        return Err(GeometryError::NonPositiveEps);
    }
    if min_pts == 0 {
        return Err(GeometryError::InvalidMinPts);
    }
    let grid = PointGrid::new(cloud, eps)?;
    Ok(cluster::dbscan(
        cloud.len(),
        min_pts,
        |i, out| {
            grid.for_each_within(cloud[i], eps, |j| out.push(j));
        },
        |i, j| cloud[i].distance_squared(cloud[j]),
    ))
}

/// Keeps the points of the largest cluster (ties go to the lower cluster id).
/// Returns an empty cloud when every point is noise.
pub fn largest_cluster(cloud: &[Point3], labels: &Labels) -> PointCloud {
    match labels.largest() {
        Some(c) => cloud
            .iter()
            .zip(labels.as_slice())
            .filter(|(_, l)| **l == Some(c))
            .map(|(p, _)| *p)
            .collect(),
        None => Vec::new(),
    }
}

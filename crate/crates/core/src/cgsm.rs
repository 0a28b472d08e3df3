//! Chronological group-wise segment merging.
//!
//! Segments are split into temporal groups. Each group is folded into the
//! running instance map: suspected under-segments are filtered out, then
//! pairs are merged over several passes with a linearly decaying
//! similarity threshold.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::embed;
use crate::geometry::{self, Aabb, Point3, VoxelSet};
use crate::ingest::Segment;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CgsmError {
    #[error("segment {id} has no voxels")]
    EmptyVoxels { id: u32 },
    #[error("segment {id} has a zero-norm mean feature")]
    ZeroNormFeature { id: u32 },
    #[error("group interval must be at least 1")]
    NonPositiveInterval,
}

/// One source segment's contribution to a merged segment's feature pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub f_v: Vec<f32>,
    pub f_c: Vec<f32>,
    pub caption: String,
    pub source: u32,
    pub t: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedSegment {
    /// Smallest source segment id.
    pub id: u32,
    /// Ascending.
    pub source_ids: Vec<u32>,
    pub points: Vec<Point3>,
    pub voxels: VoxelSet,
    /// One entry per source, in source-id order.
    pub feature_pool: Vec<PoolEntry>,
    mean_v: Vec<f64>,
    mean_c: Vec<f64>,
    bounds: Option<Aabb>,
}

impl MergedSegment {
    pub fn from_segment(s: &Segment) -> Self {
        let pool = alloc::vec![PoolEntry {
            f_v: s.f_v.clone(),
            f_c: s.f_c.clone(),
            caption: s.caption.clone(),
            source: s.id,
            t: s.t,
        }];
        MergedSegment::assemble(alloc::vec![s.id], s.points.clone(), s.voxels.clone(), pool)
    }

    fn assemble(source_ids: Vec<u32>, points: Vec<Point3>, voxels: VoxelSet, feature_pool: Vec<PoolEntry>) -> Self {
        let dim = feature_pool.first().map_or(0, |e| e.f_v.len());
        let mean_v = embed::mean(feature_pool.iter().map(|e| e.f_v.as_slice()), dim);
        let mean_c = embed::mean(feature_pool.iter().map(|e| e.f_c.as_slice()), dim);
        let bounds = geometry::aabb_of(&points).ok();
        MergedSegment {
            id: source_ids[0],
            source_ids,
            points,
            voxels,
            feature_pool,
            mean_v,
            mean_c,
            bounds,
        }
    }

    /// Union of `parts`; points and pool entries are concatenated in id order.
    pub fn merge(parts: &[&MergedSegment]) -> Self {
        let mut order: Vec<&MergedSegment> = parts.to_vec();
        order.sort_by_key(|m| m.id);
        let mut source_ids: Vec<u32> = order.iter().flat_map(|m| m.source_ids.iter().copied()).collect();
        source_ids.sort_unstable();
        let points = order.iter().flat_map(|m| m.points.iter().copied()).collect();
        let voxels = order
            .iter()
            .fold(VoxelSet::new(), |acc, m| acc.union(&m.voxels));
        let mut pool: Vec<PoolEntry> = order.iter().flat_map(|m| m.feature_pool.iter().cloned()).collect();
        pool.sort_by_key(|e| e.source);
        MergedSegment::assemble(source_ids, points, voxels, pool)
    }

    pub fn mean_visual(&self) -> &[f64] {
        &self.mean_v
    }

    pub fn mean_caption(&self) -> &[f64] {
        &self.mean_c
    }

    pub fn bounds(&self) -> Option<Aabb> {
        self.bounds
    }
}

fn cosine64(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-term similarity between two merged segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub iou: f64,
    /// Fraction of `b` inside `a`.
    pub ior_ab: f64,
    /// Fraction of `a` inside `b`.
    pub ior_ba: f64,
    pub sem_v: f64,
    pub sem_c: f64,
    pub total: f64,
}

fn semantic(a: &[f64], b: &[f64], ida: u32, idb: u32) -> Result<f64, CgsmError> {
    if a.iter().all(|x| *x == 0.0) {
        return Err(CgsmError::ZeroNormFeature { id: ida });
    }
    cosine64(a, b).ok_or(CgsmError::ZeroNormFeature { id: idb })
}

/// Visual-feature cosine between pooled means.
pub fn visual_similarity(a: &MergedSegment, b: &MergedSegment) -> Result<f64, CgsmError> {
    semantic(&a.mean_v, &b.mean_v, a.id, b.id)
}

fn boxes_may_share_voxels(a: &MergedSegment, b: &MergedSegment, voxel: f64) -> bool {
    match (a.bounds, b.bounds) {
        (Some(x), Some(y)) => x.expanded(voxel).intersects(&y),
        _ => true,
    }
}

/// IoU, both containment ratios and both semantic cosines; the total uses
/// the larger containment ratio so the relation stays symmetric.
pub fn pairwise_similarity(a: &MergedSegment, b: &MergedSegment) -> Result<Similarity, CgsmError> {
    pairwise_similarity_with_voxel(a, b, None)
}

fn pairwise_similarity_with_voxel(
    a: &MergedSegment,
    b: &MergedSegment,
    voxel: Option<f64>,
) -> Result<Similarity, CgsmError> {
    if a.voxels.is_empty() {
        return Err(CgsmError::EmptyVoxels { id: a.id });
    }
    if b.voxels.is_empty() {
        return Err(CgsmError::EmptyVoxels { id: b.id });
    }
    let sem_v = semantic(&a.mean_v, &b.mean_v, a.id, b.id)?;
    let sem_c = semantic(&a.mean_c, &b.mean_c, a.id, b.id)?;
    let inter = match voxel {
        Some(v) if !boxes_may_share_voxels(a, b, v) => 0,
        _ => a.voxels.intersection_len(&b.voxels),
    };
    let (na, nb) = (a.voxels.len() as f64, b.voxels.len() as f64);
    let iou = inter as f64 / (na + nb - inter as f64);
    let ior_ab = inter as f64 / nb;
    let ior_ba = inter as f64 / na;
    Ok(Similarity {
        iou,
        ior_ab,
        ior_ba,
        sem_v,
        sem_c,
        total: iou + ior_ab.max(ior_ba) + sem_v + sem_c,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGroup {
    pub index: u32,
    pub members: Vec<Segment>,
}

/// Groups segments by `t / interval`. Groups with no segments are omitted,
/// so indices may skip.
pub fn split_groups(segments: &[Segment], interval: u32) -> Result<Vec<SegmentGroup>, CgsmError> {
    if interval == 0 {
        return Err(CgsmError::NonPositiveInterval);
    }
    let mut sorted: Vec<&Segment> = segments.iter().collect();
    sorted.sort_by_key(|s| (s.t, s.id));
    let mut groups: Vec<SegmentGroup> = Vec::new();
    for s in sorted {
        let index = s.t / interval;
        match groups.last_mut() {
            Some(g) if g.index == index => g.members.push(s.clone()),
            _ => groups.push(SegmentGroup {
                index,
                members: alloc::vec![s.clone()],
            }),
        }
    }
    Ok(groups)
}

/// Removes segments that contain at least two others whose visual
/// similarities to it vary by at least `tau_u` (population variance).
///
/// `voxel` is the resolution the voxel sets were built at; it only bounds
/// a bounding-box shortcut.
pub fn filter_undersegments(
    group: Vec<MergedSegment>,
    ior_contain: f64,
    tau_u: f64,
    voxel: f64,
) -> Result<(Vec<MergedSegment>, Vec<MergedSegment>), CgsmError> {
    let mut remove = alloc::vec![false; group.len()];
    for (m, seg) in group.iter().enumerate() {
        let mut sims = Vec::new();
        for (j, other) in group.iter().enumerate() {
            if j == m || other.voxels.is_empty() {
                continue;
            }
            // |m ∩ j| / |j| is at most |m| / |j|, and zero for disjoint boxes
            if (seg.voxels.len() as f64) < ior_contain * other.voxels.len() as f64 {
                continue;
            }
            if ior_contain > 0.0 && !boxes_may_share_voxels(seg, other, voxel) {
                continue;
            }
            let ior = geometry::voxel_ior(&seg.voxels, &other.voxels).expect("non-empty contained set");
            if ior >= ior_contain {
                sims.push(visual_similarity(seg, other)?);
            }
        }
        if sims.len() >= 2 {
            let n = sims.len() as f64;
            let mean = sims.iter().sum::<f64>() / n;
            let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            remove[m] = var >= tau_u;
        }
    }
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (seg, r) in group.into_iter().zip(remove) {
        if r {
            removed.push(seg);
        } else {
            kept.push(seg);
        }
    }
    Ok((kept, removed))
}

/// Merge thresholds for each pass: linear from `start` to `end` over `k`
/// passes; a single pass uses `end`.
pub fn threshold_schedule(start: f64, end: f64, k: u32) -> Vec<f64> {
    if k <= 1 {
        return alloc::vec![end];
    }
    (0..k)
        .map(|i| start - i as f64 * (start - end) / (k - 1) as f64)
        .collect()
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        // keep the smaller index as root so components are labeled stably
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

/// Runs one merge pass per threshold. Within a pass every pair at or above
/// the threshold is joined, highest similarity first; merged segments are
/// rebuilt before the next pass. `sim` is only called on distinct items.
pub fn merge_passes<F>(
    mut items: Vec<MergedSegment>,
    thresholds: &[f64],
    mut sim: F,
) -> Result<Vec<MergedSegment>, CgsmError>
where
    F: FnMut(&MergedSegment, &MergedSegment) -> Result<f64, CgsmError>,
{
    items.sort_by_key(|m| m.id);
    for &theta in thresholds {
        let n = items.len();
        let mut candidates: Vec<(f64, u32, u32, usize, usize)> = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let phi = sim(&items[i], &items[j])?;
                if phi >= theta {
                    let (a, b) = (items[i].id.min(items[j].id), items[i].id.max(items[j].id));
                    candidates.push((phi, a, b, i, j));
                }
            }
        }
        if candidates.is_empty() {
            continue;
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let mut sets = DisjointSet::new(n);
        for &(_, _, _, i, j) in &candidates {
            sets.union(i, j);
        }
        let mut components: Vec<Vec<usize>> = alloc::vec![Vec::new(); n];
        for i in 0..n {
            let r = sets.find(i);
            components[r].push(i);
        }
        let mut next: Vec<MergedSegment> = Vec::with_capacity(n);
        let mut slots: Vec<Option<MergedSegment>> = items.into_iter().map(Some).collect();
        for comp in components.into_iter().filter(|c| !c.is_empty()) {
            if comp.len() == 1 {
                next.push(slots[comp[0]].take().expect("each item used once"));
            } else {
                let parts: Vec<&MergedSegment> = comp.iter().map(|&i| slots[i].as_ref().expect("unmerged")).collect();
                next.push(MergedSegment::merge(&parts));
            }
        }
        next.sort_by_key(|m| m.id);
        items = next;
    }
    Ok(items)
}

/// Result of folding one group into the running map.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutcome {
    pub merged: Vec<MergedSegment>,
    pub removed: Vec<MergedSegment>,
}

/// Folds `incoming` into `current`: under-segment filter once over the
/// union, then the decaying-threshold merge passes.
pub fn merge_group(
    current: Vec<MergedSegment>,
    incoming: &SegmentGroup,
    cfg: &PipelineConfig,
) -> Result<GroupOutcome, CgsmError> {
    let mut union = current;
    union.extend(incoming.members.iter().map(MergedSegment::from_segment));
    let (kept, removed) = filter_undersegments(union, cfg.ior_contain, cfg.tau_u, cfg.voxel_size)?;
    let schedule = threshold_schedule(cfg.theta_start, cfg.theta_end, cfg.decay_steps);
    let voxel = cfg.voxel_size;
    let merged = merge_passes(kept, &schedule, |a, b| {
        pairwise_similarity_with_voxel(a, b, Some(voxel)).map(|s| s.total)
    })?;
    Ok(GroupOutcome { merged, removed })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceMap {
    pub instances: Vec<MergedSegment>,
    /// Source ids of segments discarded as under-segments, ascending.
    pub removed_sources: Vec<u32>,
}

impl InstanceMap {
    /// Instance index for every surviving source segment id.
    pub fn source_to_instance(&self) -> Vec<(u32, usize)> {
        let mut out: Vec<(u32, usize)> = self
            .instances
            .iter()
            .enumerate()
            .flat_map(|(k, m)| m.source_ids.iter().map(move |s| (*s, k)))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Splits into groups and folds them in chronological order.
pub fn run_cgsm(segments: &[Segment], cfg: &PipelineConfig) -> Result<InstanceMap, CgsmError> {
    let groups = split_groups(segments, cfg.group_interval)?;
    let mut current = Vec::new();
    let mut removed_sources = Vec::new();
    for g in &groups {
        let out = merge_group(current, g, cfg)?;
        current = out.merged;
        removed_sources.extend(out.removed.iter().flat_map(|m| m.source_ids.iter().copied()));
    }
    removed_sources.sort_unstable();
    Ok(InstanceMap {
        instances: current,
        removed_sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Provenance;
    use alloc::vec;
    use alloc::vec::Vec;

    fn seg(id: u32, t: u32, voxels: &[(i64, i64, i64)], f_v: Vec<f32>, f_c: Vec<f32>) -> Segment {
        let v = 0.1;
        let points: Vec<Point3> = voxels
            .iter()
            .map(|&(i, j, k)| Point3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * v)
            .collect();
        Segment {
            id,
            t,
            index: 0,
            voxels: geometry::voxelize(&points, v).unwrap(),
            points,
            f_v,
            f_c,
            caption: String::from("s"),
            provenance: Provenance::PreLifted,
        }
    }

    fn line(range: core::ops::Range<i64>) -> Vec<(i64, i64, i64)> {
        range.map(|i| (i, 0, 0)).collect()
    }

    fn cos_vec(c: f64) -> Vec<f32> {
        vec![c as f32, libm::sqrt(1.0 - c * c) as f32]
    }

    #[test]
    fn self_similarity_is_four() {
        let a = MergedSegment::from_segment(&seg(0, 0, &line(0..8), vec![1.0, 2.0], vec![0.5, 0.5]));
        let s = pairwise_similarity(&a, &a).unwrap();
        assert_eq!((s.iou, s.ior_ab, s.ior_ba), (1.0, 1.0, 1.0));
        assert!((s.sem_v - 1.0).abs() < 1e-12 && (s.sem_c - 1.0).abs() < 1e-12);
        assert!((s.total - 4.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_orthogonal_is_zero() {
        let a = MergedSegment::from_segment(&seg(0, 0, &line(0..8), vec![1.0, 0.0], vec![1.0, 0.0]));
        let b = MergedSegment::from_segment(&seg(1, 0, &line(20..28), vec![0.0, 1.0], vec![0.0, 1.0]));
        assert_eq!(pairwise_similarity(&a, &b).unwrap().total, 0.0);
    }

    #[test]
    fn partial_overlap_total() {
        let a = MergedSegment::from_segment(&seg(0, 0, &line(0..8), vec![1.0, 0.0], vec![1.0, 0.0]));
        let b = MergedSegment::from_segment(&seg(1, 0, &line(4..12), cos_vec(0.9), cos_vec(0.7)));
        let s = pairwise_similarity(&a, &b).unwrap();
        let expect = 4.0 / 12.0 + 0.5 + 0.9 + 0.7;
        assert!((s.total - expect).abs() < 1e-6, "{}", s.total);
    }

    #[test]
    fn similarity_errors() {
        let mut empty = seg(0, 0, &[], vec![1.0, 0.0], vec![1.0, 0.0]);
        empty.voxels = VoxelSet::new();
        let a = MergedSegment::from_segment(&empty);
        let b = MergedSegment::from_segment(&seg(1, 0, &line(0..3), vec![1.0, 0.0], vec![1.0, 0.0]));
        assert_eq!(pairwise_similarity(&a, &b), Err(CgsmError::EmptyVoxels { id: 0 }));
        let z = MergedSegment::from_segment(&seg(2, 0, &line(0..3), vec![0.0, 0.0], vec![1.0, 0.0]));
        assert_eq!(pairwise_similarity(&z, &b), Err(CgsmError::ZeroNormFeature { id: 2 }));
    }

    #[test]
    fn schedule_endpoints() {
        let s = threshold_schedule(2.4, 1.6, 5);
        assert_eq!(s.len(), 5);
        assert_eq!(s[0], 2.4);
        assert!((s[4] - 1.6).abs() < 1e-12);
        assert!((s[2] - 2.0).abs() < 1e-12);
        assert_eq!(threshold_schedule(2.4, 1.6, 1), vec![1.6]);
    }

    #[test]
    fn split_groups_examples() {
        let segs: Vec<Segment> = (0..400).map(|t| seg(t, t, &line(0..1), vec![1.0], vec![1.0])).collect();
        let g = split_groups(&segs, 200).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g[0].members.iter().all(|s| s.t < 200));
        assert!(g[1].members.iter().all(|s| (200..400).contains(&s.t)));
        assert_eq!(split_groups(&segs, 1000).unwrap().len(), 1);
        assert_eq!(split_groups(&segs, 1).unwrap().len(), 400);
        assert_eq!(split_groups(&segs, 0), Err(CgsmError::NonPositiveInterval));
        // gaps produce no empty groups
        let sparse = vec![seg(0, 0, &line(0..1), vec![1.0], vec![1.0]), seg(1, 900, &line(0..1), vec![1.0], vec![1.0])];
        let g = split_groups(&sparse, 200).unwrap();
        assert_eq!(g.iter().map(|g| g.index).collect::<Vec<_>>(), vec![0, 4]);
    }

    /// Container voxels 0..20 holds two 5-voxel segments; their cosines to the
    /// container's mean visual feature are the given values.
    fn container_case(c1: f64, c2: f64) -> Vec<MergedSegment> {
        let m = seg(0, 0, &line(0..20), vec![1.0, 0.0], vec![1.0, 0.0]);
        let a = seg(1, 0, &line(0..5), cos_vec(c1), vec![1.0, 0.0]);
        let b = seg(2, 0, &line(10..15), cos_vec(c2), vec![1.0, 0.0]);
        [m, a, b].iter().map(MergedSegment::from_segment).collect()
    }

    #[test]
    fn high_variance_container_removed() {
        let (kept, removed) = filter_undersegments(container_case(0.9, 0.4), 0.8, 0.01, 0.1).unwrap();
        // variance of {0.9, 0.4} is 0.0625
        assert_eq!(removed.iter().map(|m| m.id).collect::<Vec<_>>(), vec![0]);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn low_variance_container_kept() {
        let (kept, removed) = filter_undersegments(container_case(0.85, 0.87), 0.8, 0.01, 0.1).unwrap();
        assert!(removed.is_empty());
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn lone_segment_kept() {
        let one = vec![MergedSegment::from_segment(&seg(0, 0, &line(0..4), vec![1.0], vec![1.0]))];
        let (kept, removed) = filter_undersegments(one, 0.8, 0.01, 0.1).unwrap();
        assert_eq!((kept.len(), removed.len()), (1, 0));
    }

    #[test]
    fn injected_matrix_merges_rod_by_final_pass() {
        let segs: Vec<MergedSegment> = (0..3)
            .map(|i| MergedSegment::from_segment(&seg(i, 0, &line(i as i64 * 10..i as i64 * 10 + 3), vec![1.0], vec![1.0])))
            .collect();
        let table = |a: u32, b: u32| match (a.min(b), a.max(b)) {
            (0, 1) | (1, 2) => 2.1,
            _ => 1.7,
        };
        let schedule = threshold_schedule(2.4, 1.6, 5);
        let mut passes_seen = Vec::new();
        let out = merge_passes(segs.clone(), &schedule, |a, b| {
            let best = a
                .source_ids
                .iter()
                .flat_map(|x| b.source_ids.iter().map(move |y| table(*x, *y)))
                .fold(f64::MIN, f64::max);
            passes_seen.push((a.source_ids.len(), b.source_ids.len()));
            Ok(best)
        })
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source_ids, vec![0, 1, 2]);
        // nothing merges at 2.4 or 2.2, so the first two passes see three singletons
        assert!(passes_seen[..6].iter().all(|&(x, y)| x == 1 && y == 1));

        // with the schedule stopping above 2.1 nothing merges
        let out = merge_passes(segs, &[2.4, 2.2], |a, b| Ok(table(a.id, b.id))).unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn identical_pair_merges_and_conserves_points() {
        let cfg = PipelineConfig::default();
        let a = seg(0, 0, &line(0..6), vec![1.0, 0.0], vec![0.0, 1.0]);
        let mut b = seg(1, 3, &line(0..6), vec![1.0, 0.0], vec![0.0, 1.0]);
        b.points.reverse();
        let far = seg(2, 5, &line(50..56), vec![0.0, 1.0], vec![1.0, 0.0]);
        let map = run_cgsm(&[a.clone(), b.clone(), far], &cfg).unwrap();
        assert_eq!(map.instances.len(), 2);
        assert_eq!(map.instances[0].source_ids, vec![0, 1]);
        let mut expect: Vec<Point3> = a.points.iter().chain(&b.points).copied().collect();
        let mut got = map.instances[0].points.clone();
        let key = |p: &Point3| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
        expect.sort_by_key(key);
        got.sort_by_key(key);
        assert_eq!(got, expect);
        assert_eq!(map.instances[0].voxels, geometry::voxelize(&map.instances[0].points, 0.1).unwrap());
    }

    #[test]
    fn single_segment_single_instance() {
        let a = seg(7, 0, &line(0..6), vec![1.0, 0.0], vec![0.0, 1.0]);
        let map = run_cgsm(&[a.clone()], &PipelineConfig::default()).unwrap();
        assert_eq!(map.instances.len(), 1);
        assert_eq!(map.instances[0].points, a.points);
        assert_eq!(map.instances[0].id, 7);
    }
}

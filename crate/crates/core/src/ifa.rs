//! Instance feature aggregation: view refinement, major-cluster selection
//! and distinctiveness-weighted fusion.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cgsm::MergedSegment;
use crate::cluster;
use crate::config::{NeighborMode, PipelineConfig};
use crate::embed::{self, HashEmbedder};
use crate::ingest::{Frame, Mask, SceneBundle};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IfaError {
    #[error("feature provider failed for frame {frame}, instance {instance}: {reason}")]
    ProviderFailure { frame: u32, instance: u32, reason: String },
    #[error("instance {instance}: feature has zero norm")]
    ZeroNormFeature { instance: u32 },
    #[error("instance {instance}: feature pool is empty")]
    EmptyPool { instance: u32 },
    #[error("instance {instance}: feature length {got}, expected {expected}")]
    DimensionMismatch { instance: u32, expected: usize, got: usize },
}

/// Where a pool entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntrySource {
    /// Feature attached to a merged source segment.
    Segment(u32),
    /// Feature produced by the provider for the view at frame `t`.
    View(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolFeature {
    pub f_v: Vec<f32>,
    pub f_c: Vec<f32>,
    pub caption: String,
    pub source: EntrySource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolNote {
    /// No frame carried enough geometry to project into.
    NoPoseData,
    /// The instance was not visible in any posed frame.
    NoVisibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePool {
    pub instance_id: u32,
    pub entries: Vec<PoolFeature>,
    pub note: Option<PoolNote>,
}

impl FeaturePool {
    /// The merged segment's own per-source features.
    pub fn from_merged(m: &MergedSegment) -> Self {
        FeaturePool {
            instance_id: m.id,
            entries: m
                .feature_pool
                .iter()
                .map(|e| PoolFeature {
                    f_v: e.f_v.clone(),
                    f_c: e.f_c.clone(),
                    caption: e.caption.clone(),
                    source: EntrySource::Segment(e.source),
                })
                .collect(),
            note: None,
        }
    }

    /// Most frequent caption; ties go to the lexicographically smallest.
    pub fn dominant_caption(&self) -> String {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.caption.as_str()).or_default() += 1;
        }
        let mut best: Option<(&str, usize)> = None;
        for (c, n) in counts {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((c, n));
            }
        }
        best.map(|(c, _)| String::from(c)).unwrap_or_default()
    }
}

/// One view request: the instance's projected footprint in a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRequest<'a> {
    pub frame: u32,
    pub instance_id: u32,
    pub mask: &'a Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFeature {
    pub f_v: Vec<f32>,
    pub f_c: Vec<f32>,
    pub caption: String,
}

/// Supplies semantic features for one view of an instance.
pub trait FeatureProvider {
    /// A pass-through provider leaves merged feature pools untouched.
    fn is_pass_through(&self) -> bool {
        false
    }

    fn describe(&self, request: &FeatureRequest<'_>) -> Result<ViewFeature, String>;
}

/// Keeps the merged segments' own features.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThrough;

impl FeatureProvider for PassThrough {
    fn is_pass_through(&self) -> bool {
        true
    }

    fn describe(&self, _request: &FeatureRequest<'_>) -> Result<ViewFeature, String> {
        Err(String::from("pass-through provider produces no view features"))
    }
}

/// Deterministic provider for tests: embeds a fixed caption per instance and
/// perturbs it by a small hash-seeded offset per frame.
#[derive(Debug, Clone)]
pub struct HashFeatureProvider {
    pub embedder: HashEmbedder,
    pub captions: BTreeMap<u32, String>,
    pub noise: f64,
}

impl HashFeatureProvider {
    pub fn new(dim: usize, captions: BTreeMap<u32, String>) -> Self {
        HashFeatureProvider {
            embedder: HashEmbedder::new(dim),
            captions,
            noise: 0.05,
        }
    }

    fn perturbed(&self, text: &str, frame: u32, instance: u32) -> Result<Vec<f32>, String> {
        let base = self.embedder.embed_text(text).map_err(|e| alloc::format!("{e}"))?;
        let salt = alloc::format!("view {frame} {instance}");
        let jitter = self.embedder.token_vector(&salt);
        let mixed: Vec<f32> = base
            .iter()
            .zip(jitter)
            .map(|(b, j)| (*b as f64 + self.noise * j) as f32)
            .collect();
        embed::normalized(&mixed).ok_or_else(|| String::from("degenerate feature"))
    }
}

impl FeatureProvider for HashFeatureProvider {
    fn describe(&self, request: &FeatureRequest<'_>) -> Result<ViewFeature, String> {
        let caption = self
            .captions
            .get(&request.instance_id)
            .ok_or_else(|| alloc::format!("no caption for instance {}", request.instance_id))?;
        Ok(ViewFeature {
            f_v: self.perturbed(caption, request.frame, request.instance_id)?,
            f_c: self.perturbed(&alloc::format!("{caption} object"), request.frame, request.instance_id)?,
            caption: caption.clone(),
        })
    }
}

/// Projected footprint of `instance` in `frame`, if it is visible there.
///
/// A point counts when it lies in front of the camera, lands on a pixel, and
/// (with frame depth available) agrees with the depth there within
/// `depth_tol`. The instance is visible when the counted share reaches
/// `visibility_fraction`.
pub fn view_mask(instance: &MergedSegment, frame: &Frame, cfg: &PipelineConfig) -> Option<Mask> {
    let pose = frame.pose?;
    let k = frame.intrinsics?;
    let (w, h) = frame.resolved_image_size()?;
    if instance.points.is_empty() || w == 0 || h == 0 {
        return None;
    }
    let mut mask = Mask::filled(w, h, false);
    let mut hits = 0usize;
    for p in &instance.points {
        let c = pose.apply_inverse(*p);
        let Some((u, v)) = k.project(c) else { continue };
        let (ui, vi) = (libm::round(u), libm::round(v));
        if !(ui >= 0.0 && vi >= 0.0 && ui < w as f64 && vi < h as f64) {
            continue;
        }
        let (ui, vi) = (ui as u32, vi as u32);
        if let Some(d) = &frame.depth {
            let z = d.get(ui, vi) as f64;
            if !(z > 0.0) || libm::fabs(z - c.z) > cfg.depth_tol {
                continue;
            }
        }
        hits += 1;
        mask.set(ui, vi, true);
    }
    let needed = cfg.visibility_fraction * instance.points.len() as f64;
    (hits > 0 && hits as f64 >= needed).then_some(mask)
}

/// Replaces the merged feature pool with provider features for every frame
/// the instance is visible in. Falls back to the merged pool (with a note)
/// when nothing is visible or no frame has pose data.
pub fn refine_pool(
    instance: &MergedSegment,
    bundle: &SceneBundle,
    provider: &dyn FeatureProvider,
    cfg: &PipelineConfig,
) -> Result<FeaturePool, IfaError> {
    let base = FeaturePool::from_merged(instance);
    if provider.is_pass_through() {
        return Ok(base);
    }
    let mut any_posed = false;
    let mut entries = Vec::new();
    for frame in &bundle.frames {
        if frame.pose.is_none() || frame.intrinsics.is_none() || frame.resolved_image_size().is_none() {
            continue;
        }
        any_posed = true;
        let Some(mask) = view_mask(instance, frame, cfg) else { continue };
        let req = FeatureRequest {
            frame: frame.t,
            instance_id: instance.id,
            mask: &mask,
        };
        let got = provider.describe(&req).map_err(|reason| IfaError::ProviderFailure {
            frame: frame.t,
            instance: instance.id,
            reason,
        })?;
        for f in [&got.f_v, &got.f_c] {
            if f.len() != bundle.feature_dim {
                return Err(IfaError::DimensionMismatch {
                    instance: instance.id,
                    expected: bundle.feature_dim,
                    got: f.len(),
                });
            }
        }
        entries.push(PoolFeature {
            f_v: got.f_v,
            f_c: got.f_c,
            caption: got.caption,
            source: EntrySource::View(frame.t),
        });
    }
    if entries.is_empty() {
        let note = if any_posed { PoolNote::NoVisibility } else { PoolNote::NoPoseData };
        return Ok(FeaturePool {
            note: Some(note),
            ..base
        });
    }
    Ok(FeaturePool {
        instance_id: instance.id,
        entries,
        note: None,
    })
}

/// Largest density cluster of the pool's visual features under cosine
/// distance; the whole pool when every entry is noise.
pub fn major_cluster(pool: &FeaturePool, eps_f: f64, min_pts: usize) -> FeaturePool {
    let n = pool.entries.len();
    let dist = |i: usize, j: usize| {
        embed::cosine(&pool.entries[i].f_v, &pool.entries[j].f_v).map_or(f64::INFINITY, |c| 1.0 - c)
    };
    let labels = cluster::dbscan(
        n,
        min_pts.max(1),
        |i, out| out.extend((0..n).filter(|&j| i == j || dist(i, j) <= eps_f)),
        dist,
    );
    match labels.largest() {
        Some(c) => FeaturePool {
            entries: labels
                .members(c)
                .into_iter()
                .map(|i| pool.entries[i].clone())
                .collect(),
            ..pool.clone()
        },
        None => pool.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFeature {
    pub f_v_star: Vec<f64>,
    pub f_c_star: Vec<f64>,
    /// `f_v_star + f_c_star`.
    pub f_star: Vec<f64>,
    /// Softmax weights of the pool entries, visual side.
    pub weights_v: Vec<f64>,
    pub weights_c: Vec<f64>,
    /// Indices (into the fused list) of instances counted as neighbors.
    pub neighbors: Vec<usize>,
}

impl FusedFeature {
    pub fn f_star_f32(&self) -> Vec<f32> {
        embed::to_f32(&self.f_star)
    }
}

fn cos64(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 || !(na * nb).is_finite() {
        return None;
    }
    Some(dot / (na * nb))
}

fn cos_mixed(a: &[f32], b: &[f64]) -> Option<f64> {
    let a64: Vec<f64> = a.iter().map(|x| *x as f64).collect();
    cos64(&a64, b)
}

/// Numerically stable softmax of `scores / temperature`.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| libm::exp(s - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Raw fusion score of each feature: similarity to the own center minus the
/// (summed or averaged) similarity to every neighbor center.
pub fn raw_weights(
    features: &[&[f32]],
    own_center: &[f64],
    neighbor_centers: &[&[f64]],
    mode: NeighborMode,
    instance: u32,
) -> Result<Vec<f64>, IfaError> {
    let zero = IfaError::ZeroNormFeature { instance };
    features
        .iter()
        .map(|f| {
            let own = cos_mixed(f, own_center).ok_or(zero.clone())?;
            let mut penalty = 0.0;
            for c in neighbor_centers {
                penalty += cos_mixed(f, c).ok_or(zero.clone())?;
            }
            if mode == NeighborMode::Mean && !neighbor_centers.is_empty() {
                penalty /= neighbor_centers.len() as f64;
            }
            Ok(own - penalty)
        })
        .collect()
}

fn weighted_sum(features: &[&[f32]], weights: &[f64], dim: usize) -> Vec<f64> {
    // a convex combination of equal vectors is that vector; skip the rounding
    if let Some(first) = features.first() {
        if features.iter().all(|f| f == first) {
            return first.iter().map(|x| *x as f64).collect();
        }
    }
    let mut out = vec![0.0; dim];
    for (f, w) in features.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(f.iter()) {
            *o += w * *x as f64;
        }
    }
    out
}

/// Fuses every pool. Centers are computed for all instances first; each
/// instance's neighbor set comes from its visual center and is reused for
/// the caption side.
pub fn fuse(pools: &[FeaturePool], cfg: &PipelineConfig) -> Result<Vec<FusedFeature>, IfaError> {
    let mut dim = None;
    for p in pools {
        let first = p.entries.first().ok_or(IfaError::EmptyPool {
            instance: p.instance_id,
        })?;
        let d = *dim.get_or_insert(first.f_v.len());
        for e in &p.entries {
            for f in [&e.f_v, &e.f_c] {
                if f.len() != d {
                    return Err(IfaError::DimensionMismatch {
                        instance: p.instance_id,
                        expected: d,
                        got: f.len(),
                    });
                }
            }
        }
    }
    let dim = dim.unwrap_or(0);
    let centers_v: Vec<Vec<f64>> = pools
        .iter()
        .map(|p| embed::mean(p.entries.iter().map(|e| e.f_v.as_slice()), dim))
        .collect();
    let centers_c: Vec<Vec<f64>> = pools
        .iter()
        .map(|p| embed::mean(p.entries.iter().map(|e| e.f_c.as_slice()), dim))
        .collect();

    let mut out = Vec::with_capacity(pools.len());
    for (i, pool) in pools.iter().enumerate() {
        let id = pool.instance_id;
        if cos64(&centers_v[i], &centers_v[i]).is_none() || cos64(&centers_c[i], &centers_c[i]).is_none() {
            return Err(IfaError::ZeroNormFeature { instance: id });
        }
        let neighbors: Vec<usize> = (0..pools.len())
            .filter(|&k| k != i)
            .filter(|&k| cos64(&centers_v[i], &centers_v[k]).is_some_and(|c| c >= cfg.tau_d))
            .collect();
        let fv: Vec<&[f32]> = pool.entries.iter().map(|e| e.f_v.as_slice()).collect();
        let fc: Vec<&[f32]> = pool.entries.iter().map(|e| e.f_c.as_slice()).collect();
        let nv: Vec<&[f64]> = neighbors.iter().map(|&k| centers_v[k].as_slice()).collect();
        let nc: Vec<&[f64]> = neighbors.iter().map(|&k| centers_c[k].as_slice()).collect();
        let av = raw_weights(&fv, &centers_v[i], &nv, cfg.neighbor_mode, id)?;
        let ac = raw_weights(&fc, &centers_c[i], &nc, cfg.neighbor_mode, id)?;
        let weights_v = softmax(&av, cfg.softmax_temp);
        let weights_c = softmax(&ac, cfg.softmax_temp);
        let f_v_star = weighted_sum(&fv, &weights_v, dim);
        let f_c_star = weighted_sum(&fc, &weights_c, dim);
        let f_star = f_v_star.iter().zip(&f_c_star).map(|(a, b)| a + b).collect();
        out.push(FusedFeature {
            f_v_star,
            f_c_star,
            f_star,
            weights_v,
            weights_c,
            neighbors,
        });
    }
    Ok(out)
}

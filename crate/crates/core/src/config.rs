//! Every pipeline hyperparameter in one record.

use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

/// How the neighbor penalty in feature fusion combines neighbor terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborMode {
    /// Subtract the sum over all neighbors.
    #[default]
    Sum,
    /// Subtract the mean over neighbors.
    Mean,
}

/// World axis that points up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpAxis {
    X,
    Y,
    #[default]
    Z,
}

impl UpAxis {
    /// Index of the up axis followed by the (left/right, front/back) axes.
    pub fn axes(self) -> (usize, usize, usize) {
        match self {
            UpAxis::Z => (2, 0, 1),
            UpAxis::Y => (1, 0, 2),
            UpAxis::X => (0, 1, 2),
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            UpAxis::X => 0,
            UpAxis::Y => 1,
            UpAxis::Z => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(UpAxis::X),
            1 => Some(UpAxis::Y),
            2 => Some(UpAxis::Z),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Voxel resolution for segment set operations, meters.
    pub voxel_size: f64,
    /// Masks with fewer pixels are dropped.
    pub min_pixels: u32,
    /// Lifted segments with fewer points (after denoising) are dropped.
    pub min_points: u32,
    pub denoise_eps: f64,
    pub denoise_min_pts: u32,
    /// Masks whose border-touching share of the perimeter exceeds this are dropped.
    pub marginal_border_fraction: f64,

    /// Frames per merge group.
    pub group_interval: u32,
    pub ior_contain: f64,
    /// Variance threshold of the under-segment filter.
    pub tau_u: f64,
    pub theta_start: f64,
    pub theta_end: f64,
    pub decay_steps: u32,

    pub visibility_fraction: f64,
    pub depth_tol: f64,
    /// Cosine-similarity threshold for neighboring instances in fusion.
    pub tau_d: f64,
    /// Cosine-distance radius of the feature-pool clustering.
    pub eps_f: f64,
    pub feature_min_pts: u32,
    pub softmax_temp: f64,
    pub neighbor_mode: NeighborMode,

    /// Root-box expansion, meters.
    pub delta: f64,
    pub max_depth: u8,
    pub min_leaf_points: u32,
    pub prune_full: bool,
    /// Point-cloud dilation for occupancy ratios, meters.
    pub delta_r: f64,
    pub eor_samples: u32,

    /// Edge distance threshold, meters.
    pub tau_r: f64,
    pub dominance_ratio: f64,
    pub eps_c: f64,
    pub up_axis: UpAxis,

    pub ref_top_k: u32,
    /// Compare-distance targets must score at least this fraction of the best match.
    pub target_score_ratio: f64,

    pub grid_res: f64,
    pub plan_padding: f64,

    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            voxel_size: 0.025,
            min_pixels: 25,
            min_points: 50,
            denoise_eps: 0.05,
            denoise_min_pts: 10,
            marginal_border_fraction: 0.4,
            group_interval: 200,
            ior_contain: 0.8,
            tau_u: 0.01,
            theta_start: 2.4,
            theta_end: 1.6,
            decay_steps: 5,
            visibility_fraction: 0.3,
            depth_tol: 0.05,
            tau_d: 0.7,
            eps_f: 0.15,
            feature_min_pts: 2,
            softmax_temp: 1.0,
            neighbor_mode: NeighborMode::Sum,
            delta: 0.01,
            max_depth: 4,
            min_leaf_points: 1,
            prune_full: false,
            delta_r: 0.005,
            eor_samples: 200_000,
            tau_r: 3.0,
            dominance_ratio: 1.0,
            eps_c: 0.01,
            up_axis: UpAxis::Z,
            ref_top_k: 1,
            target_score_ratio: 0.8,
            grid_res: 0.1,
            plan_padding: 1.0,
            seed: 0,
        }
    }
}

fn bad(field: &'static str, reason: &str) -> ConfigError {
    ConfigError {
        field,
        reason: String::from(reason),
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(field, "must be a positive finite number"))
    }
}

fn non_negative(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(bad(field, "must be a non-negative finite number"))
    }
}

fn unit(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(bad(field, "must lie in [0, 1]"))
    }
}

/// Deepest supported octree level; node centers are offset by extent/2^l and
/// the binary format stores depth in one byte.
pub const MAX_OCTREE_DEPTH: u8 = 20;

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("voxel_size", self.voxel_size)?;
        positive("denoise_eps", self.denoise_eps)?;
        if self.denoise_min_pts == 0 {
            return Err(bad("denoise_min_pts", "must be at least 1"));
        }
        unit("marginal_border_fraction", self.marginal_border_fraction)?;
        if self.group_interval == 0 {
            return Err(bad("group_interval", "must be at least 1"));
        }
        unit("ior_contain", self.ior_contain)?;
        non_negative("tau_u", self.tau_u)?;
        if !self.theta_start.is_finite() || !self.theta_end.is_finite() {
            return Err(bad("theta_start", "thresholds must be finite"));
        }
        if self.theta_start < self.theta_end {
            return Err(bad("theta_start", "must be >= theta_end"));
        }
        if self.decay_steps == 0 {
            return Err(bad("decay_steps", "must be at least 1"));
        }
        unit("visibility_fraction", self.visibility_fraction)?;
        non_negative("depth_tol", self.depth_tol)?;
        if !(-1.0..=1.0).contains(&self.tau_d) {
            return Err(bad("tau_d", "must lie in [-1, 1]"));
        }
        positive("eps_f", self.eps_f)?;
        if self.feature_min_pts == 0 {
            return Err(bad("feature_min_pts", "must be at least 1"));
        }
        positive("softmax_temp", self.softmax_temp)?;
        positive("delta", self.delta)?;
        if self.max_depth > MAX_OCTREE_DEPTH {
            return Err(bad("max_depth", "exceeds the supported octree depth"));
        }
        if self.min_leaf_points == 0 {
            return Err(bad("min_leaf_points", "must be at least 1"));
        }
        positive("delta_r", self.delta_r)?;
        if self.eor_samples == 0 {
            return Err(bad("eor_samples", "must be at least 1"));
        }
        positive("tau_r", self.tau_r)?;
        positive("dominance_ratio", self.dominance_ratio)?;
        non_negative("eps_c", self.eps_c)?;
        if self.ref_top_k == 0 {
            return Err(bad("ref_top_k", "must be at least 1"));
        }
        unit("target_score_ratio", self.target_score_ratio)?;
        positive("grid_res", self.grid_res)?;
        non_negative("plan_padding", self.plan_padding)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range() {
        let cfg = PipelineConfig {
            theta_start: 1.0,
            theta_end: 2.0,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "theta_start");
        let cfg = PipelineConfig {
            voxel_size: 0.0,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "voxel_size");
        let cfg = PipelineConfig {
            group_interval: 0,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "group_interval");
    }

    #[test]
    fn up_axis_byte_round_trip() {
        for a in [UpAxis::X, UpAxis::Y, UpAxis::Z] {
            assert_eq!(UpAxis::from_u8(a.as_u8()), Some(a));
        }
        assert_eq!(UpAxis::from_u8(9), None);
    }
}

//! Run configuration: every hyperparameter across the pipeline, the seed
//! hierarchy, and the named ablation presets. Unknown keys are rejected at
//! parse time; ranges are validated on load.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, StagePlan};
use crate::encoding::FourierSpec;
use crate::geometry::CenterMode;
use crate::losses::AcWeights;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Fourier(C) only.
    Original,
    /// Fourier(C + O) only.
    Centered,
    /// Fourier(C) + Fourier(C + O).
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySampling {
    Fps,
    WeightedFps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSampling {
    ClassAware,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Ball,
    Ellipsoid,
}

/// Synthetic scene generator settings. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_instances: [usize; 2],
    pub points_per_instance: [usize; 2],
    pub shapes: Vec<ShapeKind>,
    pub instance_radius: [f64; 2],
    /// Minimum center separation in scattered placement, meters.
    pub min_separation: f64,
    /// Place instances surface-to-surface with `adjacent_gap` clearance.
    pub adjacent_mode: bool,
    pub adjacent_gap: f64,
    /// Fraction of total points drawn as uniform background clutter.
    pub clutter_fraction: f64,
    pub noise_sigma: f64,
    /// Scene half-extent: coordinates land in [-extent/2, extent/2].
    pub extent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_instances: [3, 6],
            points_per_instance: [80, 200],
            shapes: vec![ShapeKind::Box, ShapeKind::Ball, ShapeKind::Ellipsoid],
            instance_radius: [0.25, 0.5],
            min_separation: 1.0,
            adjacent_mode: false,
            adjacent_gap: 0.05,
            clutter_fraction: 0.1,
            noise_sigma: 0.01,
            extent: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_instances[0] > self.num_instances[1]
            || self.points_per_instance[0] > self.points_per_instance[1]
            || self.instance_radius[0] > self.instance_radius[1]
        {
            return Err(Error::InvalidConfig("synth: empty range".into()));
        }
        if self.points_per_instance[0] == 0 {
            return Err(Error::InvalidConfig(
                "synth: points_per_instance must be >= 1".into(),
            ));
        }
        if self.shapes.is_empty() {
            return Err(Error::InvalidConfig("synth: no shapes".into()));
        }
        if self.min_separation <= 0.0 {
            return Err(Error::InvalidConfig(
                "synth: min_separation must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return Err(Error::InvalidConfig(
                "synth: clutter_fraction must be in [0,1)".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.extent <= 0.0 || self.instance_radius[0] <= 0.0 {
            return Err(Error::InvalidConfig("synth: bad geometry params".into()));
        }
        if self.adjacent_gap <= 0.0 {
            return Err(Error::InvalidConfig(
                "synth: adjacent_gap must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Geometry.
    pub voxel_size: f64,
    pub center_mode: CenterMode,
    pub num_classes: usize,

    // Position encoding.
    pub fourier_bands: usize,
    /// Lowest Fourier frequency; derived from the scene extent when unset.
    pub fourier_base_scale: Option<f64>,
    pub embedding_mode: EmbeddingMode,

    // Model dimensions.
    pub feat_dim: usize,
    pub backbone_hidden: usize,
    /// Neighborhood pooling radius, in multiples of the voxel size.
    pub backbone_radius_voxels: f64,
    pub offset_hidden: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub use_projections: bool,
    pub use_ffn: bool,
    pub use_norm: bool,
    pub use_residual: bool,

    // Queries and sampling.
    pub num_queries: usize,
    pub sample_budget: usize,
    pub n_per_instance: usize,
    pub alpha: f64,
    pub query_sampling: QuerySampling,
    pub attention_sampling: AttentionSampling,

    // Stage plan.
    pub num_layers: usize,
    pub fine_enabled: bool,
    pub merge_enabled: bool,
    pub baseline_2l_minus_1: bool,

    // Losses.
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    pub lambda_ce: f64,
    pub l_cm_in_loss: bool,

    // Training.
    pub steps: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub eval_interval: usize,
    pub grad_check: bool,
    pub grad_check_params: usize,

    // Inference.
    pub top_k: usize,
    pub confidence_threshold: f64,

    // Reproducibility and execution.
    pub seed: u64,
    pub deterministic: bool,
    pub threads: usize,

    // Scene generation.
    pub num_scenes: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            voxel_size: 0.08,
            center_mode: CenterMode::Average,
            num_classes: 3,
            fourier_bands: 8,
            fourier_base_scale: None,
            embedding_mode: EmbeddingMode::Dual,
            feat_dim: 64,
            backbone_hidden: 64,
            backbone_radius_voxels: 2.5,
            offset_hidden: 64,
            num_heads: 4,
            ffn_hidden: 128,
            use_projections: true,
            use_ffn: true,
            use_norm: true,
            use_residual: true,
            num_queries: 20,
            sample_budget: 1280,
            n_per_instance: 128,
            alpha: 25.0,
            query_sampling: QuerySampling::WeightedFps,
            attention_sampling: AttentionSampling::ClassAware,
            num_layers: 6,
            fine_enabled: true,
            merge_enabled: true,
            baseline_2l_minus_1: false,
            lambda_dice: 2.0,
            lambda_bce: 5.0,
            lambda_ce: 2.0,
            l_cm_in_loss: false,
            steps: 1000,
            max_lr: 2e-4,
            weight_decay: 1e-4,
            eval_interval: 0,
            grad_check: false,
            grad_check_params: 200,
            top_k: 0,
            confidence_threshold: 0.0,
            seed: 0,
            deterministic: false,
            threads: 1,
            num_scenes: 8,
            synth: SynthConfig::default(),
        }
    }
}

// splitmix64; enough to derive independent sub-seeds from the master seed.
fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.voxel_size <= 0.0 {
            return Err(Error::InvalidConfig("voxel_size must be > 0".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
        }
        if self.fourier_bands == 0 {
            return Err(Error::InvalidConfig("fourier_bands must be >= 1".into()));
        }
        if let Some(b) = self.fourier_base_scale {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::InvalidConfig("fourier_base_scale must be > 0".into()));
            }
        }
        if self.feat_dim == 0 || self.feat_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "feat_dim {} must be a positive multiple of num_heads {}",
                self.feat_dim, self.num_heads
            )));
        }
        if !self.use_projections && self.embed_dim() != self.feat_dim {
            return Err(Error::InvalidConfig(
                "without projections the Fourier embedding dim (6 * bands) must equal feat_dim"
                    .into(),
            ));
        }
        if self.num_queries == 0 {
            return Err(Error::InvalidConfig("num_queries must be >= 1".into()));
        }
        if self.sample_budget == 0 || self.n_per_instance == 0 {
            return Err(Error::InvalidConfig("sampling sizes must be >= 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidConfig("alpha must be > 0".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig("num_layers must be >= 1".into()));
        }
        if self.max_lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("bad optimizer settings".into()));
        }
        if !(0.0..=2.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidConfig(
                "confidence_threshold out of range".into(),
            ));
        }
        self.stage_plan().validate()?;
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        6 * self.fourier_bands
    }

    pub fn fourier_spec(&self) -> Result<FourierSpec> {
        match self.fourier_base_scale {
            Some(b) => FourierSpec::new(self.fourier_bands, b),
            None => FourierSpec::for_extent(self.fourier_bands, self.synth.extent),
        }
    }

    pub fn stage_plan(&self) -> StagePlan {
        if self.baseline_2l_minus_1 {
            StagePlan::baseline_2l_minus_1(self.num_layers)
        } else {
            StagePlan {
                coarse_layers: self.num_layers,
                fine_layers: if self.fine_enabled {
                    self.num_layers.saturating_sub(1)
                } else {
                    0
                },
                merge_layers: if self.merge_enabled { 1 } else { 0 },
            }
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            feat_dim: self.feat_dim,
            embed_dim: self.embed_dim(),
            num_classes: self.num_classes,
            num_heads: self.num_heads,
            ffn_hidden: self.ffn_hidden,
            use_projections: self.use_projections,
            use_ffn: self.use_ffn,
            use_norm: self.use_norm,
            use_residual: self.use_residual,
        }
    }

    pub fn ac_weights(&self) -> AcWeights {
        AcWeights {
            dice: self.lambda_dice,
            bce: self.lambda_bce,
            ce: self.lambda_ce,
        }
    }

    pub fn effective_top_k(&self) -> usize {
        if self.top_k == 0 {
            self.num_queries
        } else {
            self.top_k
        }
    }

    // Seed hierarchy: scene generation, parameter init, per-step sampling.
    pub fn scene_seed(&self) -> u64 {
        mix(self.seed, 1)
    }

    pub fn init_seed(&self) -> u64 {
        mix(self.seed, 2)
    }

    pub fn sample_seed(&self) -> u64 {
        mix(self.seed, 3)
    }

    pub fn per_scene_seed(&self, index: usize) -> u64 {
        mix(self.scene_seed(), 1000 + index as u64)
    }

    pub fn per_step_seed(&self, step: usize) -> u64 {
        mix(self.sample_seed(), step as u64)
    }
}

/// Table-style ablation presets plus the paper-scale setting. Every preset
/// starts from the desk-scale defaults and flips only the intended axes.
pub fn preset(name: &str) -> Option<RunConfig> {
    let mut c = RunConfig::default();
    match name {
        "desk" => {}
        "baseline" => {
            c.attention_sampling = AttentionSampling::Random;
            c.embedding_mode = EmbeddingMode::Original;
            c.query_sampling = QuerySampling::Fps;
            c.fine_enabled = false;
            c.merge_enabled = false;
            c.baseline_2l_minus_1 = true;
        }
        "v1" => {
            c.attention_sampling = AttentionSampling::ClassAware;
            c.embedding_mode = EmbeddingMode::Original;
            c.query_sampling = QuerySampling::Fps;
            c.fine_enabled = false;
            c.merge_enabled = false;
            c.baseline_2l_minus_1 = true;
        }
        "v2" => {
            c.attention_sampling = AttentionSampling::ClassAware;
            c.embedding_mode = EmbeddingMode::Centered;
            c.query_sampling = QuerySampling::Fps;
            c.fine_enabled = false;
            c.merge_enabled = false;
            c.baseline_2l_minus_1 = true;
        }
        "v3" => {
            c.attention_sampling = AttentionSampling::ClassAware;
            c.embedding_mode = EmbeddingMode::Dual;
            c.query_sampling = QuerySampling::Fps;
            c.fine_enabled = false;
            c.merge_enabled = false;
            c.baseline_2l_minus_1 = true;
        }
        "v4" => {
            c.embedding_mode = EmbeddingMode::Dual;
            c.query_sampling = QuerySampling::Fps;
            c.fine_enabled = true;
            c.merge_enabled = false;
        }
        "v5" => {
            c.embedding_mode = EmbeddingMode::Dual;
            c.query_sampling = QuerySampling::Fps;
            c.fine_enabled = false;
            c.merge_enabled = true;
        }
        "v6" => {
            c.embedding_mode = EmbeddingMode::Dual;
            c.query_sampling = QuerySampling::Fps;
            c.fine_enabled = true;
            c.merge_enabled = true;
        }
        "v7" => {
            c.embedding_mode = EmbeddingMode::Dual;
            c.query_sampling = QuerySampling::WeightedFps;
            c.fine_enabled = true;
            c.merge_enabled = true;
        }
        "paper_scale" => {
            c.num_queries = 100;
            c.sample_budget = 12800;
            c.num_layers = 6;
        }
        _ => return None,
    }
    Some(c)
}

pub const PRESET_NAMES: [&str; 10] = [
    "desk",
    "baseline",
    "v1",
    "v2",
    "v3",
    "v4",
    "v5",
    "v6",
    "v7",
    "paper_scale",
];

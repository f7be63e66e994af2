//! Run configuration: a single TOML file is the source of every
//! hyperparameter. Command-line flags may override individual fields, and
//! the resulting snapshot travels inside checkpoints and run manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fixed 18-joint skeleton order used by keypoint annotations:
/// nose, neck, r-shoulder, r-elbow, r-wrist, l-shoulder, l-elbow, l-wrist,
/// r-hip, r-knee, r-ankle, l-hip, l-knee, l-ankle, r-eye, l-eye, r-ear,
/// l-ear.
pub const NUM_JOINTS: usize = 18;

/// Left/right symmetric joint index pairs, swapped on horizontal flips.
pub const SYMMETRIC_JOINTS: [(usize, usize); 8] =
    [(2, 5), (3, 6), (4, 7), (8, 11), (9, 12), (10, 13), (14, 15), (16, 17)];

/// Default skeleton connectivity (17 edges over the 18 joints): limbs,
/// torso and head links used when rasterizing the pose mask.
pub const SKELETON_EDGES: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Stage1,
    Stage2,
    OneStage,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Stage1 => write!(f, "stage1"),
            Stage::Stage2 => write!(f, "stage2"),
            Stage::OneStage => write!(f, "one-stage"),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(Stage::Stage1),
            "2" | "stage2" => Ok(Stage::Stage2),
            "one-stage" | "onestage" => Ok(Stage::OneStage),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Concatenate the 18 heatmap channels with the image at the input.
    HeatmapConcat,
    /// Coordinate embedding: raw keypoint coordinates through two
    /// fully-connected layers, fused at the bottleneck.
    Ce,
    /// Heatmap embedding: heatmaps through an independent encoder, fused at
    /// the bottleneck.
    Hme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub seed: u64,
    pub augment_flip: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Discriminator updates per generator update during adversarial stages.
    pub d_steps_per_g: usize,
    /// Keep stage-one generator weights fixed during stage two.
    pub freeze_g1_in_stage2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Stage1,
            learning_rate: 2e-5,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            max_iterations: 1000,
            seed: 0,
            augment_flip: true,
            checkpoint_every: 500,
            log_every: 1,
            d_steps_per_g: 1,
            freeze_g1_in_stage2: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct G1Config {
    /// Number of encoder blocks N; the encoder downsamples N-1 times.
    pub num_blocks: usize,
    /// Filters in block 1; block b uses `b * base_filters`.
    pub base_filters: usize,
    /// Width of the fully-connected bottleneck.
    pub bottleneck_dim: usize,
    pub embedding: EmbeddingMode,
    /// Pose feature width for the CE / HME bottleneck fusion.
    pub pose_embed_dim: usize,
    /// Hidden width of the CE coordinate embedding MLP.
    pub ce_hidden_dim: usize,
    /// Std of the zero-mean Gaussian weight init.
    pub init_std: f64,
}

impl Default for G1Config {
    fn default() -> Self {
        Self {
            num_blocks: 5,
            base_filters: 32,
            bottleneck_dim: 64,
            embedding: EmbeddingMode::HeatmapConcat,
            pose_embed_dim: 32,
            ce_hidden_dim: 64,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct G2Config {
    /// Encoder blocks; `None` derives N-2 from the stage-one generator.
    pub num_blocks: Option<usize>,
    pub base_filters: usize,
    pub init_std: f64,
}

impl Default for G2Config {
    fn default() -> Self {
        Self { num_blocks: None, base_filters: 32, init_std: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DConfig {
    /// Filters in the first conv layer; widths double per layer.
    pub base_filters: usize,
    /// Stride-2 conv layers before the dense sigmoid head.
    pub num_layers: usize,
    pub leaky_slope: f64,
    pub init_std: f64,
}

impl Default for DConfig {
    fn default() -> Self {
        Self { base_filters: 64, num_layers: 4, leaky_slope: 0.2, init_std: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the masked L1 term in the stage-two generator loss.
    pub lambda: f64,
    /// Pixel reduction of the masked L1. With `mean`, lambda must be
    /// rescaled by the pixel count to match a `sum` run.
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 10.0, reduction: Reduction::Sum }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphologyParams {
    /// Half-width of rasterized limb segments, in pixels.
    pub limb_radius: f64,
    /// Disk radius drawn around each visible keypoint.
    pub keypoint_radius: usize,
    /// Radius of the disk structuring element for the dilation pass.
    pub dilation_radius: usize,
    /// Dilate-then-erode closing passes applied after dilation.
    pub closing_iterations: usize,
    /// Skeleton edges rasterized between visible joints.
    pub edges: Vec<(usize, usize)>,
}

impl Default for MorphologyParams {
    fn default() -> Self {
        Self {
            limb_radius: 4.0,
            keypoint_radius: 4,
            dilation_radius: 5,
            closing_iterations: 1,
            edges: SKELETON_EDGES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root: expects `index_train.tsv`, `index_test.tsv`,
    /// `keypoints.tsv` and an `images/` directory.
    pub root: String,
    pub image_height: usize,
    pub image_width: usize,
    /// Heatmap disk radius in pixels.
    pub heatmap_radius: usize,
    /// Cap on ordered pairs per identity; 0 keeps all.
    pub pair_cap_per_identity: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: String::new(),
            image_height: 128,
            image_width: 64,
            heatmap_radius: 4,
            pair_cap_per_identity: 0,
        }
    }
}

/// Everything a run needs, in one file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub g1: G1Config,
    pub g2: G2Config,
    pub d: DConfig,
    pub loss: LossConfig,
    pub morphology: MorphologyParams,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Effective stage-two block count: configured value or N-2.
    pub fn g2_num_blocks(&self) -> usize {
        self.g2.num_blocks.unwrap_or_else(|| self.g1.num_blocks.saturating_sub(2))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        if t.batch_size == 0 || t.max_iterations == 0 {
            return Err(Error::Config("batch_size and max_iterations must be positive".into()));
        }
        if t.d_steps_per_g == 0 {
            return Err(Error::Config("d_steps_per_g must be positive".into()));
        }
        if self.g1.num_blocks < 2 {
            return Err(Error::Config("g1.num_blocks must be at least 2".into()));
        }
        if self.g1.base_filters == 0 || self.g1.bottleneck_dim == 0 {
            return Err(Error::Config("g1 widths must be positive".into()));
        }
        if self.g2_num_blocks() == 0 {
            return Err(Error::Config(
                "stage-two generator needs at least one block (g1.num_blocks >= 3 or explicit g2.num_blocks)"
                    .into(),
            ));
        }
        let (h, w) = (self.data.image_height, self.data.image_width);
        if h == 0 || w == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        let down = 1usize << (self.g1.num_blocks - 1);
        if h % down != 0 || w % down != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by 2^(N-1) = {down} required by g1.num_blocks"
            )));
        }
        let g2_down = 1usize << (self.g2_num_blocks() - 1);
        if h % g2_down != 0 || w % g2_down != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by {g2_down} required by the stage-two generator"
            )));
        }
        let d_down = 1usize << self.d.num_layers;
        if h % d_down != 0 || w % d_down != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by 2^num_layers = {d_down} required by the discriminator"
            )));
        }
        if self.loss.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if 2 * self.data.heatmap_radius + 1 > h.min(w) {
            return Err(Error::Config("heatmap radius too large for the image size".into()));
        }
        for &(a, b) in &self.morphology.edges {
            if a >= NUM_JOINTS || b >= NUM_JOINTS {
                return Err(Error::Config(format!("skeleton edge ({a}, {b}) out of joint range")));
            }
        }
        Ok(())
    }

    /// Hash of the full canonical config snapshot; must match on resume.
    pub fn config_hash(&self) -> String {
        let s = self.to_toml_string().expect("config always serializes");
        hex_digest(s.as_bytes())
    }

    /// Hash of the geometry-relevant subset (network layouts, image size,
    /// heatmap radius). Checkpoints trained under one geometry may be
    /// composed only with runs sharing it, regardless of schedule or lambda.
    pub fn geometry_hash(&self) -> String {
        let slice = GeometrySlice {
            g1: self.g1.clone(),
            g2_num_blocks: self.g2_num_blocks(),
            g2_base_filters: self.g2.base_filters,
            d: self.d.clone(),
            image_height: self.data.image_height,
            image_width: self.data.image_width,
            heatmap_radius: self.data.heatmap_radius,
        };
        let s = toml::to_string(&slice).expect("geometry slice always serializes");
        hex_digest(s.as_bytes())
    }
}

#[derive(Serialize)]
struct GeometrySlice {
    g1: G1Config,
    g2_num_blocks: usize,
    g2_base_filters: usize,
    d: DConfig,
    image_height: usize,
    image_width: usize,
    heatmap_radius: usize,
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Derive an independent sub-seed for a named random stream.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let s = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn geometry_hash_ignores_schedule_and_lambda() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.max_iterations = 77;
        b.train.seed = 5;
        b.loss.lambda = 0.0;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.geometry_hash(), b.geometry_hash());

        let mut c = a.clone();
        c.g1.base_filters = 16;
        assert_ne!(a.geometry_hash(), c.geometry_hash());
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let mut cfg = RunConfig::default();
        cfg.data.image_height = 100; // not divisible by 2^(N-1)=16
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.g1.num_blocks = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.train.beta1 = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.loss.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn paper_scale_settings_are_accepted() {
        // 128x64 with N=5 and 256x256 with N=6, including the batch and
        // iteration schedules; accepted by validation, not executed here.
        let market = RunConfig::from_toml_str(
            r#"
            [train]
            batch_size = 16
            max_iterations = 22000
            learning_rate = 2e-5
            [g1]
            num_blocks = 5
            [data]
            image_height = 128
            image_width = 64
            "#,
        )
        .unwrap();
        assert_eq!(market.g2_num_blocks(), 3);

        let fashion = RunConfig::from_toml_str(
            r#"
            [train]
            batch_size = 8
            max_iterations = 30000
            [g1]
            num_blocks = 6
            [data]
            image_height = 256
            image_width = 256
            "#,
        )
        .unwrap();
        assert_eq!(fashion.g2_num_blocks(), 4);
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, "init.g1"), derive_seed(1, "init.d"));
        assert_ne!(derive_seed(1, "init.g1"), derive_seed(2, "init.g1"));
        assert_eq!(derive_seed(9, "epoch.3"), derive_seed(9, "epoch.3"));
    }
}

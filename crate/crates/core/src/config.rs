//! Model, training and dataset configuration, plus the documented
//! `key = value` config-file format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which encoder stages feed each lateral attention feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsaaVariant {
    /// Keys/values gather tokens from all encoder stages (the full module).
    AaAll,
    /// Keys/values restricted to the query's own stage.
    AaOne,
    /// No attention: lateral features are the resized encoder maps.
    ConcatOne,
}

impl CsaaVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            CsaaVariant::AaAll => "aa-all",
            CsaaVariant::AaOne => "aa-one",
            CsaaVariant::ConcatOne => "concat-one",
        }
    }
}

impl FromStr for CsaaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aa-all" => Ok(CsaaVariant::AaAll),
            "aa-one" => Ok(CsaaVariant::AaOne),
            "concat-one" => Ok(CsaaVariant::ConcatOne),
            other => Err(Error::Config(format!("unknown CSAA variant `{other}`"))),
        }
    }
}

/// Common size every encoder feature is resized to before axial attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaaConfig {
    pub common_channels: usize,
    pub common_height: usize,
    pub common_width: usize,
    pub projection_dim: usize,
    pub variant: CsaaVariant,
}

impl CsaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.common_channels < 1 || self.common_height < 1 || self.common_width < 1 {
            return Err(Error::Config("CSAA common extents must be >= 1".into()));
        }
        if self.projection_dim < 1 {
            return Err(Error::Config("CSAA projection dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss mixing weights: `stage = lambda_dice * Dice + lambda_bce * BCE`,
/// `total = sum_i alpha[i] * stage_i` with `alpha[0]` on the full-resolution
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    pub alpha: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dice: 0.7,
            lambda_bce: 0.3,
            alpha: vec![1.0, 0.9, 0.8, 0.7],
        }
    }
}

impl LossWeights {
    pub fn validate(&self, active_heads: usize) -> Result<()> {
        if self.lambda_dice < 0.0 || self.lambda_bce < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.alpha.iter().any(|a| *a < 0.0) {
            return Err(Error::Config("alpha weights must be non-negative".into()));
        }
        if self.alpha.len() < active_heads {
            return Err(Error::Config(format!(
                "alpha has {} entries, {} heads are active",
                self.alpha.len(),
                active_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarWidth {
    F32,
    F64,
}

impl ScalarWidth {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalarWidth::F32 => "f32",
            ScalarWidth::F64 => "f64",
        }
    }
}

impl FromStr for ScalarWidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" | "32" => Ok(ScalarWidth::F32),
            "f64" | "64" => Ok(ScalarWidth::F64),
            other => Err(Error::Config(format!("unknown scalar width `{other}`"))),
        }
    }
}

/// Blob family for the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobShapes {
    Disks,
    Ellipses,
    Mixed,
}

impl BlobShapes {
    pub fn as_str(self) -> &'static str {
        match self {
            BlobShapes::Disks => "disks",
            BlobShapes::Ellipses => "ellipses",
            BlobShapes::Mixed => "mixed",
        }
    }
}

impl FromStr for BlobShapes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "disks" => Ok(BlobShapes::Disks),
            "ellipses" => Ok(BlobShapes::Ellipses),
            "mixed" => Ok(BlobShapes::Mixed),
            other => Err(Error::Config(format!("unknown blob shape family `{other}`"))),
        }
    }
}

/// All architecture, training and dataset hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of encoder/decoder stages (k).
    pub stages: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub csaa: CsaaConfig,
    /// Number of active segmentation heads (m), counted from the
    /// full-resolution end of the decoder.
    pub mps_heads: usize,
    pub loss: LossWeights,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub scalar_width: ScalarWidth,
    pub augment_hflip: bool,
    // synthetic dataset knobs
    pub data_count: usize,
    pub data_objects_min: usize,
    pub data_objects_max: usize,
    pub data_ratio_min: f64,
    pub data_ratio_max: f64,
    pub data_noise: f64,
    pub data_shapes: BlobShapes,
}

impl ModelConfig {
    /// Desk-scale defaults: 64x64 grayscale input, base 8 channels, 50
    /// epochs, extremely-small synthetic objects (< 1% area each).
    pub fn desk() -> Self {
        ModelConfig {
            stages: 4,
            base_channels: 8,
            input_channels: 1,
            input_height: 64,
            input_width: 64,
            csaa: CsaaConfig {
                common_channels: 8,
                common_height: 8,
                common_width: 8,
                projection_dim: 64,
                variant: CsaaVariant::AaAll,
            },
            mps_heads: 4,
            loss: LossWeights::default(),
            lr: 0.01,
            epochs: 50,
            batch_size: 4,
            seed: 7,
            scalar_width: ScalarWidth::F64,
            augment_hflip: true,
            data_count: 40,
            data_objects_min: 1,
            data_objects_max: 4,
            data_ratio_min: 0.0005,
            data_ratio_max: 0.01,
            data_noise: 0.05,
            data_shapes: BlobShapes::Mixed,
        }
    }

    /// Full-size configuration: 3x352x352 input, base 64 channels, 4 stages,
    /// SGD at lr 0.01 for 200 epochs with batch size 4.
    pub fn paper_scale() -> Self {
        ModelConfig {
            stages: 4,
            base_channels: 64,
            input_channels: 3,
            input_height: 352,
            input_width: 352,
            csaa: CsaaConfig {
                common_channels: 64,
                common_height: 22,
                common_width: 22,
                projection_dim: 128,
                variant: CsaaVariant::AaAll,
            },
            mps_heads: 4,
            loss: LossWeights::default(),
            lr: 0.01,
            epochs: 200,
            batch_size: 4,
            seed: 7,
            scalar_width: ScalarWidth::F64,
            augment_hflip: true,
            data_count: 40,
            data_objects_min: 1,
            data_objects_max: 4,
            data_ratio_min: 0.0005,
            data_ratio_max: 0.01,
            data_noise: 0.05,
            data_shapes: BlobShapes::Mixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::Config("stages must be >= 1".into()));
        }
        let div = 1usize << self.stages;
        if self.input_height % div != 0 || self.input_width % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^{}",
                self.input_height, self.input_width, self.stages
            )));
        }
        if self.mps_heads < 1 || self.mps_heads > self.stages {
            return Err(Error::Config(format!(
                "mps_heads must be in 1..={}, got {}",
                self.stages, self.mps_heads
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.csaa.validate()?;
        self.loss.validate(self.mps_heads)?;
        Ok(())
    }

    /// Encoder stage-i output channels, i in 1..=k.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }

    /// Encoder stage-i output spatial extent (height, width).
    pub fn encoder_extent(&self, i: usize) -> (usize, usize) {
        (self.input_height >> i, self.input_width >> i)
    }

    /// Decoder stage-i output spatial extent (height, width).
    pub fn decoder_extent(&self, i: usize) -> (usize, usize) {
        (self.input_height >> (i - 1), self.input_width >> (i - 1))
    }

    /// Short tag identifying the ablation variant, e.g. `aa-all+mps-4`.
    pub fn variant_tag(&self) -> String {
        format!("{}+mps-{}", self.csaa.variant.as_str(), self.mps_heads)
    }

    /// Canonical text form; also the config-file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stages = {}", self.stages);
        let _ = writeln!(s, "base_channels = {}", self.base_channels);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "input_height = {}", self.input_height);
        let _ = writeln!(s, "input_width = {}", self.input_width);
        let _ = writeln!(s, "csaa_channels = {}", self.csaa.common_channels);
        let _ = writeln!(s, "csaa_height = {}", self.csaa.common_height);
        let _ = writeln!(s, "csaa_width = {}", self.csaa.common_width);
        let _ = writeln!(s, "csaa_projection_dim = {}", self.csaa.projection_dim);
        let _ = writeln!(s, "csaa_variant = {}", self.csaa.variant.as_str());
        let _ = writeln!(s, "mps_heads = {}", self.mps_heads);
        let _ = writeln!(s, "lambda_dice = {}", self.loss.lambda_dice);
        let _ = writeln!(s, "lambda_bce = {}", self.loss.lambda_bce);
        let alpha: Vec<String> = self.loss.alpha.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(s, "alpha = {}", alpha.join(","));
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "scalar_width = {}", self.scalar_width.as_str());
        let _ = writeln!(s, "augment_hflip = {}", self.augment_hflip);
        let _ = writeln!(s, "data_count = {}", self.data_count);
        let _ = writeln!(s, "data_objects_min = {}", self.data_objects_min);
        let _ = writeln!(s, "data_objects_max = {}", self.data_objects_max);
        let _ = writeln!(s, "data_ratio_min = {}", self.data_ratio_min);
        let _ = writeln!(s, "data_ratio_max = {}", self.data_ratio_max);
        let _ = writeln!(s, "data_noise = {}", self.data_noise);
        let _ = writeln!(s, "data_shapes = {}", self.data_shapes.as_str());
        s
    }

    /// SHA-256 of the canonical text form; stable across platforms.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// Applies `key = value` lines (with `#` comments) on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    detail: format!("line {}: expected `key = value`", lineno + 1),
                });
            };
            self.apply_kv(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: origin.to_string(),
                detail: format!("line {}: {}", lineno + 1, e),
            })?;
        }
        Ok(())
    }

    fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "stages" => self.stages = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "input_channels" => self.input_channels = num(key, value)?,
            "input_height" => self.input_height = num(key, value)?,
            "input_width" => self.input_width = num(key, value)?,
            "csaa_channels" => self.csaa.common_channels = num(key, value)?,
            "csaa_height" => self.csaa.common_height = num(key, value)?,
            "csaa_width" => self.csaa.common_width = num(key, value)?,
            "csaa_projection_dim" => self.csaa.projection_dim = num(key, value)?,
            "csaa_variant" => self.csaa.variant = value.parse()?,
            "mps_heads" => self.mps_heads = num(key, value)?,
            "lambda_dice" => self.loss.lambda_dice = num(key, value)?,
            "lambda_bce" => self.loss.lambda_bce = num(key, value)?,
            "alpha" => {
                let mut alpha = Vec::new();
                for part in value.split(',') {
                    alpha.push(num("alpha", part.trim())?);
                }
                self.loss.alpha = alpha;
            }
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "scalar_width" => self.scalar_width = value.parse()?,
            "augment_hflip" => self.augment_hflip = num(key, value)?,
            "data_count" => self.data_count = num(key, value)?,
            "data_objects_min" => self.data_objects_min = num(key, value)?,
            "data_objects_max" => self.data_objects_max = num(key, value)?,
            "data_ratio_min" => self.data_ratio_min = num(key, value)?,
            "data_ratio_max" => self.data_ratio_max = num(key, value)?,
            "data_noise" => self.data_noise = num(key, value)?,
            "data_shapes" => self.data_shapes = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = ModelConfig::desk();
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Derives an independent sub-seed from a base seed and a purpose label, so
/// dataset generation, parameter init and batch order draw from decoupled
/// streams.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_record_training_recipe() {
        let p = ModelConfig::paper_scale();
        assert_eq!(p.lr, 0.01);
        assert_eq!(p.epochs, 200);
        assert_eq!(p.batch_size, 4);
        assert_eq!((p.input_height, p.input_width), (352, 352));
        assert_eq!(p.stages, 4);
        assert_eq!((p.loss.lambda_dice, p.loss.lambda_bce), (0.7, 0.3));
        assert_eq!(p.loss.alpha, vec![1.0, 0.9, 0.8, 0.7]);
        p.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn text_roundtrip_preserves_config() {
        let mut cfg = ModelConfig::desk();
        cfg.mps_heads = 2;
        cfg.csaa.variant = CsaaVariant::AaOne;
        cfg.loss.alpha = vec![1.0, 0.5];
        let text = cfg.to_text();
        let mut back = ModelConfig::desk();
        back.apply_text(&text, "inline").unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = ModelConfig::desk();
        assert!(cfg.apply_text("no_such_key = 3\n", "inline").is_err());
    }

    #[test]
    fn variant_tags_parse_back() {
        for v in ["aa-all", "aa-one", "concat-one"] {
            let parsed: CsaaVariant = v.parse().unwrap();
            assert_eq!(parsed.as_str(), v);
        }
        assert!("aa-two".parse::<CsaaVariant>().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(7, "data"), derive_seed(7, "init"));
        assert_eq!(derive_seed(7, "data"), derive_seed(7, "data"));
    }

    #[test]
    fn validate_rejects_indivisible_input() {
        let mut cfg = ModelConfig::desk();
        cfg.input_height = 60;
        assert!(cfg.validate().is_err());
    }
}

//! Model, training and dataset configuration plus the flat config-file format.
//!
//! A config file is flat TOML: every key of [`ModelConfig`] and
//! [`TrainConfig`] at top level, plus `config_version`. Missing keys take
//! their defaults, so an empty file (with only the version) is valid.
//!
//! ```toml
//! config_version = 1
//! face_size = [64, 64]
//! eye_size = [24, 40]
//! encoder_channels = [8, 16, 32, 32]
//! groups = 4
//! rounds = 4
//! sigma = 1.0
//! epochs = 20
//! batch_size = 16
//! milestones = [8, 15]
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FaceGeometry;
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Face image `[height, width]`; always 3 colour channels.
    pub face_size: [usize; 2],
    /// Eye patch `[height, width]`.
    pub eye_size: [usize; 2],
    /// Output channels of each stride-2 face-encoder stage. The last entry
    /// is the feature channel count `c`; `h = face_h / 2^stages`.
    pub encoder_channels: Vec<usize>,
    /// Stride-2 stages of the shared per-eye encoder.
    pub eye_channels: Vec<usize>,
    /// Per-eye feature length; the eye feature vector is twice this.
    pub eye_feature_dim: usize,
    /// Stride-2 stages of the head-pose branch.
    pub pose_channels: Vec<usize>,
    pub pose_dim: usize,
    /// Channel groups `n` of the cascade.
    pub groups: usize,
    /// Rounds of the cascade.
    pub rounds: usize,
    pub sigma: f64,
    pub learn_sigma: bool,
    /// Channel-attention MLP reduction ratio.
    pub cbam_reduction: usize,
    /// Channels after each ×2 transposed-conv stage of the decoder trunks.
    pub decoder_channels: Vec<usize>,
    pub gaze_hidden: usize,
    pub lambda_eye: f64,
    pub lambda_region: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            face_size: [64, 64],
            eye_size: [24, 40],
            encoder_channels: vec![8, 16, 32, 32],
            eye_channels: vec![8, 16, 16],
            eye_feature_dim: 32,
            pose_channels: vec![8, 16, 16],
            pose_dim: 32,
            groups: 4,
            rounds: 4,
            sigma: 1.0,
            learn_sigma: false,
            cbam_reduction: 4,
            decoder_channels: vec![16, 8],
            gaze_hidden: 128,
            lambda_eye: 1.0,
            lambda_region: 1.0,
        }
    }
}

impl ModelConfig {
    /// Face 224×224 and eyes 36×60 as in the full-scale setting.
    pub fn paper_scale() -> Self {
        Self {
            face_size: [224, 224],
            eye_size: [36, 60],
            encoder_channels: vec![32, 64, 128, 256, 256],
            ..Self::default()
        }
    }

    /// The smallest configuration used for whole-model gradient checks:
    /// `c = 8`, `h = w = 4`, two groups, two rounds.
    pub fn tiny() -> Self {
        Self {
            face_size: [32, 32],
            eye_size: [12, 20],
            encoder_channels: vec![4, 8, 8],
            eye_channels: vec![4, 4],
            eye_feature_dim: 8,
            pose_channels: vec![4, 4, 4],
            pose_dim: 32,
            groups: 2,
            rounds: 2,
            cbam_reduction: 2,
            decoder_channels: vec![4],
            gaze_hidden: 16,
            ..Self::default()
        }
    }

    /// Feature extents `(c, h, w)` at the disentangler.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let down = 1usize << self.encoder_channels.len();
        (
            *self.encoder_channels.last().unwrap_or(&0),
            self.face_size[0] / down,
            self.face_size[1] / down,
        )
    }

    pub fn eye_feature_len(&self) -> usize {
        2 * self.eye_feature_dim
    }

    pub fn gaze_input_len(&self) -> usize {
        self.feature_shape().0 + self.eye_feature_len() + self.pose_dim
    }

    pub fn geometry(&self) -> FaceGeometry {
        FaceGeometry::new(self.face_size[0], self.face_size[1])
    }

    /// `[top, mid, bot]` region extents `(height, width)`.
    pub fn region_sizes(&self) -> [[usize; 2]; 3] {
        self.geometry().region_sizes()
    }

    pub fn validate(&self) -> Result<()> {
        let [fh, fw] = self.face_size;
        let [eh, ew] = self.eye_size;
        if fh == 0 || fw == 0 || eh == 0 || ew == 0 {
            return Err(Error::config("image extents must be positive"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::config(
                "encoder_channels must be non-empty and positive",
            ));
        }
        let down = 1usize << self.encoder_channels.len();
        if fh % down != 0 || fw % down != 0 {
            return Err(Error::config(format!(
                "face {fh}x{fw} is not divisible by 2^{} encoder stages",
                self.encoder_channels.len()
            )));
        }
        let (c, _, _) = self.feature_shape();
        if self.groups == 0 || c % self.groups != 0 {
            return Err(Error::config(format!(
                "feature channels {c} not divisible by groups {}",
                self.groups
            )));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        for (name, list) in [
            ("eye_channels", &self.eye_channels),
            ("pose_channels", &self.pose_channels),
            ("decoder_channels", &self.decoder_channels),
        ] {
            if list.is_empty() || list.contains(&0) {
                return Err(Error::config(format!(
                    "{name} must be non-empty and positive"
                )));
            }
        }
        let eye_down = 1usize << self.eye_channels.len();
        if eh < eye_down || ew < eye_down {
            return Err(Error::config(
                "eye patch too small for the eye encoder depth",
            ));
        }
        let pose_down = 1usize << self.pose_channels.len();
        if fh < pose_down || fw < pose_down {
            return Err(Error::config(
                "face too small for the head-pose branch depth",
            ));
        }
        if self.eye_feature_dim == 0
            || self.pose_dim == 0
            || self.gaze_hidden == 0
            || self.cbam_reduction == 0
        {
            return Err(Error::config("feature dimensions must be positive"));
        }
        if self.lambda_eye < 0.0 || self.lambda_region < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        self.geometry().validate()
    }

    /// Stable 64-bit fingerprint of the architecture, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        let text = toml::to_string(self).expect("model config serialises");
        let hash = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            milestones: vec![8, 15],
            gamma: 0.1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Learning-rate schedule and batch size of the full-scale protocol.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 40,
            batch_size: 48,
            lr: 1e-4,
            milestones: vec![10, 25],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config(
                "lr and adam_eps must be positive, weight_decay non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma must be positive"));
        }
        Ok(())
    }
}

/// Everything a config file holds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Versioned {
    config_version: u32,
    #[serde(flatten)]
    run: RunConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let v: Versioned = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if v.config_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                v.config_version
            )));
        }
        v.run.model.validate()?;
        v.run.train.validate()?;
        Ok(v.run)
    }

    pub fn to_toml(&self) -> String {
        let v = Versioned {
            config_version: CONFIG_VERSION,
            run: self.clone(),
        };
        toml::to_string(&v).expect("run config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// Human-readable summary used in logs.
pub fn describe(model: &ModelConfig) -> String {
    let (c, h, w) = model.feature_shape();
    let mut s = String::new();
    let _ = write!(
        s,
        "face {}x{}, eyes {}x{}, features {c}x{h}x{w}, n={}, rounds={}, sigma={}",
        model.face_size[0],
        model.face_size[1],
        model.eye_size[0],
        model.eye_size[1],
        model.groups,
        model.rounds,
        model.sigma
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
        TrainConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::tiny().feature_shape(), (8, 4, 4));
        assert_eq!(ModelConfig::default().feature_shape(), (32, 4, 4));
    }

    #[test]
    fn indivisible_groups_rejected() {
        let cfg = ModelConfig {
            groups: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip_and_version_guard() {
        let mut run = RunConfig::default();
        run.model.sigma = 2.0;
        run.train.milestones = vec![3];
        let text = run.to_toml();
        assert!(text.contains("config_version = 1"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), run);
        let partial = RunConfig::from_toml("config_version = 1\nrounds = 2\n").unwrap();
        assert_eq!(partial.model.rounds, 2);
        assert_eq!(partial.train, TrainConfig::default());
        assert!(RunConfig::from_toml("config_version = 9\n").is_err());
    }

    #[test]
    fn digest_tracks_architecture() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.rounds = 2;
        assert_ne!(a.digest(), b.digest());
    }
}

//! Declarative experiment description, stored as TOML.
//!
//! Every key has a default so partial files are valid. The config hash covers
//! everything that changes the experiment's outcome; filesystem locations
//! (`data.path`, `output_dir`) are excluded so a run can be moved or resumed
//! from another directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AugmentationConfig;
use crate::encoder::EncoderRegime;
use crate::error::{Error, Result};

/// Environment variable consulted when `data.path` is unset.
pub const DATA_ENV_VAR: &str = "REFGAME_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub eval_games: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub game: GameConfig,
    pub encoder: EncoderConfig,
    pub channel: ChannelConfig,
    pub agent: AgentConfig,
    pub dual_task: DualTaskConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            epochs: 200,
            eval_games: 10_000,
            output_dir: None,
            data: DataConfig::default(),
            game: GameConfig::default(),
            encoder: EncoderConfig::default(),
            channel: ChannelConfig::default(),
            agent: AgentConfig::default(),
            dual_task: DualTaskConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub augment: BaseAugmentConfig,
    /// Use only the first N training images (smoke runs).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Use only the first N test images (smoke runs).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            augment: BaseAugmentConfig::default(),
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseAugmentConfig {
    pub p_bri: f64,
    pub p_con: f64,
    pub p_sat: f64,
    pub p_hue: f64,
    pub p_grayscale: f64,
    pub p_hflip: f64,
}

impl Default for BaseAugmentConfig {
    fn default() -> Self {
        BaseAugmentConfig {
            p_bri: 0.1,
            p_con: 0.1,
            p_sat: 0.1,
            p_hue: 0.1,
            p_grayscale: 0.1,
            p_hflip: 0.5,
        }
    }
}

impl BaseAugmentConfig {
    pub fn disabled() -> Self {
        BaseAugmentConfig {
            p_bri: 0.0,
            p_con: 0.0,
            p_sat: 0.0,
            p_hue: 0.0,
            p_grayscale: 0.0,
            p_hflip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    /// Candidates per game: the target plus `size - 1` distractors.
    pub size: usize,
    pub sender_noise: bool,
    pub sender_rotation: bool,
    pub noise_mean: f64,
    pub noise_variance: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            size: 128,
            sender_noise: false,
            sender_rotation: false,
            noise_mean: 0.0,
            noise_variance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub regime: EncoderRegime,
    /// Swap the VGG16 topology for the 4-block 32x32 network.
    pub small: bool,
    /// One encoder instance used by both agents.
    pub shared: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            regime: EncoderRegime::PretrainedFrozen,
            small: false,
            shared: true,
            weights_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            vocab_size: 100,
            max_len: 5,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub score_dim: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            embed_dim: 64,
            hidden_dim: 128,
            score_dim: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualTaskMode {
    #[default]
    None,
    ReceiverPredicts,
    SenderPredicts,
}

impl DualTaskMode {
    pub fn is_dual(self) -> bool {
        self != DualTaskMode::None
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualTaskConfig {
    pub mode: DualTaskMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    /// Defaults to 0.5 for sender_predicts and 5.0 for receiver_predicts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_weight: Option<f64>,
    /// Defaults to true for receiver_predicts only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alternate: Option<bool>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.0,
            rotation_weight: None,
            alternate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerFamily {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub family: OptimizerFamily,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            family: OptimizerFamily::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub checkpoint_every: usize,
    pub quick_eval_games: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            checkpoint_every: 10,
            quick_eval_games: 1280,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load("config", path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// SHA-256 over the canonical TOML of the location-independent fields.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        canonical.data.path = None;
        let text = canonical
            .to_toml_string()
            .expect("config is always serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// First 16 hex digits of [`hash`](Self::hash), for file names and tables.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        let a = &self.data.augment;
        AugmentationConfig {
            p_bri: a.p_bri,
            p_con: a.p_con,
            p_sat: a.p_sat,
            p_hue: a.p_hue,
            p_grayscale: a.p_grayscale,
            p_hflip: a.p_hflip,
            sender_noise: self.game.sender_noise,
            noise_mean: self.game.noise_mean,
            noise_variance: self.game.noise_variance,
            sender_rotation: self.game.sender_rotation,
        }
    }

    pub fn rotation_weight(&self) -> f64 {
        self.loss.rotation_weight.unwrap_or(match self.dual_task.mode {
            DualTaskMode::None => 0.0,
            DualTaskMode::SenderPredicts => 0.5,
            DualTaskMode::ReceiverPredicts => 5.0,
        })
    }

    pub fn alternate(&self) -> bool {
        self.loss
            .alternate
            .unwrap_or(self.dual_task.mode == DualTaskMode::ReceiverPredicts)
    }

    /// `data.path`, falling back to the `REFGAME_DATA` environment variable.
    pub fn data_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.data.path {
            return Ok(p.clone());
        }
        match std::env::var_os(DATA_ENV_VAR) {
            Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
            _ => Err(Error::Config(format!(
                "no dataset location: set data.path or {DATA_ENV_VAR}"
            ))),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.short_hash()))
    }

    pub fn validate(&self) -> Result<()> {
        self.augmentation().validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.game.size < 2 {
            return fail(format!("game.size must be at least 2, got {}", self.game.size));
        }
        if self.channel.vocab_size < 2 {
            return fail(format!(
                "channel.vocab_size must be at least 2, got {}",
                self.channel.vocab_size
            ));
        }
        if self.channel.max_len < 1 {
            return fail("channel.max_len must be at least 1".into());
        }
        if !(self.channel.temperature > 0.0 && self.channel.temperature.is_finite()) {
            return fail(format!(
                "channel.temperature must be positive, got {}",
                self.channel.temperature
            ));
        }
        if self.agent.embed_dim == 0 || self.agent.hidden_dim == 0 || self.agent.score_dim == 0 {
            return fail("agent dimensions must be positive".into());
        }
        if !(self.loss.margin >= 0.0) {
            return fail(format!("loss.margin must be nonnegative, got {}", self.loss.margin));
        }
        if !self.dual_task.mode.is_dual() {
            if self.loss.rotation_weight.is_some_and(|w| w != 0.0) {
                return fail("loss.rotation_weight is set but dual_task.mode = none".into());
            }
            if self.loss.alternate == Some(true) {
                return fail("loss.alternate requires a dual-task mode".into());
            }
        }
        if self.rotation_weight() < 0.0 {
            return fail("loss.rotation_weight must be nonnegative".into());
        }
        if self.dual_task.mode.is_dual() && !self.game.sender_rotation {
            return fail("dual-task modes need game.sender_rotation = true".into());
        }
        if !(self.optim.lr > 0.0) {
            return fail(format!("optim.lr must be positive, got {}", self.optim.lr));
        }
        if self.train.checkpoint_every == 0 {
            return fail("train.checkpoint_every must be positive".into());
        }
        if self.encoder.regime == EncoderRegime::PretrainedFrozen
            && self.encoder.weights_path.is_none()
        {
            return fail("encoder.regime = pretrained_frozen requires encoder.weights_path".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.game.size, 128);
        assert_eq!(c.channel.vocab_size, 100);
        assert_eq!(c.channel.max_len, 5);
        assert_eq!(c.channel.temperature, 1.0);
        assert_eq!(c.agent.embed_dim, 64);
        assert_eq!(c.agent.hidden_dim, 128);
        assert_eq!(c.epochs, 200);
        assert_eq!(c.eval_games, 10_000);
        assert_eq!(c.optim.lr, 1e-3);
        assert_eq!(c.train.checkpoint_every, 10);
        assert_eq!(c.game.noise_variance, 0.1);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml_str(
            "seed = 3\n[encoder]\nregime = \"random_frozen\"\nsmall = true\n[game]\nsender_rotation = true\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.encoder.regime, EncoderRegime::RandomFrozen);
        assert!(c.encoder.small);
        assert!(c.game.sender_rotation);
        assert_eq!(c.game.size, 128);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(ExperimentConfig::from_toml_str("[game]\nsizes = 3\n").is_err());
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let mut c = ExperimentConfig::default();
        c.data.path = Some("/data/cifar".into());
        c.dual_task.mode = DualTaskMode::ReceiverPredicts;
        c.game.sender_rotation = true;
        c.loss.rotation_weight = Some(5.0);
        let text = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn hash_ignores_locations_but_not_semantics() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        b.data.path = Some("/mnt/x".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn schedule_defaults_follow_mode() {
        let mut c = ExperimentConfig::default();
        c.dual_task.mode = DualTaskMode::SenderPredicts;
        assert_eq!(c.rotation_weight(), 0.5);
        assert!(!c.alternate());
        c.dual_task.mode = DualTaskMode::ReceiverPredicts;
        assert_eq!(c.rotation_weight(), 5.0);
        assert!(c.alternate());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = ExperimentConfig::default();
        c.encoder.regime = EncoderRegime::RandomFrozen;
        assert!(c.validate().is_ok());
        c.channel.temperature = 0.0;
        assert!(c.validate().is_err());
        c.channel.temperature = 1.0;
        c.loss.rotation_weight = Some(0.5);
        assert!(c.validate().is_err(), "rotation weight without dual task");
        c.loss.rotation_weight = None;
        c.encoder.regime = EncoderRegime::PretrainedFrozen;
        assert!(c.validate().is_err(), "pretrained without weights");
        c.encoder.regime = EncoderRegime::RandomFrozen;
        c.data.augment.p_hflip = 1.5;
        assert!(c.validate().is_err());
    }
}

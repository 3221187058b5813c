//! Convolutional feature extractors under the three weight regimes.
//!
//! Both topologies use the parameter names of the equivalent PyTorch
//! `nn.Sequential` stacks (`features.N.*`, `classifier.N.*`), so weights
//! exported from torchvision's VGG16 load without renaming.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, CIFAR10_NORMALIZATION, IMAGENET_NORMALIZATION};
use crate::error::{Error, Result};
use crate::nn::{Conv3x3, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderRegime {
    /// ImageNet weights, never updated.
    #[default]
    PretrainedFrozen,
    /// Seeded random weights, never updated.
    RandomFrozen,
    /// Seeded random weights, trained with the agents.
    LearnedEndToEnd,
}

impl EncoderRegime {
    pub const ALL: [EncoderRegime; 3] = [
        EncoderRegime::PretrainedFrozen,
        EncoderRegime::RandomFrozen,
        EncoderRegime::LearnedEndToEnd,
    ];

    pub fn is_frozen(self) -> bool {
        !matches!(self, EncoderRegime::LearnedEndToEnd)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            EncoderRegime::PretrainedFrozen => "Pretrained & fixed",
            EncoderRegime::RandomFrozen => "Random & frozen",
            EncoderRegime::LearnedEndToEnd => "Learned end-end",
        }
    }

    /// Input normalization: ImageNet statistics for pretrained weights,
    /// CIFAR-10 statistics otherwise.
    pub fn normalization(self) -> Normalization {
        match self {
            EncoderRegime::PretrainedFrozen => IMAGENET_NORMALIZATION,
            _ => CIFAR10_NORMALIZATION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// VGG16 at 224x224, tapped at the second fully-connected layer (4096-d).
    Vgg16,
    /// Four conv/ReLU/max-pool blocks (32, 64, 128, 128 channels) on native
    /// 32x32 input, flattened to 512-d.
    Small,
}

impl Architecture {
    pub fn input_size(self) -> usize {
        match self {
            Architecture::Vgg16 => 224,
            Architecture::Small => 32,
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            Architecture::Vgg16 => 4096,
            Architecture::Small => 512,
        }
    }

    /// Conv output channels, `None` marking a 2x2 max-pool.
    fn plan(self) -> &'static [Option<usize>] {
        const M: Option<usize> = None;
        match self {
            Architecture::Vgg16 => &[
                Some(64), Some(64), M,
                Some(128), Some(128), M,
                Some(256), Some(256), Some(256), M,
                Some(512), Some(512), Some(512), M,
                Some(512), Some(512), Some(512), M,
            ],
            Architecture::Small => &[
                Some(32), M,
                Some(64), M,
                Some(128), M,
                Some(128), M,
            ],
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Conv(Conv3x3),
    Pool,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    prefix: String,
    arch: Architecture,
    regime: EncoderRegime,
    stages: Vec<Stage>,
    classifier: Vec<Linear>,
}

impl Encoder {
    /// Register the encoder's parameters under `prefix` (e.g. `"encoder."`).
    ///
    /// Random regimes draw He-uniform weights from `rng`; the pretrained regime
    /// requires `weights` and replaces every parameter with its contents.
    /// Frozen regimes mark the whole stack non-trainable.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        arch: Architecture,
        regime: EncoderRegime,
        weights: Option<&Path>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut stages = Vec::new();
        let mut in_ch = 3;
        // Sequential indices: a conv is followed by its ReLU, a pool stands alone.
        let mut idx = 0;
        for step in arch.plan() {
            match step {
                Some(out_ch) => {
                    let conv = Conv3x3::new(store, &format!("{prefix}features.{idx}"), in_ch, *out_ch, rng)?;
                    stages.push(Stage::Conv(conv));
                    in_ch = *out_ch;
                    idx += 2;
                }
                None => {
                    stages.push(Stage::Pool);
                    idx += 1;
                }
            }
        }
        let classifier = match arch {
            Architecture::Vgg16 => vec![
                Linear::new_he(store, &format!("{prefix}classifier.0"), 512 * 7 * 7, 4096, rng)?,
                Linear::new_he(store, &format!("{prefix}classifier.3"), 4096, 4096, rng)?,
            ],
            Architecture::Small => Vec::new(),
        };
        let encoder = Encoder {
            prefix: prefix.to_string(),
            arch,
            regime,
            stages,
            classifier,
        };

        match (regime, weights) {
            (EncoderRegime::PretrainedFrozen, None) => {
                return Err(Error::Config(
                    "the pretrained regime needs a weights file (encoder.weights_path)".into(),
                ))
            }
            (EncoderRegime::PretrainedFrozen, Some(path)) => encoder.load_weights(store, path)?,
            _ => {}
        }
        if regime.is_frozen() {
            store.freeze_prefix(prefix);
        }
        Ok(encoder)
    }

    /// Same stack under another (equally frozen) regime label.
    pub(crate) fn relabel(mut self, regime: EncoderRegime) -> Self {
        debug_assert_eq!(regime.is_frozen(), self.regime.is_frozen());
        self.regime = regime;
        self
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn regime(&self) -> EncoderRegime {
        self.regime
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_size()
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    /// Load an unprefixed safetensors file (torchvision naming).
    pub fn load_weights(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let raw = candle_core::safetensors::load(path, store.device())
            .map_err(|e| Error::load("encoder weights", path, e))?;
        for (name, t) in &raw {
            let finite = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::load("encoder weights", path, format!("{name} contains non-finite values")));
            }
        }
        let prefixed: HashMap<String, Tensor> = raw
            .into_iter()
            .map(|(k, v)| (format!("{}{k}", self.prefix), v))
            .collect();
        store.assign_from(&prefixed, &self.prefix, path)
    }

    /// Write the encoder's parameters without the store prefix, in the layout
    /// [`load_weights`](Self::load_weights) reads.
    pub fn export_weights(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = store
            .snapshot(&self.prefix)?
            .into_iter()
            .map(|(k, v)| (k[self.prefix.len()..].to_string(), v))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Bring `[batch, 3, h, w]` images to the encoder's resolution (bilinear,
    /// half-pixel centres). A no-op when the size already matches.
    pub fn prepare(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let s = self.input_size();
        if (h, w) == (s, s) {
            return Ok(images.clone());
        }
        Ok(images.upsample_bilinear2d(s, s, false)?)
    }

    /// `[batch, 3, s, s]` → `[batch, feature_dim]`. Frozen regimes return a
    /// detached tensor so no gradient reaches the stack.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images
            .dims4()
            .map_err(|_| Error::Shape(format!("expected [batch, 3, h, w], got {:?}", images.dims())))?;
        let s = self.input_size();
        if (c, h, w) != (3, s, s) {
            return Err(Error::Shape(format!(
                "encoder expects [batch, 3, {s}, {s}] input, got {:?}",
                images.dims()
            )));
        }
        let mut x = images.clone();
        for stage in &self.stages {
            x = match stage {
                Stage::Conv(conv) => conv.forward(&x)?.relu()?,
                Stage::Pool => x.max_pool2d(2)?,
            };
        }
        let mut x = x.flatten_from(1)?;
        for fc in &self.classifier {
            x = fc.forward(&x)?.relu()?;
        }
        debug_assert_eq!(x.dim(D::Minus1)?, self.feature_dim());
        Ok(if self.regime.is_frozen() { x.detach() } else { x })
    }
}

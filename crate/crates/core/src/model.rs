//! The full game model: encoders, Sender, Receiver and the optional
//! rotation head, built from an [`ExperimentConfig`].

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::agents::{argmax_rows, AgentDims, Receiver, RotationHead, Sender};
use crate::channel::{ChannelParams, MessageBatch, Vocabulary};
use crate::config::{DualTaskMode, ExperimentConfig};
use crate::data::images_to_tensor;
use crate::data::{GameBatch, Normalization};
use crate::checkpoint::Checkpoint;
use crate::encoder::{Architecture, Encoder, EncoderRegime};
use crate::error::{Error, Result};
use crate::metrics::GameOutcome;
use crate::nn::ParamStore;
use crate::objectives::{combine_losses, combine_loss_tensors, hinge_loss, rotation_loss_from_logits, scalar, LossBundle, LossSchedule};
use crate::rng::{derived, stream};

pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[games, candidates]`
    pub scores: Tensor,
    pub messages: MessageBatch,
    /// `[games, 4]`, present in dual-task modes.
    pub rotation_logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct GameModel {
    store: ParamStore,
    sender_encoder: Encoder,
    receiver_encoder: Encoder,
    sender: Sender,
    receiver: Receiver,
    rotation: Option<RotationHead>,
    mode: DualTaskMode,
    channel: ChannelParams,
    normalization: Normalization,
    game_size: usize,
}

impl GameModel {
    /// Build in f32 on `device`. Parameters are drawn from the config seed's
    /// init stream, so equal configs give equal models.
    pub fn build(config: &ExperimentConfig, device: &Device) -> Result<Self> {
        Self::build_with_dtype(config, device, DType::F32)
    }

    pub fn build_with_dtype(config: &ExperimentConfig, device: &Device, dtype: DType) -> Result<Self> {
        Self::build_inner(config, device, dtype, true)
    }

    /// Rebuild the model a checkpoint was written from and load its tensors.
    /// The pretrained weights file is not needed; its contents are in the
    /// checkpoint.
    pub fn from_checkpoint(checkpoint: &Checkpoint, device: &Device) -> Result<Self> {
        let model = Self::build_inner(&checkpoint.config, device, DType::F32, false)?;
        checkpoint.restore(&model, None)?;
        Ok(model)
    }

    fn build_inner(config: &ExperimentConfig, device: &Device, dtype: DType, load_weights: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = derived(config.seed, stream::INIT);
        let mut store = ParamStore::new(device.clone(), dtype);
        let arch = if config.encoder.small {
            Architecture::Small
        } else {
            Architecture::Vgg16
        };
        let regime = config.encoder.regime;
        let weights = config.encoder.weights_path.as_deref();
        let mut build = |prefix: &str| -> Result<Encoder> {
            if load_weights || regime != EncoderRegime::PretrainedFrozen {
                Encoder::build(&mut store, prefix, arch, regime, weights, &mut rng)
            } else {
                // Same topology and trainability; the tensors come from elsewhere.
                Ok(Encoder::build(&mut store, prefix, arch, EncoderRegime::RandomFrozen, None, &mut rng)?.relabel(regime))
            }
        };
        let (sender_encoder, receiver_encoder) = if config.encoder.shared {
            let e = build(ENCODER_PREFIX)?;
            (e.clone(), e)
        } else {
            (build("encoder.sender.")?, build("encoder.receiver.")?)
        };
        let vocab = Vocabulary::with_size(config.channel.vocab_size)?;
        let dims = AgentDims {
            feature_dim: arch.feature_dim(),
            embed_dim: config.agent.embed_dim,
            hidden_dim: config.agent.hidden_dim,
            score_dim: config.agent.score_dim,
            max_len: config.channel.max_len,
        };
        let sender = Sender::new(&mut store, "sender.", vocab, dims, &mut rng)?;
        let receiver = Receiver::new(&mut store, "receiver.", vocab, dims, config.game.size, &mut rng)?;
        let mode = config.dual_task.mode;
        let rotation = if mode.is_dual() {
            Some(RotationHead::new(&mut store, "rotation.", dims.hidden_dim, &mut rng)?)
        } else {
            None
        };
        Ok(GameModel {
            store,
            sender_encoder,
            receiver_encoder,
            sender,
            receiver,
            rotation,
            mode,
            channel: ChannelParams::new(config.channel.temperature)?,
            normalization: regime.normalization(),
            game_size: config.game.size,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn sender(&self) -> &Sender {
        &self.sender
    }

    pub fn receiver(&self) -> &Receiver {
        &self.receiver
    }

    pub fn mode(&self) -> DualTaskMode {
        self.mode
    }

    pub fn game_size(&self) -> usize {
        self.game_size
    }

    pub fn channel(&self) -> &ChannelParams {
        &self.channel
    }

    /// Checksum of every encoder tensor (shared or separate).
    pub fn encoder_checksum(&self) -> Result<String> {
        self.store.checksum(ENCODER_PREFIX)
    }

    /// Write the Sender's encoder in the format `encoder.weights_path` reads.
    pub fn export_sender_encoder(&self, path: &std::path::Path) -> Result<()> {
        self.sender_encoder.export_weights(&self.store, path)
    }

    fn images(&self, images: &[crate::data::Image]) -> Result<Tensor> {
        let x = images_to_tensor(images, self.store.device(), self.store.dtype())?;
        let mean = Tensor::new(&self.normalization.mean, self.store.device())?
            .to_dtype(self.store.dtype())?
            .reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&self.normalization.std, self.store.device())?
            .to_dtype(self.store.dtype())?
            .reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    fn features(&self, encoder: &Encoder, images: &[crate::data::Image]) -> Result<Tensor> {
        let x = self.images(images)?;
        encoder.encode(&encoder.prepare(&x)?)
    }

    /// Play every game of `batch`. `greedy` switches the channel to argmax
    /// decoding (analysis only).
    pub fn forward(&self, batch: &GameBatch, train: bool, greedy: bool, rng: &mut impl Rng) -> Result<ForwardOutput> {
        if batch.receiver_view.len() != self.game_size {
            return Err(Error::Shape(format!(
                "model plays {}-candidate games, batch has {}",
                self.game_size,
                batch.receiver_view.len()
            )));
        }
        let channel = ChannelParams {
            greedy,
            ..self.channel
        };
        let sender_features = self.features(&self.sender_encoder, &batch.sender_views)?;
        let generated = self.sender.generate(&sender_features, &channel, train, rng)?;
        let candidates = self.features(&self.receiver_encoder, &batch.receiver_view.images)?;
        let received = self.receiver.score(&generated.messages, &candidates, train)?;
        let rotation_logits = match (&self.rotation, self.mode) {
            (Some(head), DualTaskMode::SenderPredicts) => Some(head.logits(&generated.visual_state, train)?),
            (Some(head), DualTaskMode::ReceiverPredicts) => Some(head.logits(&received.message_state, train)?),
            _ => None,
        };
        Ok(ForwardOutput {
            scores: received.scores,
            messages: generated.messages,
            rotation_logits,
        })
    }

    /// Combined training loss for optimizer step `step` plus its scalar parts.
    pub fn loss(
        &self,
        output: &ForwardOutput,
        batch: &GameBatch,
        schedule: &LossSchedule,
        margin: f64,
        step: u64,
    ) -> Result<(Tensor, LossBundle)> {
        let targets: Vec<usize> = (0..batch.len()).collect();
        let game = hinge_loss(&output.scores, &targets, margin)?;
        let rotation = match &output.rotation_logits {
            Some(logits) => Some(rotation_loss_from_logits(logits, &batch.rotation_labels)?),
            None => None,
        };
        let combined = combine_loss_tensors(&game, rotation.as_ref(), schedule, step)?;
        let rotation_value = rotation.as_ref().map(scalar).transpose()?;
        let bundle = combine_losses(scalar(&game)?, rotation_value, schedule, step)?;
        Ok((combined, bundle))
    }

    /// Per-game outcomes of a forward pass; game `i` targets candidate `i`.
    pub fn outcomes(&self, output: &ForwardOutput, batch: &GameBatch) -> Result<Vec<GameOutcome>> {
        let scores = output.scores.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let predicted = match &output.rotation_logits {
            Some(l) => Some(argmax_rows(l)?),
            None => None,
        };
        let classes = &batch.receiver_view.labels;
        scores
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let message = &output.messages.messages[i];
                let mut o = GameOutcome::new(row, i, classes.clone())?
                    .with_message(message.raw_ids().to_vec(), message.effective_length());
                if let Some(p) = &predicted {
                    o = o.with_rotation(p[i] == batch.rotation_labels[i] as usize);
                }
                Ok(o)
            })
            .collect()
    }
}

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::augment::{sender_augment, AugmentationConfig, Image};
use crate::error::{Error, Result};

/// Images of equal size with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
}

impl ImageBatch {
    pub fn new(images: Vec<Image>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if images
                .iter()
                .any(|im| (im.height, im.width) != (first.height, first.width))
            {
                return Err(Error::Shape("images in a batch must share one size".into()));
            }
        }
        Ok(ImageBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[batch, 3, height, width]` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        images_to_tensor(&self.images, device, dtype)
    }
}

pub(crate) fn images_to_tensor(images: &[Image], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot build a tensor from zero images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut flat = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::Shape("images in a batch must share one size".into()));
        }
        flat.extend_from_slice(&im.pixels);
    }
    Ok(Tensor::from_vec(flat, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// One game: the Receiver sees every image of `receiver_view`, the Sender sees
/// an augmented copy of `receiver_view.images[target_index]`.
#[derive(Debug, Clone)]
pub struct GameRound {
    pub receiver_view: Arc<ImageBatch>,
    pub sender_view: Image,
    pub target_index: usize,
    pub rotation_label: u8,
}

impl GameRound {
    pub fn target_class(&self) -> u8 {
        self.receiver_view.labels[self.target_index]
    }
}

fn check_game_size(batch: &ImageBatch, game_size: usize) -> Result<()> {
    if batch.len() != game_size {
        return Err(Error::Config(format!(
            "a game needs exactly {game_size} candidates, batch has {}",
            batch.len()
        )));
    }
    Ok(())
}

pub fn make_game_round(
    batch: &Arc<ImageBatch>,
    target_index: usize,
    game_size: usize,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<GameRound> {
    check_game_size(batch, game_size)?;
    if target_index >= game_size {
        return Err(Error::Domain(format!(
            "target index {target_index} outside 0..{game_size}"
        )));
    }
    let (sender_view, rotation_label) =
        sender_augment(&batch.images[target_index], config, rng);
    Ok(GameRound {
        receiver_view: Arc::clone(batch),
        sender_view,
        target_index,
        rotation_label,
    })
}

/// All games of one batch: game `i` has candidate `i` as its target, and all
/// games share the batch as their candidate set.
#[derive(Debug, Clone)]
pub struct GameBatch {
    pub receiver_view: Arc<ImageBatch>,
    pub sender_views: Vec<Image>,
    pub rotation_labels: Vec<u8>,
}

impl GameBatch {
    pub fn len(&self) -> usize {
        self.sender_views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sender_views.is_empty()
    }

    pub fn round(&self, target_index: usize) -> GameRound {
        GameRound {
            receiver_view: Arc::clone(&self.receiver_view),
            sender_view: self.sender_views[target_index].clone(),
            target_index,
            rotation_label: self.rotation_labels[target_index],
        }
    }
}

pub fn make_game_batch(
    batch: ImageBatch,
    game_size: usize,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<GameBatch> {
    check_game_size(&batch, game_size)?;
    let (sender_views, rotation_labels) = batch
        .images
        .iter()
        .map(|im| sender_augment(im, config, rng))
        .unzip();
    Ok(GameBatch {
        receiver_view: Arc::new(batch),
        sender_views,
        rotation_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::augment::rotate_quarter_turns;
    use crate::rng::seeded;

    fn batch(n: usize, seed: u64) -> ImageBatch {
        let mut rng = seeded(seed);
        let images = (0..n)
            .map(|_| {
                Image::new(4, 4, (0..48).map(|_| rng.random::<f32>()).collect()).unwrap()
            })
            .collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        ImageBatch::new(images, labels).unwrap()
    }

    #[test]
    fn plain_round_copies_target() {
        let b = Arc::new(batch(128, 0));
        let r = make_game_round(&b, 0, 128, &AugmentationConfig::identity(), &mut seeded(1))
            .unwrap();
        assert_eq!(r.sender_view, b.images[0]);
        assert_eq!(r.rotation_label, 0);
        assert_eq!(r.receiver_view.len(), 128);
    }

    #[test]
    fn wrong_batch_size_is_config_error() {
        let b = Arc::new(batch(64, 0));
        let err = make_game_round(&b, 0, 128, &AugmentationConfig::identity(), &mut seeded(1))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(make_game_batch(batch(64, 0), 128, &AugmentationConfig::identity(), &mut seeded(1)).is_err());
    }

    #[test]
    fn out_of_range_target_rejected() {
        let b = Arc::new(batch(8, 0));
        assert!(make_game_round(&b, 8, 8, &AugmentationConfig::identity(), &mut seeded(1)).is_err());
    }

    #[test]
    fn rotated_round_matches_direct_rotation() {
        let b = Arc::new(batch(128, 3));
        let cfg = AugmentationConfig {
            sender_rotation: true,
            ..AugmentationConfig::identity()
        };
        let mut rng = seeded(8);
        for _ in 0..16 {
            let r = make_game_round(&b, 5, 128, &cfg, &mut rng).unwrap();
            let oracle = rotate_quarter_turns(&b.images[5], r.rotation_label);
            assert_eq!(r.sender_view, oracle);
        }
    }

    #[test]
    fn sender_augmentation_leaves_receiver_untouched() {
        let original = batch(16, 4);
        let cfg = AugmentationConfig {
            sender_rotation: true,
            sender_noise: true,
            ..AugmentationConfig::identity()
        };
        let games = make_game_batch(original.clone(), 16, &cfg, &mut seeded(2)).unwrap();
        assert_eq!(*games.receiver_view, original);
        assert_eq!(games.len(), 16);
        assert_eq!(games.round(3).target_class(), original.labels[3]);
    }

    #[test]
    fn tensor_layout_is_channel_major() {
        let b = batch(2, 5);
        let t = b.to_tensor(&Device::Cpu, DType::F32).unwrap();
        assert_eq!(t.dims(), &[2, 3, 4, 4]);
        let v: f32 = t.get(1).unwrap().get(2).unwrap().get(3).unwrap().get(1).unwrap().to_scalar().unwrap();
        assert_eq!(v, b.images[1].at(2, 3, 1));
    }
}

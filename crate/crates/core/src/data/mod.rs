//! CIFAR-10 ingestion, augmentation and game-round assembly.

mod augment;
mod cifar;
pub mod fixtures;
mod game;

pub use augment::{
    base_augment, grayscale, hflip, rotate_quarter_turns, sender_augment, sender_augment_with,
    AugmentationConfig, Image, Normalization, CIFAR10_NORMALIZATION, IMAGENET_NORMALIZATION,
};
pub use cifar::{load_cifar10, Cifar10, Split, CIFAR_CLASSES, CIFAR_SIDE};
pub(crate) use game::images_to_tensor;
pub use game::{make_game_batch, make_game_round, GameBatch, GameRound, ImageBatch};

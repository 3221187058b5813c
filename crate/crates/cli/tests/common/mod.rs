#![allow(dead_code)]

use std::path::Path;

use refgame::data::fixtures::write_cifar_dir;
use refgame::encoder::EncoderRegime;
use refgame::ExperimentConfig;

/// A one-epoch small-encoder config reading synthetic CIFAR files from `data`.
pub fn smoke_config(data: &Path, regime: EncoderRegime) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.path = Some(data.to_path_buf());
    c.encoder.regime = regime;
    c.encoder.small = true;
    c.game.size = 16;
    c.epochs = 1;
    c.eval_games = 32;
    c.train.quick_eval_games = 16;
    c.train.checkpoint_every = 1;
    c
}

pub fn synthetic_data(dir: &Path) {
    write_cifar_dir(dir, 80, 48, 5).unwrap();
}

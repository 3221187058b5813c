use std::path::PathBuf;

use refgame::encoder::EncoderRegime;
use refgame::ExperimentConfig;
use refgame_cli::matrix::ExperimentMatrix;

fn shipped(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

#[test]
fn smoke_config_is_the_small_random_frozen_recipe() {
    let c = shipped("smoke.toml");
    c.validate().unwrap();
    assert!(c.encoder.small);
    assert_eq!(c.encoder.regime, EncoderRegime::RandomFrozen);
    assert_eq!((c.epochs, c.game.size), (20, 128));
}

#[test]
fn full_config_expands_to_eleven_valid_rows() {
    let c = shipped("full.toml");
    c.validate().unwrap();
    assert_eq!(c, {
        let mut d = ExperimentConfig::default();
        d.encoder.regime = EncoderRegime::PretrainedFrozen;
        d.encoder.weights_path = c.encoder.weights_path.clone();
        d.train.checkpoint_every = 10;
        d
    });
    let m = ExperimentMatrix::paper(&c);
    m.validate().unwrap();
    assert_eq!(m.rows.len(), 11);
}

//! End-to-end training properties on synthetic CIFAR-format data.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use refgame::checkpoint::{checkpoint_dir, load_checkpoint};
use refgame::data::fixtures::synthetic_split;
use refgame::data::{Cifar10, Split};
use refgame::encoder::EncoderRegime;
use refgame::model::{GameModel, ENCODER_PREFIX};
use refgame::trainer::{evaluate, read_metrics_log, Trainer, METRICS_LOG};
use refgame::{Error, ExperimentConfig};

fn config(dir: &Path, regime: EncoderRegime) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.output_dir = Some(dir.to_path_buf());
    c.encoder.regime = regime;
    c.encoder.small = true;
    c.game.size = 16;
    c.epochs = 3;
    c.eval_games = 64;
    c.train.quick_eval_games = 64;
    c.train.checkpoint_every = 1;
    c
}

fn data() -> (Cifar10, Cifar10) {
    (
        synthetic_split(Split::Train, 160, 1).unwrap(),
        synthetic_split(Split::Test, 64, 2).unwrap(),
    )
}

fn trainer(cfg: &ExperimentConfig) -> Trainer {
    let (train, test) = data();
    Trainer::from_datasets(cfg, train, test, &Device::Cpu).unwrap()
}

#[test]
fn two_epoch_smoke_run_reduces_game_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), EncoderRegime::RandomFrozen);
    cfg.epochs = 2;
    let train = synthetic_split(Split::Train, 640, 1).unwrap();
    let test = synthetic_split(Split::Test, 64, 2).unwrap();
    let summary = Trainer::from_datasets(&cfg, train, test, &Device::Cpu).unwrap().run().unwrap();
    let r = &summary.records;
    assert_eq!(r.len(), 2);
    assert!(r[1].game_loss < r[0].game_loss, "{} then {}", r[0].game_loss, r[1].game_loss);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let cfg = config(full_dir.path(), EncoderRegime::LearnedEndToEnd);
    let mut full = trainer(&cfg);
    full.run().unwrap();
    let uninterrupted = read_metrics_log(&full_dir.path().join(METRICS_LOG)).unwrap();

    let resumed_dir = tempfile::tempdir().unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.output_dir = Some(resumed_dir.path().to_path_buf());
    let mut resumed = trainer(&cfg2);
    resumed.resume(&checkpoint_dir(full_dir.path(), 2)).unwrap();
    assert_eq!(resumed.epoch(), 2);
    let third = resumed.train_epoch().unwrap();
    assert_eq!(third, uninterrupted[2]);
    assert_eq!(
        resumed.model().store().checksum("").unwrap(),
        full.model().store().checksum("").unwrap()
    );
}

#[test]
fn identical_configs_give_identical_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = config(a.path(), EncoderRegime::RandomFrozen);
    cfg.epochs = 2;
    trainer(&cfg).run().unwrap();
    cfg.output_dir = Some(b.path().to_path_buf());
    trainer(&cfg).run().unwrap();
    let la = std::fs::read_to_string(a.path().join(METRICS_LOG)).unwrap();
    let lb = std::fs::read_to_string(b.path().join(METRICS_LOG)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(
        std::fs::read_to_string(a.path().join("report.json")).unwrap(),
        std::fs::read_to_string(b.path().join("report.json")).unwrap()
    );
}

#[test]
fn random_frozen_encoder_never_moves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), EncoderRegime::RandomFrozen);
    let mut t = trainer(&cfg);
    let before = t.model().store().snapshot(ENCODER_PREFIX).unwrap();
    let sender_before = t.model().store().checksum("sender.").unwrap();
    t.run().unwrap();
    let after = t.model().store().snapshot(ENCODER_PREFIX).unwrap();
    for (name, b) in &before {
        let delta = (b - &after[name]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(delta, 0.0, "{name}");
    }
    assert_ne!(t.model().store().checksum("sender.").unwrap(), sender_before);
}

#[test]
fn checkpoint_refuses_other_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), EncoderRegime::RandomFrozen);
    cfg.epochs = 1;
    trainer(&cfg).run().unwrap();
    let other_dir = tempfile::tempdir().unwrap();
    let mut other = cfg.clone();
    other.output_dir = Some(other_dir.path().to_path_buf());
    other.seed = 7;
    let mut t = trainer(&other);
    let err = t.resume(&checkpoint_dir(tmp.path(), 1)).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    let ck = load_checkpoint(&checkpoint_dir(tmp.path(), 1)).unwrap();
    assert_eq!(ck.state.step_index, 10);
}

#[test]
fn untrained_model_plays_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), EncoderRegime::RandomFrozen);
    cfg.game.size = 128;
    let model = GameModel::build(&cfg, &Device::Cpu).unwrap();
    let test = synthetic_split(Split::Test, 1280, 3).unwrap();
    let (report, outcomes) = evaluate(&model, &cfg, &test, 10_000, false).unwrap();
    assert_eq!(outcomes.len(), 10_000);
    assert!((report.comm_rate - 1.0 / 128.0).abs() <= 0.003, "comm rate {}", report.comm_rate);
}

#[test]
fn non_finite_weights_file_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let reference = GameModel::build(&config(tmp.path(), EncoderRegime::RandomFrozen), &Device::Cpu).unwrap();
    let poisoned: HashMap<String, Tensor> = reference
        .store()
        .snapshot(ENCODER_PREFIX)
        .unwrap()
        .into_iter()
        .map(|(k, v)| {
            let nan = Tensor::full(f32::NAN, v.dims(), &Device::Cpu).unwrap();
            (k[ENCODER_PREFIX.len()..].to_string(), nan)
        })
        .collect();
    let weights = tmp.path().join("nan.safetensors");
    candle_core::safetensors::save(&poisoned, &weights).unwrap();
    let mut cfg = config(tmp.path(), EncoderRegime::PretrainedFrozen);
    cfg.encoder.weights_path = Some(weights);
    let (train, test) = data();
    let err = Trainer::from_datasets(&cfg, train, test, &Device::Cpu).err().unwrap();
    assert!(matches!(err, Error::Load { .. }), "{err}");
    assert!(err.to_string().contains("non-finite"));
}

#[test]
fn divergence_aborts_with_diagnostic_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), EncoderRegime::LearnedEndToEnd);
    cfg.optim.lr = 1e30;
    let err = trainer(&cfg).run().unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    assert!(tmp.path().join("checkpoints/diverged/state.json").exists());
}

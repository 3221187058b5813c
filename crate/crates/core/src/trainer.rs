//! Training loop, evaluation and run artifacts (config, metrics log,
//! checkpoints, report).

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::Device;
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_dir, load_checkpoint, save_checkpoint, TrainingState};
use crate::config::ExperimentConfig;
use crate::data::{base_augment, load_cifar10, make_game_batch, AugmentationConfig, Cifar10, ImageBatch, Split};
use crate::error::{Error, Result};
use crate::metrics::{EvaluationReport, GameOutcome};
use crate::model::GameModel;
use crate::objectives::LossSchedule;
use crate::optim::Adam;
use crate::rng::{derived, stream, GameRng, RngState};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_SPLIT_NOTE: &str =
    "CIFAR-10 test split (10000 images) stands in for the validation set; CIFAR-10 has no separate validation split";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Epoch means over optimizer steps.
    pub game_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_loss: Option<f64>,
    pub combined_loss: f64,
    /// Quick evaluation on the test split.
    pub comm_rate: f64,
    pub top5_comm_rate: f64,
    pub mean_msg_len: f64,
    pub target_class_top5_mean: f64,
    pub target_class_avg_rank: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_accuracy: Option<f64>,
    pub config_hash: String,
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| Error::load("metrics log", path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Design flags and provenance embedded in every report.
pub fn provenance(config: &ExperimentConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("config_hash".to_string(), config.hash()),
        ("seed".to_string(), config.seed.to_string()),
        ("length_includes_eos".to_string(), "true".to_string()),
        ("hinge_margin".to_string(), config.loss.margin.to_string()),
        ("temperature".to_string(), config.channel.temperature.to_string()),
        ("encoder_regime".to_string(), config.encoder.regime.display_name().to_string()),
        ("dual_task".to_string(), format!("{:?}", config.dual_task.mode)),
        ("eval_split".to_string(), EVAL_SPLIT_NOTE.to_string()),
    ])
}

/// Play `games` evaluation games on `data` in evaluation mode.
///
/// The split is shuffled and cut into batches of one game size (a trailing
/// partial batch is dropped); every image of a batch is the target of one
/// game. Passes repeat with a fresh shuffle until `games` outcomes exist.
/// Only sender-side augmentation is applied.
pub fn play_games(
    model: &GameModel,
    data: &Cifar10,
    augmentation: &AugmentationConfig,
    games: usize,
    greedy: bool,
    rng: &mut GameRng,
) -> Result<Vec<GameOutcome>> {
    let n = model.game_size();
    if data.len() < n {
        return Err(Error::Config(format!(
            "evaluation split has {} images, fewer than one {n}-candidate game",
            data.len()
        )));
    }
    let mut outcomes = Vec::with_capacity(games);
    let mut order: Vec<usize> = (0..data.len()).collect();
    while outcomes.len() < games {
        order.shuffle(rng);
        for chunk in order.chunks_exact(n) {
            if outcomes.len() >= games {
                break;
            }
            let batch = ImageBatch::new(chunk.iter().map(|&i| data.image(i)).collect(), chunk.iter().map(|&i| data.label(i)).collect())?;
            let batch = make_game_batch(batch, n, augmentation, rng)?;
            let out = model.forward(&batch, false, greedy, rng)?;
            let take = games - outcomes.len();
            outcomes.extend(model.outcomes(&out, &batch)?.into_iter().take(take));
        }
    }
    Ok(outcomes)
}

/// The full evaluation report over `config.eval_games` games with the
/// config's evaluation stream.
pub fn evaluate(
    model: &GameModel,
    config: &ExperimentConfig,
    test: &Cifar10,
    games: usize,
    greedy: bool,
) -> Result<(EvaluationReport, Vec<GameOutcome>)> {
    let mut rng = derived(config.seed, stream::EVAL);
    let outcomes = play_games(model, test, &config.augmentation(), games, greedy, &mut rng)?;
    let mut report = EvaluationReport::from_outcomes(&outcomes)?;
    report.provenance = provenance(config);
    report.provenance.insert("greedy".into(), greedy.to_string());
    Ok((report, outcomes))
}

/// Write per-game outcomes as line-delimited JSON.
pub fn write_outcomes(path: &Path, outcomes: &[GameOutcome]) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for o in outcomes {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(path: &Path, report: &EvaluationReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

/// Load both splits named by the config (path or `REFGAME_DATA`), applying
/// the configured size limits.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Cifar10, Cifar10)> {
    let path = config.data_path()?;
    let mut train = load_cifar10(&path, Split::Train)?;
    let mut test = load_cifar10(&path, Split::Test)?;
    if let Some(n) = config.data.train_limit {
        train.truncate(n);
    }
    if let Some(n) = config.data.test_limit {
        test.truncate(n);
    }
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub report: EvaluationReport,
    pub output_dir: PathBuf,
}

/// Owns the model, optimizer, data and training stream of one run.
pub struct Trainer {
    config: ExperimentConfig,
    hash: String,
    model: GameModel,
    optimizer: Adam,
    schedule: LossSchedule,
    augmentation: AugmentationConfig,
    train: Cifar10,
    test: Cifar10,
    rng: GameRng,
    epoch: usize,
    step: u64,
    output_dir: PathBuf,
}

impl Trainer {
    /// Validate the config, load data and build the model. Every config or
    /// data problem surfaces here, before any optimizer step.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_datasets(config)?;
        Self::from_datasets(config, train, test, &Device::Cpu)
    }

    pub fn from_datasets(config: &ExperimentConfig, train: Cifar10, test: Cifar10, device: &Device) -> Result<Self> {
        config.validate()?;
        let n = config.game.size;
        if train.len() < n {
            return Err(Error::Config(format!(
                "training split has {} images, fewer than one {n}-candidate game",
                train.len()
            )));
        }
        if test.len() < n {
            return Err(Error::Config(format!(
                "test split has {} images, fewer than one {n}-candidate game",
                test.len()
            )));
        }
        let model = GameModel::build(config, device)?;
        let optimizer = Adam::new(model.store().trainable(), &config.optim)?;
        let output_dir = config.output_dir();
        std::fs::create_dir_all(&output_dir)?;
        config.save(&output_dir.join(CONFIG_FILE))?;
        Ok(Trainer {
            hash: config.hash(),
            schedule: LossSchedule::from_config(config),
            augmentation: config.augmentation(),
            config: config.clone(),
            model,
            optimizer,
            train,
            test,
            rng: derived(config.seed, stream::TRAIN),
            epoch: 0,
            step: 0,
            output_dir,
        })
    }

    /// Continue from a checkpoint written by a run with the same config.
    /// Metrics-log lines after the checkpoint's epoch are discarded.
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let ck = load_checkpoint(dir)?;
        ck.ensure_matches(&self.config)?;
        ck.restore(&self.model, Some(&mut self.optimizer))?;
        self.rng = ck.state.rng.restore()?;
        self.epoch = ck.state.epoch;
        self.step = ck.state.step_index;
        let log = self.output_dir.join(METRICS_LOG);
        if log.exists() {
            let kept: Vec<EpochRecord> = read_metrics_log(&log)?
                .into_iter()
                .filter(|r| r.epoch <= self.epoch)
                .collect();
            let mut w = File::create(&log)?;
            for r in kept {
                writeln!(w, "{}", serde_json::to_string(&r)?)?;
            }
        }
        info!("resumed {} at epoch {} step {}", dir.display(), self.epoch, self.step);
        Ok(())
    }

    pub fn model(&self) -> &GameModel {
        &self.model
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len() / self.config.game.size
    }

    pub fn state(&self) -> TrainingState {
        TrainingState {
            epoch: self.epoch,
            step_index: self.step,
            rng: RngState::capture(&self.rng),
            config_hash: self.hash.clone(),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(&self.model, &self.optimizer, &self.state(), &self.config, dir)
    }

    /// One optimizer step on the training images `indices`. Returns the
    /// step's loss bundle.
    pub fn train_step(&mut self, indices: &[usize]) -> Result<crate::objectives::LossBundle> {
        let n = self.config.game.size;
        let images = indices
            .iter()
            .map(|&i| base_augment(&self.train.image(i), &self.augmentation, &mut self.rng))
            .collect();
        let labels = indices.iter().map(|&i| self.train.label(i)).collect();
        let batch = make_game_batch(ImageBatch::new(images, labels)?, n, &self.augmentation, &mut self.rng)?;
        let out = match self.model.forward(&batch, true, false, &mut self.rng) {
            Ok(out) => out,
            Err(Error::Numeric(reason)) => return Err(self.diverged(reason)),
            Err(e) => return Err(e),
        };
        let (loss, bundle) = self
            .model
            .loss(&out, &batch, &self.schedule, self.config.loss.margin, self.step)?;
        if !bundle.combined.is_finite() {
            return Err(self.diverged(format!(
                "non-finite loss (game {}, rotation {:?})",
                bundle.game_loss, bundle.rotation_loss
            )));
        }
        self.optimizer.backward_step(&loss)?;
        self.step += 1;
        Ok(bundle)
    }

    /// Write a diagnostic checkpoint of the pre-step state and build the
    /// error that aborts training.
    fn diverged(&self, reason: String) -> Error {
        let dir = self.output_dir.join("checkpoints").join("diverged");
        match self.save_checkpoint(&dir) {
            Ok(()) => warn!("diagnostic checkpoint written to {}", dir.display()),
            Err(e) => warn!("could not write diagnostic checkpoint: {e}"),
        }
        Error::Diverged {
            epoch: self.epoch + 1,
            step: self.step,
            reason,
        }
    }

    /// Train one epoch, run the quick evaluation, append the log line and
    /// checkpoint when due.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let n = self.config.game.size;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut game, mut rotation, mut combined, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks_exact(n) {
            let b = self.train_step(chunk)?;
            game += b.game_loss;
            rotation += b.rotation_loss.unwrap_or(0.0);
            combined += b.combined;
            steps += 1;
        }
        self.epoch += 1;
        let steps_f = steps as f64;

        let mut quick_rng = derived(self.config.seed, stream::QUICK_EVAL);
        let outcomes = play_games(
            &self.model,
            &self.test,
            &self.augmentation,
            self.config.train.quick_eval_games,
            false,
            &mut quick_rng,
        )?;
        let report = EvaluationReport::from_outcomes(&outcomes)?;
        let record = EpochRecord {
            epoch: self.epoch,
            step: self.step,
            game_loss: game / steps_f,
            rotation_loss: self.config.dual_task.mode.is_dual().then_some(rotation / steps_f),
            combined_loss: combined / steps_f,
            comm_rate: report.comm_rate,
            top5_comm_rate: report.top5_comm_rate,
            mean_msg_len: report.mean_msg_len.unwrap_or(0.0),
            target_class_top5_mean: report.target_class_top5_mean,
            target_class_avg_rank: report.target_class_avg_rank,
            rotation_accuracy: report.rotation_accuracy,
            config_hash: self.hash.clone(),
        };
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.output_dir.join(METRICS_LOG))?;
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        info!(
            "epoch {} step {}: game loss {:.4}, comm rate {:.3}, length {:.2}",
            record.epoch, record.step, record.game_loss, record.comm_rate, record.mean_msg_len
        );

        let every = self.config.train.checkpoint_every;
        if (every > 0 && self.epoch % every == 0) || self.epoch == self.config.epochs {
            self.save_checkpoint(&checkpoint_dir(&self.output_dir, self.epoch))?;
        }
        Ok(record)
    }

    /// Train the remaining epochs, then write the full evaluation report.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let log = self.output_dir.join(METRICS_LOG);
        if self.epoch == 0 && log.exists() {
            std::fs::remove_file(&log)?;
        }
        while self.epoch < self.config.epochs {
            self.train_epoch()?;
        }
        let (mut report, _) = evaluate(&self.model, &self.config, &self.test, self.config.eval_games, false)?;
        report.provenance.insert("epoch".into(), self.epoch.to_string());
        write_report(&self.output_dir.join(REPORT_FILE), &report)?;
        Ok(TrainSummary {
            records: if log.exists() { read_metrics_log(&log)? } else { Vec::new() },
            report,
            output_dir: self.output_dir.clone(),
        })
    }
}

/// Train a config from scratch (or from `resume`) to completion.
pub fn train(config: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(config)?;
    if let Some(dir) = resume {
        trainer.resume(dir)?;
    }
    trainer.run()
}

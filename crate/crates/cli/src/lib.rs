//! Experiment orchestration on top of `refgame`: checkpoint evaluation,
//! experiment matrices, training-curve plots and message inspection.

pub mod inspect;
pub mod matrix;
pub mod plot;

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use refgame::checkpoint::load_checkpoint;
use refgame::data::{load_cifar10, Cifar10, Split};
use refgame::metrics::{EvaluationReport, GameOutcome};
use refgame::model::GameModel;
use refgame::trainer::{evaluate, play_games};
use refgame::rng::{derived, stream};
use refgame::{ExperimentConfig, Result};

use crate::inspect::{inspect_outcomes, MessageReport};

/// The test split for `config`, read from `data` when given, else from the
/// config's data location (or `REFGAME_DATA`).
pub fn load_test_split(config: &ExperimentConfig, data: Option<&Path>) -> Result<Cifar10> {
    let path = match data {
        Some(p) => p.to_path_buf(),
        None => config.data_path()?,
    };
    let mut test = load_cifar10(&path, Split::Test)?;
    if let Some(n) = config.data.test_limit {
        test.truncate(n);
    }
    Ok(test)
}

/// Evaluate the model stored in checkpoint `ckpt` on `games` games
/// (default: the config's `eval_games`).
pub fn eval_checkpoint(
    ckpt: &Path,
    games: Option<usize>,
    greedy: bool,
    data: Option<&Path>,
) -> Result<(EvaluationReport, Vec<GameOutcome>)> {
    let ck = load_checkpoint(ckpt)?;
    let model = GameModel::from_checkpoint(&ck, &Device::Cpu)?;
    let test = load_test_split(&ck.config, data)?;
    let (mut report, outcomes) = evaluate(&model, &ck.config, &test, games.unwrap_or(ck.config.eval_games), greedy)?;
    report.provenance.insert("epoch".into(), ck.state.epoch.to_string());
    report.provenance.insert("checkpoint".into(), ckpt.display().to_string());
    Ok((report, outcomes))
}

/// Play `games` games with an already built model and summarize its messages.
pub fn inspect_model(
    model: &GameModel,
    config: &ExperimentConfig,
    test: &Cifar10,
    games: usize,
    greedy: bool,
) -> Result<MessageReport> {
    let mut rng = derived(config.seed, stream::EVAL);
    let outcomes = play_games(model, test, &config.augmentation(), games, greedy, &mut rng)?;
    let mut report = inspect_outcomes(&outcomes, config.channel.vocab_size)?;
    report.config_hash = config.hash();
    Ok(report)
}

pub fn inspect_checkpoint(ckpt: &Path, games: usize, greedy: bool, data: Option<&Path>) -> Result<MessageReport> {
    let ck = load_checkpoint(ckpt)?;
    let model = GameModel::from_checkpoint(&ck, &Device::Cpu)?;
    let test = load_test_split(&ck.config, data)?;
    inspect_model(&model, &ck.config, &test, games, greedy)
}

/// Write `messages.jsonl` (one record per game) and `message_report.json`
/// (everything else) into `dir`.
pub fn write_message_report(report: &MessageReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let records_path = dir.join("messages.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&records_path)?);
    for r in &report.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let summary = MessageReport {
        records: Vec::new(),
        ..report.clone()
    };
    let summary_path = dir.join("message_report.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok((records_path, summary_path))
}

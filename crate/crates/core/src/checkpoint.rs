//! Training checkpoints: a directory holding `tensors.safetensors` (model
//! parameters, batch-norm statistics, Adam moments) and `state.json`
//! (epoch, step, training-stream position, config).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::GameModel;
use crate::optim::Adam;
use crate::rng::RngState;

pub const CHECKPOINT_VERSION: u32 = 1;
const TENSORS_FILE: &str = "tensors.safetensors";
const STATE_FILE: &str = "state.json";
const MODEL_KEY: &str = "model/";
const OPTIM_KEY: &str = "optim/";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step_index: u64,
    /// Position of the training stream (shuffling, augmentation, sampling).
    pub rng: RngState,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    version: u32,
    state: TrainingState,
    config: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub state: TrainingState,
    pub config: ExperimentConfig,
    pub params: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
}

pub fn save_checkpoint(
    model: &GameModel,
    optimizer: &Adam,
    state: &TrainingState,
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<()> {
    if state.config_hash != config.hash() {
        return Err(Error::Checkpoint("training state and config disagree on the config hash".into()));
    }
    // Written to a sibling and renamed, so an interrupted save never leaves a
    // half-written checkpoint under the final name.
    let staging = dir.with_extension("partial");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    let mut tensors: HashMap<String, Tensor> = model
        .store()
        .tensors()
        .into_iter()
        .map(|(k, v)| (format!("{MODEL_KEY}{k}"), v))
        .collect();
    tensors.extend(
        optimizer
            .state_tensors()
            .into_iter()
            .map(|(k, v)| (format!("{OPTIM_KEY}{k}"), v)),
    );
    candle_core::safetensors::save(&tensors, staging.join(TENSORS_FILE))?;
    let file = StateFile {
        version: CHECKPOINT_VERSION,
        state: state.clone(),
        config: config.to_toml_string()?,
    };
    std::fs::write(staging.join(STATE_FILE), serde_json::to_string_pretty(&file)?)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&staging, dir)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let state_path = dir.join(STATE_FILE);
    let text = std::fs::read_to_string(&state_path).map_err(|e| Error::load("checkpoint", &state_path, e))?;
    let file: StateFile = serde_json::from_str(&text).map_err(|e| Error::load("checkpoint", &state_path, e))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has format version {}, this build reads version {CHECKPOINT_VERSION}",
            dir.display(),
            file.version
        )));
    }
    let config = ExperimentConfig::from_toml_str(&file.config)?;
    if config.hash() != file.state.config_hash {
        return Err(Error::Checkpoint(format!("{}: embedded config does not match its hash", dir.display())));
    }
    let tensor_path = dir.join(TENSORS_FILE);
    let raw = candle_core::safetensors::load(&tensor_path, &Device::Cpu)
        .map_err(|e| Error::load("checkpoint tensors", &tensor_path, e))?;
    let mut params = HashMap::new();
    let mut optimizer = HashMap::new();
    for (key, t) in raw {
        if let Some(k) = key.strip_prefix(MODEL_KEY) {
            params.insert(k.to_string(), t);
        } else if let Some(k) = key.strip_prefix(OPTIM_KEY) {
            optimizer.insert(k.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor {key} in {}", tensor_path.display())));
        }
    }
    Ok(Checkpoint {
        path: dir.to_path_buf(),
        state: file.state,
        config,
        params,
        optimizer,
    })
}

impl Checkpoint {
    /// Refuse to continue a run under a different configuration.
    pub fn ensure_matches(&self, config: &ExperimentConfig) -> Result<()> {
        let hash = config.hash();
        if hash != self.state.config_hash {
            return Err(Error::Checkpoint(format!(
                "{} was written for config {}, current config is {}",
                self.path.display(),
                &self.state.config_hash[..16],
                &hash[..16]
            )));
        }
        Ok(())
    }

    /// Copy parameters (and, if given, optimizer moments) into live objects.
    pub fn restore(&self, model: &GameModel, optimizer: Option<&mut Adam>) -> Result<()> {
        model.store().assign_from(&self.params, "", &self.path)?;
        if let Some(opt) = optimizer {
            opt.load_state(&self.optimizer, self.state.step_index)?;
        }
        Ok(())
    }
}

/// Name of the checkpoint directory written after `epoch`.
pub fn checkpoint_dir(output_dir: &Path, epoch: usize) -> PathBuf {
    output_dir.join("checkpoints").join(format!("epoch-{epoch:04}"))
}

/// The checkpoint with the highest epoch under `output_dir`, if any.
pub fn latest_checkpoint(output_dir: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(output_dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch: usize = name.strip_prefix("epoch-")?.parse().ok()?;
            e.path().join(STATE_FILE).exists().then_some((epoch, e.path()))
        })
        .max_by_key(|(epoch, _)| *epoch)
        .map(|(_, p)| p)
}

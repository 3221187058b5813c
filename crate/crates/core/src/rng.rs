//! Seeded random streams. Every stochastic operation takes one of these
//! explicitly so runs are reproducible and checkpoints can capture the exact
//! position of each stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type GameRng = ChaCha8Rng;

/// Stream tags for independent sub-streams derived from one experiment seed.
pub mod stream {
    pub const TRAIN: u64 = 1;
    pub const INIT: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const QUICK_EVAL: u64 = 4;
}

pub fn seeded(seed: u64) -> GameRng {
    GameRng::seed_from_u64(seed)
}

/// A stream that is independent of every other `(seed, tag)` pair.
pub fn derived(seed: u64, tag: u64) -> GameRng {
    let mut rng = GameRng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Serializable snapshot of a ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &GameRng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<GameRng> {
        let bytes = hex::decode(&self.seed)
            .map_err(|e| Error::Checkpoint(format!("bad rng seed encoding: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad rng word position: {e}")))?;
        let mut rng = GameRng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

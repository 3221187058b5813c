//! Message dumps and token/class statistics for qualitative analysis.

use std::collections::BTreeMap;

use refgame::data::CIFAR_CLASSES;
use refgame::metrics::{comm_rate, GameOutcome, TOP_K};
use refgame::{Error, Result};
use serde::{Deserialize, Serialize};

/// A model communicating this well...
pub const HASH_LIKE_MIN_COMM_RATE: f64 = 0.8;
/// ...whose tokens carry less than this fraction of the class entropy is
/// flagged as hashing.
pub const HASH_LIKE_MAX_MI_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub game: usize,
    /// Transmitted token ids (through the first end-of-sequence token).
    pub tokens: Vec<usize>,
    pub target_class: u8,
    pub top5_classes: Vec<u8>,
    pub target_rank: usize,
}

/// Games whose Sender produced the very same message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub tokens: Vec<usize>,
    pub games: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageReport {
    pub games: usize,
    pub comm_rate: f64,
    pub records: Vec<MessageRecord>,
    /// `[vocab][class]` counts of transmitted token unigrams against the
    /// target class.
    pub token_class_counts: Vec<Vec<usize>>,
    /// Maximum-likelihood mutual information (nats) of that table.
    pub mutual_information: f64,
    /// Miller-Madow bias-corrected estimate, floored at 0.
    pub mutual_information_corrected: f64,
    /// Entropy (nats) of the target-class marginal of the table.
    pub class_entropy: f64,
    pub hash_like: bool,
    pub distinct_messages: usize,
    pub duplicates: Vec<DuplicateGroup>,
    #[serde(default)]
    pub config_hash: String,
}

fn xlogx_sum(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information of a contingency table, and its Miller-Madow
/// correction `(R - 1)(C - 1) / 2N` over occupied rows and columns.
pub fn mutual_information(table: &[Vec<usize>]) -> (f64, f64) {
    let cols = table.first().map_or(0, Vec::len);
    let n: usize = table.iter().flatten().sum();
    if n == 0 {
        return (0.0, 0.0);
    }
    let nf = n as f64;
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let h_rows = xlogx_sum(row_sums.iter().copied(), nf);
    let h_cols = xlogx_sum(col_sums.iter().copied(), nf);
    let h_joint = xlogx_sum(table.iter().flatten().copied(), nf);
    let mi = (h_rows + h_cols - h_joint).max(0.0);
    let r = row_sums.iter().filter(|&&c| c > 0).count() as f64;
    let c = col_sums.iter().filter(|&&c| c > 0).count() as f64;
    let corrected = (mi - (r - 1.0).max(0.0) * (c - 1.0).max(0.0) / (2.0 * nf)).max(0.0);
    (mi, corrected)
}

/// Build the message report from evaluation outcomes that carry messages.
pub fn inspect_outcomes(outcomes: &[GameOutcome], vocab_size: usize) -> Result<MessageReport> {
    let (rate, _) = comm_rate(outcomes)?;
    let mut table = vec![vec![0usize; CIFAR_CLASSES]; vocab_size];
    let mut records = Vec::with_capacity(outcomes.len());
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (game, o) in outcomes.iter().enumerate() {
        let (Some(ids), Some(len)) = (&o.message, o.message_length) else {
            return Err(Error::Domain(format!("game {game} has no recorded message")));
        };
        let tokens = ids[..len].to_vec();
        let class = o.target_class as usize;
        for &t in &tokens {
            let cell = table
                .get_mut(t)
                .and_then(|row| row.get_mut(class))
                .ok_or_else(|| Error::Domain(format!("token {t} / class {class} outside the table")))?;
            *cell += 1;
        }
        groups.entry(tokens.clone()).or_default().push(game);
        records.push(MessageRecord {
            game,
            tokens,
            target_class: o.target_class,
            top5_classes: o.top_k_classes(TOP_K)?,
            target_rank: o.target_rank(),
        });
    }
    let (mi, corrected) = mutual_information(&table);
    let n: usize = table.iter().flatten().sum();
    let class_entropy = xlogx_sum(
        (0..CIFAR_CLASSES).map(|c| table.iter().map(|r| r[c]).sum()),
        n.max(1) as f64,
    );
    let hash_like = rate >= HASH_LIKE_MIN_COMM_RATE
        && class_entropy > 0.0
        && corrected < HASH_LIKE_MAX_MI_FRACTION * class_entropy;
    let distinct_messages = groups.len();
    let duplicates = groups
        .into_iter()
        .filter(|(_, games)| games.len() > 1)
        .map(|(tokens, games)| DuplicateGroup { tokens, games })
        .collect();
    Ok(MessageReport {
        games: outcomes.len(),
        comm_rate: rate,
        records,
        token_class_counts: table,
        mutual_information: mi,
        mutual_information_corrected: corrected,
        class_entropy,
        hash_like,
        distinct_messages,
        duplicates,
        config_hash: String::new(),
    })
}

//! Communication success and visual-semantics measures over played games,
//! plus Monte-Carlo simulations of idealized scorers.
//!
//! Conventions: ranks are 0-based (target first = rank 0); ties in score are
//! broken by ascending candidate index; the target counts toward its own class
//! in the top-5 class count; standard deviations are population values over
//! per-game quantities.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOP_K: usize = 5;

/// Candidate indices sorted by descending score, ties by ascending index.
pub fn rank_candidates(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameOutcome {
    pub scores: Vec<f32>,
    pub ranking: Vec<usize>,
    pub target_index: usize,
    pub target_class: u8,
    pub candidate_classes: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_correct: Option<bool>,
    /// Effective message length of the Sender's message in this game.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<Vec<usize>>,
}

impl GameOutcome {
    pub fn new(scores: Vec<f32>, target_index: usize, candidate_classes: Vec<u8>) -> Result<Self> {
        if target_index >= scores.len() {
            return Err(Error::Domain(format!("target {target_index} outside {} candidates", scores.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite receiver score".into()));
        }
        let target_class = match candidate_classes.get(target_index) {
            Some(&c) if candidate_classes.len() == scores.len() => c,
            _ if candidate_classes.is_empty() => 0,
            _ => {
                return Err(Error::Shape(format!(
                    "{} candidate classes for {} scores",
                    candidate_classes.len(),
                    scores.len()
                )))
            }
        };
        Ok(GameOutcome {
            ranking: rank_candidates(&scores),
            scores,
            target_index,
            target_class,
            candidate_classes,
            rotation_correct: None,
            message_length: None,
            message: None,
        })
    }

    pub fn with_rotation(mut self, correct: bool) -> Self {
        self.rotation_correct = Some(correct);
        self
    }

    pub fn with_message(mut self, ids: Vec<usize>, effective_length: usize) -> Self {
        self.message = Some(ids);
        self.message_length = Some(effective_length);
        self
    }

    /// 0-based rank of the target.
    pub fn target_rank(&self) -> usize {
        self.ranking
            .iter()
            .position(|&i| i == self.target_index)
            .expect("ranking is a permutation")
    }

    fn classes(&self) -> Result<&[u8]> {
        if self.candidate_classes.len() != self.scores.len() || self.candidate_classes.is_empty() {
            return Err(Error::Domain("game outcome lacks candidate class labels".into()));
        }
        Ok(&self.candidate_classes)
    }

    pub fn top_k_classes(&self, k: usize) -> Result<Vec<u8>> {
        let classes = self.classes()?;
        Ok(self.ranking.iter().take(k).map(|&i| classes[i]).collect())
    }
}

fn nonempty(outcomes: &[GameOutcome]) -> Result<()> {
    if outcomes.is_empty() {
        return Err(Error::Domain("no game outcomes".into()));
    }
    Ok(())
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fraction of games whose target is ranked first, with the population sd of
/// the per-game 0/1 indicator.
pub fn comm_rate(outcomes: &[GameOutcome]) -> Result<(f64, f64)> {
    nonempty(outcomes)?;
    Ok(mean_sd(
        outcomes.iter().map(|o| (o.ranking[0] == o.target_index) as u8 as f64),
    ))
}

pub fn top5_comm_rate(outcomes: &[GameOutcome]) -> Result<f64> {
    nonempty(outcomes)?;
    let hits = outcomes.iter().filter(|o| o.target_rank() < TOP_K).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Mean number of top-5 candidates sharing the target's class.
pub fn target_class_top5(outcomes: &[GameOutcome]) -> Result<f64> {
    nonempty(outcomes)?;
    let mut total = 0usize;
    for o in outcomes {
        total += o.top_k_classes(TOP_K)?.iter().filter(|&&c| c == o.target_class).count();
    }
    Ok(total as f64 / outcomes.len() as f64)
}

/// Mean 0-based rank of the candidates sharing the target's class (target
/// included), averaged over games.
pub fn target_class_avg_rank(outcomes: &[GameOutcome]) -> Result<f64> {
    nonempty(outcomes)?;
    let mut total = 0.0;
    for o in outcomes {
        let classes = o.classes()?;
        let (sum, count) = o
            .ranking
            .iter()
            .enumerate()
            .filter(|&(_, &i)| classes[i] == o.target_class)
            .fold((0usize, 0usize), |(s, c), (rank, _)| (s + rank, c + 1));
        total += sum as f64 / count as f64;
    }
    Ok(total / outcomes.len() as f64)
}

pub fn rotation_accuracy(outcomes: &[GameOutcome]) -> Result<f64> {
    nonempty(outcomes)?;
    let mut correct = 0usize;
    for o in outcomes {
        match o.rotation_correct {
            Some(true) => correct += 1,
            Some(false) => {}
            None => {
                return Err(Error::Config(
                    "rotation accuracy requested for games without rotation prediction".into(),
                ))
            }
        }
    }
    Ok(correct as f64 / outcomes.len() as f64)
}

/// Mean and population sd of effective message length.
pub fn message_length_stats(outcomes: &[GameOutcome]) -> Result<Option<(f64, f64)>> {
    nonempty(outcomes)?;
    let lengths: Option<Vec<f64>> = outcomes
        .iter()
        .map(|o| o.message_length.map(|l| l as f64))
        .collect();
    Ok(lengths.map(|l| mean_sd(l.into_iter())))
}

/// Conventions every report records alongside its numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConventions {
    pub rank_base: usize,
    pub tie_break: String,
    pub top5_includes_target: bool,
    pub length_includes_eos: bool,
    pub sd: String,
}

impl Default for ReportConventions {
    fn default() -> Self {
        ReportConventions {
            rank_base: 0,
            tie_break: "ascending candidate index".into(),
            top5_includes_target: true,
            length_includes_eos: true,
            sd: "population, over games".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub games: usize,
    pub comm_rate: f64,
    pub comm_rate_sd: f64,
    pub top5_comm_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_msg_len: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msg_len_sd: Option<f64>,
    pub target_class_top5_mean: f64,
    pub target_class_avg_rank: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_accuracy: Option<f64>,
    pub conventions: ReportConventions,
    /// Experiment provenance (config hash, seed, loss/channel settings), set
    /// by whoever produced the outcomes.
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub provenance: std::collections::BTreeMap<String, String>,
}

impl EvaluationReport {
    pub fn from_outcomes(outcomes: &[GameOutcome]) -> Result<Self> {
        let (comm_rate, comm_rate_sd) = comm_rate(outcomes)?;
        let lengths = message_length_stats(outcomes)?;
        let rotation_accuracy = if outcomes.iter().all(|o| o.rotation_correct.is_some()) {
            Some(rotation_accuracy(outcomes)?)
        } else {
            None
        };
        Ok(EvaluationReport {
            games: outcomes.len(),
            comm_rate,
            comm_rate_sd,
            top5_comm_rate: top5_comm_rate(outcomes)?,
            mean_msg_len: lengths.map(|l| l.0),
            msg_len_sd: lengths.map(|l| l.1),
            target_class_top5_mean: target_class_top5(outcomes)?,
            target_class_avg_rank: target_class_avg_rank(outcomes)?,
            rotation_accuracy,
            conventions: ReportConventions::default(),
            provenance: Default::default(),
        })
    }
}

/// Idealized scorers used as reference points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Target first, every other candidate in random order.
    Hashing,
    /// Target first, then its class-mates, then the rest.
    Objectness,
    /// Uniformly random ranking.
    Random,
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hashing" => Ok(BaselineMode::Hashing),
            "objectness" => Ok(BaselineMode::Objectness),
            "random" => Ok(BaselineMode::Random),
            other => Err(Error::Domain(format!("unknown baseline mode {other:?}"))),
        }
    }
}

/// Per-game candidate class counts summing to `game_size`, as even as
/// possible (128 over 10 classes: eight 13s and two 12s).
pub fn balanced_histogram(game_size: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| game_size / classes + (c < game_size % classes) as usize)
        .collect()
}

/// Simulate `games` games whose candidate sets have class composition
/// `class_histogram` (shuffled per game, uniform target) under an idealized
/// scorer, and report the resulting measures.
pub fn baseline_oracle(
    mode: BaselineMode,
    class_histogram: &[usize],
    games: usize,
    rng: &mut impl Rng,
) -> Result<EvaluationReport> {
    if games == 0 {
        return Err(Error::Domain("baseline needs at least one game".into()));
    }
    let mut labels: Vec<u8> = class_histogram
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u8, n))
        .collect();
    if labels.is_empty() {
        return Err(Error::Domain("empty class histogram".into()));
    }
    let n = labels.len();
    let mut outcomes = Vec::with_capacity(games);
    for _ in 0..games {
        labels.shuffle(rng);
        let target = rng.random_range(0..n);
        let scores: Vec<f32> = (0..n)
            .map(|i| {
                let u: f32 = rng.random();
                match mode {
                    BaselineMode::Random => u,
                    BaselineMode::Hashing if i == target => 2.0,
                    BaselineMode::Hashing => u,
                    BaselineMode::Objectness if i == target => 3.0,
                    BaselineMode::Objectness if labels[i] == labels[target] => 2.0 + u,
                    BaselineMode::Objectness => u,
                }
            })
            .collect();
        outcomes.push(GameOutcome::new(scores, target, labels.clone())?);
    }
    EvaluationReport::from_outcomes(&outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn outcome_with_target_at(rank: usize, n: usize) -> GameOutcome {
        // Scores descending in index order, so candidate i has rank i.
        let scores: Vec<f32> = (0..n).map(|i| (n - i) as f32).collect();
        GameOutcome::new(scores, rank, vec![0; n]).unwrap()
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_candidates(&[1.0, 3.0, 3.0, 0.5, 3.0]), vec![1, 2, 4, 0, 3]);
    }

    #[test]
    fn comm_rate_examples() {
        let all: Vec<_> = (0..4).map(|_| outcome_with_target_at(0, 8)).collect();
        assert_eq!(comm_rate(&all).unwrap(), (1.0, 0.0));
        let half = vec![outcome_with_target_at(0, 8), outcome_with_target_at(3, 8)];
        assert_eq!(comm_rate(&half).unwrap(), (0.5, 0.5));
        assert!(matches!(comm_rate(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn top5_boundary_is_exclusive() {
        assert_eq!(top5_comm_rate(&[outcome_with_target_at(4, 10)]).unwrap(), 1.0);
        assert_eq!(top5_comm_rate(&[outcome_with_target_at(5, 10)]).unwrap(), 0.0);
    }

    #[test]
    fn top5_class_count_direct() {
        // ranks 0..5 have classes [c, c, x, x, c]
        let classes = vec![2, 2, 7, 7, 2, 7, 7, 7];
        let scores: Vec<f32> = (0..8).map(|i| (8 - i) as f32).collect();
        let o = GameOutcome::new(scores, 0, classes).unwrap();
        assert_eq!(target_class_top5(&[o]).unwrap(), 3.0);
    }

    #[test]
    fn avg_rank_of_contiguous_block() {
        // 13 same-class images at ranks 0..12 → mean 6.0
        let mut classes = vec![1u8; 13];
        classes.extend(std::iter::repeat_n(0u8, 115));
        let scores: Vec<f32> = (0..128).map(|i| (128 - i) as f32).collect();
        let o = GameOutcome::new(scores, 0, classes).unwrap();
        assert_eq!(target_class_avg_rank(&[o]).unwrap(), 6.0);
    }

    #[test]
    fn missing_classes_are_domain_errors() {
        let o = GameOutcome::new(vec![1.0, 0.0], 0, vec![]).unwrap();
        assert!(matches!(target_class_top5(&[o.clone()]), Err(Error::Domain(_))));
        assert!(matches!(target_class_avg_rank(&[o]), Err(Error::Domain(_))));
    }

    #[test]
    fn rotation_accuracy_requires_dual_task() {
        let o = outcome_with_target_at(0, 4);
        assert!(matches!(rotation_accuracy(&[o.clone()]), Err(Error::Config(_))));
        let all = vec![o.clone().with_rotation(true), o.with_rotation(true)];
        assert_eq!(rotation_accuracy(&all).unwrap(), 1.0);
    }

    #[test]
    fn balanced_histogram_shape() {
        let h = balanced_histogram(128, 10);
        assert_eq!(h.iter().sum::<usize>(), 128);
        assert_eq!(h.iter().filter(|&&c| c == 13).count(), 8);
        assert_eq!(h.iter().filter(|&&c| c == 12).count(), 2);
    }

    #[test]
    fn objectness_baseline_is_exactly_five() {
        let r = baseline_oracle(BaselineMode::Objectness, &balanced_histogram(128, 10), 2000, &mut seeded(0)).unwrap();
        assert_eq!(r.target_class_top5_mean, 5.0);
        assert_eq!(r.comm_rate, 1.0);
    }

    #[test]
    fn unknown_baseline_mode() {
        assert!(matches!("hash".parse::<BaselineMode>(), Err(Error::Domain(_))));
        assert_eq!("random".parse::<BaselineMode>().unwrap(), BaselineMode::Random);
    }

    #[test]
    fn random_baseline_is_chance() {
        let r = baseline_oracle(BaselineMode::Random, &balanced_histogram(128, 10), 100_000, &mut seeded(1)).unwrap();
        assert!((r.comm_rate - 1.0 / 128.0).abs() <= 0.002, "{}", r.comm_rate);
    }

    #[test]
    fn hashing_baseline_avg_rank() {
        let r = baseline_oracle(BaselineMode::Hashing, &balanced_histogram(128, 10), 100_000, &mut seeded(2)).unwrap();
        assert!((r.target_class_avg_rank - 59.5).abs() <= 0.5, "{}", r.target_class_avg_rank);
        // Exact expectation for this histogram: 64 (k - 1) / k averaged over the target's class size k.
        let exact = (104.0 * 64.0 * 12.0 / 13.0 + 24.0 * 64.0 * 11.0 / 12.0) / 128.0;
        assert!((r.target_class_avg_rank - exact).abs() < 0.15, "{} vs {exact}", r.target_class_avg_rank);
    }

    fn arb_outcome() -> impl Strategy<Value = GameOutcome> {
        (4usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(-5.0f32..5.0, n),
                0..n,
                proptest::collection::vec(0u8..4, n),
            )
                .prop_map(|(s, t, c)| GameOutcome::new(s, t, c).unwrap())
        })
    }

    proptest! {
        #[test]
        fn orderings_hold(outcomes in proptest::collection::vec(arb_outcome(), 1..20)) {
            let (c, _) = comm_rate(&outcomes).unwrap();
            prop_assert!(c <= top5_comm_rate(&outcomes).unwrap());
            prop_assert!(target_class_top5(&outcomes).unwrap() >= c);
        }

        #[test]
        fn monotone_transform_invariance(o in arb_outcome(), scale in 0.1f32..10.0, shift in -3.0f32..3.0) {
            let t: Vec<f32> = o.scores.iter().map(|s| (s * scale + shift).exp()).collect();
            let o2 = GameOutcome::new(t, o.target_index, o.candidate_classes.clone()).unwrap();
            // exp and affine maps can merge nearly equal scores; only compare when order is strict.
            prop_assume!(o2.ranking == o.ranking);
            let a = [o.clone()];
            let b = [o2];
            prop_assert_eq!(comm_rate(&a).unwrap(), comm_rate(&b).unwrap());
            prop_assert_eq!(target_class_avg_rank(&a).unwrap(), target_class_avg_rank(&b).unwrap());
        }
    }
}

//! Per-strategy model rankings and rank-flip detection.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::RunResult;
use crate::tokenizer::TokenizationStrategy;

use super::HarnessError;

/// One model's accuracy under each strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub model_id: String,
    pub letter: Option<f64>,
    pub space_letter: Option<f64>,
}

impl LeaderboardEntry {
    /// Builds an entry from a model's two runs, in either order.
    pub fn from_runs(runs: &[&RunResult]) -> Result<Self, HarnessError> {
        let model_id = runs
            .first()
            .map(|r| r.model_id.clone())
            .ok_or_else(|| HarnessError::Config("no runs for leaderboard entry".into()))?;
        if let Some(other) = runs.iter().find(|r| r.model_id != model_id) {
            return Err(HarnessError::Config(format!(
                "runs for {model_id:?} and {:?} mixed in one entry",
                other.model_id
            )));
        }
        let pick = |s: TokenizationStrategy| runs.iter().find(|r| r.strategy == s).map(|r| r.accuracy);
        Ok(Self {
            letter: pick(TokenizationStrategy::LetterOnly),
            space_letter: pick(TokenizationStrategy::SpaceLetter),
            model_id,
        })
    }

    fn accuracy(&self, s: TokenizationStrategy) -> Option<f64> {
        match s {
            TokenizationStrategy::LetterOnly => self.letter,
            TokenizationStrategy::SpaceLetter => self.space_letter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    /// 1-based.
    pub rank: usize,
    pub model_id: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardReport {
    pub letter: Vec<RankedModel>,
    pub space_letter: Vec<RankedModel>,
    pub rank_flip: bool,
    /// `(top under letter, top under space-letter)` when they differ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tops: Option<(String, String)>,
}

/// Accuracy descending, then model id ascending.
fn ranking(entries: &[LeaderboardEntry], s: TokenizationStrategy) -> Vec<RankedModel> {
    let mut rows: Vec<(&str, f64)> = entries
        .iter()
        .map(|e| (e.model_id.as_str(), e.accuracy(s).expect("checked")))
        .collect();
    rows.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(b.0),
        o => o,
    });
    rows.into_iter()
        .enumerate()
        .map(|(i, (id, acc))| RankedModel {
            rank: i + 1,
            model_id: id.to_string(),
            accuracy: acc,
        })
        .collect()
}

pub fn leaderboard(entries: &[LeaderboardEntry]) -> Result<LeaderboardReport, HarnessError> {
    for e in entries {
        for s in TokenizationStrategy::BOTH {
            match e.accuracy(s) {
                None => {
                    return Err(HarnessError::MissingStrategy {
                        model: e.model_id.clone(),
                        strategy: s,
                    })
                }
                Some(a) if !a.is_finite() => {
                    return Err(HarnessError::Config(format!(
                        "non-finite accuracy for {:?}",
                        e.model_id
                    )))
                }
                Some(_) => {}
            }
        }
    }
    let mut ids: Vec<&str> = entries.iter().map(|e| e.model_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(HarnessError::Config(format!("model {:?} listed twice", w[0])));
    }
    if entries.len() < 2 {
        return Err(HarnessError::TooFewModels(entries.len()));
    }
    let letter = ranking(entries, TokenizationStrategy::LetterOnly);
    let space_letter = ranking(entries, TokenizationStrategy::SpaceLetter);
    let top_a = &letter[0].model_id;
    let top_b = &space_letter[0].model_id;
    let rank_flip = top_a != top_b;
    Ok(LeaderboardReport {
        tops: rank_flip.then(|| (top_a.clone(), top_b.clone())),
        letter,
        space_letter,
        rank_flip,
    })
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    model: String,
    letter: Option<f64>,
    space_letter: Option<f64>,
}

/// Reads `model,letter,space_letter` rows; an empty cell means the strategy is missing.
pub fn parse_leaderboard_csv(text: &str) -> Result<Vec<LeaderboardEntry>, HarnessError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    reader
        .deserialize::<CsvRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| HarnessError::Config(format!("leaderboard row {}: {e}", i + 2)))?;
            Ok(LeaderboardEntry {
                model_id: row.model,
                letter: row.letter,
                space_letter: row.space_letter,
            })
        })
        .collect()
}

pub fn load_leaderboard_csv(path: impl AsRef<Path>) -> Result<Vec<LeaderboardEntry>, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    parse_leaderboard_csv(&text)
}

impl LeaderboardReport {
    pub fn render_table(&self) -> String {
        let width = self
            .letter
            .iter()
            .map(|r| r.model_id.chars().count())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = format!(
            "{:>4}  {:<width$}  {:>7}    {:<width$}  {:>7}\n",
            "rank", "X", "acc", "␣X", "acc"
        );
        for (a, b) in self.letter.iter().zip(&self.space_letter) {
            out.push_str(&format!(
                "{:>4}  {:<width$}  {:>7.2}    {:<width$}  {:>7.2}\n",
                a.rank, a.model_id, a.accuracy, b.model_id, b.accuracy
            ));
        }
        match &self.tops {
            Some((a, b)) => out.push_str(&format!("rank flip: top model changes from {a} to {b}\n")),
            None => out.push_str("rank flip: none\n"),
        }
        out
    }
}

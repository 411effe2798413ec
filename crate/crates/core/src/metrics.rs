//! Candidate-set softmax, argmax prediction, accuracy and expected
//! calibration error with reliability bins.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::tokenizer::TokenizationStrategy;

/// Default number of confidence bins.
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {min} logits, got {got}")]
    TooFewLogits { min: usize, got: usize },
    #[error("logit {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("no results to aggregate")]
    Empty,
    #[error("bin count must be at least 1, got {0}")]
    InvalidBinCount(usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Softmax over exactly the candidate logits.
pub fn normalize_probs(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(MetricsError::TooFewLogits {
            min: 2,
            got: logits.len(),
        });
    }
    if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(MetricsError::NonFinite { index, value });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Argmax with ties going to the lowest index. Returns `(index, confidence)`.
pub fn predict(distribution: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in distribution.iter().enumerate() {
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((i, p)),
        }
    }
    best.ok_or(MetricsError::EmptyDistribution)
}

/// Outcome for one evaluated question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub example_id: String,
    pub distribution: Vec<f64>,
    pub predicted_index: usize,
    pub confidence: f64,
    pub correct: bool,
}

impl ExampleResult {
    /// Scores one example from raw candidate logits.
    pub fn from_logits(
        example_id: impl Into<String>,
        logits: &[f64],
        gold_index: usize,
    ) -> Result<Self> {
        let distribution = normalize_probs(logits)?;
        let (predicted_index, confidence) = predict(&distribution)?;
        Ok(Self {
            example_id: example_id.into(),
            distribution,
            predicted_index,
            confidence,
            correct: predicted_index == gold_index,
        })
    }
}

/// Fraction of correct predictions.
pub fn accuracy(results: &[ExampleResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = results.iter().filter(|r| r.correct).count();
    Ok(correct as f64 / results.len() as f64)
}

/// Lower edge of bin `m` out of `bins`. Shared by binning and reporting so
/// every caller agrees on where the boundaries sit.
pub fn bin_edge(m: usize, bins: usize) -> f64 {
    m as f64 / bins as f64
}

/// Bin index for a confidence: bins are `((m-1)/M, m/M]`, with 0 in the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    if confidence >= 1.0 {
        return bins - 1;
    }
    let mut m = ((confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1;
    // Correct for rounding in the product so the comparison is against the
    // same edges reported in the bin table.
    while m > 0 && confidence <= bin_edge(m, bins) {
        m -= 1;
    }
    while m + 1 < bins && confidence > bin_edge(m + 1, bins) {
        m += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// `None` when the bin is empty.
    pub accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Recomputes the bin-weighted calibration gap from the table alone.
    pub fn weighted_gap(&self) -> f64 {
        let n = self.total() as f64;
        self.bins
            .iter()
            .filter_map(|b| match (b.accuracy, b.mean_confidence) {
                (Some(acc), Some(conf)) => Some(b.count as f64 / n * (acc - conf).abs()),
                _ => None,
            })
            .sum()
    }

    /// Writes the reliability-diagram CSV. Empty bins leave the accuracy and
    /// confidence columns blank.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,count,accuracy,mean_confidence")?;
        for b in &self.bins {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                b.low,
                b.high,
                b.count,
                fmt(b.accuracy),
                fmt(b.mean_confidence)
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

/// Per-bin sufficient statistics; associative, so partitions can be merged.
#[derive(Debug, Clone, PartialEq)]
pub struct BinAccumulator {
    counts: Vec<usize>,
    correct: Vec<usize>,
    confidence_sums: Vec<f64>,
}

impl BinAccumulator {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 1 {
            return Err(MetricsError::InvalidBinCount(bins));
        }
        Ok(Self {
            counts: vec![0; bins],
            correct: vec![0; bins],
            confidence_sums: vec![0.0; bins],
        })
    }

    pub fn push(&mut self, confidence: f64, correct: bool) {
        let m = bin_index(confidence, self.counts.len());
        self.push_binned(m, confidence, correct);
    }

    /// Adds an observation whose bin has already been computed.
    pub fn push_binned(&mut self, bin: usize, confidence: f64, correct: bool) {
        self.counts[bin] += 1;
        self.correct[bin] += usize::from(correct);
        self.confidence_sums[bin] += confidence;
    }

    pub fn merge(&mut self, other: &BinAccumulator) {
        for m in 0..self.counts.len() {
            self.counts[m] += other.counts[m];
            self.correct[m] += other.correct[m];
            self.confidence_sums[m] += other.confidence_sums[m];
        }
    }

    pub fn ece(&self) -> Result<f64> {
        let n: usize = self.counts.iter().sum();
        if n == 0 {
            return Err(MetricsError::Empty);
        }
        let n = n as f64;
        let mut total = 0.0;
        for m in 0..self.counts.len() {
            let count = self.counts[m];
            if count == 0 {
                continue;
            }
            let c = count as f64;
            let acc = self.correct[m] as f64 / c;
            let conf = self.confidence_sums[m] / c;
            total += c / n * (acc - conf).abs();
        }
        Ok(total)
    }

    pub fn bins(&self) -> ReliabilityBins {
        let m_total = self.counts.len();
        let bins = (0..m_total)
            .map(|m| {
                let count = self.counts[m];
                let (accuracy, mean_confidence) = if count == 0 {
                    (None, None)
                } else {
                    (
                        Some(self.correct[m] as f64 / count as f64),
                        Some(self.confidence_sums[m] / count as f64),
                    )
                };
                ReliabilityBin {
                    low: bin_edge(m, m_total),
                    high: bin_edge(m + 1, m_total),
                    count,
                    accuracy,
                    mean_confidence,
                }
            })
            .collect();
        ReliabilityBins { bins }
    }
}

fn accumulate(results: &[ExampleResult], bins: usize) -> Result<BinAccumulator> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut acc = BinAccumulator::new(bins)?;
    for r in results {
        acc.push(r.confidence, r.correct);
    }
    Ok(acc)
}

/// Expected calibration error together with the bin table it was computed from.
pub fn ece(results: &[ExampleResult], bins: usize) -> Result<(f64, ReliabilityBins)> {
    let acc = accumulate(results, bins)?;
    Ok((acc.ece()?, acc.bins()))
}

pub fn reliability_bins(results: &[ExampleResult], bins: usize) -> Result<ReliabilityBins> {
    Ok(accumulate(results, bins)?.bins())
}

/// Aggregate metrics for one (model, dataset, template, strategy) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub bins: ReliabilityBins,
    pub strategy: TokenizationStrategy,
    pub template_id: String,
    pub model_id: String,
    pub dataset_id: String,
    /// Probabilities are normalized over the answer options only.
    pub normalization: String,
}

pub const CANDIDATE_SET_NORMALIZATION: &str = "candidate-set softmax";

impl RunResult {
    pub fn from_results(
        results: &[ExampleResult],
        bins: usize,
        strategy: TokenizationStrategy,
        template_id: impl Into<String>,
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
    ) -> Result<Self> {
        let accuracy = accuracy(results)?;
        let (ece, bins) = ece(results, bins)?;
        Ok(Self {
            n: results.len(),
            accuracy,
            ece,
            bins,
            strategy,
            template_id: template_id.into(),
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            normalization: CANDIDATE_SET_NORMALIZATION.to_string(),
        })
    }
}

//! Test-series scoring, segment point-adjust evaluation, and detection
//! threshold grid search.

use crate::error::{Error, Result};
use crate::ingest::{make_windows, MetricMatrix};
use crate::model::RtModel;
use rayon::prelude::*;

/// Per-timestamp anomaly scores aligned to `w-1 .. N-1`, with the chosen
/// threshold and both raw and point-adjusted predictions.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScoreSeries {
    pub timestamps: Vec<usize>,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub predictions: Vec<u8>,
    pub adjusted_predictions: Vec<u8>,
}

impl ScoreSeries {
    /// Builds predictions at a threshold; the adjusted predictions equal the
    /// raw ones when no truth is supplied.
    pub fn at_threshold(timestamps: Vec<usize>, scores: Vec<f64>, threshold: f64, truth: Option<&[u8]>) -> Result<ScoreSeries> {
        let predictions = apply_threshold(&scores, threshold);
        let adjusted_predictions = match truth {
            Some(t) => point_adjust(&predictions, t)?,
            None => predictions.clone(),
        };
        Ok(ScoreSeries { timestamps, scores, threshold, predictions, adjusted_predictions })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp,score,pred,adjusted_pred\n");
        for i in 0..self.timestamps.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.timestamps[i], self.scores[i], self.predictions[i], self.adjusted_predictions[i]
            ));
        }
        out
    }
}

/// Pointwise detection counts and derived rates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores every timestamp `t` in `[w-1, N-1]` from the stride-1 window
/// ending at `t`. The test matrix must already be normalized with the
/// training statistics. Returns (timestamps, scores).
pub fn score_series(model: &RtModel, test: &MetricMatrix, w: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if model.score_norm.is_none() {
        return Err(Error::state("score normalizer not fitted; train first"));
    }
    let windows = make_windows(test, w, 1)?;
    let scores: Vec<f64> = (0..windows.len())
        .into_par_iter()
        .map(|i| model.score(&windows.window(i).view()))
        .collect::<Result<_>>()?;
    Ok((windows.end_index, scores))
}

/// Thresholds scores into binary predictions: `1` iff `score > threshold`.
pub fn apply_threshold(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > threshold)).collect()
}

/// Maximal `[start, end]` runs of 1s in a binary vector.
pub fn segments_of(truth: &[u8]) -> Vec<(usize, usize)> {
    let mut segs = Vec::new();
    let mut start = None;
    for (t, &v) in truth.iter().enumerate() {
        match (v, start) {
            (1, None) => start = Some(t),
            (0, Some(s)) => {
                segs.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segs.push((s, truth.len() - 1));
    }
    segs
}

/// Segment point-adjust: if any prediction inside a maximal ground-truth
/// anomaly segment fires, the whole segment counts as predicted. Predictions
/// outside segments are unchanged.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != truth.len() {
        return Err(Error::data(format!(
            "point_adjust length mismatch: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut adjusted = pred.to_vec();
    for (s, e) in segments_of(truth) {
        if pred[s..=e].iter().any(|&p| p == 1) {
            for a in &mut adjusted[s..=e] {
                *a = 1;
            }
        }
    }
    Ok(adjusted)
}

/// Pointwise precision/recall/F1 with the zero-denominator convention
/// (rates are 0 when their denominators are 0).
pub fn prf1(adjusted_pred: &[u8], truth: &[u8]) -> Result<EvalResult> {
    if adjusted_pred.len() != truth.len() {
        return Err(Error::data("prf1 length mismatch"));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &t) in adjusted_pred.iter().zip(truth.iter()) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalResult { tp, fp, fn_, precision, recall, f1 })
}

/// Point-adjusted evaluation of raw predictions.
pub fn evaluate(pred: &[u8], truth: &[u8]) -> Result<EvalResult> {
    prf1(&point_adjust(pred, truth)?, truth)
}

/// Grid search over `n_candidates` equally spaced thresholds between the
/// minimum and maximum score; every candidate is evaluated with point-adjust.
/// Returns the threshold maximizing F1, ties resolved to the larger value.
pub fn grid_search_threshold(
    scores: &[f64],
    truth: &[u8],
    n_candidates: usize,
) -> Result<(f64, EvalResult)> {
    if scores.is_empty() || scores.len() != truth.len() {
        return Err(Error::data("grid search needs aligned non-empty scores and labels"));
    }
    if n_candidates == 0 {
        return Err(Error::config("n_candidates must be positive"));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let candidates: Vec<f64> = if hi > lo {
        (0..n_candidates)
            .map(|i| lo + (hi - lo) * i as f64 / (n_candidates - 1).max(1) as f64)
            .collect()
    } else {
        vec![lo]
    };
    let mut best: Option<(f64, EvalResult)> = None;
    for theta in candidates {
        let result = evaluate(&apply_threshold(scores, theta), truth)?;
        best = match best {
            None => Some((theta, result)),
            // ascending sweep: >= keeps the larger threshold on ties
            Some((_, b)) if result.f1 >= b.f1 => Some((theta, result)),
            keep => keep,
        };
    }
    Ok(best.expect("at least one candidate"))
}

//! Culprit-metric localization: when an anomaly segment is detected, rank
//! metrics by how much their learned attention changed against the normal
//! period, plus the two simpler rankings used for comparison.

use crate::error::{Error, Result};
use crate::ingest::WindowBatch;
use crate::model::RtModel;
use crate::relgraph;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use std::collections::BTreeSet;

/// Ranking strategy for culprit metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    /// Per-metric deviation score (max |z| inside the segment against the
    /// training mean/std). Model-free.
    AnomalyScore,
    /// Row sums of the anomalous-period attention.
    CorrelationScore,
    /// Row sums of |anomalous attention - normal attention|.
    CorrelationChange,
}

impl std::str::FromStr for RankMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anomaly_score" => Ok(RankMethod::AnomalyScore),
            "correlation_score" => Ok(RankMethod::CorrelationScore),
            "correlation_change" => Ok(RankMethod::CorrelationChange),
            other => Err(Error::config(format!(
                "unknown localization method '{other}' \
                 (expected anomaly_score|correlation_score|correlation_change)"
            ))),
        }
    }
}

/// Ranked culprit metrics for one detected segment.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LocalizationReport {
    pub segment: (usize, usize),
    pub method: RankMethod,
    /// Per-metric ranking statistic (higher = more suspect).
    pub delta: Vec<f64>,
    /// Metric indices sorted by delta descending, ties by lower index.
    pub ranking: Vec<usize>,
    pub ranked_names: Vec<String>,
    /// Ground-truth culprit metrics when known.
    pub culprits: Option<BTreeSet<usize>>,
}

fn mean_matrices(mats: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = mats[0].clone();
    for m in &mats[1..] {
        acc += m;
    }
    acc / mats.len() as f64
}

/// Elementwise mean of the continuous attention matrices over the windows.
pub fn mean_attention(model: &RtModel, windows: &WindowBatch) -> Result<Array2<f64>> {
    if windows.is_empty() {
        return Err(Error::data("mean_attention over an empty window set"));
    }
    let mats: Vec<Array2<f64>> = (0..windows.len())
        .into_par_iter()
        .map(|i| relgraph::attention_scores(&model.attention, &windows.window(i).view()))
        .collect::<Result<_>>()?;
    Ok(mean_matrices(&mats))
}

/// Per-metric correlation change: row sums of absolute attention
/// differences, diagonal excluded.
pub fn correlation_change(a_normal: &ArrayView2<f64>, a_anomalous: &ArrayView2<f64>) -> Result<Vec<f64>> {
    if a_normal.dim() != a_anomalous.dim() || a_normal.nrows() != a_normal.ncols() {
        return Err(Error::data("attention matrices must be square and same shape"));
    }
    let m = a_normal.nrows();
    Ok((0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i)
                .map(|j| (a_anomalous[[i, j]] - a_normal[[i, j]]).abs())
                .sum()
        })
        .collect())
}

/// Row sums of the anomalous-period attention, diagonal excluded.
pub fn correlation_score(a_anomalous: &ArrayView2<f64>) -> Vec<f64> {
    let m = a_anomalous.nrows();
    (0..m)
        .map(|i| (0..m).filter(|&j| j != i).map(|j| a_anomalous[[i, j]]).sum())
        .collect()
}

/// Windows of a stride-1 batch whose end timestamp falls inside the segment.
pub fn windows_in_segment(batch: &WindowBatch, segment: (usize, usize)) -> WindowBatch {
    let idx: Vec<usize> = (0..batch.len())
        .filter(|&i| batch.end_index[i] >= segment.0 && batch.end_index[i] <= segment.1)
        .collect();
    batch.select(&idx)
}

/// Ranks metrics for one anomaly segment.
///
/// * `segment_windows`: windows ending inside the segment (at least one).
/// * `raw_segment`: raw (unnormalized) test rows covering the segment,
///   used by the per-metric deviation baseline.
pub fn rank_metrics(
    method: RankMethod,
    model: &RtModel,
    segment: (usize, usize),
    segment_windows: &WindowBatch,
    raw_segment: &ArrayView2<f64>,
) -> Result<LocalizationReport> {
    if segment_windows.is_empty() {
        return Err(Error::data(format!(
            "segment {}-{} is shorter than one window",
            segment.0, segment.1
        )));
    }
    let delta: Vec<f64> = match method {
        RankMethod::CorrelationChange => {
            let a_n = model
                .attention_mean
                .as_ref()
                .ok_or_else(|| Error::state("checkpoint carries no training attention mean"))?;
            let a_a = mean_attention(model, segment_windows)?;
            correlation_change(&a_n.view(), &a_a.view())?
        }
        RankMethod::CorrelationScore => {
            let a_a = mean_attention(model, segment_windows)?;
            correlation_score(&a_a.view())
        }
        RankMethod::AnomalyScore => {
            let stats = model
                .metric_stats
                .as_ref()
                .ok_or_else(|| Error::state("checkpoint carries no per-metric training stats"))?;
            if stats.len() != raw_segment.ncols() {
                return Err(Error::data("metric stats do not match the test slice width"));
            }
            (0..raw_segment.ncols())
                .map(|k| {
                    let (mean, std) = stats[k];
                    let denom = std.max(1e-12);
                    raw_segment
                        .column(k)
                        .iter()
                        .map(|&v| ((v - mean) / denom).abs())
                        .fold(0.0f64, f64::max)
                })
                .collect()
        }
    };
    let ranking = relgraph::rank_desc(&delta);
    let ranked_names = ranking
        .iter()
        .map(|&i| model.metric_names.get(i).cloned().unwrap_or_else(|| format!("metric_{i}")))
        .collect();
    Ok(LocalizationReport { segment, method, delta, ranking, ranked_names, culprits: None })
}

/// Fraction of segments whose top-k ranked metrics intersect the culprit set.
pub fn hit_at_k(rankings: &[Vec<usize>], culprits: &[BTreeSet<usize>], k: usize) -> Result<f64> {
    if rankings.is_empty() || rankings.len() != culprits.len() {
        return Err(Error::data("hit_at_k needs aligned, non-empty rankings and culprit sets"));
    }
    let hits = rankings
        .iter()
        .zip(culprits.iter())
        .filter(|(r, c)| r.iter().take(k).any(|i| c.contains(i)))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{generate_synthetic, make_windows, minmax_normalize, SynthConfig};
    use crate::model::ModelDims;
    use ndarray::array;

    #[test]
    fn mean_of_two_hand_matrices() {
        let a = array![[0.5, 0.5], [0.9, 0.1]];
        let b = array![[0.7, 0.3], [0.5, 0.5]];
        let m = mean_matrices(&[a, b]);
        let expect = array![[0.6, 0.4], [0.7, 0.3]];
        assert!((&m - &expect).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn mean_attention_single_window_and_row_sums() {
        let dims = ModelDims::for_data(4, 10);
        let model = {
            let mut d = dims;
            d.gat_hidden = 6;
            d.gcn_feat = 4;
            d.gru_hidden = 4;
            d.conv_channels = 4;
            d.embed = 6;
            d.vae_hidden = 6;
            d.latent = 3;
            RtModel::new(d, 3).unwrap()
        };
        let cfg = SynthConfig::demo(4, 200, 8);
        let m = generate_synthetic(&cfg).unwrap();
        let (normed, _) = minmax_normalize(&m, None).unwrap();
        let w = make_windows(&normed, 10, 10).unwrap();
        let mean = mean_attention(&model, &w).unwrap();
        for row in mean.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let single = w.select(&[0]);
        let m1 = mean_attention(&model, &single).unwrap();
        let direct = relgraph::attention_scores(&model.attention, &w.window(0).view()).unwrap();
        assert!((&m1 - &direct).iter().all(|d| d.abs() < 1e-12));
        assert!(mean_attention(&model, &w.select(&[])).is_err());
    }

    #[test]
    fn correlation_change_examples() {
        let a = array![[0.5, 0.5], [0.5, 0.5]];
        assert_eq!(correlation_change(&a.view(), &a.view()).unwrap(), vec![0.0, 0.0]);
        let b = array![[0.1, 0.9], [0.5, 0.5]];
        let d = correlation_change(&a.view(), &b.view()).unwrap();
        assert!((d[0] - 0.4).abs() < 1e-12 && d[1].abs() < 1e-12);
        // symmetric under swapping normal and anomalous
        let d2 = correlation_change(&b.view(), &a.view()).unwrap();
        assert_eq!(d, d2);
        let bad = Array2::<f64>::zeros((3, 3));
        assert!(correlation_change(&a.view(), &bad.view()).is_err());
    }

    #[test]
    fn hit_at_k_examples() {
        let rankings = vec![vec![2, 0, 1]];
        let culprits = vec![BTreeSet::from([0usize])];
        assert_eq!(hit_at_k(&rankings, &culprits, 1).unwrap(), 0.0);
        assert_eq!(hit_at_k(&rankings, &culprits, 2).unwrap(), 1.0);
        // k >= M saturates when culprit sets are nonempty
        assert_eq!(hit_at_k(&rankings, &culprits, 5).unwrap(), 1.0);
        // averaging over segments
        let rankings = vec![vec![0, 1, 2], vec![1, 2, 0]];
        let culprits = vec![BTreeSet::from([2usize]), BTreeSet::from([0usize])];
        assert_eq!(hit_at_k(&rankings, &culprits, 3).unwrap(), 1.0);
        assert_eq!(hit_at_k(&rankings, &culprits, 1).unwrap(), 0.0);
        assert!(hit_at_k(&[], &[], 1).is_err());
    }

    #[test]
    fn tied_deltas_rank_in_index_order() {
        assert_eq!(relgraph::rank_desc(&[0.3, 0.3, 0.3]), vec![0, 1, 2]);
    }

    use crate::model::RtModel;
    use ndarray::Array2;
}

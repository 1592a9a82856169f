//! Positive-unlabeled training: fit on a small set of labeled-normal
//! windows, pseudo-label the remaining pool by anomaly score, then continue
//! training on everything.
//!
//! All phases are deterministic for a fixed seed: window shuffling and the
//! sampling noise come from one seeded stream, and per-window gradients are
//! computed in parallel but reduced in a fixed order.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::ingest::WindowBatch;
use crate::model::{BoundModel, ForwardOpts, ModelDims, RtModel};
use crate::optim::Adam;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Positive-unlabeled training configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PuConfig {
    /// Pseudo-labeling threshold on the normalized score.
    pub beta: f64,
    /// Fraction of the training windows treated as engineer-labeled normals.
    pub labeled_negative_fraction: f64,
    /// Epochs per training phase.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PuConfig {
    fn default() -> Self {
        PuConfig {
            beta: 0.9,
            labeled_negative_fraction: 0.1,
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.001,
            seed: 7,
        }
    }
}

impl PuConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("beta must be in (0, 1]"));
        }
        if !(self.labeled_negative_fraction > 0.0 && self.labeled_negative_fraction <= 1.0) {
            return Err(Error::config("labeled_negative_fraction must be in (0, 1]"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Per-phase record of a training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainingReport {
    pub beta: f64,
    pub seed: u64,
    pub labeled_negatives: usize,
    pub unlabeled: usize,
    /// Mean per-window training loss per epoch, phase 1 (labeled normals).
    pub phase1_losses: Vec<f64>,
    /// Mean per-window training loss per epoch, phase 3 (all windows).
    pub phase3_losses: Vec<f64>,
    pub pseudo_positive_count: usize,
    pub pseudo_positive_rate: f64,
    pub wall_seconds: f64,
}

// ── splitting ─────────────────────────────────────────────────────────────

fn split_indices(train: &WindowBatch, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("labeled fraction must be in (0, 1]"));
    }
    let n = train.len();
    if n == 0 {
        return Err(Error::data("empty window batch"));
    }
    // Labeled negatives come from windows whose ground-truth label is 0;
    // when no labels were provided every window carries 0 already.
    let candidates: Vec<usize> = (0..n).filter(|&i| train.y[i] == 0).collect();
    if candidates.is_empty() {
        return Err(Error::data("no negative windows available to label"));
    }
    let want = ((fraction * n as f64).round() as usize).max(1);
    let count = want.min(candidates.len());
    let mut shuffled = candidates;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51e2_7a5e);
    shuffled.shuffle(&mut rng);
    let mut labeled: Vec<usize> = shuffled.into_iter().take(count).collect();
    labeled.sort_unstable();
    let mark: std::collections::HashSet<usize> = labeled.iter().copied().collect();
    let unlabeled: Vec<usize> = (0..n).filter(|i| !mark.contains(i)).collect();
    Ok((labeled, unlabeled))
}

/// Splits the training windows into engineer-labeled negatives and the
/// unlabeled remainder. Deterministic for a fixed seed.
pub fn split_labeled(train: &WindowBatch, fraction: f64, seed: u64) -> Result<(WindowBatch, WindowBatch)> {
    let (lab, unlab) = split_indices(train, fraction, seed)?;
    Ok((train.select(&lab), train.select(&unlab)))
}

// ── scoring helpers ───────────────────────────────────────────────────────

/// Raw anomaly scores of every window, in order.
pub fn raw_scores(model: &RtModel, windows: &WindowBatch) -> Result<Vec<f64>> {
    (0..windows.len())
        .into_par_iter()
        .map(|i| model.raw_score(&windows.window(i).view()))
        .collect()
}

/// Fits the score normalizer (min, max of raw training scores) on the model.
pub fn fit_score_norm(model: &mut RtModel, windows: &WindowBatch) -> Result<()> {
    let scores = raw_scores(model, windows)?;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    model.score_norm = Some((lo, hi));
    Ok(())
}

/// Labels each window 1 iff its normalized anomaly score exceeds `beta`.
pub fn pseudo_label(model: &RtModel, unlabeled: &WindowBatch, beta: f64) -> Result<Vec<u8>> {
    if model.score_norm.is_none() {
        return Err(Error::state("pseudo_label requires a fitted score normalizer"));
    }
    (0..unlabeled.len())
        .into_par_iter()
        .map(|i| {
            let s = model.score(&unlabeled.window(i).view())?;
            Ok(if s > beta { 1 } else { 0 })
        })
        .collect()
}

// ── the training loop ─────────────────────────────────────────────────────

/// Options of the epoch loop, exposed for ablations and tests.
#[derive(Debug, Clone, Copy)]
pub struct EpochOptions {
    /// Apply the label-dependent sign to the objective. With this off every
    /// window is fit as normal (the "no sign machinery" variant).
    pub use_sign: bool,
    /// Straight-through gradients through the binarized adjacency.
    pub straight_through: bool,
}

impl Default for EpochOptions {
    fn default() -> Self {
        EpochOptions { use_sign: true, straight_through: true }
    }
}

/// Trains `model` in place on the selected windows for the given number of
/// epochs; returns the mean per-window loss of each epoch.
pub fn train_epochs(
    model: &mut RtModel,
    windows: &WindowBatch,
    indices: &[usize],
    labels: &[u8],
    cfg: &PuConfig,
    epochs: usize,
    rng_tag: u64,
    opts: EpochOptions,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::data("training on an empty window set"));
    }
    assert_eq!(labels.len(), windows.len(), "labels align with the window batch");
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.dim()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ rng_tag);
    let latent = model.dims.latent;
    let blocks = model.conv.len();
    let mut epoch_losses = Vec::with_capacity(epochs);

    // Sub-batches share one tape (the temporal path runs batched) and are
    // farmed out to the thread pool; reduction order is fixed by position.
    let sub_batch = 8usize;

    for _epoch in 0..epochs {
        let mut order = indices.to_vec();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let snap = model.snapshot();
            let eps: Vec<Array1<f64>> = chunk
                .iter()
                .map(|_| Array1::from_shape_fn(latent, |_| rng.sample(rand_distr::StandardNormal)))
                .collect();

            type SubOut = (f64, Vec<Option<Array2<f64>>>, Vec<(Array1<f64>, Array1<f64>, usize)>);
            let subs: Vec<(usize, &[usize])> = chunk
                .chunks(sub_batch)
                .scan(0usize, |off, s| {
                    let item = (*off, s);
                    *off += s.len();
                    Some(item)
                })
                .collect();
            let results: Vec<SubOut> = subs
                .par_iter()
                .map(|&(off, sub)| {
                    let eps_mat = Array2::from_shape_fn((sub.len(), latent), |(r, c)| {
                        eps[off + r][c]
                    });
                    let mut tape = Tape::new();
                    let bm = BoundModel::bind(&mut tape, &snap);
                    let mut prebn = Vec::with_capacity(blocks);
                    let fwd = ForwardOpts { straight_through: opts.straight_through };
                    let lv = crate::model::build_batch_loss(
                        &mut tape,
                        &bm,
                        &snap,
                        &windows.windows.view(),
                        sub,
                        labels,
                        &eps_mat,
                        fwd,
                        Some(&mut prebn),
                    );
                    let root = if opts.use_sign {
                        lv.total
                    } else {
                        // kl - loglik + lambda * recon, no label sign
                        let t1 = tape.sub(lv.kl, lv.log_lik);
                        let t2 = tape.affine(lv.recon, snap.dims.lambda, 0.0);
                        let rows = tape.add(t1, t2);
                        tape.sum_all(rows)
                    };
                    let loss = tape.value(root)[[0, 0]];
                    let bn: Vec<(Array1<f64>, Array1<f64>, usize)> = prebn
                        .iter()
                        .map(|&v| {
                            let a = tape.value(v); // (B*W) x C pre-norm activations
                            let sum = a.sum_axis(ndarray::Axis(0));
                            let sumsq = a.mapv(|x| x * x).sum_axis(ndarray::Axis(0));
                            (sum, sumsq, a.nrows())
                        })
                        .collect();
                    let mut grads = tape.backward(root);
                    let g: Vec<Option<Array2<f64>>> =
                        bm.leaves.iter().map(|l| grads.take(*l)).collect();
                    (loss, g, bn)
                })
                .collect();

            // gradient mean over the chunk
            let mut acc: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
            let mut bn_sum: Vec<(Array1<f64>, Array1<f64>, usize)> = Vec::new();
            for (loss, g, bn) in &results {
                loss_sum += loss;
                for (a, gi) in acc.iter_mut().zip(g.iter()) {
                    if let Some(gi) = gi {
                        *a += gi;
                    }
                }
                for (b, part) in bn.iter().enumerate() {
                    if bn_sum.len() <= b {
                        bn_sum.push((part.0.clone(), part.1.clone(), part.2));
                    } else {
                        bn_sum[b].0 += &part.0;
                        bn_sum[b].1 += &part.1;
                        bn_sum[b].2 += part.2;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for a in acc.iter_mut() {
                a.mapv_inplace(|v| v * scale);
            }
            {
                let mut params = model.params_mut();
                adam.step(&mut params, &acc);
            }
            // running-statistic update, momentum 0.1
            for (b, (sum, sumsq, count)) in bn_sum.into_iter().enumerate() {
                let n = count as f64;
                let mean = &sum / n;
                let var = &sumsq / n - &mean.mapv(|m| m * m);
                let block = &mut model.conv[b];
                for c in 0..mean.len() {
                    block.running_mean[[0, c]] =
                        0.9 * block.running_mean[[0, c]] + 0.1 * mean[c];
                    block.running_var[[0, c]] =
                        0.9 * block.running_var[[0, c]] + 0.1 * var[c].max(0.0);
                }
            }
        }
        epoch_losses.push(loss_sum / order.len() as f64);
    }
    Ok(epoch_losses)
}

const PHASE1_TAG: u64 = 0x0001_f00d;
const PHASE3_TAG: u64 = 0x0003_f00d;

fn fit_inner(
    train: &WindowBatch,
    dims: ModelDims,
    cfg: &PuConfig,
    disable_pu: bool,
) -> Result<(RtModel, TrainingReport)> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut model = RtModel::new(dims, cfg.seed)?;
    let (labeled, unlabeled) = split_indices(train, cfg.labeled_negative_fraction, cfg.seed)?;

    // Phase 1: fit the labeled negatives as normal windows.
    let zeros = vec![0u8; train.len()];
    let phase1_losses = train_epochs(
        &mut model,
        train,
        &labeled,
        &zeros,
        cfg,
        cfg.epochs,
        PHASE1_TAG,
        EpochOptions::default(),
    )?;

    // Phase 2: normalize scores on the whole training pool, then
    // pseudo-label the unlabeled windows.
    fit_score_norm(&mut model, train)?;
    let mut labels = vec![0u8; train.len()];
    let mut pseudo_positive_count = 0usize;
    if !disable_pu && !unlabeled.is_empty() {
        let pool = train.select(&unlabeled);
        let pseudo = pseudo_label(&model, &pool, cfg.beta)?;
        for (j, &wi) in unlabeled.iter().enumerate() {
            labels[wi] = pseudo[j];
            pseudo_positive_count += pseudo[j] as usize;
        }
    }

    // Phase 3: continue training on everything with pseudo labels.
    let all: Vec<usize> = (0..train.len()).collect();
    let phase3_losses = train_epochs(
        &mut model,
        train,
        &all,
        &labels,
        cfg,
        cfg.epochs,
        PHASE3_TAG,
        EpochOptions::default(),
    )?;

    // Final calibration of the score normalizer.
    fit_score_norm(&mut model, train)?;
    model.attention_mean = Some(crate::localize::mean_attention(&model, train)?);

    let report = TrainingReport {
        beta: cfg.beta,
        seed: cfg.seed,
        labeled_negatives: labeled.len(),
        unlabeled: unlabeled.len(),
        phase1_losses,
        phase3_losses,
        pseudo_positive_count,
        pseudo_positive_rate: if unlabeled.is_empty() {
            0.0
        } else {
            pseudo_positive_count as f64 / unlabeled.len() as f64
        },
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Full positive-unlabeled fit: train on labeled negatives, pseudo-label the
/// pool, continue training on the union. Deterministic for a fixed config.
pub fn pu_fit(train: &WindowBatch, dims: ModelDims, cfg: &PuConfig) -> Result<(RtModel, TrainingReport)> {
    fit_inner(train, dims, cfg, false)
}

/// Ablation without positive-unlabeled learning: the same two training
/// phases with every window treated as normal.
pub fn fit_without_pu(train: &WindowBatch, dims: ModelDims, cfg: &PuConfig) -> Result<(RtModel, TrainingReport)> {
    fit_inner(train, dims, cfg, true)
}

//! The assembled model: attention + graph stack + GRU + convolution stack +
//! fusion + label-conditional VAE, plus the fitted statistics needed at
//! detection time (score normalizer, value stats, mean training attention).
//!
//! Parameters are enumerated in one canonical order used by the optimizer,
//! the checkpoint format, and the gradient tape bindings.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ingest::MinMaxStats;
use crate::lcvae::{LcvaeParams, LossVars, VaeVars};
use crate::relgraph::{AttentionParams, GcnStack};
use crate::temporal::{ConvVars, DcConvBlock, FusionLayer, GruParams, GruVars, BN_EPS};
use crate::{lcvae, relgraph, temporal};
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

/// All structural hyperparameters of the model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub metrics: usize,
    pub window: usize,
    /// Attention hidden size d.
    pub gat_hidden: usize,
    /// Graph-convolution feature width F; readouts have width 2F.
    pub gcn_feat: usize,
    /// Number of graph-convolution layers L.
    pub gcn_layers: usize,
    /// Pooling ratio k in (0, 1].
    pub pool_ratio: f64,
    /// Attention binarization threshold t.
    pub binarize_t: f64,
    pub gru_hidden: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub dilations: Vec<usize>,
    /// Fused embedding width E.
    pub embed: usize,
    /// VAE latent dimension.
    pub latent: usize,
    /// Hidden width of the VAE encoder/decoder bodies.
    pub vae_hidden: usize,
    /// Loss trade-off coefficient.
    pub lambda: f64,
}

impl ModelDims {
    /// Paper-configured sizes for a dataset with `metrics` metrics and the
    /// given window length: attention 256, GRU/conv 128, latent 10,
    /// lambda 0.5, two graph layers at k = 0.5, t = 1/M.
    pub fn for_data(metrics: usize, window: usize) -> ModelDims {
        ModelDims {
            metrics,
            window,
            gat_hidden: 256,
            gcn_feat: 64,
            gcn_layers: 2,
            pool_ratio: 0.5,
            binarize_t: 1.0 / metrics as f64,
            gru_hidden: 128,
            conv_channels: 128,
            conv_kernel: 3,
            dilations: vec![1, 2, 4],
            embed: 128,
            latent: 10,
            vae_hidden: 64,
            lambda: 0.5,
        }
    }

    pub fn fusion_input(&self) -> usize {
        2 * self.gcn_feat + self.gru_hidden + self.conv_channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.metrics,
            self.window,
            self.gat_hidden,
            self.gcn_feat,
            self.gcn_layers,
            self.gru_hidden,
            self.conv_channels,
            self.conv_kernel,
            self.embed,
            self.latent,
            self.vae_hidden,
        ];
        if positive.iter().any(|&v| v == 0) || self.dilations.is_empty() {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !(self.pool_ratio > 0.0 && self.pool_ratio <= 1.0) {
            return Err(Error::config("pool ratio must be in (0, 1]"));
        }
        if !self.binarize_t.is_finite() || self.binarize_t < 0.0 {
            return Err(Error::config("binarize threshold must be finite and >= 0"));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be >= 0"));
        }
        // every pooling step must keep at least one node
        let mut nodes = self.metrics;
        for _ in 0..self.gcn_layers.saturating_sub(1) {
            nodes = (self.pool_ratio * nodes as f64).floor() as usize;
            if nodes == 0 {
                return Err(Error::config(format!(
                    "pool ratio {} keeps zero of {} metrics",
                    self.pool_ratio, self.metrics
                )));
            }
        }
        Ok(())
    }
}

/// Model parameters plus fitted detection-time state.
#[derive(Debug, Clone)]
pub struct RtModel {
    pub dims: ModelDims,
    pub attention: AttentionParams,
    pub gcn: GcnStack,
    pub gru: GruParams,
    pub conv: Vec<DcConvBlock>,
    pub fusion: FusionLayer,
    pub vae: LcvaeParams,
    /// (min, max) of raw training scores; fitted after training.
    pub score_norm: Option<(f64, f64)>,
    /// Per-metric (min, max) of the raw training values.
    pub value_stats: Option<MinMaxStats>,
    /// Per-metric (mean, std) of the raw training values.
    pub metric_stats: Option<Vec<(f64, f64)>>,
    /// Mean continuous attention over the training windows.
    pub attention_mean: Option<Array2<f64>>,
    pub metric_names: Vec<String>,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

impl RtModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<RtModel> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let (m, w) = (dims.metrics, dims.window);

        let attention = AttentionParams {
            w_pair: xavier(2 * w, dims.gat_hidden, &mut rng),
            p: xavier(dims.gat_hidden, 1, &mut rng),
        };

        let mut thetas = vec![xavier(w, dims.gcn_feat, &mut rng)];
        for _ in 1..dims.gcn_layers {
            thetas.push(xavier(dims.gcn_feat, dims.gcn_feat, &mut rng));
        }
        let scorers = (1..dims.gcn_layers)
            .map(|_| xavier(dims.gcn_feat, 1, &mut rng))
            .collect();
        let gcn = GcnStack { thetas, scorers, pool_ratio: dims.pool_ratio };
        gcn.validate(m, w)?;

        let h = dims.gru_hidden;
        let gru = GruParams {
            wz: xavier(m, h, &mut rng),
            uz: xavier(h, h, &mut rng),
            bz: Array2::zeros((1, h)),
            wr: xavier(m, h, &mut rng),
            ur: xavier(h, h, &mut rng),
            br: Array2::zeros((1, h)),
            wh: xavier(m, h, &mut rng),
            uh: xavier(h, h, &mut rng),
            bh: Array2::zeros((1, h)),
        };

        let c = dims.conv_channels;
        let mut conv = Vec::new();
        let mut cin = m;
        for &dil in &dims.dilations {
            conv.push(DcConvBlock {
                weight: xavier(dims.conv_kernel * cin, c, &mut rng),
                bias: Array2::zeros((1, c)),
                gamma: Array2::ones((1, c)),
                beta: Array2::zeros((1, c)),
                running_mean: Array2::zeros((1, c)),
                running_var: Array2::ones((1, c)),
                kernel: dims.conv_kernel,
                dilation: dil,
            });
            cin = c;
        }

        let fusion = FusionLayer {
            weight: xavier(dims.fusion_input(), dims.embed, &mut rng),
            bias: Array2::zeros((1, dims.embed)),
        };

        let e = dims.embed;
        let vh = dims.vae_hidden;
        let lat = dims.latent;
        let vae = LcvaeParams {
            enc_w1: xavier(e + 2, vh, &mut rng),
            enc_b1: Array2::zeros((1, vh)),
            enc_wmu: xavier(vh, lat, &mut rng),
            enc_bmu: Array2::zeros((1, lat)),
            enc_wlv: xavier(vh, lat, &mut rng),
            enc_blv: Array2::zeros((1, lat)),
            dec_w1: xavier(lat + 2, vh, &mut rng),
            dec_b1: Array2::zeros((1, vh)),
            dec_wmu: xavier(vh, e, &mut rng),
            dec_bmu: Array2::zeros((1, e)),
            dec_wlv: xavier(vh, e, &mut rng),
            dec_blv: Array2::zeros((1, e)),
        };

        Ok(RtModel {
            dims,
            attention,
            gcn,
            gru,
            conv,
            fusion,
            vae,
            score_norm: None,
            value_stats: None,
            metric_stats: None,
            attention_mean: None,
            metric_names: Vec::new(),
        })
    }

    // Canonical parameter order. `param_names`, `params`, `params_mut` and
    // `ModelSnapshot`/`BoundModel::bind` must all walk fields identically.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["attn.w_pair".to_string(), "attn.p".to_string()];
        for l in 0..self.gcn.thetas.len() {
            names.push(format!("gcn.theta{l}"));
        }
        for l in 0..self.gcn.scorers.len() {
            names.push(format!("gcn.scorer{l}"));
        }
        for g in ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"] {
            names.push(format!("gru.{g}"));
        }
        for b in 0..self.conv.len() {
            for f in ["weight", "bias", "gamma", "beta"] {
                names.push(format!("conv{b}.{f}"));
            }
        }
        names.push("fusion.weight".to_string());
        names.push("fusion.bias".to_string());
        for f in [
            "enc_w1", "enc_b1", "enc_wmu", "enc_bmu", "enc_wlv", "enc_blv", "dec_w1", "dec_b1",
            "dec_wmu", "dec_bmu", "dec_wlv", "dec_blv",
        ] {
            names.push(format!("vae.{f}"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = vec![&self.attention.w_pair, &self.attention.p];
        out.extend(self.gcn.thetas.iter());
        out.extend(self.gcn.scorers.iter());
        let g = &self.gru;
        out.extend([&g.wz, &g.uz, &g.bz, &g.wr, &g.ur, &g.br, &g.wh, &g.uh, &g.bh]);
        for b in &self.conv {
            out.extend([&b.weight, &b.bias, &b.gamma, &b.beta]);
        }
        out.extend([&self.fusion.weight, &self.fusion.bias]);
        let v = &self.vae;
        out.extend([
            &v.enc_w1, &v.enc_b1, &v.enc_wmu, &v.enc_bmu, &v.enc_wlv, &v.enc_blv, &v.dec_w1,
            &v.dec_b1, &v.dec_wmu, &v.dec_bmu, &v.dec_wlv, &v.dec_blv,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.attention.w_pair, &mut self.attention.p];
        out.extend(self.gcn.thetas.iter_mut());
        out.extend(self.gcn.scorers.iter_mut());
        let g = &mut self.gru;
        out.extend([
            &mut g.wz, &mut g.uz, &mut g.bz, &mut g.wr, &mut g.ur, &mut g.br, &mut g.wh,
            &mut g.uh, &mut g.bh,
        ]);
        for b in &mut self.conv {
            out.extend([&mut b.weight, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        out.extend([&mut self.fusion.weight, &mut self.fusion.bias]);
        let v = &mut self.vae;
        out.extend([
            &mut v.enc_w1, &mut v.enc_b1, &mut v.enc_wmu, &mut v.enc_bmu, &mut v.enc_wlv,
            &mut v.enc_blv, &mut v.dec_w1, &mut v.dec_b1, &mut v.dec_wmu, &mut v.dec_bmu,
            &mut v.dec_wlv, &mut v.dec_blv,
        ]);
        out
    }

    /// Cheap-to-share copy of parameters and frozen statistics for a batch
    /// of tape forwards.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            dims: self.dims.clone(),
            params: self.params().into_iter().map(|a| Arc::new(a.clone())).collect(),
            running: self
                .conv
                .iter()
                .map(|b| (b.running_mean.clone(), b.running_var.clone()))
                .collect(),
        }
    }

    // ── plain forward ────────────────────────────────────────────────────

    /// Fused relational-temporal embedding of one normalized window plus the
    /// continuous attention matrix. Pure and deterministic.
    pub fn embed_window(&self, window: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let a = relgraph::attention_scores(&self.attention, window)?;
        let rel = relgraph::relational_from_attention(&self.gcn, &a.view(), self.dims.binarize_t, window)?;
        let temp = temporal::temporal_embed(&self.gru, &self.conv, window);
        let e = temporal::fuse(&self.fusion, &rel, &temp)?;
        Ok((e, a))
    }

    /// Raw (unnormalized) anomaly score of one window.
    pub fn raw_score(&self, window: &ArrayView2<f64>) -> Result<f64> {
        let (e, _) = self.embed_window(window)?;
        Ok(lcvae::raw_score(&self.vae, &e))
    }

    /// Normalized anomaly score in [0, 1]. Requires a fitted normalizer.
    pub fn score(&self, window: &ArrayView2<f64>) -> Result<f64> {
        let norm = self
            .score_norm
            .ok_or_else(|| Error::state("score normalizer not fitted; train first"))?;
        let (e, _) = self.embed_window(window)?;
        Ok(lcvae::anomaly_score(&self.vae, &e, norm))
    }

    // ── checkpointing ────────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = BTreeMap::new();
        for (name, arr) in self.param_names().into_iter().zip(self.params()) {
            arrays.insert(name, ArrayJson::from(arr));
        }
        for (b, block) in self.conv.iter().enumerate() {
            arrays.insert(format!("conv{b}.running_mean"), ArrayJson::from(&block.running_mean));
            arrays.insert(format!("conv{b}.running_var"), ArrayJson::from(&block.running_var));
        }
        if let Some(a) = &self.attention_mean {
            arrays.insert("attention_mean".to_string(), ArrayJson::from(a));
        }
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            dims: self.dims.clone(),
            metric_names: self.metric_names.clone(),
            score_norm: self.score_norm,
            value_stats: self.value_stats.clone(),
            metric_stats: self.metric_stats.clone(),
            arrays,
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| Error::checkpoint(format!("serialize: {e}")))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RtModel> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| Error::checkpoint(format!("{}: malformed checkpoint: {e}", path.display())))?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.format_version
            )));
        }
        let mut model = RtModel::new(file.dims, 0)?;
        let names = model.param_names();
        {
            let mut params = model.params_mut();
            for (name, param) in names.iter().zip(params.iter_mut()) {
                let stored = file
                    .arrays
                    .get(name)
                    .ok_or_else(|| Error::checkpoint(format!("missing array '{name}'")))?;
                **param = stored.to_array(name)?;
                if param.dim() != stored.dim() {
                    return Err(Error::checkpoint(format!("array '{name}' has wrong shape")));
                }
            }
        }
        for b in 0..model.conv.len() {
            let mean_name = format!("conv{b}.running_mean");
            let var_name = format!("conv{b}.running_var");
            if let Some(a) = file.arrays.get(&mean_name) {
                model.conv[b].running_mean = a.to_array(&mean_name)?;
            }
            if let Some(a) = file.arrays.get(&var_name) {
                model.conv[b].running_var = a.to_array(&var_name)?;
            }
        }
        model.attention_mean = file
            .arrays
            .get("attention_mean")
            .map(|a| a.to_array("attention_mean"))
            .transpose()?;
        model.score_norm = file.score_norm;
        model.value_stats = file.value_stats;
        model.metric_stats = file.metric_stats;
        model.metric_names = file.metric_names;
        Ok(model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointFile {
    format_version: u32,
    dims: ModelDims,
    metric_names: Vec<String>,
    score_norm: Option<(f64, f64)>,
    value_stats: Option<Vec<(f64, f64)>>,
    metric_stats: Option<Vec<(f64, f64)>>,
    arrays: BTreeMap<String, ArrayJson>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayJson {
    shape: (usize, usize),
    data: Vec<f64>,
}

impl ArrayJson {
    fn from(a: &Array2<f64>) -> ArrayJson {
        ArrayJson { shape: a.dim(), data: a.iter().copied().collect() }
    }

    fn dim(&self) -> (usize, usize) {
        self.shape
    }

    fn to_array(&self, name: &str) -> Result<Array2<f64>> {
        Array2::from_shape_vec(self.shape, self.data.clone())
            .map_err(|_| Error::checkpoint(format!("array '{name}': shape/data mismatch")))
    }
}

// ── tape binding ──────────────────────────────────────────────────────────

/// Immutable parameter snapshot shared across the tape forwards of a batch.
#[derive(Clone)]
pub struct ModelSnapshot {
    pub dims: ModelDims,
    params: Vec<Arc<Array2<f64>>>,
    running: Vec<(Array2<f64>, Array2<f64>)>,
}

/// Parameter handles bound onto one tape, in canonical order in `leaves`.
pub struct BoundModel {
    pub w_pair: Var,
    pub p: Var,
    pub thetas: Vec<Var>,
    pub scorers: Vec<Var>,
    pub gru: GruVars,
    pub conv: Vec<ConvVars>,
    pub fusion_w: Var,
    pub fusion_b: Var,
    pub vae: VaeVars,
    pub leaves: Vec<Var>,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, snap: &ModelSnapshot) -> BoundModel {
        let mut leaves = Vec::with_capacity(snap.params.len());
        let mut next = {
            let mut i = 0usize;
            move |tape: &mut Tape, leaves: &mut Vec<Var>| {
                let v = tape.leaf(Arc::clone(&snap.params[i]));
                leaves.push(v);
                i += 1;
                v
            }
        };
        let dims = &snap.dims;
        let w_pair = next(tape, &mut leaves);
        let p = next(tape, &mut leaves);
        let thetas: Vec<Var> = (0..dims.gcn_layers).map(|_| next(tape, &mut leaves)).collect();
        let scorers: Vec<Var> = (1..dims.gcn_layers).map(|_| next(tape, &mut leaves)).collect();
        let gru = GruVars {
            wz: next(tape, &mut leaves),
            uz: next(tape, &mut leaves),
            bz: next(tape, &mut leaves),
            wr: next(tape, &mut leaves),
            ur: next(tape, &mut leaves),
            br: next(tape, &mut leaves),
            wh: next(tape, &mut leaves),
            uh: next(tape, &mut leaves),
            bh: next(tape, &mut leaves),
        };
        let mut conv = Vec::with_capacity(dims.dilations.len());
        for (b, &dilation) in dims.dilations.iter().enumerate() {
            let weight = next(tape, &mut leaves);
            let bias = next(tape, &mut leaves);
            let gamma = next(tape, &mut leaves);
            let beta = next(tape, &mut leaves);
            let (mean, var) = &snap.running[b];
            conv.push(ConvVars {
                weight,
                bias,
                gamma,
                beta,
                neg_mean: tape.constant(mean.mapv(|v| -v)),
                inv_std: tape.constant(var.mapv(|v| 1.0 / (v + BN_EPS).sqrt())),
                kernel: dims.conv_kernel,
                dilation,
            });
        }
        let fusion_w = next(tape, &mut leaves);
        let fusion_b = next(tape, &mut leaves);
        let vae = VaeVars {
            enc_w1: next(tape, &mut leaves),
            enc_b1: next(tape, &mut leaves),
            enc_wmu: next(tape, &mut leaves),
            enc_bmu: next(tape, &mut leaves),
            enc_wlv: next(tape, &mut leaves),
            enc_blv: next(tape, &mut leaves),
            dec_w1: next(tape, &mut leaves),
            dec_b1: next(tape, &mut leaves),
            dec_wmu: next(tape, &mut leaves),
            dec_bmu: next(tape, &mut leaves),
            dec_wlv: next(tape, &mut leaves),
            dec_blv: next(tape, &mut leaves),
        };
        assert_eq!(leaves.len(), snap.params.len(), "bind order out of sync");
        BoundModel { w_pair, p, thetas, scorers, gru, conv, fusion_w, fusion_b, vae, leaves }
    }
}

/// Forward-pass options for the tape path.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// Pass gradients through the binarized adjacency onto the kept
    /// attention entries (training). Disable for exact finite-difference
    /// comparisons: the binary graph is then a constant of the forward.
    pub straight_through: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts { straight_through: true }
    }
}

/// Builds the fused embedding of one window on the tape. Returns the
/// embedding (1 x E) and the continuous attention (M x M).
pub fn build_embedding(
    tape: &mut Tape,
    bm: &BoundModel,
    snap: &ModelSnapshot,
    window: &ArrayView2<f64>,
    opts: ForwardOpts,
    prebn: Option<&mut Vec<Var>>,
) -> (Var, Var) {
    let x = tape.constant(window.to_owned());
    let (rel, a) = relgraph::build_relational(
        tape,
        x,
        bm.w_pair,
        bm.p,
        &bm.thetas,
        &bm.scorers,
        snap.dims.pool_ratio,
        snap.dims.binarize_t,
        opts.straight_through,
    );
    let gmean = temporal::build_gru_mean(tape, window, &bm.gru);
    let cmean = temporal::build_conv_mean(tape, window, &bm.conv, prebn);
    let temp = tape.concat_cols(gmean, cmean);
    let joined = tape.concat_cols(rel, temp);
    let e0 = tape.matmul(joined, bm.fusion_w);
    let e = tape.add_row(e0, bm.fusion_b);
    (e, a)
}

/// Builds the full per-window training loss on the tape.
#[allow(clippy::too_many_arguments)]
pub fn build_window_loss(
    tape: &mut Tape,
    bm: &BoundModel,
    snap: &ModelSnapshot,
    window: &ArrayView2<f64>,
    y: u8,
    eps_draws: &[Array1<f64>],
    opts: ForwardOpts,
    prebn: Option<&mut Vec<Var>>,
) -> LossVars {
    let (e, _) = build_embedding(tape, bm, snap, window, opts, prebn);
    lcvae::build_loss(tape, &bm.vae, e, y, eps_draws, snap.dims.lambda)
}

/// Builds the training loss of a whole sub-batch on one tape. The graph
/// path runs per window; the GRU, convolution, fusion, and VAE run batched.
/// Row-equivalent to [`build_window_loss`] per window.
#[allow(clippy::too_many_arguments)]
pub fn build_batch_loss(
    tape: &mut Tape,
    bm: &BoundModel,
    snap: &ModelSnapshot,
    windows: &ndarray::ArrayView3<f64>,
    idx: &[usize],
    labels: &[u8],
    eps: &Array2<f64>,
    opts: ForwardOpts,
    prebn: Option<&mut Vec<Var>>,
) -> lcvae::BatchLossVars {
    assert!(!idx.is_empty());
    let rel_rows: Vec<Var> = idx
        .iter()
        .map(|&wi| {
            let x = tape.constant(windows.index_axis(ndarray::Axis(0), wi).to_owned());
            let (rel, _) = relgraph::build_relational(
                tape,
                x,
                bm.w_pair,
                bm.p,
                &bm.thetas,
                &bm.scorers,
                snap.dims.pool_ratio,
                snap.dims.binarize_t,
                opts.straight_through,
            );
            rel
        })
        .collect();
    let rel = tape.stack_rows(&rel_rows);
    let gmean = temporal::build_gru_mean_batched(tape, windows, idx, &bm.gru);
    let cmean = temporal::build_conv_mean_batched(tape, windows, idx, &bm.conv, prebn);
    let temp = tape.concat_cols(gmean, cmean);
    let joined = tape.concat_cols(rel, temp);
    let e0 = tape.matmul(joined, bm.fusion_w);
    let e = tape.add_row(e0, bm.fusion_b);
    let ys: Vec<u8> = idx.iter().map(|&wi| labels[wi]).collect();
    lcvae::build_loss_batched(tape, &bm.vae, e, &ys, eps, snap.dims.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            metrics: 3,
            window: 8,
            gat_hidden: 4,
            gcn_feat: 4,
            gcn_layers: 2,
            pool_ratio: 0.7,
            binarize_t: 1.0 / 3.0,
            gru_hidden: 3,
            conv_channels: 4,
            conv_kernel: 2,
            dilations: vec![1, 2],
            embed: 5,
            latent: 3,
            vae_hidden: 6,
            lambda: 0.5,
        }
    }

    #[test]
    fn param_enumeration_consistent() {
        let model = RtModel::new(tiny_dims(), 7).unwrap();
        let names = model.param_names();
        let params = model.params();
        assert_eq!(names.len(), params.len());
        let snap = model.snapshot();
        assert_eq!(snap.params.len(), params.len());
        let mut m2 = model.clone();
        assert_eq!(m2.params_mut().len(), params.len());

        let mut tape = Tape::new();
        let bm = BoundModel::bind(&mut tape, &snap);
        assert_eq!(bm.leaves.len(), params.len());
        for (leaf, arr) in bm.leaves.iter().zip(params.iter()) {
            assert_eq!(tape.value(*leaf).dim(), arr.dim());
        }
    }

    #[test]
    fn tape_embedding_matches_plain_forward() {
        let model = RtModel::new(tiny_dims(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let window = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0));
        let (plain, plain_a) = model.embed_window(&window.view()).unwrap();

        let snap = model.snapshot();
        let mut tape = Tape::new();
        let bm = BoundModel::bind(&mut tape, &snap);
        let (e, a) = build_embedding(&mut tape, &bm, &snap, &window.view(), ForwardOpts::default(), None);
        for (i, v) in plain.iter().enumerate() {
            assert!((tape.value(e)[[0, i]] - v).abs() < 1e-12, "embed dim {i}");
        }
        let diff = (tape.value(a) - &plain_a).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = RtModel::new(tiny_dims(), 9).unwrap();
        model.score_norm = Some((0.25, 1.75));
        model.value_stats = Some(vec![(0.0, 1.0), (-1.0, 2.0), (0.5, 0.5)]);
        model.metric_stats = Some(vec![(0.1, 0.9), (0.2, 0.8), (0.3, 0.7)]);
        model.attention_mean = Some(Array2::from_elem((3, 3), 1.0 / 3.0));
        model.metric_names = vec!["a".into(), "b".into(), "c".into()];
        model.conv[0].running_mean[[0, 1]] = 0.33;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        model.save(&path).unwrap();
        let back = RtModel::load(&path).unwrap();

        for (a, b) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(back.score_norm, model.score_norm);
        assert_eq!(back.conv[0].running_mean, model.conv[0].running_mean);
        assert_eq!(back.attention_mean, model.attention_mean);
        assert_eq!(back.metric_names, model.metric_names);

        // identical scores after reload
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let window = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0));
        assert_eq!(
            model.score(&window.view()).unwrap(),
            back.score(&window.view()).unwrap()
        );
    }

    #[test]
    fn checkpoint_version_mismatch_rejected() {
        let model = RtModel::new(tiny_dims(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replace("\"format_version\":1", "\"format_version\":9");
        std::fs::write(&path, bumped).unwrap();
        match RtModel::load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn score_requires_fitted_normalizer() {
        let model = RtModel::new(tiny_dims(), 2).unwrap();
        let window = Array2::zeros((3, 8));
        assert!(matches!(model.score(&window.view()), Err(Error::State(_))));
    }

    #[test]
    fn batched_loss_matches_per_window() {
        let model = RtModel::new(tiny_dims(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let b = 5usize;
        let mut windows = ndarray::Array3::zeros((b, 3, 8));
        for mut w in windows.outer_iter_mut() {
            w.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        }
        let labels = [0u8, 1, 0, 0, 1];
        let eps = Array2::from_shape_fn((b, 3), |_| rng.gen_range(-1.0..1.0));
        let idx: Vec<usize> = (0..b).collect();
        let snap = model.snapshot();

        let mut tape = Tape::new();
        let bm = BoundModel::bind(&mut tape, &snap);
        let mut prebn_b = Vec::new();
        let lv = build_batch_loss(
            &mut tape,
            &bm,
            &snap,
            &windows.view(),
            &idx,
            &labels,
            &eps,
            ForwardOpts::default(),
            Some(&mut prebn_b),
        );
        let batch_losses: Vec<f64> = tape.value(lv.train_loss).column(0).to_vec();
        let mut grads = tape.backward(lv.total);
        let batch_grads: Vec<Array2<f64>> = bm
            .leaves
            .iter()
            .zip(model.params())
            .map(|(l, p)| grads.take(*l).unwrap_or_else(|| Array2::zeros(p.dim())))
            .collect();

        // per-window reference: sum of individual losses and gradients
        let mut ref_grads: Vec<Array2<f64>> =
            model.params().iter().map(|p| Array2::zeros(p.dim())).collect();
        for wi in 0..b {
            let window = windows.index_axis(ndarray::Axis(0), wi).to_owned();
            let draw = vec![eps.row(wi).to_owned()];
            let mut tape = Tape::new();
            let bm = BoundModel::bind(&mut tape, &snap);
            let lv = build_window_loss(
                &mut tape,
                &bm,
                &snap,
                &window.view(),
                labels[wi],
                &draw,
                ForwardOpts::default(),
                None,
            );
            let single = tape.value(lv.train_loss)[[0, 0]];
            assert!(
                (single - batch_losses[wi]).abs() < 1e-10,
                "window {wi}: {single} vs {}",
                batch_losses[wi]
            );
            let mut g = tape.backward(lv.train_loss);
            for (acc, (leaf, p)) in ref_grads.iter_mut().zip(bm.leaves.iter().zip(model.params())) {
                if let Some(gi) = g.take(*leaf) {
                    *acc += &gi;
                } else {
                    let _ = p;
                }
            }
        }
        for (name, (a, b)) in model.param_names().iter().zip(batch_grads.iter().zip(ref_grads.iter())) {
            let diff = (a - b).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(diff < 1e-9, "{name}: grad diff {diff}");
        }
    }

    fn loss_value(model: &RtModel, window: &Array2<f64>, y: u8, eps: &[ndarray::Array1<f64>]) -> f64 {
        let snap = model.snapshot();
        let mut tape = Tape::inference();
        let bm = BoundModel::bind(&mut tape, &snap);
        let opts = ForwardOpts { straight_through: false };
        let lv = build_window_loss(&mut tape, &bm, &snap, &window.view(), y, eps, opts, None);
        tape.value(lv.train_loss)[[0, 0]]
    }

    /// Full composed loss: analytic gradients against central differences
    /// for every parameter element at a tiny configuration.
    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let model = RtModel::new(tiny_dims(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let window = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0));
        let eps = vec![ndarray::Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0f64))];

        for y in [0u8, 1u8] {
            let snap = model.snapshot();
            let mut tape = Tape::new();
            let bm = BoundModel::bind(&mut tape, &snap);
            let opts = ForwardOpts { straight_through: false };
            let lv = build_window_loss(&mut tape, &bm, &snap, &window.view(), y, &eps, opts, None);
            let mut grads = tape.backward(lv.train_loss);
            let analytic: Vec<Array2<f64>> = bm
                .leaves
                .iter()
                .zip(model.params())
                .map(|(leaf, p)| grads.take(*leaf).unwrap_or_else(|| Array2::zeros(p.dim())))
                .collect();

            let h = 1e-5;
            let names = model.param_names();
            let mut worst = 0.0f64;
            for (pi, name) in names.iter().enumerate() {
                let dim = model.params()[pi].dim();
                for r in 0..dim.0 {
                    for c in 0..dim.1 {
                        let mut mp = model.clone();
                        mp.params_mut()[pi][[r, c]] += h;
                        let fp = loss_value(&mp, &window, y, &eps);
                        let mut mm = model.clone();
                        mm.params_mut()[pi][[r, c]] -= h;
                        let fm = loss_value(&mm, &window, y, &eps);
                        let fd = (fp - fm) / (2.0 * h);
                        let an = analytic[pi][[r, c]];
                        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                        assert!(
                            rel < 1e-4,
                            "y={y} {name}[{r},{c}]: analytic {an} vs fd {fd} (rel {rel})"
                        );
                        worst = worst.max(rel);
                    }
                }
            }
            assert!(worst < 1e-4);
        }
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
}

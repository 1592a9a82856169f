//! Relational embedding: graph attention over metrics, sparsified into a
//! binary correlation graph, then graph convolutions with self-attention
//! pooling and mean/max readouts.
//!
//! Every operation exists twice: a plain `ndarray` version used for scoring
//! and localization, and a tape version used during training. The two are
//! held equal by tests.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2};

/// Negative slope of the attention LeakyReLU.
pub const ATTENTION_LEAKY_SLOPE: f64 = 0.2;

/// Learnable attention parameters: the pair projection (2W x d) and the
/// scoring vector (d x 1).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_pair: Array2<f64>,
    pub p: Array2<f64>,
}

/// Continuous and binarized inter-metric attention.
#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    /// Row-stochastic M x M attention.
    pub a: Array2<f64>,
    /// 0/1 adjacency: `binary[i][j] = 1` iff `a[i][j] >= threshold_t`.
    pub binary: Array2<f64>,
    pub threshold_t: f64,
}

impl AttentionMatrix {
    pub fn from_continuous(a: Array2<f64>, threshold_t: f64) -> Self {
        let binary = binarize_adjacency(&a.view(), threshold_t);
        AttentionMatrix { a, binary, threshold_t }
    }
}

/// Graph-convolution stack: one weight matrix per layer and one pooling
/// scorer between consecutive layers.
#[derive(Debug, Clone)]
pub struct GcnStack {
    /// Layer weights; `thetas[0]` maps window length W to F, later layers F to F.
    pub thetas: Vec<Array2<f64>>,
    /// Pooling scorers (F x 1), one between each pair of layers.
    pub scorers: Vec<Array2<f64>>,
    /// Fraction of nodes kept by each pooling step.
    pub pool_ratio: f64,
}

impl GcnStack {
    /// Validates layer dimension chaining and that every pooling step keeps
    /// at least one node for `metrics` input nodes.
    pub fn validate(&self, metrics: usize, window: usize) -> Result<()> {
        if self.thetas.is_empty() {
            return Err(Error::config("gcn stack needs at least one layer"));
        }
        if !(self.pool_ratio > 0.0 && self.pool_ratio <= 1.0) {
            return Err(Error::config("pool ratio must be in (0, 1]"));
        }
        if self.scorers.len() + 1 != self.thetas.len() {
            return Err(Error::config("need exactly one pooling scorer between layers"));
        }
        let mut in_dim = window;
        let mut nodes = metrics;
        for (l, theta) in self.thetas.iter().enumerate() {
            if theta.nrows() != in_dim {
                return Err(Error::config(format!(
                    "gcn layer {l}: weight rows {} != input dim {in_dim}",
                    theta.nrows()
                )));
            }
            in_dim = theta.ncols();
            if l < self.scorers.len() {
                if self.scorers[l].dim() != (in_dim, 1) {
                    return Err(Error::config(format!("pool scorer {l}: expected {in_dim}x1")));
                }
                nodes = (self.pool_ratio * nodes as f64).floor() as usize;
                if nodes == 0 {
                    return Err(Error::config(format!(
                        "pool ratio {} keeps zero nodes at layer {l}",
                        self.pool_ratio
                    )));
                }
            }
        }
        Ok(())
    }

    /// Output width of the summed readouts.
    pub fn readout_width(&self) -> usize {
        2 * self.thetas.last().map_or(0, |t| t.ncols())
    }
}

// ── plain operations ──────────────────────────────────────────────────────

/// Graph-attention scores over the metrics of one window (M x W): the score
/// of the ordered pair (i, j) is `p . LeakyReLU((x_i ++ x_j) w_pair)`,
/// softmax-normalized over j. Rows sum to one.
pub fn attention_scores(params: &AttentionParams, window: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if !window.iter().all(|v| v.is_finite()) {
        return Err(Error::data("attention input window contains non-finite values"));
    }
    let (m, w) = window.dim();
    assert_eq!(params.w_pair.nrows(), 2 * w, "w_pair rows must be 2W");
    // (x_i ++ x_j) w = x_i w_top + x_j w_bot
    let top = params.w_pair.slice(ndarray::s![..w, ..]);
    let bot = params.w_pair.slice(ndarray::s![w.., ..]);
    let u = window.dot(&top); // M x d
    let v = window.dot(&bot); // M x d
    let d = u.ncols();
    let mut logits = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            let mut s = 0.0;
            for c in 0..d {
                let pre = u[[i, c]] + v[[j, c]];
                let act = if pre > 0.0 { pre } else { ATTENTION_LEAKY_SLOPE * pre };
                s += params.p[[c, 0]] * act;
            }
            logits[[i, j]] = s;
        }
    }
    Ok(softmax_rows(&logits))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

/// Thresholds a row-stochastic attention matrix into a 0/1 adjacency.
/// Self-loops are not added here; the graph convolution adds the identity.
pub fn binarize_adjacency(a: &ArrayView2<f64>, t: f64) -> Array2<f64> {
    a.mapv(|x| if x >= t { 1.0 } else { 0.0 })
}

/// Symmetric normalization `D^{-1/2} (A + I) D^{-1/2}`.
fn sym_norm(a_bin: &ArrayView2<f64>) -> Array2<f64> {
    let n = a_bin.nrows();
    let mut s = a_bin.to_owned();
    for i in 0..n {
        s[[i, i]] += 1.0;
    }
    let dinv: Vec<f64> = (0..n)
        .map(|i| s.row(i).sum().powf(-0.5))
        .collect();
    for i in 0..n {
        for j in 0..n {
            s[[i, j]] *= dinv[i] * dinv[j];
        }
    }
    s
}

/// One graph convolution: `ReLU(D^{-1/2} (A + I) D^{-1/2} h theta)`.
pub fn gcn_layer(h: &ArrayView2<f64>, a_bin: &ArrayView2<f64>, theta: &ArrayView2<f64>) -> Array2<f64> {
    let s = sym_norm(a_bin);
    let mut out = s.dot(h).dot(theta);
    out.mapv_inplace(|x| x.max(0.0));
    out
}

/// All indices ordered by value descending, ties broken by lower index.
pub fn rank_desc(z: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Indices of the `k` largest values, ties broken by lower index; the
/// result is in ascending index order.
pub fn top_k_desc(z: &[f64], k: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = rank_desc(z).into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Self-attention graph pooling: scores each node with one graph
/// convolution, keeps the `floor(k * M)` highest-scoring nodes (ties to the
/// lower index), gates kept features by `tanh(score)`, and induces the
/// subgraph on the kept nodes.
pub fn sag_pool(
    h: &ArrayView2<f64>,
    a_bin: &ArrayView2<f64>,
    k: f64,
    scorer: &ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
    let m = h.nrows();
    let keep = (k * m as f64).floor() as usize;
    if !(k > 0.0 && k <= 1.0) || keep == 0 {
        return Err(Error::config(format!("pool ratio {k} keeps zero of {m} nodes")));
    }
    let z = gcn_layer(h, a_bin, scorer); // M x 1
    let zs: Vec<f64> = z.column(0).to_vec();
    let kept = top_k_desc(&zs, keep);
    let mut h_kept = Array2::zeros((keep, h.ncols()));
    for (r, &i) in kept.iter().enumerate() {
        let gate = zs[i].tanh();
        for c in 0..h.ncols() {
            h_kept[[r, c]] = h[[i, c]] * gate;
        }
    }
    let mut a_kept = Array2::zeros((keep, keep));
    for (r, &i) in kept.iter().enumerate() {
        for (c, &j) in kept.iter().enumerate() {
            a_kept[[r, c]] = a_bin[[i, j]];
        }
    }
    Ok((h_kept, a_kept, kept))
}

/// Readout: concatenation of per-feature mean and per-feature max over nodes.
pub fn readout(h: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let (n, f) = h.dim();
    if n == 0 {
        return Err(Error::data("readout over zero nodes"));
    }
    let mut out = Array1::zeros(2 * f);
    for c in 0..f {
        let col = h.column(c);
        out[c] = col.sum() / n as f64;
        out[f + c] = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    }
    Ok(out)
}

/// Full relational embedding of one window: attention, binarization, then
/// graph convolutions with pooling between layers; the per-layer readouts
/// (taken from each convolution output) are summed.
pub fn relational_embed(
    attn: &AttentionParams,
    gcn: &GcnStack,
    threshold_t: f64,
    window: &ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let a = attention_scores(attn, window)?;
    relational_from_attention(gcn, &a.view(), threshold_t, window)
}

/// As [`relational_embed`] when the attention matrix is already available.
pub fn relational_from_attention(
    gcn: &GcnStack,
    a: &ArrayView2<f64>,
    threshold_t: f64,
    window: &ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let mut adj = binarize_adjacency(a, threshold_t);
    let mut h = window.to_owned();
    let mut sum: Option<Array1<f64>> = None;
    for (l, theta) in gcn.thetas.iter().enumerate() {
        h = gcn_layer(&h.view(), &adj.view(), &theta.view());
        let r = readout(&h.view())?;
        sum = Some(match sum {
            None => r,
            Some(acc) => acc + &r,
        });
        if l < gcn.scorers.len() {
            let (hk, ak, _) = sag_pool(&h.view(), &adj.view(), gcn.pool_ratio, &gcn.scorers[l].view())?;
            h = hk;
            adj = ak;
        }
    }
    Ok(sum.expect("at least one gcn layer"))
}

/// Writes an M x M attention matrix as csv for inspection.
pub fn write_attention_csv(a: &ArrayView2<f64>, path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for row in a.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ── tape operations ───────────────────────────────────────────────────────

/// Tape version of [`attention_scores`]. `x` is the M x W window constant.
pub fn build_attention(tape: &mut Tape, x: Var, w_pair: Var, p: Var) -> Var {
    let (m, w) = tape.value(x).dim();
    assert_eq!(tape.value(w_pair).nrows(), 2 * w);
    // Split the pair projection into the halves applied to x_i and x_j.
    let top_idx: Vec<usize> = (0..w).collect();
    let bot_idx: Vec<usize> = (w..2 * w).collect();
    let top = tape.rows(w_pair, &top_idx);
    let bot = tape.rows(w_pair, &bot_idx);
    let u = tape.matmul(x, top); // M x d
    let v = tape.matmul(x, bot); // M x d
    let pairs = tape.pairwise_row_sum(u, v); // M^2 x d
    let act = tape.leaky_relu(pairs, ATTENTION_LEAKY_SLOPE);
    let scores = tape.matmul(act, p); // M^2 x 1
    let logits = tape.reshape(scores, m, m);
    tape.softmax_rows(logits)
}

/// Tape version of the symmetric normalization `D^{-1/2}(A+I)D^{-1/2}`.
pub fn build_sym_norm(tape: &mut Tape, adj: Var) -> Var {
    let n = tape.value(adj).nrows();
    let eye = tape.constant(Array2::eye(n));
    let a_tilde = tape.add(adj, eye);
    let deg = tape.sum_axis1(a_tilde); // n x 1, >= 1
    let dinv = tape.powf(deg, -0.5);
    let scaled = tape.mul_col(a_tilde, dinv);
    let dinv_row = tape.transpose(dinv);
    tape.mul_row(scaled, dinv_row)
}

/// Tape version of [`gcn_layer`] given the pre-normalized propagation matrix.
pub fn build_gcn_from_norm(tape: &mut Tape, s: Var, h: Var, theta: Var) -> Var {
    let sh = tape.matmul(s, h);
    let sht = tape.matmul(sh, theta);
    tape.relu(sht)
}

/// Tape readout: mean/max concat over nodes.
pub fn build_readout(tape: &mut Tape, h: Var) -> Var {
    let mean = tape.mean_axis0(h);
    let max = tape.max_axis0(h);
    tape.concat_cols(mean, max)
}

/// Tape version of [`relational_embed`]. With `straight_through` the
/// binarization passes gradients to the kept attention entries; otherwise
/// the binary adjacency is a constant and no gradient reaches the attention
/// parameters through the graph path.
pub fn build_relational(
    tape: &mut Tape,
    x: Var,
    w_pair: Var,
    p: Var,
    thetas: &[Var],
    scorers: &[Var],
    pool_ratio: f64,
    threshold_t: f64,
    straight_through: bool,
) -> (Var, Var) {
    let a = build_attention(tape, x, w_pair, p);
    let mut adj = tape.binarize(a, threshold_t, straight_through);
    let mut h = x;
    let mut sum: Option<Var> = None;
    for (l, &theta) in thetas.iter().enumerate() {
        let s = build_sym_norm(tape, adj);
        h = build_gcn_from_norm(tape, s, h, theta);
        let r = build_readout(tape, h);
        sum = Some(match sum {
            None => r,
            Some(acc) => tape.add(acc, r),
        });
        if l < scorers.len() {
            let z = build_gcn_from_norm(tape, s, h, scorers[l]); // M_l x 1
            let zs: Vec<f64> = tape.value(z).column(0).to_vec();
            let keep = (pool_ratio * zs.len() as f64).floor() as usize;
            let kept = top_k_desc(&zs, keep);
            let zk = tape.rows(z, &kept);
            let gate = tape.tanh_(zk);
            let hk = tape.rows(h, &kept);
            h = tape.mul_col(hk, gate);
            adj = tape.submatrix(adj, &kept);
        }
    }
    (sum.expect("at least one layer"), a)
}

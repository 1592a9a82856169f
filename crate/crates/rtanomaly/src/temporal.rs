//! Temporal embedding: a GRU and a stack of dilated causal convolutions
//! over each window, average-pooled over time, then fused with the
//! relational embedding through a fully connected layer.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Epsilon inside the batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;

/// GRU gate parameters. Inputs are M-dimensional observations, the hidden
/// state has `hidden` dimensions. Update gate `z`, reset gate `r`,
/// candidate `h~`:
///
/// ```text
/// z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
/// r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
/// h~  = tanh(x_t Wh + (r_t . h_{t-1}) Uh + bh)
/// h_t = (1 - z_t) . h_{t-1} + z_t . h~
/// ```
#[derive(Debug, Clone)]
pub struct GruParams {
    pub wz: Array2<f64>,
    pub uz: Array2<f64>,
    pub bz: Array2<f64>,
    pub wr: Array2<f64>,
    pub ur: Array2<f64>,
    pub br: Array2<f64>,
    pub wh: Array2<f64>,
    pub uh: Array2<f64>,
    pub bh: Array2<f64>,
}

impl GruParams {
    pub fn hidden(&self) -> usize {
        self.uz.nrows()
    }
}

/// One dilated-causal-convolution block: convolution, batch normalization,
/// ReLU. The running statistics are used for normalization both in training
/// and at inference (they are constants for the gradient); training updates
/// them from batch data with momentum 0.1.
#[derive(Debug, Clone)]
pub struct DcConvBlock {
    /// (kernel * in_channels) x out_channels, taps ordered oldest first.
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub running_mean: Array2<f64>,
    pub running_var: Array2<f64>,
    pub kernel: usize,
    pub dilation: usize,
}

impl DcConvBlock {
    pub fn in_channels(&self) -> usize {
        self.weight.nrows() / self.kernel
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }
}

/// Receptive field of a block stack: `1 + (kernel-1) * sum(dilations)`.
pub fn receptive_field(kernel: usize, dilations: &[usize]) -> usize {
    1 + (kernel - 1) * dilations.iter().sum::<usize>()
}

/// Final fully connected fusion of relational and temporal embeddings.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

// ── plain operations ──────────────────────────────────────────────────────

/// Runs the GRU over a metric-major window (M x W) and returns all hidden
/// states as hidden x W. The initial state is zero.
pub fn gru_forward(params: &GruParams, window: &ArrayView2<f64>) -> Array2<f64> {
    let (_m, w) = window.dim();
    let hdim = params.hidden();
    let mut states = Array2::zeros((hdim, w));
    let mut h = Array2::zeros((1, hdim));
    for t in 0..w {
        let x = window.column(t).insert_axis(Axis(0)).to_owned(); // 1 x M
        let z = sigmoid(&(x.dot(&params.wz) + h.dot(&params.uz) + &params.bz));
        let r = sigmoid(&(x.dot(&params.wr) + h.dot(&params.ur) + &params.br));
        let rh = &r * &h;
        let cand = (x.dot(&params.wh) + rh.dot(&params.uh) + &params.bh).mapv(f64::tanh);
        h = (1.0 - &z) * &h + &z * &cand;
        states.column_mut(t).assign(&h.row(0));
    }
    states
}

fn sigmoid(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Time-major causal im2col: row `t` holds the taps
/// `x[t - (kernel-1-s)*dilation]` for `s = 0..kernel`, zero-padded on the
/// left, so output `t` never sees the future.
fn causal_im2col(x: &ArrayView2<f64>, kernel: usize, dilation: usize) -> Array2<f64> {
    let (w, c) = x.dim();
    let mut out = Array2::zeros((w, kernel * c));
    for t in 0..w {
        for s in 0..kernel {
            let src = t as isize - ((kernel - 1 - s) * dilation) as isize;
            if src >= 0 {
                for ch in 0..c {
                    out[[t, s * c + ch]] = x[[src as usize, ch]];
                }
            }
        }
    }
    out
}

/// Applies the dilated-causal-convolution stack to a metric-major window
/// (M x W), returning channels x W features. Uses the frozen running
/// statistics for normalization.
pub fn dc_conv_stack(blocks: &[DcConvBlock], window: &ArrayView2<f64>) -> Array2<f64> {
    let mut x = window.t().to_owned(); // time-major W x C
    for b in blocks {
        let cols = causal_im2col(&x.view(), b.kernel, b.dilation);
        let mut y = cols.dot(&b.weight) + &b.bias;
        // batch norm with running stats, then ReLU
        for (c, mut col) in y.columns_mut().into_iter().enumerate() {
            let inv = 1.0 / (b.running_var[[0, c]] + BN_EPS).sqrt();
            let (g, bt, mu) = (b.gamma[[0, c]], b.beta[[0, c]], b.running_mean[[0, c]]);
            col.mapv_inplace(|v| (g * (v - mu) * inv + bt).max(0.0));
        }
        x = y;
    }
    x.t().to_owned()
}

/// Temporal embedding: concatenation of the time-averaged GRU states and
/// the time-averaged convolution features.
pub fn temporal_embed(
    gru: &GruParams,
    blocks: &[DcConvBlock],
    window: &ArrayView2<f64>,
) -> Array1<f64> {
    let states = gru_forward(gru, window);
    let conv = dc_conv_stack(blocks, window);
    let w = window.ncols() as f64;
    let g = states.sum_axis(Axis(1)) / w;
    let c = conv.sum_axis(Axis(1)) / w;
    let mut out = Array1::zeros(g.len() + c.len());
    out.slice_mut(ndarray::s![..g.len()]).assign(&g);
    out.slice_mut(ndarray::s![g.len()..]).assign(&c);
    out
}

/// Fused relational-temporal embedding `e = W (rel ++ temp) + b`.
/// No activation; the VAE encoder follows directly.
pub fn fuse(fusion: &FusionLayer, relational: &Array1<f64>, temporal: &Array1<f64>) -> Result<Array1<f64>> {
    let joined: Vec<f64> = relational.iter().chain(temporal.iter()).copied().collect();
    if joined.len() != fusion.weight.nrows() {
        return Err(Error::config(format!(
            "fusion expects width {}, got {}",
            fusion.weight.nrows(),
            joined.len()
        )));
    }
    let row = Array2::from_shape_vec((1, joined.len()), joined).expect("shape");
    let out = row.dot(&fusion.weight) + &fusion.bias;
    Ok(out.row(0).to_owned())
}

// ── tape operations ───────────────────────────────────────────────────────

pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

/// Tape GRU over the window; returns the time-mean of hidden states (1 x H).
pub fn build_gru_mean(tape: &mut Tape, window: &ArrayView2<f64>, g: &GruVars) -> Var {
    let (_m, w) = window.dim();
    let hdim = tape.value(g.uz).nrows();
    let mut h = tape.constant(Array2::zeros((1, hdim)));
    let mut sum = tape.constant(Array2::zeros((1, hdim)));
    let ones = tape.constant(Array2::ones((1, hdim)));
    for t in 0..w {
        let x = tape.constant(window.column(t).insert_axis(Axis(0)).to_owned());
        let xz = tape.matmul(x, g.wz);
        let hz = tape.matmul(h, g.uz);
        let az = tape.add(xz, hz);
        let az = tape.add_row(az, g.bz);
        let z = tape.sigmoid(az);
        let xr = tape.matmul(x, g.wr);
        let hr = tape.matmul(h, g.ur);
        let ar = tape.add(xr, hr);
        let ar = tape.add_row(ar, g.br);
        let r = tape.sigmoid(ar);
        let rh = tape.mul(r, h);
        let xh = tape.matmul(x, g.wh);
        let rhu = tape.matmul(rh, g.uh);
        let ah = tape.add(xh, rhu);
        let ah = tape.add_row(ah, g.bh);
        let cand = tape.tanh_(ah);
        let keep = tape.sub(ones, z);
        let kh = tape.mul(keep, h);
        let zc = tape.mul(z, cand);
        h = tape.add(kh, zc);
        sum = tape.add(sum, h);
    }
    tape.affine(sum, 1.0 / w as f64, 0.0)
}

pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
    /// Constants: negative running mean and 1/sqrt(var + eps).
    pub neg_mean: Var,
    pub inv_std: Var,
    pub kernel: usize,
    pub dilation: usize,
}

/// Batched tape GRU over the selected windows of an S x M x W batch;
/// returns the per-window time-mean of hidden states (B x H). Batching
/// keeps the recurrence but reads each gate weight once per step for the
/// whole batch.
pub fn build_gru_mean_batched(
    tape: &mut Tape,
    windows: &ndarray::ArrayView3<f64>,
    idx: &[usize],
    g: &GruVars,
) -> Var {
    let b = idx.len();
    let m = windows.len_of(Axis(1));
    let w = windows.len_of(Axis(2));
    let hdim = tape.value(g.uz).nrows();
    let mut h = tape.constant(Array2::zeros((b, hdim)));
    let mut sum = tape.constant(Array2::zeros((b, hdim)));
    let ones = tape.constant(Array2::ones((b, hdim)));
    for t in 0..w {
        let xt = Array2::from_shape_fn((b, m), |(bi, mi)| windows[[idx[bi], mi, t]]);
        let x = tape.constant(xt);
        let xz = tape.matmul(x, g.wz);
        let hz = tape.matmul(h, g.uz);
        let az = tape.add(xz, hz);
        let az = tape.add_row(az, g.bz);
        let z = tape.sigmoid(az);
        let xr = tape.matmul(x, g.wr);
        let hr = tape.matmul(h, g.ur);
        let ar = tape.add(xr, hr);
        let ar = tape.add_row(ar, g.br);
        let r = tape.sigmoid(ar);
        let rh = tape.mul(r, h);
        let xh = tape.matmul(x, g.wh);
        let rhu = tape.matmul(rh, g.uh);
        let ah = tape.add(xh, rhu);
        let ah = tape.add_row(ah, g.bh);
        let cand = tape.tanh_(ah);
        let keep = tape.sub(ones, z);
        let kh = tape.mul(keep, h);
        let zc = tape.mul(z, cand);
        h = tape.add(kh, zc);
        sum = tape.add(sum, h);
    }
    tape.affine(sum, 1.0 / w as f64, 0.0)
}

/// Batched tape convolution stack; returns per-window time-means (B x C).
/// The input is stacked time-major, one W-row segment per window, and the
/// causal taps never cross window boundaries.
pub fn build_conv_mean_batched(
    tape: &mut Tape,
    windows: &ndarray::ArrayView3<f64>,
    idx: &[usize],
    blocks: &[ConvVars],
    mut collect_prebn: Option<&mut Vec<Var>>,
) -> Var {
    let b = idx.len();
    let m = windows.len_of(Axis(1));
    let w = windows.len_of(Axis(2));
    let stacked = Array2::from_shape_fn((b * w, m), |(row, mi)| {
        windows[[idx[row / w], mi, row % w]]
    });
    let mut x = tape.constant(stacked);
    for blk in blocks {
        let cols = tape.causal_im2col(x, blk.kernel, blk.dilation, w);
        let conv = tape.matmul(cols, blk.weight);
        let conv = tape.add_row(conv, blk.bias);
        if let Some(sink) = collect_prebn.as_deref_mut() {
            sink.push(conv);
        }
        let centered = tape.add_row(conv, blk.neg_mean);
        let scaled = tape.mul_row(centered, blk.inv_std);
        let scaled = tape.mul_row(scaled, blk.gamma);
        let shifted = tape.add_row(scaled, blk.beta);
        x = tape.relu(shifted);
    }
    tape.segment_mean_rows(x, w)
}

/// Tape convolution stack over the window; returns the time-mean (1 x C)
/// and, when `collect_prebn` is set, the pre-normalization activations per
/// block (for running-statistic updates).
pub fn build_conv_mean(
    tape: &mut Tape,
    window: &ArrayView2<f64>,
    blocks: &[ConvVars],
    mut collect_prebn: Option<&mut Vec<Var>>,
) -> Var {
    let w = window.ncols();
    let mut x = tape.constant(window.t().to_owned()); // W x C time-major
    for b in blocks {
        let cols = tape.causal_im2col(x, b.kernel, b.dilation, w);
        let conv = tape.matmul(cols, b.weight);
        let conv = tape.add_row(conv, b.bias);
        if let Some(sink) = collect_prebn.as_deref_mut() {
            sink.push(conv);
        }
        let centered = tape.add_row(conv, b.neg_mean);
        let scaled = tape.mul_row(centered, b.inv_std);
        let scaled = tape.mul_row(scaled, b.gamma);
        let shifted = tape.add_row(scaled, b.beta);
        x = tape.relu(shifted);
    }
    let sum = tape.sum_axis0(x);
    tape.affine(sum, 1.0 / w as f64, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-0.8..0.8))
    }

    fn rand_gru(m: usize, h: usize, rng: &mut ChaCha8Rng) -> GruParams {
        GruParams {
            wz: rand_arr(m, h, rng),
            uz: rand_arr(h, h, rng),
            bz: rand_arr(1, h, rng),
            wr: rand_arr(m, h, rng),
            ur: rand_arr(h, h, rng),
            br: rand_arr(1, h, rng),
            wh: rand_arr(m, h, rng),
            uh: rand_arr(h, h, rng),
            bh: rand_arr(1, h, rng),
        }
    }

    fn zero_gru(m: usize, h: usize) -> GruParams {
        GruParams {
            wz: Array2::zeros((m, h)),
            uz: Array2::zeros((h, h)),
            bz: Array2::zeros((1, h)),
            wr: Array2::zeros((m, h)),
            ur: Array2::zeros((h, h)),
            br: Array2::zeros((1, h)),
            wh: Array2::zeros((m, h)),
            uh: Array2::zeros((h, h)),
            bh: Array2::zeros((1, h)),
        }
    }

    fn identity_block(c: usize, kernel: usize, dilation: usize) -> DcConvBlock {
        // selects the current tap with unit weight; normalization is a
        // near no-op (zero mean, unit variance, gamma compensating eps)
        let mut weight = Array2::zeros((kernel * c, c));
        for ch in 0..c {
            weight[[(kernel - 1) * c + ch, ch]] = 1.0;
        }
        DcConvBlock {
            weight,
            bias: Array2::zeros((1, c)),
            gamma: Array2::from_elem((1, c), (1.0 + BN_EPS).sqrt()),
            beta: Array2::zeros((1, c)),
            running_mean: Array2::zeros((1, c)),
            running_var: Array2::ones((1, c)),
            kernel,
            dilation,
        }
    }

    fn rand_block(cin: usize, cout: usize, kernel: usize, dilation: usize, rng: &mut ChaCha8Rng) -> DcConvBlock {
        DcConvBlock {
            weight: rand_arr(kernel * cin, cout, rng),
            bias: rand_arr(1, cout, rng),
            gamma: Array2::from_shape_fn((1, cout), |_| rng.gen_range(0.5..1.5)),
            beta: rand_arr(1, cout, rng),
            running_mean: rand_arr(1, cout, rng),
            running_var: Array2::from_shape_fn((1, cout), |_| rng.gen_range(0.2..2.0)),
            kernel,
            dilation,
        }
    }

    #[test]
    fn gru_all_zero_weights_stay_zero() {
        let gru = zero_gru(3, 4);
        let window = Array2::from_elem((3, 6), 1.7);
        let states = gru_forward(&gru, &window.view());
        assert!(states.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_single_step_equals_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = rand_gru(2, 3, &mut rng);
        let window = rand_arr(2, 1, &mut rng);
        let states = gru_forward(&gru, &window.view());
        // manual single cell with h0 = 0
        let x = window.column(0).insert_axis(Axis(0)).to_owned();
        let z = sigmoid(&(x.dot(&gru.wz) + &gru.bz));
        let cand = (x.dot(&gru.wh) + &gru.bh).mapv(f64::tanh);
        let h = &z * &cand; // (1 - z) * 0 + z * cand
        for i in 0..3 {
            assert!((states[[i, 0]] - h[[0, i]]).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_identity_construction() {
        let block = identity_block(2, 2, 1);
        // non-negative input so the final ReLU is inert
        let window = array![[0.1, 0.7, 0.3, 0.9], [0.5, 0.2, 0.8, 0.4]];
        let out = dc_conv_stack(&[block], &window.view());
        let diff = (&out - &window).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-4, "identity construction off by {diff}");
    }

    #[test]
    fn conv_causality_under_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blocks = vec![
            rand_block(3, 5, 3, 1, &mut rng),
            rand_block(5, 5, 3, 2, &mut rng),
        ];
        let window = rand_arr(3, 20, &mut rng);
        let base = dc_conv_stack(&blocks, &window.view());
        let t_perturb = 11;
        let mut poked = window.clone();
        poked[[1, t_perturb]] += 0.5;
        let out = dc_conv_stack(&blocks, &poked.view());
        for t in 0..t_perturb {
            for c in 0..5 {
                assert_eq!(base[[c, t]], out[[c, t]], "future leaked into t={t}");
            }
        }
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(receptive_field(3, &[1, 2, 4]), 15);
        assert_eq!(receptive_field(2, &[1]), 2);
    }

    #[test]
    fn temporal_embed_width_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, w) in [(2usize, 9usize), (5, 14)] {
            let gru = rand_gru(m, 4, &mut rng);
            let blocks = vec![rand_block(m, 6, 3, 1, &mut rng)];
            let window = rand_arr(m, w, &mut rng);
            let emb = temporal_embed(&gru, &blocks, &window.view());
            assert_eq!(emb.len(), 4 + 6);
            // pooling equals the explicit sum / W
            let states = gru_forward(&gru, &window.view());
            let mut manual = 0.0;
            for t in 0..w {
                manual += states[[2, t]];
            }
            manual /= w as f64;
            assert!((emb[2] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_identity_zero_and_linearity() {
        let rel = Array1::from_vec(vec![1.0, -2.0]);
        let tem = Array1::from_vec(vec![0.5, 3.0]);
        let ident = FusionLayer { weight: Array2::eye(4), bias: Array2::zeros((1, 4)) };
        let e = fuse(&ident, &rel, &tem).unwrap();
        assert_eq!(e.to_vec(), vec![1.0, -2.0, 0.5, 3.0]);

        let zero = FusionLayer { weight: Array2::zeros((4, 3)), bias: array![[7.0, 8.0, 9.0]] };
        assert_eq!(fuse(&zero, &rel, &tem).unwrap().to_vec(), vec![7.0, 8.0, 9.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = FusionLayer { weight: rand_arr(4, 3, &mut rng), bias: Array2::zeros((1, 3)) };
        let a = fuse(&lin, &rel, &tem).unwrap();
        let b = fuse(&lin, &(2.0 * &rel), &(2.0 * &tem)).unwrap();
        for i in 0..3 {
            assert!((2.0 * a[i] - b[i]).abs() < 1e-12);
        }

        let wrong = FusionLayer { weight: Array2::zeros((5, 3)), bias: Array2::zeros((1, 3)) };
        assert!(fuse(&wrong, &rel, &tem).is_err());
    }

    #[test]
    fn tape_gru_and_conv_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, w, h) = (3, 12, 4);
        let gru = rand_gru(m, h, &mut rng);
        let blocks = vec![
            rand_block(m, 5, 3, 1, &mut rng),
            rand_block(5, 5, 3, 2, &mut rng),
        ];
        let window = rand_arr(m, w, &mut rng);

        let mut tape = Tape::new();
        let leaf = |tape: &mut Tape, a: &Array2<f64>| tape.leaf(std::sync::Arc::new(a.clone()));
        let gv = GruVars {
            wz: leaf(&mut tape, &gru.wz),
            uz: leaf(&mut tape, &gru.uz),
            bz: leaf(&mut tape, &gru.bz),
            wr: leaf(&mut tape, &gru.wr),
            ur: leaf(&mut tape, &gru.ur),
            br: leaf(&mut tape, &gru.br),
            wh: leaf(&mut tape, &gru.wh),
            uh: leaf(&mut tape, &gru.uh),
            bh: leaf(&mut tape, &gru.bh),
        };
        let gmean = build_gru_mean(&mut tape, &window.view(), &gv);
        let states = gru_forward(&gru, &window.view());
        for i in 0..h {
            let manual = states.row(i).sum() / w as f64;
            assert!((tape.value(gmean)[[0, i]] - manual).abs() < 1e-12);
        }

        let cvars: Vec<ConvVars> = blocks
            .iter()
            .map(|b| ConvVars {
                weight: leaf(&mut tape, &b.weight),
                bias: leaf(&mut tape, &b.bias),
                gamma: leaf(&mut tape, &b.gamma),
                beta: leaf(&mut tape, &b.beta),
                neg_mean: tape.constant(b.running_mean.mapv(|v| -v)),
                inv_std: tape.constant(b.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt())),
                kernel: b.kernel,
                dilation: b.dilation,
            })
            .collect();
        let cmean = build_conv_mean(&mut tape, &window.view(), &cvars, None);
        let conv = dc_conv_stack(&blocks, &window.view());
        for c in 0..5 {
            let manual = conv.row(c).sum() / w as f64;
            assert!((tape.value(cmean)[[0, c]] - manual).abs() < 1e-12);
        }
    }
}

//! Label-conditional VAE over the fused embedding.
//!
//! Both encoder and decoder consume a one-hot window label. Training
//! maximizes the per-window objective
//! `J(y) = sgn(0.5 - y) * (-KL + log-lik - lambda * recon)`,
//! so normal windows fit the ELBO and shrink reconstruction error while
//! anomalous windows are pushed away. The normal-conditioned reconstruction
//! error is the anomaly score.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

/// Bound on encoder/decoder log-variances; keeps variances in a sane range
/// without breaking the exponential parameterization.
pub const LOGVAR_CLAMP: f64 = 8.0;

/// Magnitude clip of the reversed (anomalous) per-window training loss.
pub const ANOMALOUS_LOSS_CLIP: f64 = 5.0;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Encoder and decoder parameters. Two affine layers with a ReLU between;
/// the label is one-hot encoded (length 2) and concatenated to the input of
/// each half.
#[derive(Debug, Clone)]
pub struct LcvaeParams {
    pub enc_w1: Array2<f64>,
    pub enc_b1: Array2<f64>,
    pub enc_wmu: Array2<f64>,
    pub enc_bmu: Array2<f64>,
    pub enc_wlv: Array2<f64>,
    pub enc_blv: Array2<f64>,
    pub dec_w1: Array2<f64>,
    pub dec_b1: Array2<f64>,
    pub dec_wmu: Array2<f64>,
    pub dec_bmu: Array2<f64>,
    pub dec_wlv: Array2<f64>,
    pub dec_blv: Array2<f64>,
}

impl LcvaeParams {
    pub fn latent(&self) -> usize {
        self.enc_wmu.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.enc_w1.nrows() - 2
    }
}

/// Loss components for one window. `signed_total` carries the label sign:
/// `sgn(0.5 - y) * (-kl + log_lik - lambda * recon)`.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub kl: f64,
    pub log_lik: f64,
    pub recon: f64,
    pub signed_total: f64,
    pub lambda: f64,
}

fn one_hot(y: u8) -> [f64; 2] {
    if y == 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn concat_label(x: &Array1<f64>, y: u8) -> Array2<f64> {
    let oh = one_hot(y);
    let mut row = Array2::zeros((1, x.len() + 2));
    for (i, v) in x.iter().enumerate() {
        row[[0, i]] = *v;
    }
    row[[0, x.len()]] = oh[0];
    row[[0, x.len() + 1]] = oh[1];
    row
}

// ── plain operations ──────────────────────────────────────────────────────

/// Encodes `(e, y)` into the posterior mean and standard deviation.
pub fn encode(params: &LcvaeParams, e: &Array1<f64>, y: u8) -> (Array1<f64>, Array1<f64>) {
    let input = concat_label(e, y);
    let hidden = affine(&input, &params.enc_w1, &params.enc_b1).mapv(|v| v.max(0.0));
    let mu = affine(&hidden, &params.enc_wmu, &params.enc_bmu);
    let lv = affine(&hidden, &params.enc_wlv, &params.enc_blv)
        .mapv(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
    (mu.row(0).to_owned(), lv.mapv(|v| (0.5 * v).exp()).row(0).to_owned())
}

/// `z = mu + sigma * eps`.
pub fn reparameterize(mu: &Array1<f64>, sigma: &Array1<f64>, eps: &Array1<f64>) -> Array1<f64> {
    mu + &(sigma * eps)
}

/// Decodes `(z, y)` into the reconstruction mean and standard deviation.
pub fn decode(params: &LcvaeParams, z: &Array1<f64>, y: u8) -> (Array1<f64>, Array1<f64>) {
    let input = concat_label(z, y);
    let hidden = affine(&input, &params.dec_w1, &params.dec_b1).mapv(|v| v.max(0.0));
    let mu = affine(&hidden, &params.dec_wmu, &params.dec_bmu);
    let lv = affine(&hidden, &params.dec_wlv, &params.dec_blv)
        .mapv(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
    (mu.row(0).to_owned(), lv.mapv(|v| (0.5 * v).exp()).row(0).to_owned())
}

/// Full loss for one window. `log_lik` is averaged over the given eps
/// draws; `recon` uses the deterministic `eps = 0` path.
pub fn lcvae_loss(
    params: &LcvaeParams,
    e: &Array1<f64>,
    y: u8,
    eps_draws: &[Array1<f64>],
    lambda: f64,
) -> Result<LossBreakdown> {
    if eps_draws.is_empty() {
        return Err(Error::data("lcvae_loss needs at least one eps draw"));
    }
    let (mu, sigma) = encode(params, e, y);
    // closed-form KL( N(mu, sigma^2) || N(0, I) )
    let kl = 0.5
        * mu.iter()
            .zip(sigma.iter())
            .map(|(m, s)| {
                let var = s * s;
                m * m + var - 1.0 - var.ln()
            })
            .sum::<f64>();

    let mut log_lik = 0.0;
    for eps in eps_draws {
        let z = reparameterize(&mu, &sigma, eps);
        let (dmu, dsg) = decode(params, &z, y);
        log_lik += e
            .iter()
            .zip(dmu.iter())
            .zip(dsg.iter())
            .map(|((ev, mv), sv)| {
                let var = sv * sv;
                -0.5 * LN_2PI - var.ln() * 0.5 - (ev - mv) * (ev - mv) / (2.0 * var)
            })
            .sum::<f64>();
    }
    log_lik /= eps_draws.len() as f64;

    let (e_hat, _) = decode(params, &mu, y);
    let recon = e
        .iter()
        .zip(e_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    let sign = if y == 0 { 1.0 } else { -1.0 };
    let signed_total = sign * (-kl + log_lik - lambda * recon);
    Ok(LossBreakdown { kl, log_lik, recon, signed_total, lambda })
}

/// Normal-conditioned reconstruction error of an embedding: the raw
/// anomaly score before normalization.
pub fn raw_score(params: &LcvaeParams, e: &Array1<f64>) -> f64 {
    let (mu, _) = encode(params, e, 0);
    let (e_hat, _) = decode(params, &mu, 0);
    e.iter()
        .zip(e_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Normalized anomaly score in [0, 1] using training-set min/max of raw
/// scores.
pub fn anomaly_score(params: &LcvaeParams, e: &Array1<f64>, normalizer: (f64, f64)) -> f64 {
    let (lo, hi) = normalizer;
    let denom = if hi > lo { hi - lo } else { 1.0 };
    ((raw_score(params, e) - lo) / denom).clamp(0.0, 1.0)
}

// ── tape operations ───────────────────────────────────────────────────────

pub struct VaeVars {
    pub enc_w1: Var,
    pub enc_b1: Var,
    pub enc_wmu: Var,
    pub enc_bmu: Var,
    pub enc_wlv: Var,
    pub enc_blv: Var,
    pub dec_w1: Var,
    pub dec_b1: Var,
    pub dec_wmu: Var,
    pub dec_bmu: Var,
    pub dec_wlv: Var,
    pub dec_blv: Var,
}

pub struct LossVars {
    pub kl: Var,
    pub log_lik: Var,
    pub recon: Var,
    pub signed_total: Var,
    /// Minimization target: `-signed_total`, magnitude-clipped for y = 1.
    pub train_loss: Var,
}

fn build_head(
    tape: &mut Tape,
    input: Var,
    w1: Var,
    b1: Var,
    wmu: Var,
    bmu: Var,
    wlv: Var,
    blv: Var,
) -> (Var, Var) {
    let a1 = tape.matmul(input, w1);
    let a1 = tape.add_row(a1, b1);
    let h = tape.relu(a1);
    let mu = tape.matmul(h, wmu);
    let mu = tape.add_row(mu, bmu);
    let lv = tape.matmul(h, wlv);
    let lv = tape.add_row(lv, blv);
    let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    (mu, lv)
}

/// Builds the per-window loss on the tape. `e` is the 1 x E embedding var.
pub fn build_loss(
    tape: &mut Tape,
    vae: &VaeVars,
    e: Var,
    y: u8,
    eps_draws: &[Array1<f64>],
    lambda: f64,
) -> LossVars {
    assert!(!eps_draws.is_empty(), "at least one eps draw");
    let e_dim = tape.value(e).ncols();
    let oh = one_hot(y);
    let label = tape.constant(Array2::from_shape_vec((1, 2), oh.to_vec()).unwrap());

    let enc_in = tape.concat_cols(e, label);
    let (mu, lv) = build_head(
        tape, enc_in, vae.enc_w1, vae.enc_b1, vae.enc_wmu, vae.enc_bmu, vae.enc_wlv, vae.enc_blv,
    );

    // KL = 0.5 sum(mu^2 + exp(lv) - 1 - lv)
    let mu2 = tape.mul(mu, mu);
    let var = tape.exp_(lv);
    let t1 = tape.add(mu2, var);
    let t2 = tape.sub(t1, lv);
    let t3 = tape.affine(t2, 1.0, -1.0);
    let klsum = tape.sum_all(t3);
    let kl = tape.affine(klsum, 0.5, 0.0);

    // log-likelihood averaged over draws
    let half_lv = tape.affine(lv, 0.5, 0.0);
    let sigma = tape.exp_(half_lv);
    let mut loglik_sum: Option<Var> = None;
    for eps in eps_draws {
        let eps_c = tape.constant(Array2::from_shape_vec((1, eps.len()), eps.to_vec()).unwrap());
        let noise = tape.mul(sigma, eps_c);
        let z = tape.add(mu, noise);
        let dec_in = tape.concat_cols(z, label);
        let (dmu, dlv) = build_head(
            tape, dec_in, vae.dec_w1, vae.dec_b1, vae.dec_wmu, vae.dec_bmu, vae.dec_wlv,
            vae.dec_blv,
        );
        let diff = tape.sub(e, dmu);
        let d2 = tape.mul(diff, diff);
        let neg_lv = tape.affine(dlv, -1.0, 0.0);
        let inv_var = tape.exp_(neg_lv);
        let quad = tape.mul(d2, inv_var);
        let inner = tape.add(dlv, quad);
        let s = tape.sum_all(inner);
        let ll = tape.affine(s, -0.5, -0.5 * LN_2PI * e_dim as f64);
        loglik_sum = Some(match loglik_sum {
            None => ll,
            Some(acc) => tape.add(acc, ll),
        });
    }
    let log_lik = {
        let s = loglik_sum.unwrap();
        tape.affine(s, 1.0 / eps_draws.len() as f64, 0.0)
    };

    // reconstruction at eps = 0
    let dec0_in = tape.concat_cols(mu, label);
    let (dmu0, _) = build_head(
        tape, dec0_in, vae.dec_w1, vae.dec_b1, vae.dec_wmu, vae.dec_bmu, vae.dec_wlv, vae.dec_blv,
    );
    let diff0 = tape.sub(e, dmu0);
    let d02 = tape.mul(diff0, diff0);
    let ss = tape.sum_all(d02);
    let recon = tape.sqrt_(ss);

    // signed total and training loss
    let neg_kl = tape.affine(kl, -1.0, 0.0);
    let elbo = tape.add(neg_kl, log_lik);
    let pen = tape.affine(recon, -lambda, 0.0);
    let j = tape.add(elbo, pen);
    let sign = if y == 0 { 1.0 } else { -1.0 };
    let signed_total = tape.affine(j, sign, 0.0);
    let neg = tape.affine(signed_total, -1.0, 0.0);
    let train_loss = if y == 1 {
        tape.clamp(neg, -ANOMALOUS_LOSS_CLIP, ANOMALOUS_LOSS_CLIP)
    } else {
        neg
    };

    LossVars { kl, log_lik, recon, signed_total, train_loss }
}

/// Batched per-window loss columns (B x 1 each) plus their sum.
pub struct BatchLossVars {
    pub kl: Var,
    pub log_lik: Var,
    pub recon: Var,
    pub signed_total: Var,
    /// Per-window minimization targets (sign applied, anomalous rows
    /// magnitude-clipped); shape B x 1.
    pub train_loss: Var,
    /// Sum of the per-window training losses (1 x 1).
    pub total: Var,
}

/// Batched tape loss: `e` is B x E, `eps` one draw per window (B x latent).
/// Equivalent to [`build_loss`] row by row.
pub fn build_loss_batched(
    tape: &mut Tape,
    vae: &VaeVars,
    e: Var,
    ys: &[u8],
    eps: &Array2<f64>,
    lambda: f64,
) -> BatchLossVars {
    let (b, e_dim) = tape.value(e).dim();
    assert_eq!(ys.len(), b);
    assert_eq!(eps.nrows(), b);
    let label = tape.constant(Array2::from_shape_fn((b, 2), |(r, c)| {
        let oh = one_hot(ys[r]);
        oh[c]
    }));

    let enc_in = tape.concat_cols(e, label);
    let (mu, lv) = build_head(
        tape, enc_in, vae.enc_w1, vae.enc_b1, vae.enc_wmu, vae.enc_bmu, vae.enc_wlv, vae.enc_blv,
    );

    let mu2 = tape.mul(mu, mu);
    let var = tape.exp_(lv);
    let t1 = tape.add(mu2, var);
    let t2 = tape.sub(t1, lv);
    let t3 = tape.affine(t2, 1.0, -1.0);
    let klsum = tape.sum_axis1(t3);
    let kl = tape.affine(klsum, 0.5, 0.0);

    let half_lv = tape.affine(lv, 0.5, 0.0);
    let sigma = tape.exp_(half_lv);
    let eps_c = tape.constant(eps.clone());
    let noise = tape.mul(sigma, eps_c);
    let z = tape.add(mu, noise);
    let dec_in = tape.concat_cols(z, label);
    let (dmu, dlv) = build_head(
        tape, dec_in, vae.dec_w1, vae.dec_b1, vae.dec_wmu, vae.dec_bmu, vae.dec_wlv, vae.dec_blv,
    );
    let diff = tape.sub(e, dmu);
    let d2 = tape.mul(diff, diff);
    let neg_lv = tape.affine(dlv, -1.0, 0.0);
    let inv_var = tape.exp_(neg_lv);
    let quad = tape.mul(d2, inv_var);
    let inner = tape.add(dlv, quad);
    let s = tape.sum_axis1(inner);
    let log_lik = tape.affine(s, -0.5, -0.5 * LN_2PI * e_dim as f64);

    let dec0_in = tape.concat_cols(mu, label);
    let (dmu0, _) = build_head(
        tape, dec0_in, vae.dec_w1, vae.dec_b1, vae.dec_wmu, vae.dec_bmu, vae.dec_wlv, vae.dec_blv,
    );
    let diff0 = tape.sub(e, dmu0);
    let d02 = tape.mul(diff0, diff0);
    let ss = tape.sum_axis1(d02);
    let recon = tape.sqrt_(ss);

    let neg_kl = tape.affine(kl, -1.0, 0.0);
    let elbo = tape.add(neg_kl, log_lik);
    let pen = tape.affine(recon, -lambda, 0.0);
    let j = tape.add(elbo, pen);
    let sign = tape.constant(Array2::from_shape_fn((b, 1), |(r, _)| {
        if ys[r] == 0 {
            1.0
        } else {
            -1.0
        }
    }));
    let signed_total = tape.mul(j, sign);
    let neg = tape.affine(signed_total, -1.0, 0.0);
    // anomalous rows are magnitude-clipped, normal rows pass through
    let clamped = tape.clamp(neg, -ANOMALOUS_LOSS_CLIP, ANOMALOUS_LOSS_CLIP);
    let mask1 = tape.constant(Array2::from_shape_fn((b, 1), |(r, _)| f64::from(ys[r] == 1)));
    let mask0 = tape.constant(Array2::from_shape_fn((b, 1), |(r, _)| f64::from(ys[r] == 0)));
    let keep = tape.mul(neg, mask0);
    let clip = tape.mul(clamped, mask1);
    let train_loss = tape.add(keep, clip);
    let total = tape.sum_all(train_loss);

    BatchLossVars { kl, log_lik, recon, signed_total, train_loss, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-0.7..0.7))
    }

    pub(super) fn rand_params(e: usize, hidden: usize, latent: usize, rng: &mut ChaCha8Rng) -> LcvaeParams {
        LcvaeParams {
            enc_w1: rand_arr(e + 2, hidden, rng),
            enc_b1: rand_arr(1, hidden, rng),
            enc_wmu: rand_arr(hidden, latent, rng),
            enc_bmu: rand_arr(1, latent, rng),
            enc_wlv: rand_arr(hidden, latent, rng),
            enc_blv: rand_arr(1, latent, rng),
            dec_w1: rand_arr(latent + 2, hidden, rng),
            dec_b1: rand_arr(1, hidden, rng),
            dec_wmu: rand_arr(hidden, e, rng),
            dec_bmu: rand_arr(1, e, rng),
            dec_wlv: rand_arr(hidden, e, rng),
            dec_blv: rand_arr(1, e, rng),
        }
    }

    fn zero_params(e: usize, hidden: usize, latent: usize) -> LcvaeParams {
        LcvaeParams {
            enc_w1: Array2::zeros((e + 2, hidden)),
            enc_b1: Array2::zeros((1, hidden)),
            enc_wmu: Array2::zeros((hidden, latent)),
            enc_bmu: Array2::zeros((1, latent)),
            enc_wlv: Array2::zeros((hidden, latent)),
            enc_blv: Array2::zeros((1, latent)),
            dec_w1: Array2::zeros((latent + 2, hidden)),
            dec_b1: Array2::zeros((1, hidden)),
            dec_wmu: Array2::zeros((hidden, e)),
            dec_bmu: Array2::zeros((1, e)),
            dec_wlv: Array2::zeros((hidden, e)),
            dec_blv: Array2::zeros((1, e)),
        }
    }

    #[test]
    fn encode_zero_weights() {
        let p = zero_params(4, 6, 10);
        let e = Array1::from_vec(vec![0.3, -0.2, 0.8, 0.0]);
        let (mu, sigma) = encode(&p, &e, 0);
        assert_eq!(mu.len(), 10);
        assert_eq!(sigma.len(), 10);
        assert!(mu.iter().all(|&v| v == 0.0));
        assert!(sigma.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn label_is_consumed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_params(4, 6, 3, &mut rng);
        let e = Array1::from_vec(vec![0.3, -0.2, 0.8, 0.1]);
        let (mu0, _) = encode(&p, &e, 0);
        let (mu1, _) = encode(&p, &e, 1);
        assert!(mu0.iter().zip(mu1.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
        let z = Array1::from_vec(vec![0.5, -0.5, 0.2]);
        let (d0, _) = decode(&p, &z, 0);
        let (d1, _) = decode(&p, &z, 1);
        assert_eq!(d0.len(), 4);
        assert!(d0.iter().zip(d1.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn reparameterize_examples() {
        let mu = Array1::from_vec(vec![0.0, 2.0]);
        let sigma = Array1::from_vec(vec![1.0, 3.0]);
        let z = reparameterize(&mu, &sigma, &Array1::zeros(2));
        assert_eq!(z.to_vec(), vec![0.0, 2.0]);
        let z = reparameterize(&Array1::zeros(1), &Array1::ones(1), &Array1::from_vec(vec![0.3]));
        assert!((z[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn decode_zero_weights_gives_bias() {
        let mut p = zero_params(3, 5, 2);
        p.dec_bmu = ndarray::array![[1.0, 2.0, 3.0]];
        let (mu, sigma) = decode(&p, &Array1::zeros(2), 0);
        assert_eq!(mu.to_vec(), vec![1.0, 2.0, 3.0]);
        assert!(sigma.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kl_zero_for_standard_posterior() {
        let p = zero_params(3, 5, 4);
        let e = Array1::zeros(3);
        let draws = vec![Array1::zeros(4)];
        let lb = lcvae_loss(&p, &e, 0, &draws, 0.5).unwrap();
        assert!(lb.kl.abs() < 1e-15);
        assert!(lb.recon.abs() < 1e-15);
    }

    #[test]
    fn sign_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_params(4, 6, 3, &mut rng);
        let e = Array1::from_vec(vec![0.4, -0.1, 0.6, 0.2]);
        let draws = vec![Array1::from_vec(vec![0.3, -0.8, 0.5])];
        let l0 = lcvae_loss(&p, &e, 0, &draws, 0.5).unwrap();
        // identical network outputs only hold when the label input is not
        // consumed; zero out the label rows so y changes nothing upstream
        let mut p_nolabel = p.clone();
        for r in [4, 5] {
            p_nolabel.enc_w1.row_mut(r).fill(0.0);
        }
        for r in [3, 4] {
            p_nolabel.dec_w1.row_mut(r).fill(0.0);
        }
        let a = lcvae_loss(&p_nolabel, &e, 0, &draws, 0.5).unwrap();
        let b = lcvae_loss(&p_nolabel, &e, 1, &draws, 0.5).unwrap();
        assert!((a.signed_total + b.signed_total).abs() < 1e-12);
        assert!(l0.kl >= 0.0 && a.kl >= 0.0);
    }

    #[test]
    fn no_draws_is_error() {
        let p = zero_params(3, 5, 4);
        assert!(lcvae_loss(&p, &Array1::zeros(3), 0, &[], 0.5).is_err());
    }

    #[test]
    fn anomaly_score_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = rand_params(4, 6, 3, &mut rng);
        let e = Array1::from_vec(vec![0.4, -0.1, 0.6, 0.2]);
        let raw = raw_score(&p, &e);
        // raw at the training max maps to 1
        assert!((anomaly_score(&p, &e, (0.0, raw)) - 1.0).abs() < 1e-12);
        // above the max clips to 1
        assert!((anomaly_score(&p, &e, (0.0, raw / 2.0)) - 1.0).abs() < 1e-12);
        // perfect reconstruction maps to 0
        let p0 = zero_params(3, 5, 2);
        let s = anomaly_score(&p0, &Array1::zeros(3), (0.0, 1.0));
        assert_eq!(s, 0.0);
    }

    #[test]
    fn tape_loss_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_params(4, 6, 3, &mut rng);
        let e = Array1::from_vec(vec![0.4, -0.1, 0.6, 0.2]);
        let draws = vec![
            Array1::from_vec(vec![0.3, -0.8, 0.5]),
            Array1::from_vec(vec![-0.2, 0.1, 0.9]),
        ];
        for y in [0u8, 1u8] {
            let plain = lcvae_loss(&p, &e, y, &draws, 0.5).unwrap();
            let mut tape = Tape::new();
            let leaf = |t: &mut Tape, a: &Array2<f64>| t.leaf(std::sync::Arc::new(a.clone()));
            let vv = VaeVars {
                enc_w1: leaf(&mut tape, &p.enc_w1),
                enc_b1: leaf(&mut tape, &p.enc_b1),
                enc_wmu: leaf(&mut tape, &p.enc_wmu),
                enc_bmu: leaf(&mut tape, &p.enc_bmu),
                enc_wlv: leaf(&mut tape, &p.enc_wlv),
                enc_blv: leaf(&mut tape, &p.enc_blv),
                dec_w1: leaf(&mut tape, &p.dec_w1),
                dec_b1: leaf(&mut tape, &p.dec_b1),
                dec_wmu: leaf(&mut tape, &p.dec_wmu),
                dec_bmu: leaf(&mut tape, &p.dec_bmu),
                dec_wlv: leaf(&mut tape, &p.dec_wlv),
                dec_blv: leaf(&mut tape, &p.dec_blv),
            };
            let ev = tape.constant(Array2::from_shape_vec((1, 4), e.to_vec()).unwrap());
            let lv = build_loss(&mut tape, &vv, ev, y, &draws, 0.5);
            assert!((tape.value(lv.kl)[[0, 0]] - plain.kl).abs() < 1e-12);
            assert!((tape.value(lv.log_lik)[[0, 0]] - plain.log_lik).abs() < 1e-12);
            assert!((tape.value(lv.recon)[[0, 0]] - plain.recon).abs() < 1e-12);
            assert!((tape.value(lv.signed_total)[[0, 0]] - plain.signed_total).abs() < 1e-12);
        }
    }
}

//! Training objectives: masked reconstruction, AWGN positive pairs, the
//! in-batch InfoNCE term, and their weighted combination.
//!
//! The InfoNCE denominator sums over the *other anchors* only — the positive
//! term is not part of it — so the loss can go negative; the temperature
//! default is 0.1 and the combination weight default 0.9 on reconstruction.

use num_complex::Complex64;
use rand::Rng;

use crate::complexmat::ComplexMatrix;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::patchpipe::{patch_tokens, MaskPattern, PatchConfig};

/// Loss weights and the positive-pair SNR window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Reconstruction weight in the combined objective.
    pub alpha: f64,
    pub temperature: f64,
    /// Positive-pair SNR range in dB, inclusive.
    pub snr_range: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.9, temperature: 0.1, snr_range: (20.0, 30.0) }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.snr_range.0 > self.snr_range.1 {
            return Err(Error::config("snr range must be ordered low..high"));
        }
        Ok(())
    }
}

fn masked_denominator(mask: &MaskPattern, d_p: usize) -> Result<f64> {
    let n_masked = mask.n_masked();
    if n_masked == 0 {
        return Err(Error::contract("reconstruction loss needs at least one masked patch".to_string()));
    }
    Ok((2 * d_p * n_masked) as f64)
}

/// Mean squared error over masked real-valued entries; visible entries
/// contribute exactly zero.
pub fn recon_loss(
    h_true: &ComplexMatrix,
    h_pred: &ComplexMatrix,
    mask: &MaskPattern,
    pc: &PatchConfig,
) -> Result<f64> {
    if h_true.rows() != h_pred.rows() || h_true.cols() != h_pred.cols() {
        return Err(Error::Shape {
            op: "recon_loss",
            left: vec![h_true.rows(), h_true.cols()],
            right: vec![h_pred.rows(), h_pred.cols()],
        });
    }
    let t_true = patch_tokens(h_true, pc)?;
    let t_pred = patch_tokens(h_pred, pc)?;
    recon_loss_tokens(&t_true, &t_pred, mask, pc.patch_dim())
}

/// Same objective over already-patched token matrices (2K, d_p).
pub fn recon_loss_tokens(
    t_true: &Tensor,
    t_pred: &Tensor,
    mask: &MaskPattern,
    d_p: usize,
) -> Result<f64> {
    t_true.same_shape(t_pred, "recon_loss")?;
    let denom = masked_denominator(mask, d_p)?;
    let weights = mask.masked_row_weights(d_p);
    let mut sum = 0.0;
    for ((a, b), w) in t_true.data().iter().zip(t_pred.data()).zip(weights.data()) {
        let d = a - b;
        sum += w * d * d;
    }
    Ok(sum / denom)
}

/// Graph version: records the masked mean-squared error of `p_pred` against
/// the constant target so gradients flow to the prediction only. Visible
/// rows are multiplied by an exact zero, so their gradient is exactly zero.
pub fn recon_loss_node(
    tape: &mut Tape,
    p_pred: NodeId,
    p_target: &Tensor,
    mask: &MaskPattern,
    d_p: usize,
) -> Result<NodeId> {
    let denom = masked_denominator(mask, d_p)?;
    tape.value(p_pred).same_shape(p_target, "recon_loss")?;
    let target = tape.leaf(p_target.clone());
    let weights = tape.leaf(mask.masked_row_weights(d_p));
    let diff = tape.sub(p_pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, weights)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale(total, 1.0 / denom))
}

/// Adds circular complex AWGN at an SNR drawn uniformly from `snr_range`.
/// Returns the noisy copy and the per-element noise variance.
pub fn make_positive<R: Rng>(
    h: &ComplexMatrix,
    snr_range: (f64, f64),
    rng: &mut R,
) -> Result<(ComplexMatrix, f64)> {
    let power = h.frob_norm_sq() / (h.rows() * h.cols()) as f64;
    if power == 0.0 {
        return Err(Error::contract("cannot build a positive pair for a zero channel".to_string()));
    }
    let snr_db = if snr_range.0 == snr_range.1 {
        snr_range.0
    } else {
        rng.gen_range(snr_range.0..snr_range.1)
    };
    let sigma_sq = power / 10f64.powf(snr_db / 10.0);
    let per_dim = (sigma_sq / 2.0).sqrt();
    let mut out = h.clone();
    for v in out.data_mut() {
        let re: f64 = rng.sample(rand_distr::StandardNormal);
        let im: f64 = rng.sample(rand_distr::StandardNormal);
        *v += Complex64::new(per_dim * re, per_dim * im);
    }
    Ok((out, sigma_sq))
}

fn check_unit_rows(m: &Tensor, what: &str) -> Result<()> {
    let d = m.cols();
    for r in 0..m.rows() {
        let norm_sq: f64 = m.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum();
        if (norm_sq.sqrt() - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "{what} row {r} has norm {}, expected 1",
                norm_sq.sqrt()
            )));
        }
    }
    Ok(())
}

/// In-batch InfoNCE: `mean_i [ logsumexp_{j != i}(z_i . z_j / t) - z_i . z_i+ / t ]`.
pub fn infonce_loss(anchors: &Tensor, positives: &Tensor, temperature: f64) -> Result<f64> {
    anchors.same_shape(positives, "infonce_loss")?;
    let b = anchors.rows();
    if b < 2 {
        return Err(Error::contract(format!("infonce needs a batch of at least 2, got {b}")));
    }
    check_unit_rows(anchors, "anchor")?;
    check_unit_rows(positives, "positive")?;
    let d = anchors.cols();
    let mut total = 0.0;
    for i in 0..b {
        let zi = &anchors.data()[i * d..(i + 1) * d];
        let pos: f64 =
            zi.iter().zip(&positives.data()[i * d..(i + 1) * d]).map(|(a, p)| a * p).sum::<f64>()
                / temperature;
        let mut scores = Vec::with_capacity(b - 1);
        for j in 0..b {
            if j == i {
                continue;
            }
            let zj = &anchors.data()[j * d..(j + 1) * d];
            scores.push(zi.iter().zip(zj).map(|(a, x)| a * x).sum::<f64>() / temperature);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
        total += lse - pos;
    }
    Ok(total / b as f64)
}

/// Graph version over per-sample embedding nodes (each 1 x d_c, unit norm).
pub fn infonce_node(
    tape: &mut Tape,
    anchors: &[NodeId],
    positives: &[NodeId],
    temperature: f64,
) -> Result<NodeId> {
    let b = anchors.len();
    if b < 2 {
        return Err(Error::contract(format!("infonce needs a batch of at least 2, got {b}")));
    }
    if positives.len() != b {
        return Err(Error::contract(format!(
            "{} anchors but {} positives",
            b,
            positives.len()
        )));
    }
    let a = tape.concat_rows(anchors)?;
    let p = tape.concat_rows(positives)?;
    let at = tape.transpose(a)?;
    let sims = tape.matmul(a, at)?;
    let scores = tape.scale(sims, 1.0 / temperature);
    let mut off_diag = vec![true; b * b];
    for i in 0..b {
        off_diag[i * b + i] = false;
    }
    let lse = tape.masked_logsumexp_rows(scores, &off_diag)?;
    let pos_prod = tape.mul(a, p)?;
    let pos_sims = tape.sum_rows(pos_prod)?;
    let pos = tape.scale(pos_sims, 1.0 / temperature);
    let per_sample = tape.sub(lse, pos)?;
    let total = tape.sum_all(per_sample);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `alpha * recon + (1 - alpha) * contra`.
pub fn combined_loss(recon: f64, contra: f64, alpha: f64) -> f64 {
    alpha * recon + (1.0 - alpha) * contra
}

/// Graph version of [`combined_loss`].
pub fn combined_node(tape: &mut Tape, recon: NodeId, contra: NodeId, alpha: f64) -> Result<NodeId> {
    let r = tape.scale(recon, alpha);
    let c = tape.scale(contra, 1.0 - alpha);
    tape.add(r, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::seeding::rng_from;

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            loop {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-3 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn single_patch_mask() -> (MaskPattern, PatchConfig) {
        // 2 patches of d_p = 16 over a 2x16 grid; patch 1 masked.
        let pc = PatchConfig { patch_rows: 1, patch_cols: 16 };
        let mask = MaskPattern::from_visible(vec![true, false]).unwrap();
        (mask, pc)
    }

    #[test]
    fn perfect_prediction_is_zero_loss() {
        let (mask, pc) = single_patch_mask();
        let h = ComplexMatrix::zeros(2, 16);
        assert_eq!(recon_loss(&h, &h, &mask, &pc).unwrap(), 0.0);
    }

    #[test]
    fn single_masked_entry_counts_one_thirty_second() {
        let (mask, pc) = single_patch_mask();
        let h_true = ComplexMatrix::zeros(2, 16);
        let mut h_pred = ComplexMatrix::zeros(2, 16);
        // One real unit entry inside the masked patch (row 1).
        h_pred.set(1, 3, Complex64::new(1.0, 0.0));
        let loss = recon_loss(&h_true, &h_pred, &mask, &pc).unwrap();
        assert_eq!(loss, 1.0 / 32.0);
    }

    #[test]
    fn visible_entries_do_not_move_the_loss() {
        let (mask, pc) = single_patch_mask();
        let h_true = ComplexMatrix::zeros(2, 16);
        let mut h_pred = ComplexMatrix::zeros(2, 16);
        h_pred.set(1, 3, Complex64::new(1.0, 0.0));
        let base = recon_loss(&h_true, &h_pred, &mask, &pc).unwrap();
        // Scribble over the visible patch (row 0).
        let mut h_pred2 = h_pred.clone();
        for c in 0..16 {
            h_pred2.set(0, c, Complex64::new(42.0, -17.0));
        }
        let moved = recon_loss(&h_true, &h_pred2, &mask, &pc).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn zero_masked_patches_is_a_contract_error() {
        let pc = PatchConfig { patch_rows: 1, patch_cols: 16 };
        let mask = MaskPattern::from_visible(vec![true, true]).unwrap();
        let h = ComplexMatrix::zeros(2, 16);
        assert!(matches!(recon_loss(&h, &h, &mask, &pc), Err(Error::Contract(_))));
    }

    #[test]
    fn visible_gradient_is_exactly_zero() {
        let (mask, pc) = single_patch_mask();
        let d_p = pc.patch_dim();
        let target = Tensor::zeros(vec![4, d_p]);
        let mut pred = Tensor::zeros(vec![4, d_p]);
        for v in pred.data_mut() {
            *v = 0.37;
        }
        let mut tape = Tape::new();
        let pred_node = tape.leaf(pred);
        let loss = recon_loss_node(&mut tape, pred_node, &target, &mask, d_p).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(&tape, pred_node);
        // Rows 0 and 2 are the visible patch's real/imag tokens.
        for row in [0usize, 2] {
            for c in 0..d_p {
                assert_eq!(g.at(row, c).to_bits(), 0.0f64.to_bits());
            }
        }
        // Masked rows carry gradient.
        assert!(g.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn graph_and_plain_recon_agree() {
        let (mask, pc) = single_patch_mask();
        let d_p = pc.patch_dim();
        let mut rng = rng_from(9);
        let a: Vec<f64> = (0..4 * d_p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4 * d_p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t_true = Tensor::matrix(4, d_p, a).unwrap();
        let t_pred = Tensor::matrix(4, d_p, b).unwrap();
        let plain = recon_loss_tokens(&t_true, &t_pred, &mask, d_p).unwrap();
        let mut tape = Tape::new();
        let pred_node = tape.leaf(t_pred);
        let loss = recon_loss_node(&mut tape, pred_node, &t_true, &mask, d_p).unwrap();
        assert!((tape.value(loss).item() - plain).abs() < 1e-15);
    }

    #[test]
    fn infinite_snr_reproduces_the_channel() {
        let mut h = ComplexMatrix::zeros(2, 3);
        h.set(0, 0, Complex64::new(1.0, -2.0));
        h.set(1, 2, Complex64::new(0.5, 0.25));
        let mut rng = rng_from(4);
        let (h_plus, sigma_sq) = make_positive(&h, (f64::INFINITY, f64::INFINITY), &mut rng).unwrap();
        assert_eq!(sigma_sq, 0.0);
        assert_eq!(h_plus.data(), h.data());
    }

    #[test]
    fn zero_channel_is_rejected() {
        let h = ComplexMatrix::zeros(2, 2);
        let mut rng = rng_from(4);
        assert!(make_positive(&h, (20.0, 30.0), &mut rng).is_err());
    }

    #[test]
    fn empirical_snr_matches_the_draw() {
        let mut rng = rng_from(11);
        let mut h = ComplexMatrix::zeros(8, 8);
        for v in h.data_mut() {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let signal = h.frob_norm_sq();
        let mut snr_sum = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let (h_plus, _) = make_positive(&h, (20.0, 20.0), &mut rng).unwrap();
            let mut noise = 0.0;
            for (a, b) in h_plus.data().iter().zip(h.data()) {
                noise += (a - b).norm_sqr();
            }
            snr_sum += 10.0 * (signal / noise).log10();
        }
        let mean_snr = snr_sum / draws as f64;
        assert!((mean_snr - 20.0).abs() < 0.2, "mean snr {mean_snr}");
    }

    #[test]
    fn noise_components_have_half_variance_each() {
        let mut rng = rng_from(12);
        let mut h = ComplexMatrix::zeros(4, 4);
        for v in h.data_mut() {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let draws = 10_000;
        let mut re_sq = 0.0;
        let mut im_sq = 0.0;
        let mut sigma_ref = 0.0;
        let mut n = 0usize;
        for _ in 0..draws {
            let (h_plus, sigma_sq) = make_positive(&h, (20.0, 20.0), &mut rng).unwrap();
            sigma_ref = sigma_sq;
            for (a, b) in h_plus.data().iter().zip(h.data()) {
                re_sq += (a.re - b.re) * (a.re - b.re);
                im_sq += (a.im - b.im) * (a.im - b.im);
                n += 1;
            }
        }
        let half = sigma_ref / 2.0;
        assert!((re_sq / n as f64 - half).abs() < 0.05 * half);
        assert!((im_sq / n as f64 - half).abs() < 0.05 * half);
    }

    #[test]
    fn identical_embeddings_give_log_b_minus_one() {
        let row = {
            let mut r = vec![0.0; 6];
            r[0] = 0.6;
            r[1] = 0.8;
            r
        };
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&row);
        }
        let z = Tensor::matrix(3, 6, data).unwrap();
        let loss = infonce_loss(&z, &z, 0.1).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn orthogonal_separated_case_hits_closed_form() {
        // z_i . z_i+ = 1, z_i . z_j = 0: loss = ln(B-1) - 1/t.
        let mut data = vec![0.0; 3 * 4];
        for i in 0..3 {
            data[i * 4 + i] = 1.0;
        }
        let z = Tensor::matrix(3, 4, data).unwrap();
        let loss = infonce_loss(&z, &z.clone(), 0.1).unwrap();
        assert!((loss - (2f64.ln() - 10.0)).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn stabilized_loss_matches_naive_evaluation() {
        let anchors = unit_rows(5, 8, 31);
        let positives = unit_rows(5, 8, 32);
        let tau = 0.1;
        let loss = infonce_loss(&anchors, &positives, tau).unwrap();
        // Naive direct evaluation without max subtraction.
        let d = 8;
        let mut total = 0.0;
        for i in 0..5 {
            let zi = &anchors.data()[i * d..(i + 1) * d];
            let pos: f64 = zi
                .iter()
                .zip(&positives.data()[i * d..(i + 1) * d])
                .map(|(a, p)| a * p)
                .sum::<f64>()
                / tau;
            let mut denom = 0.0;
            for j in 0..5 {
                if j != i {
                    let zj = &anchors.data()[j * d..(j + 1) * d];
                    denom += (zi.iter().zip(zj).map(|(a, x)| a * x).sum::<f64>() / tau).exp();
                }
            }
            total += -(pos.exp() / denom).ln();
        }
        assert!((loss - total / 5.0).abs() < 1e-9);
    }

    #[test]
    fn batch_of_one_and_non_unit_rows_are_rejected() {
        let one = unit_rows(1, 4, 1);
        assert!(infonce_loss(&one, &one, 0.1).is_err());
        let mut bad = unit_rows(3, 4, 2);
        bad.data_mut()[0] *= 2.0;
        let good = unit_rows(3, 4, 3);
        assert!(infonce_loss(&bad, &good, 0.1).is_err());
    }

    #[test]
    fn loss_is_invariant_under_common_rotation() {
        let anchors = unit_rows(6, 8, 41);
        let positives = unit_rows(6, 8, 42);
        let tau = 0.1;
        let base = infonce_loss(&anchors, &positives, tau).unwrap();

        // Orthogonal map from a product of three Householder reflections.
        let mut rng = rng_from(43);
        let d = 8usize;
        let mut q: Vec<Vec<f64>> = (0..d).map(|i| {
            let mut row = vec![0.0; d];
            row[i] = 1.0;
            row
        }).collect();
        for _ in 0..3 {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vv: f64 = v.iter().map(|x| x * x).sum();
            let mut next = vec![vec![0.0; d]; d];
            for i in 0..d {
                for j in 0..d {
                    let h = if i == j { 1.0 } else { 0.0 } - 2.0 * v[i] * v[j] / vv;
                    for (k, nk) in next.iter_mut().enumerate() {
                        nk[j] += q[k][i] * h;
                    }
                }
            }
            q = next;
        }
        let rotate = |m: &Tensor| {
            let mut out = m.clone();
            for r in 0..m.rows() {
                for c in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += m.at(r, k) * q[k][c];
                    }
                    out.set(r, c, acc);
                }
            }
            out
        };
        let rotated = infonce_loss(&rotate(&anchors), &rotate(&positives), tau).unwrap();
        assert!((base - rotated).abs() < 1e-9, "base {base} rotated {rotated}");
    }

    #[test]
    fn graph_infonce_matches_plain() {
        let anchors = unit_rows(4, 6, 51);
        let positives = unit_rows(4, 6, 52);
        let tau = 0.17;
        let plain = infonce_loss(&anchors, &positives, tau).unwrap();

        let mut tape = Tape::new();
        let mut anchor_ids = Vec::new();
        let mut positive_ids = Vec::new();
        for i in 0..4 {
            let arow = Tensor::matrix(1, 6, anchors.data()[i * 6..(i + 1) * 6].to_vec()).unwrap();
            let prow = Tensor::matrix(1, 6, positives.data()[i * 6..(i + 1) * 6].to_vec()).unwrap();
            anchor_ids.push(tape.leaf(arow));
            positive_ids.push(tape.leaf(prow));
        }
        let loss = infonce_node(&mut tape, &anchor_ids, &positive_ids, tau).unwrap();
        assert!((tape.value(loss).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn combination_weights_work() {
        assert_eq!(combined_loss(1.0, -1.0, 1.0), 1.0);
        assert_eq!(combined_loss(1.0, -1.0, 0.0), -1.0);
        assert!((combined_loss(1.0, -1.0, 0.9) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn combined_gradients_are_alpha_weighted_sums() {
        // d(combined)/dx must match finite differences of the combined value,
        // with recon flowing through one path and a contrastive-style term
        // through another.
        let x0 = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.8, 1.1, -0.7, 0.4]).unwrap();
        let target = Tensor::matrix(2, 3, vec![0.0, 0.1, -0.3, 0.9, 0.2, 0.0]).unwrap();
        let alpha = 0.9;
        let eval = |p: &[Tensor]| -> Result<(f64, Tensor)> {
            let mut tape = Tape::new();
            let x = tape.leaf(p[0].clone());
            let t = tape.leaf(target.clone());
            let diff = tape.sub(x, t)?;
            let sq = tape.mul(diff, diff)?;
            let recon = tape.sum_all(sq);
            let e = tape.exp(x);
            let contra = tape.sum_all(e);
            let combined = combined_node(&mut tape, recon, contra, alpha)?;
            let grads = tape.backward(combined)?;
            Ok((tape.value(combined).item(), grads.get(&tape, x)))
        };
        let (_, g) = eval(&[x0.clone()]).unwrap();
        let report =
            finite_diff_check(&[x0.clone()], &[g.clone()], |p| eval(p).map(|(l, _)| l), 1e-5, 3).unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);

        // And the linearity itself: grad(combined) = a*grad(recon) + (1-a)*grad(contra).
        let part = |use_recon: bool| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let t = tape.leaf(target.clone());
            let loss = if use_recon {
                let diff = tape.sub(x, t).unwrap();
                let sq = tape.mul(diff, diff).unwrap();
                tape.sum_all(sq)
            } else {
                let e = tape.exp(x);
                tape.sum_all(e)
            };
            let grads = tape.backward(loss).unwrap();
            grads.get(&tape, x)
        };
        let gr = part(true);
        let gc = part(false);
        for i in 0..g.numel() {
            let want = alpha * gr.data()[i] + (1.0 - alpha) * gc.data()[i];
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }
}

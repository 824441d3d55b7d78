//! Adam training loops: masked-reconstruction pretraining and warm-started
//! contrastive continuation.
//!
//! Both objectives run through one core loop so they draw batches, masks and
//! learning rates from identical seeded streams; with `alpha = 1` the
//! contrastive run reproduces plain pretraining exactly (the head sees zero
//! gradients). Validation masks are a pure function of each record's seed,
//! so any model evaluated on the same dataset and mask ratio sees the same
//! masks.

use std::path::PathBuf;
use std::time::Instant;

use crate::chansynth::ChannelSample;
use crate::dataset::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    bind_params, checkpoint, contrastive_embed, embed, encoder_forward, decoder_forward,
    decoder_restore, ModelConfig, ModelParams, TokenGeometry,
};
use crate::numerics::{Tape, Tensor};
use crate::objectives::{
    combined_node, infonce_loss, infonce_node, make_positive, recon_loss_node, recon_loss_tokens,
    LossConfig,
};
use crate::patchpipe::{
    normalize, patch_tokens, sample_mask, visible_from_tokens, MaskPattern, PatchConfig,
};
use crate::seeding::{mix2, mix3, rng_from, SALT_NOISE, SALT_SHUFFLE, SALT_TRAIN_MASK, SALT_VAL_MASK};

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mask_ratio: f64,
    /// Epochs between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Split fractions; index 0 trains, index 1 (when present) validates.
    pub split_ratios: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3000,
            batch_size: 3072,
            lr_max: 3e-4,
            lr_min: 3e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mask_ratio: 0.60,
            checkpoint_every: 0,
            split_ratios: vec![0.8, 0.2],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.lr_min >= 0.0 && self.lr_max >= self.lr_min) {
            return Err(Error::config("learning rates must satisfy 0 <= lr_min <= lr_max"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("adam eps must be positive"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(
                "training mask ratio must lie in (0, 1); the loss needs masked patches",
            ));
        }
        if self.split_ratios.is_empty() {
            return Err(Error::config("at least a training split ratio is required"));
        }
        Ok(())
    }
}

/// Cosine decay over optimizer steps: lr(0) = lr_max, lr(T) = lr_min.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let frac = t as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over all parameters.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, param) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}",
                names.get(i).map(String::as_str).unwrap_or("?")
            )));
        }
        param.same_shape(g, "adam_step")?;
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = param.data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One epoch's log record; `wall_seconds` is the only non-deterministic field.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_recon: f64,
    pub train_contra: Option<f64>,
    pub val_recon: Option<f64>,
    pub val_contra: Option<f64>,
    pub wall_seconds: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.12e}"),
        None => "-".to_string(),
    }
}

impl EpochLog {
    /// Tab-separated line: epoch, step, lr, train_recon, train_contra,
    /// val_recon, val_contra, wall_seconds.
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{:.12e}\t{}\t{}\t{}\t{:.3}",
            self.epoch,
            self.step,
            self.lr,
            self.train_recon,
            fmt_opt(self.train_contra),
            fmt_opt(self.val_recon),
            fmt_opt(self.val_contra),
            self.wall_seconds
        )
    }
}

/// Final state and per-epoch history of a training run.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub meta: checkpoint::CheckpointMeta,
    pub log: Vec<EpochLog>,
    pub final_val_recon: Option<f64>,
    pub initial_train_recon: f64,
}

/// Deterministic validation mask for a record: a pure function of the record
/// seed and the mask ratio, independent of the training stream.
pub fn val_mask(record_seed: u64, k: usize, mask_ratio: f64) -> Result<MaskPattern> {
    let mut rng = rng_from(mix2(record_seed, SALT_VAL_MASK));
    sample_mask(k, mask_ratio, &mut rng)
}

/// Deterministic positive-pair noise stream for validation.
fn val_noise_rng(record_seed: u64) -> rand_chacha::ChaCha12Rng {
    rng_from(mix3(record_seed, SALT_NOISE, SALT_VAL_MASK))
}

/// Reconstruction (and contrastive) loss over a record subset with
/// record-seeded masks and no parameter updates.
pub fn evaluate(
    ds: &Dataset,
    idx: &[usize],
    params: &ModelParams,
    model_cfg: &ModelConfig,
    patch_cfg: &PatchConfig,
    mask_ratio: f64,
    contrastive: Option<&LossConfig>,
) -> Result<(f64, Option<f64>)> {
    let geo = TokenGeometry::derive(patch_cfg, ds.n_s, ds.n_f)?;
    let std = positive_std(ds)?;
    if idx.is_empty() {
        return Err(Error::contract("evaluation subset is empty".to_string()));
    }
    let mut recon_sum = 0.0;
    let mut embeddings: Vec<(Tensor, Tensor)> = Vec::new();
    for &i in idx {
        let rec = &ds.records[i];
        let tokens = patch_tokens(&normalize(&rec.h_low, std)?, patch_cfg)?;
        let mask = val_mask(rec.seed, geo.k, mask_ratio)?;
        let visible = visible_from_tokens(&tokens, &mask)?;

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, params);
        let z0 = embed(&mut tape, &bound, &visible)?;
        let z_enc = encoder_forward(&mut tape, &bound, model_cfg, z0)?;
        let z_d = decoder_restore(&mut tape, &bound, z_enc, &visible.token_indices, geo.total_tokens())?;
        let p_pred = decoder_forward(&mut tape, &bound, model_cfg, z_d)?;
        recon_sum += recon_loss_tokens(&tokens, tape.value(p_pred), &mask, geo.d_p)?;

        if contrastive.is_some() {
            let zc = contrastive_embed(&mut tape, &bound, z_enc)?;
            let anchor = tape.value(zc).clone();

            let mut noise_rng = val_noise_rng(rec.seed);
            let lc = contrastive.unwrap();
            let (h_plus, _) = make_positive(&rec.h_low, lc.snr_range, &mut noise_rng)?;
            let plus_tokens = patch_tokens(&normalize(&h_plus, std)?, patch_cfg)?;
            let plus_visible = visible_from_tokens(&plus_tokens, &mask)?;
            let z0p = embed(&mut tape, &bound, &plus_visible)?;
            let z_enc_p = encoder_forward(&mut tape, &bound, model_cfg, z0p)?;
            let zcp = contrastive_embed(&mut tape, &bound, z_enc_p)?;
            embeddings.push((anchor, tape.value(zcp).clone()));
        }
    }
    let recon = recon_sum / idx.len() as f64;
    let contra = if let Some(lc) = contrastive {
        Some(batched_infonce(&embeddings, lc.temperature)?)
    } else {
        None
    };
    Ok((recon, contra))
}

/// Plain InfoNCE over fixed-order batches of at most 64 embedding pairs;
/// remainders of size one fold into the previous batch.
fn batched_infonce(pairs: &[(Tensor, Tensor)], temperature: f64) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::contract("contrastive evaluation needs at least 2 samples".to_string()));
    }
    let d = pairs[0].0.numel();
    let chunk = 64usize;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start < pairs.len() {
        let mut end = (start + chunk).min(pairs.len());
        if pairs.len() - end == 1 {
            end = pairs.len();
        }
        let group = &pairs[start..end];
        let anchors = Tensor::matrix(
            group.len(),
            d,
            group.iter().flat_map(|(a, _)| a.data().iter().copied()).collect(),
        )?;
        let positives = Tensor::matrix(
            group.len(),
            d,
            group.iter().flat_map(|(_, p)| p.data().iter().copied()).collect(),
        )?;
        total += infonce_loss(&anchors, &positives, temperature)? * group.len() as f64;
        count += group.len();
        start = end;
    }
    Ok(total / count as f64)
}

fn positive_std(ds: &Dataset) -> Result<f64> {
    if !(ds.normalization_std > 0.0) || !ds.normalization_std.is_finite() {
        return Err(Error::Format(format!(
            "dataset normalization std must be positive and finite, got {}",
            ds.normalization_std
        )));
    }
    Ok(ds.normalization_std)
}

/// Masked-reconstruction pretraining from a fresh seeded init (or `init`
/// when given).
pub fn pretrain(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    patch_cfg: &PatchConfig,
    train_cfg: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<TrainOutcome> {
    if model_cfg.contrastive_enabled {
        return Err(Error::config(
            "plain pretraining expects contrastive_enabled = false; use pretrain_contrastive",
        ));
    }
    run_training(ds, model_cfg, patch_cfg, train_cfg, None, init, None)
}

/// Continual pretraining with the combined objective, warm-started from
/// existing parameters (typically a loaded checkpoint).
pub fn pretrain_contrastive(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    patch_cfg: &PatchConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    init: ModelParams,
) -> Result<TrainOutcome> {
    if !model_cfg.contrastive_enabled {
        return Err(Error::config("contrastive pretraining requires contrastive_enabled = true"));
    }
    if init.contrastive.is_none() {
        return Err(Error::contract("warm-start parameters lack a contrastive head".to_string()));
    }
    loss_cfg.validate()?;
    run_training(ds, model_cfg, patch_cfg, train_cfg, Some(*loss_cfg), Some(init), None)
}

/// Periodic checkpoint target.
pub struct PeriodicCheckpoints {
    pub dir: PathBuf,
}

pub fn pretrain_with_checkpoints(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    patch_cfg: &PatchConfig,
    train_cfg: &TrainConfig,
    loss_cfg: Option<LossConfig>,
    init: Option<ModelParams>,
    periodic: Option<PeriodicCheckpoints>,
) -> Result<TrainOutcome> {
    run_training(ds, model_cfg, patch_cfg, train_cfg, loss_cfg, init, periodic)
}

fn run_training(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    patch_cfg: &PatchConfig,
    train_cfg: &TrainConfig,
    loss_cfg: Option<LossConfig>,
    init: Option<ModelParams>,
    periodic: Option<PeriodicCheckpoints>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let geo = TokenGeometry::derive(patch_cfg, ds.n_s, ds.n_f)?;
    let std = positive_std(ds)?;
    let contrastive = loss_cfg.is_some();
    if contrastive != model_cfg.contrastive_enabled {
        return Err(Error::config("loss config presence must match contrastive_enabled"));
    }

    let seeds: Vec<u64> = ds.records.iter().map(|r| r.seed).collect();
    let splits = split_indices(&seeds, &train_cfg.split_ratios)?;
    let train_idx = splits[0].clone();
    let val_idx = splits.get(1).cloned().unwrap_or_default();
    if train_idx.is_empty() {
        return Err(Error::contract("training split is empty".to_string()));
    }

    // Normalized full token matrices, cached once per record.
    let mut tokens: Vec<Option<Tensor>> = vec![None; ds.records.len()];
    for &i in train_idx.iter().chain(val_idx.iter()) {
        tokens[i] = Some(patch_tokens(&normalize(&ds.records[i].h_low, std)?, patch_cfg)?);
    }

    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(model_cfg, &geo, train_cfg.seed)?,
    };
    if params.contrastive.is_some() != contrastive {
        return Err(Error::contract(
            "initial parameters disagree with the training objective about the head".to_string(),
        ));
    }
    let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    let mut adam = {
        let named = params.named();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };

    let meta = checkpoint::CheckpointMeta {
        model: model_cfg.clone(),
        patch: *patch_cfg,
        n_s: ds.n_s,
        n_f: ds.n_f,
        normalization_std: ds.normalization_std,
    };

    let batches_per_epoch = train_idx.len().div_ceil(train_cfg.batch_size);
    let total_steps = train_cfg.epochs * batches_per_epoch;
    let mut global_step = 0usize;
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut initial_train_recon = None;
    let started = Instant::now();

    for epoch in 0..train_cfg.epochs {
        let mut order = train_idx.clone();
        shuffle(&mut order, mix3(train_cfg.seed, SALT_SHUFFLE, epoch as u64));
        let mut batches: Vec<Vec<usize>> =
            order.chunks(train_cfg.batch_size).map(|c| c.to_vec()).collect();
        // The contrastive term needs at least two samples; fold an orphan
        // into the previous batch rather than dropping it.
        if contrastive && batches.len() >= 2 && batches.last().map(Vec::len) == Some(1) {
            let orphan = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(orphan);
        }

        let mut epoch_recon = 0.0;
        let mut epoch_contra = 0.0;
        let mut epoch_samples = 0usize;

        for batch in &batches {
            let lr = cosine_lr(global_step, total_steps, train_cfg.lr_max, train_cfg.lr_min);
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);

            let mut recon_nodes = Vec::with_capacity(batch.len());
            let mut anchor_nodes = Vec::new();
            let mut positive_nodes = Vec::new();
            for (pos, &i) in batch.iter().enumerate() {
                let rec = &ds.records[i];
                let full = tokens[i].as_ref().unwrap();
                let mut mask_rng = rng_from(mix3(
                    mix2(train_cfg.seed, SALT_TRAIN_MASK),
                    global_step as u64,
                    pos as u64,
                ));
                let mask = sample_mask(geo.k, train_cfg.mask_ratio, &mut mask_rng)?;
                let visible = visible_from_tokens(full, &mask)?;

                let z0 = embed(&mut tape, &bound, &visible)?;
                let z_enc = encoder_forward(&mut tape, &bound, model_cfg, z0)?;
                let z_d = decoder_restore(&mut tape, &bound, z_enc, &visible.token_indices, geo.total_tokens())?;
                let p_pred = decoder_forward(&mut tape, &bound, model_cfg, z_d)?;
                recon_nodes.push(recon_loss_node(&mut tape, p_pred, full, &mask, geo.d_p)?);

                if let Some(lc) = &loss_cfg {
                    let zc = contrastive_embed(&mut tape, &bound, z_enc)?;
                    anchor_nodes.push(zc);
                    let mut noise_rng = rng_from(mix3(
                        mix2(train_cfg.seed, SALT_NOISE),
                        global_step as u64,
                        pos as u64,
                    ));
                    let (h_plus, _) = make_positive(&rec.h_low, lc.snr_range, &mut noise_rng)?;
                    let plus_tokens = patch_tokens(&normalize(&h_plus, std)?, patch_cfg)?;
                    let plus_visible = visible_from_tokens(&plus_tokens, &mask)?;
                    let z0p = embed(&mut tape, &bound, &plus_visible)?;
                    let z_enc_p = encoder_forward(&mut tape, &bound, model_cfg, z0p)?;
                    positive_nodes.push(contrastive_embed(&mut tape, &bound, z_enc_p)?);
                }
            }

            let recon_batch = mean_of(&mut tape, &recon_nodes)?;
            let loss_node = if let Some(lc) = &loss_cfg {
                let contra_batch =
                    infonce_node(&mut tape, &anchor_nodes, &positive_nodes, lc.temperature)?;
                epoch_contra += tape.value(contra_batch).item() * batch.len() as f64;
                combined_node(&mut tape, recon_batch, contra_batch, lc.alpha)?
            } else {
                recon_batch
            };

            let recon_val = tape.value(recon_batch).item();
            let loss_val = tape.value(loss_node).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {global_step}"
                )));
            }
            if initial_train_recon.is_none() {
                initial_train_recon = Some(recon_val);
            }
            epoch_recon += recon_val * batch.len() as f64;
            epoch_samples += batch.len();

            let grads = tape.backward(loss_node)?;
            let flat_grads: Vec<Tensor> =
                bound.flat_ids().iter().map(|&id| grads.get(&tape, id)).collect();
            let mut tensors = params.tensors_mut();
            adam_step(
                &mut tensors,
                &flat_grads,
                &names,
                &mut adam,
                lr,
                train_cfg.beta1,
                train_cfg.beta2,
                train_cfg.eps,
            )?;
            global_step += 1;
        }

        let (val_recon, val_contra) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (r, c) = evaluate(
                ds,
                &val_idx,
                &params,
                model_cfg,
                patch_cfg,
                train_cfg.mask_ratio,
                loss_cfg.as_ref(),
            )?;
            (Some(r), c)
        };

        log.push(EpochLog {
            epoch,
            step: global_step,
            lr: cosine_lr(global_step.saturating_sub(1), total_steps, train_cfg.lr_max, train_cfg.lr_min),
            train_recon: epoch_recon / epoch_samples as f64,
            train_contra: contrastive.then(|| epoch_contra / epoch_samples as f64),
            val_recon,
            val_contra,
            wall_seconds: started.elapsed().as_secs_f64(),
        });

        if let Some(p) = &periodic {
            if train_cfg.checkpoint_every > 0 && (epoch + 1) % train_cfg.checkpoint_every == 0 {
                let path = p.dir.join(format!("epoch_{:05}.wmae", epoch + 1));
                checkpoint::save(&params, &meta, checkpoint::Dtype::F64, &path)?;
            }
        }
    }

    let final_val_recon = log.last().and_then(|l| l.val_recon);
    Ok(TrainOutcome {
        params,
        meta,
        log,
        final_val_recon,
        initial_train_recon: initial_train_recon.unwrap_or(f64::NAN),
    })
}

fn mean_of(tape: &mut Tape, nodes: &[crate::numerics::NodeId]) -> Result<crate::numerics::NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(tape.scale(acc, 1.0 / nodes.len() as f64))
}

/// Fisher-Yates with a derived seed.
fn shuffle(order: &mut [usize], seed: u64) {
    use rand::Rng;
    let mut rng = rng_from(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Convenience for tests and probes: a small in-memory dataset.
pub fn dataset_from_records(records: Vec<ChannelSample>, n_s: usize, n_f: usize, ratios: &[f64]) -> Result<Dataset> {
    let seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    let splits = split_indices(&seeds, ratios)?;
    let std = crate::dataset::normalization_std(&records, &splits[0]);
    Ok(Dataset { n_s, n_f, normalization_std: std, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansynth::{generate_records, SystemConfig};

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 3e-4, 3e-6), 3e-4);
        assert!((cosine_lr(100, 100, 3e-4, 3e-6) - 3e-6).abs() < 1e-20);
        let mid = cosine_lr(50, 100, 3e-4, 3e-6);
        assert!((mid - (3e-4 + 3e-6) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let orig = p.clone();
        let g = Tensor::zeros(vec![2, 2]);
        let mut state = AdamState::new(&[&p]);
        let mut refs = vec![&mut p];
        adam_step(&mut refs, &[g], &["w".into()], &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, orig);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_closed_form() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut state = AdamState::new(&[&p]);
        let lr = 0.01;
        let eps = 1e-8;
        let mut refs = vec![&mut p];
        adam_step(&mut refs, &[g], &["w".into()], &mut state, lr, 0.9, 0.999, eps).unwrap();
        let want = -lr / (1.0 + eps);
        assert!((p.item() - want).abs() < 1e-15, "got {}, want {want}", p.item());
    }

    #[test]
    fn adam_two_steps_match_hand_computation() {
        // Scalar parameter, constant gradient 1, default betas.
        let (beta1, beta2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let mut p = Tensor::scalar(0.3);
        let mut state = AdamState::new(&[&p]);
        let mut want = 0.3;
        let mut m = 0.0;
        let mut v = 0.0;
        for t in 1..=2u32 {
            let g = Tensor::scalar(1.0);
            let mut refs = vec![&mut p];
            adam_step(&mut refs, &[g], &["w".into()], &mut state, lr, beta1, beta2, eps).unwrap();
            m = beta1 * m + (1.0 - beta1);
            v = beta2 * v + (1.0 - beta2);
            let m_hat = m / (1.0 - beta1.powi(t as i32));
            let v_hat = v / (1.0 - beta2.powi(t as i32));
            want -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p.item() - want).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(f64::NAN);
        let mut state = AdamState::new(&[&p]);
        let mut refs = vec![&mut p];
        let err =
            adam_step(&mut refs, &[g], &["embed.w0".into()], &mut state, 0.1, 0.9, 0.999, 1e-8)
                .unwrap_err();
        assert!(err.to_string().contains("embed.w0"));
    }

    fn toy_setup() -> (Dataset, ModelConfig, PatchConfig, TrainConfig) {
        let mut sys = SystemConfig::default();
        sys.n_antennas = 4;
        sys.n_subcarriers = 16;
        sys.n_scenarios = 2;
        let records = generate_records(12, &sys, 7, 0).unwrap();
        let ds = dataset_from_records(records, 4, 16, &[0.8, 0.2]).unwrap();
        let mc = ModelConfig {
            d_e: 16,
            l_enc: 1,
            l_dec: 1,
            m_enc: 2,
            m_dec: 2,
            d_c: 8,
            contrastive_enabled: false,
        };
        let pc = PatchConfig { patch_rows: 1, patch_cols: 8 }; // K = 8
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr_max: 1e-3,
            lr_min: 1e-5,
            seed: 5,
            ..TrainConfig::default()
        };
        (ds, mc, pc, tc)
    }

    #[test]
    fn pretraining_is_bit_deterministic() {
        let (ds, mc, pc, tc) = toy_setup();
        let a = pretrain(&ds, &mc, &pc, &tc, None).unwrap();
        let b = pretrain(&ds, &mc, &pc, &tc, None).unwrap();
        let bytes_a = checkpoint::encode(&a.params, &a.meta, checkpoint::Dtype::F64).unwrap();
        let bytes_b = checkpoint::encode(&b.params, &b.meta, checkpoint::Dtype::F64).unwrap();
        assert_eq!(bytes_a, bytes_b);
        for (la, lb) in a.log.iter().zip(&b.log) {
            // Full line equality except the wall-clock column.
            let strip = |l: &EpochLog| {
                let line = l.line();
                let cut = line.rfind('\t').unwrap();
                line[..cut].to_string()
            };
            assert_eq!(strip(la), strip(lb));
        }
    }

    #[test]
    fn losses_decrease_on_a_toy_run() {
        let (ds, mc, pc, mut tc) = toy_setup();
        tc.epochs = 30;
        let out = pretrain(&ds, &mc, &pc, &tc, None).unwrap();
        let first = out.log.first().unwrap().train_recon;
        let last = out.log.last().unwrap().train_recon;
        assert!(last < first, "train recon {first} -> {last}");
        assert!(out.final_val_recon.is_some());
    }

    #[test]
    fn alpha_one_contrastive_run_tracks_plain_pretraining() {
        let (ds, mc, pc, mut tc) = toy_setup();
        tc.epochs = 3;
        let geo = TokenGeometry::derive(&pc, ds.n_s, ds.n_f).unwrap();

        let base = ModelParams::init(&mc, &geo, 99).unwrap();
        let plain = pretrain(&ds, &mc, &pc, &tc, Some(base.clone())).unwrap();

        let mut mc_contra = mc.clone();
        mc_contra.contrastive_enabled = true;
        let mut warm = base.clone();
        warm.contrastive = Some(crate::model::init_contrastive_head(&mc_contra, 1234));
        let lc = LossConfig { alpha: 1.0, ..LossConfig::default() };
        let contra = pretrain_contrastive(&ds, &mc_contra, &pc, &tc, &lc, warm).unwrap();

        // Shared tensors evolve identically when the contrastive term has
        // zero weight; the head stays at its init.
        for ((name, a), (_, b)) in plain.params.named().iter().zip(contra.params.named()) {
            if name.starts_with("contra.") {
                continue;
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y, "tensor {name} diverged");
            }
        }
        let head_before = crate::model::init_contrastive_head(&mc_contra, 1234);
        assert_eq!(contra.params.contrastive.as_ref().unwrap(), &head_before);
    }

    #[test]
    fn every_parameter_gets_gradient_except_unvisited_pe_rows() {
        // Checked at a generic parameter point. At the exact zero init the
        // masked decoder inputs are all-zero vectors (mask token and PE both
        // start at zero), which makes first-layer decoder q/k gradients
        // exactly zero for one step; that resolves itself as soon as either
        // tensor moves.
        let (ds, mc, pc, tc) = toy_setup();
        let mut mc = mc;
        mc.contrastive_enabled = true;
        let geo = TokenGeometry::derive(&pc, ds.n_s, ds.n_f).unwrap();
        let params = ModelParams::init_uniform(&mc, &geo, 17, 0.3).unwrap();
        let std = ds.normalization_std;

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let mut recon_nodes = Vec::new();
        let mut anchors = Vec::new();
        let mut positives = Vec::new();
        let mut visible_union = vec![false; geo.total_tokens()];
        let lc = LossConfig::default();
        for (pos, rec) in ds.records.iter().take(4).enumerate() {
            let full = patch_tokens(&normalize(&rec.h_low, std).unwrap(), &pc).unwrap();
            let mut mask_rng = rng_from(mix3(11, SALT_TRAIN_MASK, pos as u64));
            let mask = sample_mask(geo.k, tc.mask_ratio, &mut mask_rng).unwrap();
            let visible = visible_from_tokens(&full, &mask).unwrap();
            for &t in &visible.token_indices {
                visible_union[t] = true;
            }
            let z0 = embed(&mut tape, &bound, &visible).unwrap();
            let z_enc = encoder_forward(&mut tape, &bound, &mc, z0).unwrap();
            let z_d = decoder_restore(&mut tape, &bound, z_enc, &visible.token_indices, geo.total_tokens()).unwrap();
            let p_pred = decoder_forward(&mut tape, &bound, &mc, z_d).unwrap();
            recon_nodes.push(recon_loss_node(&mut tape, p_pred, &full, &mask, geo.d_p).unwrap());
            anchors.push(contrastive_embed(&mut tape, &bound, z_enc).unwrap());
            let mut noise_rng = rng_from(mix3(12, SALT_NOISE, pos as u64));
            let (h_plus, _) = make_positive(&rec.h_low, lc.snr_range, &mut noise_rng).unwrap();
            let plus_tokens = patch_tokens(&normalize(&h_plus, std).unwrap(), &pc).unwrap();
            let plus_visible = visible_from_tokens(&plus_tokens, &mask).unwrap();
            let z0p = embed(&mut tape, &bound, &plus_visible).unwrap();
            let z_enc_p = encoder_forward(&mut tape, &bound, &mc, z0p).unwrap();
            positives.push(contrastive_embed(&mut tape, &bound, z_enc_p).unwrap());
        }
        let recon = mean_of(&mut tape, &recon_nodes).unwrap();
        let contra = infonce_node(&mut tape, &anchors, &positives, lc.temperature).unwrap();
        let loss = combined_node(&mut tape, recon, contra, lc.alpha).unwrap();
        let grads = tape.backward(loss).unwrap();

        for ((name, _), &id) in params.named().iter().zip(bound.flat_ids()) {
            let g = grads.get(&tape, id);
            if name == "pe.enc" {
                for (row, &seen) in visible_union.iter().enumerate() {
                    let row_zero = (0..mc.d_e).all(|c| g.at(row, c) == 0.0);
                    if seen {
                        assert!(!row_zero, "visible pe row {row} has zero gradient");
                    } else {
                        assert!(row_zero, "never-visible pe row {row} has gradient");
                    }
                }
            } else {
                assert!(
                    g.data().iter().any(|v| *v != 0.0),
                    "parameter {name} received no gradient"
                );
            }
        }
        // The mask token always carries gradient at a positive mask ratio.
        let mask_grad = grads.get(&tape, bound.mask_token);
        assert!(mask_grad.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn validation_masks_do_not_depend_on_the_training_stream() {
        let k = 8;
        let m1 = val_mask(42, k, 0.6).unwrap();
        let m2 = val_mask(42, k, 0.6).unwrap();
        assert_eq!(m1, m2);
        let m3 = val_mask(43, k, 0.6).unwrap();
        assert_ne!(m1, m3);
    }
}

//! Frozen-encoder evaluation: cross-frequency beam selection and LoS
//! detection through linear probes, plus a raw-channel baseline.
//!
//! Beam labels come from the high-band render against a DFT codebook on a
//! uniform sine-space grid; features come from the low band at mask ratio
//! zero. Probe training budgets are nested prefixes of one seeded shuffle,
//! so a larger budget always contains every smaller one.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::complexmat::ComplexMatrix;
use crate::dataset::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{bind_params, embed, encoder_forward, ModelConfig, ModelParams, TokenGeometry};
use crate::numerics::{Tape, Tensor};
use crate::patchpipe::{normalize, patch_tokens, visible_from_tokens, MaskPattern, PatchConfig};
use crate::seeding::{mix2, mix3, rng_from, SALT_BUDGET, SALT_PROBE};
use crate::trainer::{adam_step, AdamState};

pub const CODEBOOK_SIZES: [usize; 5] = [16, 32, 64, 128, 256];

/// Unit-norm beamforming vectors over the antenna dimension.
#[derive(Clone, Debug)]
pub struct Codebook {
    beams: Vec<Vec<Complex64>>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.beams.len()
    }

    pub fn beam(&self, b: usize) -> &[Complex64] {
        &self.beams[b]
    }
}

/// DFT codebook on the uniform sine-space grid, beam b steering to
/// `sin(theta_b) = -1 + (2b + 1) / CS`.
pub fn dft_codebook(n_s: usize, codebook_size: usize) -> Result<Codebook> {
    if codebook_size < 2 {
        return Err(Error::contract(format!(
            "codebook needs at least 2 beams, got {codebook_size}"
        )));
    }
    if n_s == 0 {
        return Err(Error::contract("codebook needs at least one antenna".to_string()));
    }
    let scale = 1.0 / (n_s as f64).sqrt();
    let beams = (0..codebook_size)
        .map(|b| {
            let sin_theta = -1.0 + (2 * b + 1) as f64 / codebook_size as f64;
            (0..n_s)
                .map(|s| {
                    Complex64::from_polar(scale, std::f64::consts::PI * s as f64 * sin_theta)
                })
                .collect()
        })
        .collect();
    Ok(Codebook { beams })
}

/// Received-energy score of one beam: sum over subcarriers of |f^H h_f|^2.
fn beam_score(beam: &[Complex64], h: &ComplexMatrix) -> f64 {
    let mut total = 0.0;
    for f in 0..h.cols() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (s, w) in beam.iter().enumerate() {
            acc += w.conj() * h.at(s, f);
        }
        total += acc.norm_sqr();
    }
    total
}

/// Index of the beam maximizing received energy; ties resolve to the lowest
/// index.
pub fn beam_label(h_high: &ComplexMatrix, cb: &Codebook) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (b, beam) in cb.beams.iter().enumerate() {
        let score = beam_score(beam, h_high);
        if score > best_score {
            best_score = score;
            best = b;
        }
    }
    best
}

/// What produces the feature vector of a sample.
pub enum FeatureSource<'a> {
    /// Frozen encoder at mask ratio zero.
    Encoder { params: &'a ModelParams, model: &'a ModelConfig },
    /// Flattened real/imag of the normalized low-band channel.
    Raw,
}

/// Downstream task identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Beam { codebook_size: usize },
    Los,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Beam { .. } => "beam",
            Task::Los => "los",
        }
    }

    pub fn codebook_size(&self) -> Option<usize> {
        match self {
            Task::Beam { codebook_size } => Some(*codebook_size),
            Task::Los => None,
        }
    }

    /// Beam features stay token-resolved (flattened); LoS uses the pooled
    /// summary vector.
    fn pooled(&self) -> bool {
        matches!(self, Task::Los)
    }
}

/// Features, labels, and 70/20/10-style split membership for probing.
pub struct ProbeDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub splits: Vec<Vec<usize>>,
}

fn encoder_features(
    rec_h_low: &ComplexMatrix,
    std: f64,
    pc: &PatchConfig,
    geo: &TokenGeometry,
    params: &ModelParams,
    model: &ModelConfig,
    pooled: bool,
) -> Result<Vec<f64>> {
    let tokens = patch_tokens(&normalize(rec_h_low, std)?, pc)?;
    let mask = MaskPattern::from_visible(vec![true; geo.k])?;
    let visible = visible_from_tokens(&tokens, &mask)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let z0 = embed(&mut tape, &bound, &visible)?;
    let z_enc = encoder_forward(&mut tape, &bound, model, z0)?;
    let z = tape.value(z_enc);
    if pooled {
        let d = z.cols();
        let mut out = vec![0.0; d];
        for row in z.data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= z.rows() as f64;
        }
        Ok(out)
    } else {
        Ok(z.data().to_vec())
    }
}

fn raw_features(rec_h_low: &ComplexMatrix, std: f64) -> Result<Vec<f64>> {
    let n = normalize(rec_h_low, std)?;
    let mut out = Vec::with_capacity(2 * n.data().len());
    for v in n.data() {
        out.push(v.re);
        out.push(v.im);
    }
    Ok(out)
}

/// Extracts per-record features; records are independent, so `threads > 0`
/// parallelizes without changing the output.
pub fn extract_features(
    ds: &Dataset,
    pc: &PatchConfig,
    source: &FeatureSource<'_>,
    task: Task,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let geo = TokenGeometry::derive(pc, ds.n_s, ds.n_f)?;
    let std = ds.normalization_std;
    if !(std > 0.0) {
        return Err(Error::Format("dataset normalization std must be positive".to_string()));
    }
    let one = |rec: &crate::chansynth::ChannelSample| -> Result<Vec<f64>> {
        match source {
            FeatureSource::Encoder { params, model } => {
                encoder_features(&rec.h_low, std, pc, &geo, params, model, task.pooled())
            }
            FeatureSource::Raw => raw_features(&rec.h_low, std),
        }
    };
    if threads == 0 {
        ds.records.iter().map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| ds.records.par_iter().map(one).collect())
    }
}

/// Task labels for every record, with the class count.
pub fn task_labels(ds: &Dataset, task: Task) -> Result<(Vec<usize>, usize)> {
    match task {
        Task::Beam { codebook_size } => {
            let cb = dft_codebook(ds.n_s, codebook_size)?;
            let labels = ds.records.iter().map(|r| beam_label(&r.h_high, &cb)).collect();
            Ok((labels, codebook_size))
        }
        Task::Los => Ok((ds.records.iter().map(|r| r.los as usize).collect(), 2)),
    }
}

/// Assembles features, labels and deterministic splits for one task.
pub fn build_probe_dataset(
    ds: &Dataset,
    pc: &PatchConfig,
    source: &FeatureSource<'_>,
    task: Task,
    ratios: &[f64],
    threads: usize,
) -> Result<ProbeDataset> {
    let features = extract_features(ds, pc, source, task, threads)?;
    let (labels, n_classes) = task_labels(ds, task)?;
    let seeds: Vec<u64> = ds.records.iter().map(|r| r.seed).collect();
    let splits = split_indices(&seeds, ratios)?;
    Ok(ProbeDataset { features, labels, n_classes, splits })
}

/// Deterministic nested training subset: the first `ceil(budget * n)`
/// elements of one seeded shuffle, so smaller budgets are prefixes of
/// larger ones.
pub fn budget_subset(train_split: &[usize], budget: f64, seed: u64) -> Result<Vec<usize>> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::contract(format!("budget must lie in (0, 1], got {budget}")));
    }
    let mut order: Vec<usize> = train_split.to_vec();
    use rand::Rng;
    let mut rng = rng_from(mix2(seed, SALT_BUDGET));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let take = ((budget * train_split.len() as f64).ceil() as usize).clamp(1, train_split.len());
    order.truncate(take);
    Ok(order)
}

/// Linear probe hyperparameters; gamma is the per-epoch exponential decay.
#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl ProbeConfig {
    /// Beam-selection defaults.
    pub fn beam() -> Self {
        ProbeConfig { lr: 1e-4, batch_size: 512, gamma: 0.995, max_epochs: 400, patience: 20, seed: 0 }
    }

    /// LoS-detection defaults.
    pub fn los() -> Self {
        ProbeConfig { lr: 0.01, batch_size: 256, gamma: 0.995, max_epochs: 400, patience: 20, seed: 0 }
    }
}

/// Affine map + softmax over classes.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub weights: Tensor,
    pub bias: Tensor,
    pub n_classes: usize,
}

impl LinearClassifier {
    pub fn scores(&self, features: &[f64]) -> Vec<f64> {
        let d = features.len();
        let c = self.n_classes;
        let mut out = vec![0.0; c];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = self.bias.data()[j];
            for (i, f) in features.iter().enumerate() {
                acc += f * self.weights.data()[i * c + j];
            }
            let _ = d;
            *o = acc;
        }
        out
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let scores = self.scores(features);
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    }
}

fn cross_entropy_batch(
    features: &[Vec<f64>],
    labels: &[usize],
    idx: &[usize],
    w: &Tensor,
    b: &Tensor,
    n_classes: usize,
    grads: Option<(&mut Tensor, &mut Tensor)>,
) -> f64 {
    let d = features[idx[0]].len();
    let batch = idx.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; n_classes];
    let (mut dw, mut db) = match grads {
        Some((dw, db)) => (Some(dw), Some(db)),
        None => (None, None),
    };
    for &i in idx {
        let x = &features[i];
        let mut logits = vec![0.0; n_classes];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut acc = b.data()[j];
            for (k, f) in x.iter().enumerate() {
                acc += f * w.data()[k * n_classes + j];
            }
            *l = acc;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for l in &logits {
            denom += (l - max).exp();
        }
        loss += -(logits[labels[i]] - max - denom.ln());
        if dw.is_some() {
            for j in 0..n_classes {
                let p = (logits[j] - max).exp() / denom;
                dlogits[j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / batch;
            }
            let dw = dw.as_mut().unwrap();
            for (k, f) in x.iter().enumerate() {
                let row = &mut dw.data_mut()[k * n_classes..(k + 1) * n_classes];
                for (j, dl) in dlogits.iter().enumerate() {
                    row[j] += f * dl;
                }
            }
            let db = db.as_mut().unwrap();
            for (j, dl) in dlogits.iter().enumerate() {
                db.data_mut()[j] += dl;
            }
        }
        let _ = d;
    }
    loss / batch
}

/// Trains the affine classifier with Adam, exponential lr decay, and early
/// stopping on validation cross-entropy (best weights restored).
pub fn linear_probe(
    pd: &ProbeDataset,
    train_subset: &[usize],
    val_subset: &[usize],
    cfg: &ProbeConfig,
) -> Result<LinearClassifier> {
    if train_subset.is_empty() {
        return Err(Error::contract("probe training subset is empty".to_string()));
    }
    if pd.features.is_empty() {
        return Err(Error::contract("probe dataset has no features".to_string()));
    }
    let d = pd.features[train_subset[0]].len();
    let c = pd.n_classes;
    let mut w = Tensor::zeros(vec![d, c]);
    let mut b = Tensor::zeros(vec![c]);
    let mut adam = AdamState::new(&[&w, &b]);
    let names = vec!["probe.w".to_string(), "probe.b".to_string()];

    let mut best: Option<(f64, Tensor, Tensor)> = None;
    let mut since_best = 0usize;
    use rand::Rng;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr * cfg.gamma.powi(epoch as i32);
        let mut order = train_subset.to_vec();
        let mut rng = rng_from(mix3(cfg.seed, SALT_PROBE, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut dw = Tensor::zeros(vec![d, c]);
            let mut db = Tensor::zeros(vec![c]);
            cross_entropy_batch(
                &pd.features,
                &pd.labels,
                chunk,
                &w,
                &b,
                c,
                Some((&mut dw, &mut db)),
            );
            let mut refs = vec![&mut w, &mut b];
            adam_step(&mut refs, &[dw, db], &names, &mut adam, lr, 0.9, 0.999, 1e-8)?;
        }

        let gate = if val_subset.is_empty() { train_subset } else { val_subset };
        let val_loss = cross_entropy_batch(&pd.features, &pd.labels, gate, &w, &b, c, None);
        let improved = best.as_ref().map(|(l, _, _)| val_loss < *l).unwrap_or(true);
        if improved {
            best = Some((val_loss, w.clone(), b.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, w, b) = best.expect("at least one epoch ran");
    Ok(LinearClassifier { weights: w, bias: b, n_classes: c })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Fraction of samples whose true label appears in the k highest-scoring
/// classes; score ties resolve by class index (stable).
pub fn top_k_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    assert!(!scores.is_empty());
    let mut hits = 0usize;
    for (row, &label) in scores.iter().zip(labels) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order.iter().take(k).any(|&c| c == label) {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// F1 of the positive class.
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    if tp == 0.0 {
        if fp == 0.0 && fn_ == 0.0 {
            return 1.0;
        }
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}

/// Area under the ROC curve by trapezoidal integration over the threshold
/// sweep; equal scores move as one group (ties count half), and any strictly
/// increasing transform of the scores leaves the value unchanged.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        // Trapezoid across the tie group.
        let tpr0 = tp as f64 / pos as f64;
        let tpr1 = (tp + dtp) as f64 / pos as f64;
        let dfpr = dfp as f64 / neg as f64;
        auc += 0.5 * (tpr0 + tpr1) * dfpr;
        tp += dtp;
        fp += dfp;
        i = j;
    }
    let _ = fp;
    auc
}

/// One diffable metrics line: task, model, CS (or '-'), budget, metric, value.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricLine {
    pub task: String,
    pub model: String,
    pub codebook_size: Option<usize>,
    pub budget: f64,
    pub metric: String,
    pub value: f64,
}

impl MetricLine {
    pub fn line(&self) -> String {
        let cs = match self.codebook_size {
            Some(c) => c.to_string(),
            None => "-".to_string(),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}",
            self.task, self.model, cs, self.budget, self.metric, self.value
        )
    }
}

/// Beam-task metrics: top-1 and top-3 accuracy on the given subset.
pub fn beam_metrics(
    clf: &LinearClassifier,
    pd: &ProbeDataset,
    subset: &[usize],
    model: &str,
    codebook_size: usize,
    budget: f64,
) -> Vec<MetricLine> {
    let scores: Vec<Vec<f64>> = subset.iter().map(|&i| clf.scores(&pd.features[i])).collect();
    let labels: Vec<usize> = subset.iter().map(|&i| pd.labels[i]).collect();
    let make = |metric: &str, value: f64| MetricLine {
        task: "beam".into(),
        model: model.into(),
        codebook_size: Some(codebook_size),
        budget,
        metric: metric.into(),
        value,
    };
    vec![
        make("top1", top_k_accuracy(&scores, &labels, 1)),
        make("top3", top_k_accuracy(&scores, &labels, 3)),
    ]
}

/// LoS-task metrics: accuracy, positive-class F1, and ROC AUC.
pub fn los_metrics(
    clf: &LinearClassifier,
    pd: &ProbeDataset,
    subset: &[usize],
    model: &str,
    budget: f64,
) -> Vec<MetricLine> {
    let mut predictions = Vec::with_capacity(subset.len());
    let mut pos_scores = Vec::with_capacity(subset.len());
    let mut labels = Vec::with_capacity(subset.len());
    for &i in subset {
        let s = clf.scores(&pd.features[i]);
        predictions.push(s[1] > s[0]);
        pos_scores.push(s[1] - s[0]);
        labels.push(pd.labels[i] == 1);
    }
    let preds_usize: Vec<usize> = predictions.iter().map(|&p| p as usize).collect();
    let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let make = |metric: &str, value: f64| MetricLine {
        task: "los".into(),
        model: model.into(),
        codebook_size: None,
        budget,
        metric: metric.into(),
        value,
    };
    vec![
        make("accuracy", accuracy(&preds_usize, &labels_usize)),
        make("f1", f1_score(&predictions, &labels)),
        make("auc", roc_auc(&pos_scores, &labels)),
    ]
}

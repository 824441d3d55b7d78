//! Transformer encoder-decoder over channel patch tokens, with an optional
//! contrastive projection head.
//!
//! The encoder consumes only visible tokens; the decoder restores the full
//! sequence by placing encoder outputs at their original positions and a
//! shared learnable mask token everywhere else. Post-norm residual layers:
//! `LN(MHSA(x) + x)` then `LN(MLP(.) + .)`, GELU in the MLP, per-head
//! projection weights with head i owning columns [i*d_h, (i+1)*d_h) of the
//! concatenated attention output. Biases are single rows broadcast over
//! tokens, so parameter shapes are independent of the visible count.

pub mod checkpoint;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::patchpipe::{PatchConfig, VisibleSequence};
use crate::seeding::{mix2, rng_from, SALT_HEAD_INIT, SALT_INIT};

/// Layer-norm epsilon, fixed for checkpoint compatibility.
pub const LN_EPS: f64 = 1e-5;
/// Weight init scale.
const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_e: usize,
    pub l_enc: usize,
    pub l_dec: usize,
    pub m_enc: usize,
    pub m_dec: usize,
    pub d_c: usize,
    pub contrastive_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_e: 64,
            l_enc: 12,
            l_dec: 4,
            m_enc: 16,
            m_dec: 8,
            d_c: 64,
            contrastive_enabled: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 {
            return Err(Error::config("embedding width must be positive"));
        }
        if self.l_enc == 0 || self.l_dec == 0 {
            return Err(Error::config("encoder and decoder must have at least one layer"));
        }
        if self.m_enc == 0 || self.d_e % self.m_enc != 0 {
            return Err(Error::config(format!(
                "d_e {} must divide evenly over {} encoder heads",
                self.d_e, self.m_enc
            )));
        }
        if self.m_dec == 0 || self.d_e % self.m_dec != 0 {
            return Err(Error::config(format!(
                "d_e {} must divide evenly over {} decoder heads",
                self.d_e, self.m_dec
            )));
        }
        if self.d_c == 0 {
            return Err(Error::config("contrastive width must be positive"));
        }
        Ok(())
    }
}

/// Token geometry shared by model and preprocessing: patch length and count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeometry {
    pub d_p: usize,
    pub k: usize,
}

impl TokenGeometry {
    pub fn derive(pc: &PatchConfig, n_s: usize, n_f: usize) -> Result<Self> {
        Ok(TokenGeometry { d_p: pc.patch_dim(), k: pc.num_patches(n_s, n_f)? })
    }

    pub fn total_tokens(&self) -> usize {
        2 * self.k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub w0: Tensor,
    pub b0: Tensor,
    pub pe_enc: Tensor,
    pub enc_layers: Vec<LayerParams>,
    pub mask_token: Tensor,
    pub pe_dec: Tensor,
    pub dec_layers: Vec<LayerParams>,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub contrastive: Option<ContrastiveParams>,
}

fn init_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z * INIT_STD
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

fn init_layer<R: Rng>(rng: &mut R, d_e: usize, heads: usize) -> LayerParams {
    let d_h = d_e / heads;
    let heads = (0..heads)
        .map(|_| HeadParams {
            wq: init_matrix(rng, d_e, d_h),
            bq: Tensor::zeros(vec![d_h]),
            wk: init_matrix(rng, d_e, d_h),
            bk: Tensor::zeros(vec![d_h]),
            wv: init_matrix(rng, d_e, d_h),
            bv: Tensor::zeros(vec![d_h]),
        })
        .collect();
    LayerParams {
        heads,
        wo: init_matrix(rng, d_e, d_e),
        bo: Tensor::zeros(vec![d_e]),
        ln1_gain: Tensor::new(vec![d_e], vec![1.0; d_e]).unwrap(),
        ln1_bias: Tensor::zeros(vec![d_e]),
        w1: init_matrix(rng, d_e, 2 * d_e),
        b1: Tensor::zeros(vec![2 * d_e]),
        w2: init_matrix(rng, 2 * d_e, d_e),
        b2: Tensor::zeros(vec![d_e]),
        ln2_gain: Tensor::new(vec![d_e], vec![1.0; d_e]).unwrap(),
        ln2_bias: Tensor::zeros(vec![d_e]),
    }
}

impl ModelParams {
    /// Seeded initialization: weights N(0, 0.02^2); biases, positional
    /// encodings, and the mask token start at zero; layer-norm gains at one.
    pub fn init(cfg: &ModelConfig, geo: &TokenGeometry, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(mix2(seed, SALT_INIT));
        let params = ModelParams {
            w0: init_matrix(&mut rng, geo.d_p, cfg.d_e),
            b0: Tensor::zeros(vec![cfg.d_e]),
            pe_enc: Tensor::zeros(vec![geo.total_tokens(), cfg.d_e]),
            enc_layers: (0..cfg.l_enc).map(|_| init_layer(&mut rng, cfg.d_e, cfg.m_enc)).collect(),
            mask_token: Tensor::zeros(vec![cfg.d_e]),
            pe_dec: Tensor::zeros(vec![geo.total_tokens(), cfg.d_e]),
            dec_layers: (0..cfg.l_dec).map(|_| init_layer(&mut rng, cfg.d_e, cfg.m_dec)).collect(),
            w_out: init_matrix(&mut rng, cfg.d_e, geo.d_p),
            b_out: Tensor::zeros(vec![geo.d_p]),
            contrastive: if cfg.contrastive_enabled {
                Some(init_contrastive_head(cfg, seed))
            } else {
                None
            },
        };
        Ok(params)
    }

    /// Uniform(-scale, scale) everywhere except layer-norm gains, which stay
    /// near one. Gradient diagnostics use this: the training init's tiny
    /// weight scale conditions layer norm so sharply that finite differences
    /// lose accuracy to truncation.
    pub fn init_uniform(cfg: &ModelConfig, geo: &TokenGeometry, seed: u64, scale: f64) -> Result<Self> {
        let mut params = Self::init(cfg, geo, seed)?;
        let mut rng = rng_from(mix2(seed, SALT_INIT ^ 0xa5a5));
        for (i, tensor) in params.tensors_mut().into_iter().enumerate() {
            let _ = i;
            for v in tensor.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        for layer in params.enc_layers.iter_mut().chain(params.dec_layers.iter_mut()) {
            for gain in [&mut layer.ln1_gain, &mut layer.ln2_gain] {
                for v in gain.data_mut() {
                    *v = rng.gen_range(0.75..1.25);
                }
            }
        }
        Ok(params)
    }

    /// Canonical (name, tensor) walk; checkpoint layout, optimizer state and
    /// tape binding all follow this order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embed.w0".into(), &self.w0));
        out.push(("embed.b0".into(), &self.b0));
        out.push(("pe.enc".into(), &self.pe_enc));
        for (l, layer) in self.enc_layers.iter().enumerate() {
            push_layer(&mut out, &format!("enc.{l}"), layer);
        }
        out.push(("mask_token".into(), &self.mask_token));
        out.push(("pe.dec".into(), &self.pe_dec));
        for (l, layer) in self.dec_layers.iter().enumerate() {
            push_layer(&mut out, &format!("dec.{l}"), layer);
        }
        out.push(("out.w".into(), &self.w_out));
        out.push(("out.b".into(), &self.b_out));
        if let Some(c) = &self.contrastive {
            out.push(("contra.w1".into(), &c.w1));
            out.push(("contra.b1".into(), &c.b1));
            out.push(("contra.w2".into(), &c.w2));
            out.push(("contra.b2".into(), &c.b2));
        }
        out
    }

    /// Mutable tensors in the same canonical order as [`Self::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.w0);
        out.push(&mut self.b0);
        out.push(&mut self.pe_enc);
        for layer in self.enc_layers.iter_mut() {
            push_layer_mut(&mut out, layer);
        }
        out.push(&mut self.mask_token);
        out.push(&mut self.pe_dec);
        for layer in self.dec_layers.iter_mut() {
            push_layer_mut(&mut out, layer);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        if let Some(c) = &mut self.contrastive {
            out.push(&mut c.w1);
            out.push(&mut c.b1);
            out.push(&mut c.w2);
            out.push(&mut c.b2);
        }
        out
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn push_layer<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, layer: &'a LayerParams) {
    for (h, head) in layer.heads.iter().enumerate() {
        out.push((format!("{prefix}.head{h}.wq"), &head.wq));
        out.push((format!("{prefix}.head{h}.bq"), &head.bq));
        out.push((format!("{prefix}.head{h}.wk"), &head.wk));
        out.push((format!("{prefix}.head{h}.bk"), &head.bk));
        out.push((format!("{prefix}.head{h}.wv"), &head.wv));
        out.push((format!("{prefix}.head{h}.bv"), &head.bv));
    }
    out.push((format!("{prefix}.attn.wo"), &layer.wo));
    out.push((format!("{prefix}.attn.bo"), &layer.bo));
    out.push((format!("{prefix}.ln1.gain"), &layer.ln1_gain));
    out.push((format!("{prefix}.ln1.bias"), &layer.ln1_bias));
    out.push((format!("{prefix}.mlp.w1"), &layer.w1));
    out.push((format!("{prefix}.mlp.b1"), &layer.b1));
    out.push((format!("{prefix}.mlp.w2"), &layer.w2));
    out.push((format!("{prefix}.mlp.b2"), &layer.b2));
    out.push((format!("{prefix}.ln2.gain"), &layer.ln2_gain));
    out.push((format!("{prefix}.ln2.bias"), &layer.ln2_bias));
}

fn push_layer_mut<'a>(out: &mut Vec<&'a mut Tensor>, layer: &'a mut LayerParams) {
    for head in layer.heads.iter_mut() {
        out.push(&mut head.wq);
        out.push(&mut head.bq);
        out.push(&mut head.wk);
        out.push(&mut head.bk);
        out.push(&mut head.wv);
        out.push(&mut head.bv);
    }
    out.push(&mut layer.wo);
    out.push(&mut layer.bo);
    out.push(&mut layer.ln1_gain);
    out.push(&mut layer.ln1_bias);
    out.push(&mut layer.w1);
    out.push(&mut layer.b1);
    out.push(&mut layer.w2);
    out.push(&mut layer.b2);
    out.push(&mut layer.ln2_gain);
    out.push(&mut layer.ln2_bias);
}

/// Fresh contrastive head, seeded independently of the trunk so it can be
/// attached to warm-started weights.
pub fn init_contrastive_head(cfg: &ModelConfig, seed: u64) -> ContrastiveParams {
    let mut rng = rng_from(mix2(seed, SALT_HEAD_INIT));
    ContrastiveParams {
        w1: init_matrix(&mut rng, cfg.d_e, 2 * cfg.d_c),
        b1: Tensor::zeros(vec![2 * cfg.d_c]),
        w2: init_matrix(&mut rng, 2 * cfg.d_c, cfg.d_c),
        b2: Tensor::zeros(vec![cfg.d_c]),
    }
}

// ---------------------------------------------------------------------------
// Tape binding and forward passes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BoundHead {
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    heads: Vec<BoundHead>,
    wo: NodeId,
    bo: NodeId,
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
}

#[derive(Clone, Debug)]
pub struct BoundContrastive {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// Model parameters registered as tape leaves, one NodeId per tensor, in
/// canonical order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub w0: NodeId,
    pub b0: NodeId,
    pub pe_enc: NodeId,
    pub enc_layers: Vec<BoundLayer>,
    pub mask_token: NodeId,
    pub pe_dec: NodeId,
    pub dec_layers: Vec<BoundLayer>,
    pub w_out: NodeId,
    pub b_out: NodeId,
    pub contrastive: Option<BoundContrastive>,
    flat: Vec<NodeId>,
}

impl BoundParams {
    /// NodeIds aligned with [`ModelParams::named`] order.
    pub fn flat_ids(&self) -> &[NodeId] {
        &self.flat
    }
}

fn bind_one(tape: &mut Tape, t: &Tensor, flat: &mut Vec<NodeId>) -> NodeId {
    let id = tape.leaf(t.clone());
    flat.push(id);
    id
}

fn bind_layer(tape: &mut Tape, layer: &LayerParams, flat: &mut Vec<NodeId>) -> BoundLayer {
    let heads = layer
        .heads
        .iter()
        .map(|h| BoundHead {
            wq: bind_one(tape, &h.wq, flat),
            bq: bind_one(tape, &h.bq, flat),
            wk: bind_one(tape, &h.wk, flat),
            bk: bind_one(tape, &h.bk, flat),
            wv: bind_one(tape, &h.wv, flat),
            bv: bind_one(tape, &h.bv, flat),
        })
        .collect();
    BoundLayer {
        heads,
        wo: bind_one(tape, &layer.wo, flat),
        bo: bind_one(tape, &layer.bo, flat),
        ln1_gain: bind_one(tape, &layer.ln1_gain, flat),
        ln1_bias: bind_one(tape, &layer.ln1_bias, flat),
        w1: bind_one(tape, &layer.w1, flat),
        b1: bind_one(tape, &layer.b1, flat),
        w2: bind_one(tape, &layer.w2, flat),
        b2: bind_one(tape, &layer.b2, flat),
        ln2_gain: bind_one(tape, &layer.ln2_gain, flat),
        ln2_bias: bind_one(tape, &layer.ln2_bias, flat),
    }
}

/// Registers every parameter tensor on the tape.
pub fn bind_params(tape: &mut Tape, params: &ModelParams) -> BoundParams {
    let mut flat = Vec::new();
    let w0 = bind_one(tape, &params.w0, &mut flat);
    let b0 = bind_one(tape, &params.b0, &mut flat);
    let pe_enc = bind_one(tape, &params.pe_enc, &mut flat);
    let enc_layers = params.enc_layers.iter().map(|l| bind_layer(tape, l, &mut flat)).collect();
    let mask_token = bind_one(tape, &params.mask_token, &mut flat);
    let pe_dec = bind_one(tape, &params.pe_dec, &mut flat);
    let dec_layers = params.dec_layers.iter().map(|l| bind_layer(tape, l, &mut flat)).collect();
    let w_out = bind_one(tape, &params.w_out, &mut flat);
    let b_out = bind_one(tape, &params.b_out, &mut flat);
    let contrastive = params.contrastive.as_ref().map(|c| BoundContrastive {
        w1: bind_one(tape, &c.w1, &mut flat),
        b1: bind_one(tape, &c.b1, &mut flat),
        w2: bind_one(tape, &c.w2, &mut flat),
        b2: bind_one(tape, &c.b2, &mut flat),
    });
    BoundParams {
        w0,
        b0,
        pe_enc,
        enc_layers,
        mask_token,
        pe_dec,
        dec_layers,
        w_out,
        b_out,
        contrastive,
        flat,
    }
}

/// Token embedding: `P_v * W0 + B0 + PE_enc[I_v, :]`.
pub fn embed(tape: &mut Tape, bound: &BoundParams, visible: &VisibleSequence) -> Result<NodeId> {
    let p_v = tape.leaf(visible.tokens.clone());
    embed_from_node(tape, bound, p_v, &visible.token_indices)
}

/// Same as [`embed`] for an already-recorded token node.
pub fn embed_from_node(
    tape: &mut Tape,
    bound: &BoundParams,
    p_v: NodeId,
    token_indices: &[usize],
) -> Result<NodeId> {
    let z0 = tape.matmul(p_v, bound.w0)?;
    let z0 = tape.add_bias(z0, bound.b0)?;
    let pe = tape.gather_rows(bound.pe_enc, token_indices)?;
    tape.add(z0, pe)
}

fn transformer_layer(
    tape: &mut Tape,
    layer: &BoundLayer,
    x: NodeId,
    d_e: usize,
) -> Result<NodeId> {
    let d_h = d_e / layer.heads.len();
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let q = tape.matmul(x, head.wq)?;
        let q = tape.add_bias(q, head.bq)?;
        let k = tape.matmul(x, head.wk)?;
        let k = tape.add_bias(k, head.bk)?;
        let v = tape.matmul(x, head.wv)?;
        let v = tape.add_bias(v, head.bv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        head_outputs.push(tape.matmul(attn, v)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let mhsa = tape.matmul(concat, layer.wo)?;
    let mhsa = tape.add_bias(mhsa, layer.bo)?;

    let res1 = tape.add(mhsa, x)?;
    let z_mid = tape.layer_norm(res1, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;

    let h1 = tape.matmul(z_mid, layer.w1)?;
    let h1 = tape.add_bias(h1, layer.b1)?;
    let act = tape.gelu(h1);
    let h2 = tape.matmul(act, layer.w2)?;
    let mlp = tape.add_bias(h2, layer.b2)?;

    let res2 = tape.add(mlp, z_mid)?;
    tape.layer_norm(res2, layer.ln2_gain, layer.ln2_bias, LN_EPS)
}

fn run_stack(
    tape: &mut Tape,
    layers: &[BoundLayer],
    mut x: NodeId,
    d_e: usize,
    stack: &str,
) -> Result<NodeId> {
    for (l, layer) in layers.iter().enumerate() {
        x = transformer_layer(tape, layer, x, d_e)?;
        if !tape.value(x).all_finite() {
            return Err(Error::Numeric(format!("non-finite activation in {stack} layer {l}")));
        }
    }
    Ok(x)
}

/// Encoder stack over visible tokens.
pub fn encoder_forward(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, z: NodeId) -> Result<NodeId> {
    run_stack(tape, &bound.enc_layers, z, cfg.d_e, "encoder")
}

/// Restores the full 2K-token sequence: encoder rows at their original
/// positions, the shared mask token elsewhere, plus decoder positional
/// encodings.
pub fn decoder_restore(
    tape: &mut Tape,
    bound: &BoundParams,
    z_enc: NodeId,
    token_indices: &[usize],
    total_tokens: usize,
) -> Result<NodeId> {
    let full = tape.scatter_restore(z_enc, bound.mask_token, token_indices, total_tokens)?;
    tape.add(full, bound.pe_dec)
}

/// Decoder stack plus output projection to patch space.
pub fn decoder_forward(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, z_d: NodeId) -> Result<NodeId> {
    let z = run_stack(tape, &bound.dec_layers, z_d, cfg.d_e, "decoder")?;
    let p = tape.matmul(z, bound.w_out)?;
    tape.add_bias(p, bound.b_out)
}

/// Mean-pools the encoder output, projects through the two-layer ReLU MLP,
/// and L2-normalizes onto the unit sphere.
pub fn contrastive_embed(tape: &mut Tape, bound: &BoundParams, z_enc: NodeId) -> Result<NodeId> {
    let head = bound
        .contrastive
        .as_ref()
        .ok_or_else(|| Error::contract("contrastive head not enabled".to_string()))?;
    let mean = tape.mean_rows(z_enc)?;
    let h1 = tape.matmul(mean, head.w1)?;
    let h1 = tape.add_bias(h1, head.b1)?;
    let act = tape.relu(h1);
    let h2 = tape.matmul(act, head.w2)?;
    let u = tape.add_bias(h2, head.b2)?;

    let sq = tape.mul(u, u)?;
    let norm_sq = tape.sum_all(sq);
    let norm = tape.sqrt(norm_sq);
    if tape.value(norm).item() < 1e-12 {
        return Err(Error::Numeric("degenerate contrastive head output (norm < 1e-12)".to_string()));
    }
    let inv = tape.recip(norm);
    tape.mul_scalar(u, inv)
}

/// One sample's forward pass through whichever stages the caller needs.
pub struct ForwardOutput {
    pub z_enc: NodeId,
    pub p_pred: Option<NodeId>,
    pub z_c: Option<NodeId>,
}

pub fn forward_sample(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    visible: &VisibleSequence,
    total_tokens: usize,
    want_decoder: bool,
    want_contrastive: bool,
) -> Result<ForwardOutput> {
    let z0 = embed(tape, bound, visible)?;
    let z_enc = encoder_forward(tape, bound, cfg, z0)?;
    let p_pred = if want_decoder {
        let z_d = decoder_restore(tape, bound, z_enc, &visible.token_indices, total_tokens)?;
        Some(decoder_forward(tape, bound, cfg, z_d)?)
    } else {
        None
    };
    let z_c = if want_contrastive {
        Some(contrastive_embed(tape, bound, z_enc)?)
    } else {
        None
    };
    Ok(ForwardOutput { z_enc, p_pred, z_c })
}

// Re-export the patch-space inverse here since reconstruction consumers work
// through the model API.
pub use crate::patchpipe::reassemble;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexmat::ComplexMatrix;
    use crate::patchpipe::{patch_tokens, sample_mask, vectorize_visible, MaskPattern};
    use crate::seeding::rng_from;
    use num_complex::Complex64;
    use rand::Rng;

    fn tiny_config(contrastive: bool) -> (ModelConfig, PatchConfig, usize, usize) {
        let cfg = ModelConfig {
            d_e: 8,
            l_enc: 2,
            l_dec: 1,
            m_enc: 2,
            m_dec: 2,
            d_c: 4,
            contrastive_enabled: contrastive,
        };
        (cfg, PatchConfig { patch_rows: 1, patch_cols: 4 }, 2, 8) // K = 4, d_p = 4
    }

    fn random_channel(n_s: usize, n_f: usize, seed: u64) -> ComplexMatrix {
        let mut rng = rng_from(seed);
        let data = (0..n_s * n_f)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        ComplexMatrix::from_data(n_s, n_f, data).unwrap()
    }

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn config_rejects_zero_decoder_depth_and_bad_heads() {
        let (mut cfg, _, _, _) = tiny_config(false);
        cfg.l_dec = 0;
        assert!(cfg.validate().is_err());
        let (mut cfg, _, _, _) = tiny_config(false);
        cfg.m_enc = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embed_reduces_to_selected_pe_rows_when_projection_is_zero() {
        let (cfg, pc, n_s, n_f) = tiny_config(false);
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let mut params = ModelParams::init(&cfg, &geo, 0).unwrap();
        params.w0 = Tensor::zeros(vec![geo.d_p, cfg.d_e]);
        params.pe_enc = random_tensor(geo.total_tokens(), cfg.d_e, 5);

        let h = random_channel(n_s, n_f, 1);
        let mask = MaskPattern::from_visible(vec![true, false, true, false]).unwrap();
        let seq = vectorize_visible(&h, &pc, &mask).unwrap();

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let z = embed(&mut tape, &bound, &seq).unwrap();
        for (row, &tok) in seq.token_indices.iter().enumerate() {
            for c in 0..cfg.d_e {
                assert_eq!(tape.value(z).at(row, c), params.pe_enc.at(tok, c));
            }
        }
    }

    #[test]
    fn embed_is_identity_with_identity_projection_and_zero_pe() {
        // d_p == d_e here: patch (1,8) over a 1x8 grid leaves K = 1, d_p = 8.
        let cfg = ModelConfig {
            d_e: 8,
            l_enc: 1,
            l_dec: 1,
            m_enc: 2,
            m_dec: 2,
            d_c: 4,
            contrastive_enabled: false,
        };
        let pc = PatchConfig { patch_rows: 1, patch_cols: 8 };
        let geo = TokenGeometry::derive(&pc, 1, 8).unwrap();
        let mut params = ModelParams::init(&cfg, &geo, 0).unwrap();
        let mut eye = Tensor::zeros(vec![8, 8]);
        for i in 0..8 {
            eye.set(i, i, 1.0);
        }
        params.w0 = eye;
        params.pe_enc = Tensor::zeros(vec![geo.total_tokens(), cfg.d_e]);

        let h = random_channel(1, 8, 3);
        let mask = MaskPattern::from_visible(vec![true]).unwrap();
        let seq = vectorize_visible(&h, &pc, &mask).unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let z = embed(&mut tape, &bound, &seq).unwrap();
        assert_eq!(tape.value(z).data(), seq.tokens.data());
    }

    #[test]
    fn single_token_attention_ignores_query_and_key_weights() {
        // With one token the attention matrix is softmax of a 1x1 score, i.e.
        // exactly [[1]] no matter what the q/k projections produce.
        let (cfg, ..) = tiny_config(false);
        let geo = TokenGeometry { d_p: 4, k: 1 };
        let params_a = ModelParams::init(&cfg, &geo, 10).unwrap();
        let mut params_b = params_a.clone();
        for head in params_b.enc_layers[0].heads.iter_mut() {
            head.wq = random_tensor(cfg.d_e, cfg.d_e / cfg.m_enc, 77);
            head.wk = random_tensor(cfg.d_e, cfg.d_e / cfg.m_enc, 78);
        }
        let x = random_tensor(1, cfg.d_e, 9);
        let run = |params: &ModelParams| {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, params);
            let xn = tape.leaf(x.clone());
            let y = transformer_layer(&mut tape, &bound.enc_layers[0], xn, cfg.d_e).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(&params_a), run(&params_b));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let (cfg, ..) = tiny_config(false);
        let geo = TokenGeometry { d_p: 4, k: 4 };
        let params = ModelParams::init(&cfg, &geo, 21).unwrap();
        let tokens = 6;
        let z_in = random_tensor(tokens, cfg.d_e, 33);
        let perm = [4usize, 0, 5, 2, 1, 3];

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let zn = tape.leaf(input.clone());
            let out = encoder_forward(&mut tape, &bound, &cfg, zn).unwrap();
            tape.value(out).clone()
        };
        let base = run(&z_in);
        let mut permuted_in = Tensor::zeros(vec![tokens, cfg.d_e]);
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..cfg.d_e {
                permuted_in.set(r, c, z_in.at(p, c));
            }
        }
        let permuted_out = run(&permuted_in);
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..cfg.d_e {
                assert!(
                    (permuted_out.at(r, c) - base.at(p, c)).abs() < 1e-12,
                    "row {r} col {c}"
                );
            }
        }
    }

    #[test]
    fn one_layer_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            d_e: 8,
            l_enc: 1,
            l_dec: 1,
            m_enc: 2,
            m_dec: 2,
            d_c: 4,
            contrastive_enabled: false,
        };
        let pc = PatchConfig { patch_rows: 1, patch_cols: 4 };
        let geo = TokenGeometry::derive(&pc, 2, 8).unwrap();
        let base = ModelParams::init_uniform(&cfg, &geo, 3, 0.5).unwrap();
        let h = random_channel(2, 8, 8);
        let mask = MaskPattern::from_visible(vec![true, false, true, false]).unwrap();
        let seq = vectorize_visible(&h, &pc, &mask).unwrap();
        let weight = random_tensor(2 * mask.n_visible(), cfg.d_e, 55);

        let eval = |flat: &[Tensor]| -> crate::Result<(f64, Vec<Tensor>)> {
            let mut params = base.clone();
            for (slot, t) in params.tensors_mut().into_iter().zip(flat) {
                *slot = t.clone();
            }
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let z0 = embed(&mut tape, &bound, &seq)?;
            let z_enc = encoder_forward(&mut tape, &bound, &cfg, z0)?;
            let wn = tape.leaf(weight.clone());
            let prod = tape.mul(z_enc, wn)?;
            let loss = tape.sum_all(prod);
            let grads = tape.backward(loss)?;
            let flat_grads = bound.flat_ids().iter().map(|&id| grads.get(&tape, id)).collect();
            Ok((tape.value(loss).item(), flat_grads))
        };

        let names: Vec<String> = base.named().iter().map(|(n, _)| n.clone()).collect();
        let flat: Vec<Tensor> = base.named().iter().map(|(_, t)| (*t).clone()).collect();
        let (_, analytic) = eval(&flat).unwrap();
        let report = crate::numerics::finite_diff_check(
            &flat,
            &analytic,
            |p| eval(p).map(|(l, _)| l),
            1e-5,
            13,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            names[report.worst.0],
            report.worst.1
        );
    }

    #[test]
    fn decoder_restore_places_rows_like_the_index_oracle() {
        let (cfg, pc, n_s, n_f) = tiny_config(false);
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let mut params = ModelParams::init(&cfg, &geo, 4).unwrap();
        params.mask_token = Tensor::new(vec![cfg.d_e], (0..cfg.d_e).map(|i| i as f64).collect()).unwrap();
        params.pe_dec = random_tensor(geo.total_tokens(), cfg.d_e, 12);

        let mask = MaskPattern::from_visible(vec![false, true, true, false]).unwrap();
        let z_enc_val = random_tensor(2 * mask.n_visible(), cfg.d_e, 44);

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let z_enc = tape.leaf(z_enc_val.clone());
        let z_d = decoder_restore(&mut tape, &bound, z_enc, mask.token_indices(), geo.total_tokens()).unwrap();
        let out = tape.value(z_d);

        for i in 0..geo.total_tokens() {
            let visible_pos = mask.token_indices().iter().position(|&t| t == i);
            for c in 0..cfg.d_e {
                let want = match visible_pos {
                    Some(j) => z_enc_val.at(j, c) + params.pe_dec.at(i, c),
                    None => params.mask_token.data()[c] + params.pe_dec.at(i, c),
                };
                assert_eq!(out.at(i, c), want);
            }
        }
    }

    #[test]
    fn decoder_restore_with_full_visibility_has_no_mask_rows() {
        let (cfg, pc, n_s, n_f) = tiny_config(false);
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let mut params = ModelParams::init(&cfg, &geo, 4).unwrap();
        params.mask_token = Tensor::new(vec![cfg.d_e], vec![1e9; cfg.d_e]).unwrap();
        let mask = MaskPattern::from_visible(vec![true; geo.k]).unwrap();
        let z_enc_val = random_tensor(geo.total_tokens(), cfg.d_e, 2);

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let z_enc = tape.leaf(z_enc_val.clone());
        let z_d = decoder_restore(&mut tape, &bound, z_enc, mask.token_indices(), geo.total_tokens()).unwrap();
        for (got, want) in tape.value(z_d).data().iter().zip(
            z_enc_val
                .data()
                .iter()
                .zip(params.pe_dec.data())
                .map(|(a, b)| a + b),
        ) {
            assert_eq!(*got, want);
        }
    }

    #[test]
    fn all_but_one_masked_fills_remaining_rows_with_the_token() {
        let (cfg, pc, n_s, n_f) = tiny_config(false);
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let mut params = ModelParams::init(&cfg, &geo, 4).unwrap();
        params.mask_token = Tensor::new(vec![cfg.d_e], vec![0.5; cfg.d_e]).unwrap();
        let mask = MaskPattern::from_visible(vec![false, false, true, false]).unwrap();
        let z_enc_val = random_tensor(2, cfg.d_e, 3);

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let z_enc = tape.leaf(z_enc_val);
        let z_d = decoder_restore(&mut tape, &bound, z_enc, mask.token_indices(), geo.total_tokens()).unwrap();
        let mut mask_rows = 0;
        for i in 0..geo.total_tokens() {
            if !mask.token_indices().contains(&i) {
                mask_rows += 1;
                for c in 0..cfg.d_e {
                    assert_eq!(tape.value(z_d).at(i, c), 0.5 + params.pe_dec.at(i, c));
                }
            }
        }
        assert_eq!(mask_rows, 2 * geo.k - 2);
    }

    #[test]
    fn zero_output_projection_gives_constant_patch_predictions() {
        let (cfg, pc, n_s, n_f) = tiny_config(false);
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let mut params = ModelParams::init(&cfg, &geo, 6).unwrap();
        params.w_out = Tensor::zeros(vec![cfg.d_e, geo.d_p]);
        params.b_out = Tensor::new(vec![geo.d_p], vec![0.25; geo.d_p]).unwrap();

        let h = random_channel(n_s, n_f, 19);
        let mut rng = rng_from(77);
        let mask = sample_mask(geo.k, 0.5, &mut rng).unwrap();
        let seq = vectorize_visible(&h, &pc, &mask).unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let out = forward_sample(&mut tape, &bound, &cfg, &seq, geo.total_tokens(), true, false).unwrap();
        for &v in tape.value(out.p_pred.unwrap()).data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn decoder_output_reassembles_and_repartitions_exactly() {
        let (cfg, pc, n_s, n_f) = tiny_config(false);
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let params = ModelParams::init(&cfg, &geo, 6).unwrap();
        let h = random_channel(n_s, n_f, 20);
        let mut rng = rng_from(5);
        let mask = sample_mask(geo.k, 0.5, &mut rng).unwrap();
        let seq = vectorize_visible(&h, &pc, &mask).unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let out = forward_sample(&mut tape, &bound, &cfg, &seq, geo.total_tokens(), true, false).unwrap();
        let p_pred = tape.value(out.p_pred.unwrap()).clone();
        let h_hat = reassemble(&p_pred, &pc, n_s, n_f).unwrap();
        let back = patch_tokens(&h_hat, &pc).unwrap();
        assert_eq!(back.data(), p_pred.data());
    }

    #[test]
    fn contrastive_mean_pool_of_constant_rows_is_that_row() {
        let mut tape = Tape::new();
        let row: Vec<f64> = vec![0.3, -0.7, 1.1, 0.0];
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let z = tape.leaf(Tensor::matrix(5, 4, data).unwrap());
        let mean = tape.mean_rows(z).unwrap();
        for (a, b) in tape.value(mean).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn contrastive_normalization_matches_hand_case() {
        let (cfg, pc, n_s, n_f) = tiny_config(true);
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let mut params = ModelParams::init(&cfg, &geo, 7).unwrap();
        // Zero first projection: u = b2 exactly.
        let head = params.contrastive.as_mut().unwrap();
        head.w1 = Tensor::zeros(vec![cfg.d_e, 2 * cfg.d_c]);
        head.b1 = Tensor::zeros(vec![2 * cfg.d_c]);
        head.w2 = Tensor::zeros(vec![2 * cfg.d_c, cfg.d_c]);
        head.b2 = Tensor::new(vec![cfg.d_c], vec![3.0, 4.0, 0.0, 0.0]).unwrap();

        let h = random_channel(n_s, n_f, 30);
        let mask = MaskPattern::from_visible(vec![true, true, false, false]).unwrap();
        let seq = vectorize_visible(&h, &pc, &mask).unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let out = forward_sample(&mut tape, &bound, &cfg, &seq, geo.total_tokens(), false, true).unwrap();
        let zc = tape.value(out.z_c.unwrap());
        assert!((zc.data()[0] - 0.6).abs() < 1e-12);
        assert!((zc.data()[1] - 0.8).abs() < 1e-12);
        assert_eq!(zc.data()[2], 0.0);
        assert_eq!(zc.data()[3], 0.0);
    }

    #[test]
    fn contrastive_embeddings_live_on_the_unit_sphere() {
        let (mut cfg, pc, n_s, n_f) = tiny_config(true);
        // Wider head: at d_c = 4 a zero-bias ReLU stack can go fully dark on
        // unlucky inputs, which is the documented degenerate-head error.
        cfg.d_c = 16;
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let params = ModelParams::init(&cfg, &geo, 8).unwrap();
        let mut rng = rng_from(14);
        for trial in 0..100 {
            let h = random_channel(n_s, n_f, 1000 + trial);
            let mask = sample_mask(geo.k, 0.5, &mut rng).unwrap();
            let seq = vectorize_visible(&h, &pc, &mask).unwrap();
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let out = forward_sample(&mut tape, &bound, &cfg, &seq, geo.total_tokens(), false, true).unwrap();
            let norm: f64 = tape.value(out.z_c.unwrap()).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        }
    }

    #[test]
    fn degenerate_head_output_is_a_numeric_error() {
        let (cfg, pc, n_s, n_f) = tiny_config(true);
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let mut params = ModelParams::init(&cfg, &geo, 7).unwrap();
        let head = params.contrastive.as_mut().unwrap();
        head.w1 = Tensor::zeros(vec![cfg.d_e, 2 * cfg.d_c]);
        head.w2 = Tensor::zeros(vec![2 * cfg.d_c, cfg.d_c]);
        head.b1 = Tensor::zeros(vec![2 * cfg.d_c]);
        head.b2 = Tensor::zeros(vec![cfg.d_c]);

        let h = random_channel(n_s, n_f, 3);
        let mask = MaskPattern::from_visible(vec![true, true, true, true]).unwrap();
        let seq = vectorize_visible(&h, &pc, &mask).unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let err = forward_sample(&mut tape, &bound, &cfg, &seq, geo.total_tokens(), false, true);
        assert!(matches!(err, Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn masked_content_changes_leave_every_output_bit_identical() {
        let (cfg, pc, n_s, n_f) = tiny_config(true);
        let geo = TokenGeometry::derive(&pc, n_s, n_f).unwrap();
        let params = ModelParams::init(&cfg, &geo, 40).unwrap();
        let mask = MaskPattern::from_visible(vec![true, false, true, false]).unwrap();

        let h = random_channel(n_s, n_f, 50);
        let mut h_mut = h.clone();
        // Overwrite both masked patches (patches 1 and 3 cover columns 4..8
        // of rows 0 and 1 under the (1,4) patching).
        for (patch, row) in [(1usize, 0usize), (3, 1)] {
            let _ = patch;
            for c in 4..8 {
                h_mut.set(row, c, Complex64::new(1e6, -1e6));
            }
        }

        let run = |h: &ComplexMatrix| {
            let seq = vectorize_visible(h, &pc, &mask).unwrap();
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let out = forward_sample(&mut tape, &bound, &cfg, &seq, geo.total_tokens(), true, true).unwrap();
            (
                tape.value(out.z_enc).data().to_vec(),
                tape.value(out.p_pred.unwrap()).data().to_vec(),
                tape.value(out.z_c.unwrap()).data().to_vec(),
            )
        };
        let (z1, p1, c1) = run(&h);
        let (z2, p2, c2) = run(&h_mut);
        assert!(z1.iter().zip(&z2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(c1.iter().zip(&c2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn layer_matches_independent_reimplementation() {
        // Full layer oracle: recompute MHSA (head i owning concat columns
        // [i*d_h, (i+1)*d_h)), residuals, LN, and the GELU MLP with plain
        // loops, then compare against the recorded forward.
        let (cfg, ..) = tiny_config(false);
        let geo = TokenGeometry { d_p: 4, k: 4 };
        let params = ModelParams::init(&cfg, &geo, 61).unwrap();
        let layer = &params.enc_layers[0];
        let tokens = 5;
        let d_e = cfg.d_e;
        let d_h = d_e / cfg.m_enc;
        let x = random_tensor(tokens, d_e, 71);

        let matmul = crate::numerics::matmul_raw;
        let with_bias = |m: &Tensor, b: &Tensor| {
            let mut out = m.clone();
            for r in 0..out.rows() {
                for c in 0..out.cols() {
                    let v = out.at(r, c) + b.data()[c];
                    out.set(r, c, v);
                }
            }
            out
        };
        let ln = |m: &Tensor, gain: &Tensor, bias: &Tensor| {
            let mut out = m.clone();
            for r in 0..m.rows() {
                let row: Vec<f64> = (0..m.cols()).map(|c| m.at(r, c)).collect();
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for c in 0..m.cols() {
                    out.set(r, c, gain.data()[c] * (row[c] - mean) * inv + bias.data()[c]);
                }
            }
            out
        };

        let mut concat = Tensor::zeros(vec![tokens, d_e]);
        for (i, head) in layer.heads.iter().enumerate() {
            let q = with_bias(&matmul(&x, &head.wq).unwrap(), &head.bq);
            let k = with_bias(&matmul(&x, &head.wk).unwrap(), &head.bk);
            let v = with_bias(&matmul(&x, &head.wv).unwrap(), &head.bv);
            for r in 0..tokens {
                let mut scores: Vec<f64> = (0..tokens)
                    .map(|s| {
                        (0..d_h).map(|c| q.at(r, c) * k.at(s, c)).sum::<f64>() / (d_h as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for c in 0..d_h {
                    let mut acc = 0.0;
                    for s in 0..tokens {
                        acc += scores[s] / sum * v.at(s, c);
                    }
                    concat.set(r, i * d_h + c, acc);
                }
            }
        }
        let mhsa = with_bias(&matmul(&concat, &layer.wo).unwrap(), &layer.bo);
        let mut res1 = mhsa.clone();
        for i in 0..res1.numel() {
            res1.data_mut()[i] += x.data()[i];
        }
        let z_mid = ln(&res1, &layer.ln1_gain, &layer.ln1_bias);
        let h1 = with_bias(&matmul(&z_mid, &layer.w1).unwrap(), &layer.b1);
        let mut act = h1.clone();
        for v in act.data_mut() {
            *v *= crate::numerics::normal_cdf(*v);
        }
        let mlp = with_bias(&matmul(&act, &layer.w2).unwrap(), &layer.b2);
        let mut res2 = mlp.clone();
        for i in 0..res2.numel() {
            res2.data_mut()[i] += z_mid.data()[i];
        }
        let want = ln(&res2, &layer.ln2_gain, &layer.ln2_bias);

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let xn = tape.leaf(x.clone());
        let got = transformer_layer(&mut tape, &bound.enc_layers[0], xn, d_e).unwrap();
        assert!(tape.value(got).max_abs_diff(&want) < 1e-12);
    }
}

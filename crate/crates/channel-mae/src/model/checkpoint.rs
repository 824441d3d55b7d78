//! Versioned binary checkpoint shared by the plain and contrastive models.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "WMAE" | u32 version=1 | u32 flags (bit0 = contrastive head present)
//! u32 config block length | UTF-8 "key=value\n" lines, keys sorted
//! f64 normalization_std
//! u32 tensor count
//! per tensor: u32 name length | name | u8 dtype (0=f32, 1=f64)
//!             u32 rank | rank x u64 dims | raw element data
//! ```
//!
//! Tensors appear in the model's canonical order; loading validates the
//! full name/shape sequence against the config before accepting any data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bytesio::Reader;
use crate::error::{Error, Result};
use crate::model::{init_contrastive_head, ModelConfig, ModelParams, TokenGeometry};
use crate::numerics::Tensor;
use crate::patchpipe::PatchConfig;

pub const MAGIC: &[u8; 4] = b"WMAE";
pub const VERSION: u32 = 1;
const FLAG_CONTRASTIVE: u32 = 1;

/// Element storage for checkpoint tensors. Training state is always f64;
/// f32 halves file size at ~1e-7 relative rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Everything needed to rebuild the model around the tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub patch: PatchConfig,
    pub n_s: usize,
    pub n_f: usize,
    pub normalization_std: f64,
}

impl CheckpointMeta {
    pub fn geometry(&self) -> Result<TokenGeometry> {
        TokenGeometry::derive(&self.patch, self.n_s, self.n_f)
    }

    fn config_block(&self) -> String {
        let geo = self.geometry().expect("meta validated before encode");
        // Keys listed in sorted order.
        format!(
            "contrastive={}\nd_c={}\nd_e={}\nd_p={}\nk={}\nl_dec={}\nl_enc={}\nm_dec={}\nm_enc={}\nn_f={}\nn_s={}\npatch_cols={}\npatch_rows={}\n",
            self.model.contrastive_enabled as u32,
            self.model.d_c,
            self.model.d_e,
            geo.d_p,
            geo.k,
            self.model.l_dec,
            self.model.l_enc,
            self.model.m_dec,
            self.model.m_enc,
            self.n_f,
            self.n_s,
            self.patch.patch_cols,
            self.patch.patch_rows,
        )
    }

    fn from_config_block(text: &str) -> Result<Self> {
        let mut map: BTreeMap<&str, u64> = BTreeMap::new();
        for line in text.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("config line without '=': {line:?}")))?;
            let value: u64 = value
                .parse()
                .map_err(|_| Error::format(format!("non-integer config value: {line:?}")))?;
            if map.insert(key, value).is_some() {
                return Err(Error::format(format!("duplicate config key {key}")));
            }
        }
        let mut get = |key: &str| -> Result<u64> {
            map.remove(key).ok_or_else(|| Error::format(format!("missing config key {key}")))
        };
        let meta = CheckpointMeta {
            model: ModelConfig {
                contrastive_enabled: get("contrastive")? != 0,
                d_c: get("d_c")? as usize,
                d_e: get("d_e")? as usize,
                l_dec: 0, // filled below in key order
                l_enc: 0,
                m_dec: 0,
                m_enc: 0,
            },
            patch: PatchConfig { patch_rows: 0, patch_cols: 0 },
            n_s: 0,
            n_f: 0,
            normalization_std: 0.0,
        };
        let d_p = get("d_p")? as usize;
        let k = get("k")? as usize;
        let mut meta = meta;
        meta.model.l_dec = get("l_dec")? as usize;
        meta.model.l_enc = get("l_enc")? as usize;
        meta.model.m_dec = get("m_dec")? as usize;
        meta.model.m_enc = get("m_enc")? as usize;
        meta.n_f = get("n_f")? as usize;
        meta.n_s = get("n_s")? as usize;
        meta.patch.patch_cols = get("patch_cols")? as usize;
        meta.patch.patch_rows = get("patch_rows")? as usize;
        if let Some((key, _)) = map.into_iter().next() {
            return Err(Error::format(format!("unknown config key {key}")));
        }
        meta.model.validate().map_err(|e| Error::format(e.to_string()))?;
        let geo = meta.geometry().map_err(|e| Error::format(e.to_string()))?;
        if geo.d_p != d_p || geo.k != k {
            return Err(Error::format(format!(
                "config claims d_p={d_p}, k={k} but geometry gives d_p={}, k={}",
                geo.d_p, geo.k
            )));
        }
        Ok(meta)
    }
}

pub fn encode(params: &ModelParams, meta: &CheckpointMeta, dtype: Dtype) -> Result<Vec<u8>> {
    if params.contrastive.is_some() != meta.model.contrastive_enabled {
        return Err(Error::contract(
            "params and meta disagree about the contrastive head".to_string(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if meta.model.contrastive_enabled { FLAG_CONTRASTIVE } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    let config = meta.config_block();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&meta.normalization_std.to_le_bytes());

    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match dtype {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        });
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// All-zero parameter skeleton for a config; gives the expected canonical
/// name/shape sequence.
fn zeros_like_config(cfg: &ModelConfig, geo: &TokenGeometry) -> ModelParams {
    let layer = |heads: usize| {
        let d_h = cfg.d_e / heads;
        crate::model::LayerParams {
            heads: (0..heads)
                .map(|_| crate::model::HeadParams {
                    wq: Tensor::zeros(vec![cfg.d_e, d_h]),
                    bq: Tensor::zeros(vec![d_h]),
                    wk: Tensor::zeros(vec![cfg.d_e, d_h]),
                    bk: Tensor::zeros(vec![d_h]),
                    wv: Tensor::zeros(vec![cfg.d_e, d_h]),
                    bv: Tensor::zeros(vec![d_h]),
                })
                .collect(),
            wo: Tensor::zeros(vec![cfg.d_e, cfg.d_e]),
            bo: Tensor::zeros(vec![cfg.d_e]),
            ln1_gain: Tensor::zeros(vec![cfg.d_e]),
            ln1_bias: Tensor::zeros(vec![cfg.d_e]),
            w1: Tensor::zeros(vec![cfg.d_e, 2 * cfg.d_e]),
            b1: Tensor::zeros(vec![2 * cfg.d_e]),
            w2: Tensor::zeros(vec![2 * cfg.d_e, cfg.d_e]),
            b2: Tensor::zeros(vec![cfg.d_e]),
            ln2_gain: Tensor::zeros(vec![cfg.d_e]),
            ln2_bias: Tensor::zeros(vec![cfg.d_e]),
        }
    };
    ModelParams {
        w0: Tensor::zeros(vec![geo.d_p, cfg.d_e]),
        b0: Tensor::zeros(vec![cfg.d_e]),
        pe_enc: Tensor::zeros(vec![geo.total_tokens(), cfg.d_e]),
        enc_layers: (0..cfg.l_enc).map(|_| layer(cfg.m_enc)).collect(),
        mask_token: Tensor::zeros(vec![cfg.d_e]),
        pe_dec: Tensor::zeros(vec![geo.total_tokens(), cfg.d_e]),
        dec_layers: (0..cfg.l_dec).map(|_| layer(cfg.m_dec)).collect(),
        w_out: Tensor::zeros(vec![cfg.d_e, geo.d_p]),
        b_out: Tensor::zeros(vec![geo.d_p]),
        contrastive: if cfg.contrastive_enabled {
            Some(crate::model::ContrastiveParams {
                w1: Tensor::zeros(vec![cfg.d_e, 2 * cfg.d_c]),
                b1: Tensor::zeros(vec![2 * cfg.d_c]),
                w2: Tensor::zeros(vec![2 * cfg.d_c, cfg.d_c]),
                b2: Tensor::zeros(vec![cfg.d_c]),
            })
        } else {
            None
        },
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let flags = r.u32("flags")?;
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config block")?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::format("config block is not UTF-8".to_string()))?;
    let mut meta = CheckpointMeta::from_config_block(config_text)?;
    meta.normalization_std = r.f64("normalization std")?;

    let head_present = flags & FLAG_CONTRASTIVE != 0;
    if head_present != meta.model.contrastive_enabled {
        return Err(Error::format(
            "flags and config disagree about the contrastive head".to_string(),
        ));
    }

    let geo = meta.geometry().map_err(|e| Error::format(e.to_string()))?;
    let mut params = zeros_like_config(&meta.model, &geo);
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();

    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::format(format!(
            "checkpoint holds {count} tensors, config requires {}",
            expected.len()
        )));
    }
    let mut loaded: Vec<Tensor> = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let name_len = r.u32("tensor name length")? as usize;
        let got_name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::format("tensor name is not UTF-8".to_string()))?;
        if got_name != name {
            return Err(Error::format(format!(
                "tensor name {got_name:?} out of order, expected {name:?}"
            )));
        }
        let dtype = match r.u8("dtype")? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            v => return Err(Error::format(format!("unknown dtype {v}"))),
        };
        let rank = r.u32("rank")? as usize;
        if rank != shape.len() {
            return Err(Error::format(format!(
                "tensor {name}: rank {rank}, expected {}",
                shape.len()
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dim")? as usize);
        }
        if dims != *shape {
            return Err(Error::format(format!(
                "tensor {name}: shape {dims:?}, expected {shape:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        let data = match dtype {
            Dtype::F32 => r
                .take(numel * 4, "tensor data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => r
                .take(numel * 8, "tensor data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        loaded.push(Tensor::new(dims, data)?);
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes", r.remaining())));
    }
    for (slot, tensor) in params.tensors_mut().into_iter().zip(loaded) {
        *slot = tensor;
    }
    Ok((params, meta))
}

pub fn save(params: &ModelParams, meta: &CheckpointMeta, dtype: Dtype, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params, meta, dtype)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint for contrastive training. A file without a head gets a
/// fresh seeded head attached; shared tensors are copied exactly either way.
pub fn load_warm_start(path: &Path, head_seed: u64) -> Result<(ModelParams, CheckpointMeta)> {
    let (mut params, mut meta) = load(path)?;
    if params.contrastive.is_none() {
        meta.model.contrastive_enabled = true;
        params.contrastive = Some(init_contrastive_head(&meta.model, head_seed));
    }
    Ok((params, meta))
}

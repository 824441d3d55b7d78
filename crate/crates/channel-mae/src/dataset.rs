//! Binary channel-dataset container and deterministic split assignment.
//!
//! File layout (all little-endian):
//!
//! ```text
//! magic "WCHD" | u32 version=1 | u32 record count | u32 N_s | u32 N_f
//! f64 normalization_std
//! per record: u64 seed | u32 scenario_id | u8 los
//!             h_low  as N_s*N_f (f32 re, f32 im) row-major
//!             h_high as N_s*N_f (f32 re, f32 im) row-major
//! ```
//!
//! Split membership is not stored: it is a pure function of the record seeds
//! and the requested ratios, so any consumer reconstructs identical splits.

use std::path::Path;

use num_complex::Complex64;

use crate::chansynth::ChannelSample;
use crate::complexmat::ComplexMatrix;
use crate::error::{Error, Result};
use crate::seeding::{mix2, SALT_SPLIT};

pub const MAGIC: &[u8; 4] = b"WCHD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub n_s: usize,
    pub n_f: usize,
    /// Global std over real+imag entries of the training split's low-band
    /// channels, fixed at generation time.
    pub normalization_std: f64,
    pub records: Vec<ChannelSample>,
}

/// Byte size of one record for the given geometry.
fn record_size(n_s: usize, n_f: usize) -> Option<usize> {
    let complexes = n_s.checked_mul(n_f)?;
    let matrix_bytes = complexes.checked_mul(8)?;
    Some(8 + 4 + 1 + 2 * matrix_bytes)
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.n_s as u32).to_le_bytes());
    out.extend_from_slice(&(ds.n_f as u32).to_le_bytes());
    out.extend_from_slice(&ds.normalization_std.to_le_bytes());
    for rec in &ds.records {
        out.extend_from_slice(&rec.seed.to_le_bytes());
        out.extend_from_slice(&rec.scenario_id.to_le_bytes());
        out.push(rec.los as u8);
        for m in [&rec.h_low, &rec.h_high] {
            for v in m.data() {
                out.extend_from_slice(&(v.re as f32).to_le_bytes());
                out.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = crate::bytesio::Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")? as usize;
    let n_s = r.u32("antenna count")? as usize;
    let n_f = r.u32("subcarrier count")? as usize;
    let normalization_std = r.f64("normalization std")?;
    if n_s == 0 || n_f == 0 {
        return Err(Error::format(format!("degenerate geometry {n_s}x{n_f}")));
    }
    let rec_size = record_size(n_s, n_f)
        .ok_or_else(|| Error::format(format!("geometry {n_s}x{n_f} overflows record size")))?;
    let remaining = r.remaining();
    let expected = count
        .checked_mul(rec_size)
        .ok_or_else(|| Error::format("record count overflows file size".to_string()))?;
    if remaining != expected {
        return Err(Error::format(format!(
            "payload is {remaining} bytes, expected {expected} for {count} records"
        )));
    }

    let complexes = n_s * n_f;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let seed = r.u64("record seed")?;
        let scenario_id = r.u32("scenario id")?;
        let los = match r.u8("los flag")? {
            0 => false,
            1 => true,
            v => return Err(Error::format(format!("los flag must be 0 or 1, got {v}"))),
        };
        let mut mats = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut data = Vec::with_capacity(complexes);
            let raw = r.take(complexes * 8, "channel matrix")?;
            for chunk in raw.chunks_exact(8) {
                let re = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
                let im = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
                data.push(Complex64::new(re, im));
            }
            mats.push(ComplexMatrix::from_data(n_s, n_f, data)?);
        }
        let h_high = mats.pop().unwrap();
        let h_low = mats.pop().unwrap();
        records.push(ChannelSample { h_low, h_high, los, seed, scenario_id });
    }
    Ok(Dataset { n_s, n_f, normalization_std, records })
}

pub fn write(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ds)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Deterministic split assignment: records ranked by a hash of their seed are
/// dealt to splits in order, with largest-remainder rounding making the split
/// sizes exact.
pub fn split_indices(seeds: &[u64], ratios: &[f64]) -> Result<Vec<Vec<usize>>> {
    if ratios.is_empty() {
        return Err(Error::contract("at least one split ratio required".to_string()));
    }
    if ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::contract("split ratios must be nonnegative".to_string()));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split ratios must sum to 1, got {total}")));
    }

    let n = seeds.len();
    let mut targets: Vec<usize> = ratios.iter().map(|r| (r * n as f64).floor() as usize).collect();
    let assigned: usize = targets.iter().sum();
    let mut fracs: Vec<(f64, usize)> = ratios
        .iter()
        .enumerate()
        .map(|(i, r)| (r * n as f64 - targets[i] as f64, i))
        .collect();
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..n - assigned {
        targets[fracs[k % fracs.len()].1] += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (mix2(SALT_SPLIT, seeds[i]), i));

    let mut out: Vec<Vec<usize>> = ratios.iter().map(|_| Vec::new()).collect();
    let mut cursor = 0;
    for (s, t) in targets.iter().enumerate() {
        let mut members: Vec<usize> = order[cursor..cursor + t].to_vec();
        members.sort_unstable();
        out[s] = members;
        cursor += t;
    }
    Ok(out)
}

/// Population std over real+imag parts of the given records' low-band
/// channels, at stored (f32) precision.
pub fn normalization_std(records: &[ChannelSample], idx: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for &i in idx {
        for v in records[i].h_low.data() {
            for part in [v.re as f32 as f64, v.im as f32 as f64] {
                sum += part;
                sum_sq += part * part;
                n += 1;
            }
        }
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    (sum_sq / n as f64 - mean * mean).max(0.0).sqrt()
}

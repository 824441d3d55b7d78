//! Deterministic preprocessing: patch partitioning, mask sampling, and
//! real/imaginary token construction.
//!
//! A channel matrix splits into K non-overlapping patches in row-major grid
//! order; each patch contributes two tokens (flattened real part, flattened
//! imaginary part), so token index k < K is the real component of patch k and
//! token K + k its imaginary component. Masking hides whole complex patches:
//! both components of a patch always share mask status.

use rand::Rng;

use crate::complexmat::ComplexMatrix;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Patch geometry; the channel grid must tile exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_rows: usize,
    pub patch_cols: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { patch_rows: 1, patch_cols: 16 }
    }
}

impl PatchConfig {
    /// Flattened patch length d_p.
    pub fn patch_dim(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn validate_for(&self, n_s: usize, n_f: usize) -> Result<()> {
        if self.patch_rows == 0 || self.patch_cols == 0 {
            return Err(Error::config("patch dimensions must be positive"));
        }
        if n_s % self.patch_rows != 0 || n_f % self.patch_cols != 0 {
            return Err(Error::config(format!(
                "channel {n_s}x{n_f} not divisible by patch {}x{}",
                self.patch_rows, self.patch_cols
            )));
        }
        Ok(())
    }

    /// Total patch count K for the given channel geometry.
    pub fn num_patches(&self, n_s: usize, n_f: usize) -> Result<usize> {
        self.validate_for(n_s, n_f)?;
        Ok((n_s / self.patch_rows) * (n_f / self.patch_cols))
    }
}

/// Which patches stay visible, plus the token index set I_v.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPattern {
    visible: Vec<bool>,
    n_visible: usize,
    token_indices: Vec<usize>,
    realized_ratio: f64,
}

impl MaskPattern {
    /// Builds the pattern from a per-patch visibility vector.
    pub fn from_visible(visible: Vec<bool>) -> Result<Self> {
        let k = visible.len();
        let n_visible = visible.iter().filter(|v| **v).count();
        if n_visible == 0 || k == 0 {
            return Err(Error::contract("mask must keep at least one visible patch".to_string()));
        }
        let mut token_indices = Vec::with_capacity(2 * n_visible);
        for (i, v) in visible.iter().enumerate() {
            if *v {
                token_indices.push(i);
            }
        }
        for (i, v) in visible.iter().enumerate() {
            if *v {
                token_indices.push(k + i);
            }
        }
        let realized_ratio = 1.0 - n_visible as f64 / k as f64;
        Ok(MaskPattern { visible, n_visible, token_indices, realized_ratio })
    }

    pub fn k(&self) -> usize {
        self.visible.len()
    }

    pub fn n_visible(&self) -> usize {
        self.n_visible
    }

    pub fn n_masked(&self) -> usize {
        self.k() - self.n_visible
    }

    pub fn is_visible(&self, patch: usize) -> bool {
        self.visible[patch]
    }

    /// Ascending token indices of visible real then imaginary components.
    pub fn token_indices(&self) -> &[usize] {
        &self.token_indices
    }

    pub fn realized_ratio(&self) -> f64 {
        self.realized_ratio
    }

    pub fn masked_patches(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| !self.visible[i]).collect()
    }

    /// (2K, d_p) tensor with ones on rows of masked components, zeros
    /// elsewhere; the weighting that restricts a loss to masked regions.
    pub fn masked_row_weights(&self, d_p: usize) -> Tensor {
        let k = self.k();
        let mut data = vec![0.0; 2 * k * d_p];
        for (i, &vis) in self.visible.iter().enumerate() {
            if !vis {
                for row in [i, k + i] {
                    data[row * d_p..(row + 1) * d_p].fill(1.0);
                }
            }
        }
        Tensor::matrix(2 * k, d_p, data).expect("mask weight shape")
    }
}

/// Draws a uniform fixed-size mask: the visible count is round((1-m_r)*K),
/// clamped into [1, K-1] whenever 0 < m_r < 1.
pub fn sample_mask<R: Rng>(k: usize, mask_ratio: f64, rng: &mut R) -> Result<MaskPattern> {
    if k == 0 {
        return Err(Error::contract("cannot mask zero patches".to_string()));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::contract(format!("mask ratio must lie in [0, 1), got {mask_ratio}")));
    }
    let n_visible = if mask_ratio == 0.0 {
        k
    } else {
        // A single-patch grid cannot lose its only patch.
        (((1.0 - mask_ratio) * k as f64).round() as usize).clamp(1, (k - 1).max(1))
    };
    let mut picked = rand::seq::index::sample(rng, k, n_visible).into_vec();
    picked.sort_unstable();
    let mut visible = vec![false; k];
    for i in picked {
        visible[i] = true;
    }
    MaskPattern::from_visible(visible)
}

/// Splits `h` into K patches in row-major grid order.
pub fn partition(h: &ComplexMatrix, pc: &PatchConfig) -> Result<Vec<ComplexMatrix>> {
    pc.validate_for(h.rows(), h.cols())?;
    let grid_cols = h.cols() / pc.patch_cols;
    let grid_rows = h.rows() / pc.patch_rows;
    let mut patches = Vec::with_capacity(grid_rows * grid_cols);
    for gi in 0..grid_rows {
        for gj in 0..grid_cols {
            let mut patch = ComplexMatrix::zeros(pc.patch_rows, pc.patch_cols);
            for r in 0..pc.patch_rows {
                for c in 0..pc.patch_cols {
                    patch.set(r, c, h.at(gi * pc.patch_rows + r, gj * pc.patch_cols + c));
                }
            }
            patches.push(patch);
        }
    }
    Ok(patches)
}

/// Full token matrix (2K, d_p): row k is the flattened real part of patch k,
/// row K + k the flattened imaginary part.
pub fn patch_tokens(h: &ComplexMatrix, pc: &PatchConfig) -> Result<Tensor> {
    let patches = partition(h, pc)?;
    let k = patches.len();
    let d_p = pc.patch_dim();
    let mut data = vec![0.0; 2 * k * d_p];
    for (i, patch) in patches.iter().enumerate() {
        for (j, v) in patch.data().iter().enumerate() {
            data[i * d_p + j] = v.re;
            data[(k + i) * d_p + j] = v.im;
        }
    }
    Tensor::matrix(2 * k, d_p, data)
}

/// The visible token sequence P_v (2N_v, d_p) and its index set.
#[derive(Clone, Debug)]
pub struct VisibleSequence {
    pub tokens: Tensor,
    pub token_indices: Vec<usize>,
}

/// Selects visible rows of the full token matrix, real block then imaginary
/// block, both in patch order.
pub fn vectorize_visible(h: &ComplexMatrix, pc: &PatchConfig, mask: &MaskPattern) -> Result<VisibleSequence> {
    let full = patch_tokens(h, pc)?;
    let k = pc.num_patches(h.rows(), h.cols())?;
    if mask.k() != k {
        return Err(Error::contract(format!(
            "mask covers {} patches but channel has {k}",
            mask.k()
        )));
    }
    visible_from_tokens(&full, mask)
}

/// Visible-row selection from an already-built (2K, d_p) token matrix.
pub fn visible_from_tokens(full: &Tensor, mask: &MaskPattern) -> Result<VisibleSequence> {
    let d_p = full.cols();
    if full.rows() != 2 * mask.k() {
        return Err(Error::contract(format!(
            "token matrix has {} rows, mask expects {}",
            full.rows(),
            2 * mask.k()
        )));
    }
    let idx = mask.token_indices();
    let mut data = Vec::with_capacity(idx.len() * d_p);
    for &i in idx {
        data.extend_from_slice(&full.data()[i * d_p..(i + 1) * d_p]);
    }
    Ok(VisibleSequence {
        tokens: Tensor::matrix(idx.len(), d_p, data)?,
        token_indices: idx.to_vec(),
    })
}

/// Inverse of [`patch_tokens`]: combines row k (real) with row K + k
/// (imaginary) back into the channel matrix.
pub fn reassemble(p_full: &Tensor, pc: &PatchConfig, n_s: usize, n_f: usize) -> Result<ComplexMatrix> {
    let k = pc.num_patches(n_s, n_f)?;
    let d_p = pc.patch_dim();
    if p_full.shape() != [2 * k, d_p] {
        return Err(Error::contract(format!(
            "patch matrix shape {:?}, expected [{}, {}]",
            p_full.shape(),
            2 * k,
            d_p
        )));
    }
    let grid_cols = n_f / pc.patch_cols;
    let mut h = ComplexMatrix::zeros(n_s, n_f);
    for patch in 0..k {
        let gi = patch / grid_cols;
        let gj = patch % grid_cols;
        for r in 0..pc.patch_rows {
            for c in 0..pc.patch_cols {
                let j = r * pc.patch_cols + c;
                let re = p_full.data()[patch * d_p + j];
                let im = p_full.data()[(k + patch) * d_p + j];
                h.set(
                    gi * pc.patch_rows + r,
                    gj * pc.patch_cols + c,
                    num_complex::Complex64::new(re, im),
                );
            }
        }
    }
    Ok(h)
}

/// Scales both components by 1/std.
pub fn normalize(h: &ComplexMatrix, std: f64) -> Result<ComplexMatrix> {
    if std <= 0.0 {
        return Err(Error::config(format!("normalization std must be positive, got {std}")));
    }
    Ok(h.scaled(1.0 / std))
}

/// Inverse of [`normalize`].
pub fn denormalize(h: &ComplexMatrix, std: f64) -> Result<ComplexMatrix> {
    if std <= 0.0 {
        return Err(Error::config(format!("normalization std must be positive, got {std}")));
    }
    Ok(h.scaled(std))
}

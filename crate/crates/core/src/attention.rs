//! Global attention: bilinear scores against every encoder position, a
//! softmax over the valid ones, and the weighted context vector.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Scalar, Tensor};
use crate::encoder::EncoderOutput;
use crate::nn::init_uniform;

/// Additive score for masked positions; effectively minus infinity for a
/// softmax but safe to exponentiate.
const MASK_SCORE: Scalar = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("all source positions are masked")]
    AllMasked,
    #[error("mask length {mask} does not match source length {src}")]
    MaskLength { mask: usize, src: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// The bilinear map. `w_a` has decoder-hidden rows and `2*hidden` columns so
/// scores are `s^T W_a h_i`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_a: Tensor,
}

impl AttentionParams {
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            w_a: init_uniform(vec![hidden, 2 * hidden], rng),
        }
    }
}

/// Attend with the current decoder output as the query. Returns the weights
/// over source positions and the context vector of size `2*hidden`.
pub fn attend(
    s: &Tensor,
    enc: &EncoderOutput,
    mask: &[bool],
    p: &AttentionParams,
) -> Result<(Tensor, Tensor), AttentionError> {
    if mask.len() != enc.src_len {
        return Err(AttentionError::MaskLength {
            mask: mask.len(),
            src: enc.src_len,
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(AttentionError::AllMasked);
    }
    // e_i = s^T W_a h_i, computed as (W_a^T s) dotted against each row of H.
    let query = p.w_a.transpose()?.matmul(s)?;
    let mut scores = enc.matrix.matmul(&query)?;
    if mask.iter().any(|&m| !m) {
        let add: Vec<Scalar> = mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_SCORE })
            .collect();
        scores = scores.add(&Tensor::vector(add))?;
    }
    let alpha = scores.softmax()?;
    let context = enc.matrix_t.matmul(&alpha)?;
    Ok((alpha, context))
}

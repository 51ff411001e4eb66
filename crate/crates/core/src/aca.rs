//! Adaptive control of attention: a recurrent memory vector updated by
//! remove/feed gates each decoding step, plus an update gate that scales the
//! attention context before the final output projection.
//!
//! The memory lets the context vector be modulated by what has already been
//! produced, which is what damps repeated generation.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::nn::{AffineParams, NnError};

/// Gate and projection parameters.
///
/// `g_r`, `g_f`, `g_i` read `[s; c]` (size `3*hidden`) and emit `hidden`;
/// `g_u` reads `[m; s]` (size `2*hidden`) and emits the context size
/// `2*hidden` so the gate can scale `c` elementwise; `g_o` reads `[s; c_hat]`
/// and emits the `hidden`-sized final output.
#[derive(Debug, Clone)]
pub struct AcaParams {
    pub g_r: AffineParams,
    pub g_f: AffineParams,
    pub g_i: AffineParams,
    pub g_u: AffineParams,
    pub g_o: AffineParams,
}

impl AcaParams {
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        AcaParams {
            g_r: AffineParams::new(3 * hidden, hidden, rng),
            g_f: AffineParams::new(3 * hidden, hidden, rng),
            g_i: AffineParams::new(3 * hidden, hidden, rng),
            g_u: AffineParams::new(2 * hidden, 2 * hidden, rng),
            g_o: AffineParams::new(3 * hidden, hidden, rng),
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.extend(self.g_r.named("aca.g_r"));
        out.extend(self.g_f.named("aca.g_f"));
        out.extend(self.g_i.named("aca.g_i"));
        out.extend(self.g_u.named("aca.g_u"));
        out.extend(self.g_o.named("aca.g_o"));
        out
    }
}

/// Remove and feed gates from the decoder output and the context vector.
pub fn gates(s: &Tensor, c: &Tensor, p: &AcaParams) -> Result<(Tensor, Tensor), NnError> {
    let z = Tensor::concat(&[s, c])?;
    let r = p.g_r.apply(&z)?.sigmoid();
    let f = p.g_f.apply(&z)?.sigmoid();
    Ok((r, f))
}

/// `m = r (*) m_prev + f (*) tanh(g_i([s; c]))`: remove from the old memory,
/// feed in a bounded candidate built from the current step.
pub fn memory_update(
    m_prev: &Tensor,
    r: &Tensor,
    f: &Tensor,
    s: &Tensor,
    c: &Tensor,
    p: &AcaParams,
) -> Result<Tensor, NnError> {
    let z = Tensor::concat(&[s, c])?;
    let candidate = p.g_i.apply(&z)?.tanh();
    Ok(r.mul(m_prev)?.add(&f.mul(&candidate)?)?)
}

/// Update gate, gated context, and the final output vector:
/// `u = sigmoid(g_u([m; s]))`, `c_hat = u (*) c`, `v_hat = tanh(g_o([s; c_hat]))`.
pub fn gated_output(
    m: &Tensor,
    s: &Tensor,
    c: &Tensor,
    p: &AcaParams,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let u = p.g_u.apply(&Tensor::concat(&[m, s])?)?.sigmoid();
    let c_hat = u.mul(c)?;
    let v_hat = p.g_o.apply(&Tensor::concat(&[s, &c_hat])?)?.tanh();
    Ok((u, c_hat, v_hat))
}

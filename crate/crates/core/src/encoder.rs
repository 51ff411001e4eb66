//! Multi-layer bidirectional LSTM encoder and the bridge that turns its
//! final state into the decoder initialization and the initial memory vector.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::nn::{self, AffineParams, ForwardCtx, LstmCellParams, LstmState, NnError};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("encoder input must be nonempty")]
    EmptyInput,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// One bidirectional layer: independent forward and backward cells.
#[derive(Debug, Clone)]
pub struct BiLayerParams {
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
}

/// Affine+tanh maps from the top-layer forward final state to the decoder's
/// initial hidden and cell vectors.
#[derive(Debug, Clone)]
pub struct BridgeParams {
    pub h: AffineParams,
    pub c: AffineParams,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<BiLayerParams>,
    pub bridge: BridgeParams,
}

impl EncoderParams {
    /// Layer 1 reads embeddings of `embed_dim`; deeper layers read the
    /// concatenated bidirectional output of the layer below.
    pub fn new(embed_dim: usize, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let input = if l == 0 { embed_dim } else { 2 * hidden };
                BiLayerParams {
                    fwd: LstmCellParams::new(input, hidden, rng),
                    bwd: LstmCellParams::new(input, hidden, rng),
                }
            })
            .collect();
        EncoderParams {
            layers,
            bridge: BridgeParams {
                h: AffineParams::new(hidden, hidden, rng),
                c: AffineParams::new(hidden, hidden, rng),
            },
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.fwd.named(&format!("enc.l{l}.fwd")));
            out.extend(layer.bwd.named(&format!("enc.l{l}.bwd")));
        }
        out.extend(self.bridge.h.named("enc.bridge.h"));
        out.extend(self.bridge.c.named("enc.bridge.c"));
        out
    }
}

/// Per-position concatenated bidirectional states plus everything the decoder
/// needs to start: the stacked matrix views for attention and the final
/// states of every direction and layer.
#[derive(Debug)]
pub struct EncoderOutput {
    /// One `[2*hidden]` vector per source position.
    pub states: Vec<Tensor>,
    /// The same states stacked into `[n, 2*hidden]`.
    pub matrix: Tensor,
    /// Transposed stack `[2*hidden, n]`, shared by every attention step.
    pub matrix_t: Tensor,
    /// `(forward, backward)` final state per layer, bottom to top.
    pub final_states: Vec<(LstmState, LstmState)>,
    pub src_len: usize,
}

/// Run one direction of one layer over the input sequence, in the given
/// visiting order, returning per-position h states (in input order) plus the
/// final state.
fn run_direction(
    inputs: &[Tensor],
    order: impl Iterator<Item = usize>,
    p: &LstmCellParams,
) -> Result<(Vec<Option<Tensor>>, LstmState), NnError> {
    let mut state = LstmState::zeros(p.hidden());
    let mut hs: Vec<Option<Tensor>> = vec![None; inputs.len()];
    for i in order {
        state = nn::lstm_cell_step(&inputs[i], &state, p)?;
        hs[i] = Some(state.h.clone());
    }
    Ok((hs, state))
}

/// Encode a source sentence: embed, run every bidirectional layer, and stack
/// the top layer's concatenated states.
pub fn encode(
    src_ids: &[usize],
    embedding: &Tensor,
    p: &EncoderParams,
    ctx: &mut ForwardCtx,
) -> Result<EncoderOutput, EncoderError> {
    if src_ids.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    let n = src_ids.len();
    let mut inputs = nn::embed(src_ids, embedding)?;
    for x in inputs.iter_mut() {
        *x = ctx.apply_dropout(x)?;
    }

    let mut final_states = Vec::with_capacity(p.layers.len());
    let mut layer_out: Vec<Tensor> = Vec::new();
    for layer in &p.layers {
        let (fwd_h, fwd_final) = run_direction(&inputs, 0..n, &layer.fwd)?;
        let (bwd_h, bwd_final) = run_direction(&inputs, (0..n).rev(), &layer.bwd)?;
        layer_out = fwd_h
            .into_iter()
            .zip(bwd_h)
            .map(|(f, b)| Tensor::concat(&[&f.expect("visited"), &b.expect("visited")]))
            .collect::<Result<_, _>>()?;
        for x in layer_out.iter_mut() {
            *x = ctx.apply_dropout(x)?;
        }
        final_states.push((fwd_final, bwd_final));
        inputs = layer_out.clone();
    }

    let refs: Vec<&Tensor> = layer_out.iter().collect();
    let matrix = Tensor::stack_rows(&refs)?;
    let matrix_t = matrix.transpose()?;
    Ok(EncoderOutput {
        states: layer_out,
        matrix,
        matrix_t,
        final_states,
        src_len: n,
    })
}

/// Bridge the top-layer forward final state into the decoder: every decoder
/// layer starts from the same affine+tanh image of `(h_n, C_n)`, and the
/// initial memory vector is that same hidden image.
pub fn bridge(
    enc: &EncoderOutput,
    p: &BridgeParams,
    decoder_layers: usize,
) -> Result<(Vec<LstmState>, Tensor), EncoderError> {
    let (top_fwd, _) = enc.final_states.last().expect("at least one layer");
    let h0 = p.h.apply(&top_fwd.h)?.tanh();
    let c0 = p.c.apply(&top_fwd.c)?.tanh();
    let states = (0..decoder_layers)
        .map(|_| LstmState {
            h: h0.clone(),
            c: c0.clone(),
        })
        .collect();
    Ok((states, h0))
}

//! The assembled translation model: embeddings, bidirectional encoder,
//! unidirectional decoder stack, global attention, and either the plain
//! context head or the adaptive attention-control head.
//!
//! Also owns the checkpoint format: a version byte, the JSON-serialized
//! config, then named parameter arrays with explicit dims and 32-bit
//! little-endian float values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aca::{self, AcaParams};
use crate::attention::{attend, AttentionError, AttentionParams};
use crate::autodiff::{AutodiffError, Scalar, Tensor};
use crate::encoder::{self, EncoderError, EncoderOutput, EncoderParams};
use crate::nn::{self, AffineParams, ForwardCtx, LstmCellParams, LstmState, NnError};

const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("token id {id} out of range for target vocab of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("loss needs a nonempty batch")]
    EmptyBatch,
    #[error("target sequence must contain at least one prediction position")]
    DegenerateTarget,
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint does not match the expected parameter set: {0}")]
    Mismatch(String),
}

/// Model hyperparameters. The defaults mirror the reference configuration:
/// 512-dimensional embeddings and hidden states, a 3-layer bidirectional
/// encoder, and a 2-layer decoder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: Scalar,
    pub use_aca: bool,
    pub max_decode_len: usize,
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            embed_dim: 512,
            hidden_dim: 512,
            encoder_layers: 3,
            decoder_layers: 2,
            dropout: 0.2,
            use_aca: false,
            max_decode_len: 200,
        }
    }
}

/// Every learnable tensor in the model. The baseline head and the adaptive
/// head are both always allocated so the two modes share checkpoints and can
/// be compared on identical shared parameters; `config.use_aca` picks the
/// output path.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    pub encoder: EncoderParams,
    pub decoder_layers: Vec<LstmCellParams>,
    pub attention: AttentionParams,
    /// Baseline output head: `v = tanh(W_v [c; s] + b_v)`.
    pub baseline_head: AffineParams,
    pub aca: AcaParams,
    /// Vocabulary projection applied to `v` (or `v_hat`).
    pub out_proj: AffineParams,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let e = config.embed_dim;
        let src_embed = nn::init_uniform(vec![config.src_vocab, e], &mut rng);
        let tgt_embed = nn::init_uniform(vec![config.tgt_vocab, e], &mut rng);
        let encoder = EncoderParams::new(e, h, config.encoder_layers, &mut rng);
        let decoder_layers = (0..config.decoder_layers)
            .map(|l| {
                let input = if l == 0 { e } else { h };
                LstmCellParams::new(input, h, &mut rng)
            })
            .collect();
        let attention = AttentionParams::new(h, &mut rng);
        let baseline_head = AffineParams::new(3 * h, h, &mut rng);
        let aca = AcaParams::new(h, &mut rng);
        let out_proj = AffineParams::new(h, config.tgt_vocab, &mut rng);
        ModelParams {
            config,
            src_embed,
            tgt_embed,
            encoder,
            decoder_layers,
            attention,
            baseline_head,
            aca,
            out_proj,
        }
    }

    /// All tensors with stable names, in a deterministic order shared by the
    /// optimizer and the checkpoint code.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("src_embed".to_string(), self.src_embed.clone()),
            ("tgt_embed".to_string(), self.tgt_embed.clone()),
        ];
        out.extend(self.encoder.named());
        for (l, layer) in self.decoder_layers.iter().enumerate() {
            out.extend(layer.named(&format!("dec.l{l}")));
        }
        out.push(("attn.w_a".to_string(), self.attention.w_a.clone()));
        out.extend(self.baseline_head.named("head.v"));
        out.extend(self.aca.named());
        out.extend(self.out_proj.named("out"));
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_tensors() {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.n_elems()).sum()
    }
}

/// Per-layer decoder states plus the attention-control memory. The memory is
/// carried but untouched when the adaptive head is disabled.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
    pub memory: Tensor,
}

/// Encode a source sentence with the model's embedding and encoder stack.
pub fn encode_source(
    src_ids: &[usize],
    params: &ModelParams,
    ctx: &mut ForwardCtx,
) -> Result<EncoderOutput, ModelError> {
    Ok(encoder::encode(
        src_ids,
        &params.src_embed,
        &params.encoder,
        ctx,
    )?)
}

/// Initial decoder state bridged from the encoder's final forward state; the
/// memory starts as the same vector as every layer's initial hidden state.
pub fn init_decoder_state(
    enc: &EncoderOutput,
    params: &ModelParams,
) -> Result<DecoderState, ModelError> {
    let (layers, m0) = encoder::bridge(enc, &params.encoder.bridge, params.config.decoder_layers)?;
    Ok(DecoderState { layers, memory: m0 })
}

/// One teacher-forced or inference step of the decoder.
///
/// Embeds the previous token, runs the LSTM stack, attends over the encoder
/// states, and projects through the adaptive head (when `use_aca`) or the
/// plain `tanh(W_v [c; s])` head. Returns the log-probabilities over the
/// target vocabulary and the next state.
pub fn decoder_step(
    prev_token: usize,
    state: &DecoderState,
    enc: &EncoderOutput,
    params: &ModelParams,
    ctx: &mut ForwardCtx,
) -> Result<(Tensor, DecoderState), ModelError> {
    let vocab = params.config.tgt_vocab;
    if prev_token >= vocab {
        return Err(ModelError::TokenOutOfRange {
            id: prev_token,
            vocab,
        });
    }
    let embedded = params.tgt_embed.embed_row(prev_token)?;
    let mut x = ctx.apply_dropout(&embedded)?;

    let mut new_layers = Vec::with_capacity(state.layers.len());
    for (layer, prev) in params.decoder_layers.iter().zip(&state.layers) {
        let next = nn::lstm_cell_step(&x, prev, layer)?;
        x = ctx.apply_dropout(&next.h)?;
        new_layers.push(next);
    }
    let s_t = x;

    let mask = vec![true; enc.src_len];
    let (_alpha, context) = attend(&s_t, enc, &mask, &params.attention)?;

    let (v, memory) = if params.config.use_aca {
        let (r, f) = aca::gates(&s_t, &context, &params.aca)?;
        let m = aca::memory_update(&state.memory, &r, &f, &s_t, &context, &params.aca)?;
        let (_u, _c_hat, v_hat) = aca::gated_output(&m, &s_t, &context, &params.aca)?;
        (v_hat, m)
    } else {
        let joined = Tensor::concat(&[&context, &s_t])?;
        let v = params.baseline_head.apply(&joined)?.tanh();
        (v, state.memory.clone())
    };

    let logits = params.out_proj.apply(&v)?;
    let log_probs = logits.log_softmax()?;
    Ok((
        log_probs,
        DecoderState {
            layers: new_layers,
            memory,
        },
    ))
}

/// Mean negative log-likelihood per non-pad target token over a batch of
/// teacher-forced pairs. Target sequences arrive already wrapped in
/// begin/end-of-sentence markers and trimmed of padding.
pub fn nll_loss(
    srcs: &[Vec<usize>],
    wrapped_tgts: &[Vec<usize>],
    params: &ModelParams,
    ctx: &mut ForwardCtx,
) -> Result<Tensor, ModelError> {
    if srcs.is_empty() || srcs.len() != wrapped_tgts.len() {
        return Err(ModelError::EmptyBatch);
    }
    let n_tokens: usize = wrapped_tgts.iter().map(|t| t.len().saturating_sub(1)).sum();
    if n_tokens == 0 {
        return Err(ModelError::DegenerateTarget);
    }
    let mut total: Option<Tensor> = None;
    for (src, tgt) in srcs.iter().zip(wrapped_tgts) {
        if tgt.len() < 2 {
            return Err(ModelError::DegenerateTarget);
        }
        let enc = encode_source(src, params, ctx)?;
        let mut state = init_decoder_state(&enc, params)?;
        for t in 1..tgt.len() {
            let (log_probs, next) = decoder_step(tgt[t - 1], &state, &enc, params, ctx)?;
            let term = log_probs.pick(tgt[t])?;
            total = Some(match total {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
            state = next;
        }
    }
    let total = total.expect("at least one prediction");
    Ok(total.scale(-1.0 / n_tokens as Scalar))
}

// ---- checkpoints -----------------------------------------------------------

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Write all parameters atomically: serialize next to the target path, then
/// rename over it.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut bytes = Vec::new();
    bytes.push(CHECKPOINT_VERSION);
    let config = serde_json::to_string(&params.config)
        .map_err(|e| ModelError::Format(format!("config serialization failed: {e}")))?;
    write_u64(&mut bytes, config.len() as u64)?;
    bytes.extend_from_slice(config.as_bytes());
    let tensors = params.named_tensors();
    write_u64(&mut bytes, tensors.len() as u64)?;
    for (name, t) in &tensors {
        write_u64(&mut bytes, name.len() as u64)?;
        bytes.extend_from_slice(name.as_bytes());
        let shape = t.shape();
        write_u64(&mut bytes, shape.len() as u64)?;
        for &d in &shape {
            write_u64(&mut bytes, d as u64)?;
        }
        t.with_values(|v| {
            for &x in v {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        });
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]. The parameter set is
/// rebuilt from the embedded config and every entry must match by name and
/// shape.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let data = fs::read(path)?;
    let mut r = io::Cursor::new(&data);
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(ModelError::Format(format!(
            "unsupported checkpoint version {}",
            version[0]
        )));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| ModelError::Format(format!("bad config json: {e}")))?;

    let params = ModelParams::new(config, 0);
    let expected = params.named_tensors();
    let n_entries = read_u64(&mut r)? as usize;
    if n_entries != expected.len() {
        return Err(ModelError::Mismatch(format!(
            "{} entries, expected {}",
            n_entries,
            expected.len()
        )));
    }
    for (name, tensor) in &expected {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let got_name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::Format("non-utf8 parameter name".into()))?;
        if &got_name != name {
            return Err(ModelError::Mismatch(format!(
                "parameter {got_name}, expected {name}"
            )));
        }
        let rank = read_u64(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        if dims != tensor.shape() {
            return Err(ModelError::Mismatch(format!(
                "parameter {name} has dims {dims:?}, expected {:?}",
                tensor.shape()
            )));
        }
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut fbuf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut fbuf)?;
            values.push(f32::from_le_bytes(fbuf) as Scalar);
        }
        tensor.with_values_mut(|v| v.copy_from_slice(&values));
    }
    if r.position() != data.len() as u64 {
        return Err(ModelError::Format("trailing bytes after last entry".into()));
    }
    Ok(params)
}

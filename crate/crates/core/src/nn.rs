//! Neural primitives shared by the encoder and the decoder: embeddings,
//! affine projections, inverted dropout, and the four-gate LSTM cell.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Scalar, Tensor};

/// All weights start uniform in this range; biases start at zero.
pub const INIT_RANGE: Scalar = 0.08;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    BadDropoutRate(Scalar),
    #[error("embedding id {id} out of range for vocab of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
}

/// Uniform `[-INIT_RANGE, INIT_RANGE]` leaf of the given shape.
pub fn init_uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    Tensor::from_shape(shape, values).expect("generated data matches shape")
}

/// A learned affine map `x -> Wx + b`.
#[derive(Debug, Clone)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl AffineParams {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AffineParams {
            w: init_uniform(vec![out_dim, in_dim], rng),
            b: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor, NnError> {
        affine(x, &self.w, &self.b)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w"), self.w.clone()),
            (format!("{prefix}.b"), self.b.clone()),
        ]
    }
}

/// `Wx + b`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    Ok(w.matmul(x)?.add(b)?)
}

/// Parameters of one LSTM cell. Each gate weight is `hidden x (input+hidden)`
/// and acts on the concatenation `[x; h_prev]`.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_o: Tensor,
    pub w_c: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
}

impl LstmCellParams {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = |rng: &mut ChaCha8Rng| init_uniform(vec![hidden, input + hidden], rng);
        LstmCellParams {
            w_f: w(rng),
            w_i: w(rng),
            w_o: w(rng),
            w_c: w(rng),
            b_f: Tensor::zeros(vec![hidden]),
            b_i: Tensor::zeros(vec![hidden]),
            b_o: Tensor::zeros(vec![hidden]),
            b_c: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_f.shape()[0]
    }

    /// Gate tensors with stable names, for checkpoints and optimizers.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [
            ("w_f", &self.w_f),
            ("w_i", &self.w_i),
            ("w_o", &self.w_o),
            ("w_c", &self.w_c),
            ("b_f", &self.b_f),
            ("b_i", &self.b_i),
            ("b_o", &self.b_o),
            ("b_c", &self.b_c),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
    }
}

/// Hidden and cell state of one LSTM layer.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(vec![hidden]),
            c: Tensor::zeros(vec![hidden]),
        }
    }
}

/// One LSTM step: gates f, i, o and candidate over `[x; h_prev]`, then
/// `C = f (*) C_prev + i (*) Ccand` and `h = o (*) tanh(C)`.
pub fn lstm_cell_step(
    x: &Tensor,
    prev: &LstmState,
    p: &LstmCellParams,
) -> Result<LstmState, NnError> {
    let z = Tensor::concat(&[x, &prev.h])?;
    let f = affine(&z, &p.w_f, &p.b_f)?.sigmoid();
    let i = affine(&z, &p.w_i, &p.b_i)?.sigmoid();
    let o = affine(&z, &p.w_o, &p.b_o)?.sigmoid();
    let cand = affine(&z, &p.w_c, &p.b_c)?.tanh();
    let c = f.mul(&prev.c)?.add(&i.mul(&cand)?)?;
    let h = o.mul(&c.tanh())?;
    Ok(LstmState { h, c })
}

/// Look up embedding rows for a sequence of token ids.
pub fn embed(ids: &[usize], e: &Tensor) -> Result<Vec<Tensor>, NnError> {
    let vocab = e.shape()[0];
    ids.iter()
        .map(|&id| {
            if id >= vocab {
                Err(NnError::IdOutOfRange { id, vocab })
            } else {
                Ok(e.embed_row(id)?)
            }
        })
        .collect()
}

/// Forward-pass context: dropout settings plus the rng that drives the masks.
///
/// Evaluation contexts never touch the rng, so gradient checks stay
/// deterministic.
#[derive(Debug)]
pub struct ForwardCtx {
    pub train: bool,
    pub dropout: Scalar,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: Scalar, seed: u64) -> Self {
        ForwardCtx {
            train: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inverted dropout on `x` under this context; identity in eval mode.
    pub fn apply_dropout(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        dropout_with(x, self.dropout, self.train, &mut self.rng)
    }
}

/// Inverted dropout: zero each coordinate with probability `rate` and scale
/// survivors by `1/(1-rate)`. Identity in eval mode or at rate 0.
pub fn dropout_with(
    x: &Tensor,
    rate: Scalar,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, NnError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::BadDropoutRate(rate));
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask: Vec<Scalar> = (0..x.n_elems())
        .map(|_| {
            if rng.gen::<Scalar>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    let mask = Tensor::from_shape(x.shape(), mask)?;
    Ok(x.mul(&mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scalar_cell(w: Scalar, b: Scalar) -> LstmCellParams {
        LstmCellParams {
            w_f: Tensor::matrix(1, 2, vec![w, w]).unwrap(),
            w_i: Tensor::matrix(1, 2, vec![w, w]).unwrap(),
            w_o: Tensor::matrix(1, 2, vec![w, w]).unwrap(),
            w_c: Tensor::matrix(1, 2, vec![w, w]).unwrap(),
            b_f: Tensor::vector(vec![b]),
            b_i: Tensor::vector(vec![b]),
            b_o: Tensor::vector(vec![b]),
            b_c: Tensor::vector(vec![b]),
        }
    }

    #[test]
    fn zero_cell_stays_at_zero() {
        let p = scalar_cell(0.0, 0.0);
        let out = lstm_cell_step(&Tensor::vector(vec![0.37]), &LstmState::zeros(1), &p).unwrap();
        assert_eq!(out.h.value(), vec![0.0]);
        assert_eq!(out.c.value(), vec![0.0]);
    }

    #[test]
    fn scalar_cell_matches_hand_arithmetic() {
        // All gate pre-activations are 1, so f = i = o = sigmoid(1) and the
        // candidate is tanh(1).
        let p = scalar_cell(1.0, 0.0);
        let out = lstm_cell_step(&Tensor::vector(vec![1.0]), &LstmState::zeros(1), &p).unwrap();
        let s = 1.0 / (1.0 + (-1.0 as Scalar).exp());
        let expected_c = s * (1.0 as Scalar).tanh();
        let expected_h = s * expected_c.tanh();
        assert!((out.c.item() - expected_c).abs() < 1e-12);
        assert!((out.h.item() - expected_h).abs() < 1e-12);
        assert!((out.c.item() - 0.5568).abs() < 1e-3);
        assert!((out.h.item() - 0.3700).abs() < 1e-3);
    }

    #[test]
    fn saturated_gates_preserve_cell() {
        // Forget gate pinned open, input/output pinned shut.
        let p = LstmCellParams {
            w_f: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            w_i: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            w_o: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            w_c: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            b_f: Tensor::vector(vec![10.0]),
            b_i: Tensor::vector(vec![-10.0]),
            b_o: Tensor::vector(vec![-10.0]),
            b_c: Tensor::vector(vec![0.0]),
        };
        let prev = LstmState {
            h: Tensor::vector(vec![0.2]),
            c: Tensor::vector(vec![0.9]),
        };
        let out = lstm_cell_step(&Tensor::vector(vec![-0.4]), &prev, &p).unwrap();
        assert!((out.c.item() - 0.9).abs() < 1e-3);
        assert!(out.h.item().abs() < 1e-3);
    }

    #[test]
    fn gates_stay_in_open_interval_and_h_below_tanh_c() {
        let mut r = rng(11);
        for _ in 0..200 {
            let hidden = r.gen_range(1..5);
            let input = r.gen_range(1..5);
            let p = LstmCellParams::new(input, hidden, &mut r);
            let x = Tensor::vector((0..input).map(|_| r.gen_range(-2.0..2.0)).collect());
            let prev = LstmState {
                h: Tensor::vector((0..hidden).map(|_| r.gen_range(-1.0..1.0)).collect()),
                c: Tensor::vector((0..hidden).map(|_| r.gen_range(-2.0..2.0)).collect()),
            };
            let out = lstm_cell_step(&x, &prev, &p).unwrap();
            for (h, c) in out.h.value().iter().zip(out.c.value()) {
                assert!(
                    h.abs() <= c.tanh().abs() + 1e-12,
                    "|h|={} tanh(C)={}",
                    h,
                    c.tanh()
                );
            }
            // Gate activations recomputed directly to check the open interval.
            let z = Tensor::concat(&[&x, &prev.h]).unwrap();
            for w in [(&p.w_f, &p.b_f), (&p.w_i, &p.b_i), (&p.w_o, &p.b_o)] {
                let g = affine(&z, w.0, w.1).unwrap().sigmoid().value();
                assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
            }
            let cand = affine(&z, &p.w_c, &p.b_c).unwrap().tanh().value();
            assert!(cand.iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn embed_looks_up_rows_and_accumulates_repeats() {
        let e = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let out = embed(&[0], &e).unwrap();
        assert_eq!(out[0].value(), vec![1.0, 0.0]);

        assert!(embed(&[], &e).unwrap().is_empty());
        assert!(matches!(
            embed(&[3], &e),
            Err(NnError::IdOutOfRange { id: 3, vocab: 3 })
        ));

        // Repeated id accumulates twice into the same row.
        let rows = embed(&[2, 2], &e).unwrap();
        let mut loss = Tensor::scalar(0.0);
        for r in &rows {
            loss = loss.add(&r.pick(0).unwrap()).unwrap();
            loss = loss.add(&r.pick(1).unwrap()).unwrap();
        }
        loss.backward().unwrap();
        assert_eq!(e.grad().unwrap(), vec![0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn affine_cases() {
        let x = Tensor::vector(vec![0.3, -0.7]);
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_b = Tensor::zeros(vec![2]);
        assert_eq!(affine(&x, &eye, &zero_b).unwrap().value(), vec![0.3, -0.7]);

        let zero_w = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let b = Tensor::vector(vec![1.5, -2.5]);
        assert_eq!(affine(&x, &zero_w, &b).unwrap().value(), vec![1.5, -2.5]);

        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::vector(vec![1.0, 1.0]);
        let b1 = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(affine(&ones, &w, &b1).unwrap().value(), vec![4.0, 8.0]);
    }

    #[test]
    fn dropout_contract() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut r = rng(3);
        // rate 0 in train mode: unchanged
        let y = dropout_with(&x, 0.0, true, &mut r).unwrap();
        assert_eq!(y.value(), vec![1.0, 2.0, 3.0]);
        // eval mode: unchanged
        let y = dropout_with(&x, 0.2, false, &mut r).unwrap();
        assert_eq!(y.value(), vec![1.0, 2.0, 3.0]);
        // invalid rate
        assert!(matches!(
            dropout_with(&x, 1.0, true, &mut r),
            Err(NnError::BadDropoutRate(_))
        ));
    }

    #[test]
    fn dropout_preserves_mean_at_scale() {
        let n = 100_000;
        let x = Tensor::vector(vec![1.0; n]);
        let mut r = rng(5);
        let y = dropout_with(&x, 0.2, true, &mut r).unwrap();
        let mean: Scalar = y.value().iter().sum::<Scalar>() / n as Scalar;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}

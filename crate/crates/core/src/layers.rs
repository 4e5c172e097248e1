//! Neural building blocks: embedding lookup, affine layers, LSTM cells,
//! bidirectional sequence encoding, and dropout.
//!
//! Layers are free functions over tensors owned elsewhere; they hold no
//! state of their own, so independent tapes may evaluate them concurrently.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Reserved padding row of every embedding table: zero at init and excluded
/// from optimizer updates.
pub const PADDING_ROW: usize = 0;

/// Train/eval switch for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One LSTM cell: a single packed weight matrix of shape
/// (input + hidden, 4·hidden) and a bias of shape (4·hidden), gate order
/// [input, forget, candidate, output].
#[derive(Clone)]
pub struct LstmCell<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> LstmCell<F> {
    pub fn new(w: Tensor<F>, b: Tensor<F>) -> Result<Self> {
        if w.shape().len() != 2 || b.shape().len() != 1 {
            return Err(Error::invalid("lstm cell expects rank-2 weights and rank-1 bias"));
        }
        let four_h = b.shape()[0];
        if four_h % 4 != 0 || w.shape()[1] != four_h || w.shape()[0] <= four_h / 4 {
            return Err(Error::ShapeMismatch {
                op: "lstm-cell",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(LstmCell { w, b })
    }

    pub fn hidden(&self) -> usize {
        self.b.shape()[0] / 4
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[0] - self.hidden()
    }
}

/// Embedding lookup: ids laid out row-major batch×time, output shaped
/// (batch, time, dim). Padding ids hit the reserved zero row.
pub fn embed<F: Scalar>(
    tape: &Tape<F>,
    table: &Tensor<F>,
    ids: &[usize],
    batch: usize,
    time: usize,
) -> Result<Tensor<F>> {
    if ids.len() != batch * time {
        return Err(Error::invalid(format!(
            "embed: {} ids for batch {batch} x time {time}",
            ids.len()
        )));
    }
    let dim = table.shape()[1];
    let flat = tape.gather_rows(table, ids)?;
    tape.reshape(&flat, vec![batch, time, dim])
}

/// Affine map x @ w + b with b broadcast over rows.
pub fn linear<F: Scalar>(
    tape: &Tape<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    let xw = tape.matmul(x, w)?;
    tape.add(&xw, b)
}

/// One step of the standard LSTM recurrence.
pub fn lstm_step<F: Scalar>(
    tape: &Tape<F>,
    cell: &LstmCell<F>,
    x_t: &Tensor<F>,
    h: &Tensor<F>,
    c: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let hid = cell.hidden();
    if x_t.shape().len() != 2 || x_t.shape()[1] != cell.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            left: x_t.shape().to_vec(),
            right: vec![cell.input_dim()],
        });
    }
    if h.shape() != [x_t.shape()[0], hid] || c.shape() != h.shape() {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            left: h.shape().to_vec(),
            right: vec![x_t.shape()[0], hid],
        });
    }
    let xs = tape.concat(&[x_t, h], 1)?;
    let gates = linear(tape, &xs, &cell.w, &cell.b)?;
    let i = tape.sigmoid(&tape.slice(&gates, 1, 0, hid)?)?;
    let f = tape.sigmoid(&tape.slice(&gates, 1, hid, hid)?)?;
    let g = tape.tanh(&tape.slice(&gates, 1, 2 * hid, hid)?)?;
    let o = tape.sigmoid(&tape.slice(&gates, 1, 3 * hid, hid)?)?;
    let c_next = tape.add(&tape.mul(&f, c)?, &tape.mul(&i, &g)?)?;
    let h_next = tape.mul(&o, &tape.tanh(&c_next)?)?;
    Ok((h_next, c_next))
}

/// Dense 0/1 mask of shape (batch, width) with row b set to `on(b)`.
fn row_mask<F: Scalar>(batch: usize, width: usize, on: impl Fn(usize) -> bool) -> Tensor<F> {
    let mut data = vec![F::zero(); batch * width];
    for b in 0..batch {
        if on(b) {
            data[b * width..(b + 1) * width].fill(F::one());
        }
    }
    Tensor::new(vec![batch, width], data).expect("mask shape")
}

/// Bidirectional encoding of a padded batch: forward state at each row's
/// last true token concatenated with the backward state at token 0.
/// Content beyond `lengths` never reaches the output.
pub fn bilstm_encode<F: Scalar>(
    tape: &Tape<F>,
    fwd: &LstmCell<F>,
    bwd: &LstmCell<F>,
    seq: &Tensor<F>,
    lengths: &[usize],
) -> Result<Tensor<F>> {
    if seq.shape().len() != 3 {
        return Err(Error::InvalidShape {
            op: "bilstm_encode",
            shape: seq.shape().to_vec(),
            reason: "expected (batch, time, dim)".into(),
        });
    }
    let (batch, time, dim) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    if lengths.len() != batch {
        return Err(Error::invalid("bilstm_encode: one length per batch row"));
    }
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 || len > time {
            return Err(Error::invalid(format!(
                "bilstm_encode: length {len} at row {b} outside 1..={time}"
            )));
        }
    }
    let hid = fwd.hidden();
    if bwd.hidden() != hid || fwd.input_dim() != dim || bwd.input_dim() != dim {
        return Err(Error::ShapeMismatch {
            op: "bilstm_encode",
            left: vec![fwd.input_dim(), fwd.hidden()],
            right: vec![bwd.input_dim(), bwd.hidden()],
        });
    }

    let step_input = |t: usize| -> Result<Tensor<F>> {
        let s = tape.slice(seq, 1, t, 1)?;
        tape.reshape(&s, vec![batch, dim])
    };

    // Forward direction: padding steps run but only masked-selected states
    // reach the output, so their values are irrelevant.
    let mut h = Tensor::zeros(vec![batch, hid]);
    let mut c = Tensor::zeros(vec![batch, hid]);
    let mut h_last = Tensor::zeros(vec![batch, hid]);
    for t in 0..time {
        let (hn, cn) = lstm_step(tape, fwd, &step_input(t)?, &h, &c)?;
        let is_last = row_mask::<F>(batch, hid, |b| lengths[b] == t + 1);
        h_last = tape.add(&h_last, &tape.mul(&hn, &is_last)?)?;
        h = hn;
        c = cn;
    }

    // Backward direction: carry masking freezes state on padding steps so
    // each row consumes exactly tokens lengths[b]-1 .. 0.
    let mut hb = Tensor::zeros(vec![batch, hid]);
    let mut cb = Tensor::zeros(vec![batch, hid]);
    for t in (0..time).rev() {
        let (hn, cn) = lstm_step(tape, bwd, &step_input(t)?, &hb, &cb)?;
        let active = row_mask::<F>(batch, hid, |b| t < lengths[b]);
        let keep = row_mask::<F>(batch, hid, |b| t >= lengths[b]);
        hb = tape.add(&tape.mul(&hn, &active)?, &tape.mul(&hb, &keep)?)?;
        cb = tape.add(&tape.mul(&cn, &active)?, &tape.mul(&cb, &keep)?)?;
    }

    tape.concat(&[&h_last, &hb], 1)
}

/// Inverted dropout: train mode zeroes with probability `rate` and scales
/// survivors by 1/(1-rate); eval mode is the identity.
pub fn dropout<F: Scalar, R: Rng>(
    tape: &Tape<F>,
    t: &Tensor<F>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(t.clone());
    }
    let scale = F::from_f64(1.0 / (1.0 - rate));
    let mask_data: Vec<F> = (0..t.numel())
        .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { scale })
        .collect();
    let mask = Tensor::new(t.shape().to_vec(), mask_data).expect("mask shape");
    tape.mul(t, &mask)
}

// ---- initialization --------------------------------------------------------

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn init_uniform<F: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data: Vec<F> = (0..shape.iter().product())
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Affine layer parameters: uniform weights, zero bias.
pub fn init_linear<F: Scalar, R: Rng>(
    rng: &mut R,
    in_dim: usize,
    out_dim: usize,
) -> (Tensor<F>, Tensor<F>) {
    (init_uniform(rng, vec![in_dim, out_dim], in_dim), Tensor::zeros(vec![out_dim]))
}

/// LSTM cell parameters: uniform weights, zero biases except the forget
/// gate at +1.
pub fn init_lstm<F: Scalar, R: Rng>(rng: &mut R, input: usize, hidden: usize) -> LstmCell<F> {
    let w = init_uniform(rng, vec![input + hidden, 4 * hidden], input + hidden);
    let mut b = vec![F::zero(); 4 * hidden];
    b[hidden..2 * hidden].fill(F::one());
    let b = Tensor::new(vec![4 * hidden], b).expect("bias shape");
    LstmCell::new(w, b).expect("consistent shapes")
}

/// Scratch embedding table: uniform rows in [-0.1, 0.1] with a zero padding
/// row, the same convention the vector loader uses for missing words.
pub fn init_embedding<F: Scalar, R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Tensor<F> {
    let mut data: Vec<F> = (0..vocab * dim)
        .map(|_| F::from_f64(rng.gen_range(-0.1..0.1)))
        .collect();
    data[PADDING_ROW * dim..(PADDING_ROW + 1) * dim].fill(F::zero());
    Tensor::new(vec![vocab, dim], data).expect("table shape")
}

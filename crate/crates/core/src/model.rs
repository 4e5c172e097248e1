//! The SSVAE network: shared embedding, y-encoder with classifier head,
//! optional z-encoder with Gaussian heads, and an autoregressive decoder
//! conditioned by per-step concatenation of the latents.
//!
//! The `drop_z` ablation removes the z tower structurally: those parameters
//! do not exist on the dropped model rather than sitting unused.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{
    bilstm_encode, dropout, embed, init_embedding, init_linear, init_lstm, linear, lstm_step,
    LstmCell, Mode,
};
use crate::rng::{name_index, stream, Domain};
use crate::scalar::Scalar;
use crate::stochastic::{CategoricalPosterior, GaussianPosterior};
use crate::tensor::{Tape, Tensor};

/// Reserved vocabulary ids shared by the model and the tokenizer.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const RESERVED_IDS: usize = 4;

/// Name of the shared embedding parameter; its padding row is excluded from
/// optimizer updates.
pub const EMBEDDING_PARAM: &str = "embedding";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub z_dim: usize,
    pub dec_hidden: usize,
    pub drop_z: bool,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Architecture defaults: 300-dim embeddings, BiLSTM encoders with 100
    /// hidden units per direction, z of width 32, decoder LSTM of size 200,
    /// dropout 0.5, sequences truncated at 400 tokens.
    pub fn new(vocab_size: usize, n_classes: usize) -> Self {
        ModelConfig {
            vocab_size,
            n_classes,
            embed_dim: 300,
            enc_hidden: 100,
            z_dim: 32,
            dec_hidden: 200,
            drop_z: false,
            max_len: 400,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < RESERVED_IDS {
            return Err(Error::config(format!(
                "vocab size {} below the {RESERVED_IDS} reserved ids",
                self.vocab_size
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.embed_dim == 0
            || self.enc_hidden == 0
            || self.dec_hidden == 0
            || self.max_len == 0
            || (!self.drop_z && self.z_dim == 0)
        {
            return Err(Error::config("zero-width model dimension"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of each decoder step input: [token embedding ; y ; z?].
    pub fn decoder_input_dim(&self) -> usize {
        self.embed_dim + self.n_classes + if self.drop_z { 0 } else { self.z_dim }
    }
}

/// A padded minibatch. `ids` is row-major batch×time over content tokens
/// only (no BOS/EOS); positions beyond a row's length hold the padding id.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub time: usize,
    pub lengths: Vec<usize>,
    pub labels: Option<Vec<usize>>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<usize>], labels: Option<Vec<usize>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(ls) = &labels {
            if ls.len() != rows.len() {
                return Err(Error::invalid("labels do not match batch rows"));
            }
        }
        if rows.iter().any(|r| r.is_empty()) {
            return Err(Error::invalid("zero-length row in batch"));
        }
        let time = rows.iter().map(|r| r.len()).max().unwrap_or(1);
        let mut ids = vec![PAD_ID; rows.len() * time];
        let mut lengths = Vec::with_capacity(rows.len());
        for (b, row) in rows.iter().enumerate() {
            ids[b * time..b * time + row.len()].copy_from_slice(row);
            lengths.push(row.len());
        }
        Ok(TokenBatch { ids, batch: rows.len(), time, lengths, labels })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.time..b * self.time + self.lengths[b]]
    }
}

/// z-tower parameters, present only when the model keeps z.
#[derive(Clone)]
pub struct ZParams<F> {
    pub fwd: LstmCell<F>,
    pub bwd: LstmCell<F>,
    pub mu_w: Tensor<F>,
    pub mu_b: Tensor<F>,
    pub sigma_w: Tensor<F>,
    pub sigma_b: Tensor<F>,
}

/// All trainable weights. Field order fixes the parameter ordering used by
/// the optimizer and the checkpoint format.
#[derive(Clone)]
pub struct ModelParams<F> {
    pub embedding: Tensor<F>,
    pub y_fwd: LstmCell<F>,
    pub y_bwd: LstmCell<F>,
    pub y_head_w: Tensor<F>,
    pub y_head_b: Tensor<F>,
    pub z_enc: Option<ZParams<F>>,
    pub decoder: LstmCell<F>,
    pub dec_out_w: Tensor<F>,
    pub dec_out_b: Tensor<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// Fresh parameters. Each parameter draws from its own named stream, so
    /// weights shared between variants (same names) are bitwise identical
    /// for a given seed regardless of which other parameters exist.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng_for = |name: &str| stream(seed, Domain::ParamInit, name_index(name));
        let embedding = init_embedding(&mut rng_for(EMBEDDING_PARAM), config.vocab_size, config.embed_dim);
        let y_fwd = init_lstm(&mut rng_for("y_enc.fwd.w"), config.embed_dim, config.enc_hidden);
        let y_bwd = init_lstm(&mut rng_for("y_enc.bwd.w"), config.embed_dim, config.enc_hidden);
        let (y_head_w, y_head_b) =
            init_linear(&mut rng_for("y_head.w"), 2 * config.enc_hidden, config.n_classes);
        let z_enc = if config.drop_z {
            None
        } else {
            let fwd = init_lstm(&mut rng_for("z_enc.fwd.w"), config.embed_dim, config.enc_hidden);
            let bwd = init_lstm(&mut rng_for("z_enc.bwd.w"), config.embed_dim, config.enc_hidden);
            let (mu_w, mu_b) =
                init_linear(&mut rng_for("z_head.mu.w"), 2 * config.enc_hidden, config.z_dim);
            let (sigma_w, sigma_b) =
                init_linear(&mut rng_for("z_head.sigma.w"), 2 * config.enc_hidden, config.z_dim);
            Some(ZParams { fwd, bwd, mu_w, mu_b, sigma_w, sigma_b })
        };
        let decoder = init_lstm(&mut rng_for("decoder.w"), config.decoder_input_dim(), config.dec_hidden);
        let (dec_out_w, dec_out_b) =
            init_linear(&mut rng_for("dec_out.w"), config.dec_hidden, config.vocab_size);
        Ok(ModelParams {
            embedding,
            y_fwd,
            y_bwd,
            y_head_w,
            y_head_b,
            z_enc,
            decoder,
            dec_out_w,
            dec_out_b,
        })
    }

    /// Visit every parameter as (name, tensor) in the fixed global order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor<F>)) {
        f(EMBEDDING_PARAM, &self.embedding);
        f("y_enc.fwd.w", &self.y_fwd.w);
        f("y_enc.fwd.b", &self.y_fwd.b);
        f("y_enc.bwd.w", &self.y_bwd.w);
        f("y_enc.bwd.b", &self.y_bwd.b);
        f("y_head.w", &self.y_head_w);
        f("y_head.b", &self.y_head_b);
        if let Some(z) = &self.z_enc {
            f("z_enc.fwd.w", &z.fwd.w);
            f("z_enc.fwd.b", &z.fwd.b);
            f("z_enc.bwd.w", &z.bwd.w);
            f("z_enc.bwd.b", &z.bwd.b);
            f("z_head.mu.w", &z.mu_w);
            f("z_head.mu.b", &z.mu_b);
            f("z_head.sigma.w", &z.sigma_w);
            f("z_head.sigma.b", &z.sigma_b);
        }
        f("decoder.w", &self.decoder.w);
        f("decoder.b", &self.decoder.b);
        f("dec_out.w", &self.dec_out_w);
        f("dec_out.b", &self.dec_out_b);
    }

    /// Rebuild the set by transforming each parameter in the fixed order.
    pub fn map_named(&self, mut f: impl FnMut(&str, &Tensor<F>) -> Tensor<F>) -> Self {
        ModelParams {
            embedding: f(EMBEDDING_PARAM, &self.embedding),
            y_fwd: LstmCell {
                w: f("y_enc.fwd.w", &self.y_fwd.w),
                b: f("y_enc.fwd.b", &self.y_fwd.b),
            },
            y_bwd: LstmCell {
                w: f("y_enc.bwd.w", &self.y_bwd.w),
                b: f("y_enc.bwd.b", &self.y_bwd.b),
            },
            y_head_w: f("y_head.w", &self.y_head_w),
            y_head_b: f("y_head.b", &self.y_head_b),
            z_enc: self.z_enc.as_ref().map(|z| ZParams {
                fwd: LstmCell { w: f("z_enc.fwd.w", &z.fwd.w), b: f("z_enc.fwd.b", &z.fwd.b) },
                bwd: LstmCell { w: f("z_enc.bwd.w", &z.bwd.w), b: f("z_enc.bwd.b", &z.bwd.b) },
                mu_w: f("z_head.mu.w", &z.mu_w),
                mu_b: f("z_head.mu.b", &z.mu_b),
                sigma_w: f("z_head.sigma.w", &z.sigma_w),
                sigma_b: f("z_head.sigma.b", &z.sigma_b),
            }),
            decoder: LstmCell {
                w: f("decoder.w", &self.decoder.w),
                b: f("decoder.b", &self.decoder.b),
            },
            dec_out_w: f("dec_out.w", &self.dec_out_w),
            dec_out_b: f("dec_out.b", &self.dec_out_b),
        }
    }

    /// Register every parameter on a tape for one optimization step.
    pub fn watch(&self, tape: &Tape<F>) -> Self {
        self.map_named(|_, t| tape.watch(t))
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|name, _| out.push(name.to_string()));
        out
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    pub fn to_named(&self) -> Vec<NamedArray<F>> {
        let mut out = Vec::new();
        self.for_each(|name, t| {
            out.push(NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        });
        out
    }

    pub fn from_named(config: &ModelConfig, arrays: &[NamedArray<F>]) -> Result<Self> {
        let mut by_name: HashMap<&str, &NamedArray<F>> = HashMap::new();
        for a in arrays {
            by_name.insert(a.name.as_str(), a);
        }
        let template = ModelParams::init(config, 0)?;
        let mut missing = Vec::new();
        let rebuilt = template.map_named(|name, t| match by_name.remove(name) {
            Some(a) if a.shape == t.shape() => {
                Tensor::new(a.shape.clone(), a.data.clone()).expect("validated shape")
            }
            Some(a) => {
                missing.push(format!("{name}: shape {:?} vs expected {:?}", a.shape, t.shape()));
                t.clone()
            }
            None => {
                missing.push(format!("{name}: absent"));
                t.clone()
            }
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(missing.join("; ")));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra}")));
        }
        Ok(rebuilt)
    }
}

// ---- forward passes ---------------------------------------------------------

/// Inference pass producing q(y|x) and, unless drop_z, q(z|x). The two
/// posteriors factorize: each tower reads the same (dropout-shared)
/// embeddings but owns its recurrent weights. Dropout draws, in order:
/// embedding mask, y-state mask, z-state mask.
pub fn encode<F: Scalar, R: Rng>(
    tape: &Tape<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &TokenBatch,
    mode: Mode,
    rng: &mut R,
) -> Result<(CategoricalPosterior<F>, Option<GaussianPosterior<F>>)> {
    if batch.batch == 0 {
        return Err(Error::invalid("encode: empty batch"));
    }
    if params.z_enc.is_some() == config.drop_z {
        return Err(Error::invalid("encode: params disagree with config.drop_z"));
    }
    let emb = embed(tape, &params.embedding, &batch.ids, batch.batch, batch.time)?;
    let emb = dropout(tape, &emb, config.dropout, mode, rng)?;

    let y_state = bilstm_encode(tape, &params.y_fwd, &params.y_bwd, &emb, &batch.lengths)?;
    let y_state = dropout(tape, &y_state, config.dropout, mode, rng)?;
    let y_logits = linear(tape, &y_state, &params.y_head_w, &params.y_head_b)?;

    let z_post = match &params.z_enc {
        None => None,
        Some(z) => {
            let z_state = bilstm_encode(tape, &z.fwd, &z.bwd, &emb, &batch.lengths)?;
            let z_state = dropout(tape, &z_state, config.dropout, mode, rng)?;
            let mu = linear(tape, &z_state, &z.mu_w, &z.mu_b)?;
            let sigma = tape.softplus(&linear(tape, &z_state, &z.sigma_w, &z.sigma_b)?)?;
            Some(GaussianPosterior::new(mu, sigma)?)
        }
    };
    Ok((CategoricalPosterior::new(y_logits)?, z_post))
}

/// One-hot rows as a constant tensor.
pub fn one_hot<F: Scalar>(labels: &[usize], k: usize) -> Result<Tensor<F>> {
    let mut data = vec![F::zero(); labels.len() * k];
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::invalid(format!("label {l} outside 0..{k}")));
        }
        data[r * k + l] = F::one();
    }
    Tensor::new(vec![labels.len(), k], data)
}

fn check_simplex_rows<F: Scalar>(y: &Tensor<F>) -> Result<()> {
    let k = *y.shape().last().unwrap_or(&0);
    let tol = F::from_f64(1e-6);
    for row in y.data().chunks(k.max(1)) {
        let mut sum = F::zero();
        for &v in row {
            if v < -tol {
                return Err(Error::invalid("decode: y has a negative coordinate"));
            }
            sum += v;
        }
        if (sum - F::one()).abs() > F::from_f64(1e-5) {
            return Err(Error::invalid("decode: y row does not sum to 1"));
        }
    }
    Ok(())
}

/// Teacher-forced per-row log p(x | y[, z]).
///
/// Step i consumes [embedding of input token i ; y ; z] where input 0 is
/// BOS and later inputs are the row's tokens; targets are the row's tokens
/// followed by EOS, so a row of n content tokens scores n+1 predictions.
/// Positions past a row's targets contribute exactly 0. The decoder starts
/// from a zero state.
pub fn decode_logprob<F: Scalar, R: Rng>(
    tape: &Tape<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &TokenBatch,
    y: &Tensor<F>,
    z: Option<&Tensor<F>>,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<F>> {
    if z.is_some() == config.drop_z {
        return Err(Error::invalid("decode: z presence inconsistent with drop_z"));
    }
    if y.shape() != [batch.batch, config.n_classes] {
        return Err(Error::ShapeMismatch {
            op: "decode_logprob",
            left: y.shape().to_vec(),
            right: vec![batch.batch, config.n_classes],
        });
    }
    check_simplex_rows(y)?;
    if let Some(zt) = z {
        if zt.shape() != [batch.batch, config.z_dim] {
            return Err(Error::ShapeMismatch {
                op: "decode_logprob",
                left: zt.shape().to_vec(),
                right: vec![batch.batch, config.z_dim],
            });
        }
    }

    let (b, t) = (batch.batch, batch.time);
    let steps = t + 1;
    // Decoder inputs: BOS then the content tokens (padding ids feed the
    // zero embedding row on inactive steps).
    let mut in_ids = vec![PAD_ID; b * steps];
    for row in 0..b {
        in_ids[row * steps] = BOS_ID;
        for i in 0..batch.lengths[row] {
            in_ids[row * steps + 1 + i] = batch.ids[row * t + i];
        }
    }
    let emb = embed(tape, &params.embedding, &in_ids, b, steps)?;
    let emb = dropout(tape, &emb, config.dropout, mode, rng)?;

    let mut h = Tensor::zeros(vec![b, config.dec_hidden]);
    let mut c = Tensor::zeros(vec![b, config.dec_hidden]);
    let mut total = Tensor::zeros(vec![b]);
    for i in 0..steps {
        let x_i = tape.reshape(&tape.slice(&emb, 1, i, 1)?, vec![b, config.embed_dim])?;
        let step_in = match z {
            Some(zt) => tape.concat(&[&x_i, y, zt], 1)?,
            None => tape.concat(&[&x_i, y], 1)?,
        };
        let (hn, cn) = lstm_step(tape, &params.decoder, &step_in, &h, &c)?;
        h = hn;
        c = cn;
        let logits = linear(tape, &h, &params.dec_out_w, &params.dec_out_b)?;
        let logp = tape.log_softmax(&logits)?;
        // Target mask: token i while i < length, EOS at i == length, then a
        // zero row so padded steps add exactly 0.
        let mut mask = vec![F::zero(); b * config.vocab_size];
        for row in 0..b {
            let n = batch.lengths[row];
            let target = if i < n {
                Some(batch.ids[row * t + i])
            } else if i == n {
                Some(EOS_ID)
            } else {
                None
            };
            if let Some(tok) = target {
                if tok >= config.vocab_size {
                    return Err(Error::TokenOutOfRange {
                        id: tok,
                        vocab: config.vocab_size,
                        position: row * t + i.min(t - 1),
                    });
                }
                mask[row * config.vocab_size + tok] = F::one();
            }
        }
        let mask = Tensor::new(vec![b, config.vocab_size], mask)?;
        let picked = tape.sum(&tape.mul(&logp, &mask)?, Some(1))?;
        total = tape.add(&total, &picked)?;
    }
    Ok(total)
}

/// Highest-probability class per row with ties broken toward the lowest
/// index.
pub fn argmax_rows<F: Scalar>(scores: &Tensor<F>) -> Vec<usize> {
    let k = *scores.shape().last().unwrap_or(&1);
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Deterministic eval-mode prediction: class probabilities from the
/// y-encoder and argmax labels. This is the single code path behind every
/// accuracy number the harness reports.
pub fn classify<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &TokenBatch,
) -> Result<(Vec<usize>, Tensor<F>)> {
    let tape = Tape::new();
    let mut rng = stream(0, Domain::DropoutStandalone, 0);
    let (posterior, _) = encode(&tape, params, config, batch, Mode::Eval, &mut rng)?;
    let probs = tape.softmax(&posterior.logits)?;
    Ok((argmax_rows(&probs), probs))
}

// ---- checkpoint container ------------------------------------------------------

/// One named array inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

fn manifest_path(bin: &Path) -> PathBuf {
    let mut name = bin.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest");
    bin.with_file_name(name)
}

/// Write named arrays as a flat binary file of native-endian values plus a
/// plain-text manifest (name, shape, byte offset). Round-trips bit-exactly.
pub fn save_arrays<F: Scalar>(bin: &Path, arrays: &[NamedArray<F>]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(bin)?);
    let mut manifest = String::new();
    manifest.push_str("ssvae-arrays v1\n");
    manifest.push_str(&format!("bits {}\n", F::BITS));
    manifest.push_str(&format!("count {}\n", arrays.len()));
    let mut offset = 0u64;
    let width = (F::BITS / 8) as u64;
    for a in arrays {
        let numel: usize = a.shape.iter().product();
        if numel != a.data.len() {
            return Err(Error::Checkpoint(format!("{}: shape/data mismatch", a.name)));
        }
        if a.name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("{}: whitespace in name", a.name)));
        }
        let dims = a
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let dims = if dims.is_empty() { "-".to_string() } else { dims };
        manifest.push_str(&format!("{} {} {}\n", a.name, dims, offset));
        for &v in &a.data {
            if F::BITS == 32 {
                out.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            } else {
                out.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
        offset += numel as u64 * width;
    }
    out.flush()?;
    std::fs::write(manifest_path(bin), manifest)?;
    Ok(())
}

/// Read back a container written by [`save_arrays`] at the same precision.
pub fn load_arrays<F: Scalar>(bin: &Path) -> Result<Vec<NamedArray<F>>> {
    let manifest = manifest_path(bin);
    let reader = BufReader::new(std::fs::File::open(&manifest)?);
    let mut lines = reader.lines();
    let mut expect = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Checkpoint(format!("manifest truncated before {what}")))
    };
    let header = expect("header")?;
    if header.trim() != "ssvae-arrays v1" {
        return Err(Error::Checkpoint(format!("unrecognized header {header:?}")));
    }
    let bits_line = expect("bits")?;
    let bits: u32 = bits_line
        .strip_prefix("bits ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad bits line {bits_line:?}")))?;
    if bits != F::BITS {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {bits}-bit values, expected {}",
            F::BITS
        )));
    }
    let count_line = expect("count")?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad count line {count_line:?}")))?;

    let mut blob = Vec::new();
    std::fs::File::open(bin)?.read_to_end(&mut blob)?;
    let width = (F::BITS / 8) as usize;

    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let line = expect("array entry")?;
        let mut parts = line.split_whitespace();
        let (name, dims, offset) = match (parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(d), Some(o)) => (n.to_string(), d, o),
            _ => return Err(Error::Checkpoint(format!("bad manifest line {line:?}"))),
        };
        let shape: Vec<usize> = if dims == "-" {
            vec![]
        } else {
            dims.split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}")))?
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset in {line:?}")))?;
        let numel: usize = shape.iter().product();
        let end = offset + numel * width;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("{name}: data range {offset}..{end} out of file")));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in blob[offset..end].chunks_exact(width) {
            let v = if F::BITS == 32 {
                f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"))
            };
            data.push(F::from_f64(v));
        }
        arrays.push(NamedArray { name, shape, data });
    }
    Ok(arrays)
}

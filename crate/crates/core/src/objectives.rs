//! Training objectives for the SSVAE variant family.
//!
//! All objectives are losses (minimization convention): a variant's `total`
//! is the negated evidence bound plus `alpha` times the classifier
//! cross-entropy where labels are observed. Batch reduction is the mean, so
//! labeled and unlabeled terms enter a training step with equal weight and
//! magnitudes are comparable across batch sizes.
//!
//! Noise is carried by [`StepNoise`]: a call is a pure function of
//! (params, batch, step, noise), which is what makes variant comparisons on
//! fixed noise meaningful and finite-difference checks possible in train
//! mode. `drop_kl` removes divergence terms from `total` without touching
//! the reconstruction path, so on fixed noise it flips only the `kl_*`
//! components. `drop_z` is a model-shape choice and must agree with the
//! [`ModelConfig`] that built the parameters.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{decode_logprob, encode, one_hot, ModelConfig, ModelParams, TokenBatch};
use crate::rng::{derive, stream, Domain};
use crate::scalar::Scalar;
use crate::stochastic::{
    anneal_coeff, gumbel_softmax_sample, kl_categorical, kl_gaussian_standard,
    sample_gaussian_reparam, standard_normal_noise, uniform_open_noise, AnnealSchedule,
};
use crate::tensor::{Tape, Tensor};

/// Which divergence terms the `drop_kl` ablation removes. The z-KL goes in
/// either scope; `All` additionally removes the categorical KL over y in the
/// unlabeled bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlScope {
    All,
    ZOnly,
}

/// One point in the variant family. `supervised_only` overrides every other
/// flag: the objective degenerates to plain classifier cross-entropy.
#[derive(Debug, Clone)]
pub struct VariantConfig {
    pub drop_kl: bool,
    pub drop_z: bool,
    pub kl_scope: KlScope,
    pub alpha: f64,
    pub tau: f64,
    pub anneal: AnnealSchedule,
    pub supervised_only: bool,
}

/// Display names of the five variants, in report order.
pub const VARIANT_NAMES: [&str; 5] =
    ["Supervised", "SSVAE", "SSVAE-{KL}", "SSVAE-{z}", "SSVAE-{KL,z}"];

impl VariantConfig {
    fn base(alpha: f64) -> Self {
        VariantConfig {
            drop_kl: false,
            drop_z: false,
            kl_scope: KlScope::All,
            alpha,
            tau: 1.0,
            anneal: AnnealSchedule::default(),
            supervised_only: false,
        }
    }

    /// Full objective: both KL terms, latent z present.
    pub fn ssvae(alpha: f64) -> Self {
        Self::base(alpha)
    }

    /// KL terms removed, z and its sampling kept.
    pub fn without_kl(alpha: f64) -> Self {
        VariantConfig { drop_kl: true, ..Self::base(alpha) }
    }

    /// Unobserved latent removed from the model.
    pub fn without_z(alpha: f64) -> Self {
        VariantConfig { drop_z: true, ..Self::base(alpha) }
    }

    /// Both simplifications combined.
    pub fn without_kl_z(alpha: f64) -> Self {
        VariantConfig { drop_kl: true, drop_z: true, ..Self::base(alpha) }
    }

    /// Classifier-only baseline. Trains on the labeled set alone.
    pub fn supervised() -> Self {
        VariantConfig { drop_z: true, supervised_only: true, ..Self::base(1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        if self.supervised_only {
            return "Supervised";
        }
        match (self.drop_kl, self.drop_z) {
            (false, false) => "SSVAE",
            (true, false) => "SSVAE-{KL}",
            (false, true) => "SSVAE-{z}",
            (true, true) => "SSVAE-{KL,z}",
        }
    }

    /// Parse a variant name as printed by [`VariantConfig::name`]. Braces
    /// and case are ignored, so `ssvae-kl,z` works on a command line.
    pub fn from_name(name: &str, alpha: f64) -> Result<Self> {
        let compact: String = name
            .trim()
            .chars()
            .filter(|c| *c != '{' && *c != '}')
            .collect::<String>()
            .to_lowercase();
        match compact.as_str() {
            "supervised" => Ok(Self::supervised()),
            "ssvae" => Ok(Self::ssvae(alpha)),
            "ssvae-kl" => Ok(Self::without_kl(alpha)),
            "ssvae-z" => Ok(Self::without_z(alpha)),
            "ssvae-kl,z" | "ssvae-klz" => Ok(Self::without_kl_z(alpha)),
            _ => Err(Error::config(format!(
                "unknown variant {name:?}; expected one of {VARIANT_NAMES:?}"
            ))),
        }
    }

    fn drops_kl_z(&self) -> bool {
        self.drop_kl
    }

    fn drops_kl_y(&self) -> bool {
        self.drop_kl && self.kl_scope == KlScope::All
    }
}

/// Per-step seeds for the three independent noise sources. Deriving them
/// from (run seed, step) keeps every draw reproducible without serializing
/// generator state.
#[derive(Debug, Clone, Copy)]
pub struct StepNoise {
    pub dropout: u64,
    pub gauss: u64,
    pub gumbel: u64,
}

impl StepNoise {
    /// Noise for the labeled half of step `step`.
    pub fn labeled(seed: u64, step: u64) -> Self {
        StepNoise {
            dropout: derive(seed, Domain::DropoutLabeled, step),
            gauss: derive(seed, Domain::GaussNoise, 2 * step),
            gumbel: derive(seed, Domain::GumbelNoise, 2 * step),
        }
    }

    /// Noise for the unlabeled half of step `step`. Odd gauss/gumbel indices
    /// so the two halves of one step never share draws.
    pub fn unlabeled(seed: u64, step: u64) -> Self {
        StepNoise {
            dropout: derive(seed, Domain::DropoutUnlabeled, step),
            gauss: derive(seed, Domain::GaussNoise, 2 * step + 1),
            gumbel: derive(seed, Domain::GumbelNoise, 2 * step + 1),
        }
    }
}

/// Scalar components of one objective evaluation. `kl_z` and `kl_y` are
/// stored as they enter `total`, i.e. already scaled by the anneal
/// coefficient; dropped terms are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub supervised_ce: f64,
    pub anneal: f64,
}

impl LossBreakdown {
    /// Column names matching [`LossBreakdown::csv_row`].
    pub const CSV_HEADER: &'static str = "total,reconstruction,kl_z,kl_y,supervised_ce,anneal_coeff";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.total, self.reconstruction, self.kl_z, self.kl_y, self.supervised_ce, self.anneal
        )
    }

    /// The signed recombination of the components under `variant`.
    pub fn recombined(&self, variant: &VariantConfig) -> f64 {
        if variant.supervised_only {
            self.supervised_ce
        } else {
            -self.reconstruction + self.kl_z + self.kl_y + variant.alpha * self.supervised_ce
        }
    }

    /// `total` must equal the recombination to within 1e-6; both sides are
    /// sums of the same tape scalars, so the slack only covers association.
    pub fn consistent(&self, variant: &VariantConfig) -> bool {
        (self.total - self.recombined(variant)).abs() <= 1e-6
    }
}

/// One objective evaluation: the scalar loss still attached to the tape,
/// plus detached component values for logging.
pub struct StepLoss<F: Scalar> {
    pub loss: Tensor<F>,
    pub breakdown: LossBreakdown,
}

/// Mean over the batch of −log softmax(y_logits)[label].
pub fn supervised_ce<F: Scalar>(
    tape: &Tape<F>,
    y_logits: &Tensor<F>,
    labels: &[usize],
) -> Result<Tensor<F>> {
    if y_logits.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: "supervised_ce",
            shape: y_logits.shape().to_vec(),
            reason: "logits must be rank 2".into(),
        });
    }
    let (b, k) = (y_logits.shape()[0], y_logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "supervised_ce: {} labels for batch of {b}",
            labels.len()
        )));
    }
    let mask = one_hot::<F>(labels, k)?;
    let log_probs = tape.log_softmax(y_logits)?;
    let picked = tape.sum(&tape.mul(&log_probs, &mask)?, Some(1))?;
    tape.neg(&tape.mean(&picked, None)?)
}

fn check_variant_model<F: Scalar>(
    variant: &VariantConfig,
    config: &ModelConfig,
    params: &ModelParams<F>,
) -> Result<()> {
    variant.validate()?;
    if !variant.supervised_only && variant.drop_z != config.drop_z {
        return Err(Error::config(format!(
            "variant {} has drop_z={} but the model was built with drop_z={}",
            variant.name(),
            variant.drop_z,
            config.drop_z
        )));
    }
    if params.z_enc.is_some() == config.drop_z {
        return Err(Error::config("params disagree with config.drop_z"));
    }
    Ok(())
}

/// Objective on a labeled batch:
/// `total = −(reconstruction − kl_z) + alpha · supervised_ce`,
/// with `kl_z` anneal-scaled and removed entirely under `drop_kl` or
/// `drop_z`. The constant log p(y) of the bound is omitted. Under
/// `supervised_only` the total is the cross-entropy alone.
pub fn labeled_objective<F: Scalar>(
    tape: &Tape<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    variant: &VariantConfig,
    batch: &TokenBatch,
    step: u64,
    noise: StepNoise,
    mode: Mode,
) -> Result<StepLoss<F>> {
    check_variant_model(variant, config, params)?;
    let labels = batch
        .labels
        .clone()
        .ok_or_else(|| Error::invalid("labeled_objective: batch carries no labels"))?;

    let anneal = anneal_coeff(step, &variant.anneal);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(noise.dropout);
    let (y_post, z_post) = encode(tape, params, config, batch, mode, &mut drop_rng)?;
    let ce = supervised_ce(tape, &y_post.logits, &labels)?;

    if variant.supervised_only {
        return Ok(StepLoss {
            breakdown: LossBreakdown {
                total: ce.item_f64(),
                reconstruction: 0.0,
                kl_z: 0.0,
                kl_y: 0.0,
                supervised_ce: ce.item_f64(),
                anneal,
            },
            loss: ce,
        });
    }

    let y = one_hot::<F>(&labels, config.n_classes)?;
    let mut kl_z_term = None;
    let z = match &z_post {
        None => None,
        Some(zp) => {
            let mut gauss_rng = ChaCha8Rng::seed_from_u64(noise.gauss);
            let eps = standard_normal_noise(&mut gauss_rng, zp.mu.shape().to_vec());
            if !variant.drops_kl_z() {
                let rows = kl_gaussian_standard(tape, zp)?;
                let mean = tape.mean(&rows, None)?;
                kl_z_term = Some(tape.scale(&mean, F::from_f64(anneal))?);
            }
            Some(sample_gaussian_reparam(tape, zp, &eps)?)
        }
    };

    let recon_rows = decode_logprob(tape, params, config, batch, &y, z.as_ref(), mode, &mut drop_rng)?;
    let recon = tape.mean(&recon_rows, None)?;

    let mut total = tape.neg(&recon)?;
    if let Some(kl) = &kl_z_term {
        total = tape.add(&total, kl)?;
    }
    total = tape.add(&total, &tape.scale(&ce, F::from_f64(variant.alpha))?)?;

    Ok(StepLoss {
        breakdown: LossBreakdown {
            total: total.item_f64(),
            reconstruction: recon.item_f64(),
            kl_z: kl_z_term.as_ref().map_or(0.0, Tensor::item_f64),
            kl_y: 0.0,
            supervised_ce: ce.item_f64(),
            anneal,
        },
        loss: total,
    })
}

/// Objective on an unlabeled batch:
/// `total = −(reconstruction − kl_y − kl_z)`,
/// with y drawn by Gumbel-Softmax at `tau`, z by reparameterization, a
/// uniform categorical prior over classes, and both KLs anneal-scaled.
/// `drop_kl` removes the z-KL always and the y-KL when the scope is `All`.
/// Labels on the batch, if any, are ignored.
pub fn unlabeled_objective<F: Scalar>(
    tape: &Tape<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    variant: &VariantConfig,
    batch: &TokenBatch,
    step: u64,
    noise: StepNoise,
    mode: Mode,
) -> Result<StepLoss<F>> {
    check_variant_model(variant, config, params)?;
    if variant.supervised_only {
        return Err(Error::invalid(
            "unlabeled_objective: the supervised baseline consumes no unlabeled data",
        ));
    }

    let anneal = anneal_coeff(step, &variant.anneal);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(noise.dropout);
    let (y_post, z_post) = encode(tape, params, config, batch, mode, &mut drop_rng)?;

    let mut gumbel_rng = ChaCha8Rng::seed_from_u64(noise.gumbel);
    let u = uniform_open_noise(&mut gumbel_rng, y_post.logits.shape().to_vec());
    let y = gumbel_softmax_sample(tape, &y_post, variant.tau, &u)?;

    let kl_y_term = if variant.drops_kl_y() {
        None
    } else {
        let q = tape.softmax(&y_post.logits)?;
        let k = config.n_classes;
        let uniform = Tensor::full(vec![k], F::from_f64(1.0 / k as f64));
        let rows = kl_categorical(tape, &q, &uniform)?;
        let mean = tape.mean(&rows, None)?;
        Some(tape.scale(&mean, F::from_f64(anneal))?)
    };

    let mut kl_z_term = None;
    let z = match &z_post {
        None => None,
        Some(zp) => {
            let mut gauss_rng = ChaCha8Rng::seed_from_u64(noise.gauss);
            let eps = standard_normal_noise(&mut gauss_rng, zp.mu.shape().to_vec());
            if !variant.drops_kl_z() {
                let rows = kl_gaussian_standard(tape, zp)?;
                let mean = tape.mean(&rows, None)?;
                kl_z_term = Some(tape.scale(&mean, F::from_f64(anneal))?);
            }
            Some(sample_gaussian_reparam(tape, zp, &eps)?)
        }
    };

    let recon_rows = decode_logprob(tape, params, config, batch, &y, z.as_ref(), mode, &mut drop_rng)?;
    let recon = tape.mean(&recon_rows, None)?;

    let mut total = tape.neg(&recon)?;
    if let Some(kl) = &kl_y_term {
        total = tape.add(&total, kl)?;
    }
    if let Some(kl) = &kl_z_term {
        total = tape.add(&total, kl)?;
    }

    Ok(StepLoss {
        breakdown: LossBreakdown {
            total: total.item_f64(),
            reconstruction: recon.item_f64(),
            kl_z: kl_z_term.as_ref().map_or(0.0, Tensor::item_f64),
            kl_y: kl_y_term.as_ref().map_or(0.0, Tensor::item_f64),
            supervised_ce: 0.0,
            anneal,
        },
        loss: total,
    })
}

// ---- enumeration and quadrature oracles ------------------------------------------------

/// Exact unlabeled bound for a `drop_z` model, marginalizing y by
/// enumeration in eval mode:
/// mean over the batch of Σₖ q(k|x)·log p(x|yₖ) − KL[q(y|x) ‖ uniform].
/// This is the reference the sampled objective must agree with in
/// expectation; it is never used for training.
pub fn enumerate_unlabeled_elbo<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &TokenBatch,
) -> Result<f64> {
    if !config.drop_z {
        return Err(Error::invalid("enumeration oracle requires a drop_z model"));
    }
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (y_post, _) = encode(&tape, params, config, batch, Mode::Eval, &mut rng)?;
    let probs = tape.softmax(&y_post.logits)?;
    let q = probs.to_f64_vec();
    let (b, k) = (batch.batch, config.n_classes);

    let mut expected_recon = vec![0.0; b];
    for class in 0..k {
        let y = one_hot::<F>(&vec![class; b], k)?;
        let rows = decode_logprob(&tape, params, config, batch, &y, None, Mode::Eval, &mut rng)?;
        for (bi, lp) in rows.to_f64_vec().into_iter().enumerate() {
            expected_recon[bi] += q[bi * k + class] * lp;
        }
    }

    let mut mean = 0.0;
    for bi in 0..b {
        let mut kl = 0.0;
        for c in 0..k {
            let qv = q[bi * k + c];
            if qv > 0.0 {
                kl += qv * (qv * k as f64).ln();
            }
        }
        mean += expected_recon[bi] - kl;
    }
    Ok(mean / b as f64)
}

/// Monte Carlo estimate of the same bound with hard class draws y ~ q(y|x)
/// instead of the relaxed sample. Returns (mean, standard error) over
/// `draws` evaluations.
pub fn mc_unlabeled_elbo<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &TokenBatch,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if !config.drop_z {
        return Err(Error::invalid("MC oracle requires a drop_z model"));
    }
    if draws < 2 {
        return Err(Error::invalid("MC oracle needs at least two draws"));
    }
    let tape = Tape::new();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let (y_post, _) = encode(&tape, params, config, batch, Mode::Eval, &mut dummy)?;
    let probs = tape.softmax(&y_post.logits)?;
    let q = probs.to_f64_vec();
    let (b, k) = (batch.batch, config.n_classes);

    let mut kl_mean = 0.0;
    for bi in 0..b {
        for c in 0..k {
            let qv = q[bi * k + c];
            if qv > 0.0 {
                kl_mean += qv * (qv * k as f64).ln();
            }
        }
    }
    kl_mean /= b as f64;

    let mut rng = stream(seed, Domain::Verify, 0);
    let mut values = Vec::with_capacity(draws);
    let mut labels = vec![0usize; b];
    for _ in 0..draws {
        for (bi, slot) in labels.iter_mut().enumerate() {
            *slot = sample_class(&mut rng, &q[bi * k..(bi + 1) * k]);
        }
        let y = one_hot::<F>(&labels, k)?;
        let rows = decode_logprob(&tape, params, config, batch, &y, None, Mode::Eval, &mut dummy)?;
        let recon = rows.to_f64_vec().iter().sum::<f64>() / b as f64;
        values.push(recon - kl_mean);
    }

    let n = draws as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

fn sample_class<R: Rng>(rng: &mut R, row: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// Per-row log p(x | y) for a model with scalar z, by Simpson quadrature of
/// ∫ N(z; 0, 1) p(x | y, z) dz over [−half_width, half_width] in eval mode.
/// The labeled bound without its alpha term can never exceed this.
pub fn quadrature_labeled_logpx<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &TokenBatch,
    half_width: f64,
    nodes: usize,
) -> Result<Vec<f64>> {
    if config.drop_z || config.z_dim != 1 {
        return Err(Error::invalid("quadrature oracle requires z_dim == 1"));
    }
    if nodes < 3 || nodes % 2 == 0 {
        return Err(Error::invalid("Simpson rule needs an odd node count >= 3"));
    }
    if !(half_width.is_finite() && half_width > 0.0) {
        return Err(Error::invalid("quadrature half_width must be positive"));
    }
    let labels = batch
        .labels
        .clone()
        .ok_or_else(|| Error::invalid("quadrature oracle needs labels"))?;
    let y = one_hot::<F>(&labels, config.n_classes)?;

    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = batch.batch;
    let h = 2.0 * half_width / (nodes - 1) as f64;
    const HALF_LOG_TWO_PI: f64 = 0.9189385332046727;

    // log-sum-exp accumulation per row over quadrature nodes.
    let mut max_term = vec![f64::NEG_INFINITY; b];
    let mut terms: Vec<Vec<f64>> = vec![Vec::with_capacity(nodes); b];
    for i in 0..nodes {
        let zv = -half_width + i as f64 * h;
        let simpson = if i == 0 || i + 1 == nodes {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let z = Tensor::full(vec![b, 1], F::from_f64(zv));
        let rows = decode_logprob(&tape, params, config, batch, &y, Some(&z), Mode::Eval, &mut rng)?;
        let log_weight = (simpson * h / 3.0).ln() - 0.5 * zv * zv - HALF_LOG_TWO_PI;
        for (bi, lp) in rows.to_f64_vec().into_iter().enumerate() {
            let t = log_weight + lp;
            max_term[bi] = max_term[bi].max(t);
            terms[bi].push(t);
        }
    }
    Ok((0..b)
        .map(|bi| {
            let m = max_term[bi];
            m + terms[bi].iter().map(|t| (t - m).exp()).sum::<f64>().ln()
        })
        .collect())
}

// ---- discrete decomposition toys ----------------------------------------------------------

/// A fully enumerable joint p(y) p(z) p(x|y,z) with a factored variational
/// family q(y|x) q(z|x). Everything is a finite table, so the unlabeled
/// bound, the evidence, and the posterior divergence are all exact sums.
#[derive(Debug, Clone)]
pub struct DiscreteToy {
    pub k: usize,
    pub m: usize,
    pub x_card: usize,
    /// p(y), length k.
    pub p_y: Vec<f64>,
    /// p(z), length m.
    pub p_z: Vec<f64>,
    /// p(x | y, z), row (y·m + z) over x, length k·m·x_card.
    pub p_x_given_yz: Vec<f64>,
    /// q(y | x), row x over y, length x_card·k.
    pub q_y_given_x: Vec<f64>,
    /// q(z | x), row x over z, length x_card·m.
    pub q_z_given_x: Vec<f64>,
}

/// The three exact quantities tied by
/// `elbo = log_evidence − posterior_kl`.
#[derive(Debug, Clone, Copy)]
pub struct ElboDecomposition {
    pub elbo: f64,
    pub log_evidence: f64,
    pub posterior_kl: f64,
}

impl ElboDecomposition {
    /// |elbo − (log evidence − KL)|; zero up to float association.
    pub fn residual(&self) -> f64 {
        (self.elbo - (self.log_evidence - self.posterior_kl)).abs()
    }
}

const TOY_NORM_TOL: f64 = 1e-9;

fn check_rows(name: &str, table: &[f64], rows: usize, width: usize) -> Result<()> {
    if table.len() != rows * width {
        return Err(Error::NotNormalized(format!(
            "{name}: expected {rows}x{width} entries, found {}",
            table.len()
        )));
    }
    for r in 0..rows {
        let row = &table[r * width..(r + 1) * width];
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NotNormalized(format!("{name}: row {r} has invalid mass")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > TOY_NORM_TOL {
            return Err(Error::NotNormalized(format!("{name}: row {r} sums to {sum}")));
        }
    }
    Ok(())
}

fn normalized_row<R: Rng>(rng: &mut R, width: usize) -> Vec<f64> {
    // Entries bounded away from zero keep every log finite.
    let mut row: Vec<f64> = (0..width).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v /= sum;
    }
    row
}

impl DiscreteToy {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.x_card == 0 {
            return Err(Error::NotNormalized("toy has an empty axis".into()));
        }
        check_rows("p_y", &self.p_y, 1, self.k)?;
        check_rows("p_z", &self.p_z, 1, self.m)?;
        check_rows("p_x_given_yz", &self.p_x_given_yz, self.k * self.m, self.x_card)?;
        check_rows("q_y_given_x", &self.q_y_given_x, self.x_card, self.k)?;
        check_rows("q_z_given_x", &self.q_z_given_x, self.x_card, self.m)?;
        Ok(())
    }

    /// Random strictly positive tables; q bears no relation to the posterior.
    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, Domain::Verify, 0);
        let k = rng.gen_range(2..=4);
        let m = rng.gen_range(2..=4);
        let x_card = rng.gen_range(2..=16);
        let p_y = normalized_row(&mut rng, k);
        let p_z = normalized_row(&mut rng, m);
        let mut p_x_given_yz = Vec::with_capacity(k * m * x_card);
        for _ in 0..k * m {
            p_x_given_yz.extend(normalized_row(&mut rng, x_card));
        }
        let mut q_y_given_x = Vec::with_capacity(x_card * k);
        let mut q_z_given_x = Vec::with_capacity(x_card * m);
        for _ in 0..x_card {
            q_y_given_x.extend(normalized_row(&mut rng, k));
            q_z_given_x.extend(normalized_row(&mut rng, m));
        }
        DiscreteToy { k, m, x_card, p_y, p_z, p_x_given_yz, q_y_given_x, q_z_given_x }
    }

    /// A toy whose likelihood factors as p(x₁|y)·p(x₂|z), with q set to the
    /// exact posterior (which factors the same way). Its posterior KL is
    /// zero and the bound is tight.
    pub fn factorized(seed: u64) -> Self {
        let mut rng = stream(seed, Domain::Verify, 1);
        let k = rng.gen_range(2..=4);
        let m = rng.gen_range(2..=4);
        let x1 = rng.gen_range(2..=4);
        let x2 = rng.gen_range(2..=4);
        let x_card = x1 * x2;
        let p_y = normalized_row(&mut rng, k);
        let p_z = normalized_row(&mut rng, m);
        let p1: Vec<Vec<f64>> = (0..k).map(|_| normalized_row(&mut rng, x1)).collect();
        let p2: Vec<Vec<f64>> = (0..m).map(|_| normalized_row(&mut rng, x2)).collect();

        let mut p_x_given_yz = vec![0.0; k * m * x_card];
        for y in 0..k {
            for z in 0..m {
                for a in 0..x1 {
                    for b in 0..x2 {
                        p_x_given_yz[(y * m + z) * x_card + (a * x2 + b)] = p1[y][a] * p2[z][b];
                    }
                }
            }
        }

        let mut q_y_given_x = vec![0.0; x_card * k];
        let mut q_z_given_x = vec![0.0; x_card * m];
        for a in 0..x1 {
            let norm: f64 = (0..k).map(|y| p_y[y] * p1[y][a]).sum();
            for b in 0..x2 {
                for y in 0..k {
                    q_y_given_x[(a * x2 + b) * k + y] = p_y[y] * p1[y][a] / norm;
                }
            }
        }
        for b in 0..x2 {
            let norm: f64 = (0..m).map(|z| p_z[z] * p2[z][b]).sum();
            for a in 0..x1 {
                for z in 0..m {
                    q_z_given_x[(a * x2 + b) * m + z] = p_z[z] * p2[z][b] / norm;
                }
            }
        }
        DiscreteToy { k, m, x_card, p_y, p_z, p_x_given_yz, q_y_given_x, q_z_given_x }
    }

    fn check_x(&self, x: usize) -> Result<()> {
        if x >= self.x_card {
            return Err(Error::invalid(format!(
                "observation {x} outside alphabet of {}",
                self.x_card
            )));
        }
        Ok(())
    }

    fn likelihood(&self, y: usize, z: usize, x: usize) -> f64 {
        self.p_x_given_yz[(y * self.m + z) * self.x_card + x]
    }

    /// Σ_{y,z} q(y|x) q(z|x) [log p(x|y,z) + log p(y) + log p(z)
    ///                        − log q(y|x) − log q(z|x)], with 0·log 0 = 0.
    pub fn elbo(&self, x: usize) -> Result<f64> {
        self.check_x(x)?;
        let mut acc = 0.0;
        for y in 0..self.k {
            let qy = self.q_y_given_x[x * self.k + y];
            if qy == 0.0 {
                continue;
            }
            for z in 0..self.m {
                let qz = self.q_z_given_x[x * self.m + z];
                if qz == 0.0 {
                    continue;
                }
                let joint = self.likelihood(y, z, x) * self.p_y[y] * self.p_z[z];
                if joint == 0.0 {
                    return Err(Error::invalid(
                        "elbo is -inf: q places mass where the joint vanishes",
                    ));
                }
                acc += qy * qz * (joint.ln() - qy.ln() - qz.ln());
            }
        }
        Ok(acc)
    }

    /// log Σ_{y,z} p(y) p(z) p(x|y,z).
    pub fn log_evidence(&self, x: usize) -> Result<f64> {
        self.check_x(x)?;
        let mut evidence = 0.0;
        for y in 0..self.k {
            for z in 0..self.m {
                evidence += self.p_y[y] * self.p_z[z] * self.likelihood(y, z, x);
            }
        }
        if evidence <= 0.0 {
            return Err(Error::invalid("observation has zero evidence"));
        }
        Ok(evidence.ln())
    }

    /// KL[q(y|x) q(z|x) ‖ p(y,z|x)] over the joint (y, z) grid.
    pub fn posterior_kl(&self, x: usize) -> Result<f64> {
        self.check_x(x)?;
        let log_evidence = self.log_evidence(x)?;
        let mut acc = 0.0;
        for y in 0..self.k {
            let qy = self.q_y_given_x[x * self.k + y];
            for z in 0..self.m {
                let q = qy * self.q_z_given_x[x * self.m + z];
                if q == 0.0 {
                    continue;
                }
                let joint = self.likelihood(y, z, x) * self.p_y[y] * self.p_z[z];
                if joint == 0.0 {
                    return Err(Error::invalid(
                        "posterior KL is +inf: q places mass where the posterior vanishes",
                    ));
                }
                let log_posterior = joint.ln() - log_evidence;
                acc += q * (q.ln() - log_posterior);
            }
        }
        Ok(acc)
    }
}

/// Exact bound, evidence, and posterior divergence for one observation.
/// The caller asserts `residual()` against its tolerance.
pub fn elbo_decomposition_check(toy: &DiscreteToy, x: usize) -> Result<ElboDecomposition> {
    toy.validate()?;
    Ok(ElboDecomposition {
        elbo: toy.elbo(x)?,
        log_evidence: toy.log_evidence(x)?,
        posterior_kl: toy.posterior_kl(x)?,
    })
}

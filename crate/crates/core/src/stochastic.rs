//! Stochastic computation nodes: reparameterized Gaussian sampling,
//! Gumbel-Softmax sampling, closed-form KL divergences, the
//! sticking-the-landing (STL) log-density, and the KL annealing schedule.
//!
//! Every sampler takes its noise as an explicit tensor so callers own
//! randomness and draws stay reproducible given (seed, step, batch index).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Diagonal Gaussian posterior q(z|x). `sigma` is softplus-parameterized in
/// the model, so it is strictly positive there; a zero boundary is accepted
/// for sampling but rejected by the density-based operations.
#[derive(Clone)]
pub struct GaussianPosterior<F> {
    pub mu: Tensor<F>,
    pub sigma: Tensor<F>,
}

impl<F: Scalar> GaussianPosterior<F> {
    pub fn new(mu: Tensor<F>, sigma: Tensor<F>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::ShapeMismatch {
                op: "gaussian-posterior",
                left: mu.shape().to_vec(),
                right: sigma.shape().to_vec(),
            });
        }
        if sigma.data().iter().any(|&s| s < F::zero()) {
            return Err(Error::invalid("gaussian posterior: negative sigma"));
        }
        Ok(GaussianPosterior { mu, sigma })
    }

    pub fn z_dim(&self) -> usize {
        *self.mu.shape().last().unwrap_or(&0)
    }
}

/// Categorical posterior q(y|x) held as logits.
#[derive(Clone)]
pub struct CategoricalPosterior<F> {
    pub logits: Tensor<F>,
}

impl<F: Scalar> CategoricalPosterior<F> {
    pub fn new(logits: Tensor<F>) -> Result<Self> {
        if logits.shape().len() != 2 || logits.shape()[1] == 0 {
            return Err(Error::InvalidShape {
                op: "categorical-posterior",
                shape: logits.shape().to_vec(),
                reason: "expected (batch, classes)".into(),
            });
        }
        Ok(CategoricalPosterior { logits })
    }

    pub fn n_classes(&self) -> usize {
        self.logits.shape()[1]
    }
}

/// KL warm-up: the coefficient is zero for `flat_steps`, then climbs
/// linearly to one over `ramp_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnealSchedule {
    pub flat_steps: u64,
    pub ramp_steps: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { flat_steps: 3000, ramp_steps: 3000 }
    }
}

/// Annealing coefficient at a training step; piecewise linear,
/// nondecreasing, clamped to [0, 1].
pub fn anneal_coeff(step: u64, sched: &AnnealSchedule) -> f64 {
    if step <= sched.flat_steps {
        return 0.0;
    }
    if sched.ramp_steps == 0 {
        return 1.0;
    }
    (((step - sched.flat_steps) as f64) / (sched.ramp_steps as f64)).min(1.0)
}

// ---- noise sources -----------------------------------------------------------

/// Standard-normal noise tensor.
pub fn standard_normal_noise<F: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// Uniform noise on the open interval (0, 1), safe for log transforms.
pub fn uniform_open_noise<F: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen();
            if v > 0.0 && v < 1.0 {
                break F::from_f64(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("noise shape")
}

// ---- samplers ------------------------------------------------------------------

/// Reparameterized Gaussian sample z = mu + sigma ⊙ epsilon; gradients flow
/// to mu and sigma through the sample.
pub fn sample_gaussian_reparam<F: Scalar>(
    tape: &Tape<F>,
    post: &GaussianPosterior<F>,
    epsilon: &Tensor<F>,
) -> Result<Tensor<F>> {
    if epsilon.shape() != post.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_gaussian_reparam",
            left: post.mu.shape().to_vec(),
            right: epsilon.shape().to_vec(),
        });
    }
    tape.add(&post.mu, &tape.mul(&post.sigma, epsilon)?)
}

/// Gumbel-Softmax relaxed one-hot: softmax((logits − log(−log u)) / tau).
/// Differentiable in the logits; rows sum to one.
pub fn gumbel_softmax_sample<F: Scalar>(
    tape: &Tape<F>,
    post: &CategoricalPosterior<F>,
    tau: f64,
    u: &Tensor<F>,
) -> Result<Tensor<F>> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("gumbel-softmax temperature {tau} <= 0")));
    }
    if u.shape() != post.logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "gumbel_softmax_sample",
            left: post.logits.shape().to_vec(),
            right: u.shape().to_vec(),
        });
    }
    let zero = F::zero();
    let one = F::one();
    if u.data().iter().any(|&v| v <= zero || v >= one) {
        return Err(Error::invalid("gumbel noise must lie strictly inside (0, 1)"));
    }
    let g: Vec<F> = u.data().iter().map(|&v| -(-(v.ln())).ln()).collect();
    let g = Tensor::new(u.shape().to_vec(), g).expect("gumbel shape");
    let shifted = tape.add(&post.logits, &g)?;
    let scaled = tape.scale(&shifted, F::from_f64(1.0 / tau))?;
    tape.softmax(&scaled)
}

// ---- divergences ------------------------------------------------------------------

/// Per-row KL[q(z|x) || N(0, I)] = 0.5 Σᵢ (muᵢ² + sigmaᵢ² − log sigmaᵢ² − 1).
pub fn kl_gaussian_standard<F: Scalar>(
    tape: &Tape<F>,
    post: &GaussianPosterior<F>,
) -> Result<Tensor<F>> {
    if post.sigma.data().iter().any(|&s| s <= F::zero()) {
        return Err(Error::invalid("kl_gaussian_standard: nonpositive sigma"));
    }
    let last = post.mu.shape().len() - 1;
    let mu2 = tape.mul(&post.mu, &post.mu)?;
    let s2 = tape.mul(&post.sigma, &post.sigma)?;
    let log_s2 = tape.log(&s2)?;
    let ones = Tensor::full(post.mu.shape().to_vec(), F::one());
    let inner = tape.sub(&tape.sub(&tape.add(&mu2, &s2)?, &log_s2)?, &ones)?;
    let row = tape.sum(&inner, Some(last))?;
    tape.scale(&row, F::from_f64(0.5))
}

/// Per-row KL[q || p] for categorical rows, with 0·log 0 = 0.
pub fn kl_categorical<F: Scalar>(
    tape: &Tape<F>,
    q_probs: &Tensor<F>,
    p_probs: &Tensor<F>,
) -> Result<Tensor<F>> {
    tape.kl_categorical(q_probs, p_probs)
}

// ---- log-densities -------------------------------------------------------------------

const LOG_TWO_PI: f64 = 1.8378770664093453;

/// Per-row diagonal-Gaussian log-density of z under (mu, sigma), gradients
/// flowing to z, mu, and sigma.
pub fn gaussian_log_density<F: Scalar>(
    tape: &Tape<F>,
    z: &Tensor<F>,
    mu: &Tensor<F>,
    sigma: &Tensor<F>,
) -> Result<Tensor<F>> {
    if z.shape() != mu.shape() || z.shape() != sigma.shape() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_log_density",
            left: z.shape().to_vec(),
            right: mu.shape().to_vec(),
        });
    }
    if sigma.data().iter().any(|&s| s <= F::zero()) {
        return Err(Error::invalid("gaussian_log_density: nonpositive sigma"));
    }
    let last = z.shape().len() - 1;
    let log_sigma = tape.log(sigma)?;
    // 1/sigma = exp(-log sigma) keeps the expression inside the primitive set.
    let inv_sigma = tape.exp(&tape.neg(&log_sigma)?)?;
    let unit = tape.mul(&tape.sub(z, mu)?, &inv_sigma)?;
    let quad = tape.mul(&unit, &unit)?;
    let halves = Tensor::full(z.shape().to_vec(), F::from_f64(0.5 * LOG_TWO_PI));
    let per_dim = tape.add(
        &tape.add(&tape.scale(&quad, F::from_f64(0.5))?, &log_sigma)?,
        &halves,
    )?;
    tape.neg(&tape.sum(&per_dim, Some(last))?)
}

/// STL log-density: log q(z | detach(mu), detach(sigma)). Values equal the
/// undetached density; gradients reach the variational parameters only
/// through z's reparameterized path.
pub fn stl_log_q<F: Scalar>(
    tape: &Tape<F>,
    z: &Tensor<F>,
    post: &GaussianPosterior<F>,
) -> Result<Tensor<F>> {
    gaussian_log_density(tape, z, &post.mu.detach(), &post.sigma.detach())
}

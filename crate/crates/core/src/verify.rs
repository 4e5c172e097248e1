//! Executable verification suites: finite-difference gradient checks over
//! every tape primitive and every variant objective, the discrete ELBO
//! decomposition identity, closed-form KL terms against Monte Carlo and
//! direct-summation oracles, Gumbel-Softmax argmax frequencies, and the
//! STL estimator properties.
//!
//! All suites run in f64. Fault injection corrupts exactly one comparison
//! so the negative controls prove each suite can actually fail.

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{ModelConfig, ModelParams, TokenBatch};
use crate::objectives::{
    elbo_decomposition_check, labeled_objective, unlabeled_objective, DiscreteToy, StepNoise,
    VariantConfig,
};
use crate::rng::{stream, Domain};
use crate::stochastic::{
    gumbel_softmax_sample, kl_gaussian_standard, sample_gaussian_reparam, stl_log_q,
    uniform_open_noise, CategoricalPosterior, GaussianPosterior,
};
use crate::tensor::{finite_difference_check, Tape, Tensor};

/// Relative-error bound for every gradient check.
pub const GRAD_TOL: f64 = 1e-4;
/// Finite-difference step for primitive-level checks.
const FD_STEP: f64 = 1e-3;
/// Larger step for objective-level checks: loss magnitudes push stencil
/// roundoff above the near-zero-coordinate floor at smaller steps.
const FD_STEP_OBJECTIVE: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Elbo,
    Estimators,
    All,
}

impl Suite {
    pub fn from_name(name: &str) -> Result<Suite> {
        match name.to_ascii_lowercase().as_str() {
            "gradcheck" => Ok(Suite::Gradcheck),
            "elbo" => Ok(Suite::Elbo),
            "estimators" => Ok(Suite::Estimators),
            "all" => Ok(Suite::All),
            other => Err(Error::config(format!(
                "unknown suite `{other}` (expected gradcheck|elbo|estimators|all)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Elbo => "elbo",
            Suite::Estimators => "estimators",
            Suite::All => "all",
        }
    }
}

/// Negative controls. Each fault corrupts one comparison in one suite;
/// everything else must keep passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Backward pass that scales mul's gradient by 1 + 1e-3.
    GradientScale,
    /// Closed-form Gaussian KL with its sign flipped.
    KlSign,
    /// Gumbel draws compared against doubled logits.
    GumbelBias,
}

impl Fault {
    pub fn targets(self) -> Suite {
        match self {
            Fault::GradientScale => Suite::Gradcheck,
            Fault::KlSign => Suite::Elbo,
            Fault::GumbelBias => Suite::Estimators,
        }
    }
}

/// One verified margin: passes when `value` is finite and strictly below
/// `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn bound(name: impl Into<String>, value: f64, threshold: f64) -> Check {
        Check {
            name: name.into(),
            value,
            threshold,
            pass: value.is_finite() && value < threshold,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: {:.3e} (< {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks.iter().map(Check::line).collect()
    }
}

/// Run one suite (or all of them) with an optional injected fault.
pub fn run_suite(suite: Suite, fault: Option<Fault>) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Gradcheck => run_gradcheck(fault)?,
        Suite::Elbo => run_elbo(fault)?,
        Suite::Estimators => run_estimators(fault)?,
        Suite::All => {
            let mut all = run_gradcheck(fault)?;
            all.extend(run_elbo(fault)?);
            all.extend(run_estimators(fault)?);
            all
        }
    };
    Ok(SuiteReport {
        suite: suite.name(),
        checks,
    })
}

// ---- gradcheck suite -------------------------------------------------------------------

fn pattern(shape: &[usize], scale: f64, offset: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| (i as f64 * 0.61803).sin() * scale + offset)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

/// Reduce to a scalar through fixed weights so permuted or dropped slots
/// cannot cancel.
fn weighted_sum(tape: &Tape<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let w = pattern(x.shape(), 1.0, 0.3);
    tape.sum(&tape.mul(x, &w)?, None)
}

fn fd_check<Fun>(name: &str, inputs: &[Tensor<f64>], step: f64, f: Fun) -> Result<Check>
where
    Fun: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let report = finite_difference_check(inputs, step, f)?;
    let value = if report.non_finite.is_empty() {
        report.max_rel_error
    } else {
        f64::INFINITY
    };
    Ok(Check::bound(name, value, GRAD_TOL))
}

/// Fault branch for mul: the analytic gradient of sum(a .* b) w.r.t. a is
/// exactly b; a backward pass that scaled it by 1 + 1e-3 must land above
/// the tolerance when compared with the fourth-order stencil.
fn faulty_mul_check() -> Check {
    let a = pattern(&[2, 2], 1.0, 0.2);
    let b = pattern(&[2, 2], 0.8, -0.4);
    let loss = |av: &[f64]| -> f64 { av.iter().zip(b.data()).map(|(x, y)| x * y).sum() };
    let h = FD_STEP;
    let mut max_rel: f64 = 0.0;
    for i in 0..a.numel() {
        let at = |delta: f64| {
            let mut v = a.data().to_vec();
            v[i] += delta;
            loss(&v)
        };
        let numeric =
            (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        let corrupted = b.data()[i] * (1.0 + 1e-3);
        let rel = (corrupted - numeric).abs() / numeric.abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Check::bound("gradcheck/mul", max_rel, GRAD_TOL)
}

fn primitive_checks(fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let a23 = pattern(&[2, 3], 1.0, 0.1);
    let b23 = pattern(&[2, 3], 0.7, -0.2);

    checks.push(fd_check("gradcheck/add", &[a23.clone(), b23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.add(&i[0], &i[1])?)
    })?);
    checks.push(fd_check("gradcheck/sub", &[a23.clone(), b23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.sub(&i[0], &i[1])?)
    })?);
    if fault == Some(Fault::GradientScale) {
        checks.push(faulty_mul_check());
    } else {
        checks.push(fd_check("gradcheck/mul", &[a23.clone(), b23.clone()], FD_STEP, |t, i| {
            weighted_sum(t, &t.mul(&i[0], &i[1])?)
        })?);
    }
    checks.push(fd_check("gradcheck/neg", &[a23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.neg(&i[0])?)
    })?);
    checks.push(fd_check("gradcheck/scale", &[a23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.scale(&i[0], 0.7)?)
    })?);
    checks.push(fd_check(
        "gradcheck/matmul",
        &[pattern(&[2, 3], 1.0, 0.2), pattern(&[3, 2], 0.9, -0.1)],
        FD_STEP,
        |t, i| weighted_sum(t, &t.matmul(&i[0], &i[1])?),
    )?);
    checks.push(fd_check("gradcheck/exp", &[a23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.exp(&i[0])?)
    })?);
    checks.push(fd_check(
        "gradcheck/log",
        &[pattern(&[2, 3], 0.4, 1.2)],
        FD_STEP,
        |t, i| weighted_sum(t, &t.log(&i[0])?),
    )?);
    checks.push(fd_check("gradcheck/tanh", &[a23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.tanh(&i[0])?)
    })?);
    checks.push(fd_check("gradcheck/sigmoid", &[a23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.sigmoid(&i[0])?)
    })?);
    checks.push(fd_check("gradcheck/softplus", &[a23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.softplus(&i[0])?)
    })?);
    let a24 = pattern(&[2, 4], 1.3, 0.0);
    checks.push(fd_check("gradcheck/softmax", &[a24.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.softmax(&i[0])?)
    })?);
    checks.push(fd_check("gradcheck/log_softmax", &[a24.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.log_softmax(&i[0])?)
    })?);
    checks.push(fd_check("gradcheck/sum", &[a23.clone()], FD_STEP, |t, i| {
        t.sum(&t.mul(&i[0], &pattern(&[2, 3], 1.0, 0.3))?, None)
    })?);
    checks.push(fd_check("gradcheck/sum-axis", &[a23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.sum(&i[0], Some(0))?)
    })?);
    checks.push(fd_check("gradcheck/mean", &[a23.clone()], FD_STEP, |t, i| {
        t.mean(&t.mul(&i[0], &pattern(&[2, 3], 1.0, 0.3))?, None)
    })?);
    checks.push(fd_check("gradcheck/mean-axis", &[a23.clone()], FD_STEP, |t, i| {
        weighted_sum(t, &t.mean(&i[0], Some(1))?)
    })?);
    checks.push(fd_check(
        "gradcheck/concat",
        &[pattern(&[2, 2], 1.0, 0.1), pattern(&[2, 3], 0.8, -0.3)],
        FD_STEP,
        |t, i| weighted_sum(t, &t.concat(&[&i[0], &i[1]], 1)?),
    )?);
    checks.push(fd_check(
        "gradcheck/slice",
        &[pattern(&[2, 5], 1.0, 0.2)],
        FD_STEP,
        |t, i| weighted_sum(t, &t.slice(&i[0], 1, 1, 3)?),
    )?);
    checks.push(fd_check(
        "gradcheck/reshape",
        &[pattern(&[2, 6], 1.0, 0.1)],
        FD_STEP,
        |t, i| weighted_sum(t, &t.reshape(&i[0], vec![3, 4])?),
    )?);
    checks.push(fd_check(
        "gradcheck/gather_rows",
        &[pattern(&[5, 3], 1.0, 0.0)],
        FD_STEP,
        // Repeated id exercises gradient accumulation into one row.
        |t, i| weighted_sum(t, &t.gather_rows(&i[0], &[0, 2, 2, 4])?),
    )?);
    checks.push(fd_check(
        "gradcheck/kl_categorical",
        &[pattern(&[2, 4], 1.1, 0.0), pattern(&[2, 4], 0.9, 0.2)],
        FD_STEP,
        |t, i| {
            let q = t.softmax(&i[0])?;
            let p = t.softmax(&i[1])?;
            weighted_sum(t, &t.kl_categorical(&q, &p)?)
        },
    )?);
    Ok(checks)
}

fn toy_model_config(drop_z: bool) -> ModelConfig {
    let mut cfg = ModelConfig::new(7, 2);
    cfg.embed_dim = 3;
    cfg.enc_hidden = 2;
    cfg.z_dim = 2;
    cfg.dec_hidden = 3;
    cfg.drop_z = drop_z;
    cfg.max_len = 8;
    cfg.dropout = 0.5;
    cfg
}

fn slug(name: &str) -> String {
    name.to_ascii_lowercase()
        .replace(['{', '}'], "")
        .replace(',', "-")
}

fn objective_checks() -> Result<Vec<Check>> {
    let variants = [
        VariantConfig::supervised(),
        VariantConfig::ssvae(0.1),
        VariantConfig::without_kl(0.1),
        VariantConfig::without_z(0.1),
        VariantConfig::without_kl_z(0.1),
    ];
    let batch = TokenBatch::from_rows(&[vec![4, 5, 6], vec![5, 4]], Some(vec![0, 1]))?;
    let ubatch = TokenBatch::from_rows(&[vec![6, 4], vec![4, 5, 6, 5]], None)?;
    let mut checks = Vec::new();
    for v in variants {
        let cfg = toy_model_config(v.drop_z || v.supervised_only);
        let params = ModelParams::<f64>::init(&cfg, 23)?;
        let mut flat: Vec<Tensor<f64>> = Vec::new();
        params.for_each(|_, t| flat.push(t.clone()));
        let check = fd_check(
            &format!("gradcheck/objective-{}", slug(v.name())),
            &flat,
            FD_STEP_OBJECTIVE,
            |tape, ins| {
                let mut it = ins.iter();
                let watched =
                    params.map_named(|_, _| it.next().expect("one input per param").clone());
                let lab = labeled_objective(
                    tape,
                    &watched,
                    &cfg,
                    &v,
                    &batch,
                    4500,
                    StepNoise::labeled(9, 4500),
                    Mode::Train,
                )?;
                if v.supervised_only {
                    return Ok(lab.loss);
                }
                let unlab = unlabeled_objective(
                    tape,
                    &watched,
                    &cfg,
                    &v,
                    &ubatch,
                    4500,
                    StepNoise::unlabeled(9, 4500),
                    Mode::Train,
                )?;
                tape.add(&lab.loss, &unlab.loss)
            },
        )?;
        checks.push(check);
    }
    Ok(checks)
}

pub fn run_gradcheck(fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut checks = primitive_checks(fault)?;
    checks.extend(objective_checks()?);
    Ok(checks)
}

// ---- elbo suite ------------------------------------------------------------------------

/// Evaluate the closed-form standard-Gaussian KL for scalar (mu, sigma).
fn gaussian_kl_closed(mu: f64, sigma: f64, fault: Option<Fault>) -> Result<f64> {
    let tape = Tape::new();
    let post = GaussianPosterior::new(
        Tensor::new(vec![1, 1], vec![mu])?,
        Tensor::new(vec![1, 1], vec![sigma])?,
    )?;
    let kl = kl_gaussian_standard(&tape, &post)?.data()[0];
    Ok(if fault == Some(Fault::KlSign) { -kl } else { kl })
}

/// Monte Carlo oracle for KL[N(mu, sigma) || N(0, 1)]: sample mean and
/// standard error of log q(z) - log p(z) under z ~ q, written in plain
/// arithmetic with no shared code.
fn gaussian_kl_mc(mu: f64, sigma: f64, draws: usize, rng: &mut impl Rng) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..draws {
        let eps: f64 = rng.sample(rand_distr::StandardNormal);
        let z = mu + sigma * eps;
        let log_q = -0.5 * eps * eps - sigma.ln();
        let log_p = -0.5 * z * z;
        let v = log_q - log_p;
        sum += v;
        sumsq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Direct-summation oracle for categorical KL with 0 log 0 = 0.
fn categorical_kl_direct(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&qi, &pi)| if qi == 0.0 { 0.0 } else { qi * (qi / pi).ln() })
        .sum()
}

fn categorical_kl_closed(q: &[f64], p: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let qt = Tensor::new(vec![1, q.len()], q.to_vec())?;
    let pt = Tensor::new(vec![1, p.len()], p.to_vec())?;
    Ok(tape.kl_categorical(&qt, &pt)?.data()[0])
}

fn random_simplex(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn run_elbo(fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    // Decomposition identity on 10 random enumerable toys.
    let mut max_residual: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    let mut max_slack: f64 = f64::NEG_INFINITY;
    for seed in 0..10 {
        let toy = DiscreteToy::random(seed);
        for x in 0..toy.x_card {
            let d = elbo_decomposition_check(&toy, x)?;
            max_residual = max_residual.max(d.residual().abs());
            min_kl = min_kl.min(d.posterior_kl);
            max_slack = max_slack.max(d.elbo - d.log_evidence);
        }
    }
    checks.push(Check::bound("elbo/decomposition-residual", max_residual, 1e-10));
    checks.push(Check::bound("elbo/posterior-kl-nonnegative", -min_kl, 1e-12));
    checks.push(Check::bound("elbo/bound-never-exceeds-evidence", max_slack, 1e-12));

    // With q set to the exact posterior the bound is tight.
    let mut max_gap: f64 = 0.0;
    for seed in 0..5 {
        let toy = DiscreteToy::factorized(seed);
        for x in 0..toy.x_card {
            let d = elbo_decomposition_check(&toy, x)?;
            max_gap = max_gap.max((d.elbo - d.log_evidence).abs());
        }
    }
    checks.push(Check::bound("elbo/tight-at-posterior", max_gap, 1e-10));

    // Gaussian KL closed form vs Monte Carlo over a 20-point grid.
    let mus = [-2.0, -0.75, 0.0, 1.0, 2.0];
    let sigmas = [0.3, 0.8, 1.5, 2.5];
    let mut rng = stream(17, Domain::Verify, 40);
    let mut max_z: f64 = 0.0;
    let mut min_closed = f64::INFINITY;
    for &mu in &mus {
        for &sigma in &sigmas {
            let closed = gaussian_kl_closed(mu, sigma, fault)?;
            let (mc, se) = gaussian_kl_mc(mu, sigma, 40_000, &mut rng);
            max_z = max_z.max((closed - mc).abs() / se);
            min_closed = min_closed.min(closed);
        }
    }
    checks.push(Check::bound("elbo/kl-gaussian-mc", max_z, 3.0));
    checks.push(Check::bound("elbo/kl-gaussian-nonnegative", -min_closed, 1e-12));
    checks.push(Check::bound(
        "elbo/kl-gaussian-zero-at-equality",
        gaussian_kl_closed(0.0, 1.0, fault)?.abs(),
        1e-8,
    ));

    // Categorical KL vs direct summation over a 20-point grid.
    let mut max_diff: f64 = 0.0;
    let mut min_cat = f64::INFINITY;
    for i in 0..20 {
        let k = 2 + (i % 3);
        let q = random_simplex(k, &mut rng);
        let p = random_simplex(k, &mut rng);
        let closed = categorical_kl_closed(&q, &p)?;
        max_diff = max_diff.max((closed - categorical_kl_direct(&q, &p)).abs());
        min_cat = min_cat.min(closed);
    }
    checks.push(Check::bound("elbo/kl-categorical-direct-sum", max_diff, 1e-10));
    checks.push(Check::bound("elbo/kl-categorical-nonnegative", -min_cat, 1e-12));
    let p_eq = random_simplex(4, &mut rng);
    checks.push(Check::bound(
        "elbo/kl-categorical-zero-at-equality",
        categorical_kl_closed(&p_eq, &p_eq)?.abs(),
        1e-8,
    ));
    Ok(checks)
}

// ---- estimators suite ------------------------------------------------------------------

fn softmax3(logits: &[f64; 3]) -> [f64; 3] {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|v| (v - mx).exp());
    let total: f64 = exps.iter().sum();
    exps.map(|e| e / total)
}

fn gumbel_checks(fault: Option<Fault>) -> Result<Vec<Check>> {
    let logits = [0.5, -0.3, 1.1];
    let expected = if fault == Some(Fault::GumbelBias) {
        softmax3(&[2.0 * logits[0], 2.0 * logits[1], 2.0 * logits[2]])
    } else {
        softmax3(&logits)
    };

    let n = 100_000usize;
    let tape = Tape::new();
    let tiled: Vec<f64> = (0..n).flat_map(|_| logits).collect();
    let post = CategoricalPosterior::new(Tensor::new(vec![n, 3], tiled)?)?;
    let mut rng = stream(17, Domain::Verify, 50);
    let u = uniform_open_noise(&mut rng, vec![n, 3]);
    let out = gumbel_softmax_sample(&tape, &post, 1e-4, &u)?;

    let mut counts = [0usize; 3];
    for r in 0..n {
        let row = &out.data()[r * 3..(r + 1) * 3];
        let arg = (0..3)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite sample"))
            .expect("nonempty row");
        counts[arg] += 1;
    }
    let max_dev = (0..3)
        .map(|k| (counts[k] as f64 / n as f64 - expected[k]).abs())
        .fold(0.0f64, f64::max);
    let chi_square: f64 = (0..3)
        .map(|k| {
            let e = n as f64 * expected[k];
            let d = counts[k] as f64 - e;
            d * d / e
        })
        .sum();
    let critical = ChiSquared::new(2.0)
        .expect("static dof")
        .inverse_cdf(0.99);
    Ok(vec![
        Check::bound("estimators/gumbel-argmax-freq", max_dev, 0.02),
        Check::bound("estimators/gumbel-chi-square", chi_square, critical),
    ])
}

/// Per-sample gradient of the conjugate-toy ELBO w.r.t. mu, with either the
/// STL (detached) or the standard log q term.
fn conjugate_grad_mu(eps: f64, detach: bool) -> Result<f64> {
    // p(z) = N(0,1), p(x|z) = N(z, sx^2), q = exact posterior of x0.
    let x0 = 1.3;
    let sx = 0.7;
    let var: f64 = (sx * sx) / (1.0 + sx * sx);
    let m = x0 / (1.0 + sx * sx);

    let tape = Tape::new();
    let mu = tape.watch(&Tensor::new(vec![1, 1], vec![m])?);
    let sigma = tape.watch(&Tensor::new(vec![1, 1], vec![var.sqrt()])?);
    let post = GaussianPosterior::new(mu.clone(), sigma.clone())?;
    let z = sample_gaussian_reparam(&tape, &post, &Tensor::new(vec![1, 1], vec![eps])?)?;

    let log_prior = crate::stochastic::gaussian_log_density(
        &tape,
        &z,
        &Tensor::zeros(vec![1, 1]),
        &Tensor::full(vec![1, 1], 1.0),
    )?;
    let log_lik = crate::stochastic::gaussian_log_density(
        &tape,
        &Tensor::new(vec![1, 1], vec![x0])?,
        &z,
        &Tensor::full(vec![1, 1], sx),
    )?;
    let log_q = if detach {
        stl_log_q(&tape, &z, &post)?
    } else {
        crate::stochastic::gaussian_log_density(&tape, &z, &post.mu, &post.sigma)?
    };
    let elbo = tape.sub(&tape.add(&log_prior, &log_lik)?, &log_q)?;
    let loss = tape.sum(&elbo, None)?;
    let grads = tape.backward(&loss)?;
    Ok(grads.wrt_or_zeros(&mu).data()[0])
}

fn stl_checks() -> Result<Vec<Check>> {
    // At the exact posterior every per-sample STL gradient vanishes.
    let mut rng = stream(17, Domain::Verify, 60);
    let mut max_grad: f64 = 0.0;
    for _ in 0..20 {
        let eps: f64 = rng.sample(rand_distr::StandardNormal);
        max_grad = max_grad.max(conjugate_grad_mu(eps, true)?.abs());
    }

    // The standard estimator keeps a nonzero score term; its per-sample
    // gradient variance must be strictly larger over 1e4 draws.
    let draws = 10_000usize;
    let mut stl = Vec::with_capacity(draws);
    let mut standard = Vec::with_capacity(draws);
    for _ in 0..draws {
        let eps: f64 = rng.sample(rand_distr::StandardNormal);
        stl.push(conjugate_grad_mu(eps, true)?);
        standard.push(conjugate_grad_mu(eps, false)?);
    }
    let var = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    };
    let ratio = var(&stl) / var(&standard);
    Ok(vec![
        Check::bound("estimators/stl-at-posterior", max_grad, 1e-6),
        Check::bound("estimators/stl-variance-ratio", ratio, 1.0),
    ])
}

pub fn run_estimators(fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut checks = gumbel_checks(fault)?;
    checks.extend(stl_checks()?);
    Ok(checks)
}

//! VAE assembly and the likelihood objectives: reparameterization, analytic
//! Gaussian KL, ELBO, importance-weighted ELBO and held-out NLL estimation.
//!
//! The objectives are written once against [`LatentModel`], which is
//! implemented both by the plain [`VaeModel`] and by composite models whose
//! posterior is assembled from several branches (the Specific nodes of the
//! expansion graph). Every latent sample is `z = mean + scale ⊙ γ` with
//! `γ ~ N(0, I)` drawn row by row from the caller's stream.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{build_mlp, Mlp, MlpSpec};
use crate::rng::{SeedStreams, StreamRng};
use crate::tensor::Tensor;

/// Bernoulli probabilities are clamped into `[CLAMP, 1 - CLAMP]`.
pub const BERNOULLI_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Bernoulli,
    /// Gaussian with σ² = 1/2 per dimension.
    GaussianHalf,
    /// Gaussian with σ² = 1 per dimension.
    GaussianIdentity,
}

impl Likelihood {
    pub(crate) fn code(self) -> u8 {
        match self {
            Likelihood::Bernoulli => 0,
            Likelihood::GaussianHalf => 1,
            Likelihood::GaussianIdentity => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Likelihood::Bernoulli,
            1 => Likelihood::GaussianHalf,
            2 => Likelihood::GaussianIdentity,
            _ => return None,
        })
    }

    fn output_activation(self) -> Activation {
        match self {
            Likelihood::Bernoulli => Activation::Sigmoid,
            _ => Activation::Identity,
        }
    }
}

/// Layer geometry of a VAE. The encoder trunk maps X → Z̃ and the decoder
/// trunk maps Z → X̃; both interface widths are shared by every node of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub data_dim: usize,
    pub encoder_hidden: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub activation: Activation,
    pub likelihood: Likelihood,
    pub normalize_recon: bool,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            data_dim: 144,
            encoder_hidden: 128,
            latent_dim: 16,
            decoder_hidden: 128,
            activation: Activation::Tanh,
            likelihood: Likelihood::Bernoulli,
            normalize_recon: false,
        }
    }
}

/// Single VAE: encoder trunk with mean and log-variance heads, decoder trunk
/// and output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub encoder_trunk: Mlp,
    pub mean_head: Mlp,
    pub logvar_head: Mlp,
    pub decoder_trunk: Mlp,
    pub decoder_out: Mlp,
}

impl VaeModel {
    pub fn new(arch: VaeArch, seed: u64) -> Result<Self> {
        if arch.latent_dim == 0 || arch.data_dim == 0 {
            return Err(Error::InvalidSpec("zero latent or data dimension".into()));
        }
        let seeds = SeedStreams::new(seed);
        let sub = |label: &str| seeds.child(label).seed();
        let act = arch.activation;
        let id = Activation::Identity;
        Ok(Self {
            encoder_trunk: build_mlp(&MlpSpec::uniform(
                &[arch.data_dim, arch.encoder_hidden],
                act,
                act,
                sub("encoder_trunk"),
            ))?,
            mean_head: build_mlp(&MlpSpec::uniform(
                &[arch.encoder_hidden, arch.latent_dim],
                id,
                id,
                sub("mean_head"),
            ))?,
            logvar_head: build_mlp(&MlpSpec::uniform(
                &[arch.encoder_hidden, arch.latent_dim],
                id,
                id,
                sub("logvar_head"),
            ))?,
            decoder_trunk: build_mlp(&MlpSpec::uniform(
                &[arch.latent_dim, arch.decoder_hidden],
                act,
                act,
                sub("decoder_trunk"),
            ))?,
            decoder_out: build_mlp(&MlpSpec::uniform(
                &[arch.decoder_hidden, arch.data_dim],
                act,
                arch.likelihood.output_activation(),
                sub("decoder_out"),
            ))?,
            arch,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        [
            &self.encoder_trunk,
            &self.mean_head,
            &self.logvar_head,
            &self.decoder_trunk,
            &self.decoder_out,
        ]
        .into_iter()
        .flat_map(Mlp::params)
        .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        [
            &mut self.encoder_trunk,
            &mut self.mean_head,
            &mut self.logvar_head,
            &mut self.decoder_trunk,
            &mut self.decoder_out,
        ]
        .into_iter()
        .flat_map(Mlp::params_mut)
        .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(flag);
        }
    }

    /// Posterior means and log-variances without a tape.
    pub fn encode_stats(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.encoder_trunk.predict(x)?;
        Ok((self.mean_head.predict(&h)?, self.logvar_head.predict(&h)?))
    }

    /// Decoder output (Bernoulli means or Gaussian means) without a tape.
    pub fn decode_mean(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder_out.predict(&self.decoder_trunk.predict(z)?)
    }

    /// Deterministic reconstruction `g(f^μ(x))`, the hypothesis used by the
    /// risk diagnostics.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let (mu, _) = self.encode_stats(x)?;
        self.decode_mean(&mu)
    }
}

/// Variational posterior of a batch as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Posterior {
    /// `n × latent`
    pub mean: Var,
    /// `n × latent`, log of the per-dimension standard deviation
    pub log_scale: Var,
    /// `n`, per-example KL term subtracted by the ELBO
    pub kl: Var,
}

/// A latent-variable model the objectives can be evaluated against.
pub trait LatentModel {
    fn data_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn likelihood(&self) -> Likelihood;
    fn normalize_recon(&self) -> bool;
    fn encode(&self, tape: &mut Tape, x: Var) -> Result<Posterior>;
    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var>;
}

impl LatentModel for VaeModel {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn likelihood(&self) -> Likelihood {
        self.arch.likelihood
    }

    fn normalize_recon(&self) -> bool {
        self.arch.normalize_recon
    }

    fn encode(&self, tape: &mut Tape, x: Var) -> Result<Posterior> {
        let h = self.encoder_trunk.forward(tape, x)?;
        let mean = self.mean_head.forward(tape, h)?;
        let logvar = self.logvar_head.forward(tape, h)?;
        let log_scale = tape.scale(logvar, 0.5);
        let kl = kl_rows(tape, mean, logvar)?;
        Ok(Posterior {
            mean,
            log_scale,
            kl,
        })
    }

    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = self.decoder_trunk.forward(tape, z)?;
        self.decoder_out.forward(tape, h)
    }
}

/// Per-example `½ Σ_j (μ² + e^{logvar} − logvar − 1)` on the tape.
pub(crate) fn kl_rows(tape: &mut Tape, mean: Var, logvar: Var) -> Result<Var> {
    let m2 = tape.square(mean);
    let ev = tape.exp(logvar);
    let a = tape.add(m2, ev)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.offset(b, -1.0);
    let s = tape.row_sum(c)?;
    Ok(tape.scale(s, 0.5))
}

/// `z = μ + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mu.shape() != logvar.shape() || mu.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "reparameterize: {:?}, {:?}, {:?}",
            mu.shape(),
            logvar.shape(),
            noise.shape()
        )));
    }
    let z = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(noise.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), z)
}

/// Taped reparameterization with the noise as a constant.
pub fn reparameterize_taped(tape: &mut Tape, mean: Var, log_scale: Var, noise: &Tensor) -> Result<Var> {
    let e = tape.constant(noise.shape().to_vec(), noise.data().to_vec())?;
    let s = tape.exp(log_scale);
    let se = tape.mul(s, e)?;
    tape.add(mean, se)
}

/// Analytic KL(N(μ, e^{logvar}) ‖ N(0, I)), summed over dimensions and
/// averaged over the rows of the batch.
pub fn gaussian_kl(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(Error::Shape(format!(
            "gaussian_kl: {:?} vs {:?}",
            mu.shape(),
            logvar.shape()
        )));
    }
    if !mu.is_finite() || !logvar.is_finite() {
        return Err(Error::NonFinite("gaussian_kl input".into()));
    }
    let total: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum();
    Ok(total / mu.rows() as f64)
}

fn check_domain(x: &Tensor, likelihood: Likelihood) -> Result<()> {
    if likelihood == Likelihood::Bernoulli && x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("bernoulli targets must lie in [0, 1]".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("data".into()));
    }
    Ok(())
}

fn recon_row(out: &[f64], x: &[f64], likelihood: Likelihood, normalize: bool) -> f64 {
    let d = x.len() as f64;
    let ll = match likelihood {
        Likelihood::Bernoulli => out
            .iter()
            .zip(x)
            .map(|(y, t)| {
                let y = y.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
                t * y.ln() + (1.0 - t) * (1.0 - y).ln()
            })
            .sum(),
        Likelihood::GaussianHalf => {
            let sq: f64 = out.iter().zip(x).map(|(m, t)| (t - m) * (t - m)).sum();
            -sq - 0.5 * d * PI.ln()
        }
        Likelihood::GaussianIdentity => {
            let sq: f64 = out.iter().zip(x).map(|(m, t)| (t - m) * (t - m)).sum();
            -0.5 * sq - 0.5 * d * (2.0 * PI).ln()
        }
    };
    if normalize {
        ll / d
    } else {
        ll
    }
}

/// Reconstruction log-likelihood `log p(x | decoder_output)`, averaged over
/// the rows of the batch. With `normalize` the per-example value is divided
/// by the data dimension.
pub fn recon_loglik(decoder_output: &Tensor, x: &Tensor, likelihood: Likelihood, normalize: bool) -> Result<f64> {
    if decoder_output.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "recon_loglik: {:?} vs {:?}",
            decoder_output.shape(),
            x.shape()
        )));
    }
    check_domain(x, likelihood)?;
    let d = x.cols();
    let total: f64 = decoder_output
        .data()
        .chunks(d)
        .zip(x.data().chunks(d))
        .map(|(o, t)| recon_row(o, t, likelihood, normalize))
        .sum();
    Ok(total / x.rows() as f64)
}

/// Per-row reconstruction log-likelihood on the tape; `x` is a constant.
pub fn recon_rows_taped(tape: &mut Tape, out: Var, x: &Tensor, likelihood: Likelihood, normalize: bool) -> Result<Var> {
    if tape.shape(out) != x.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs data {:?}",
            tape.shape(out),
            x.shape()
        )));
    }
    let d = x.cols() as f64;
    let rows = match likelihood {
        Likelihood::Bernoulli => {
            let y = tape.clamp(out, BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
            let log_y = tape.log(y);
            let neg = tape.scale(y, -1.0);
            let one_minus = tape.offset(neg, 1.0);
            let log_1my = tape.log(one_minus);
            let xv = tape.constant(x.shape().to_vec(), x.data().to_vec())?;
            let xc = tape.constant(x.shape().to_vec(), x.data().iter().map(|t| 1.0 - t).collect())?;
            let a = tape.mul(xv, log_y)?;
            let b = tape.mul(xc, log_1my)?;
            let s = tape.add(a, b)?;
            tape.row_sum(s)?
        }
        Likelihood::GaussianHalf | Likelihood::GaussianIdentity => {
            let xv = tape.constant(x.shape().to_vec(), x.data().to_vec())?;
            let diff = tape.sub(out, xv)?;
            let sq = tape.square(diff);
            let s = tape.row_sum(sq)?;
            if likelihood == Likelihood::GaussianHalf {
                let s = tape.scale(s, -1.0);
                tape.offset(s, -0.5 * d * PI.ln())
            } else {
                let s = tape.scale(s, -0.5);
                tape.offset(s, -0.5 * d * (2.0 * PI).ln())
            }
        }
    };
    Ok(if normalize { tape.scale(rows, 1.0 / d) } else { rows })
}

/// A likelihood bound estimate over a batch, in nats per example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub total: f64,
    pub recon_term: f64,
    pub kl_term: f64,
    pub k_prime: usize,
    pub n_data: usize,
}

/// Standard-normal noise of shape `rows × cols`, drawn row-major.
pub fn standard_normal(rng: &mut StreamRng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// Taped objective plus its decomposition, all batch-averaged.
#[derive(Debug, Clone, Copy)]
pub struct TapedBound {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub per_example: Var,
}

fn row_constant(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() == 1 {
        Tensor::matrix(1, x.len(), x.data().to_vec())
    } else {
        Ok(x.clone())
    }
}

fn repeat_tensor_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    let d = x.cols();
    let mut out = Vec::with_capacity(x.len() * k);
    for row in x.data().chunks(d) {
        for _ in 0..k {
            out.extend_from_slice(row);
        }
    }
    Tensor::matrix(x.rows() * k, d, out)
}

fn check_input<M: LatentModel + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    let x = row_constant(x)?;
    if x.cols() != model.data_dim() {
        return Err(Error::Shape(format!(
            "batch width {}, model expects {}",
            x.cols(),
            model.data_dim()
        )));
    }
    check_domain(&x, model.likelihood())?;
    Ok(x)
}

/// ELBO with `noise` of shape `(n·mc_samples) × latent`; rows for example `i`
/// are `i·mc_samples .. (i+1)·mc_samples`.
pub fn elbo_taped<M: LatentModel + ?Sized>(
    tape: &mut Tape,
    model: &M,
    x: &Tensor,
    noise: &Tensor,
) -> Result<TapedBound> {
    let x = check_input(model, x)?;
    let n = x.rows();
    if noise.cols() != model.latent_dim() || !noise.rows().is_multiple_of(n) || noise.rows() == 0 {
        return Err(Error::Shape(format!(
            "noise {:?} for {n} examples with latent {}",
            noise.shape(),
            model.latent_dim()
        )));
    }
    let samples = noise.rows() / n;
    let xv = tape.constant(x.shape().to_vec(), x.data().to_vec())?;
    let post = model.encode(tape, xv)?;
    let (mean, log_scale) = if samples == 1 {
        (post.mean, post.log_scale)
    } else {
        (
            tape.repeat_rows(post.mean, samples)?,
            tape.repeat_rows(post.log_scale, samples)?,
        )
    };
    let z = reparameterize_taped(tape, mean, log_scale, noise)?;
    let out = model.decode(tape, z)?;
    let x_rep = if samples == 1 { x.clone() } else { repeat_tensor_rows(&x, samples)? };
    let rec_rows = recon_rows_taped(tape, out, &x_rep, model.likelihood(), model.normalize_recon())?;
    let rec_per_ex = if samples == 1 {
        rec_rows
    } else {
        let r = tape.reshape(rec_rows, vec![n, samples])?;
        let s = tape.row_sum(r)?;
        tape.scale(s, 1.0 / samples as f64)
    };
    let per_example = tape.sub(rec_per_ex, post.kl)?;
    let recon = tape.mean(rec_per_ex);
    let kl = tape.mean(post.kl);
    let total = tape.mean(per_example);
    Ok(TapedBound {
        total,
        recon,
        kl,
        per_example,
    })
}

/// Importance-weighted bound with `noise` of shape `(n·k) × latent`.
///
/// With `k = 1` this is exactly [`elbo_taped`] (analytic KL) on the same
/// noise; for `k ≥ 2` each example contributes
/// `log (1/k) Σ_i p(x, z_i) / q(z_i | x)` computed by max-shifted log-sum-exp.
pub fn iwelbo_taped<M: LatentModel + ?Sized>(
    tape: &mut Tape,
    model: &M,
    x: &Tensor,
    noise: &Tensor,
    k: usize,
) -> Result<TapedBound> {
    if k == 0 {
        return Err(Error::InvalidArgument("k_prime must be at least 1".into()));
    }
    let x = check_input(model, x)?;
    let n = x.rows();
    if noise.cols() != model.latent_dim() || noise.rows() != n * k {
        return Err(Error::Shape(format!(
            "noise {:?} for {n} examples × {k} samples with latent {}",
            noise.shape(),
            model.latent_dim()
        )));
    }
    if k == 1 {
        return elbo_taped(tape, model, &x, noise);
    }
    let latent = model.latent_dim() as f64;
    let log_norm = 0.5 * latent * (2.0 * PI).ln();
    let xv = tape.constant(x.shape().to_vec(), x.data().to_vec())?;
    let post = model.encode(tape, xv)?;
    let mean = tape.repeat_rows(post.mean, k)?;
    let log_scale = tape.repeat_rows(post.log_scale, k)?;
    let z = reparameterize_taped(tape, mean, log_scale, noise)?;
    let out = model.decode(tape, z)?;
    let x_rep = repeat_tensor_rows(&x, k)?;
    let rec_rows = recon_rows_taped(tape, out, &x_rep, model.likelihood(), model.normalize_recon())?;

    // log p(z) = -½‖z‖² - c ; log q(z|x) = -½‖γ‖² - Σ log σ - c
    let z2 = tape.square(z);
    let z2 = tape.row_sum(z2)?;
    let log_pz = tape.scale(z2, -0.5);
    let sum_log_scale = tape.row_sum(log_scale)?;
    let gamma_sq: Vec<f64> = noise
        .data()
        .chunks(noise.cols())
        .map(|r| -0.5 * r.iter().map(|g| g * g).sum::<f64>())
        .collect();
    let gamma_term = tape.constant(vec![n * k], gamma_sq)?;
    let log_q = tape.sub(gamma_term, sum_log_scale)?;
    let a = tape.add(rec_rows, log_pz)?;
    let log_w = tape.sub(a, log_q)?;
    let _ = log_norm; // the two Gaussian normalisers cancel
    let log_w = tape.reshape(log_w, vec![n, k])?;
    let lse = tape.logsumexp_rows(log_w)?;
    let per_example = tape.offset(lse, -(k as f64).ln());
    let total = tape.mean(per_example);
    let rec_mean = tape.mean(rec_rows);
    let kl = tape.mean(post.kl);
    Ok(TapedBound {
        total,
        recon: rec_mean,
        kl,
        per_example,
    })
}

/// Upper bound on rows per tape when evaluating large `k`.
const EVAL_ROWS: usize = 16_384;

fn chunked_bound<M: LatentModel + ?Sized>(
    model: &M,
    x: &Tensor,
    k: usize,
    rng: &mut StreamRng,
    per_example: &mut Vec<f64>,
) -> Result<(f64, f64)> {
    let x = check_input(model, x)?;
    let n = x.rows();
    let chunk = (EVAL_ROWS / k).max(1);
    let (mut rec_sum, mut kl_sum) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part = x.slice_rows(start, end)?;
        let noise = standard_normal(rng, (end - start) * k, model.latent_dim());
        let mut tape = Tape::new();
        let b = iwelbo_taped(&mut tape, model, &part, &noise, k)?;
        let m = (end - start) as f64;
        rec_sum += tape.scalar(b.recon) * m;
        kl_sum += tape.scalar(b.kl) * m;
        per_example.extend_from_slice(tape.value(b.per_example));
        start = end;
    }
    Ok((rec_sum / n as f64, kl_sum / n as f64))
}

/// Monte-Carlo ELBO estimate with `mc_samples` draws per example.
pub fn elbo<M: LatentModel + ?Sized>(model: &M, batch: &Tensor, mc_samples: usize, rng: &mut StreamRng) -> Result<ElboEstimate> {
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
    }
    let x = check_input(model, batch)?;
    let noise = standard_normal(rng, x.rows() * mc_samples, model.latent_dim());
    let mut tape = Tape::new();
    let b = elbo_taped(&mut tape, model, &x, &noise)?;
    Ok(ElboEstimate {
        total: tape.scalar(b.total),
        recon_term: tape.scalar(b.recon),
        kl_term: tape.scalar(b.kl),
        k_prime: 1,
        n_data: x.rows(),
    })
}

/// Importance-weighted ELBO with `k_prime` samples per example.
pub fn iwelbo<M: LatentModel + ?Sized>(model: &M, batch: &Tensor, k_prime: usize, rng: &mut StreamRng) -> Result<ElboEstimate> {
    if k_prime == 0 {
        return Err(Error::InvalidArgument("k_prime must be at least 1".into()));
    }
    if k_prime == 1 {
        return elbo(model, batch, 1, rng);
    }
    let mut per = Vec::new();
    let (recon, kl) = chunked_bound(model, batch, k_prime, rng, &mut per)?;
    let total = per.iter().sum::<f64>() / per.len() as f64;
    Ok(ElboEstimate {
        total,
        recon_term: recon,
        kl_term: kl,
        k_prime,
        n_data: per.len(),
    })
}

/// Per-example importance-weighted log-likelihood estimates.
pub fn iwelbo_per_example<M: LatentModel + ?Sized>(
    model: &M,
    batch: &Tensor,
    k_prime: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if k_prime == 0 {
        return Err(Error::InvalidArgument("k_prime must be at least 1".into()));
    }
    let mut per = Vec::new();
    chunked_bound(model, batch, k_prime, rng, &mut per)?;
    Ok(per)
}

/// Mean negative log-likelihood with its standard error over examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllEstimate {
    pub nll: f64,
    pub std_err: f64,
    pub n: usize,
    pub k_prime: usize,
}

pub const DEFAULT_NLL_K_PRIME: usize = 5000;

/// Held-out negative log-likelihood estimated by the importance-weighted
/// bound. Chunks are evaluated in order so the result is seed-deterministic.
pub fn nll_estimate<M: LatentModel + ?Sized>(
    model: &M,
    data: &Tensor,
    k_prime: usize,
    rng: &mut StreamRng,
) -> Result<NllEstimate> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let per = iwelbo_per_example(model, data, k_prime, rng)?;
    let (mean, se) = mean_and_se(per.iter().map(|v| -v));
    Ok(NllEstimate {
        nll: mean,
        std_err: se,
        n: per.len(),
        k_prime,
    })
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-example analytic KL of the model's posterior, averaged over `x`.
pub fn posterior_kl(model: &VaeModel, x: &Tensor) -> Result<f64> {
    let (mu, lv) = model.encode_stats(x)?;
    gaussian_kl(&mu, &lv)
}

/// Log-mean-exp of per-sample log weights; exposed for tests and diagnostics.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    logsumexp(xs) - (xs.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn reparameterize_cases() {
        let mu = t(1, 2, vec![0.3, -1.0]);
        let lv = t(1, 2, vec![0.7, 2.0]);
        let zero = t(1, 2, vec![0.0, 0.0]);
        assert_eq!(reparameterize(&mu, &lv, &zero).unwrap().data(), mu.data());
        let n = t(1, 2, vec![0.4, -2.5]);
        let z = reparameterize(&t(1, 2, vec![0.0; 2]), &t(1, 2, vec![0.0; 2]), &n).unwrap();
        assert_eq!(z.data(), n.data());
        let z = reparameterize(&t(1, 1, vec![1.0]), &t(1, 1, vec![4f64.ln()]), &t(1, 1, vec![0.5])).unwrap();
        assert!((z.data()[0] - 2.0).abs() < 1e-12);
        assert!(reparameterize(&mu, &t(1, 1, vec![0.0]), &n).is_err());
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(gaussian_kl(&t(1, 2, vec![0.0, 0.0]), &t(1, 2, vec![0.0, 0.0])).unwrap(), 0.0);
        let kl = gaussian_kl(&t(1, 2, vec![1.0, 0.0]), &t(1, 2, vec![0.0, 0.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn recon_constants() {
        let x = t(1, 4, vec![0.1, 0.5, 0.9, 0.3]);
        let half = recon_loglik(&x, &x, Likelihood::GaussianHalf, false).unwrap();
        assert!((half - (-2.0 * PI.ln())).abs() < 1e-12);
        assert!((half + 2.2895).abs() < 1e-4);
        let mu = t(1, 4, vec![1.1, 0.5, 0.9, 0.3]);
        let ident = recon_loglik(&mu, &x, Likelihood::GaussianIdentity, false).unwrap();
        assert!((ident - (-0.5 - 2.0 * (2.0 * PI).ln())).abs() < 1e-12);
        let norm = recon_loglik(&mu, &x, Likelihood::GaussianIdentity, true).unwrap();
        assert!((norm - ident / 4.0).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_perfect_and_clamped() {
        let x = t(1, 3, vec![0.0, 1.0, 1.0]);
        let ll = recon_loglik(&x, &x, Likelihood::Bernoulli, false).unwrap();
        assert!(ll.is_finite() && ll <= 0.0 && ll > -1e-5);
        let wrong = t(1, 3, vec![1.0, 0.0, 0.0]);
        let ll = recon_loglik(&wrong, &x, Likelihood::Bernoulli, false).unwrap();
        assert!(ll.is_finite());
        assert!(ll.abs() < 3.0 * 16.2);
        let bad = t(1, 3, vec![0.0, 1.5, 1.0]);
        assert!(matches!(recon_loglik(&x, &bad, Likelihood::Bernoulli, false), Err(Error::Domain(_))));
    }

    fn small_model(likelihood: Likelihood) -> VaeModel {
        VaeModel::new(
            VaeArch {
                data_dim: 6,
                encoder_hidden: 5,
                latent_dim: 3,
                decoder_hidden: 4,
                likelihood,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn elbo_decomposes_exactly() {
        let model = small_model(Likelihood::GaussianHalf);
        let x = t(2, 6, (0..12).map(|i| (i as f64 * 0.37).fract()).collect());
        let mut rng = SeedStreams::new(1).stream("eval");
        let e = elbo(&model, &x, 1, &mut rng).unwrap();
        assert_eq!(e.total, e.recon_term - e.kl_term);
        assert!(e.kl_term >= 0.0);
    }

    #[test]
    fn iwelbo_one_equals_elbo_on_shared_noise() {
        let model = small_model(Likelihood::Bernoulli);
        let x = t(3, 6, (0..18).map(|i| f64::from(i % 2)).collect());
        let s = SeedStreams::new(9);
        let a = elbo(&model, &x, 1, &mut s.stream("n")).unwrap();
        let b = iwelbo(&model, &x, 1, &mut s.stream("n")).unwrap();
        assert_eq!(a.total, b.total);
        assert!(iwelbo(&model, &x, 0, &mut s.stream("n")).is_err());
    }
}

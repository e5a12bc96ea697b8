//! Probability building blocks: reparameterized diagonal Gaussians,
//! categorical posteriors over the disentangled variable, Bernoulli and
//! Gaussian reconstruction likelihoods, and the KL terms of the two-latent
//! ELBO. All quantities are per-example [n,1] column vectors on the tape.

use crate::autodiff::{AdError, NodeId, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum DistError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("sigma must be strictly positive (found {found} at index {index})")]
    NonPositiveSigma { found: f64, index: usize },
    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("pixel value {found} at index {index} outside [0,1]")]
    PixelOutOfRange { found: f64, index: usize },
}

/// q(u|x) as mean and log-variance heads; sigma = exp(log_var / 2).
#[derive(Debug, Clone, Copy)]
pub struct GaussianPosterior {
    pub mu: NodeId,
    pub log_var: NodeId,
    pub sigma: NodeId,
}

impl GaussianPosterior {
    /// Builds sigma from a raw log-variance node. Positivity holds by
    /// construction; the stored values are still validated.
    pub fn from_raw(tape: &mut Tape, mu: NodeId, log_var: NodeId) -> Result<Self, DistError> {
        let half = tape.scale(log_var, 0.5)?;
        let sigma = tape.exp(half)?;
        let g = GaussianPosterior { mu, log_var, sigma };
        g.validate(tape)?;
        Ok(g)
    }

    pub fn validate(&self, tape: &Tape) -> Result<(), DistError> {
        for (i, &s) in tape.values(self.sigma).iter().enumerate() {
            if s <= 0.0 {
                return Err(DistError::NonPositiveSigma { found: s, index: i });
            }
        }
        Ok(())
    }
}

/// q(v|x); probs == softmax(logits) by construction, log_probs via the
/// numerically stable shifted log-sum-exp.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalPosterior {
    pub logits: NodeId,
    pub probs: NodeId,
    pub log_probs: NodeId,
}

impl CategoricalPosterior {
    pub fn from_logits(tape: &mut Tape, logits: NodeId) -> Result<Self, DistError> {
        let probs = tape.softmax_rows(logits)?;
        let log_probs = log_softmax_rows(tape, logits)?;
        Ok(CategoricalPosterior {
            logits,
            probs,
            log_probs,
        })
    }

    pub fn k(&self, tape: &Tape) -> usize {
        tape.shape(self.probs)[1]
    }
}

/// Row-wise log-softmax. The per-row max is detached; the resulting
/// gradient is exact because the shift terms cancel.
pub fn log_softmax_rows(tape: &mut Tape, logits: NodeId) -> Result<NodeId, AdError> {
    let shape = tape.shape(logits).to_vec();
    let (n, m) = (shape[0], shape[1]);
    let mut maxes = Vec::with_capacity(n * m);
    {
        let v = tape.values(logits);
        for i in 0..n {
            let mx = v[i * m..(i + 1) * m]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            maxes.extend(std::iter::repeat(mx).take(m));
        }
    }
    let mx = tape.leaf(maxes, vec![n, m]);
    let shifted = tape.sub(logits, mx)?;
    let e = tape.exp(shifted)?;
    let z = tape.row_sum(e)?;
    let lz = tape.log(z)?;
    let lzb = tape.broadcast_cols(lz, m)?;
    tape.sub(shifted, lzb)
}

/// Standard-normal draws with a replayable generator snapshot.
#[derive(Debug, Clone)]
pub struct NoiseSample {
    pub eps: Vec<f64>,
    pub batch: usize,
    pub dim: usize,
    pub seed_state: (u64, u128),
}

impl NoiseSample {
    pub fn zeros(batch: usize, dim: usize) -> Self {
        NoiseSample {
            eps: vec![0.0; batch * dim],
            batch,
            dim,
            seed_state: (0, 0),
        }
    }

    /// Re-draws the sample from the recorded generator state; bitwise equal
    /// to the original.
    pub fn regenerate(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed_state.0);
        rng.set_word_pos(self.seed_state.1);
        (0..self.batch * self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

/// Seeded noise source owned by the trainer; every draw records the
/// generator position so samples can be regenerated exactly.
#[derive(Debug)]
pub struct NoiseSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn standard_normal(&mut self, batch: usize, dim: usize) -> NoiseSample {
        let state = (self.seed, self.rng.get_word_pos());
        let eps = (0..batch * dim)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        NoiseSample {
            eps,
            batch,
            dim,
            seed_state: state,
        }
    }

    pub fn uniform(&mut self, count: usize) -> Vec<f64> {
        use rand::Rng;
        (0..count).map(|_| self.rng.gen::<f64>()).collect()
    }
}

/// u = mu + sigma ⊗ eps; eps enters as a constant leaf.
pub fn reparam_sample(
    tape: &mut Tape,
    g: &GaussianPosterior,
    noise: &NoiseSample,
) -> Result<NodeId, DistError> {
    let shape = tape.shape(g.mu).to_vec();
    if shape != vec![noise.batch, noise.dim] {
        return Err(DistError::Ad(AdError::ShapeMismatch {
            op: "reparam_sample",
            lhs: shape,
            rhs: vec![noise.batch, noise.dim],
        }));
    }
    let eps = tape.leaf(noise.eps.clone(), shape);
    let se = tape.mul(g.sigma, eps)?;
    Ok(tape.add(g.mu, se)?)
}

/// Closed-form KL(q(u|x) ‖ N(0,I)) per example:
/// −½ Σ (1 + 2 log σ − μ² − σ²) = ½ Σ (σ² + μ² − 1 − log σ²).
pub fn gaussian_kl_standard(tape: &mut Tape, g: &GaussianPosterior) -> Result<NodeId, DistError> {
    g.validate(tape)?;
    let var = tape.mul(g.sigma, g.sigma)?;
    let mu2 = tape.mul(g.mu, g.mu)?;
    let a = tape.add(var, mu2)?;
    let b = tape.sub(a, g.log_var)?;
    let c = tape.add_scalar(b, -1.0)?;
    let s = tape.row_sum(c)?;
    Ok(tape.scale(s, 0.5)?)
}

/// KL(q(v|x) ‖ Uniform(K)) = log K − H(q) per example.
pub fn categorical_kl_uniform(
    tape: &mut Tape,
    c: &CategoricalPosterior,
) -> Result<NodeId, DistError> {
    let k = c.k(tape) as f64;
    let h = categorical_entropy(tape, c)?;
    let neg = tape.scale(h, -1.0)?;
    Ok(tape.add_scalar(neg, k.ln())?)
}

/// H(q) = −Σ p log p per example, in [0, log K].
pub fn categorical_entropy(
    tape: &mut Tape,
    c: &CategoricalPosterior,
) -> Result<NodeId, DistError> {
    let plogp = tape.mul(c.probs, c.log_probs)?;
    let s = tape.row_sum(plogp)?;
    Ok(tape.scale(s, -1.0)?)
}

/// Validates that each row of a [n,K] matrix is one-hot.
pub fn validate_one_hot(values: &[f64], n: usize, k: usize) -> Result<(), DistError> {
    for i in 0..n {
        let row = &values[i * k..(i + 1) * k];
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(DistError::NotOneHot { row: i });
        }
    }
    Ok(())
}

/// U = Σ_i y_i log q(v_i|x) per example, computed via log-softmax.
/// Nonpositive; maximized toward 0 when the posterior matches the label.
pub fn cross_entropy_constraint(
    tape: &mut Tape,
    c: &CategoricalPosterior,
    y: NodeId,
) -> Result<NodeId, DistError> {
    let shape = tape.shape(y).to_vec();
    validate_one_hot(tape.values(y), shape[0], shape[1])?;
    let sel = tape.mul(y, c.log_probs)?;
    Ok(tape.row_sum(sel)?)
}

/// Bernoulli log-likelihood per example in the stable logit form:
/// Σ_pixels [x·l − softplus(l)].
pub fn bernoulli_recon_loglik(
    tape: &mut Tape,
    logits: NodeId,
    x: NodeId,
) -> Result<NodeId, DistError> {
    let sl = tape.shape(logits).to_vec();
    let sx = tape.shape(x).to_vec();
    if sl != sx {
        return Err(DistError::Ad(AdError::ShapeMismatch {
            op: "bernoulli_recon_loglik",
            lhs: sl,
            rhs: sx,
        }));
    }
    for (i, &v) in tape.values(x).iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(DistError::PixelOutOfRange { found: v, index: i });
        }
    }
    let xl = tape.mul(x, logits)?;
    let sp = tape.softplus(logits)?;
    let d = tape.sub(xl, sp)?;
    Ok(tape.row_sum(d)?)
}

/// Gaussian log-likelihood with fixed unit variance, for continuous inputs:
/// Σ_pixels [−½(x − m)² − ½ log 2π].
pub fn gaussian_recon_loglik(
    tape: &mut Tape,
    mean: NodeId,
    x: NodeId,
) -> Result<NodeId, DistError> {
    let d = tape.sub(x, mean)?;
    let d2 = tape.mul(d, d)?;
    let h = tape.scale(d2, -0.5)?;
    let c = tape.add_scalar(h, -0.5 * LN_2PI)?;
    Ok(tape.row_sum(c)?)
}

/// log q(u₀|x) for u₀ = μ + σ⊗ε with ε constant:
/// Σ_i [−½ log 2π − ½ log_var_i − ½ ε_i²]. Gradients flow through log_var.
pub fn reparam_base_log_density(
    tape: &mut Tape,
    g: &GaussianPosterior,
    noise: &NoiseSample,
) -> Result<NodeId, DistError> {
    let shape = tape.shape(g.mu).to_vec();
    let consts: Vec<f64> = noise
        .eps
        .iter()
        .map(|&e| -0.5 * LN_2PI - 0.5 * e * e)
        .collect();
    let cleaf = tape.leaf(consts, shape);
    let hl = tape.scale(g.log_var, -0.5)?;
    let term = tape.add(hl, cleaf)?;
    Ok(tape.row_sum(term)?)
}

/// log N(u; 0, I) per example, differentiable in u.
pub fn std_normal_log_density(tape: &mut Tape, u: NodeId) -> Result<NodeId, DistError> {
    let u2 = tape.mul(u, u)?;
    let h = tape.scale(u2, -0.5)?;
    let c = tape.add_scalar(h, -0.5 * LN_2PI)?;
    Ok(tape.row_sum(c)?)
}

/// Inverse-CDF categorical sampling; one uniform draw per row.
pub fn sample_categorical_rows(probs: &[f64], n: usize, k: usize, uniforms: &[f64]) -> Vec<usize> {
    assert_eq!(uniforms.len(), n);
    (0..n)
        .map(|i| {
            let row = &probs[i * k..(i + 1) * k];
            let u = uniforms[i];
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            k - 1
        })
        .collect()
}

pub fn one_hot(indices: &[usize], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; indices.len() * k];
    for (i, &c) in indices.iter().enumerate() {
        out[i * k + c] = 1.0;
    }
    out
}

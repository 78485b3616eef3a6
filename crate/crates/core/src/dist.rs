//! Probability heads the perceptors emit: diagonal Gaussian, Gumbel-Softmax
//! categorical, and Bernoulli. All sampling takes an explicit RNG stream and
//! records on a tape so gradients reach the head parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{argmax, Tape, ValueId};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Standard normal draw (Box-Muller on two uniform variates).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gumbel(0, 1) draw.
pub fn standard_gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Diagonal Gaussian over a small continuous symbol vector.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    pub mean: ValueId,
    pub log_var: ValueId,
}

impl DiagGaussian {
    pub fn dim(&self, tape: &Tape) -> usize {
        tape.values(self.mean).len()
    }

    /// Reparameterised sample: mean + exp(log_var / 2) ⊙ ε with ε ~ N(0, I).
    /// Gradients flow into both head tensors.
    pub fn sample<R: Rng>(&self, tape: &mut Tape, rng: &mut R) -> Result<ValueId> {
        let d = self.dim(tape);
        let eps: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        self.sample_with_noise(tape, &eps)
    }

    /// Deterministic variant used by gradient checks: the noise is provided.
    pub fn sample_with_noise(&self, tape: &mut Tape, eps: &[f64]) -> Result<ValueId> {
        let d = self.dim(tape);
        if eps.len() != d {
            return Err(Error::contract("gaussian sample: noise dimension mismatch"));
        }
        let half = tape.scale(self.log_var, 0.5);
        let std = tape.exp(half)?;
        let noise = tape.constant(vec![d], eps.to_vec());
        let scaled = tape.mul(std, noise)?;
        tape.add(self.mean, scaled)
    }

    /// Σ_i [ -½ log 2π - ½ log_var_i - (x_i - mean_i)² / (2 exp(log_var_i)) ]
    pub fn log_prob(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let d = self.dim(tape);
        if tape.values(x).len() != d {
            return Err(Error::contract("gaussian log_prob: dimension mismatch"));
        }
        let diff = tape.sub(x, self.mean)?;
        let sq = tape.mul(diff, diff)?;
        let neg_log_var = tape.scale(self.log_var, -1.0);
        let inv_var = tape.exp(neg_log_var)?;
        let quad = tape.mul(sq, inv_var)?;
        let quad_sum = tape.sum(quad);
        let lv_sum = tape.sum(self.log_var);
        let a = tape.scale(quad_sum, -0.5);
        let b = tape.scale(lv_sum, -0.5);
        let partial = tape.add(a, b)?;
        Ok(tape.add_scalar(partial, -0.5 * d as f64 * LN_2PI))
    }
}

/// Logits of one categorical variable.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalHead {
    pub logits: ValueId,
}

/// A Gumbel-Softmax draw: a point on the simplex plus its hard argmax.
#[derive(Debug, Clone, Copy)]
pub struct GumbelSample {
    /// softmax((logits + gumbel noise) / temperature), sums to 1
    pub relaxed: ValueId,
    /// one-hot of `hard_index` forward, identity gradient into `relaxed`
    pub straight_through: ValueId,
    pub hard_index: usize,
    pub temperature: f64,
}

impl CategoricalHead {
    pub fn cardinality(&self, tape: &Tape) -> usize {
        tape.values(self.logits).len()
    }

    /// Gumbel-Softmax reparameterised draw. Consumers needing a discrete
    /// index use `hard_index`; consumers needing a differentiable code use
    /// `straight_through` (hard forward value, relaxed backward path).
    pub fn gumbel_softmax_sample<R: Rng>(
        &self,
        tape: &mut Tape,
        temperature: f64,
        rng: &mut R,
    ) -> Result<GumbelSample> {
        let k = self.cardinality(tape);
        let noise: Vec<f64> = (0..k).map(|_| standard_gumbel(rng)).collect();
        self.gumbel_softmax_with_noise(tape, temperature, &noise)
    }

    pub fn gumbel_softmax_with_noise(
        &self,
        tape: &mut Tape,
        temperature: f64,
        noise: &[f64],
    ) -> Result<GumbelSample> {
        if temperature <= 0.0 {
            return Err(Error::contract(format!(
                "gumbel_softmax: temperature must be positive, got {temperature}"
            )));
        }
        let k = self.cardinality(tape);
        if noise.len() != k {
            return Err(Error::contract("gumbel_softmax: noise dimension mismatch"));
        }
        let g = tape.constant(vec![k], noise.to_vec());
        let shifted = tape.add(self.logits, g)?;
        let scaled = tape.scale(shifted, 1.0 / temperature);
        let relaxed = tape.softmax_last(scaled)?;
        let hard_index = argmax(tape.values(relaxed));
        let straight_through = tape.straight_through_hard(relaxed)?;
        Ok(GumbelSample {
            relaxed,
            straight_through,
            hard_index,
            temperature,
        })
    }

    /// log softmax(logits)[index]
    pub fn log_prob(&self, tape: &mut Tape, index: usize) -> Result<ValueId> {
        let k = self.cardinality(tape);
        if index >= k {
            return Err(Error::contract(format!(
                "categorical log_prob: index {index} out of range for cardinality {k}"
            )));
        }
        let lsm = tape.log_softmax_last(self.logits)?;
        tape.select(lsm, index)
    }
}

/// Bernoulli policy head over two actions, driven by a sigmoid output.
/// Returns the sampled action, its log-probability node, and whether the
/// probability had to be clamped away from {0, 1}.
pub fn bernoulli_policy<R: Rng>(
    tape: &mut Tape,
    p: ValueId,
    rng: &mut R,
) -> Result<(usize, ValueId, bool)> {
    let raw = tape.value_scalar(p);
    let clamped_flag = !(1e-7..=1.0 - 1e-7).contains(&raw);
    let pc = tape.clamp(p, 1e-7, 1.0 - 1e-7);
    let pv = tape.value_scalar(pc);
    let action = usize::from(rng.gen::<f64>() < pv);
    let log_prob = if action == 1 {
        tape.log(pc)?
    } else {
        let neg = tape.scale(pc, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        tape.log(one_minus)?
    };
    Ok((action, log_prob, clamped_flag))
}

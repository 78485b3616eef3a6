//! Exact-gradient audit on enumerable toy decision processes.
//!
//! The factored policy's trace log-likelihood gradient contains only the
//! perceptor terms — the program drops out entirely. On a small enough
//! process every trace can be enumerated, so the expected return J(θ), its
//! exact gradient, the ψ-only score-function expectation, and the Monte
//! Carlo REINFORCE estimate can all be compared against one another.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A deterministic finite MDP whose symbols are per-state Bernoulli draws:
/// ψ(σ=1 | state s) = θ_s. Actions come from a fixed program over symbols.
pub struct ToyMdp {
    pub horizon: usize,
    pub init_state: usize,
    /// per-state symbol probability, the learnable parameters
    pub theta: Vec<f64>,
    pub program: fn(usize) -> usize,
    pub transition: fn(usize, usize) -> usize,
    pub reward: fn(usize, usize) -> f64,
    pub gamma: f64,
}

impl ToyMdp {
    /// Number of distinct symbol sequences.
    pub fn trace_count(&self) -> usize {
        1usize << self.horizon
    }

    fn log_psi_grad(&self, state: usize, symbol: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.theta.len()];
        let p = self.theta[state];
        g[state] = if symbol == 1 { 1.0 / p } else { -1.0 / (1.0 - p) };
        g
    }

    /// Walk one symbol sequence, returning (p(τ), per-step states, return R₀,
    /// per-step returns R_t).
    fn walk(&self, symbols: &[usize]) -> (f64, Vec<usize>, f64, Vec<f64>) {
        let mut state = self.init_state;
        let mut prob = 1.0;
        let mut states = Vec::with_capacity(self.horizon);
        let mut rewards = Vec::with_capacity(self.horizon);
        for &sigma in symbols {
            states.push(state);
            prob *= if sigma == 1 {
                self.theta[state]
            } else {
                1.0 - self.theta[state]
            };
            let action = (self.program)(sigma);
            rewards.push((self.reward)(state, action));
            state = (self.transition)(state, action);
        }
        let returns = crate::training::compute_returns(&rewards, self.gamma);
        let r0 = returns.first().copied().unwrap_or(0.0);
        (prob, states, r0, returns)
    }

    fn symbols_of(&self, code: usize) -> Vec<usize> {
        (0..self.horizon).map(|t| (code >> t) & 1).collect()
    }

    /// Exact J(θ) by full enumeration.
    pub fn exact_j(&self) -> f64 {
        (0..self.trace_count())
            .map(|code| {
                let (p, _, r0, _) = self.walk(&self.symbols_of(code));
                p * r0
            })
            .sum()
    }

    /// Exact ∇J via the score-function identity, using only the perceptor
    /// terms: Σ_τ p(τ) · (Σ_t ∇log ψ(σ_t|s_t)) · (R_t − b(s_t)).
    pub fn exact_score_gradient(&self, baseline: Option<&dyn Fn(usize) -> f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.theta.len()];
        for code in 0..self.trace_count() {
            let symbols = self.symbols_of(code);
            let (p, states, _, returns) = self.walk(&symbols);
            for t in 0..self.horizon {
                let g = self.log_psi_grad(states[t], symbols[t]);
                let b = baseline.map_or(0.0, |f| f(states[t]));
                let w = p * (returns[t] - b);
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += w * gi;
                }
            }
        }
        grad
    }

    /// Central finite differences of the enumerated J.
    pub fn fd_gradient(&self, h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; self.theta.len()];
        for i in 0..self.theta.len() {
            let mut plus = ToyMdp {
                theta: self.theta.clone(),
                ..*self
            };
            plus.theta[i] += h;
            let mut minus = ToyMdp {
                theta: self.theta.clone(),
                ..*self
            };
            minus.theta[i] -= h;
            grad[i] = (plus.exact_j() - minus.exact_j()) / (2.0 * h);
        }
        grad
    }

    /// Component-wise empirical variance of the per-trace REINFORCE
    /// gradient under an optional state baseline.
    pub fn mc_gradient_variance(
        &self,
        samples: usize,
        seed: u64,
        baseline: Option<&dyn Fn(usize) -> f64>,
    ) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.theta.len();
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        for _ in 0..samples {
            let g = self.sample_trace_gradient(&mut rng, baseline);
            for i in 0..dim {
                sum[i] += g[i];
                sum_sq[i] += g[i] * g[i];
            }
        }
        let n = samples as f64;
        (0..dim)
            .map(|i| (sum_sq[i] / n - (sum[i] / n) * (sum[i] / n)).max(0.0))
            .collect()
    }

    /// Sample one trace, returning its per-parameter REINFORCE term.
    fn sample_trace_gradient(
        &self,
        rng: &mut ChaCha8Rng,
        baseline: Option<&dyn Fn(usize) -> f64>,
    ) -> Vec<f64> {
        let mut state = self.init_state;
        let mut states = Vec::with_capacity(self.horizon);
        let mut symbols = Vec::with_capacity(self.horizon);
        let mut rewards = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            states.push(state);
            let sigma = usize::from(rng.gen::<f64>() < self.theta[state]);
            symbols.push(sigma);
            let action = (self.program)(sigma);
            rewards.push((self.reward)(state, action));
            state = (self.transition)(state, action);
        }
        let returns = crate::training::compute_returns(&rewards, self.gamma);
        let mut g = vec![0.0; self.theta.len()];
        for t in 0..self.horizon {
            let lg = self.log_psi_grad(states[t], symbols[t]);
            let b = baseline.map_or(0.0, |f| f(states[t]));
            for (acc, gi) in g.iter_mut().zip(&lg) {
                *acc += (returns[t] - b) * gi;
            }
        }
        g
    }
}

/// Everything the audit measured.
pub struct AuditReport {
    pub exact_j: f64,
    pub exact_grad: Vec<f64>,
    pub fd_grad: Vec<f64>,
    pub mc_grad: Vec<f64>,
    pub mc_se: Vec<f64>,
    /// max |exact − fd| over parameters
    pub exact_vs_fd: f64,
    /// every component of the MC estimate within 4 standard errors of exact
    pub mc_within_4se: bool,
    /// exact gradient with a constant baseline minus without: max abs diff
    pub baseline_shift: f64,
    pub mc_samples: usize,
}

/// Run the full audit: exact enumeration against finite differences, the
/// Monte Carlo estimator against both, and the constant-baseline identity.
pub fn gradient_audit(mdp: &ToyMdp, mc_samples: usize, seed: u64) -> Result<AuditReport> {
    if mdp.trace_count() > 10_000 {
        return Err(Error::contract(format!(
            "audit: {} traces exceeds the enumeration budget",
            mdp.trace_count()
        )));
    }
    for &p in &mdp.theta {
        if !(0.0..=1.0).contains(&p) || p == 0.0 || p == 1.0 {
            return Err(Error::contract("audit: theta must lie strictly in (0,1)"));
        }
    }
    let exact_j = mdp.exact_j();
    let exact_grad = mdp.exact_score_gradient(None);
    let fd_grad = mdp.fd_gradient(1e-6);
    let exact_vs_fd = exact_grad
        .iter()
        .zip(&fd_grad)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);

    let constant_baseline = |_: usize| 3.7;
    let with_baseline = mdp.exact_score_gradient(Some(&constant_baseline));
    let baseline_shift = exact_grad
        .iter()
        .zip(&with_baseline)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = mdp.theta.len();
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    for _ in 0..mc_samples {
        let g = mdp.sample_trace_gradient(&mut rng, None);
        for i in 0..dim {
            sum[i] += g[i];
            sum_sq[i] += g[i] * g[i];
        }
    }
    let n = mc_samples as f64;
    let mc_grad: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mc_se: Vec<f64> = (0..dim)
        .map(|i| {
            let var = (sum_sq[i] / n - mc_grad[i] * mc_grad[i]).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    let mc_within_4se = (0..dim).all(|i| (mc_grad[i] - exact_grad[i]).abs() <= 4.0 * mc_se[i]);

    Ok(AuditReport {
        exact_j,
        exact_grad,
        fd_grad,
        mc_grad,
        mc_se,
        exact_vs_fd,
        mc_within_4se,
        baseline_shift,
        mc_samples,
    })
}

/// The one-step process with ψ(σ=1) = θ, ρ(σ) = σ, r(a) = a: J(θ) = θ and
/// ∇J = 1 exactly.
pub fn one_step_bernoulli(theta: f64) -> ToyMdp {
    ToyMdp {
        horizon: 1,
        init_state: 0,
        theta: vec![theta],
        program: |sigma| sigma,
        transition: |_, _| 0,
        reward: |_, action| action as f64,
        gamma: 1.0,
    }
}

/// A two-step, two-state chain: the action moves the chain to state = a and
/// each (state, action) pair pays a distinct reward.
pub fn two_step_two_state(theta0: f64, theta1: f64) -> ToyMdp {
    ToyMdp {
        horizon: 2,
        init_state: 0,
        theta: vec![theta0, theta1],
        program: |sigma| sigma,
        transition: |_, action| action,
        reward: |state, action| match (state, action) {
            (0, 0) => 0.1,
            (0, 1) => 1.0,
            (1, 0) => 0.3,
            (1, 1) => 0.5,
            _ => unreachable!(),
        },
        gamma: 1.0,
    }
}

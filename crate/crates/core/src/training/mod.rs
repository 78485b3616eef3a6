//! Rollout collection, the REINFORCE losses, and the optimisation loop.
//!
//! One episode builds one tape: every parameter is leased once, each step's
//! forward pass and sampling extend the tape, and the loss terms are
//! assembled on it afterwards. Backward passes run per episode into named
//! gradient buffers which are reduced in episode order, so results do not
//! depend on worker scheduling.

pub mod audit;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::bernoulli_policy;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::params::{save_checkpoint, Adam, ParameterSet};
use crate::perceptor::{BoundModel, HeadKind, HeadsOut, Model};
use crate::programs::Program;
use crate::symbol::SymbolVector;
use crate::tape::{Tape, ValueId};

/// Discounted returns and advantages for one episode.
#[derive(Debug, Clone)]
pub struct ReturnTable {
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
    pub gamma: f64,
}

/// R_t = Σ_{i ≥ t} γ^{i−t} r_i by reverse recursion.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One executed step of a trace.
pub struct StepRecord {
    pub heads: HeadsOut,
    pub obs_node: ValueId,
    pub symbol: SymbolVector,
    pub log_prob: ValueId,
    pub value: ValueId,
    pub value_scalar: f64,
    pub action: usize,
    pub reward: f64,
    /// straight-through latent parts feeding the decoder (autoencoding mode)
    pub latent: Vec<ValueId>,
    pub ground_truth: SymbolVector,
}

/// The trailing state-symbol pair: a trace of T executed steps carries T+1
/// sampled pairs.
pub struct TerminalRecord {
    pub obs_node: ValueId,
    pub symbol: SymbolVector,
    pub ground_truth: SymbolVector,
}

/// The augmented trace τ plus its tape.
pub struct Trace {
    pub tape: Tape,
    pub steps: Vec<StepRecord>,
    pub terminal: TerminalRecord,
    pub clamp_events: usize,
}

impl Trace {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

struct SampledStep {
    symbol: SymbolVector,
    log_prob: ValueId,
    latent: Vec<ValueId>,
    direct_action: Option<usize>,
    clamped: bool,
}

fn sample_heads(
    tape: &mut Tape,
    heads: &HeadsOut,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampledStep> {
    match heads {
        HeadsOut::Gaussian(g) => {
            let sample = g.sample(tape, rng)?;
            let values = tape.values(sample).to_vec();
            // the score-function term treats the sampled symbols as data
            let datum = tape.constant(vec![values.len()], values.clone());
            let log_prob = g.log_prob(tape, datum)?;
            Ok(SampledStep {
                symbol: SymbolVector::Continuous(values),
                log_prob,
                latent: Vec::new(),
                direct_action: None,
                clamped: false,
            })
        }
        HeadsOut::Categorical(heads) => {
            let mut indices = Vec::with_capacity(heads.len());
            let mut latent = Vec::with_capacity(heads.len());
            let mut log_prob: Option<ValueId> = None;
            for head in heads {
                let draw = head.gumbel_softmax_sample(tape, temperature, rng)?;
                indices.push(draw.hard_index + 1); // symbols are 1-based
                latent.push(draw.straight_through);
                let lp = head.log_prob(tape, draw.hard_index)?;
                log_prob = Some(match log_prob {
                    Some(acc) => tape.add(acc, lp)?,
                    None => lp,
                });
            }
            Ok(SampledStep {
                symbol: SymbolVector::Categorical(indices),
                log_prob: log_prob.expect("at least one categorical head"),
                latent,
                direct_action: None,
                clamped: false,
            })
        }
        HeadsOut::Bernoulli { p } => {
            let (action, log_prob, clamped) = bernoulli_policy(tape, *p, rng)?;
            Ok(SampledStep {
                symbol: SymbolVector::Categorical(vec![action + 1]),
                log_prob,
                latent: Vec::new(),
                direct_action: Some(action),
                clamped,
            })
        }
        HeadsOut::Softmax { logits } => {
            let probs = softmax_values(tape.values(*logits));
            let action = sample_index(&probs, rng);
            let head = crate::dist::CategoricalHead { logits: *logits };
            let log_prob = head.log_prob(tape, action)?;
            Ok(SampledStep {
                symbol: SymbolVector::Categorical(vec![action + 1]),
                log_prob,
                latent: Vec::new(),
                direct_action: Some(action),
                clamped: false,
            })
        }
    }
}

fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn validate_pairing(model: &Model, program: Option<&dyn Program>) -> Result<()> {
    let symbolic = model.encoders.iter().all(|e| {
        matches!(
            e.head,
            HeadKind::Gaussian { .. } | HeadKind::Categorical { .. }
        )
    });
    match (symbolic, program) {
        (true, None) => Err(Error::Config("perceptor model needs a task program".into())),
        (false, Some(_)) => Err(Error::Config(
            "policy-baseline model does not take a program".into(),
        )),
        (true, Some(p)) => {
            // symbol-space agreement, checked before the first step
            let ok = match p.expects() {
                crate::programs::SymbolSpace::Continuous { dim } => model
                    .encoders
                    .iter()
                    .any(|e| matches!(e.head, HeadKind::Gaussian { dim: d } if d == dim)),
                crate::programs::SymbolSpace::Categorical { vars } => {
                    model.cards().len() == vars
                }
            };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(
                    "program symbol space does not match the perceptor's heads".into(),
                ))
            }
        }
        (false, None) => Ok(()),
    }
}

/// Run one episode: observe, sample symbols, run the program (or the policy
/// head), execute, and record — until the environment finishes. The returned
/// [`BoundModel`] indexes the same tape, so losses can extend it.
pub fn rollout<'m, E: Environment>(
    model: &'m Model,
    params: &ParameterSet,
    program: Option<&dyn Program>,
    env: &mut E,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Trace, BoundModel<'m>)> {
    validate_pairing(model, program)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params)?;
    let mut obs = env.reset(rng);
    let mut steps = Vec::new();
    let mut clamp_events = 0usize;
    loop {
        let fwd = bound.forward(&mut tape, &obs)?;
        let sampled = sample_heads(&mut tape, &fwd.heads, temperature, rng)?;
        if sampled.clamped {
            clamp_events += 1;
        }
        let action = match (program, sampled.direct_action) {
            (Some(p), _) => p.act(&sampled.symbol, env.goal().as_ref())?,
            (None, Some(a)) => a,
            (None, None) => unreachable!("validated pairing"),
        };
        let gt = env.ground_truth();
        let outcome = env.step(action, rng)?;
        steps.push(StepRecord {
            value_scalar: tape.value_scalar(fwd.value),
            heads: fwd.heads,
            obs_node: fwd.input,
            symbol: sampled.symbol,
            log_prob: sampled.log_prob,
            value: fwd.value,
            action,
            reward: outcome.reward,
            latent: sampled.latent,
            ground_truth: gt,
        });
        obs = env.observe();
        if outcome.done {
            break;
        }
    }
    // trailing state-symbol pair
    let fwd = bound.forward(&mut tape, &obs)?;
    let sampled = sample_heads(&mut tape, &fwd.heads, temperature, rng)?;
    let terminal = TerminalRecord {
        obs_node: fwd.input,
        symbol: sampled.symbol,
        ground_truth: env.ground_truth(),
    };
    Ok((
        Trace {
            tape,
            steps,
            terminal,
            clamp_events,
        },
        bound,
    ))
}

/// The three loss terms of one trace, as tape nodes.
pub struct EpisodeLosses {
    /// Σ_t log ψ(σ_t|s_t) · A_t — the ascent objective term
    pub loss_psi: ValueId,
    /// Σ_t (R_t − b(s_t))²
    pub loss_b: ValueId,
    /// Σ_t −½‖s_t − decode(σ_t)‖² — present in autoencoding mode
    pub loss_omega: Option<ValueId>,
}

/// Batch statistics used to standardise advantages across an iteration.
#[derive(Debug, Clone, Copy)]
pub struct AdvantageNorm {
    pub mean: f64,
    pub std: f64,
}

impl AdvantageNorm {
    pub fn from_values(values: &[f64]) -> AdvantageNorm {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        AdvantageNorm {
            mean,
            std: var.sqrt(),
        }
    }

    fn apply(&self, a: f64) -> f64 {
        (a - self.mean) / (self.std + 1e-8)
    }
}

/// Raw advantages R_t − b(s_t) of one trace, in step order.
pub fn raw_advantages(trace: &Trace, gamma: f64) -> Vec<f64> {
    let returns = compute_returns(&trace.rewards(), gamma);
    returns
        .iter()
        .zip(trace.steps.iter())
        .map(|(r, s)| r - s.value_scalar)
        .collect()
}

/// Assemble the loss terms on the trace's tape. Baseline values inside the
/// advantage are detached: they enter as constants, so L_ψ pushes no
/// gradient into the value head. When `norm` is given the ψ weights are the
/// batch-standardised advantages; the value target stays the raw return.
pub fn episode_losses(
    model: &Model,
    bound: &BoundModel,
    trace: &mut Trace,
    gamma: f64,
    norm: Option<AdvantageNorm>,
) -> Result<(EpisodeLosses, ReturnTable)> {
    if trace.steps.is_empty() {
        return Err(Error::contract("episode_losses: empty trace"));
    }
    let rewards = trace.rewards();
    let returns = compute_returns(&rewards, gamma);
    let advantages: Vec<f64> = returns
        .iter()
        .zip(trace.steps.iter())
        .map(|(r, s)| {
            let a = r - s.value_scalar;
            norm.map_or(a, |n| n.apply(a))
        })
        .collect();

    let tape = &mut trace.tape;
    let mut loss_psi: Option<ValueId> = None;
    let mut loss_b: Option<ValueId> = None;
    for (t, step) in trace.steps.iter().enumerate() {
        let weighted = tape.scale(step.log_prob, advantages[t]);
        loss_psi = Some(match loss_psi {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
        let target = tape.constant_scalar(returns[t]);
        let diff = tape.sub(target, step.value)?;
        let sq = tape.mul(diff, diff)?;
        loss_b = Some(match loss_b {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }

    let loss_omega = if model.decoder.is_some() {
        let mut acc: Option<ValueId> = None;
        for step in &trace.steps {
            let recon = bound.decode(tape, &step.latent)?;
            let diff = tape.sub(step.obs_node, recon)?;
            let sq = tape.mul(diff, diff)?;
            let sum = tape.sum(sq);
            let term = tape.scale(sum, -0.5);
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        acc
    } else {
        None
    };

    Ok((
        EpisodeLosses {
            loss_psi: loss_psi.unwrap(),
            loss_b: loss_b.unwrap(),
            loss_omega,
        },
        ReturnTable {
            returns,
            advantages,
            gamma,
        },
    ))
}

/// Loss weights (w_ψ, w_b, w_ω).
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub w_psi: f64,
    pub w_b: f64,
    pub w_omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_psi: 1.0,
            w_b: 0.5,
            w_omega: 1e-3,
        }
    }
}

/// The scalar the optimizer descends for one trace, scaled by 1/n so that
/// accumulating n episodes yields the batch mean: the ascent terms L_ψ and
/// L_ω enter negated.
pub fn total_loss(
    tape: &mut Tape,
    losses: &EpisodeLosses,
    weights: &LossWeights,
    n_episodes: usize,
) -> Result<ValueId> {
    let inv_n = 1.0 / n_episodes as f64;
    let mut total = tape.scale(losses.loss_psi, -weights.w_psi * inv_n);
    let b = tape.scale(losses.loss_b, weights.w_b * inv_n);
    total = tape.add(total, b)?;
    if let Some(omega) = losses.loss_omega {
        let o = tape.scale(omega, -weights.w_omega * inv_n);
        total = tape.add(total, o)?;
    }
    Ok(total)
}

// ---- the training loop -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    /// episodes collected per iteration (n)
    pub episodes: usize,
    pub gamma: f64,
    pub weights: LossWeights,
    pub temperature: f64,
    pub seed: u64,
    /// rollout fan-out; 0 uses the rayon default
    pub workers: usize,
    /// checkpoint cadence in iterations; 0 disables periodic checkpoints
    pub checkpoint_every: usize,
    /// resume offset: metrics continue at start_iteration + 1
    pub start_iteration: usize,
    /// standardise advantages over each iteration's batch before weighting
    /// the ψ terms; off reproduces the plain estimator
    pub normalize_advantages: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            episodes: 10,
            gamma: 0.99,
            weights: LossWeights::default(),
            temperature: 1.0,
            seed: 1,
            workers: 0,
            checkpoint_every: 500,
            start_iteration: 0,
            normalize_advantages: true,
        }
    }
}

/// One metrics row.
#[derive(Debug, Clone)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub loss_psi: f64,
    pub loss_b: f64,
    pub loss_omega: Option<f64>,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,episodes,mean_return,std_return,loss_psi,loss_b,loss_omega,wall_time_s";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        let omega = self
            .loss_omega
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{:.3}",
            self.iteration,
            self.episodes,
            self.mean_return,
            self.std_return,
            self.loss_psi,
            self.loss_b,
            omega,
            self.wall_time_s
        )
    }
}

pub struct TrainSummary {
    pub iterations_run: usize,
    pub final_checkpoint: Option<PathBuf>,
}

struct EpisodeResult {
    param_grads: Vec<(String, Vec<f64>)>,
    undiscounted_return: f64,
    loss_psi: f64,
    loss_b: f64,
    loss_omega: Option<f64>,
}

/// Deterministic per-episode stream: a splitmix-style hash of
/// (seed, iteration, episode) keeps streams independent of scheduling.
pub fn episode_seed(seed: u64, iteration: usize, episode: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(iteration as u64)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
        .wrapping_add(episode as u64);
    z ^= z >> 30;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 27;
    z
}

fn finish_episode(
    model: &Model,
    bound: &BoundModel,
    mut trace: Trace,
    cfg: &TrainConfig,
    norm: Option<AdvantageNorm>,
    iteration: usize,
    episode: usize,
) -> Result<EpisodeResult> {
    let (losses, _table) = episode_losses(model, bound, &mut trace, cfg.gamma, norm)?;
    let loss_psi = trace.tape.value_scalar(losses.loss_psi);
    let loss_b = trace.tape.value_scalar(losses.loss_b);
    let loss_omega = losses.loss_omega.map(|id| trace.tape.value_scalar(id));
    let finite =
        loss_psi.is_finite() && loss_b.is_finite() && loss_omega.map_or(true, |v| v.is_finite());
    if !finite {
        return Err(Error::NumericAbort(format!(
            "iteration {iteration} episode {episode}: non-finite loss \
             (psi={loss_psi}, b={loss_b}, omega={loss_omega:?}, steps={})",
            trace.steps.len()
        )));
    }
    let total = total_loss(&mut trace.tape, &losses, &cfg.weights, cfg.episodes)?;
    let grads = trace.tape.backward(total)?;
    Ok(EpisodeResult {
        param_grads: grads.into_param_grads(&trace.tape),
        undiscounted_return: trace.undiscounted_return(),
        loss_psi,
        loss_b,
        loss_omega,
    })
}

/// Run the optimisation loop. `make_env` builds one environment per episode;
/// `on_iteration` sees every metrics row and may stop the run early by
/// returning `false`.
#[allow(clippy::too_many_arguments)]
pub fn train<E, F, C>(
    cfg: &TrainConfig,
    model: &Model,
    params: &mut ParameterSet,
    adam: &mut Adam,
    program: Option<&dyn Program>,
    make_env: F,
    out_dir: Option<&Path>,
    mut on_iteration: C,
) -> Result<TrainSummary>
where
    E: Environment,
    F: Fn() -> E + Sync,
    C: FnMut(&IterationMetrics) -> bool,
{
    validate_pairing(model, program)?;
    if cfg.episodes == 0 {
        return Err(Error::Config("train: episodes must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)?;
            if f.metadata()?.len() == 0 {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };

    let mut iterations_run = 0;
    'outer: for offset in 0..cfg.iterations {
        let iteration = cfg.start_iteration + offset + 1;
        let t0 = Instant::now();

        // phase 1: collect the iteration's rollouts
        let rollouts: Vec<Result<(Trace, BoundModel)>> = pool.install(|| {
            use rayon::prelude::*;
            (0..cfg.episodes)
                .into_par_iter()
                .map(|ep| {
                    let mut env = make_env();
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, iteration, ep));
                    rollout(model, params, program, &mut env, cfg.temperature, &mut rng)
                })
                .collect()
        });
        let mut traces = Vec::with_capacity(cfg.episodes);
        for r in rollouts {
            traces.push(r?);
        }

        // batch advantage statistics across every step of every episode
        let norm = if cfg.normalize_advantages {
            let mut all = Vec::new();
            for (trace, _) in &traces {
                all.extend(raw_advantages(trace, cfg.gamma));
            }
            Some(AdvantageNorm::from_values(&all))
        } else {
            None
        };

        // phase 2: losses and per-episode backward passes
        let results: Vec<Result<EpisodeResult>> = pool.install(|| {
            use rayon::prelude::*;
            traces
                .into_par_iter()
                .enumerate()
                .map(|(ep, (trace, bound))| {
                    finish_episode(model, &bound, trace, cfg, norm, iteration, ep)
                })
                .collect()
        });
        let mut episode_results = Vec::with_capacity(cfg.episodes);
        for r in results {
            match r {
                Ok(er) => episode_results.push(er),
                Err(e) => {
                    if let (Some(dir), Error::NumericAbort(msg)) = (out_dir, &e) {
                        let _ = std::fs::write(
                            dir.join("abort_dump.txt"),
                            format!("numeric abort at iteration {iteration}\n{msg}\n"),
                        );
                    }
                    return Err(e);
                }
            }
        }

        // fixed reduction order over episodes
        for er in &episode_results {
            for (name, g) in &er.param_grads {
                params.accumulate_grad(name, g)?;
            }
        }
        adam.step(params)?;

        let n = episode_results.len() as f64;
        let mean_return: f64 = episode_results
            .iter()
            .map(|e| e.undiscounted_return)
            .sum::<f64>()
            / n;
        let var: f64 = episode_results
            .iter()
            .map(|e| (e.undiscounted_return - mean_return).powi(2))
            .sum::<f64>()
            / n;
        let has_omega = episode_results.iter().all(|e| e.loss_omega.is_some());
        let metrics = IterationMetrics {
            iteration,
            episodes: cfg.episodes,
            mean_return,
            std_return: var.sqrt(),
            loss_psi: episode_results.iter().map(|e| e.loss_psi).sum::<f64>() / n,
            loss_b: episode_results.iter().map(|e| e.loss_b).sum::<f64>() / n,
            loss_omega: has_omega.then(|| {
                episode_results
                    .iter()
                    .map(|e| e.loss_omega.unwrap())
                    .sum::<f64>()
                    / n
            }),
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", metrics.csv_row())?;
        }
        iterations_run += 1;

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
                save_checkpoint(params, &dir.join(format!("ckpt_{iteration:06}")))?;
            }
        }

        if !on_iteration(&metrics) {
            break 'outer;
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let prefix = dir.join("ckpt_final");
            save_checkpoint(params, &prefix)?;
            Some(prefix)
        }
        None => None,
    };
    Ok(TrainSummary {
        iterations_run,
        final_checkpoint,
    })
}

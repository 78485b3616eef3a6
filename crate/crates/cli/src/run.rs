//! Wiring from a resolved configuration to concrete environments, models,
//! programs and instruments.

use std::path::Path;

use pgrad_core::env::{image, CartPole, CollectWood, Environment, GotoPose};
use pgrad_core::error::{Error, Result};
use pgrad_core::eval;
use pgrad_core::params::{
    load_checkpoint, load_checkpoint_into, write_text, Adam, AdamHyper, ParameterSet,
};
use pgrad_core::perceptor::Model;
use pgrad_core::programs::{CollectWoodProgram, GotoPoseProgram, LqrProgram, Program, PAPER_GAIN};
use pgrad_core::training::{self, rollout, LossWeights, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Task};

pub fn build_model(cfg: &RunConfig) -> Model {
    let mut model = match cfg.task {
        Task::CartpoleLqr => Model::cartpole_ff(cfg.half_images),
        Task::GotoPose => Model::goto_pose(cfg.half_images, cfg.autoencoding()),
        Task::GotoPoseFeedforward => Model::goto_pose(cfg.half_images, false),
        Task::CollectWood => Model::collect_wood_stacked(cfg.half_images, true),
        Task::CollectWoodFeedforward => Model::collect_wood_stacked(cfg.half_images, false),
        Task::CartpolePolicyBaseline => Model::cartpole_policy(cfg.half_images),
        Task::GotoPosePolicyBaseline => Model::grid_policy(cfg.half_images, 7),
        Task::CollectWoodPolicyBaseline => Model::grid_policy(cfg.half_images, 8),
    };
    model.baseline_shares_trunk = cfg.baseline_shares_trunk;
    model
}

fn train_config(cfg: &RunConfig, start_iteration: usize) -> TrainConfig {
    TrainConfig {
        iterations: cfg.iterations,
        episodes: cfg.episodes,
        gamma: cfg.gamma,
        weights: LossWeights {
            w_psi: cfg.w_psi,
            w_b: cfg.w_b,
            w_omega: cfg.w_omega,
        },
        temperature: cfg.temperature,
        seed: cfg.seed,
        workers: cfg.workers,
        checkpoint_every: cfg.checkpoint_every,
        start_iteration,
        normalize_advantages: cfg.normalize_advantages,
    }
}

fn last_metrics_iteration(dir: &Path) -> usize {
    let Ok(text) = std::fs::read_to_string(dir.join("metrics.csv")) else {
        return 0;
    };
    text.lines()
        .skip(1)
        .filter_map(|l| l.split(',').next())
        .filter_map(|v| v.parse::<usize>().ok())
        .last()
        .unwrap_or(0)
}

fn generic_train<E, F>(
    cfg: &RunConfig,
    out: &Path,
    model: &Model,
    program: Option<&dyn Program>,
    make_env: F,
) -> Result<()>
where
    E: Environment,
    F: Fn() -> E + Sync,
{
    let mut params = model.init_params(cfg.seed)?;
    let mut start_iteration = 0;
    if let Some(resume_dir) = &cfg.resume {
        load_checkpoint_into(&mut params, &resume_dir.join("ckpt_final"))?;
        start_iteration = last_metrics_iteration(resume_dir);
        if resume_dir != out {
            // continue numbering in the new directory
            std::fs::create_dir_all(out)?;
            let src = resume_dir.join("metrics.csv");
            if src.exists() {
                std::fs::copy(src, out.join("metrics.csv"))?;
            }
        }
    }
    if let Some(transfer) = &cfg.transfer_pose {
        let src = load_checkpoint(transfer)?;
        let copied = params.copy_renamed_from(&src, "enc/", "pose/")?;
        if copied == 0 {
            return Err(Error::Checkpoint(format!(
                "transfer checkpoint {} contains no enc/ tensors",
                transfer.display()
            )));
        }
        params.set_lr_scale("pose/", cfg.pose_lr_scale);
    }
    std::fs::create_dir_all(out)?;
    write_text(&out.join("config.resolved"), &cfg.resolved_text())?;
    let mut adam = Adam::new(AdamHyper {
        lr: cfg.lr,
        ..Default::default()
    });
    let tc = train_config(cfg, start_iteration);
    training::train(
        &tc,
        model,
        &mut params,
        &mut adam,
        program,
        make_env,
        Some(out),
        |m| {
            if m.iteration % 50 == 0 {
                eprintln!(
                    "iter {:>6}  mean return {:>9.3}  (±{:.3})",
                    m.iteration, m.mean_return, m.std_return
                );
            }
            true
        },
    )?;
    Ok(())
}

/// `train` command body.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = build_model(cfg);
    let half = cfg.half_images;
    match cfg.task {
        Task::CartpoleLqr => {
            let program = LqrProgram { gain: PAPER_GAIN };
            generic_train(cfg, out, &model, Some(&program), || CartPole::standard(half))
        }
        Task::GotoPose | Task::GotoPoseFeedforward => {
            generic_train(cfg, out, &model, Some(&GotoPoseProgram), || {
                GotoPose::standard(half)
            })
        }
        Task::CollectWood | Task::CollectWoodFeedforward => {
            generic_train(cfg, out, &model, Some(&CollectWoodProgram), || {
                CollectWood::standard(half)
            })
        }
        Task::CartpolePolicyBaseline => {
            generic_train(cfg, out, &model, None, || CartPole::standard(half))
        }
        Task::GotoPosePolicyBaseline => generic_train(cfg, out, &model, None, || {
            let mut env = GotoPose::standard(half);
            env.draw_goal_arrow = true;
            env
        }),
        Task::CollectWoodPolicyBaseline => {
            generic_train(cfg, out, &model, None, || CollectWood::standard(half))
        }
    }
}

/// Infer (task-compatible) model geometry from a checkpoint's tensors.
fn model_for_checkpoint(task: Task, params: &ParameterSet) -> Result<Model> {
    let has = |k: &str| params.contains(k);
    let flat_of = |name: &str| -> Result<usize> {
        Ok(params.tensor(name)?.shape[1])
    };
    let model = match task {
        Task::CartpoleLqr => {
            let half = match flat_of("enc/fc/w")? {
                896 => false,
                192 => true,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unrecognized cart-pole trunk width {other}"
                    )))
                }
            };
            Model::cartpole_ff(half)
        }
        Task::GotoPose | Task::GotoPoseFeedforward => {
            let half = match flat_of("enc/fc/w")? {
                1152 => false,
                128 => true,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unrecognized grid trunk width {other}"
                    )))
                }
            };
            Model::goto_pose(half, has("dec/fc1/w"))
        }
        Task::CollectWood | Task::CollectWoodFeedforward => {
            let half = match flat_of("pose/fc/w")? {
                1152 => false,
                128 => true,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unrecognized grid trunk width {other}"
                    )))
                }
            };
            Model::collect_wood_stacked(half, has("dec/fc1/w"))
        }
        other => {
            return Err(Error::Config(format!(
                "eval does not support task '{}'",
                other.name()
            )))
        }
    };
    Ok(model)
}

/// `eval` command body: confusion matrices for the grid tasks, the latent
/// alignment fit for the cart-pole.
pub fn cmd_eval(checkpoint: &Path, task: Task, episodes: usize, out: &Path, seed: u64) -> Result<()> {
    if episodes == 0 {
        return Err(Error::contract("eval: episodes must be >= 1"));
    }
    let raw = load_checkpoint(checkpoint)?;
    let model = model_for_checkpoint(task, &raw)?;
    let mut params = model.init_params(0)?;
    load_checkpoint_into(&mut params, checkpoint)?;
    std::fs::create_dir_all(out)?;
    let half = model.encoders[0].trunk.in_h <= 32;

    match task {
        Task::GotoPose | Task::GotoPoseFeedforward | Task::CollectWood
        | Task::CollectWoodFeedforward => {
            let grid_goto = matches!(task, Task::GotoPose | Task::GotoPoseFeedforward);
            let matrices = if grid_goto {
                eval::confusion(
                    &model,
                    &params,
                    &GotoPoseProgram,
                    || GotoPose::standard(half),
                    episodes,
                    seed,
                    1.0,
                )?
            } else {
                eval::confusion(
                    &model,
                    &params,
                    &CollectWoodProgram,
                    || CollectWood::standard(half),
                    episodes,
                    seed,
                    1.0,
                )?
            };
            let names: &[&str] = if grid_goto {
                &["x", "y", "alpha"]
            } else {
                &["x", "y", "alpha", "xw", "yw"]
            };
            let mut summary = format!("task: {}\nepisodes: {episodes}\n", task.name());
            for (name, m) in names.iter().zip(&matrices) {
                write_text(&out.join(format!("confusion_{name}.csv")), &m.to_csv())?;
                summary.push_str(&format!(
                    "accuracy_{name}: {:.4} ({} samples)\n",
                    m.accuracy(),
                    m.total()
                ));
            }
            if model.decoder.is_some() {
                let cycle = eval::cycle_consistency(&model, &params)?;
                for (name, acc) in names.iter().zip(&cycle.per_variable) {
                    summary.push_str(&format!("cycle_{name}: {acc:.4}\n"));
                }
                summary.push_str(&format!(
                    "cycle_joint: {:.4} over {} specs\n",
                    cycle.joint, cycle.total
                ));
            }
            write_text(&out.join("summary.txt"), &summary)?;
        }
        Task::CartpoleLqr => {
            // one labelled episode: perceptor means against privileged state
            let program = LqrProgram { gain: PAPER_GAIN };
            let mut latents: Vec<Vec<f64>> = Vec::new();
            let mut truths: Vec<Vec<f64>> = Vec::new();
            let mut episode = 0usize;
            while latents.len() < 8 && episode < episodes.max(8) {
                let mut env = CartPole::standard(half);
                let mut rng = ChaCha8Rng::seed_from_u64(
                    training::episode_seed(seed, 0, episode),
                );
                let (trace, _) =
                    rollout(&model, &params, Some(&program), &mut env, 1.0, &mut rng)?;
                if latents.is_empty() || trace.steps.len() >= 8 {
                    latents.clear();
                    truths.clear();
                    for step in &trace.steps {
                        if let pgrad_core::perceptor::HeadsOut::Gaussian(g) = &step.heads {
                            latents.push(trace.tape.values(g.mean).to_vec());
                            truths.push(step.ground_truth.as_continuous()?.to_vec());
                        }
                    }
                }
                episode += 1;
            }
            let fit = eval::fit_alignment(&latents, &truths)?;
            write_text(&out.join("alignment.csv"), &fit.to_csv())?;
            let mut summary = format!(
                "task: cartpole-lqr\nsteps: {}\northogonality_deviation: {:.6}\ndegenerate: {}\n",
                latents.len(),
                fit.orthogonality_deviation,
                fit.degenerate
            );
            for (i, r) in fit.residual_rms.iter().enumerate() {
                summary.push_str(&format!("residual_rms_{i}: {r:.6}\n"));
            }
            write_text(&out.join("summary.txt"), &summary)?;
        }
        other => {
            return Err(Error::Config(format!(
                "eval does not support task '{}'",
                other.name()
            )))
        }
    }
    Ok(())
}

/// `gen` command body: decode symbolic specs into PPM images, one per line.
pub fn cmd_gen(checkpoint: &Path, spec_file: &Path, out: &Path) -> Result<()> {
    let raw = load_checkpoint(checkpoint)?;
    if !raw.contains("dec/fc1/w") {
        return Err(Error::Config(
            "gen needs an autoencoding checkpoint (no decoder tensors found)".into(),
        ));
    }
    let latent = raw.tensor("dec/fc1/w")?.shape[1];
    let task = match latent {
        14 => Task::GotoPose,
        24 => Task::CollectWood,
        other => {
            return Err(Error::Checkpoint(format!(
                "unrecognized decoder latent width {other}"
            )))
        }
    };
    let model = model_for_checkpoint(task, &raw)?;
    let mut params = model.init_params(0)?;
    load_checkpoint_into(&mut params, checkpoint)?;
    let cards = model.cards();

    let text = std::fs::read_to_string(spec_file)
        .map_err(|e| Error::Config(format!("cannot read spec file: {e}")))?;
    let mut specs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<usize>, _> =
            trimmed.split_whitespace().map(|t| t.parse::<usize>()).collect();
        let vals = vals.map_err(|_| {
            Error::contract(format!("spec line {}: malformed symbols", lineno + 1))
        })?;
        if vals.len() != cards.len() {
            return Err(Error::contract(format!(
                "spec line {}: expected {} symbols, got {}",
                lineno + 1,
                cards.len(),
                vals.len()
            )));
        }
        for (v, k) in vals.iter().zip(&cards) {
            if *v < 1 || *v > *k {
                return Err(Error::contract(format!(
                    "spec line {}: value {v} outside 1..={k}",
                    lineno + 1
                )));
            }
        }
        specs.push(vals);
    }
    std::fs::create_dir_all(out)?;
    let images = eval::generate(&model, &params, &specs)?;
    for (i, obs) in images.iter().enumerate() {
        image::write_observation(&out.join(format!("gen_{i:03}")), obs)?;
    }
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}


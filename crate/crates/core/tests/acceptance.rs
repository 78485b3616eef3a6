//! Acceptance suite. One test per criterion; each prints a PASS/FAIL line.
//!
//! The learning criteria train real agents at desk scale (halved images,
//! fixed seeds) and take hours on CPU. Finished runs are cached under the
//! target tmpdir keyed by an exact configuration fingerprint, so repeated
//! invocations only retrain after a configuration change.

mod common;

use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{check_gradients, TestRng};
use pgrad_core::dist::{CategoricalHead, DiagGaussian};
use pgrad_core::env::grid::{GridAction, GRID_SIDE, ORIENTATIONS};
use pgrad_core::env::cartpole::cartpole_step;
use pgrad_core::env::{CartPole, CollectWood, Environment, GotoPose, GridPose};
use pgrad_core::eval;
use pgrad_core::linalg::Mat;
use pgrad_core::params::{load_checkpoint, Adam, AdamHyper};
use pgrad_core::perceptor::Model;
use pgrad_core::programs::lqr::closed_loop_stable;
use pgrad_core::programs::{
    astar_plan, build_cartpole_model, collect_wood_program, goto_pose_program, lqr_act,
    lqr_invariance_check, solve_lqr_gain, CollectWoodProgram, GotoPoseProgram, LqrProgram,
    Program, SymbolSpace, PAPER_GAIN,
};
use pgrad_core::training::audit::{gradient_audit, one_step_bernoulli, two_step_two_state};
use pgrad_core::training::{
    episode_losses, rollout, total_loss, train, LossWeights, TrainConfig,
};

const HALF_IMAGES: bool = true;
const SEEDS: [u64; 3] = [1, 2, 3];
const WORKERS: usize = 2;

const CARTPOLE_BUDGET: usize = 6000;
const CARTPOLE_THRESHOLD: f64 = 180.0;
const GOTO_BUDGET: usize = 4000;
const GOTO_THRESHOLD: f64 = 10.0;
const COLLECT_BUDGET: usize = 5000;
/// fraction of the ground-truth policy's return collect-wood must reach
const COLLECT_FRACTION: f64 = 0.9;
/// extra iterations after the go-to-pose crossing so the checkpoint the
/// representation criteria read is settled, not the first lucky batch
const GOTO_POLISH: usize = 400;
const ABLATION_BUDGET: usize = 1200;

fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    println!(
        "criterion {name}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

// ---- criterion 1: gradient correctness ----------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rng = TestRng::new(101);

    // linear
    worst = worst.max(check_gradients(
        &[
            (vec![2, 5], rng.fill(10)),
            (vec![3, 5], rng.fill(15)),
            (vec![3], rng.fill(3)),
        ],
        1e-5,
        |tape, ids| {
            let y = tape.linear(ids[0], ids[1], ids[2]).unwrap();
            let s = tape.softmax_last(y).unwrap();
            let mut r = TestRng::new(1);
            let n = tape.values(s).len();
            let shape = tape.shape(s).to_vec();
            let w = tape.constant(shape, r.fill(n));
            let p = tape.mul(s, w).unwrap();
            tape.sum(p)
        },
    ));
    // conv + adjoint + activations, composite
    for stride in [1, 2] {
        worst = worst.max(check_gradients(
            &[
                (vec![1, 2, 7, 8], rng.fill(2 * 7 * 8)),
                (vec![3, 2, 3, 3], rng.fill(3 * 2 * 9)),
            ],
            1e-5,
            move |tape, ids| {
                let c = tape.conv2d(ids[0], ids[1], stride).unwrap();
                let a = tape.relu(c).unwrap();
                let e = tape.sigmoid(a).unwrap();
                tape.sum(e)
            },
        ));
        worst = worst.max(check_gradients(
            &[
                (vec![1, 3, 3, 4], rng.fill(3 * 12)),
                (vec![3, 2, 2, 3], rng.fill(3 * 2 * 6)),
            ],
            1e-5,
            move |tape, ids| {
                let x = tape.conv_transpose2d(ids[0], ids[1], stride).unwrap();
                let s = tape.softplus(x).unwrap();
                tape.sum(s)
            },
        ));
    }
    // distribution heads
    let eps = [0.4, -0.9, 1.1, 0.2];
    worst = worst.max(check_gradients(
        &[(vec![4], rng.fill(4)), (vec![4], rng.fill(4))],
        1e-5,
        move |tape, ids| {
            let g = DiagGaussian {
                mean: ids[0],
                log_var: ids[1],
            };
            let s = g.sample_with_noise(tape, &eps).unwrap();
            let datum = tape.constant(vec![4], vec![0.3, 0.1, -0.2, 0.7]);
            let lp = g.log_prob(tape, datum).unwrap();
            let ssum = tape.sum(s);
            tape.add(lp, ssum).unwrap()
        },
    ));
    let noise = [0.2, -0.5, 0.9, 0.0, -1.2];
    worst = worst.max(check_gradients(&[(vec![5], rng.fill(5))], 1e-5, move |tape, ids| {
        let head = CategoricalHead { logits: ids[0] };
        let draw = head.gumbel_softmax_with_noise(tape, 1.0, &noise).unwrap();
        let lp = head.log_prob(tape, 3).unwrap();
        let rsum = tape.sum(draw.relaxed);
        tape.add(lp, rsum).unwrap()
    }));

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-5 && elapsed < 10.0;
    assert!(
        verdict(
            "1 (gradient correctness)",
            pass,
            &format!("max relative error {worst:.3e}, {elapsed:.2} s")
        ),
        "finite-difference checks out of tolerance"
    );
}

// ---- criterion 2: Theorem 1 audit ---------------------------------------------

#[test]
fn criterion_2_theorem_audit() {
    let t0 = Instant::now();
    let one = one_step_bernoulli(0.4);
    let r1 = gradient_audit(&one, 100_000, 2024).unwrap();
    let exact_one_ok = (r1.exact_j - 0.4).abs() < 1e-15 && (r1.exact_grad[0] - 1.0).abs() < 1e-12;

    let two = two_step_two_state(0.35, 0.6);
    let r2 = gradient_audit(&two, 100_000, 77).unwrap();

    // program swap on the enumerable process: action-equivalent programs give
    // bit-identical per-trace gradients
    let mut swapped = two_step_two_state(0.35, 0.6);
    swapped.program = |sigma| (sigma + 2) % 2;
    let ga = two.exact_score_gradient(None);
    let gb = swapped.exact_score_gradient(None);
    let swap_ok = ga
        .iter()
        .zip(&gb)
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let pass = exact_one_ok
        && r1.exact_vs_fd < 1e-8
        && r2.exact_vs_fd < 1e-8
        && r1.mc_within_4se
        && r2.mc_within_4se
        && r1.baseline_shift < 1e-10
        && r2.baseline_shift < 1e-10
        && swap_ok
        && t0.elapsed().as_secs_f64() < 60.0;
    assert!(
        verdict(
            "2 (Theorem 1 audit)",
            pass,
            &format!(
                "exact-vs-fd {:.2e}/{:.2e}, MC within 4 SE: {}/{}, baseline shift {:.1e}, program swap bit-identical: {swap_ok}, {:.1} s",
                r1.exact_vs_fd,
                r2.exact_vs_fd,
                r1.mc_within_4se,
                r2.mc_within_4se,
                r1.baseline_shift.max(r2.baseline_shift),
                t0.elapsed().as_secs_f64()
            )
        ),
        "theorem audit failed"
    );
}

// ---- criterion 3: LQR stack ----------------------------------------------------

#[test]
fn criterion_3_lqr_stack() {
    // scalar CARE embedded in the 4x4 machinery: P = 1, K = 1 exactly
    let mut a = Mat::zeros(4, 4);
    a[(1, 1)] = -1.0;
    a[(2, 2)] = -1.0;
    a[(3, 3)] = -1.0;
    let mut b = Mat::zeros(4, 1);
    b[(0, 0)] = 1.0;
    let scalar_model = pgrad_core::programs::StateSpaceModel { a, b };
    let scalar = solve_lqr_gain(&scalar_model, &Mat::identity(4), 1.0, &[2.0, 0.0, 0.0, 0.0])
        .unwrap();
    let scalar_ok = (scalar.k[0] - 1.0).abs() < 1e-9 && (scalar.p[(0, 0)] - 1.0).abs() < 1e-9;

    // Kleinman on the appendix model, both candidate masses
    let mut residuals = Vec::new();
    let mut patterns_ok = true;
    for m_model in [1.0, 1.1] {
        let model = build_cartpole_model(0.1, m_model, 0.5, 9.8).unwrap();
        let q = Mat::identity(4).scale(1e3);
        let design = solve_lqr_gain(&model, &q, 1.0, &PAPER_GAIN).unwrap();
        residuals.push(design.riccati_residual);
        let mag: Vec<f64> = design.k.iter().map(|v| v.abs()).collect();
        patterns_ok &= design.k.iter().all(|v| *v < 0.0)
            && mag[2] > mag[3]
            && mag[3] > mag[1]
            && mag[1] > mag[0];
        patterns_ok &= closed_loop_stable(&model, &design.k);
    }
    let residual_ok = residuals.iter().all(|r| *r < 1e-6);

    // the published gain balances the true nonlinear system
    let params = pgrad_core::env::CartPoleParams::default();
    let mut survived = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..100 {
        let mut s = pgrad_core::env::CartPoleState {
            x: rng.gen_range(-0.05..0.05),
            x_dot: rng.gen_range(-0.05..0.05),
            alpha: rng.gen_range(-0.05..0.05),
            alpha_dot: rng.gen_range(-0.05..0.05),
        };
        let mut alive = true;
        for _ in 0..200 {
            let action = lqr_act(&s.as_vec(), &PAPER_GAIN).unwrap();
            let (next, _, done) = cartpole_step(&s, action, &params);
            s = next;
            if done {
                alive = false;
                break;
            }
        }
        if alive {
            survived += 1;
        }
    }
    let balance_ok = survived >= 99;

    let pass = scalar_ok && residual_ok && patterns_ok && balance_ok;
    assert!(
        verdict(
            "3 (LQR stack)",
            pass,
            &format!(
                "scalar CARE exact: {scalar_ok}, residuals {:.1e}/{:.1e}, sign/order/stability: {patterns_ok}, balanced {survived}/100 episodes",
                residuals[0], residuals[1]
            )
        ),
        "LQR stack failed"
    );
}

// ---- criterion 4: A* oracle equivalence ----------------------------------------

fn bfs_cost(start: &GridPose, goal: &GridPose, obstacle: Option<(usize, usize)>) -> Option<usize> {
    use std::collections::{HashMap, VecDeque};
    if start == goal {
        return Some(0);
    }
    let mut dist = HashMap::new();
    dist.insert(*start, 0usize);
    let mut queue = VecDeque::new();
    queue.push_back(*start);
    while let Some(p) = queue.pop_front() {
        let d = dist[&p];
        for action in GridAction::MOVES_AND_ROTATIONS {
            let next = p.apply(action, obstacle);
            if next == p || dist.contains_key(&next) {
                continue;
            }
            if next == *goal {
                return Some(d + 1);
            }
            dist.insert(next, d + 1);
            queue.push_back(next);
        }
    }
    None
}

#[test]
fn criterion_4_astar_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut agree = 0usize;
    let total = 1000usize;
    for trial in 0..total {
        let rand_pose = |rng: &mut ChaCha8Rng| {
            GridPose::new(
                rng.gen_range(1..=GRID_SIDE),
                rng.gen_range(1..=GRID_SIDE),
                rng.gen_range(1..=ORIENTATIONS),
            )
        };
        let start = rand_pose(&mut rng);
        let goal = rand_pose(&mut rng);
        let obstacle = if trial % 2 == 1 {
            let cell = (rng.gen_range(1..=GRID_SIDE), rng.gen_range(1..=GRID_SIDE));
            if cell == (start.x, start.y) || cell == (goal.x, goal.y) {
                None
            } else {
                Some(cell)
            }
        } else {
            None
        };
        let plan = astar_plan(&start, &goal, obstacle).unwrap();
        if Some(plan.cost) == bfs_cost(&start, &goal, obstacle) {
            agree += 1;
        }
    }
    assert!(
        verdict(
            "4 (A* oracle equivalence)",
            agree == total,
            &format!("{agree}/{total} plans match breadth-first-search optima")
        ),
        "A* disagreed with the exhaustive oracle"
    );
}

// ---- criterion 5: go-to-pose reward design --------------------------------------

fn goto_gt_mean_return(episodes: usize, seed: u64) -> f64 {
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut env = GotoPose::standard(HALF_IMAGES);
        let mut rng = ChaCha8Rng::seed_from_u64(pgrad_core::training::episode_seed(seed, 0, ep));
        env.reset(&mut rng);
        let mut ret = 0.0;
        loop {
            let action = goto_pose_program(&env.ground_truth(), &env.goal().unwrap()).unwrap();
            let out = env.step(action.index(), &mut rng).unwrap();
            ret += out.reward;
            if out.done {
                break;
            }
        }
        total += ret;
    }
    total / episodes as f64
}

fn collect_gt_mean_return(episodes: usize, seed: u64) -> f64 {
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut env = CollectWood::standard(HALF_IMAGES);
        let mut rng = ChaCha8Rng::seed_from_u64(pgrad_core::training::episode_seed(seed, 0, ep));
        env.reset(&mut rng);
        let mut ret = 0.0;
        loop {
            let action = collect_wood_program(&env.ground_truth()).unwrap();
            let out = env.step(action.index(), &mut rng).unwrap();
            ret += out.reward;
            if out.done {
                break;
            }
        }
        total += ret;
    }
    total / episodes as f64
}

#[test]
fn criterion_5_goto_pose_reward_design() {
    let mean = goto_gt_mean_return(1000, 505);
    let pass = (mean - 11.35).abs() <= 1.0;
    assert!(
        verdict(
            "5 (go-to-pose environment + program)",
            pass,
            &format!("ground-truth A* policy mean return {mean:.3} vs 11.35 ± 1.0")
        ),
        "reward design mismatch: mean return {mean:.3} outside 11.35 ± 1.0"
    );
}

// ---- criterion 6: end-to-end learning -------------------------------------------

#[derive(Debug, Clone)]
struct TrainOutcome {
    seed: u64,
    crossed_at: Option<usize>,
    iterations_run: usize,
    ckpt: PathBuf,
    trailing_return_std: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum RunKind {
    CartpolePerceptor,
    CartpolePolicy,
    GotoAe,
    GotoFf,
    GotoPolicy,
    CollectStacked,
    CollectFf,
    CollectPolicy,
}

impl RunKind {
    fn name(self) -> &'static str {
        match self {
            RunKind::CartpolePerceptor => "cartpole-perceptor",
            RunKind::CartpolePolicy => "cartpole-policy",
            RunKind::GotoAe => "goto-ae",
            RunKind::GotoFf => "goto-ff",
            RunKind::GotoPolicy => "goto-policy",
            RunKind::CollectStacked => "collect-stacked",
            RunKind::CollectFf => "collect-ff",
            RunKind::CollectPolicy => "collect-policy",
        }
    }

    fn model(self) -> Model {
        let mut model = match self {
            RunKind::CartpolePerceptor => Model::cartpole_ff(HALF_IMAGES),
            RunKind::CartpolePolicy => Model::cartpole_policy(HALF_IMAGES),
            RunKind::GotoAe => Model::goto_pose(HALF_IMAGES, true),
            RunKind::GotoFf => Model::goto_pose(HALF_IMAGES, false),
            RunKind::GotoPolicy => Model::grid_policy(HALF_IMAGES, 7),
            RunKind::CollectStacked => Model::collect_wood_stacked(HALF_IMAGES, true),
            RunKind::CollectFf => Model::collect_wood_stacked(HALF_IMAGES, false),
            RunKind::CollectPolicy => Model::grid_policy(HALF_IMAGES, 8),
        };
        // the value head learns on its own trunk: sharing lets the large
        // squared-return gradients crowd the policy signal out of the
        // convolutions (observed as a hard plateau in probe runs)
        model.baseline_shares_trunk = false;
        model
    }

    fn lr(self) -> f64 {
        1e-4
    }
}

fn accept_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Stop rule: run to the cap, optionally halting `polish` iterations after
/// the first threshold crossing.
struct StopRule {
    cap: usize,
    stop_after_cross: Option<usize>,
}

fn fingerprint(kind: RunKind, seed: u64, rule: &StopRule, threshold: Option<f64>, warm: &Option<PathBuf>) -> String {
    format!(
        "kind={} seed={seed} cap={} polish={:?} threshold={:?} warm={} lr={} half={HALF_IMAGES} v=2",
        kind.name(),
        rule.cap,
        rule.stop_after_cross,
        threshold,
        warm.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        kind.lr(),
    )
}

fn load_cached(dir: &Path, fp: &str) -> Option<TrainOutcome> {
    let meta = std::fs::read_to_string(dir.join("accept_meta.txt")).ok()?;
    let mut lines = meta.lines();
    if lines.next()? != fp {
        return None;
    }
    let crossed_at: Option<usize> = match lines.next()? {
        "none" => None,
        s => Some(s.parse().ok()?),
    };
    let iterations_run: usize = lines.next()?.parse().ok()?;
    let seed: u64 = lines.next()?.parse().ok()?;
    let trailing_return_std: f64 = lines.next()?.parse().ok()?;
    let ckpt = dir.join("ckpt_final");
    if !ckpt.with_extension("manifest").exists() {
        return None;
    }
    Some(TrainOutcome {
        seed,
        crossed_at,
        iterations_run,
        ckpt,
        trailing_return_std,
    })
}

fn run_training(
    kind: RunKind,
    seed: u64,
    threshold: Option<f64>,
    rule: StopRule,
    warm: Option<PathBuf>,
) -> TrainOutcome {
    let dir = accept_dir().join(format!("{}-s{seed}", kind.name()));
    let fp = fingerprint(kind, seed, &rule, threshold, &warm);
    if let Some(hit) = load_cached(&dir, &fp) {
        eprintln!("[accept] cached {} seed {seed}: crossed {:?}", kind.name(), hit.crossed_at);
        return hit;
    }
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();

    let model = kind.model();
    let mut params = model.init_params(seed).unwrap();
    if let Some(warm_ckpt) = &warm {
        let src = load_checkpoint(warm_ckpt).unwrap();
        let copied = params.copy_renamed_from(&src, "enc/", "pose/").unwrap();
        assert!(copied > 0, "warm start found no pose tensors");
        params.set_lr_scale("pose/", 0.1);
    }
    let mut adam = Adam::new(AdamHyper {
        lr: kind.lr(),
        ..Default::default()
    });
    let cfg = TrainConfig {
        iterations: rule.cap,
        episodes: 10,
        gamma: 0.99,
        weights: LossWeights::default(),
        temperature: 1.0,
        seed,
        workers: WORKERS,
        checkpoint_every: 0,
        start_iteration: 0,
        normalize_advantages: true,
    };

    let mut crossed_at: Option<usize> = None;
    let mut returns: Vec<f64> = Vec::new();
    let t0 = Instant::now();
    let program_goto = GotoPoseProgram;
    let program_collect = CollectWoodProgram;
    let program_lqr = LqrProgram { gain: PAPER_GAIN };
    let program: Option<&dyn Program> = match kind {
        RunKind::CartpolePerceptor => Some(&program_lqr),
        RunKind::GotoAe | RunKind::GotoFf => Some(&program_goto),
        RunKind::CollectStacked | RunKind::CollectFf => Some(&program_collect),
        _ => None,
    };
    let mut on_iter = |m: &pgrad_core::training::IterationMetrics| -> bool {
        returns.push(m.mean_return);
        if crossed_at.is_none() && threshold.is_some_and(|t| m.mean_return >= t) {
            crossed_at = Some(m.iteration);
            eprintln!(
                "[accept] {} seed {seed}: crossed {:.1} at iteration {} ({:.0} s)",
                kind.name(),
                threshold.unwrap(),
                m.iteration,
                t0.elapsed().as_secs_f64()
            );
        }
        if m.iteration % 250 == 0 {
            eprintln!(
                "[accept] {} seed {seed}: iter {} mean return {:.2} ({:.0} s)",
                kind.name(),
                m.iteration,
                m.mean_return,
                t0.elapsed().as_secs_f64()
            );
        }
        match (crossed_at, rule.stop_after_cross) {
            (Some(c), Some(polish)) => m.iteration < c + polish,
            _ => true,
        }
    };

    let summary = match kind {
        RunKind::CartpolePerceptor | RunKind::CartpolePolicy => train(
            &cfg,
            &model,
            &mut params,
            &mut adam,
            program,
            || CartPole::standard(HALF_IMAGES),
            Some(&dir),
            &mut on_iter,
        )
        .unwrap(),
        RunKind::GotoAe | RunKind::GotoFf => train(
            &cfg,
            &model,
            &mut params,
            &mut adam,
            program,
            || GotoPose::standard(HALF_IMAGES),
            Some(&dir),
            &mut on_iter,
        )
        .unwrap(),
        RunKind::GotoPolicy => train(
            &cfg,
            &model,
            &mut params,
            &mut adam,
            program,
            || {
                let mut env = GotoPose::standard(HALF_IMAGES);
                env.draw_goal_arrow = true;
                env
            },
            Some(&dir),
            &mut on_iter,
        )
        .unwrap(),
        RunKind::CollectStacked | RunKind::CollectFf | RunKind::CollectPolicy => train(
            &cfg,
            &model,
            &mut params,
            &mut adam,
            program,
            || CollectWood::standard(HALF_IMAGES),
            Some(&dir),
            &mut on_iter,
        )
        .unwrap(),
    };

    let window = returns.len().min(400).max(1);
    let tail = &returns[returns.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    let trailing_return_std =
        (tail.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / window as f64).sqrt();

    let outcome = TrainOutcome {
        seed,
        crossed_at,
        iterations_run: summary.iterations_run,
        ckpt: summary.final_checkpoint.unwrap(),
        trailing_return_std,
    };
    std::fs::write(
        dir.join("accept_meta.txt"),
        format!(
            "{fp}\n{}\n{}\n{}\n{}\n",
            outcome
                .crossed_at
                .map(|c| c.to_string())
                .unwrap_or_else(|| "none".into()),
            outcome.iterations_run,
            outcome.seed,
            outcome.trailing_return_std
        ),
    )
    .unwrap();
    outcome
}

static COLLECT_GT_RETURN: LazyLock<f64> = LazyLock::new(|| collect_gt_mean_return(1000, 606));

static CARTPOLE_RUNS: LazyLock<Vec<TrainOutcome>> = LazyLock::new(|| {
    SEEDS
        .iter()
        .map(|&seed| {
            run_training(
                RunKind::CartpolePerceptor,
                seed,
                Some(CARTPOLE_THRESHOLD),
                StopRule {
                    cap: CARTPOLE_BUDGET,
                    stop_after_cross: Some(1),
                },
                None,
            )
        })
        .collect()
});

static GOTO_RUNS: LazyLock<Vec<TrainOutcome>> = LazyLock::new(|| {
    SEEDS
        .iter()
        .map(|&seed| {
            run_training(
                RunKind::GotoAe,
                seed,
                Some(GOTO_THRESHOLD),
                StopRule {
                    cap: GOTO_BUDGET,
                    stop_after_cross: Some(GOTO_POLISH),
                },
                None,
            )
        })
        .collect()
});

static COLLECT_RUNS: LazyLock<Vec<TrainOutcome>> = LazyLock::new(|| {
    let threshold = COLLECT_FRACTION * *COLLECT_GT_RETURN;
    SEEDS
        .iter()
        .map(|&seed| {
            // warm start from the same seed's go-to-pose run when it
            // crossed, otherwise from the first seed that did
            let goto = &GOTO_RUNS;
            let donor = goto
                .iter()
                .find(|r| r.seed == seed && r.crossed_at.is_some())
                .or_else(|| goto.iter().find(|r| r.crossed_at.is_some()))
                .unwrap_or(&goto[0]);
            run_training(
                RunKind::CollectStacked,
                seed,
                Some(threshold),
                StopRule {
                    cap: COLLECT_BUDGET,
                    stop_after_cross: Some(1),
                },
                Some(donor.ckpt.clone()),
            )
        })
        .collect()
});

fn majority(outcomes: &[TrainOutcome], budget: usize) -> (usize, Vec<Option<usize>>) {
    let crossings: Vec<Option<usize>> = outcomes.iter().map(|o| o.crossed_at).collect();
    let passes = crossings
        .iter()
        .filter(|c| c.is_some_and(|i| i <= budget))
        .count();
    (passes, crossings)
}

fn baseline_beats(perceptor: &[TrainOutcome], kind: RunKind, threshold: f64, budget: usize) -> (usize, String) {
    let mut wins = 0;
    let mut detail = String::new();
    for p in perceptor {
        let Some(pc) = p.crossed_at else {
            detail.push_str(&format!("seed {}: perceptor never crossed; ", p.seed));
            continue;
        };
        let cap = (pc + 1).min(budget);
        let baseline = run_training(
            kind,
            p.seed,
            Some(threshold),
            StopRule {
                cap,
                stop_after_cross: Some(1),
            },
            None,
        );
        let ordered = match baseline.crossed_at {
            None => true,
            Some(bc) => pc < bc,
        };
        if ordered {
            wins += 1;
        }
        detail.push_str(&format!(
            "seed {}: perceptor {} vs baseline {:?}; ",
            p.seed, pc, baseline.crossed_at
        ));
    }
    (wins, detail)
}

#[test]
fn criterion_6_end_to_end_learning() {
    let majority_needed = SEEDS.len() / 2 + 1;

    let (a_pass, a_crossings) = majority(&CARTPOLE_RUNS, CARTPOLE_BUDGET);
    let a_ok = a_pass >= majority_needed;
    verdict(
        "6a (cart-pole perceptor ≥ 180)",
        a_ok,
        &format!("crossings {a_crossings:?} within {CARTPOLE_BUDGET}"),
    );

    let (b_pass, b_crossings) = majority(&GOTO_RUNS, GOTO_BUDGET);
    let b_ok = b_pass >= majority_needed;
    verdict(
        "6b (go-to-pose autoencoding ≥ 10)",
        b_ok,
        &format!("crossings {b_crossings:?} within {GOTO_BUDGET}"),
    );

    let threshold = COLLECT_FRACTION * *COLLECT_GT_RETURN;
    let (c_pass, c_crossings) = majority(&COLLECT_RUNS, COLLECT_BUDGET);
    let c_ok = c_pass >= majority_needed;
    verdict(
        "6c (collect-wood stacked ≥ 0.9 × ground truth)",
        c_ok,
        &format!(
            "ground-truth return {:.3}, threshold {threshold:.3}, crossings {c_crossings:?} within {COLLECT_BUDGET}",
            *COLLECT_GT_RETURN
        ),
    );

    let (d_cart, d_cart_detail) = baseline_beats(
        &CARTPOLE_RUNS,
        RunKind::CartpolePolicy,
        CARTPOLE_THRESHOLD,
        CARTPOLE_BUDGET,
    );
    let (d_goto, d_goto_detail) =
        baseline_beats(&GOTO_RUNS, RunKind::GotoPolicy, GOTO_THRESHOLD, GOTO_BUDGET);
    let (d_collect, d_collect_detail) = baseline_beats(
        &COLLECT_RUNS,
        RunKind::CollectPolicy,
        threshold,
        COLLECT_BUDGET,
    );
    let d_ok = d_cart >= majority_needed
        && d_goto >= majority_needed
        && d_collect >= majority_needed;
    verdict(
        "6d (perceptor crosses before policy baseline)",
        d_ok,
        &format!(
            "cartpole [{d_cart_detail}] goto [{d_goto_detail}] collect [{d_collect_detail}]"
        ),
    );

    assert!(a_ok, "criterion 6a failed");
    assert!(b_ok, "criterion 6b failed");
    assert!(c_ok, "criterion 6c failed");
    assert!(d_ok, "criterion 6d failed");
}

// ---- criterion 7: representation quality -----------------------------------------

#[test]
fn criterion_7_representation_quality() {
    let donor = GOTO_RUNS
        .iter()
        .find(|r| r.crossed_at.is_some())
        .expect("criterion 7 needs a passing go-to-pose run");
    let model = Model::goto_pose(HALF_IMAGES, true);
    let mut params = model.init_params(0).unwrap();
    pgrad_core::params::load_checkpoint_into(&mut params, &donor.ckpt).unwrap();

    let matrices = eval::confusion(
        &model,
        &params,
        &GotoPoseProgram,
        || GotoPose::standard(HALF_IMAGES),
        1000,
        707,
        1.0,
    )
    .unwrap();
    let acc: Vec<f64> = matrices.iter().map(|m| m.accuracy()).collect();
    let conf_ok = acc[0] >= 0.9 && acc[1] >= 0.9 && acc[2] >= 0.6;

    let cycle = eval::cycle_consistency(&model, &params).unwrap();
    let cycle_ok = cycle.joint >= 0.9;

    let pass = conf_ok && cycle_ok;
    assert!(
        verdict(
            "7 (representation quality)",
            pass,
            &format!(
                "confusion accuracies x={:.3} y={:.3} α={:.3} (seed {}), cycle joint {:.3} over {} specs",
                acc[0], acc[1], acc[2], donor.seed, cycle.joint, cycle.total
            )
        ),
        "representation quality below thresholds"
    );
}

// ---- criterion 8: A4 invariance ---------------------------------------------------

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng) -> Mat {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for _ in 0..4 {
            let mut v: Vec<f64> = (0..4)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= dot * ci;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                cols.clear();
                break;
            }
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            cols.push(v);
        }
        if cols.len() == 4 {
            let mut m = Mat::zeros(4, 4);
            for (j, c) in cols.iter().enumerate() {
                for i in 0..4 {
                    m[(i, j)] = c[i];
                }
            }
            return m;
        }
    }
}

#[test]
fn criterion_8_a4_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut rotation_ok = 0usize;
    for _ in 0..1000 {
        let m = random_orthogonal(&mut rng);
        let sigma: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let c = rng.gen_range(0.1..10.0);
        if lqr_invariance_check(&sigma, 1e3, &m, c).unwrap() {
            rotation_ok += 1;
        }
    }
    let mut scale_ok = 0usize;
    for _ in 0..1000 {
        let sigma: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let c: f64 = rng.gen_range(1e-3..1e3);
        let a = lqr_act(&sigma, &PAPER_GAIN).unwrap();
        let scaled: Vec<f64> = sigma.iter().map(|v| v * c).collect();
        if lqr_act(&scaled, &PAPER_GAIN).unwrap() == a {
            scale_ok += 1;
        }
    }
    let pass = rotation_ok == 1000 && scale_ok == 1000;
    assert!(
        verdict(
            "8 (A4 invariance)",
            pass,
            &format!("rotation invariance {rotation_ok}/1000, control-law scale invariance {scale_ok}/1000")
        ),
        "A4 invariance failed"
    );
}

// ---- criterion 9: feedforward ablation ---------------------------------------------

#[test]
fn criterion_9_feedforward_ablation() {
    // runs must complete and emit learning-curve CSVs; the variance
    // comparison against the autoencoding runs is reported, not gated
    let goto_ff = run_training(
        RunKind::GotoFf,
        SEEDS[0],
        Some(GOTO_THRESHOLD),
        StopRule {
            cap: ABLATION_BUDGET,
            stop_after_cross: None,
        },
        None,
    );
    let collect_ff = run_training(
        RunKind::CollectFf,
        SEEDS[0],
        Some(COLLECT_FRACTION * *COLLECT_GT_RETURN),
        StopRule {
            cap: ABLATION_BUDGET,
            stop_after_cross: None,
        },
        Some(goto_ff.ckpt.clone()),
    );
    let goto_csv = accept_dir()
        .join(format!("goto-ff-s{}", SEEDS[0]))
        .join("metrics.csv");
    let collect_csv = accept_dir()
        .join(format!("collect-ff-s{}", SEEDS[0]))
        .join("metrics.csv");
    let emitted = goto_csv.exists() && collect_csv.exists();
    let complete =
        goto_ff.iterations_run == ABLATION_BUDGET && collect_ff.iterations_run == ABLATION_BUDGET;

    let ae_std = GOTO_RUNS[0].trailing_return_std;
    println!(
        "criterion 9 note: trailing return std — feedforward {:.3} vs autoencoding {:.3} (decoder is reported to damp reward variance)",
        goto_ff.trailing_return_std, ae_std
    );

    let pass = emitted && complete;
    assert!(
        verdict(
            "9 (feedforward ablation)",
            pass,
            &format!(
                "goto-ff ran {} iterations, collect-ff {} iterations, CSVs emitted: {emitted}",
                goto_ff.iterations_run, collect_ff.iterations_run
            )
        ),
        "ablation runs did not complete"
    );
}

// ---- auxiliary acceptance-grade checks ---------------------------------------------

#[test]
fn perceptor_program_pairings_validated() {
    // mismatched pairings must fail before the first step
    let model = Model::cartpole_ff(HALF_IMAGES);
    let params = model.init_params(0).unwrap();
    let mut env = CartPole::standard(HALF_IMAGES);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wrong: &dyn Program = &GotoPoseProgram;
    assert!(rollout(&model, &params, Some(wrong), &mut env, 1.0, &mut rng).is_err());
    assert_eq!(wrong.expects(), SymbolSpace::Categorical { vars: 3 });
}

#[test]
fn losses_are_finite_on_untrained_models() {
    for (kind, _) in [(RunKind::GotoAe, 0), (RunKind::CartpolePerceptor, 1)] {
        let model = kind.model();
        let params = model.init_params(9).unwrap();
        let program_lqr = LqrProgram { gain: PAPER_GAIN };
        let program_goto = GotoPoseProgram;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut trace, bound) = match kind {
            RunKind::GotoAe => {
                let mut env = GotoPose::standard(HALF_IMAGES);
                rollout(&model, &params, Some(&program_goto), &mut env, 1.0, &mut rng).unwrap()
            }
            _ => {
                let mut env = CartPole::standard(HALF_IMAGES);
                rollout(&model, &params, Some(&program_lqr), &mut env, 1.0, &mut rng).unwrap()
            }
        };
        let (losses, _) = episode_losses(&model, &bound, &mut trace, 0.99, None).unwrap();
        let total = total_loss(&mut trace.tape, &losses, &LossWeights::default(), 10).unwrap();
        assert!(trace.tape.value_scalar(total).is_finite());
    }
}

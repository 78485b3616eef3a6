//! Hot-path benchmarks: convolution forward/backward, a full perceptor
//! step, A* planning, and the Riccati solve.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use pgrad_core::env::{CartPole, Environment, GridPose};
use pgrad_core::linalg::Mat;
use pgrad_core::perceptor::Model;
use pgrad_core::programs::{astar_plan, solve_lqr_gain, build_cartpole_model, PAPER_GAIN};
use pgrad_core::tape::Tape;

fn conv_forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    use rand::Rng;
    let x: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..32 * 3 * 16).map(|_| rng.gen_range(-0.2..0.2)).collect();
    c.bench_function("conv2d_32x32_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xt = pgrad_core::Tensor::new(vec![1, 3, 32, 32], x.clone())
                .unwrap()
                .with_grad();
            let xv = tape.leaf(&xt);
            let kt = pgrad_core::Tensor::new(vec![32, 3, 4, 4], k.clone())
                .unwrap()
                .with_grad();
            let kv = tape.leaf(&kt);
            let y = tape.conv2d(xv, kv, 2).unwrap();
            let loss = tape.sum(y);
            let grads = tape.backward(loss).unwrap();
            black_box(grads.wrt(&tape, kv));
        })
    });
}

fn perceptor_step(c: &mut Criterion) {
    let model = Model::cartpole_ff(true);
    let params = model.init_params(3).unwrap();
    let mut env = CartPole::standard(true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs = env.reset(&mut rng);
    c.bench_function("cartpole_forward_step", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &params).unwrap();
            black_box(bound.forward(&mut tape, &obs).unwrap());
        })
    });
}

fn astar(c: &mut Criterion) {
    c.bench_function("astar_far_corner", |b| {
        b.iter(|| {
            let plan = astar_plan(
                black_box(&GridPose::new(1, 1, 1)),
                black_box(&GridPose::new(5, 5, 3)),
                Some((3, 3)),
            )
            .unwrap();
            black_box(plan.cost);
        })
    });
}

fn riccati(c: &mut Criterion) {
    let model = build_cartpole_model(0.1, 1.1, 0.5, 9.8).unwrap();
    let q = Mat::identity(4).scale(1e3);
    c.bench_function("kleinman_riccati_solve", |b| {
        b.iter(|| {
            let design = solve_lqr_gain(&model, &q, 1.0, &PAPER_GAIN).unwrap();
            black_box(design.k);
        })
    });
}

criterion_group!(benches, conv_forward_backward, perceptor_step, astar, riccati);
criterion_main!(benches);

//! Central finite-difference checks for every differentiable tape operation,
//! h = 1e-5, 64-bit, max relative error below 1e-5 on randomized shapes.

mod common;

use common::{check_gradients, TestRng};
use pgrad_core::dist::{CategoricalHead, DiagGaussian};
use pgrad_core::tape::{Tape, ValueId};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn weighted_sum(tape: &mut Tape, x: ValueId, rng: &mut TestRng) -> ValueId {
    // a fixed random projection makes the scalar loss sensitive everywhere
    let n = tape.values(x).len();
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(shape, rng.fill(n));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

#[test]
fn linear_gradients() {
    let mut rng = TestRng::new(11);
    let err = check_gradients(
        &[
            (vec![3, 4], rng.fill(12)),
            (vec![5, 4], rng.fill(20)),
            (vec![5], rng.fill(5)),
        ],
        H,
        |tape, ids| {
            let y = tape.linear(ids[0], ids[1], ids[2]).unwrap();
            let mut r = TestRng::new(7);
            weighted_sum(tape, y, &mut r)
        },
    );
    assert!(err < TOL, "linear: {err}");
}

#[test]
fn conv2d_gradients() {
    let mut rng = TestRng::new(12);
    for stride in [1, 2] {
        let err = check_gradients(
            &[
                (vec![2, 3, 7, 8], rng.fill(2 * 3 * 7 * 8)),
                (vec![4, 3, 3, 3], rng.fill(4 * 3 * 9)),
            ],
            H,
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], stride).unwrap();
                let mut r = TestRng::new(5);
                weighted_sum(tape, y, &mut r)
            },
        );
        assert!(err < TOL, "conv2d stride {stride}: {err}");
    }
}

#[test]
fn conv_transpose2d_gradients() {
    let mut rng = TestRng::new(13);
    for stride in [1, 2] {
        let err = check_gradients(
            &[
                (vec![2, 4, 3, 3], rng.fill(2 * 4 * 9)),
                (vec![4, 2, 3, 2], rng.fill(4 * 2 * 6)),
            ],
            H,
            move |tape, ids| {
                let y = tape.conv_transpose2d(ids[0], ids[1], stride).unwrap();
                let mut r = TestRng::new(6);
                weighted_sum(tape, y, &mut r)
            },
        );
        assert!(err < TOL, "conv_transpose2d stride {stride}: {err}");
    }
}

#[test]
fn conv_transpose_is_exact_adjoint_of_conv() {
    // ⟨conv(x,k), y⟩ == ⟨x, convT(y,k)⟩ to 1e-10 for minimal shapes
    let mut rng = TestRng::new(14);
    for (h, w, kh, kw, stride) in [(7, 9, 3, 3, 2), (6, 6, 2, 2, 2), (5, 8, 3, 2, 1)] {
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        // minimal input extent so the adjoint reproduces the shape exactly
        assert_eq!(h, (oh - 1) * stride + kh);
        assert_eq!(w, (ow - 1) * stride + kw);
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2, h, w], rng.fill(2 * h * w));
        let k = tape.constant(vec![3, 2, kh, kw], rng.fill(3 * 2 * kh * kw));
        let y = tape.constant(vec![1, 3, oh, ow], rng.fill(3 * oh * ow));
        let cx = tape.conv2d(x, k, stride).unwrap();
        let cty = tape.conv_transpose2d(y, k, stride).unwrap();
        let lhs: f64 = tape
            .values(cx)
            .iter()
            .zip(tape.values(y))
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = tape
            .values(x)
            .iter()
            .zip(tape.values(cty))
            .map(|(a, b)| a * b)
            .sum();
        assert!(
            (lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0),
            "adjoint identity broken: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn activation_gradients() {
    let mut rng = TestRng::new(15);
    let acts: Vec<(&str, fn(&mut Tape, ValueId) -> ValueId)> = vec![
        ("relu", |t, x| t.relu(x).unwrap()),
        ("sigmoid", |t, x| t.sigmoid(x).unwrap()),
        ("softplus", |t, x| t.softplus(x).unwrap()),
        ("exp", |t, x| t.exp(x).unwrap()),
        ("softmax", |t, x| t.softmax_last(x).unwrap()),
        ("log_softmax", |t, x| t.log_softmax_last(x).unwrap()),
    ];
    for (name, act) in acts {
        let err = check_gradients(&[(vec![3, 5], rng.fill(15))], H, |tape, ids| {
            let y = act(tape, ids[0]);
            let mut r = TestRng::new(9);
            weighted_sum(tape, y, &mut r)
        });
        assert!(err < TOL, "{name}: {err}");
    }
    // log needs positive input
    let err = check_gradients(&[(vec![7], rng.fill_positive(7))], H, |tape, ids| {
        let y = tape.log(ids[0]).unwrap();
        let mut r = TestRng::new(9);
        weighted_sum(tape, y, &mut r)
    });
    assert!(err < TOL, "log: {err}");
}

#[test]
fn elementwise_and_shape_op_gradients() {
    let mut rng = TestRng::new(16);
    let err = check_gradients(
        &[(vec![6], rng.fill(6)), (vec![6], rng.fill(6))],
        H,
        |tape, ids| {
            let a = tape.add(ids[0], ids[1]).unwrap();
            let s = tape.sub(a, ids[1]).unwrap();
            let m = tape.mul(s, ids[0]).unwrap();
            let sc = tape.scale(m, 1.7);
            let sh = tape.add_scalar(sc, 0.3);
            let r = tape.reshape(sh, vec![2, 3]).unwrap();
            let cl = tape.clamp(r, -50.0, 50.0);
            tape.sum(cl)
        },
    );
    assert!(err < TOL, "elementwise chain: {err}");

    let err = check_gradients(
        &[(vec![3], rng.fill(3)), (vec![4], rng.fill(4))],
        H,
        |tape, ids| {
            let c = tape.concat(&[ids[0], ids[1]]).unwrap();
            let picked = tape.select(c, 5).unwrap();
            let s = tape.sum(c);
            let both = tape.add(picked, s).unwrap();
            tape.sum(both)
        },
    );
    assert!(err < TOL, "concat/select: {err}");
}

#[test]
fn composite_conv_relu_linear_matches_finite_differences() {
    let mut rng = TestRng::new(17);
    let flat = 4 * 2 * 3;
    let err = check_gradients(
        &[
            (vec![1, 2, 6, 7], rng.fill(2 * 6 * 7)),
            (vec![4, 2, 3, 3], rng.fill(4 * 2 * 9)),
            (vec![3, flat], rng.fill(3 * flat)),
            (vec![3], rng.fill(3)),
        ],
        H,
        |tape, ids| {
            let c = tape.conv2d(ids[0], ids[1], 2).unwrap();
            let a = tape.relu(c).unwrap();
            let f = tape.reshape(a, vec![1, flat]).unwrap();
            let y = tape.linear(f, ids[2], ids[3]).unwrap();
            let sm = tape.softmax_last(y).unwrap();
            let mut r = TestRng::new(3);
            weighted_sum(tape, sm, &mut r)
        },
    );
    assert!(err < TOL, "composite net: {err}");
}

#[test]
fn gaussian_reparameterisation_gradients_with_fixed_noise() {
    let mut rng = TestRng::new(18);
    let eps = [0.37, -1.2, 0.05, 0.9];
    let err = check_gradients(
        &[(vec![4], rng.fill(4)), (vec![4], rng.fill(4))],
        H,
        move |tape, ids| {
            let g = DiagGaussian {
                mean: ids[0],
                log_var: ids[1],
            };
            let s = g.sample_with_noise(tape, &eps).unwrap();
            let mut r = TestRng::new(2);
            weighted_sum(tape, s, &mut r)
        },
    );
    assert!(err < 1e-6, "gaussian reparameterisation: {err}");
}

#[test]
fn gaussian_log_prob_gradients() {
    let mut rng = TestRng::new(19);
    let x = [0.4, -0.2, 0.9, 0.1];
    let err = check_gradients(
        &[(vec![4], rng.fill(4)), (vec![4], rng.fill(4))],
        H,
        move |tape, ids| {
            let g = DiagGaussian {
                mean: ids[0],
                log_var: ids[1],
            };
            let datum = tape.constant(vec![4], x.to_vec());
            g.log_prob(tape, datum).unwrap()
        },
    );
    assert!(err < TOL, "gaussian log_prob: {err}");
}

#[test]
fn gumbel_relaxed_sample_gradients_with_fixed_noise() {
    let mut rng = TestRng::new(20);
    let noise = [0.11, -0.7, 1.3, 0.02, -0.4];
    let err = check_gradients(&[(vec![5], rng.fill(5))], H, move |tape, ids| {
        let head = CategoricalHead { logits: ids[0] };
        let draw = head
            .gumbel_softmax_with_noise(tape, 0.8, &noise)
            .unwrap();
        let mut r = TestRng::new(4);
        weighted_sum(tape, draw.relaxed, &mut r)
    });
    assert!(err < 1e-6, "gumbel relaxed: {err}");
}

#[test]
fn categorical_log_prob_gradients() {
    let mut rng = TestRng::new(21);
    let err = check_gradients(&[(vec![5], rng.fill(5))], H, |tape, ids| {
        let head = CategoricalHead { logits: ids[0] };
        head.log_prob(tape, 2).unwrap()
    });
    assert!(err < TOL, "categorical log_prob: {err}");
}

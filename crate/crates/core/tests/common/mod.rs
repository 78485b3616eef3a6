//! Shared test oracles: central finite differences against the tape.
#![allow(dead_code)] // each test target uses its own slice of this module

use pgrad_core::tape::{Tape, ValueId};
use pgrad_core::tensor::Tensor;

/// Deterministic xorshift values in [-1, 1], kept away from zero so ReLU
/// kinks and log singularities stay clear of the probe points.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.max(1))
    }

    pub fn next_f64(&mut self) -> f64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        (x >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    /// magnitude in [0.1, 1.1], random sign
    pub fn away_from_zero(&mut self) -> f64 {
        let v = self.next_f64();
        (v.abs() + 0.1) * v.signum_or_one()
    }

    pub fn fill(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.away_from_zero()).collect()
    }

    pub fn fill_positive(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64().abs() + 0.1).collect()
    }
}

trait SignumOrOne {
    fn signum_or_one(self) -> f64;
}

impl SignumOrOne for f64 {
    fn signum_or_one(self) -> f64 {
        if self >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Compare the tape's analytic gradients against central finite differences
/// (step `h`) for every element of every input. Returns the max relative
/// error with a small floor on the denominator.
pub fn check_gradients<F>(inputs: &[(Vec<usize>, Vec<f64>)], h: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[ValueId]) -> ValueId,
{
    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|(shape, values)| {
            let t = Tensor::new(shape.clone(), values.clone())
                .unwrap()
                .with_grad();
            tape.leaf(&t)
        })
        .collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.values(loss).len(), 1, "loss must be scalar");
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|id| grads.wrt(&tape, *id)).collect();

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs
            .iter()
            .zip(vals)
            .map(|((shape, _), v)| {
                let t = Tensor::new(shape.clone(), v.clone()).unwrap();
                tape.leaf(&t)
            })
            .collect();
        let loss = build(&mut tape, &ids);
        tape.value_scalar(loss)
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut max_rel: f64 = 0.0;
    for i in 0..base.len() {
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][j] += h;
            let mut minus = base.clone();
            minus[i][j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

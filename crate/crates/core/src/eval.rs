//! Analysis instruments: linear latent alignment, confusion matrices,
//! observation generation from symbolic specs, and cycle consistency.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Environment, Observation};
use crate::error::{Error, Result};
use crate::linalg::{lstsq_ridge, Mat};
use crate::params::ParameterSet;
use crate::perceptor::{HeadsOut, Model};
use crate::programs::Program;
use crate::tape::{argmax, Tape};
use crate::training::{episode_seed, rollout};

// ---- latent alignment ---------------------------------------------------------

/// An affine map fitted from latent means to ground-truth symbols, with the
/// diagnostics that say how close the linear part is to a scaled rotation.
#[derive(Debug, Clone)]
pub struct LinearAlignment {
    /// rows index truth dimensions, columns latent dimensions
    pub map: Mat,
    pub offset: Vec<f64>,
    pub residual_rms: Vec<f64>,
    /// max |MᵀM − cI| with c = tr(MᵀM)/d
    pub orthogonality_deviation: f64,
    pub degenerate: bool,
}

/// Least-squares affine fit truth ≈ M·latent + offset on one labelled
/// episode. A rank-deficient design (a constant latent dimension) falls back
/// to a tiny ridge and raises the degeneracy flag.
pub fn fit_alignment(latents: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<LinearAlignment> {
    if latents.len() != truths.len() || latents.len() < 8 {
        return Err(Error::contract(format!(
            "alignment fit needs at least 8 paired steps, got {}",
            latents.len().min(truths.len())
        )));
    }
    let d_lat = latents[0].len();
    let d_truth = truths[0].len();
    let n = latents.len();
    if latents.iter().any(|l| l.len() != d_lat)
        || truths.iter().any(|t| t.len() != d_truth)
        || latents
            .iter()
            .flatten()
            .chain(truths.iter().flatten())
            .any(|v| !v.is_finite())
    {
        return Err(Error::contract("alignment fit: ragged or non-finite data"));
    }

    // shared design matrix [latent | 1]
    let mut design = Mat::zeros(n, d_lat + 1);
    for (r, l) in latents.iter().enumerate() {
        for (c, v) in l.iter().enumerate() {
            design[(r, c)] = *v;
        }
        design[(r, d_lat)] = 1.0;
    }

    let mut map = Mat::zeros(d_truth, d_lat);
    let mut offset = vec![0.0; d_truth];
    let mut residual_rms = vec![0.0; d_truth];
    let mut degenerate = false;
    for dim in 0..d_truth {
        let target: Vec<f64> = truths.iter().map(|t| t[dim]).collect();
        let (beta, was_degenerate) = lstsq_ridge(&design, &target, 1e-8)?;
        degenerate |= was_degenerate;
        for c in 0..d_lat {
            map[(dim, c)] = beta[c];
        }
        offset[dim] = beta[d_lat];
        let mse: f64 = latents
            .iter()
            .zip(&target)
            .map(|(l, y)| {
                let pred: f64 =
                    l.iter().enumerate().map(|(c, v)| beta[c] * v).sum::<f64>() + beta[d_lat];
                (pred - y) * (pred - y)
            })
            .sum::<f64>()
            / n as f64;
        residual_rms[dim] = mse.sqrt();
    }

    let mtm = map.transpose().matmul(&map);
    let c = (0..mtm.rows).map(|i| mtm[(i, i)]).sum::<f64>() / mtm.rows as f64;
    let mut deviation = 0.0_f64;
    for i in 0..mtm.rows {
        for j in 0..mtm.cols {
            let target = if i == j { c } else { 0.0 };
            deviation = deviation.max((mtm[(i, j)] - target).abs());
        }
    }

    Ok(LinearAlignment {
        map,
        offset,
        residual_rms,
        orthogonality_deviation: deviation,
        degenerate,
    })
}

impl LinearAlignment {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,kind,values\n");
        for i in 0..self.map.rows {
            let vals: Vec<String> = (0..self.map.cols)
                .map(|j| format!("{:.8}", self.map[(i, j)]))
                .collect();
            out.push_str(&format!("{},map,{}\n", i, vals.join(" ")));
        }
        let off: Vec<String> = self.offset.iter().map(|v| format!("{v:.8}")).collect();
        out.push_str(&format!(",offset,{}\n", off.join(" ")));
        let res: Vec<String> = self.residual_rms.iter().map(|v| format!("{v:.8}")).collect();
        out.push_str(&format!(",residual_rms,{}\n", res.join(" ")));
        out.push_str(&format!(
            ",orthogonality_deviation,{:.8}\n,degenerate,{}\n",
            self.orthogonality_deviation, self.degenerate
        ));
        out
    }
}

// ---- confusion matrices ---------------------------------------------------------

/// Counts of (predicted, true) pairs for one categorical variable. Both
/// indices are 0-based here; symbol values are 1-based outside.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub k: usize,
    /// counts[pred * k + truth]
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn record(&mut self, predicted: usize, truth: usize) {
        self.counts[predicted * self.k + truth] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..self.k).map(|i| self.counts[i * self.k + i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for pred in 0..self.k {
            let row: Vec<String> = (0..self.k)
                .map(|t| self.counts[pred * self.k + t].to_string())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Roll out `episodes` evaluation episodes with the trained perceptor and
/// count argmax predictions against the privileged ground truth, per
/// categorical variable.
pub fn confusion<E, F>(
    model: &Model,
    params: &ParameterSet,
    program: &dyn Program,
    make_env: F,
    episodes: usize,
    seed: u64,
    temperature: f64,
) -> Result<Vec<ConfusionMatrix>>
where
    E: Environment,
    F: Fn() -> E,
{
    let cards = model.cards();
    if cards.is_empty() {
        return Err(Error::Config(
            "confusion needs a categorical perceptor".into(),
        ));
    }
    let mut matrices: Vec<ConfusionMatrix> =
        cards.iter().map(|k| ConfusionMatrix::new(*k)).collect();
    for ep in 0..episodes {
        let mut env = make_env();
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, 0, ep));
        let (trace, _) = rollout(model, params, Some(program), &mut env, temperature, &mut rng)?;
        for step in &trace.steps {
            let preds = match &step.heads {
                HeadsOut::Categorical(heads) => heads
                    .iter()
                    .map(|h| argmax(trace.tape.values(h.logits)))
                    .collect::<Vec<_>>(),
                _ => return Err(Error::Config("confusion: non-categorical heads".into())),
            };
            let truth = step.ground_truth.as_categorical()?;
            for (var, (p, t)) in preds.iter().zip(truth).enumerate() {
                matrices[var].record(*p, t - 1);
            }
        }
    }
    Ok(matrices)
}

// ---- generation and cycle consistency -------------------------------------------

fn one_hot(k: usize, value_1based: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[value_1based - 1] = 1.0;
    v
}

/// Decode a symbolic spec (1-based values, one per variable) into an image.
pub fn generate(model: &Model, params: &ParameterSet, specs: &[Vec<usize>]) -> Result<Vec<Observation>> {
    let cards = model.cards();
    if model.decoder.is_none() {
        return Err(Error::Config("generate needs an autoencoding model".into()));
    }
    let (c, h, w) = model.observation_shape();
    let mut out = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        if spec.len() != cards.len() {
            return Err(Error::contract(format!(
                "spec {i}: expected {} symbols, got {}",
                cards.len(),
                spec.len()
            )));
        }
        for (v, k) in spec.iter().zip(&cards) {
            if *v < 1 || *v > *k {
                return Err(Error::contract(format!(
                    "spec {i}: symbol value {v} outside 1..={k}"
                )));
            }
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, params)?;
        let parts: Vec<_> = spec
            .iter()
            .zip(&cards)
            .map(|(v, k)| tape.constant(vec![*k], one_hot(*k, *v)))
            .collect();
        let img = bound.decode(&mut tape, &parts)?;
        let data = tape.values(img).to_vec();
        debug_assert_eq!(data.len(), c * h * w);
        out.push(if c == 3 {
            Observation::Color { h, w, data }
        } else {
            Observation::Gray {
                frames: c,
                h,
                w,
                data,
            }
        });
    }
    Ok(out)
}

/// All symbol tuples of the model's categorical space, 1-based.
pub fn all_specs(cards: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new()];
    for &k in cards {
        let mut next = Vec::with_capacity(out.len() * k);
        for prefix in &out {
            for v in 1..=k {
                let mut s = prefix.clone();
                s.push(v);
                next.push(s);
            }
        }
        out = next;
    }
    out
}

#[derive(Debug, Clone)]
pub struct CycleReport {
    pub per_variable: Vec<f64>,
    pub joint: f64,
    pub total: usize,
}

/// Generic cycle consistency: fraction of specs with
/// encode(decode(spec)) == spec, per variable and jointly.
pub fn cycle_consistency_with<D, Enc>(cards: &[usize], decode: D, encode: Enc) -> CycleReport
where
    D: Fn(&[usize]) -> Observation,
    Enc: Fn(&Observation) -> Vec<usize>,
{
    let specs = all_specs(cards);
    let mut var_hits = vec![0usize; cards.len()];
    let mut joint_hits = 0usize;
    for spec in &specs {
        let img = decode(spec);
        let back = encode(&img);
        let mut all = true;
        for (i, (a, b)) in spec.iter().zip(&back).enumerate() {
            if a == b {
                var_hits[i] += 1;
            } else {
                all = false;
            }
        }
        if all {
            joint_hits += 1;
        }
    }
    let total = specs.len();
    CycleReport {
        per_variable: var_hits
            .iter()
            .map(|h| *h as f64 / total as f64)
            .collect(),
        joint: joint_hits as f64 / total as f64,
        total,
    }
}

/// Cycle consistency of a trained autoencoding model: decode each spec with
/// the decoder, re-encode with the perceptor, compare argmax symbols.
pub fn cycle_consistency(model: &Model, params: &ParameterSet) -> Result<CycleReport> {
    let cards = model.cards();
    if cards.is_empty() || model.decoder.is_none() {
        return Err(Error::Config(
            "cycle consistency needs an autoencoding categorical model".into(),
        ));
    }
    let specs = all_specs(&cards);
    let images = generate(model, params, &specs)?;
    let mut var_hits = vec![0usize; cards.len()];
    let mut joint_hits = 0usize;
    for (spec, img) in specs.iter().zip(&images) {
        let back = encode_argmax(model, params, img)?;
        let mut all = true;
        for (i, (a, b)) in spec.iter().zip(&back).enumerate() {
            if a == b {
                var_hits[i] += 1;
            } else {
                all = false;
            }
        }
        if all {
            joint_hits += 1;
        }
    }
    let total = specs.len();
    Ok(CycleReport {
        per_variable: var_hits
            .iter()
            .map(|h| *h as f64 / total as f64)
            .collect(),
        joint: joint_hits as f64 / total as f64,
        total,
    })
}

/// Argmax symbols (1-based) the perceptor assigns to an observation.
pub fn encode_argmax(model: &Model, params: &ParameterSet, obs: &Observation) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params)?;
    let fwd = bound.forward(&mut tape, obs)?;
    match fwd.heads {
        HeadsOut::Categorical(heads) => Ok(heads
            .iter()
            .map(|h| argmax(tape.values(h.logits)) + 1)
            .collect()),
        _ => Err(Error::Config("encode_argmax: non-categorical heads".into())),
    }
}

/// Gaussian mean the perceptor assigns to an observation (cart-pole).
pub fn encode_mean(model: &Model, params: &ParameterSet, obs: &Observation) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params)?;
    let fwd = bound.forward(&mut tape, obs)?;
    match fwd.heads {
        HeadsOut::Gaussian(g) => Ok(tape.values(g.mean).to_vec()),
        _ => Err(Error::Config("encode_mean: non-gaussian heads".into())),
    }
}

/// Peak signal-to-noise ratio between two images in [0,1], in dB.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

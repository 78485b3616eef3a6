//! The neural halves of the decomposed policy: perceptor trunks and heads,
//! the reconstruction decoder, the value baseline, and the pure-policy
//! heads used by the comparison baselines.

pub mod arch;

pub use arch::{cartpole_trunk, grid_trunk, ConvSpec, DecoderArch, TrunkArch};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{CategoricalHead, DiagGaussian};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tape::{Tape, ValueId};

/// What a trunk's hidden layer feeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadKind {
    /// mean and log-variance over a continuous symbol vector
    Gaussian { dim: usize },
    /// one logits head per categorical variable
    Categorical { cards: Vec<usize> },
    /// sigmoid probability over two actions (policy-gradient baseline)
    PolicyBernoulli,
    /// softmax logits over the task's actions (policy-gradient baseline)
    PolicySoftmax { actions: usize },
}

/// Initial log-variance bias: symbol noise starts at σ ≈ 0.37 so the
/// program sees the mean through the noise from the first iterations.
pub const LOG_VAR_BIAS_INIT: f64 = -2.0;

impl HeadKind {
    fn head_layers(&self) -> Vec<(String, usize, f64)> {
        match self {
            HeadKind::Gaussian { dim } => {
                vec![
                    ("mean".into(), *dim, 0.0),
                    ("logvar".into(), *dim, LOG_VAR_BIAS_INIT),
                ]
            }
            HeadKind::Categorical { cards } => cards
                .iter()
                .enumerate()
                .map(|(i, k)| (format!("cat{}", i + 1), *k, 0.0))
                .collect(),
            HeadKind::PolicyBernoulli => vec![("policy".into(), 1, 0.0)],
            HeadKind::PolicySoftmax { actions } => vec![("policy".into(), *actions, 0.0)],
        }
    }
}

/// One trunk + head group under a parameter prefix.
#[derive(Debug, Clone)]
pub struct EncoderSpec {
    pub prefix: String,
    pub trunk: TrunkArch,
    pub head: HeadKind,
}

/// A trainable model: one or two encoders, an optional decoder, and the
/// value baseline (sharing a trunk's convolutions by default).
#[derive(Debug, Clone)]
pub struct Model {
    pub encoders: Vec<EncoderSpec>,
    pub decoder: Option<DecoderArch>,
    /// encoder index whose convolution trunk the baseline reads
    pub baseline_trunk: usize,
    /// when false the baseline gets its own convolution stack
    pub baseline_shares_trunk: bool,
}

impl Model {
    /// Cart-pole feedforward perceptor: Gaussian heads over 4 symbols.
    pub fn cartpole_ff(half_images: bool) -> Model {
        Model {
            encoders: vec![EncoderSpec {
                prefix: "enc".into(),
                trunk: cartpole_trunk(half_images),
                head: HeadKind::Gaussian { dim: 4 },
            }],
            decoder: None,
            baseline_trunk: 0,
            baseline_shares_trunk: true,
        }
    }

    /// Cart-pole policy-gradient baseline: sigmoid action head.
    pub fn cartpole_policy(half_images: bool) -> Model {
        Model {
            encoders: vec![EncoderSpec {
                prefix: "enc".into(),
                trunk: cartpole_trunk(half_images),
                head: HeadKind::PolicyBernoulli,
            }],
            decoder: None,
            baseline_trunk: 0,
            baseline_shares_trunk: true,
        }
    }

    /// Go-to-pose perceptor over (x, y, α), optionally autoencoding.
    pub fn goto_pose(half_images: bool, autoencoding: bool) -> Model {
        let trunk = grid_trunk(half_images);
        let cards = vec![5, 5, 4];
        Model {
            decoder: autoencoding.then(|| DecoderArch {
                latent_dim: cards.iter().sum(),
                trunk: trunk.clone(),
            }),
            encoders: vec![EncoderSpec {
                prefix: "enc".into(),
                trunk,
                head: HeadKind::Categorical { cards },
            }],
            baseline_trunk: 0,
            baseline_shares_trunk: true,
        }
    }

    /// Grid policy-gradient baseline over `actions` outputs.
    pub fn grid_policy(half_images: bool, actions: usize) -> Model {
        Model {
            encoders: vec![EncoderSpec {
                prefix: "enc".into(),
                trunk: grid_trunk(half_images),
                head: HeadKind::PolicySoftmax { actions },
            }],
            decoder: None,
            baseline_trunk: 0,
            baseline_shares_trunk: true,
        }
    }

    /// Collect-wood stacked perceptors: the transferred pose encoder plus a
    /// fresh wood encoder; the baseline rides the wood trunk so transfer
    /// damping does not slow the value fit.
    pub fn collect_wood_stacked(half_images: bool, autoencoding: bool) -> Model {
        let trunk = grid_trunk(half_images);
        Model {
            decoder: autoencoding.then(|| DecoderArch {
                latent_dim: 5 + 5 + 4 + 5 + 5,
                trunk: trunk.clone(),
            }),
            encoders: vec![
                EncoderSpec {
                    prefix: "pose".into(),
                    trunk: trunk.clone(),
                    head: HeadKind::Categorical { cards: vec![5, 5, 4] },
                },
                EncoderSpec {
                    prefix: "wood".into(),
                    trunk,
                    head: HeadKind::Categorical { cards: vec![5, 5] },
                },
            ],
            baseline_trunk: 1,
            baseline_shares_trunk: true,
        }
    }

    /// Cardinalities of all categorical variables, across stacked encoders.
    pub fn cards(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for e in &self.encoders {
            if let HeadKind::Categorical { cards } = &e.head {
                out.extend_from_slice(cards);
            }
        }
        out
    }

    pub fn observation_shape(&self) -> (usize, usize, usize) {
        let t = &self.encoders[0].trunk;
        (t.in_ch, t.in_h, t.in_w)
    }

    /// Initialise all parameters from a seed, in build order.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for e in &self.encoders {
            e.trunk.validate()?;
            arch::init_trunk(&mut params, &e.prefix, &e.trunk, &mut rng)?;
            for (name, out, bias_init) in e.head.head_layers() {
                arch::init_head(&mut params, &e.prefix, &name, e.trunk.fc, out, bias_init, &mut rng)?;
            }
        }
        if let Some(dec) = &self.decoder {
            arch::init_decoder(&mut params, dec, &mut rng)?;
        }
        let btrunk = &self.encoders[self.baseline_trunk].trunk;
        if !self.baseline_shares_trunk {
            arch::init_trunk(&mut params, "baseline_trunk", btrunk, &mut rng)?;
        }
        arch::init_head(
            &mut params,
            "baseline",
            "fc",
            btrunk.flat_dim(),
            btrunk.fc,
            0.0,
            &mut rng,
        )?;
        arch::init_head(&mut params, "baseline", "out", btrunk.fc, 1, 0.0, &mut rng)?;
        Ok(params)
    }

    /// Lease every parameter onto a tape, once per episode.
    pub fn bind<'m>(&'m self, tape: &mut Tape, params: &ParameterSet) -> Result<BoundModel<'m>> {
        let mut encoders = Vec::new();
        for e in &self.encoders {
            encoders.push(BoundEncoder {
                trunk: bind_trunk(tape, params, &e.prefix, &e.trunk)?,
                heads: e
                    .head
                    .head_layers()
                    .iter()
                    .map(|(name, _, _)| bind_linear(tape, params, &e.prefix, name))
                    .collect::<Result<Vec<_>>>()?,
                kind: e.head.clone(),
            });
        }
        let decoder = match &self.decoder {
            Some(d) => Some(BoundDecoder {
                fc1: bind_linear(tape, params, "dec", "fc1")?,
                fc2: bind_linear(tape, params, "dec", "fc2")?,
                convts: (1..=d.trunk.convs.len())
                    .map(|i| tape.param(params, &format!("dec/convt{i}/k")))
                    .collect::<Result<Vec<_>>>()?,
                arch: d.clone(),
            }),
            None => None,
        };
        let baseline_own_trunk = if self.baseline_shares_trunk {
            None
        } else {
            Some(bind_trunk(
                tape,
                params,
                "baseline_trunk",
                &self.encoders[self.baseline_trunk].trunk,
            )?)
        };
        Ok(BoundModel {
            model: self,
            encoders,
            decoder,
            baseline_fc: bind_linear(tape, params, "baseline", "fc")?,
            baseline_out: bind_linear(tape, params, "baseline", "out")?,
            baseline_own_trunk,
        })
    }
}

struct BoundTrunk {
    convs: Vec<ValueId>,
    strides: Vec<usize>,
    fc: (ValueId, ValueId),
    flat_dim: usize,
}

struct BoundEncoder {
    trunk: BoundTrunk,
    heads: Vec<(ValueId, ValueId)>,
    kind: HeadKind,
}

struct BoundDecoder {
    fc1: (ValueId, ValueId),
    fc2: (ValueId, ValueId),
    convts: Vec<ValueId>,
    arch: DecoderArch,
}

/// Per-episode view of the model with every parameter leased onto one tape.
pub struct BoundModel<'m> {
    model: &'m Model,
    encoders: Vec<BoundEncoder>,
    decoder: Option<BoundDecoder>,
    baseline_fc: (ValueId, ValueId),
    baseline_out: (ValueId, ValueId),
    baseline_own_trunk: Option<BoundTrunk>,
}

fn bind_trunk(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    trunk: &TrunkArch,
) -> Result<BoundTrunk> {
    let mut convs = Vec::new();
    let mut strides = Vec::new();
    for (i, c) in trunk.convs.iter().enumerate() {
        convs.push(tape.param(params, &format!("{prefix}/conv{}/k", i + 1))?);
        strides.push(c.stride);
    }
    Ok(BoundTrunk {
        convs,
        strides,
        fc: bind_linear(tape, params, prefix, "fc")?,
        flat_dim: trunk.flat_dim(),
    })
}

fn bind_linear(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    name: &str,
) -> Result<(ValueId, ValueId)> {
    Ok((
        tape.param(params, &format!("{prefix}/{name}/w"))?,
        tape.param(params, &format!("{prefix}/{name}/b"))?,
    ))
}

/// Distribution heads produced by one forward pass.
pub enum HeadsOut {
    Gaussian(DiagGaussian),
    Categorical(Vec<CategoricalHead>),
    Bernoulli { p: ValueId },
    Softmax { logits: ValueId },
}

/// One observation pushed through the model.
pub struct StepForward {
    pub heads: HeadsOut,
    /// baseline value b(s), scalar node
    pub value: ValueId,
    /// the observation constant, kept for reconstruction targets
    pub input: ValueId,
}

impl<'m> BoundModel<'m> {
    pub fn decoder_latent_dim(&self) -> Option<usize> {
        self.decoder.as_ref().map(|d| d.arch.latent_dim)
    }

    fn trunk_flat(&self, tape: &mut Tape, trunk: &BoundTrunk, x: ValueId) -> Result<ValueId> {
        let mut cur = x;
        for (k, stride) in trunk.convs.iter().zip(&trunk.strides) {
            cur = tape.conv2d(cur, *k, *stride)?;
            cur = tape.relu(cur)?;
        }
        tape.reshape(cur, vec![1, trunk.flat_dim])
    }

    fn hidden(&self, tape: &mut Tape, trunk: &BoundTrunk, flat: ValueId) -> Result<ValueId> {
        let lin = tape.linear(flat, trunk.fc.0, trunk.fc.1)?;
        tape.relu(lin)
    }

    fn obs_to_input(&self, tape: &mut Tape, obs: &Observation) -> Result<ValueId> {
        let (c, h, w) = self.model.observation_shape();
        if obs.channels() != c || obs.height() != h || obs.width() != w {
            return Err(Error::dim(
                "forward",
                format!("[{c}, {h}, {w}] observation"),
                format!("[{}, {}, {}]", obs.channels(), obs.height(), obs.width()),
            ));
        }
        Ok(tape.constant(vec![1, c, h, w], obs.data().to_vec()))
    }

    /// Full forward: all encoder heads plus the baseline value.
    pub fn forward(&self, tape: &mut Tape, obs: &Observation) -> Result<StepForward> {
        let x = self.obs_to_input(tape, obs)?;
        let mut heads: Option<HeadsOut> = None;
        let mut cat_heads: Vec<CategoricalHead> = Vec::new();
        let mut baseline_flat: Option<ValueId> = None;

        for (i, enc) in self.encoders.iter().enumerate() {
            let flat = self.trunk_flat(tape, &enc.trunk, x)?;
            if self.model.baseline_shares_trunk && i == self.model.baseline_trunk {
                baseline_flat = Some(flat);
            }
            let hidden = self.hidden(tape, &enc.trunk, flat)?;
            match &enc.kind {
                HeadKind::Gaussian { dim } => {
                    let (mw, mb) = enc.heads[0];
                    let (vw, vb) = enc.heads[1];
                    let mean2 = tape.linear(hidden, mw, mb)?;
                    let mean = tape.reshape(mean2, vec![*dim])?;
                    let lv2 = tape.linear(hidden, vw, vb)?;
                    let lv_raw = tape.reshape(lv2, vec![*dim])?;
                    // bounded log-variance: the ceiling keeps exp() finite,
                    // the floor keeps enough symbol noise for the control
                    // law to stay explorable (means are free to outscale it)
                    let log_var = tape.clamp(lv_raw, -4.0, 2.0);
                    heads = Some(HeadsOut::Gaussian(DiagGaussian { mean, log_var }));
                }
                HeadKind::Categorical { cards } => {
                    for (j, k) in cards.iter().enumerate() {
                        let (w, b) = enc.heads[j];
                        let l2 = tape.linear(hidden, w, b)?;
                        let logits = tape.reshape(l2, vec![*k])?;
                        cat_heads.push(CategoricalHead { logits });
                    }
                }
                HeadKind::PolicyBernoulli => {
                    let (w, b) = enc.heads[0];
                    let out = tape.linear(hidden, w, b)?;
                    let sig = tape.sigmoid(out)?;
                    let p = tape.reshape(sig, vec![1])?;
                    heads = Some(HeadsOut::Bernoulli { p });
                }
                HeadKind::PolicySoftmax { actions } => {
                    let (w, b) = enc.heads[0];
                    let out = tape.linear(hidden, w, b)?;
                    let logits = tape.reshape(out, vec![*actions])?;
                    heads = Some(HeadsOut::Softmax { logits });
                }
            }
        }
        if !cat_heads.is_empty() {
            heads = Some(HeadsOut::Categorical(cat_heads));
        }

        let bflat = match (baseline_flat, &self.baseline_own_trunk) {
            (Some(f), _) => f,
            (None, Some(t)) => self.trunk_flat(tape, t, x)?,
            (None, None) => unreachable!("baseline trunk always resolves"),
        };
        let bl = tape.linear(bflat, self.baseline_fc.0, self.baseline_fc.1)?;
        let bh = tape.relu(bl)?;
        let bo = tape.linear(bh, self.baseline_out.0, self.baseline_out.1)?;
        let value = tape.reshape(bo, vec![1])?;

        Ok(StepForward {
            heads: heads.ok_or_else(|| Error::Config("model produced no heads".into()))?,
            value,
            input: x,
        })
    }

    /// Decode a concatenated latent code into a reconstruction mean image.
    pub fn decode(&self, tape: &mut Tape, latent_parts: &[ValueId]) -> Result<ValueId> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config("decode called on a feedforward model".into()))?;
        let latent = tape.concat(latent_parts)?;
        let got = tape.values(latent).len();
        if got != dec.arch.latent_dim {
            return Err(Error::dim(
                "decode",
                format!("latent of {}", dec.arch.latent_dim),
                format!("latent of {got}"),
            ));
        }
        let l2 = tape.reshape(latent, vec![1, dec.arch.latent_dim])?;
        let h1 = tape.linear(l2, dec.fc1.0, dec.fc1.1)?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.linear(h1, dec.fc2.0, dec.fc2.1)?;
        let h2 = tape.relu(h2)?;
        let dims = dec.arch.trunk.stage_dims();
        let (c, h, w) = *dims.last().unwrap();
        let mut cur = tape.reshape(h2, vec![1, c, h, w])?;
        let n_stages = dec.arch.trunk.convs.len();
        for (i, k) in dec.convts.iter().enumerate() {
            let stage = n_stages - 1 - i; // deepest first
            let stride = dec.arch.trunk.convs[stage].stride;
            cur = tape.conv_transpose2d(cur, *k, stride)?;
            if i + 1 < n_stages {
                cur = tape.relu(cur)?;
            }
        }
        tape.sigmoid(cur)
    }
}

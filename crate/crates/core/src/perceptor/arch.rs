//! Architecture tables. Three stride-2 valid convolutions reduce the input
//! to a small feature map, one hidden linear layer feeds the heads, and the
//! grid decoder mirrors its encoder with transposed convolutions whose
//! geometry inverts each stage exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

/// Convolutional trunk shared by perceptor heads and the baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrunkArch {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub convs: Vec<ConvSpec>,
    pub fc: usize,
}

impl TrunkArch {
    /// (channels, height, width) after each conv stage.
    pub fn stage_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = vec![(self.in_ch, self.in_h, self.in_w)];
        for c in &self.convs {
            let (_, h, w) = *dims.last().unwrap();
            let oh = (h - c.kh) / c.stride + 1;
            let ow = (w - c.kw) / c.stride + 1;
            dims.push((c.out_ch, oh, ow));
        }
        dims
    }

    pub fn flat_dim(&self) -> usize {
        let (c, h, w) = *self.stage_dims().last().unwrap();
        c * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let mut h = self.in_h;
        let mut w = self.in_w;
        for (i, c) in self.convs.iter().enumerate() {
            if c.kh > h || c.kw > w {
                return Err(Error::Config(format!(
                    "conv{} kernel {}x{} exceeds input {}x{}",
                    i + 1,
                    c.kh,
                    c.kw,
                    h,
                    w
                )));
            }
            h = (h - c.kh) / c.stride + 1;
            w = (w - c.kw) / c.stride + 1;
        }
        Ok(())
    }
}

/// Cart-pole trunk: 4 stacked grayscale frames in, Gaussian heads out.
pub fn cartpole_trunk(half_images: bool) -> TrunkArch {
    if half_images {
        TrunkArch {
            in_ch: 4,
            in_h: 16,
            in_w: 64,
            convs: vec![
                ConvSpec { out_ch: 16, kh: 5, kw: 5, stride: 2 },
                ConvSpec { out_ch: 32, kh: 5, kw: 5, stride: 2 },
                ConvSpec { out_ch: 32, kh: 1, kw: 3, stride: 2 },
            ],
            fc: 256,
        }
    } else {
        TrunkArch {
            in_ch: 4,
            in_h: 32,
            in_w: 128,
            convs: vec![
                ConvSpec { out_ch: 16, kh: 5, kw: 5, stride: 2 },
                ConvSpec { out_ch: 32, kh: 5, kw: 5, stride: 2 },
                ConvSpec { out_ch: 32, kh: 3, kw: 3, stride: 2 },
            ],
            fc: 256,
        }
    }
}

/// Grid trunk: one color image in. The 4/5/4 kernel sizes make every stage
/// invert exactly under the mirrored transposed convolutions, so the decoder
/// reproduces the observation extent.
pub fn grid_trunk(half_images: bool) -> TrunkArch {
    let side = if half_images { 32 } else { 64 };
    TrunkArch {
        in_ch: 3,
        in_h: side,
        in_w: side,
        convs: vec![
            ConvSpec { out_ch: 32, kh: 4, kw: 4, stride: 2 },
            ConvSpec { out_ch: 32, kh: 5, kw: 5, stride: 2 },
            ConvSpec { out_ch: 32, kh: 4, kw: 4, stride: 2 },
        ],
        fc: 256,
    }
}

/// Decoder mirroring a trunk: latent → fc(256) → fc(flat) → transposed
/// convolutions in reverse stage order → sigmoid image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderArch {
    pub latent_dim: usize,
    pub trunk: TrunkArch,
}

impl DecoderArch {
    /// Kernel shapes of the transposed convolutions, deepest stage first:
    /// [out_ch_of_stage, in_ch_of_stage, kh, kw], reused in the conv
    /// orientation the adjoint expects.
    pub fn convt_kernel_shapes(&self) -> Vec<[usize; 4]> {
        let dims = self.trunk.stage_dims();
        let mut shapes = Vec::new();
        for (i, c) in self.trunk.convs.iter().enumerate().rev() {
            let in_ch = dims[i].0;
            shapes.push([c.out_ch, in_ch, c.kh, c.kw]);
        }
        shapes
    }
}

// ---- initialization ----------------------------------------------------------

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, values).expect("shape/values consistent by construction")
}

/// He-style fan-in limit for layers feeding a ReLU.
fn he_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Output heads start near zero: symbol means, logits and values then grow
/// from the data instead of from initialisation noise, which otherwise
/// saturates the downstream control law before learning begins.
fn head_limit(fan_in: usize) -> f64 {
    0.1 * (3.0 / fan_in as f64).sqrt()
}

/// Insert trunk parameters under `prefix` (`{prefix}/conv{i}/k`,
/// `{prefix}/fc/{w,b}`) in build order.
pub fn init_trunk(
    params: &mut ParameterSet,
    prefix: &str,
    trunk: &TrunkArch,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let dims = trunk.stage_dims();
    for (i, c) in trunk.convs.iter().enumerate() {
        let in_ch = dims[i].0;
        let fan_in = in_ch * c.kh * c.kw;
        params.insert(
            &format!("{prefix}/conv{}/k", i + 1),
            uniform_tensor(rng, vec![c.out_ch, in_ch, c.kh, c.kw], he_limit(fan_in)),
        )?;
    }
    let flat = trunk.flat_dim();
    params.insert(
        &format!("{prefix}/fc/w"),
        uniform_tensor(rng, vec![trunk.fc, flat], he_limit(flat)),
    )?;
    params.insert(&format!("{prefix}/fc/b"), Tensor::zeros(vec![trunk.fc]))?;
    Ok(())
}

/// Insert a linear head `{prefix}/{name}/{w,b}` of `out` units. The bias
/// starts at `bias_init` (log-variance heads start negative so early
/// symbol noise does not drown the program's control signal).
pub fn init_head(
    params: &mut ParameterSet,
    prefix: &str,
    name: &str,
    in_dim: usize,
    out: usize,
    bias_init: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.insert(
        &format!("{prefix}/{name}/w"),
        uniform_tensor(rng, vec![out, in_dim], head_limit(in_dim)),
    )?;
    params.insert(
        &format!("{prefix}/{name}/b"),
        Tensor::new(vec![out], vec![bias_init; out])?,
    )?;
    Ok(())
}

/// Insert decoder parameters under `dec/`.
pub fn init_decoder(
    params: &mut ParameterSet,
    dec: &DecoderArch,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let flat = dec.trunk.flat_dim();
    params.insert(
        "dec/fc1/w",
        uniform_tensor(rng, vec![dec.trunk.fc, dec.latent_dim], he_limit(dec.latent_dim)),
    )?;
    params.insert("dec/fc1/b", Tensor::zeros(vec![dec.trunk.fc]))?;
    params.insert(
        "dec/fc2/w",
        uniform_tensor(rng, vec![flat, dec.trunk.fc], he_limit(dec.trunk.fc)),
    )?;
    params.insert("dec/fc2/b", Tensor::zeros(vec![flat]))?;
    for (i, shape) in dec.convt_kernel_shapes().iter().enumerate() {
        let fan_in = shape[0] * shape[2] * shape[3];
        params.insert(
            &format!("dec/convt{}/k", i + 1),
            uniform_tensor(rng, shape.to_vec(), he_limit(fan_in)),
        )?;
    }
    Ok(())
}

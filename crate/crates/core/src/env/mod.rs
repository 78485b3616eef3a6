//! Ground-truth task dynamics and deterministic rasterisation.

pub mod cartpole;
pub mod grid;
pub mod image;
pub mod render;

pub use cartpole::{CartPole, CartPoleParams, CartPoleState};
pub use grid::{CollectWood, GotoPose, GridAction, GridPose, GridState};

use crate::error::Result;
use crate::symbol::SymbolVector;
use rand_chacha::ChaCha8Rng;

/// Raw observation handed to a perceptor. Pixel values live in [0, 1],
/// channel-major (CHW; the grayscale stack uses frames as channels).
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Gray {
        frames: usize,
        h: usize,
        w: usize,
        data: Vec<f64>,
    },
    Color {
        h: usize,
        w: usize,
        data: Vec<f64>,
    },
}

impl Observation {
    pub fn channels(&self) -> usize {
        match self {
            Observation::Gray { frames, .. } => *frames,
            Observation::Color { .. } => 3,
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Observation::Gray { h, .. } | Observation::Color { h, .. } => *h,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Observation::Gray { w, .. } | Observation::Color { w, .. } => *w,
        }
    }

    pub fn data(&self) -> &[f64] {
        match self {
            Observation::Gray { data, .. } | Observation::Color { data, .. } => data,
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

/// Common surface the rollout loop drives. Each instance is single-threaded;
/// concurrent rollouts use independent instances and RNG streams.
pub trait Environment {
    /// Reset to a fresh episode and return the initial observation.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Observation;
    /// Apply a discrete action. Errors if the episode is already finished.
    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> Result<StepOutcome>;
    /// Render the current state.
    fn observe(&self) -> Observation;
    /// Privileged symbolic state, for evaluation only.
    fn ground_truth(&self) -> SymbolVector;
    /// Number of discrete actions.
    fn action_count(&self) -> usize;
    /// Episode goal, when the task has one.
    fn goal(&self) -> Option<GridPose> {
        None
    }
}

//! Task-encoding programs: deterministic mappings from symbols (plus an
//! optional goal) to a discrete action. Programs are pure and safe to share
//! across rollout workers.

pub mod astar;
pub mod lqr;

pub use astar::{astar_plan, collect_wood_program, goto_pose_program, Plan};
pub use lqr::{
    build_cartpole_model, lqr_act, lqr_invariance_check, solve_lqr_gain, LqrDesign,
    StateSpaceModel, PAPER_GAIN,
};

use crate::env::GridPose;
use crate::error::Result;
use crate::symbol::SymbolVector;

/// Symbol space a program consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolSpace {
    Continuous { dim: usize },
    Categorical { vars: usize },
}

/// A fixed program ρ mapping symbols to one of the task's discrete actions.
pub trait Program: Sync {
    fn act(&self, sigma: &SymbolVector, goal: Option<&GridPose>) -> Result<usize>;
    fn expects(&self) -> SymbolSpace;
}

/// Bang-bang LQR control law.
pub struct LqrProgram {
    pub gain: [f64; 4],
}

impl Program for LqrProgram {
    fn act(&self, sigma: &SymbolVector, _goal: Option<&GridPose>) -> Result<usize> {
        let v = sigma.as_continuous()?;
        lqr_act(v, &self.gain)
    }

    fn expects(&self) -> SymbolSpace {
        SymbolSpace::Continuous { dim: 4 }
    }
}

/// First action of the cost-minimal A* plan toward the episode goal.
pub struct GotoPoseProgram;

impl Program for GotoPoseProgram {
    fn act(&self, sigma: &SymbolVector, goal: Option<&GridPose>) -> Result<usize> {
        let goal = goal.ok_or_else(|| {
            crate::error::Error::contract("goto-pose program needs a goal pose")
        })?;
        let action = goto_pose_program(sigma, goal)?;
        Ok(action.index())
    }

    fn expects(&self) -> SymbolSpace {
        SymbolSpace::Categorical { vars: 3 }
    }
}

/// Pick when facing the wood, otherwise head for the nearest facing pose.
pub struct CollectWoodProgram;

impl Program for CollectWoodProgram {
    fn act(&self, sigma: &SymbolVector, _goal: Option<&GridPose>) -> Result<usize> {
        let action = collect_wood_program(sigma)?;
        Ok(action.index())
    }

    fn expects(&self) -> SymbolSpace {
        SymbolSpace::Categorical { vars: 5 }
    }
}

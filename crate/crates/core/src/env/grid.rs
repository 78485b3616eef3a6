//! 5×5 grid-world tasks: navigate to a goal pose, and collect a block of
//! wood with a stochastic pick action.
//!
//! Coordinates are 1-based: `x` grows eastward, `y` grows southward, and the
//! orientation `alpha` indexes N, E, S, W as 1..=4. A 90° rotation steps the
//! compass clockwise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::render::render_grid;
use super::{Environment, Observation, StepOutcome};
use crate::error::{Error, Result};
use crate::symbol::SymbolVector;

pub const GRID_SIDE: usize = 5;
pub const ORIENTATIONS: usize = 4;
pub const DEFAULT_GRID_STEP_CAP: usize = 50;

/// Discrete grid action. The first seven drive go-to-pose; collect-wood adds
/// `Pick`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    MoveN,
    MoveE,
    MoveS,
    MoveW,
    Rot90,
    Rot180,
    Rot270,
    Pick,
}

impl GridAction {
    pub const MOVES_AND_ROTATIONS: [GridAction; 7] = [
        GridAction::MoveN,
        GridAction::MoveE,
        GridAction::MoveS,
        GridAction::MoveW,
        GridAction::Rot90,
        GridAction::Rot180,
        GridAction::Rot270,
    ];

    pub fn index(&self) -> usize {
        match self {
            GridAction::MoveN => 0,
            GridAction::MoveE => 1,
            GridAction::MoveS => 2,
            GridAction::MoveW => 3,
            GridAction::Rot90 => 4,
            GridAction::Rot180 => 5,
            GridAction::Rot270 => 6,
            GridAction::Pick => 7,
        }
    }

    pub fn from_index(i: usize) -> Result<GridAction> {
        Ok(match i {
            0 => GridAction::MoveN,
            1 => GridAction::MoveE,
            2 => GridAction::MoveS,
            3 => GridAction::MoveW,
            4 => GridAction::Rot90,
            5 => GridAction::Rot180,
            6 => GridAction::Rot270,
            7 => GridAction::Pick,
            _ => return Err(Error::contract(format!("invalid grid action index {i}"))),
        })
    }
}

/// A pose on the board: position plus orientation, all 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridPose {
    pub x: usize,
    pub y: usize,
    pub alpha: usize,
}

impl GridPose {
    pub fn new(x: usize, y: usize, alpha: usize) -> Self {
        debug_assert!((1..=GRID_SIDE).contains(&x));
        debug_assert!((1..=GRID_SIDE).contains(&y));
        debug_assert!((1..=ORIENTATIONS).contains(&alpha));
        GridPose { x, y, alpha }
    }

    pub fn manhattan(&self, other: &GridPose) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    /// Unit displacement of a heading: N = (0,−1), E = (1,0), S = (0,+1),
    /// W = (−1,0).
    pub fn heading_delta(alpha: usize) -> (isize, isize) {
        match alpha {
            1 => (0, -1),
            2 => (1, 0),
            3 => (0, 1),
            4 => (-1, 0),
            _ => unreachable!("orientation out of range"),
        }
    }

    /// Cell directly ahead, if on the board.
    pub fn front_cell(&self) -> Option<(usize, usize)> {
        let (dx, dy) = Self::heading_delta(self.alpha);
        let nx = self.x as isize + dx;
        let ny = self.y as isize + dy;
        if (1..=GRID_SIDE as isize).contains(&nx) && (1..=GRID_SIDE as isize).contains(&ny) {
            Some((nx as usize, ny as usize))
        } else {
            None
        }
    }

    /// Apply a move or rotation; moves off-grid or into `blocked` leave the
    /// position unchanged.
    pub fn apply(&self, action: GridAction, blocked: Option<(usize, usize)>) -> GridPose {
        match action {
            GridAction::MoveN | GridAction::MoveE | GridAction::MoveS | GridAction::MoveW => {
                let (dx, dy) = match action {
                    GridAction::MoveN => (0isize, -1isize),
                    GridAction::MoveE => (1, 0),
                    GridAction::MoveS => (0, 1),
                    GridAction::MoveW => (-1, 0),
                    _ => unreachable!(),
                };
                let nx = self.x as isize + dx;
                let ny = self.y as isize + dy;
                let on_grid = (1..=GRID_SIDE as isize).contains(&nx)
                    && (1..=GRID_SIDE as isize).contains(&ny);
                let target = (nx as usize, ny as usize);
                if on_grid && Some(target) != blocked {
                    GridPose::new(target.0, target.1, self.alpha)
                } else {
                    *self
                }
            }
            GridAction::Rot90 => self.rotated(1),
            GridAction::Rot180 => self.rotated(2),
            GridAction::Rot270 => self.rotated(3),
            GridAction::Pick => *self,
        }
    }

    fn rotated(&self, quarter_turns: usize) -> GridPose {
        let alpha = (self.alpha - 1 + quarter_turns) % ORIENTATIONS + 1;
        GridPose::new(self.x, self.y, alpha)
    }
}

/// Full grid-world state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridState {
    pub pose: GridPose,
    pub goal: Option<GridPose>,
    pub wood: Option<(usize, usize)>,
    pub carried: bool,
}

fn random_pose(rng: &mut ChaCha8Rng) -> GridPose {
    GridPose::new(
        rng.gen_range(1..=GRID_SIDE),
        rng.gen_range(1..=GRID_SIDE),
        rng.gen_range(1..=ORIENTATIONS),
    )
}

// ---- go-to-pose -------------------------------------------------------------

/// Navigate to a randomly chosen goal pose. Rewards: −0.5 every step, +1 when
/// the Manhattan distance to the goal position strictly decreases, +5 once on
/// first standing at the goal position, +5 once on holding the full goal
/// pose, which also ends the episode.
pub struct GotoPose {
    pub state: GridState,
    pub steps: usize,
    pub step_cap: usize,
    pub done: bool,
    pub position_bonus_granted: bool,
    /// render the goal arrow into observations (policy-baseline mode)
    pub draw_goal_arrow: bool,
    /// 64 px, or 32 when halved
    pub img_side: usize,
}

impl GotoPose {
    pub fn standard(half_images: bool) -> Self {
        GotoPose {
            state: GridState {
                pose: GridPose::new(1, 1, 1),
                goal: Some(GridPose::new(1, 2, 1)),
                wood: None,
                carried: false,
            },
            steps: 0,
            step_cap: DEFAULT_GRID_STEP_CAP,
            done: true,
            position_bonus_granted: false,
            draw_goal_arrow: false,
            img_side: if half_images { 32 } else { 64 },
        }
    }

    pub fn set_episode(&mut self, start: GridPose, goal: GridPose) {
        self.state = GridState {
            pose: start,
            goal: Some(goal),
            wood: None,
            carried: false,
        };
        self.steps = 0;
        self.done = false;
        // "reaching" the goal position means standing there after a step, so
        // an episode that starts on the goal cell still pays the bonus once
        self.position_bonus_granted = false;
    }
}

impl Environment for GotoPose {
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Observation {
        // reject already-solved episodes
        let (start, goal) = loop {
            let s = random_pose(rng);
            let g = random_pose(rng);
            if s != g {
                break (s, g);
            }
        };
        self.set_episode(start, goal);
        self.observe()
    }

    fn step(&mut self, action: usize, _rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::contract("goto-pose: step on a finished episode"));
        }
        let action = GridAction::from_index(action)?;
        if action == GridAction::Pick {
            return Err(Error::contract("goto-pose: pick is not a valid action"));
        }
        let goal = self.state.goal.expect("goto-pose always has a goal");
        let before = self.state.pose;
        let after = before.apply(action, None);
        self.state.pose = after;
        self.steps += 1;

        let mut reward = -0.5;
        if after.manhattan(&goal) < before.manhattan(&goal) {
            reward += 1.0;
        }
        let at_position = after.x == goal.x && after.y == goal.y;
        if at_position && !self.position_bonus_granted {
            reward += 5.0;
            self.position_bonus_granted = true;
        }
        if at_position && after.alpha == goal.alpha {
            reward += 5.0;
            self.done = true;
        } else if self.steps >= self.step_cap {
            self.done = true;
        }
        Ok(StepOutcome {
            reward,
            done: self.done,
        })
    }

    fn observe(&self) -> Observation {
        render_grid(
            &self.state,
            self.draw_goal_arrow,
            self.img_side,
        )
    }

    fn ground_truth(&self) -> SymbolVector {
        let p = self.state.pose;
        SymbolVector::Categorical(vec![p.x, p.y, p.alpha])
    }

    fn action_count(&self) -> usize {
        7
    }

    fn goal(&self) -> Option<GridPose> {
        self.state.goal
    }
}

// ---- collect-wood -----------------------------------------------------------

/// Navigate to a block of wood and pick it up. The wood cell blocks movement;
/// `Pick` succeeds with probability one half only when the block is directly
/// ahead, pays +5 and ends the episode. No step penalty.
pub struct CollectWood {
    pub state: GridState,
    pub steps: usize,
    pub step_cap: usize,
    pub done: bool,
    pub img_side: usize,
}

impl CollectWood {
    pub fn standard(half_images: bool) -> Self {
        CollectWood {
            state: GridState {
                pose: GridPose::new(1, 1, 1),
                goal: None,
                wood: Some((3, 3)),
                carried: false,
            },
            steps: 0,
            step_cap: DEFAULT_GRID_STEP_CAP,
            done: true,
            img_side: if half_images { 32 } else { 64 },
        }
    }

    pub fn set_episode(&mut self, pose: GridPose, wood: (usize, usize)) {
        debug_assert!((pose.x, pose.y) != wood, "wood cell must differ from agent cell");
        self.state = GridState {
            pose,
            goal: None,
            wood: Some(wood),
            carried: false,
        };
        self.steps = 0;
        self.done = false;
    }

    fn wood(&self) -> (usize, usize) {
        self.state.wood.expect("collect-wood always has a wood cell")
    }
}

impl Environment for CollectWood {
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Observation {
        let (pose, wood) = loop {
            let p = random_pose(rng);
            let w = (rng.gen_range(1..=GRID_SIDE), rng.gen_range(1..=GRID_SIDE));
            if (p.x, p.y) != w {
                break (p, w);
            }
        };
        self.set_episode(pose, wood);
        self.observe()
    }

    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::contract("collect-wood: step on a finished episode"));
        }
        let action = GridAction::from_index(action)?;
        self.steps += 1;
        let mut reward = 0.0;
        match action {
            GridAction::Pick => {
                let facing_wood = self.state.pose.front_cell() == Some(self.wood());
                if facing_wood && rng.gen::<f64>() < 0.5 {
                    reward = 5.0;
                    self.state.carried = true;
                    self.done = true;
                }
            }
            other => {
                self.state.pose = self.state.pose.apply(other, Some(self.wood()));
            }
        }
        if self.steps >= self.step_cap {
            self.done = true;
        }
        Ok(StepOutcome {
            reward,
            done: self.done,
        })
    }

    fn observe(&self) -> Observation {
        render_grid(&self.state, false, self.img_side)
    }

    fn ground_truth(&self) -> SymbolVector {
        let p = self.state.pose;
        let (wx, wy) = self.wood();
        SymbolVector::Categorical(vec![p.x, p.y, p.alpha, wx, wy])
    }

    fn action_count(&self) -> usize {
        8
    }
}

/// Clockwise quarter-turn of the whole board: positions map by
/// (x, y) → (6 − y, x), headings advance one compass step.
pub fn rotate_pose_cw(p: &GridPose) -> GridPose {
    GridPose::new(
        GRID_SIDE + 1 - p.y,
        p.x,
        p.alpha % ORIENTATIONS + 1,
    )
}

/// The action that plays the role of `a` after the board rotates clockwise.
pub fn rotate_action_cw(a: GridAction) -> GridAction {
    match a {
        GridAction::MoveN => GridAction::MoveE,
        GridAction::MoveE => GridAction::MoveS,
        GridAction::MoveS => GridAction::MoveW,
        GridAction::MoveW => GridAction::MoveN,
        other => other,
    }
}

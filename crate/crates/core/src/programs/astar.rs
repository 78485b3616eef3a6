//! A* over the 100-pose graph (5×5 positions × 4 headings), unit cost per
//! move or rotation, with an admissible rotation-aware Manhattan heuristic.
//! Tie-breaking is fully deterministic: successors are expanded in the fixed
//! action order N, E, S, W, rot90, rot180, rot270 and equal-priority entries
//! pop FIFO.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::env::grid::{GridAction, GridPose, GRID_SIDE, ORIENTATIONS};
use crate::error::{Error, Result};
use crate::symbol::SymbolVector;

/// A cost-minimal action sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub actions: Vec<GridAction>,
    pub cost: usize,
}

fn pose_index(p: &GridPose) -> usize {
    ((p.y - 1) * GRID_SIDE + (p.x - 1)) * ORIENTATIONS + (p.alpha - 1)
}

fn heuristic(p: &GridPose, goal: &GridPose) -> usize {
    p.manhattan(goal) + usize::from(p.alpha != goal.alpha)
}

/// Plan from `start` to `goal`, treating `obstacle` (if any) as a blocked
/// cell. Errors when the goal cell is blocked or unreachable.
pub fn astar_plan(
    start: &GridPose,
    goal: &GridPose,
    obstacle: Option<(usize, usize)>,
) -> Result<Plan> {
    if Some((goal.x, goal.y)) == obstacle {
        return Err(Error::Planning("goal cell is an obstacle".into()));
    }
    if Some((start.x, start.y)) == obstacle {
        return Err(Error::Planning("start cell is an obstacle".into()));
    }
    if start == goal {
        return Ok(Plan {
            actions: Vec::new(),
            cost: 0,
        });
    }

    const UNSEEN: usize = usize::MAX;
    let n = GRID_SIDE * GRID_SIDE * ORIENTATIONS;
    let mut best_g = vec![UNSEEN; n];
    let mut parent: Vec<Option<(usize, GridAction)>> = vec![None; n];
    // priority: (f, insertion sequence) — FIFO within equal f
    let mut heap: BinaryHeap<Reverse<(usize, usize, usize)>> = BinaryHeap::new();
    let mut seq = 0usize;

    let s = pose_index(start);
    best_g[s] = 0;
    heap.push(Reverse((heuristic(start, goal), seq, s)));

    let poses: Vec<GridPose> = (0..n)
        .map(|i| {
            let alpha = i % ORIENTATIONS + 1;
            let cell = i / ORIENTATIONS;
            GridPose::new(cell % GRID_SIDE + 1, cell / GRID_SIDE + 1, alpha)
        })
        .collect();

    let mut settled = vec![false; n];
    while let Some(Reverse((_, _, idx))) = heap.pop() {
        if settled[idx] {
            continue;
        }
        settled[idx] = true;
        let pose = poses[idx];
        if pose == *goal {
            let mut actions = Vec::new();
            let mut cur = idx;
            while let Some((prev, act)) = parent[cur] {
                actions.push(act);
                cur = prev;
            }
            actions.reverse();
            let cost = actions.len();
            return Ok(Plan { actions, cost });
        }
        let g = best_g[idx];
        for action in GridAction::MOVES_AND_ROTATIONS {
            let next = pose.apply(action, obstacle);
            if next == pose {
                continue; // blocked or off-grid move, or a no-op
            }
            let nidx = pose_index(&next);
            let ng = g + 1;
            if ng < best_g[nidx] {
                best_g[nidx] = ng;
                parent[nidx] = Some((idx, action));
                seq += 1;
                heap.push(Reverse((ng + heuristic(&next, goal), seq, nidx)));
            }
        }
    }
    Err(Error::Planning(format!(
        "no path from {start:?} to {goal:?}"
    )))
}

fn pose_from_symbols(sigma: &[usize]) -> Result<GridPose> {
    let within = (1..=GRID_SIDE).contains(&sigma[0])
        && (1..=GRID_SIDE).contains(&sigma[1])
        && (1..=ORIENTATIONS).contains(&sigma[2]);
    if !within {
        return Err(Error::contract(format!(
            "pose symbols out of domain: {sigma:?}"
        )));
    }
    Ok(GridPose::new(sigma[0], sigma[1], sigma[2]))
}

/// First action of the plan toward `goal`; rotate in place when the symbols
/// already claim the goal pose.
pub fn goto_pose_program(sigma: &SymbolVector, goal: &GridPose) -> Result<GridAction> {
    let s = sigma.as_categorical()?;
    if s.len() != 3 {
        return Err(Error::contract(format!(
            "goto-pose program expects (x, y, alpha), got {} symbols",
            s.len()
        )));
    }
    let pose = pose_from_symbols(s)?;
    if pose == *goal {
        return Ok(GridAction::Rot90);
    }
    let plan = astar_plan(&pose, goal, None)?;
    Ok(plan.actions[0])
}

/// Poses that face the wood cell, enumerated by the agent's heading in the
/// fixed order N, E, S, W.
pub fn facing_poses(wood: (usize, usize)) -> Vec<GridPose> {
    let (wx, wy) = (wood.0 as isize, wood.1 as isize);
    let mut out = Vec::new();
    for alpha in 1..=ORIENTATIONS {
        let (dx, dy) = GridPose::heading_delta(alpha);
        // stand one cell behind the heading so the front cell is the wood
        let sx = wx - dx;
        let sy = wy - dy;
        if (1..=GRID_SIDE as isize).contains(&sx) && (1..=GRID_SIDE as isize).contains(&sy) {
            out.push(GridPose::new(sx as usize, sy as usize, alpha));
        }
    }
    out
}

/// Pick when the wood is directly ahead; otherwise take the first action of
/// the cheapest plan to a pose facing the wood (wood cell is an obstacle).
/// Re-invoked every step, so failed picks retry naturally.
pub fn collect_wood_program(sigma: &SymbolVector) -> Result<GridAction> {
    let s = sigma.as_categorical()?;
    if s.len() != 5 {
        return Err(Error::contract(format!(
            "collect-wood program expects (x, y, alpha, xw, yw), got {} symbols",
            s.len()
        )));
    }
    let pose = pose_from_symbols(s)?;
    let wood = (s[3], s[4]);
    if !(1..=GRID_SIDE).contains(&wood.0) || !(1..=GRID_SIDE).contains(&wood.1) {
        return Err(Error::contract(format!(
            "wood symbols out of domain: {wood:?}"
        )));
    }
    if (pose.x, pose.y) == wood {
        return Err(Error::contract(
            "invalid symbol state: agent and wood share a cell",
        ));
    }
    if pose.front_cell() == Some(wood) {
        return Ok(GridAction::Pick);
    }
    let mut best: Option<Plan> = None;
    for target in facing_poses(wood) {
        let plan = astar_plan(&pose, &target, Some(wood))?;
        let better = match &best {
            None => true,
            Some(b) => plan.cost < b.cost, // ties keep the earlier heading order
        };
        if better {
            best = Some(plan);
        }
    }
    let plan = best.ok_or_else(|| Error::Planning("no pose faces the wood cell".into()))?;
    Ok(plan.actions[0])
}

//! Deterministic rasterisation for both tasks. Every function here is a pure
//! mapping from state to pixel bytes; repeated calls produce identical
//! buffers.

use super::cartpole::{CartPoleState, X_LIMIT};
use super::grid::{GridPose, GridState, GRID_SIDE};
use super::Observation;

// ---- cart-pole ---------------------------------------------------------------

/// Render the last four states as a grayscale stack. Frame 0 is the oldest.
/// Width is always 4× the height (32×128 full scale, 16×64 halved);
/// x ∈ [−2.4, 2.4] maps linearly onto the columns.
pub fn render_gray_stack(history: &[CartPoleState], h: usize) -> Observation {
    debug_assert_eq!(history.len(), 4);
    let w = 4 * h;
    let mut data = vec![0.0; 4 * h * w];
    for (f, s) in history.iter().enumerate() {
        render_cartpole_frame(s, h, w, &mut data[f * h * w..(f + 1) * h * w]);
    }
    Observation::Gray {
        frames: 4,
        h,
        w,
        data,
    }
}

fn render_cartpole_frame(s: &CartPoleState, h: usize, w: usize, out: &mut [f64]) {
    let cx = (s.x + X_LIMIT) / (2.0 * X_LIMIT) * (w - 1) as f64;
    let cart_top = 3 * h / 4;
    let cart_h = (h / 6).max(2);
    let cart_half_w = (h / 5).max(3) as f64;
    let pole_len = (9 * h / 16) as f64;

    // cart body
    let x0 = (cx - cart_half_w).ceil().max(0.0) as usize;
    let x1 = ((cx + cart_half_w).floor() as usize).min(w - 1);
    for row in cart_top..(cart_top + cart_h).min(h) {
        for col in x0..=x1 {
            out[row * w + col] = 1.0;
        }
    }

    // pole: anti-aliased segment from the cart top, leaning toward +x for
    // positive alpha (screen y grows downward)
    let base = (cx, cart_top as f64);
    let tip = (
        cx + s.alpha.sin() * pole_len,
        cart_top as f64 - s.alpha.cos() * pole_len,
    );
    draw_segment_aa(base, tip, h, w, out);
}

/// Coverage-style anti-aliasing: intensity falls off linearly with distance
/// from the segment's core.
fn draw_segment_aa(a: (f64, f64), b: (f64, f64), h: usize, w: usize, out: &mut [f64]) {
    let min_x = (a.0.min(b.0) - 2.0).floor().max(0.0) as usize;
    let max_x = ((a.0.max(b.0) + 2.0).ceil() as usize).min(w - 1);
    let min_y = (a.1.min(b.1) - 2.0).floor().max(0.0) as usize;
    let max_y = ((a.1.max(b.1) + 2.0).ceil() as usize).min(h - 1);
    for row in min_y..=max_y {
        for col in min_x..=max_x {
            let d = point_segment_distance((col as f64, row as f64), a, b);
            let v = (1.4 - d).clamp(0.0, 1.0);
            if v > 0.0 {
                let px = &mut out[row * w + col];
                *px = px.max(v);
            }
        }
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (px - t * vx, py - t * vy);
    (dx * dx + dy * dy).sqrt()
}

// ---- grid world ---------------------------------------------------------------
//
// Fixed axonometric layout. For image side S the board parameters are:
//
// | S  | ox | oy | tile w | tile h | row skew | sprite rise |
// |----|----|----|--------|--------|----------|-------------|
// | 64 |  2 | 12 |   11   |   9    |    1     |      6      |
// | 32 |  1 |  6 |    5   |   4    |    1     |      3      |
//
// Tile (x, y) — x eastward, y southward, both 1-based — has its top-left
// pixel at (ox + (x−1)·tw + (5−y)·skew, oy + (y−1)·th). A sprite standing on
// a tile fills the tile rectangle plus `rise` rows above it, so sprites in
// nearer (larger y) rows occlude what stands behind them; rows are therefore
// painted far to near.

#[derive(Debug, Clone, Copy)]
pub struct GridLayout {
    pub side: usize,
    pub ox: usize,
    pub oy: usize,
    pub tile_w: usize,
    pub tile_h: usize,
    pub skew: usize,
    pub rise: usize,
}

/// Layout table for the supported image sides.
pub fn grid_layout(side: usize) -> GridLayout {
    if side >= 64 {
        GridLayout {
            side,
            ox: 2,
            oy: 12,
            tile_w: 11,
            tile_h: 9,
            skew: 1,
            rise: 6,
        }
    } else {
        GridLayout {
            side,
            ox: 1,
            oy: 6,
            tile_w: 5,
            tile_h: 4,
            skew: 1,
            rise: 3,
        }
    }
}

/// Pixel rectangle (x0, y0, x1, y1), inclusive, of a floor tile.
pub fn tile_rect(l: &GridLayout, x: usize, y: usize) -> (usize, usize, usize, usize) {
    let px = l.ox + (x - 1) * l.tile_w + (GRID_SIDE - y) * l.skew;
    let py = l.oy + (y - 1) * l.tile_h;
    (px, py, px + l.tile_w - 1, py + l.tile_h - 1)
}

/// Pixel rectangle, inclusive, of a sprite standing on tile (x, y): the tile
/// rectangle extended `rise` rows upward.
pub fn sprite_rect(l: &GridLayout, x: usize, y: usize) -> (usize, usize, usize, usize) {
    let (x0, y0, x1, y1) = tile_rect(l, x, y);
    (x0, y0 - l.rise, x1, y1)
}

const BG: [f64; 3] = [0.08, 0.08, 0.10];
const FLOOR_A: [f64; 3] = [0.45, 0.75, 0.35];
const FLOOR_B: [f64; 3] = [0.38, 0.65, 0.30];
const FLOOR_EDGE: [f64; 3] = [0.30, 0.52, 0.24];
const AGENT_BODY: [f64; 3] = [0.15, 0.25, 0.85];
const AGENT_TOP: [f64; 3] = [0.30, 0.45, 0.95];
const AGENT_GLYPH: [f64; 3] = [0.95, 0.95, 0.97];
const WOOD_BODY: [f64; 3] = [0.55, 0.35, 0.15];
const WOOD_TOP: [f64; 3] = [0.42, 0.26, 0.10];
const ARROW: [f64; 3] = [0.90, 0.12, 0.10];

struct Canvas {
    side: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(side: usize) -> Self {
        let mut data = vec![0.0; 3 * side * side];
        for c in 0..3 {
            data[c * side * side..(c + 1) * side * side].fill(BG[c]);
        }
        Canvas { side, data }
    }

    fn put(&mut self, x: usize, y: usize, color: [f64; 3]) {
        if x >= self.side || y >= self.side {
            return;
        }
        let plane = self.side * self.side;
        for c in 0..3 {
            self.data[c * plane + y * self.side + x] = color[c];
        }
    }

    fn fill_rect(&mut self, r: (usize, usize, usize, usize), color: [f64; 3]) {
        for y in r.1..=r.3 {
            for x in r.0..=r.2 {
                self.put(x, y, color);
            }
        }
    }
}

/// Deterministic sprite composition of a grid state.
pub fn render_grid(state: &GridState, draw_goal_arrow: bool, side: usize) -> Observation {
    let l = grid_layout(side);
    let mut canvas = Canvas::new(side);

    for y in 1..=GRID_SIDE {
        for x in 1..=GRID_SIDE {
            let r = tile_rect(&l, x, y);
            let color = if (x + y) % 2 == 0 { FLOOR_A } else { FLOOR_B };
            canvas.fill_rect(r, color);
            // south and east edge lines give the tiles their relief
            for px in r.0..=r.2 {
                canvas.put(px, r.3, FLOOR_EDGE);
            }
            for py in r.1..=r.3 {
                canvas.put(r.2, py, FLOOR_EDGE);
            }
        }
    }

    if draw_goal_arrow {
        if let Some(goal) = state.goal {
            draw_arrow(&mut canvas, &l, &goal);
        }
    }

    // far rows first so near sprites occlude
    for y in 1..=GRID_SIDE {
        if let Some((wx, wy)) = state.wood {
            if wy == y {
                draw_box(&mut canvas, &l, wx, wy, WOOD_BODY, WOOD_TOP);
            }
        }
        if state.pose.y == y {
            draw_agent(&mut canvas, &l, &state.pose);
        }
    }

    Observation::Color {
        h: side,
        w: side,
        data: canvas.data,
    }
}

/// A sprite box: top face in the raised band, body below.
fn draw_box(canvas: &mut Canvas, l: &GridLayout, x: usize, y: usize, body: [f64; 3], top: [f64; 3]) {
    let (x0, y0, x1, y1) = sprite_rect(l, x, y);
    canvas.fill_rect((x0, y0, x1, y0 + l.rise - 1), top);
    canvas.fill_rect((x0, y0 + l.rise, x1, y1), body);
}

fn draw_agent(canvas: &mut Canvas, l: &GridLayout, pose: &GridPose) {
    draw_box(canvas, l, pose.x, pose.y, AGENT_BODY, AGENT_TOP);
    let (x0, y0, x1, y1) = sprite_rect(l, pose.x, pose.y);
    let cx = (x0 + x1) / 2;
    let cy = (y0 + y1) / 2;
    let reach = (l.tile_w / 2).min(cy - y0);
    // wedge of pixels marching toward the heading, widening behind the tip
    let (dx, dy) = GridPose::heading_delta(pose.alpha);
    for step in 0..reach {
        let px = cx as isize + dx * (reach - step) as isize;
        let py = cy as isize + dy * (reach - step) as isize;
        let span = step.min(1) as isize;
        for off in -span..=span {
            let (gx, gy) = if dx == 0 {
                (px + off, py)
            } else {
                (px, py + off)
            };
            if gx >= x0 as isize && gx <= x1 as isize && gy >= y0 as isize && gy <= y1 as isize {
                canvas.put(gx as usize, gy as usize, AGENT_GLYPH);
            }
        }
    }
}

fn draw_arrow(canvas: &mut Canvas, l: &GridLayout, goal: &GridPose) {
    let (x0, y0, x1, y1) = tile_rect(l, goal.x, goal.y);
    let cx = (x0 + x1) / 2;
    let cy = (y0 + y1) / 2;
    let (dx, dy) = GridPose::heading_delta(goal.alpha);
    let reach = (l.tile_h / 2).min(2) as isize;
    for step in -reach..=reach {
        let px = cx as isize + dx * step;
        let py = cy as isize + dy * step;
        if px >= x0 as isize && px <= x1 as isize && py >= y0 as isize && py <= y1 as isize {
            canvas.put(px as usize, py as usize, ARROW);
        }
        // head marker at the pointing end
        if step == reach {
            for off in -1..=1 {
                let (hx, hy) = if dx == 0 { (px + off, py) } else { (px, py + off) };
                if hx >= x0 as isize && hx <= x1 as isize && hy >= y0 as isize && hy <= y1 as isize
                {
                    canvas.put(hx as usize, hy as usize, ARROW);
                }
            }
        }
    }
}

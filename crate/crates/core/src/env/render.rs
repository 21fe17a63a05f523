//! First-person grayscale raycaster.

use std::f64::consts::FRAC_PI_3;

use super::{GridSpec, Heading, Observation, Pose, PoseStack};
use crate::nn::Tensor;
use crate::rng::hash64;

const CEILING: f64 = 0.05;
const FLOOR_NEAR: f64 = 0.45;
const FLOOR_FAR: f64 = 0.15;
const MAX_RAY_STEPS: usize = 4096;

/// Casts one ray per pixel column across a 60° field of view.
#[derive(Debug, Clone)]
pub struct Renderer<'a> {
    grid: &'a GridSpec,
    fov: f64,
}

struct Hit {
    perp_dist: f64,
    cell: (i64, i64),
    face: u64,
    along: f64,
}

impl<'a> Renderer<'a> {
    pub fn new(grid: &'a GridSpec) -> Self {
        Self { grid, fov: FRAC_PI_3 }
    }

    fn cast(&self, px: f64, py: f64, dx: f64, dy: f64) -> Hit {
        let mut mx = px.floor() as i64;
        let mut my = py.floor() as i64;
        let ddx = if dx == 0.0 { f64::INFINITY } else { (1.0 / dx).abs() };
        let ddy = if dy == 0.0 { f64::INFINITY } else { (1.0 / dy).abs() };
        let (sx, mut side_x) = if dx < 0.0 {
            (-1, (px - mx as f64) * ddx)
        } else {
            (1, (mx as f64 + 1.0 - px) * ddx)
        };
        let (sy, mut side_y) = if dy < 0.0 {
            (-1, (py - my as f64) * ddy)
        } else {
            (1, (my as f64 + 1.0 - py) * ddy)
        };
        let mut y_side = false;
        for _ in 0..MAX_RAY_STEPS {
            if side_x < side_y {
                side_x += ddx;
                mx += sx;
                y_side = false;
            } else {
                side_y += ddy;
                my += sy;
                y_side = true;
            }
            if self.grid.is_wall(mx, my) {
                break;
            }
        }
        let perp_dist = if y_side { side_y - ddy } else { side_x - ddx };
        let (along, face) = if y_side {
            let a = px + perp_dist * dx;
            (a - a.floor(), if sy > 0 { 0 } else { 2 })
        } else {
            let a = py + perp_dist * dy;
            (a - a.floor(), if sx > 0 { 3 } else { 1 })
        };
        Hit {
            perp_dist: perp_dist.max(1e-6),
            cell: (mx, my),
            face,
            along,
        }
    }

    /// Render one `H × W` frame with values in `[0, 1]`.
    pub fn render(&self, pose: Pose) -> Vec<f64> {
        let (h, w) = (self.grid.render_height, self.grid.render_width);
        let mut out = vec![0.0; h * w];
        let (dx, dy) = match pose.heading {
            Heading::N => (0.0, -1.0),
            Heading::E => (1.0, 0.0),
            Heading::S => (0.0, 1.0),
            Heading::W => (-1.0, 0.0),
        };
        // camera plane is perpendicular to the view direction, to the right
        let plane = (self.fov / 2.0).tan();
        let (plx, ply) = (-dy * plane, dx * plane);
        let (px, py) = (pose.x as f64 + 0.5, pose.y as f64 + 0.5);
        for col in 0..w {
            let cam = 2.0 * (col as f64 + 0.5) / w as f64 - 1.0;
            let hit = self.cast(px, py, dx + plx * cam, dy + ply * cam);
            // a wall in the adjacent cell sits 0.5 away and fills the column
            let line = ((h as f64) * 0.5 / hit.perp_dist).min(h as f64);
            let top = (h as f64 - line) / 2.0;
            let bottom = top + line;
            let tex = hash64(&[hit.cell.0 as u64, hit.cell.1 as u64, hit.face]);
            let tone = 0.55 + 0.45 * ((tex & 0xff) as f64 / 255.0);
            let stripes = (tex >> 8) & 0xf;
            let stripe = ((hit.along * 4.0) as u64).min(3);
            let stripe_gain = if (stripes >> stripe) & 1 == 1 { 1.0 } else { 0.7 };
            let shade = tone * stripe_gain / (1.0 + 0.35 * hit.perp_dist);
            for row in 0..h {
                let y = row as f64 + 0.5;
                let v = if y < top {
                    CEILING
                } else if y < bottom {
                    shade
                } else {
                    let t = (y - h as f64 / 2.0) / (h as f64 / 2.0);
                    FLOOR_FAR + (FLOOR_NEAR - FLOOR_FAR) * t
                };
                out[row * w + col] = v.clamp(0.0, 1.0);
            }
        }
        out
    }

    /// Pre-render every pose of the grid.
    pub fn cache(&self) -> FrameCache {
        let frames = self.grid.states().iter().map(|&p| self.render(p)).collect();
        FrameCache {
            frames,
            shape: self.grid.obs_shape(),
        }
    }
}

/// Frames for every enumerated pose, indexed by state index.
#[derive(Debug, Clone)]
pub struct FrameCache {
    frames: Vec<Vec<f64>>,
    shape: [usize; 3],
}

impl FrameCache {
    pub fn frame(&self, state: usize) -> &[f64] {
        &self.frames[state]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn observation(&self, stack: &PoseStack) -> Observation {
        let [k, h, w] = self.shape;
        debug_assert_eq!(stack.0.len(), k);
        let mut data = Vec::with_capacity(k * h * w);
        for &s in &stack.0 {
            data.extend_from_slice(&self.frames[s]);
        }
        Observation {
            frames: Tensor::from_vec(&self.shape, data).expect("stack matches shape"),
        }
    }
}

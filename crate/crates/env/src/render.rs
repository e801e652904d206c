//! Egocentric top-down rendering.
//!
//! The window is `view_cells` wide and deep. The agent's own cell is the
//! bottom centre and the agent always faces up. Each cell covers
//! `render_size / view_cells` pixels (remainders go to later cells); a ball
//! is a flat square of fixed size inside its cell and the agent is a bar
//! along the bottom of its cell that never overlaps a ball sprite.

use crate::config::GridConfig;
use crate::env::EnvState;

pub const FLOOR_COLOR: [f64; 3] = [0.82, 0.82, 0.78];
pub const WALL_COLOR: [f64; 3] = [0.2, 0.2, 0.22];
pub const AGENT_COLOR: [f64; 3] = [1.0, 1.0, 1.0];

/// Channels-last RGB image in `[0, 1]`, `size × size × 3`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl Observation {
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.size + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Pixel geometry shared by the renderer and the mask.
struct Layout {
    size: usize,
    view: usize,
    min_cell: usize,
    sprite: usize,
    sprite_dy: usize,
    sprite_dx: usize,
    bar: usize,
}

impl Layout {
    fn new(cfg: &GridConfig) -> Self {
        let min_cell = cfg.render_size / cfg.view_cells;
        let bar = (min_cell / 6).max(1);
        let sprite = ((min_cell * 2) / 3).clamp(1, min_cell - bar);
        Self {
            size: cfg.render_size,
            view: cfg.view_cells,
            min_cell,
            sprite,
            sprite_dy: (min_cell - bar - sprite) / 2,
            sprite_dx: (min_cell - sprite) / 2,
            bar,
        }
    }

    fn start(&self, i: usize) -> usize {
        i * self.size / self.view
    }

    /// Grid cell shown at window position (`vr`, `vc`), if inside the grid.
    fn world_cell(&self, cfg: &GridConfig, s: &EnvState, vr: usize, vc: usize) -> Option<(isize, isize)> {
        let forward = (self.view - 1 - vr) as isize;
        let lateral = vc as isize - (self.view / 2) as isize;
        let (fr, fc) = s.agent_dir.delta();
        let (rr, rc) = s.agent_dir.right().delta();
        let r = s.agent_pos.0 as isize + forward * fr + lateral * rr;
        let c = s.agent_pos.1 as isize + forward * fc + lateral * rc;
        let g = cfg.grid_size as isize;
        (r >= 0 && c >= 0 && r < g && c < g).then_some((r, c))
    }

    /// Ball sprites in view as (ball, top, left).
    fn sprites(&self, cfg: &GridConfig, s: &EnvState) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for vr in 0..self.view {
            for vc in 0..self.view {
                if let Some((r, c)) = self.world_cell(cfg, s, vr, vc) {
                    if let Some(b) = s.ball_at((r as usize, c as usize)) {
                        out.push((b, self.start(vr) + self.sprite_dy, self.start(vc) + self.sprite_dx));
                    }
                }
            }
        }
        out
    }
}

pub fn render_obs(cfg: &GridConfig, s: &EnvState) -> Observation {
    let lay = Layout::new(cfg);
    let size = cfg.render_size;
    let mut px = vec![0.0; size * size * 3];
    let fill = |px: &mut [f64], y0: usize, y1: usize, x0: usize, x1: usize, col: [f64; 3]| {
        for y in y0..y1 {
            for x in x0..x1 {
                px[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&col);
            }
        }
    };
    for vr in 0..lay.view {
        for vc in 0..lay.view {
            let col = match lay.world_cell(cfg, s, vr, vc) {
                Some((r, c)) if !cfg.is_wall(r, c) => FLOOR_COLOR,
                _ => WALL_COLOR,
            };
            fill(&mut px, lay.start(vr), lay.start(vr + 1), lay.start(vc), lay.start(vc + 1), col);
        }
    }
    for (b, y, x) in lay.sprites(cfg, s) {
        fill(&mut px, y, y + lay.sprite, x, x + lay.sprite, cfg.ball_colors[b]);
    }
    let (ar, ac) = (lay.view - 1, lay.view / 2);
    let y0 = lay.start(ar) + lay.min_cell - lay.bar;
    fill(&mut px, y0, y0 + lay.bar, lay.start(ac), lay.start(ac + 1), AGENT_COLOR);
    Observation { size, pixels: px }
}

/// 1 on exactly the pixels covered by ball sprites in the current view, row-major `size × size`.
pub fn foreground_mask(cfg: &GridConfig, s: &EnvState) -> Vec<u8> {
    let lay = Layout::new(cfg);
    let size = cfg.render_size;
    let mut mask = vec![0u8; size * size];
    for (_, y, x) in lay.sprites(cfg, s) {
        for yy in y..y + lay.sprite {
            mask[yy * size + x..yy * size + x + lay.sprite].iter_mut().for_each(|m| *m = 1);
        }
    }
    mask
}

/// Pixel area of one fully visible ball.
#[cfg(test)]
pub(crate) fn sprite_area(cfg: &GridConfig) -> usize {
    let lay = Layout::new(cfg);
    lay.sprite * lay.sprite
}

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ball colors in palette order; none of them is used for floor, walls or the agent.
pub const DEFAULT_PALETTE: [[f64; 3]; 6] =
    [[0.9, 0.1, 0.1], [0.1, 0.75, 0.1], [0.15, 0.25, 0.95], [0.95, 0.85, 0.1], [0.85, 0.1, 0.85], [0.1, 0.85, 0.9]];

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    /// Side length in cells, including the outer wall ring.
    pub grid_size: usize,
    pub n_balls: usize,
    /// Minimum Manhattan distance between any two balls.
    pub min_pair_distance: usize,
    pub max_steps: usize,
    /// Side of the square egocentric window; the agent sits at its bottom centre.
    pub view_cells: usize,
    pub render_size: usize,
    pub ball_colors: Vec<[f64; 3]>,
    /// Treat every ball touched in a reward cycle as paid, not only correctly collected ones.
    pub strict_visit_penalty: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            grid_size: 8,
            n_balls: 4,
            min_pair_distance: 2,
            max_steps: 100,
            view_cells: 5,
            render_size: 64,
            ball_colors: DEFAULT_PALETTE.to_vec(),
            strict_visit_penalty: false,
        }
    }
}

impl GridConfig {
    /// Walkable cells, row-major.
    pub fn interior(&self) -> Vec<(usize, usize)> {
        let g = self.grid_size;
        (1..g.saturating_sub(1)).flat_map(|r| (1..g - 1).map(move |c| (r, c))).collect()
    }

    pub fn is_wall(&self, row: isize, col: isize) -> bool {
        let g = self.grid_size as isize;
        row <= 0 || col <= 0 || row >= g - 1 || col >= g - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_size < 3 {
            return bad(format!("grid_size {} leaves no floor inside the walls", self.grid_size));
        }
        if self.n_balls == 0 {
            return bad("n_balls must be at least 1".into());
        }
        if self.n_balls > self.ball_colors.len() {
            return bad(format!("{} balls but only {} palette colors", self.n_balls, self.ball_colors.len()));
        }
        for (i, a) in self.ball_colors.iter().enumerate() {
            if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("palette color {i} is outside [0, 1]"));
            }
            if self.ball_colors[..i].contains(a) {
                return bad(format!("palette color {i} repeats an earlier color"));
            }
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if self.view_cells == 0 || self.view_cells % 2 == 0 {
            return bad(format!("view_cells must be odd, got {}", self.view_cells));
        }
        if self.render_size < 3 * self.view_cells {
            return bad(format!("render_size {} is too small for {} view cells", self.render_size, self.view_cells));
        }
        if !self.has_feasible_layout() {
            return bad(format!(
                "no layout of {} balls at Manhattan distance {} plus a free agent cell fits a {}x{} grid",
                self.n_balls, self.min_pair_distance, self.grid_size, self.grid_size
            ));
        }
        Ok(())
    }

    /// Greedy row-major placement; succeeding proves a layout exists.
    fn has_feasible_layout(&self) -> bool {
        let cells = self.interior();
        let mut placed: Vec<(usize, usize)> = Vec::new();
        for &c in &cells {
            if placed.len() == self.n_balls {
                break;
            }
            if placed.iter().all(|&p| manhattan(p, c) >= self.min_pair_distance) {
                placed.push(c);
            }
        }
        placed.len() == self.n_balls && cells.len() > self.n_balls
    }

    /// Stable 64-bit digest of every field.
    pub fn config_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(format!(
            "grid_size={};n_balls={};min_pair_distance={};max_steps={};view_cells={};render_size={};strict={};",
            self.grid_size,
            self.n_balls,
            self.min_pair_distance,
            self.max_steps,
            self.view_cells,
            self.render_size,
            self.strict_visit_penalty
        ));
        for c in &self.ball_colors {
            for v in c {
                h.update(v.to_le_bytes());
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }
}

pub(crate) fn manhattan(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

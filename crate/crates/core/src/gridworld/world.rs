use rand::Rng;
use serde::{Deserialize, Serialize};

use super::action::Action;
use crate::error::{Error, Result};
use crate::rng::{self, tags};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    /// Unit step in grid coordinates; `y` grows southwards.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }

    pub fn right(self) -> Heading {
        Self::ALL[(self as usize + 1) % 4]
    }

    pub fn left(self) -> Heading {
        Self::ALL[(self as usize + 3) % 4]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub x: i32,
    pub y: i32,
    pub heading: Heading,
}

impl Pose {
    pub fn new(x: i32, y: i32, heading: Heading) -> Self {
        Self { x, y, heading }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (((self.x - other.x).pow(2) + (self.y - other.y).pow(2)) as f64).sqrt()
    }

    /// Where `action` would take the agent ignoring walls.
    pub fn apply(self, action: Action) -> Result<Pose> {
        let shifted = |h: Heading| {
            let (dx, dy) = h.delta();
            Pose::new(self.x + dx, self.y + dy, self.heading)
        };
        Ok(match action {
            Action::MoveForward => shifted(self.heading),
            Action::MoveBackward => shifted(self.heading.right().right()),
            Action::StrafeLeft => shifted(self.heading.left()),
            Action::StrafeRight => shifted(self.heading.right()),
            Action::TurnLeft => Pose::new(self.x, self.y, self.heading.left()),
            Action::TurnRight => Pose::new(self.x, self.y, self.heading.right()),
            Action::Noop => self,
            Action::Null => return Err(Error::NullAction),
        })
    }
}

/// 8-colour floor palette, 8-bit RGB.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 60, 60],
    [60, 200, 80],
    [70, 110, 235],
    [240, 210, 60],
    [200, 80, 210],
    [60, 210, 215],
    [245, 150, 50],
    [235, 235, 235],
];
pub const WALL_RGB: [u8; 3] = [40, 40, 48];
pub const BORDER_RGB: [u8; 3] = [0, 0, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub color: u8,
    pub wall: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid: usize,
    pub view: usize,
    pub tile_px: usize,
    pub border_px: usize,
    pub wall_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            view: 7,
            tile_px: 4,
            border_px: 2,
            wall_prob: 0.15,
        }
    }
}

impl WorldConfig {
    pub fn frame_size(&self) -> usize {
        self.view * self.tile_px + 2 * self.border_px
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 5 {
            return Err(Error::Config(format!("grid size {} is below 5", self.grid)));
        }
        if self.view == 0 || self.view % 2 == 0 {
            return Err(Error::Config(format!("view size {} must be odd", self.view)));
        }
        if self.tile_px == 0 {
            return Err(Error::Config("tile_px must be positive".into()));
        }
        if !(0.0..0.4).contains(&self.wall_prob) {
            return Err(Error::Config(format!(
                "wall_prob {} must lie in [0, 0.4)",
                self.wall_prob
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    tiles: Vec<Tile>,
}

impl World {
    /// Border ring is wall; interior walls are sparse (at least 60% free).
    pub fn generate(seed: u64, config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let g = config.grid;
        let mut rng = rng::stream(seed, &[tags::WORLD]);
        let mut tiles = Vec::with_capacity(g * g);
        for y in 0..g {
            for x in 0..g {
                let border = x == 0 || y == 0 || x == g - 1 || y == g - 1;
                let color = rng.random_range(0..PALETTE.len()) as u8;
                let wall = border || rng.random_bool(config.wall_prob);
                tiles.push(Tile { color, wall });
            }
        }
        let mut world = Self {
            seed,
            config: config.clone(),
            tiles,
        };
        // Sparse walls make this a no-op for all but pathological draws.
        let mut interior = (1..g - 1).flat_map(|y| (1..g - 1).map(move |x| y * g + x));
        while world.interior_free_fraction() < 0.6 {
            let idx = interior.next().expect("clearing every interior wall reaches 100%");
            world.tiles[idx].wall = false;
        }
        Ok(world)
    }

    pub fn size(&self) -> usize {
        self.config.grid
    }

    /// Out-of-bounds cells read as walls.
    pub fn tile(&self, x: i32, y: i32) -> Tile {
        let g = self.config.grid as i32;
        if x < 0 || y < 0 || x >= g || y >= g {
            return Tile { color: 0, wall: true };
        }
        self.tiles[(y * g + x) as usize]
    }

    pub fn is_free(&self, x: i32, y: i32) -> bool {
        !self.tile(x, y).wall
    }

    pub fn interior_free_fraction(&self) -> f64 {
        let g = self.config.grid as i32;
        let free = (1..g - 1)
            .flat_map(|y| (1..g - 1).map(move |x| (x, y)))
            .filter(|&(x, y)| self.is_free(x, y))
            .count();
        free as f64 / ((g - 2) * (g - 2)) as f64
    }

    pub fn free_cells(&self) -> Vec<(i32, i32)> {
        let g = self.config.grid as i32;
        (0..g)
            .flat_map(|y| (0..g).map(move |x| (x, y)))
            .filter(|&(x, y)| self.is_free(x, y))
            .collect()
    }

    pub fn random_start(&self, seed: u64) -> Result<Pose> {
        let cells = self.free_cells();
        if cells.is_empty() {
            return Err(Error::WorldTooSmall("no free cell".into()));
        }
        let mut rng = rng::stream(seed, &[tags::START]);
        let (x, y) = cells[rng.random_range(0..cells.len())];
        Ok(Pose::new(x, y, Heading::ALL[rng.random_range(0..4)]))
    }

    /// Blocked moves leave the pose unchanged.
    pub fn step(&self, pose: Pose, action: Action) -> Result<Pose> {
        let next = pose.apply(action)?;
        Ok(if self.is_free(next.x, next.y) { next } else { pose })
    }

    /// The `V x V` tile window with the agent at the bottom-centre cell,
    /// facing up. Row-major, row 0 is farthest ahead.
    pub fn view_tiles(&self, pose: Pose) -> Vec<Tile> {
        let v = self.config.view as i32;
        let half = (v - 1) / 2;
        let (fx, fy) = pose.heading.delta();
        let (rx, ry) = pose.heading.right().delta();
        let mut out = Vec::with_capacity((v * v) as usize);
        for row in 0..v {
            let ahead = v - 1 - row;
            for col in 0..v {
                let side = col - half;
                out.push(self.tile(
                    pose.x + ahead * fx + side * rx,
                    pose.y + ahead * fy + side * ry,
                ));
            }
        }
        out
    }

    /// Planar `[3, H, W]` frame in `[-1, 1]`.
    pub fn render(&self, pose: Pose) -> Vec<f32> {
        let cfg = &self.config;
        let size = cfg.frame_size();
        let plane = size * size;
        let tiles = self.view_tiles(pose);
        let mut out = vec![0.0f32; 3 * plane];
        for py in 0..size {
            for px in 0..size {
                let rgb = if py < cfg.border_px
                    || px < cfg.border_px
                    || py >= size - cfg.border_px
                    || px >= size - cfg.border_px
                {
                    BORDER_RGB
                } else {
                    let row = (py - cfg.border_px) / cfg.tile_px;
                    let col = (px - cfg.border_px) / cfg.tile_px;
                    let t = tiles[row * cfg.view + col];
                    if t.wall {
                        WALL_RGB
                    } else {
                        PALETTE[t.color as usize]
                    }
                };
                for c in 0..3 {
                    out[c * plane + py * size + px] = crate::video::from_u8(rgb[c]);
                }
            }
        }
        out
    }
}

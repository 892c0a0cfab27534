//! Coin-collection gridworld.
//!
//! A rectangular field (5x13 by default) bounded by border walls, with
//! optional interior walls from an ASCII map. The agent moves in the four
//! cardinal directions; bumping a wall wastes the step. Every step costs
//! -0.01 reward, every collected coin pays +1, and an episode ends when the
//! last coin is taken or after 500 steps.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

/// Hard cap on episode length, in steps.
pub const MAX_EPISODE_STEPS: u32 = 500;
pub const NUM_ACTIONS: usize = 4;
pub const REWARD_STEP: f32 = -0.01;
pub const REWARD_COIN: f32 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("episode is over; call reset")]
    EpisodeOver,
    #[error("environment has not been reset")]
    NotStarted,
    #[error("cannot place {coins} coins plus the agent on {free} free cells")]
    TooManyCoins { coins: usize, free: usize },
    #[error("at least one coin is required")]
    NoCoins,
    #[error("bad map character {0:?} (expected '#' or '.')")]
    BadMapChar(char),
    #[error("map rows have inconsistent lengths")]
    RaggedMap,
    #[error("map has no free cells")]
    NoFreeCells,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

/// What an observation looks like: three binary planes, or the RGB render
/// scaled to [0, 1]. Both are `rows * cols * 3` floats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsMode {
    Symbolic,
    Rgb,
}

/// Static field geometry: interior walls only; the border is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
}

impl Map {
    /// The default 5x13 field with no interior walls.
    pub fn open_field() -> Self {
        Map {
            rows: 5,
            cols: 13,
            walls: vec![false; 5 * 13],
        }
    }

    /// Parse a map: one row per line, `#` wall, `.` free. Rows may be
    /// separated by newlines or `|` (the config-file form).
    pub fn from_ascii(text: &str) -> Result<Self, GridError> {
        let normalized = text.replace('|', "\n");
        let rows: Vec<&str> = normalized
            .lines()
            .map(|l| l.trim_end())
            .filter(|l| !l.is_empty())
            .collect();
        if rows.is_empty() {
            return Err(GridError::NoFreeCells);
        }
        let cols = rows[0].chars().count();
        let mut walls = Vec::with_capacity(rows.len() * cols);
        for row in &rows {
            if row.chars().count() != cols {
                return Err(GridError::RaggedMap);
            }
            for c in row.chars() {
                match c {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    other => return Err(GridError::BadMapChar(other)),
                }
            }
        }
        if walls.iter().all(|w| *w) {
            return Err(GridError::NoFreeCells);
        }
        Ok(Map {
            rows: rows.len(),
            cols,
            walls,
        })
    }

    /// Render back to the `|`-separated single-line form.
    pub fn to_ascii(&self) -> String {
        (0..self.rows)
            .map(|r| {
                (0..self.cols)
                    .map(|c| if self.is_wall(r, c) { '#' } else { '.' })
                    .collect::<String>()
            })
            .collect::<Vec<_>>()
            .join("|")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_wall(&self, row: usize, col: usize) -> bool {
        self.walls[row * self.cols + col]
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.is_wall(r, c) {
                    cells.push((r, c));
                }
            }
        }
        cells
    }
}

/// Breadth-first shortest path length between two free cells, if connected.
pub fn bfs_distance(map: &Map, from: (usize, usize), to: (usize, usize)) -> Option<u32> {
    if map.is_wall(from.0, from.1) || map.is_wall(to.0, to.1) {
        return None;
    }
    let mut dist = vec![u32::MAX; map.rows * map.cols];
    let mut queue = std::collections::VecDeque::new();
    dist[from.0 * map.cols + from.1] = 0;
    queue.push_back(from);
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[r * map.cols + c];
        if (r, c) == to {
            return Some(d);
        }
        for action in Action::ALL {
            let (dr, dc) = action.delta();
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr as usize >= map.rows || nc as usize >= map.cols {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if map.is_wall(nr, nc) || dist[nr * map.cols + nc] != u32::MAX {
                continue;
            }
            dist[nr * map.cols + nc] = d + 1;
            queue.push_back((nr, nc));
        }
    }
    None
}

/// Dynamic episode state.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub agent: (usize, usize),
    pub coins: BTreeSet<(usize, usize)>,
    pub steps_elapsed: u32,
    pub done: bool,
}

/// The environment: a map plus the current episode.
pub struct Gridworld {
    map: Map,
    obs_mode: ObsMode,
    state: Option<GridState>,
}

impl Gridworld {
    pub fn new(map: Map, obs_mode: ObsMode) -> Self {
        Gridworld {
            map,
            obs_mode,
            state: None,
        }
    }

    pub fn map(&self) -> &Map {
        &self.map
    }

    pub fn obs_mode(&self) -> ObsMode {
        self.obs_mode
    }

    /// Observation length (both modes flatten to rows * cols * 3).
    pub fn obs_dim(&self) -> usize {
        self.map.rows * self.map.cols * 3
    }

    pub fn state(&self) -> Option<&GridState> {
        self.state.as_ref()
    }

    /// Restore a checkpointed episode state.
    pub fn restore_state(&mut self, state: GridState) {
        self.state = Some(state);
    }

    pub fn steps_elapsed(&self) -> Option<u32> {
        self.state.as_ref().map(|s| s.steps_elapsed)
    }

    pub fn coins_remaining(&self) -> Option<usize> {
        self.state.as_ref().map(|s| s.coins.len())
    }

    /// Start a fresh episode with the agent and `n_coins` coins placed
    /// uniformly at random on distinct free cells.
    pub fn reset(&mut self, rng: &mut impl Rng, n_coins: usize) -> Result<Vec<f32>, GridError> {
        if n_coins == 0 {
            return Err(GridError::NoCoins);
        }
        let free = self.map.free_cells();
        if n_coins + 1 > free.len() {
            return Err(GridError::TooManyCoins {
                coins: n_coins,
                free: free.len(),
            });
        }
        let picks = rand::seq::index::sample(rng, free.len(), n_coins + 1);
        let agent = free[picks.index(0)];
        let coins: BTreeSet<(usize, usize)> = (1..=n_coins).map(|i| free[picks.index(i)]).collect();
        self.state = Some(GridState {
            agent,
            coins,
            steps_elapsed: 0,
            done: false,
        });
        Ok(self.observation().expect("state was just set"))
    }

    /// Advance one step. Returns (observation, reward, done).
    pub fn step(&mut self, action: Action) -> Result<(Vec<f32>, f32, bool), GridError> {
        let map = &self.map;
        let state = self.state.as_mut().ok_or(GridError::NotStarted)?;
        if state.done {
            return Err(GridError::EpisodeOver);
        }
        state.steps_elapsed += 1;
        let (dr, dc) = action.delta();
        let (nr, nc) = (state.agent.0 as isize + dr, state.agent.1 as isize + dc);
        let in_bounds = nr >= 0 && nc >= 0 && (nr as usize) < map.rows && (nc as usize) < map.cols;
        if in_bounds && !map.is_wall(nr as usize, nc as usize) {
            state.agent = (nr as usize, nc as usize);
        }
        let mut reward = REWARD_STEP;
        if state.coins.remove(&state.agent) {
            reward += REWARD_COIN;
        }
        if state.coins.is_empty() || state.steps_elapsed >= MAX_EPISODE_STEPS {
            state.done = true;
        }
        let done = state.done;
        Ok((self.observation().expect("state is set"), reward, done))
    }

    /// The current observation, if an episode is active.
    pub fn observation(&self) -> Option<Vec<f32>> {
        let state = self.state.as_ref()?;
        let (rows, cols) = (self.map.rows, self.map.cols);
        match self.obs_mode {
            ObsMode::Symbolic => {
                let cells = rows * cols;
                let mut obs = vec![0.0f32; cells * 3];
                obs[state.agent.0 * cols + state.agent.1] = 1.0;
                for (r, c) in &state.coins {
                    obs[cells + r * cols + c] = 1.0;
                }
                for r in 0..rows {
                    for c in 0..cols {
                        if self.map.is_wall(r, c) {
                            obs[2 * cells + r * cols + c] = 1.0;
                        }
                    }
                }
                Some(obs)
            }
            ObsMode::Rgb => self
                .render_rgb()
                .ok()
                .map(|px| px.into_iter().map(|b| f32::from(b) / 255.0).collect()),
        }
    }

    /// RGB render, row-major, 3 bytes per cell: cyan agent, yellow coins,
    /// purple walls, white background.
    pub fn render_rgb(&self) -> Result<Vec<u8>, GridError> {
        let state = self.state.as_ref().ok_or(GridError::NotStarted)?;
        let (rows, cols) = (self.map.rows, self.map.cols);
        let mut px = Vec::with_capacity(rows * cols * 3);
        for r in 0..rows {
            for c in 0..cols {
                let rgb: [u8; 3] = if state.agent == (r, c) {
                    [0, 255, 255]
                } else if state.coins.contains(&(r, c)) {
                    [255, 255, 0]
                } else if self.map.is_wall(r, c) {
                    [128, 0, 128]
                } else {
                    [255, 255, 255]
                };
                px.extend_from_slice(&rgb);
            }
        }
        Ok(px)
    }
}

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Environment, TabularMdp};
use crate::error::{Error, Result};

pub const ACTION_NAMES: [&str; 4] = ["up", "down", "left", "right"];
const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Classic 13×13 four-rooms map. `S` is the start, digits are goal ids
/// whose rewards come from [`FourRoomsConfig::goal_rewards`].
pub const DEFAULT_LAYOUT: [&str; 13] = [
    "#############",
    "#S....#....0#",
    "#.....#.....#",
    "#...........#",
    "#.....#.....#",
    "#.....#.....#",
    "##.####.....#",
    "#.....###.###",
    "#.....#.....#",
    "#.....#.....#",
    "#...........#",
    "#1....#....2#",
    "#############",
];

/// Rotates goal rewards every `every_env_steps` environment steps. When
/// `phases` is given it lists the reward vector of each phase explicitly;
/// otherwise phase `p` is `goal_rewards` rotated right by `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalRelocation {
    pub every_env_steps: u64,
    #[serde(default)]
    pub phases: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourRoomsConfig {
    pub layout: Vec<String>,
    pub goal_rewards: Vec<f64>,
    pub action_noise: f64,
    pub step_penalty: f64,
    pub max_episode_len: usize,
    pub gamma: f64,
    /// Overrides the layout's `S` cell when set.
    pub start: Option<(usize, usize)>,
    pub goal_relocation: Option<GoalRelocation>,
}

impl Default for FourRoomsConfig {
    fn default() -> Self {
        Self {
            layout: DEFAULT_LAYOUT.iter().map(|s| s.to_string()).collect(),
            goal_rewards: vec![1.0, 1.0, 2.0],
            action_noise: 0.1,
            step_penalty: -0.002,
            max_episode_len: 100,
            gamma: 0.99,
            start: None,
            goal_relocation: None,
        }
    }
}

/// Parsed grid: which cells are open, and the state index of each.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    wall: Vec<bool>,
    state_of_cell: Vec<Option<usize>>,
    cell_of_state: Vec<(usize, usize)>,
    pub start: (usize, usize),
    /// (cell, goal id), ordered by id
    pub goals: Vec<((usize, usize), usize)>,
}

impl GridLayout {
    /// Parses ASCII art; `start` overrides the `S` cell.
    pub fn parse(layout: &[String], start_override: Option<(usize, usize)>) -> Result<Self> {
        let rows = layout.len();
        if rows == 0 {
            return Err(Error::Layout("empty layout".into()));
        }
        let cols = layout[0].chars().count();
        let mut wall = Vec::with_capacity(rows * cols);
        let mut start = None;
        let mut goals = Vec::new();
        for (r, line) in layout.iter().enumerate() {
            let chars: Vec<char> = line.chars().collect();
            if chars.len() != cols {
                return Err(Error::Layout(format!("row {r} has {} columns, expected {cols}", chars.len())));
            }
            for (c, ch) in chars.into_iter().enumerate() {
                match ch {
                    '#' => wall.push(true),
                    '.' | ' ' => wall.push(false),
                    'S' => {
                        if start.replace((r, c)).is_some() {
                            return Err(Error::Layout(format!("second start cell at ({r}, {c})")));
                        }
                        wall.push(false);
                    }
                    d if d.is_ascii_digit() => {
                        goals.push(((r, c), d.to_digit(10).unwrap() as usize));
                        wall.push(false);
                    }
                    other => {
                        return Err(Error::Layout(format!("unknown character {other:?} at ({r}, {c})")))
                    }
                }
            }
        }
        let start = match start_override {
            Some(cell) => {
                if cell.0 >= rows || cell.1 >= cols || wall[cell.0 * cols + cell.1] {
                    return Err(Error::Layout(format!("start cell {cell:?} is a wall or off the grid")));
                }
                cell
            }
            None => start.ok_or_else(|| Error::Layout("layout has no start cell 'S'".into()))?,
        };
        goals.sort_by_key(|g| g.1);
        for pair in goals.windows(2) {
            if pair[0].1 == pair[1].1 {
                return Err(Error::Layout(format!("goal id {} appears twice", pair[0].1)));
            }
        }
        let mut state_of_cell = vec![None; rows * cols];
        let mut cell_of_state = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if !wall[r * cols + c] {
                    state_of_cell[r * cols + c] = Some(cell_of_state.len());
                    cell_of_state.push((r, c));
                }
            }
        }
        Ok(Self { rows, cols, wall, state_of_cell, cell_of_state, start, goals })
    }

    pub fn n_states(&self) -> usize {
        self.cell_of_state.len()
    }

    pub fn is_wall(&self, cell: (usize, usize)) -> bool {
        self.wall[cell.0 * self.cols + cell.1]
    }

    pub fn state(&self, cell: (usize, usize)) -> Option<usize> {
        if cell.0 >= self.rows || cell.1 >= self.cols {
            return None;
        }
        self.state_of_cell[cell.0 * self.cols + cell.1]
    }

    pub fn cell(&self, state: usize) -> (usize, usize) {
        self.cell_of_state[state]
    }

    /// Cell reached by `action`; moves into walls or off-grid stay put.
    pub fn moved(&self, cell: (usize, usize), action: usize) -> (usize, usize) {
        let (dr, dc) = MOVES[action];
        let r = cell.0 as isize + dr;
        let c = cell.1 as isize + dc;
        if r < 0 || c < 0 || r as usize >= self.rows || c as usize >= self.cols {
            return cell;
        }
        let next = (r as usize, c as usize);
        if self.is_wall(next) {
            cell
        } else {
            next
        }
    }

    fn reachable_from(&self, cell: (usize, usize)) -> Vec<bool> {
        let mut seen = vec![false; self.n_states()];
        let mut queue = VecDeque::new();
        if let Some(s) = self.state(cell) {
            seen[s] = true;
            queue.push_back(cell);
        }
        while let Some(cur) = queue.pop_front() {
            for a in 0..4 {
                let next = self.moved(cur, a);
                let s = self.state(next).unwrap();
                if !seen[s] {
                    seen[s] = true;
                    queue.push_back(next);
                }
            }
        }
        seen
    }

    /// One-channel rendering per state: walls 1, agent 2, floor 0
    /// (row-major `rows × cols`).
    pub fn render(&self, state: usize) -> Vec<f64> {
        let mut img: Vec<f64> = self.wall.iter().map(|w| if *w { 1.0 } else { 0.0 }).collect();
        let (r, c) = self.cell(state);
        img[r * self.cols + c] = 2.0;
        img
    }
}

impl FourRoomsConfig {
    pub fn grid(&self) -> Result<GridLayout> {
        GridLayout::parse(&self.layout, self.start)
    }

    pub fn validate(&self) -> Result<GridLayout> {
        let grid = self.grid()?;
        if !(0.0..=1.0).contains(&self.action_noise) {
            return Err(Error::Config(format!("action_noise must lie in [0, 1], got {}", self.action_noise)));
        }
        if grid.goals.is_empty() {
            return Err(Error::Layout("layout has no goal cells".into()));
        }
        for (cell, id) in &grid.goals {
            if *id >= self.goal_rewards.len() {
                return Err(Error::Config(format!(
                    "goal {id} at {cell:?} has no entry in goal_rewards ({} given)",
                    self.goal_rewards.len()
                )));
            }
        }
        // every open cell must reach every goal (goal cells count as passable)
        for s in 0..grid.n_states() {
            let cell = grid.cell(s);
            let seen = grid.reachable_from(cell);
            for (goal, _) in &grid.goals {
                if !seen[grid.state(*goal).unwrap()] {
                    return Err(Error::Layout(format!("goal cell {goal:?} is unreachable from cell {cell:?}")));
                }
            }
        }
        if let Some(reloc) = &self.goal_relocation {
            if reloc.every_env_steps == 0 {
                return Err(Error::Config("goal_relocation.every_env_steps must be positive".into()));
            }
            if let Some(phases) = &reloc.phases {
                if phases.is_empty() || phases.iter().any(|p| p.len() != self.goal_rewards.len()) {
                    return Err(Error::Config(
                        "goal_relocation.phases must be non-empty reward vectors matching goal_rewards".into(),
                    ));
                }
            }
        }
        Ok(grid)
    }

    fn phase_rewards(&self) -> Vec<Vec<f64>> {
        match &self.goal_relocation {
            None => vec![self.goal_rewards.clone()],
            Some(GoalRelocation { phases: Some(p), .. }) => p.clone(),
            Some(_) => {
                let n = self.goal_rewards.len();
                (0..n)
                    .map(|p| (0..n).map(|i| self.goal_rewards[(i + n - p) % n]).collect())
                    .collect()
            }
        }
    }

    /// The environment including any goal-relocation phases.
    pub fn environment(&self) -> Result<Environment> {
        let grid = Arc::new(self.validate()?);
        let phases = self
            .phase_rewards()
            .iter()
            .map(|rewards| build_with_rewards(self, &grid, rewards).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let phase_len = self.goal_relocation.as_ref().map(|r| r.every_env_steps);
        Ok(Environment::with_phases(phases, phase_len, self.max_episode_len, Some(grid)))
    }
}

/// Builds the gridworld MDP: one open cell per state, four moves, walls
/// block, and with probability `action_noise` the executed move is drawn
/// uniformly over all four (so the intended move can still happen).
pub fn build_four_rooms(config: &FourRoomsConfig) -> Result<TabularMdp> {
    let grid = config.validate()?;
    build_with_rewards(config, &grid, &config.goal_rewards)
}

fn build_with_rewards(config: &FourRoomsConfig, grid: &GridLayout, goal_rewards: &[f64]) -> Result<TabularMdp> {
    let ns = grid.n_states();
    let na = 4;
    let mut goal_reward = vec![None; ns];
    for (cell, id) in &grid.goals {
        goal_reward[grid.state(*cell).unwrap()] = Some(goal_rewards[*id]);
    }
    let terminal: Vec<bool> = goal_reward.iter().map(Option::is_some).collect();
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na * ns];
    let noise = config.action_noise;
    for s in 0..ns {
        for a in 0..na {
            let base = (s * na + a) * ns;
            if terminal[s] {
                transition[base + s] = 1.0;
                continue;
            }
            let cell = grid.cell(s);
            for executed in 0..na {
                let p = noise / na as f64 + if executed == a { 1.0 - noise } else { 0.0 };
                if p == 0.0 {
                    continue;
                }
                let next = grid.state(grid.moved(cell, executed)).unwrap();
                transition[base + next] += p;
            }
            for next in 0..ns {
                reward[base + next] = goal_reward[next].unwrap_or(config.step_penalty);
            }
        }
    }
    let mut initial = vec![0.0; ns];
    initial[grid.state(grid.start).unwrap()] = 1.0;
    TabularMdp::new(ns, na, transition, reward, config.gamma, terminal, initial)
}

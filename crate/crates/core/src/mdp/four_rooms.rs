//! The classic four-room gridworld.
//!
//! An 11x11 grid split into four rooms by interior walls with one doorway
//! per wall. The agent starts in the top-left corner, the goal sits in the
//! bottom-right corner and is terminal. Actions are the four compass
//! directions; moves are executed noisily and bumping a wall (or the grid
//! boundary) leaves the agent in place.

use ndarray::{Array2, Array3};

use super::{MdpError, TabularMdp};

/// Row-major map of the standard layout. `#` wall, `S` start, `G` goal.
pub const FOUR_ROOMS_GRID: &str = "\
S....#.....
.....#.....
...........
.....#.....
.....#.....
#.####.....
.....###.##
.....#.....
.....#.....
...........
.....#....G";

/// Up, down, left, right as `(d_row, d_col)`.
const DIRECTIONS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Mapping between grid coordinates and MDP state indices.
///
/// Free cells are numbered row-major, skipping walls.
#[derive(Debug, Clone)]
pub struct FourRoomsLayout {
    rows: usize,
    cols: usize,
    cell_state: Vec<Option<usize>>,
    coords: Vec<(usize, usize)>,
    start: usize,
    goal: usize,
}

impl FourRoomsLayout {
    pub fn standard() -> Self {
        let lines: Vec<&str> = FOUR_ROOMS_GRID.lines().collect();
        let rows = lines.len();
        let cols = lines[0].len();
        let mut cell_state = vec![None; rows * cols];
        let mut coords = Vec::new();
        let (mut start, mut goal) = (None, None);
        for (r, line) in lines.iter().enumerate() {
            debug_assert_eq!(line.len(), cols);
            for (c, ch) in line.chars().enumerate() {
                if ch == '#' {
                    continue;
                }
                let state = coords.len();
                cell_state[r * cols + c] = Some(state);
                coords.push((r, c));
                match ch {
                    'S' => start = Some(state),
                    'G' => goal = Some(state),
                    _ => {}
                }
            }
        }
        Self {
            rows,
            cols,
            cell_state,
            coords,
            start: start.expect("grid has a start cell"),
            goal: goal.expect("grid has a goal cell"),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_states(&self) -> usize {
        self.coords.len()
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    pub fn coords_of(&self, state: usize) -> (usize, usize) {
        self.coords[state]
    }

    pub fn state_at(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.rows || col >= self.cols {
            return None;
        }
        self.cell_state[row * self.cols + col]
    }

    /// Destination of a move from `state` in compass direction `dir`
    /// (0 up, 1 down, 2 left, 3 right); wall and boundary bumps stay put.
    fn step(&self, state: usize, dir: usize) -> usize {
        let (r, c) = self.coords[state];
        let (dr, dc) = DIRECTIONS[dir];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 {
            return state;
        }
        self.state_at(nr as usize, nc as usize).unwrap_or(state)
    }
}

/// Builds the four-room gridworld.
///
/// `slip_prob` is the probability the intended move fails; a failed move
/// goes in one of the three other directions uniformly. Entering the goal
/// pays reward 1, so `reward(s, a)` is the probability the move lands on
/// the goal. The goal is terminal (self-loop, reward 0).
pub fn build_four_rooms(slip_prob: f64, gamma: f64) -> Result<TabularMdp, MdpError> {
    if !(0.0..=1.0).contains(&slip_prob) {
        return Err(MdpError::SlipRange(slip_prob));
    }
    let layout = FourRoomsLayout::standard();
    let n = layout.num_states();
    let num_actions = DIRECTIONS.len();
    let goal = layout.goal();

    let mut transition = Array3::zeros((n, num_actions, n));
    let mut reward = Array2::zeros((n, num_actions));
    for s in 0..n {
        for a in 0..num_actions {
            if s == goal {
                transition[[s, a, s]] = 1.0;
                continue;
            }
            for dir in 0..num_actions {
                let p = if dir == a { 1.0 - slip_prob } else { slip_prob / 3.0 };
                let next = layout.step(s, dir);
                transition[[s, a, next]] += p;
                if next == goal {
                    reward[[s, a]] += p;
                }
            }
        }
    }
    TabularMdp::new(transition, reward, gamma, layout.start(), &[goal])
}

//! Static grid world: cells, robot actions, the obstacle map and its
//! free-cell roadmap, map generators, and the text map format.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A grid coordinate. `row` grows downward, `col` grows to the right.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    /// L1 distance between two cells.
    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    /// True if the cells are identical or 4-adjacent.
    pub fn is_adjacent_or_equal(self, other: Cell) -> bool {
        self.manhattan(other) <= 1
    }

    /// Apply a (row, col) offset; `None` when the result leaves `h x w`.
    pub fn offset(self, dr: isize, dc: isize, h: usize, w: usize) -> Option<Cell> {
        let r = self.row as isize + dr;
        let c = self.col as isize + dc;
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            None
        } else {
            Some(Cell::new(r as usize, c as usize))
        }
    }
}

impl fmt::Debug for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// The five robot actions. The order is load-bearing: it is the
/// tie-breaking order for deterministic planning and the index order of
/// the value network's output layer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Idle,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Idle,
    ];

    /// The four movement actions, in tie-breaking order.
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
            Action::Idle => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    /// (row, col) displacement of the action.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Idle => (0, 0),
        }
    }

    /// The action that moves `from` to `to`, if the cells are identical
    /// (Idle) or 4-adjacent.
    pub fn between(from: Cell, to: Cell) -> Option<Action> {
        let dr = to.row as isize - from.row as isize;
        let dc = to.col as isize - from.col as isize;
        match (dr, dc) {
            (-1, 0) => Some(Action::Up),
            (1, 0) => Some(Action::Down),
            (0, -1) => Some(Action::Left),
            (0, 1) => Some(Action::Right),
            (0, 0) => Some(Action::Idle),
            _ => None,
        }
    }
}

/// Result of attempting a robot move.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum MoveOutcome {
    /// The robot is at the target cell (Idle counts as a trivial move).
    Moved,
    /// Target cell holds a static obstacle; robot did not move.
    BlockedStatic,
    /// Target cell holds a dynamic obstacle or another robot; robot did not move.
    BlockedDynamic,
    /// Target cell is outside the grid; robot did not move.
    OffGrid,
}

impl MoveOutcome {
    pub fn is_blocked(self) -> bool {
        !matches!(self, MoveOutcome::Moved)
    }
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("obstacle cell {0:?} is out of bounds for a {1}x{2} map")]
    OutOfBounds(Cell, usize, usize),
    #[error("map dimensions must be positive, got {0}x{1}")]
    EmptyDimensions(usize, usize),
    #[error("static density {0} is outside [0, 1)")]
    BadDensity(f64),
    #[error("free map requires density 0, got {0}")]
    FreeMapDensity(f64),
    #[error("cannot place {target} obstacles while keeping the free space connected (placed {placed})")]
    DensityTooHigh { target: usize, placed: usize },
    #[error("map header must be `H W`, got {0:?}")]
    BadHeader(String),
    #[error("map row {0} has length {1}, expected {2}")]
    BadRowLength(usize, usize, usize),
    #[error("map has {0} rows, expected {1}")]
    BadRowCount(usize, usize),
    #[error("unexpected character {0:?} in map row {1}")]
    BadChar(char, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Static world map: dimensions plus the obstacle/free partition. Roadmap
/// edges are implicit: free cells are connected to their 4-neighbor free
/// cells.
#[derive(Clone, PartialEq, Eq)]
pub struct GridMap {
    height: usize,
    width: usize,
    blocked: Vec<bool>,
    n_static: usize,
}

impl GridMap {
    /// Build a map from an explicit obstacle set. Rejects out-of-bounds
    /// cells, reporting the offending cell.
    pub fn build(
        height: usize,
        width: usize,
        static_obstacles: impl IntoIterator<Item = Cell>,
    ) -> Result<GridMap, MapError> {
        if height == 0 || width == 0 {
            return Err(MapError::EmptyDimensions(height, width));
        }
        let mut blocked = vec![false; height * width];
        let mut n_static = 0;
        for cell in static_obstacles {
            if cell.row >= height || cell.col >= width {
                return Err(MapError::OutOfBounds(cell, height, width));
            }
            let idx = cell.row * width + cell.col;
            if !blocked[idx] {
                blocked[idx] = true;
                n_static += 1;
            }
        }
        Ok(GridMap {
            height,
            width,
            blocked,
            n_static,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.row < self.height && cell.col < self.width
    }

    pub fn idx(&self, cell: Cell) -> usize {
        cell.row * self.width + cell.col
    }

    /// True when the cell holds a static obstacle. Out-of-bounds cells are
    /// treated as static obstacles so boundary handling is uniform.
    pub fn is_static(&self, cell: Cell) -> bool {
        !self.in_bounds(cell) || self.blocked[self.idx(cell)]
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        self.in_bounds(cell) && !self.blocked[self.idx(cell)]
    }

    pub fn n_static(&self) -> usize {
        self.n_static
    }

    pub fn n_free(&self) -> usize {
        self.height * self.width - self.n_static
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| Cell::new(r, c)))
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells().filter(move |&c| self.is_free(c))
    }

    pub fn static_obstacles(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells().filter(move |&c| self.is_static(c))
    }

    /// In-bounds 4-neighbors, free or not.
    pub fn neighbors4(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        Action::MOVES.iter().filter_map(move |a| {
            let (dr, dc) = a.delta();
            cell.offset(dr, dc, self.height, self.width)
        })
    }

    /// Free 4-neighbors: the roadmap edges incident to `cell`.
    pub fn free_neighbors(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        self.neighbors4(cell).filter(move |&c| self.is_free(c))
    }

    /// Number of roadmap edges (undirected 4-adjacencies between free cells).
    pub fn edge_count(&self) -> usize {
        let mut n = 0;
        for cell in self.free_cells() {
            if let Some(right) = cell.offset(0, 1, self.height, self.width) {
                if self.is_free(right) {
                    n += 1;
                }
            }
            if let Some(down) = cell.offset(1, 0, self.height, self.width) {
                if self.is_free(down) {
                    n += 1;
                }
            }
        }
        n
    }

    /// True when every free cell can reach every other free cell through
    /// 4-adjacent free cells. Vacuously true with no free cells.
    pub fn free_space_connected(&self) -> bool {
        let start = match self.free_cells().next() {
            Some(c) => c,
            None => return true,
        };
        let mut seen = vec![false; self.height * self.width];
        let mut queue = VecDeque::new();
        seen[self.idx(start)] = true;
        queue.push_back(start);
        let mut count = 1;
        while let Some(cur) = queue.pop_front() {
            for next in self.free_neighbors(cur) {
                let i = self.idx(next);
                if !seen[i] {
                    seen[i] = true;
                    count += 1;
                    queue.push_back(next);
                }
            }
        }
        count == self.n_free()
    }

    /// Serialize to the text map format: an `H W` header line, then `H`
    /// rows of `.` (free) / `#` (static obstacle).
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * (self.height + 1) + 8);
        out.push_str(&format!("{} {}\n", self.height, self.width));
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(if self.blocked[r * self.width + c] {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    /// Parse the text map format produced by [`GridMap::to_text`].
    pub fn from_text(text: &str) -> Result<GridMap, MapError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let mut parts = header.split_whitespace();
        let h: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MapError::BadHeader(header.to_string()))?;
        let w: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MapError::BadHeader(header.to_string()))?;
        if parts.next().is_some() {
            return Err(MapError::BadHeader(header.to_string()));
        }
        if h == 0 || w == 0 {
            return Err(MapError::EmptyDimensions(h, w));
        }
        let mut blocked = vec![false; h * w];
        let mut n_static = 0;
        let mut rows = 0;
        for (r, line) in lines.enumerate() {
            if r >= h {
                return Err(MapError::BadRowCount(r + 1, h));
            }
            let chars: Vec<char> = line.chars().collect();
            if chars.len() != w {
                return Err(MapError::BadRowLength(r, chars.len(), w));
            }
            for (c, ch) in chars.into_iter().enumerate() {
                match ch {
                    '.' => {}
                    '#' => {
                        blocked[r * w + c] = true;
                        n_static += 1;
                    }
                    other => return Err(MapError::BadChar(other, r)),
                }
            }
            rows += 1;
        }
        if rows != h {
            return Err(MapError::BadRowCount(rows, h));
        }
        Ok(GridMap {
            height: h,
            width: w,
            blocked,
            n_static,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MapError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GridMap, MapError> {
        let text = std::fs::read_to_string(path)?;
        GridMap::from_text(&text)
    }
}

impl fmt::Debug for GridMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "GridMap({}x{}, {} static)",
            self.height, self.width, self.n_static
        )
    }
}

/// The three map families used by the benchmarks.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// Warehouse-like shelf blocks separated by one-cell aisles.
    Regular,
    /// Uniformly scattered obstacles with connected free space.
    Random,
    /// No static obstacles at all.
    Free,
}

impl std::str::FromStr for MapKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(MapKind::Regular),
            "random" => Ok(MapKind::Random),
            "free" => Ok(MapKind::Free),
            other => Err(format!("unknown map kind {other:?} (regular|random|free)")),
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MapKind::Regular => "regular",
            MapKind::Random => "random",
            MapKind::Free => "free",
        };
        f.write_str(s)
    }
}

/// Generate a map of the given kind. Deterministic for a fixed seed; the
/// achieved obstacle count is within one cell of `round(density * H * W)`
/// and the free space is kept 4-connected so that any start/goal pair of
/// free cells is solvable.
pub fn generate_map(
    kind: MapKind,
    height: usize,
    width: usize,
    static_density: f64,
    seed: u64,
) -> Result<GridMap, MapError> {
    if height == 0 || width == 0 {
        return Err(MapError::EmptyDimensions(height, width));
    }
    if !(0.0..1.0).contains(&static_density) {
        return Err(MapError::BadDensity(static_density));
    }
    match kind {
        MapKind::Free => {
            if static_density != 0.0 {
                return Err(MapError::FreeMapDensity(static_density));
            }
            GridMap::build(height, width, std::iter::empty())
        }
        MapKind::Random => generate_random_map(height, width, static_density, seed),
        MapKind::Regular => generate_regular_map(height, width, static_density),
    }
}

fn generate_random_map(
    height: usize,
    width: usize,
    density: f64,
    seed: u64,
) -> Result<GridMap, MapError> {
    let target = (density * (height * width) as f64).round() as usize;
    let mut map = GridMap::build(height, width, std::iter::empty())?;
    if target == 0 {
        return Ok(map);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<Cell> = map.cells().collect();
    order.shuffle(&mut rng);
    let mut placed = 0;
    for cell in order {
        if placed == target {
            break;
        }
        let idx = map.idx(cell);
        map.blocked[idx] = true;
        map.n_static += 1;
        if map.free_space_connected() {
            placed += 1;
        } else {
            map.blocked[idx] = false;
            map.n_static -= 1;
        }
    }
    if placed < target {
        return Err(MapError::DensityTooHigh { target, placed });
    }
    Ok(map)
}

/// Shelf-block pattern: obstacle rectangles of `bh x bw` cells separated by
/// one-cell aisles on every side. Aisle lines sit at rows where
/// `r % (bh+1) == 0` and columns where `c % (bw+1) == 0`, so the aisles form
/// a connected corridor grid and every free cell touches it.
fn generate_regular_map(height: usize, width: usize, density: f64) -> Result<GridMap, MapError> {
    let target = (density * (height * width) as f64).round() as usize;
    if target == 0 {
        return GridMap::build(height, width, std::iter::empty());
    }
    // Candidate shelf shapes; pick the sparsest pattern that can reach the
    // target, then trim obstacles off the tail to hit the exact count.
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for bh in 1..=3usize {
        for bw in 2..=6usize {
            candidates.push((bh, bw));
        }
    }
    candidates.sort_by(|a, b| {
        let da = pattern_density(*a);
        let db = pattern_density(*b);
        da.partial_cmp(&db).unwrap()
    });

    for (bh, bw) in candidates {
        let cells = shelf_cells(height, width, bh, bw);
        if cells.len() >= target {
            let map = GridMap::build(height, width, cells.into_iter().take(target))?;
            debug_assert!(map.free_space_connected());
            return Ok(map);
        }
    }
    let best = shelf_cells(height, width, 3, 6).len();
    Err(MapError::DensityTooHigh {
        target,
        placed: best,
    })
}

fn pattern_density((bh, bw): (usize, usize)) -> f64 {
    (bh * bw) as f64 / ((bh + 1) * (bw + 1)) as f64
}

fn shelf_cells(height: usize, width: usize, bh: usize, bw: usize) -> Vec<Cell> {
    let mut cells = Vec::new();
    for r in 0..height {
        if r % (bh + 1) == 0 {
            continue;
        }
        for c in 0..width {
            if c % (bw + 1) == 0 {
                continue;
            }
            cells.push(Cell::new(r, c));
        }
    }
    cells
}

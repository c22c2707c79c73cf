//! Global guidance: shortest-path search over the static map and the
//! consumed-prefix accounting that drives the guidance reward.
//!
//! The guidance is computed once per episode and never re-planned. As the
//! robot (re)joins it, the prefix up to the joined cell is removed so each
//! guidance cell can pay out at most once.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{Action, Cell, GridMap};

#[derive(Debug, Error)]
pub enum PathError {
    #[error("no path from {start:?} to {goal:?}")]
    NoPath { start: Cell, goal: Cell },
}

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("cell {0:?} is not an active guidance cell")]
    NotActive(Cell),
    #[error("guidance cells must be distinct, free, and 4-adjacent in order (violated at index {0})")]
    BadCells(usize),
}

/// Tie-breaking mode for equal-cost search nodes.
#[derive(Clone, Copy, Debug)]
pub enum TieBreak {
    /// Prefer lower f, then higher g, then the Up/Down/Left/Right expansion
    /// order. Produces one unique path per query.
    Deterministic,
    /// Prefer lower f, then higher g, then a seeded random draw, matching
    /// the "any shortest path" reading.
    Seeded(u64),
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct HeapEntry {
    f: usize,
    g: usize,
    order: u64,
    cell: Cell,
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap pops the greatest entry; "greatest" here means lowest
        // f, then highest g, then lowest order token.
        other
            .f
            .cmp(&self.f)
            .then(self.g.cmp(&other.g))
            .then(other.order.cmp(&self.order))
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* over the free-cell roadmap with the Manhattan heuristic. `blocked`
/// cells are excluded in addition to static obstacles. Returns the full
/// cell sequence including start and goal.
pub fn astar(
    map: &GridMap,
    start: Cell,
    goal: Cell,
    blocked: &HashSet<Cell>,
) -> Result<Vec<Cell>, PathError> {
    astar_with(map, start, goal, blocked, TieBreak::Deterministic)
}

pub fn astar_with(
    map: &GridMap,
    start: Cell,
    goal: Cell,
    blocked: &HashSet<Cell>,
    tie: TieBreak,
) -> Result<Vec<Cell>, PathError> {
    let no_path = || PathError::NoPath { start, goal };
    if !map.is_free(start) || !map.is_free(goal) || blocked.contains(&start) || blocked.contains(&goal)
    {
        return Err(no_path());
    }
    if start == goal {
        return Ok(vec![start]);
    }

    let n = map.height() * map.width();
    let mut g_score = vec![usize::MAX; n];
    let mut came_from: Vec<Option<Cell>> = vec![None; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut counter: u64 = 0;
    let mut rng = match tie {
        TieBreak::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        TieBreak::Deterministic => None,
    };

    g_score[map.idx(start)] = 0;
    heap.push(HeapEntry {
        f: start.manhattan(goal),
        g: 0,
        order: 0,
        cell: start,
    });

    while let Some(entry) = heap.pop() {
        let ci = map.idx(entry.cell);
        if closed[ci] || entry.g != g_score[ci] {
            continue;
        }
        if entry.cell == goal {
            let mut path = vec![goal];
            let mut cur = goal;
            while let Some(prev) = came_from[map.idx(cur)] {
                path.push(prev);
                cur = prev;
            }
            path.reverse();
            return Ok(path);
        }
        closed[ci] = true;

        for action in Action::MOVES {
            let (dr, dc) = action.delta();
            let next = match entry.cell.offset(dr, dc, map.height(), map.width()) {
                Some(c) => c,
                None => continue,
            };
            if !map.is_free(next) || blocked.contains(&next) {
                continue;
            }
            let ni = map.idx(next);
            if closed[ni] {
                continue;
            }
            let tentative = entry.g + 1;
            if tentative < g_score[ni] {
                g_score[ni] = tentative;
                came_from[ni] = Some(entry.cell);
                counter += 1;
                let order = match rng.as_mut() {
                    Some(r) => r.gen::<u64>(),
                    None => counter,
                };
                heap.push(HeapEntry {
                    f: tentative + next.manhattan(goal),
                    g: tentative,
                    order,
                    cell: next,
                });
            }
        }
    }
    Err(no_path())
}

/// The global guidance path with consumed-prefix accounting.
///
/// `cells[0]` is the start, the last cell is the goal; indices below
/// `removed_upto` have been consumed and no longer count as guidance.
#[derive(Clone, Debug)]
pub struct GuidancePath {
    cells: Vec<Cell>,
    removed_upto: usize,
    index_of: HashMap<Cell, usize>,
}

impl GuidancePath {
    /// Compute the guidance for a start/goal pair on the static map.
    pub fn compute(map: &GridMap, start: Cell, goal: Cell) -> Result<GuidancePath, PathError> {
        let cells = astar(map, start, goal, &HashSet::new())?;
        Ok(GuidancePath::from_path(cells))
    }

    /// Same as [`GuidancePath::compute`] but with randomized tie-breaking.
    pub fn compute_with(
        map: &GridMap,
        start: Cell,
        goal: Cell,
        tie: TieBreak,
    ) -> Result<GuidancePath, PathError> {
        let cells = astar_with(map, start, goal, &HashSet::new(), tie)?;
        Ok(GuidancePath::from_path(cells))
    }

    /// Wrap an explicit cell sequence. Consecutive cells must be 4-adjacent
    /// and all cells distinct; used for scripted scenarios and trace replay.
    pub fn from_cells(cells: Vec<Cell>) -> Result<GuidancePath, GuidanceError> {
        if cells.is_empty() {
            return Err(GuidanceError::BadCells(0));
        }
        for i in 1..cells.len() {
            if cells[i - 1].manhattan(cells[i]) != 1 {
                return Err(GuidanceError::BadCells(i));
            }
        }
        let mut seen = HashSet::new();
        for (i, c) in cells.iter().enumerate() {
            if !seen.insert(*c) {
                return Err(GuidanceError::BadCells(i));
            }
        }
        Ok(GuidancePath::from_path(cells))
    }

    fn from_path(cells: Vec<Cell>) -> GuidancePath {
        let index_of = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        GuidancePath {
            cells,
            removed_upto: 0,
            index_of,
        }
    }

    /// Total path length in cells (including consumed ones).
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn start(&self) -> Cell {
        self.cells[0]
    }

    pub fn goal(&self) -> Cell {
        *self.cells.last().unwrap()
    }

    /// Index of the first still-active cell.
    pub fn removed_upto(&self) -> usize {
        self.removed_upto
    }

    pub fn active_cells(&self) -> &[Cell] {
        &self.cells[self.removed_upto..]
    }

    /// Index of `cell` if it is an active guidance cell.
    pub fn active_index_of(&self, cell: Cell) -> Option<usize> {
        match self.index_of.get(&cell) {
            Some(&i) if i >= self.removed_upto => Some(i),
            _ => None,
        }
    }

    pub fn is_active(&self, cell: Cell) -> bool {
        self.active_index_of(cell).is_some()
    }

    /// Consume the prefix through `reached`, which must be an active
    /// guidance cell. Returns the number of newly removed cells: the count
    /// from just past the previous consumption point through `reached`
    /// inclusive.
    pub fn remove_through(&mut self, reached: Cell) -> Result<usize, GuidanceError> {
        let idx = self
            .active_index_of(reached)
            .ok_or(GuidanceError::NotActive(reached))?;
        let newly_removed = idx + 1 - self.removed_upto;
        self.removed_upto = idx + 1;
        Ok(newly_removed)
    }

    /// Active guidance cells inside the `h_l x w_l` window centered at
    /// `center`. May be empty.
    pub fn local_segment(&self, center: Cell, h_l: usize, w_l: usize) -> Vec<Cell> {
        self.active_cells()
            .iter()
            .copied()
            .filter(|c| in_window(*c, center, h_l, w_l))
            .collect()
    }

    /// Cheap emptiness test for the local segment.
    pub fn has_active_in_window(&self, center: Cell, h_l: usize, w_l: usize) -> bool {
        self.active_cells()
            .iter()
            .any(|c| in_window(*c, center, h_l, w_l))
    }
}

fn in_window(cell: Cell, center: Cell, h_l: usize, w_l: usize) -> bool {
    let dr = cell.row as isize - center.row as isize;
    let dc = cell.col as isize - center.col as isize;
    dr.abs() <= (h_l / 2) as isize && dc.abs() <= (w_l / 2) as isize
}

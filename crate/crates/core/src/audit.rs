//! Conflict auditing over planned paths and executed traces: vertex
//! collisions, swap (edge) conflicts, and teleports.

use serde::{Deserialize, Serialize};

use crate::grid::Cell;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictReport {
    /// (tick, cell, occupant a, occupant b)
    pub vertex: Vec<(usize, Cell, usize, usize)>,
    /// (tick, occupant a, occupant b) where a and b exchanged cells over
    /// tick -> tick+1.
    pub swaps: Vec<(usize, usize, usize)>,
    /// (tick, occupant) whose displacement had L1 norm > 1.
    pub jumps: Vec<(usize, usize)>,
}

impl ConflictReport {
    pub fn is_clean(&self) -> bool {
        self.vertex.is_empty() && self.swaps.is_empty() && self.jumps.is_empty()
    }

    pub fn total(&self) -> usize {
        self.vertex.len() + self.swaps.len() + self.jumps.len()
    }
}

/// Audit per-occupant paths under removal semantics: occupant `i` is
/// present at tick `t` iff `t < paths[i].len()`; after its final cell
/// (arrival) it stops occupying space.
pub fn audit_paths(paths: &[Vec<Cell>]) -> ConflictReport {
    let mut report = ConflictReport::default();
    let max_t = paths.iter().map(|p| p.len()).max().unwrap_or(0);
    for t in 0..max_t {
        for i in 0..paths.len() {
            let a_now = match paths[i].get(t) {
                Some(&c) => c,
                None => continue,
            };
            if let Some(&a_next) = paths[i].get(t + 1) {
                if a_now.manhattan(a_next) > 1 {
                    report.jumps.push((t, i));
                }
            }
            for j in i + 1..paths.len() {
                let b_now = match paths[j].get(t) {
                    Some(&c) => c,
                    None => continue,
                };
                if a_now == b_now {
                    report.vertex.push((t, a_now, i, j));
                }
                if let (Some(&a_next), Some(&b_next)) = (paths[i].get(t + 1), paths[j].get(t + 1))
                {
                    if a_next == b_now && b_next == a_now {
                        report.swaps.push((t, i, j));
                    }
                }
            }
        }
    }
    report
}

/// One tick of an execution trace: the positions of every occupant still
/// present. Arrived robots stop appearing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceTick {
    pub tick: usize,
    pub positions: Vec<(usize, Cell)>,
}

/// Audit an executed trace tick by tick.
pub fn audit_trace(trace: &[TraceTick]) -> ConflictReport {
    let mut report = ConflictReport::default();
    for (w, window) in trace.windows(2).enumerate() {
        let (now, next) = (&window[0], &window[1]);
        check_tick(now, &mut report);
        for &(id_a, a_now) in &now.positions {
            let a_next = next.positions.iter().find(|(id, _)| *id == id_a);
            if let Some(&(_, a_next)) = a_next {
                if a_now.manhattan(a_next) > 1 {
                    report.jumps.push((w, id_a));
                }
                for &(id_b, b_now) in &now.positions {
                    if id_b <= id_a {
                        continue;
                    }
                    if let Some(&(_, b_next)) =
                        next.positions.iter().find(|(id, _)| *id == id_b)
                    {
                        if a_next == b_now && b_next == a_now {
                            report.swaps.push((w, id_a, id_b));
                        }
                    }
                }
            }
        }
    }
    if let Some(last) = trace.last() {
        check_tick(last, &mut report);
    }
    report
}

fn check_tick(tick: &TraceTick, report: &mut ConflictReport) {
    for (i, &(id_a, a)) in tick.positions.iter().enumerate() {
        for &(id_b, b) in &tick.positions[i + 1..] {
            if a == b {
                report.vertex.push((tick.tick, a, id_a, id_b));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_disjoint_paths() {
        let paths = vec![
            vec![Cell::new(0, 0), Cell::new(0, 1), Cell::new(0, 2)],
            vec![Cell::new(2, 0), Cell::new(2, 1)],
        ];
        assert!(audit_paths(&paths).is_clean());
    }

    #[test]
    fn vertex_conflict_found() {
        let paths = vec![
            vec![Cell::new(0, 0), Cell::new(0, 1)],
            vec![Cell::new(0, 2), Cell::new(0, 1)],
        ];
        let report = audit_paths(&paths);
        assert_eq!(report.vertex.len(), 1);
        assert_eq!(report.vertex[0], (1, Cell::new(0, 1), 0, 1));
    }

    #[test]
    fn swap_conflict_found() {
        let paths = vec![
            vec![Cell::new(0, 0), Cell::new(0, 1)],
            vec![Cell::new(0, 1), Cell::new(0, 0)],
        ];
        let report = audit_paths(&paths);
        assert_eq!(report.swaps.len(), 1);
    }

    #[test]
    fn removal_frees_the_goal_cell() {
        // Occupant 0 arrives at (0,1) at tick 1 and is removed; occupant 1
        // enters (0,1) at tick 2 without conflict.
        let paths = vec![
            vec![Cell::new(0, 0), Cell::new(0, 1)],
            vec![Cell::new(0, 2), Cell::new(0, 2), Cell::new(0, 1)],
        ];
        let report = audit_paths(&paths);
        // At tick 1 occupant 0 is at (0,1) and occupant 1 still at (0,2).
        assert!(report.is_clean(), "{report:?}");
    }

    #[test]
    fn teleport_flagged() {
        let paths = vec![vec![Cell::new(0, 0), Cell::new(3, 3)]];
        let report = audit_paths(&paths);
        assert_eq!(report.jumps.len(), 1);
    }

    #[test]
    fn trace_audit_matches_path_audit() {
        let paths = vec![
            vec![Cell::new(0, 0), Cell::new(0, 1)],
            vec![Cell::new(0, 1), Cell::new(0, 0)],
        ];
        let trace: Vec<TraceTick> = (0..2)
            .map(|t| TraceTick {
                tick: t,
                positions: paths
                    .iter()
                    .enumerate()
                    .filter_map(|(i, p)| p.get(t).map(|&c| (i, c)))
                    .collect(),
            })
            .collect();
        let report = audit_trace(&trace);
        assert_eq!(report.swaps.len(), 1);
    }
}

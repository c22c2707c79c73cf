//! Local field-of-view encoding: the 4-channel binary observation frame
//! and the fixed-length frame stack fed to the value network.

use std::sync::Arc;

use thiserror::Error;

use crate::guidance::GuidancePath;
use crate::world::WorldState;

/// Channel indices of an [`ObservationFrame`]. Channels 0-2 are a one-hot
/// partition of each pixel; channel 3 marks the active local guidance
/// segment independently.
pub const CH_STATIC: usize = 0;
pub const CH_DYNAMIC: usize = 1;
pub const CH_FREE: usize = 2;
pub const CH_GUIDE: usize = 3;
pub const CHANNELS: usize = 4;

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("FOV dimensions must be odd, got {0}x{1}")]
    EvenFov(usize, usize),
    #[error("unknown robot id {0}")]
    UnknownRobot(usize),
    #[error("frame byte length {0} does not match {1}x{2}x4")]
    BadLength(usize, usize, usize),
}

/// One binary observation frame, `h x w x 4`, centered on the observing
/// robot. Storage is row-major in (row, col, channel) order, which is also
/// the documented flat serialization order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ObservationFrame {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl ObservationFrame {
    pub fn zeros(h: usize, w: usize) -> Self {
        ObservationFrame {
            h,
            w,
            data: vec![0; h * w * CHANNELS],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    fn idx(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.w + c) * CHANNELS + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> u8 {
        self.data[self.idx(r, c, ch)]
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize, ch: usize) {
        let i = self.idx(r, c, ch);
        self.data[i] = 1;
    }

    /// Flat (row, col, channel) byte view.
    pub fn as_flat(&self) -> &[u8] {
        &self.data
    }

    /// Rebuild a frame from its flat (row, col, channel) byte form.
    pub fn from_flat(h: usize, w: usize, bytes: Vec<u8>) -> Result<Self, ObservationError> {
        if bytes.len() != h * w * CHANNELS {
            return Err(ObservationError::BadLength(bytes.len(), h, w));
        }
        Ok(ObservationFrame { h, w, data: bytes })
    }

    /// True when channels 0-2 are mutually exclusive and exhaustive at
    /// every pixel.
    pub fn is_one_hot(&self) -> bool {
        for r in 0..self.h {
            for c in 0..self.w {
                let s = self.get(r, c, CH_STATIC) + self.get(r, c, CH_DYNAMIC)
                    + self.get(r, c, CH_FREE);
                if s != 1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Extract the robot's local observation. The center pixel corresponds to
/// the robot's own cell (encoded as free). Off-grid padding and static
/// obstacles go to channel 0, dynamic obstacles and other active robots to
/// channel 1, everything else to channel 2. Channel 3 carries the active
/// local guidance segment; consumed guidance cells appear as plain free
/// cells.
pub fn observe(
    world: &WorldState,
    robot_id: usize,
    guidance: &GuidancePath,
    h_l: usize,
    w_l: usize,
) -> Result<ObservationFrame, ObservationError> {
    if h_l % 2 == 0 || w_l % 2 == 0 {
        return Err(ObservationError::EvenFov(h_l, w_l));
    }
    let robot = world
        .robots()
        .get(robot_id)
        .ok_or(ObservationError::UnknownRobot(robot_id))?;
    let center = robot.position;
    let map = world.map();
    let mut frame = ObservationFrame::zeros(h_l, w_l);
    let half_h = (h_l / 2) as isize;
    let half_w = (w_l / 2) as isize;

    for fr in 0..h_l {
        for fc in 0..w_l {
            let dr = fr as isize - half_h;
            let dc = fc as isize - half_w;
            let cell = center.offset(dr, dc, map.height(), map.width());
            match cell {
                None => frame.set(fr, fc, CH_STATIC),
                Some(cell) if map.is_static(cell) => frame.set(fr, fc, CH_STATIC),
                Some(cell) => {
                    let other_occupant = world.is_occupied(cell) && cell != center;
                    if other_occupant {
                        frame.set(fr, fc, CH_DYNAMIC);
                    } else {
                        frame.set(fr, fc, CH_FREE);
                    }
                }
            }
        }
    }

    for cell in guidance.local_segment(center, h_l, w_l) {
        let fr = (cell.row as isize - center.row as isize + half_h) as usize;
        let fc = (cell.col as isize - center.col as isize + half_w) as usize;
        frame.set(fr, fc, CH_GUIDE);
    }
    Ok(frame)
}

/// The value network's input: the newest `n_t` frames, oldest first.
/// Slots before the episode's first observation hold all-zero frames.
#[derive(Clone, Debug)]
pub struct InputSequence {
    frames: Vec<Arc<ObservationFrame>>,
}

impl InputSequence {
    /// A fresh sequence of `n_t` all-zero frames.
    pub fn empty(n_t: usize, h: usize, w: usize) -> Self {
        assert!(n_t >= 1);
        let zero = Arc::new(ObservationFrame::zeros(h, w));
        InputSequence {
            frames: vec![zero; n_t],
        }
    }

    /// Drop the oldest frame and append `frame` as the newest.
    pub fn push(&self, frame: ObservationFrame) -> InputSequence {
        let mut frames = self.frames[1..].to_vec();
        frames.push(Arc::new(frame));
        InputSequence { frames }
    }

    pub fn n_t(&self) -> usize {
        self.frames.len()
    }

    /// Frames oldest first.
    pub fn frames(&self) -> impl Iterator<Item = &ObservationFrame> {
        self.frames.iter().map(|f| f.as_ref())
    }

    pub fn newest(&self) -> &ObservationFrame {
        self.frames.last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Cell, GridMap};
    use crate::world::{scripted_obstacle, WorldState};

    fn world_with_robot(h: usize, w: usize, pos: Cell, goal: Cell) -> WorldState {
        let map = GridMap::build(h, w, std::iter::empty()).unwrap();
        let mut world = WorldState::new(map);
        world.add_robot(pos, goal).unwrap();
        world
    }

    fn trivial_guidance(cell: Cell) -> GuidancePath {
        let mut g = GuidancePath::from_cells(vec![cell]).unwrap();
        g.remove_through(cell).unwrap();
        g
    }

    #[test]
    fn empty_map_is_all_free() {
        let world = world_with_robot(21, 21, Cell::new(10, 10), Cell::new(20, 20));
        // Guidance fully consumed: nothing in channel 3.
        let g = trivial_guidance(Cell::new(10, 10));
        let f = observe(&world, 0, &g, 5, 5).unwrap();
        assert!(f.is_one_hot());
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(f.get(r, c, CH_FREE), 1);
                assert_eq!(f.get(r, c, CH_GUIDE), 0);
            }
        }
    }

    #[test]
    fn corner_robot_sees_off_grid_padding() {
        let world = world_with_robot(30, 30, Cell::new(0, 0), Cell::new(9, 9));
        let g = trivial_guidance(Cell::new(0, 0));
        let f = observe(&world, 0, &g, 15, 15).unwrap();
        // 7-wide border above and to the left is off-grid padding.
        for r in 0..15 {
            for c in 0..15 {
                let off = r < 7 || c < 7;
                assert_eq!(f.get(r, c, CH_STATIC), off as u8, "at {r},{c}");
            }
        }
        assert!(f.is_one_hot());
    }

    #[test]
    fn dynamic_obstacle_maps_to_relative_pixel() {
        let mut world = world_with_robot(9, 9, Cell::new(4, 4), Cell::new(8, 8));
        world.set_obstacles(vec![scripted_obstacle(0, Cell::new(3, 4))]);
        let g = trivial_guidance(Cell::new(4, 4));
        let f = observe(&world, 0, &g, 5, 5).unwrap();
        // Obstacle at relative (-1, 0) lands one pixel above center.
        assert_eq!(f.get(1, 2, CH_DYNAMIC), 1);
        assert_eq!(f.get(2, 2, CH_FREE), 1, "own cell encoded free");
        assert!(f.is_one_hot());
    }

    #[test]
    fn other_robots_share_the_dynamic_channel() {
        let mut world = world_with_robot(9, 9, Cell::new(4, 4), Cell::new(8, 8));
        world.add_robot(Cell::new(4, 5), Cell::new(0, 0)).unwrap();
        let g = trivial_guidance(Cell::new(4, 4));
        let f = observe(&world, 0, &g, 5, 5).unwrap();
        assert_eq!(f.get(2, 3, CH_DYNAMIC), 1);
    }

    #[test]
    fn guidance_channel_and_consumption() {
        let world = world_with_robot(9, 9, Cell::new(4, 2), Cell::new(4, 8));
        let cells: Vec<Cell> = (2..=8).map(|c| Cell::new(4, c)).collect();
        let mut g = GuidancePath::from_cells(cells).unwrap();
        g.remove_through(Cell::new(4, 2)).unwrap();
        let f = observe(&world, 0, &g, 5, 5).unwrap();
        assert_eq!(f.get(2, 2, CH_GUIDE), 0, "consumed start cell is plain free");
        assert_eq!(f.get(2, 3, CH_GUIDE), 1);
        assert_eq!(f.get(2, 4, CH_GUIDE), 1);
        assert_eq!(f.get(2, 3, CH_FREE), 1, "guidance cells stay free in ch2");
    }

    #[test]
    fn even_fov_is_rejected() {
        let world = world_with_robot(5, 5, Cell::new(2, 2), Cell::new(4, 4));
        let g = trivial_guidance(Cell::new(2, 2));
        assert!(observe(&world, 0, &g, 4, 5).is_err());
        assert!(observe(&world, 0, &g, 5, 6).is_err());
    }

    #[test]
    fn translation_consistency() {
        // Shift robot and obstacle by the same offset away from borders:
        // identical frames.
        let mut w1 = world_with_robot(30, 30, Cell::new(10, 10), Cell::new(29, 29));
        w1.set_obstacles(vec![scripted_obstacle(0, Cell::new(11, 12))]);
        let mut w2 = world_with_robot(30, 30, Cell::new(14, 13), Cell::new(29, 29));
        w2.set_obstacles(vec![scripted_obstacle(0, Cell::new(15, 15))]);
        let g1 = trivial_guidance(Cell::new(10, 10));
        let g2 = trivial_guidance(Cell::new(14, 13));
        let f1 = observe(&w1, 0, &g1, 7, 7).unwrap();
        let f2 = observe(&w2, 0, &g2, 7, 7).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn observe_is_pure() {
        let mut world = world_with_robot(15, 15, Cell::new(7, 7), Cell::new(14, 14));
        world.set_obstacles(vec![scripted_obstacle(0, Cell::new(6, 7))]);
        let g = trivial_guidance(Cell::new(7, 7));
        let a = observe(&world, 0, &g, 9, 9).unwrap();
        let b = observe(&world, 0, &g, 9, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_hot_over_random_states() {
        use crate::grid::{generate_map, MapKind};
        use crate::world::spawn_obstacles;
        use rand::SeedableRng;
        let map = generate_map(MapKind::Random, 20, 20, 0.2, 31).unwrap();
        let mut world = WorldState::new(map.clone());
        world.set_obstacles(spawn_obstacles(&map, 25, 32, &Default::default()).unwrap());
        let free: Vec<Cell> = map
            .free_cells()
            .filter(|c| !world.is_occupied(*c))
            .collect();
        let start = free[0];
        let goal = free[free.len() - 1];
        world.add_robot(start, goal).unwrap();
        let g = GuidancePath::compute(&map, start, goal).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        for _ in 0..500 {
            world.step_obstacles(&mut rng);
            let f = observe(&world, 0, &g, 9, 9).unwrap();
            assert!(f.is_one_hot());
        }
    }

    #[test]
    fn push_frame_keeps_length_and_order() {
        let seq = InputSequence::empty(4, 3, 3);
        assert_eq!(seq.n_t(), 4);
        let mut marked = ObservationFrame::zeros(3, 3);
        marked.set(0, 0, CH_STATIC);
        let seq = seq.push(marked.clone());
        // Fresh episode, first frame: [0, 0, 0, frame].
        let frames: Vec<&ObservationFrame> = seq.frames().collect();
        assert_eq!(frames.len(), 4);
        assert_eq!(frames[3], &marked);
        assert_eq!(frames[0], &ObservationFrame::zeros(3, 3));
        // Push three more real frames: all slots real.
        let seq = seq.push(marked.clone()).push(marked.clone()).push(marked.clone());
        assert!(seq.frames().all(|f| f == &marked));
    }

    #[test]
    fn single_frame_sequence() {
        let seq = InputSequence::empty(1, 3, 3);
        let mut f = ObservationFrame::zeros(3, 3);
        f.set(1, 1, CH_FREE);
        let seq = seq.push(f.clone());
        assert_eq!(seq.n_t(), 1);
        assert_eq!(seq.newest(), &f);
    }

    #[test]
    fn flat_serialization_roundtrip() {
        let mut f = ObservationFrame::zeros(3, 5);
        f.set(1, 4, CH_DYNAMIC);
        f.set(2, 0, CH_GUIDE);
        let bytes = f.as_flat().to_vec();
        // Documented order: (row, col, channel).
        assert_eq!(bytes[(1 * 5 + 4) * 4 + CH_DYNAMIC], 1);
        let back = ObservationFrame::from_flat(3, 5, bytes).unwrap();
        assert_eq!(f, back);
        assert!(ObservationFrame::from_flat(3, 5, vec![0; 7]).is_err());
    }
}

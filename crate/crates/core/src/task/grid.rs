use serde::{Deserialize, Serialize};

use super::TaskError;

pub const DEFAULT_SLOTS: usize = 96;

/// Square city of `side × side` cells, with the day split into `slots`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CityGrid {
    side: usize,
    slots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub cell: usize,
    pub slot: usize,
}

impl CityGrid {
    pub fn new(side: usize, slots: usize) -> Result<Self, TaskError> {
        if side < 2 {
            return Err(TaskError::Config(format!("grid side {side} must be at least 2")));
        }
        if slots == 0 {
            return Err(TaskError::Config("a day needs at least one time slot".into()));
        }
        Ok(Self { side, slots })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn state_count(&self) -> usize {
        self.cells() * self.slots
    }

    /// Dense index of a state, slot-major within a cell.
    pub fn state_index(&self, s: State) -> usize {
        s.cell * self.slots + s.slot
    }

    pub fn contains(&self, s: State) -> bool {
        s.cell < self.cells() && s.slot < self.slots
    }

    pub fn xy(&self, cell: usize) -> (usize, usize) {
        (cell % self.side, cell / self.side)
    }

    pub fn manhattan(&self, a: usize, b: usize) -> usize {
        let (ax, ay) = self.xy(a);
        let (bx, by) = self.xy(b);
        ax.abs_diff(bx) + ay.abs_diff(by)
    }

    pub fn advance(&self, slot: usize, by: usize) -> usize {
        (slot + by) % self.slots
    }

    /// Shortest distance between two slots on the daily circle.
    pub fn slot_distance(&self, a: usize, b: usize) -> usize {
        let d = a.abs_diff(b) % self.slots;
        d.min(self.slots - d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry() {
        let g = CityGrid::new(8, DEFAULT_SLOTS).unwrap();
        assert_eq!((g.cells(), g.state_count()), (64, 6144));
        assert_eq!(g.xy(9), (1, 1));
        assert_eq!(g.manhattan(0, 63), 14);
        assert_eq!(g.advance(95, 2), 1);
        assert_eq!(g.slot_distance(1, 95), 2);
        assert!(CityGrid::new(1, 96).is_err());
        assert!(!g.contains(State { cell: 64, slot: 0 }));
    }
}

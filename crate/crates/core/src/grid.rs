//! Cells, headings, actions and vehicle identity.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A grid cell. Rows grow southward and columns grow eastward, both from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
}

impl Cell {
    pub const fn new(row: u32, col: u32) -> Self {
        Cell { row, col }
    }

    /// The neighbouring cell one step along `heading`.
    pub fn ahead(self, heading: Heading) -> Cell {
        match heading {
            Heading::East => Cell::new(self.row, self.col + 1),
            Heading::South => Cell::new(self.row + 1, self.col),
        }
    }

    /// The neighbouring cell one step against `heading`, if it is on the grid.
    pub fn behind(self, heading: Heading) -> Option<Cell> {
        match heading {
            Heading::East if self.col > 1 => Some(Cell::new(self.row, self.col - 1)),
            Heading::South if self.row > 1 => Some(Cell::new(self.row - 1, self.col)),
            _ => None,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSize {
    pub rows: u32,
    pub cols: u32,
}

impl GridSize {
    pub const fn new(rows: u32, cols: u32) -> Self {
        GridSize { rows, cols }
    }

    pub fn contains(&self, cell: Cell) -> bool {
        (1..=self.rows).contains(&cell.row) && (1..=self.cols).contains(&cell.col)
    }

    /// True when `cell` is the last cell a vehicle travelling along
    /// `heading` can occupy.
    pub fn is_exit(&self, cell: Cell, heading: Heading) -> bool {
        match heading {
            Heading::East => cell.col == self.cols,
            Heading::South => cell.row == self.rows,
        }
    }

    /// Number of forward moves from `cell` to the exit along `heading`.
    pub fn distance_to_exit(&self, cell: Cell, heading: Heading) -> u32 {
        match heading {
            Heading::East => self.cols.saturating_sub(cell.col),
            Heading::South => self.rows.saturating_sub(cell.row),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    East,
    South,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Go,
    Stop,
    LaneChange,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Go, Action::Stop, Action::LaneChange];

    /// Human wording used in prompts.
    pub fn label(self) -> &'static str {
        match self {
            Action::Go => "Go",
            Action::Stop => "Stop",
            Action::LaneChange => "Lane change",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Opaque vehicle identifier. Ordering is lexicographic and fixes the
/// order agents are queried and logged in.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub String);

impl VehicleId {
    pub fn new(id: impl Into<String>) -> Self {
        VehicleId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VehicleId {
    fn from(s: &str) -> Self {
        VehicleId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Strategic,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Status {
    Active,
    Completed,
    Crashed,
}

//! Plain-text playback frames.
//!
//! `.` road, `+` empty conflict cell, a capital letter per vehicle (first
//! letter of its colour), `X` for a crash. Finished vehicles are not drawn.

use std::fmt::Write;

use crate::grid::{Cell, Status};
use crate::scalar::RewardScalar;
use crate::scenario::ScenarioSpec;
use crate::world::WorldState;

fn glyph(color: &str) -> char {
    color.chars().next().map_or('?', |c| c.to_ascii_uppercase())
}

pub fn render_state<R: RewardScalar>(state: &WorldState<R>, spec: &ScenarioSpec<R>) -> String {
    let mut out = String::new();
    writeln!(out, "t = {} ({:?})", state.time_step, state.terminal_flag).unwrap();
    out.push_str("  ");
    for col in 1..=spec.grid.cols {
        write!(out, " {}", col % 10).unwrap();
    }
    out.push('\n');
    for row in 1..=spec.grid.rows {
        let mut line = format!("{row:>2}");
        for col in 1..=spec.grid.cols {
            let cell = Cell::new(row, col);
            let here: Vec<_> = state
                .vehicles
                .values()
                .filter(|v| v.position == cell && v.status != Status::Completed)
                .collect();
            let c = match here.as_slice() {
                [] if spec.conflict_cells.contains(&cell) => '+',
                [] if spec.roads.iter().any(|r| r.contains(cell)) => '.',
                [] => ' ',
                [v] if v.status != Status::Crashed => glyph(&v.color),
                _ => 'X',
            };
            line.push(' ');
            line.push(c);
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

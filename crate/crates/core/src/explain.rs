//! Human-readable views of a lowering pipeline.

use std::fmt::Write;

use crate::distribution::TensorDistribution;
use crate::machine::Machine;
use crate::schedule::{Schedule, ScheduleError};
use crate::tensor::{lower_to_cin, TensorIndexStmt};

/// The placement statement of `d`.
pub fn placement(d: &TensorDistribution) -> String {
    d.lower_placement().to_string()
}

/// The raw lowering of `stmt` followed by the statement after each command.
pub fn pipeline(stmt: &TensorIndexStmt, schedule: &Schedule, machine: &Machine) -> Result<String, ScheduleError> {
    let raw = lower_to_cin(stmt);
    let mut out = String::new();
    writeln!(out, "# lower {stmt}").unwrap();
    writeln!(out, "{raw}").unwrap();
    for (cmd, s) in schedule.apply_traced(raw, Some(machine))? {
        writeln!(out, "# {cmd}").unwrap();
        writeln!(out, "{s}").unwrap();
    }
    Ok(out)
}

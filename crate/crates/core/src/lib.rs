//! Dense tensor algebra on a simulated distributed machine.

pub mod algorithms;
pub mod cin;
pub mod distribution;
pub mod explain;
pub mod inputs;
pub mod io;
pub mod machine;
pub mod notation;
pub mod schedule;
pub mod sim;
pub mod tensor;

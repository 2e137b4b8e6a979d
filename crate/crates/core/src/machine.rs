//! Machines: hierarchical grids of abstract processors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MachineError {
    #[error("machine grid must have at least one level with at least one dimension")]
    EmptyGrid,
    #[error("machine grid dimension must be positive")]
    ZeroDim,
    #[error("cannot parse machine spec {0:?}")]
    Parse(String),
}

/// One level of the machine hierarchy.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridLevel {
    pub dims: Vec<usize>,
}

/// Processor coordinate, flattened across levels (level 0 components first).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProcCoord(pub Vec<usize>);

impl fmt::Display for ProcCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (n, c) in self.0.iter().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str(")")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Machine {
    levels: Vec<GridLevel>,
}

impl Machine {
    pub fn new(levels: Vec<Vec<usize>>) -> Result<Self, MachineError> {
        if levels.is_empty() || levels.iter().any(|l| l.is_empty()) {
            return Err(MachineError::EmptyGrid);
        }
        if levels.iter().flatten().any(|&d| d == 0) {
            return Err(MachineError::ZeroDim);
        }
        Ok(Machine {
            levels: levels.into_iter().map(|dims| GridLevel { dims }).collect(),
        })
    }

    /// Single-level machine.
    pub fn grid(dims: &[usize]) -> Result<Self, MachineError> {
        Machine::new(vec![dims.to_vec()])
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn level_dims(&self, level: usize) -> &[usize] {
        &self.levels[level].dims
    }

    /// Dimensions of the flattened grid.
    pub fn flat_dims(&self) -> Vec<usize> {
        self.levels.iter().flat_map(|l| l.dims.iter().copied()).collect()
    }

    /// Offset of each level's first component within a flattened coordinate.
    pub fn level_offset(&self, level: usize) -> usize {
        self.levels[..level].iter().map(|l| l.dims.len()).sum()
    }

    pub fn num_procs(&self) -> usize {
        self.levels.iter().flat_map(|l| &l.dims).product()
    }

    pub fn is_hierarchical(&self) -> bool {
        self.levels.len() > 1
    }

    /// Collapses the hierarchy into a single level.
    pub fn flatten(&self) -> Machine {
        Machine {
            levels: vec![GridLevel {
                dims: self.flat_dims(),
            }],
        }
    }

    /// Every processor in lexicographic order (by level, then coordinate).
    pub fn enumerate(&self) -> Vec<ProcCoord> {
        let dims = self.flat_dims();
        let mut out = Vec::with_capacity(self.num_procs());
        crate::tensor::for_each_coord(&dims, |c| out.push(ProcCoord(c.to_vec())));
        out
    }

    /// Position of `p` in `enumerate()`.
    pub fn proc_index(&self, p: &ProcCoord) -> usize {
        crate::tensor::linear_index(&self.flat_dims(), &p.0)
    }

    /// True when two processors share every level-0 coordinate except at the
    /// innermost level, i.e. they live in the same outer-level node.
    pub fn same_node(&self, a: &ProcCoord, b: &ProcCoord) -> bool {
        if !self.is_hierarchical() {
            return false;
        }
        let inner = self.level_offset(self.levels.len() - 1);
        a.0[..inner] == b.0[..inner]
    }

    /// Conventional symbolic name of a grid dimension: `gx`, `gy`, `gz`, ...
    /// Levels past the first get a level suffix.
    pub fn dim_label(&self, level: usize, dim: usize) -> String {
        let base = match dim {
            0 => "gx".to_string(),
            1 => "gy".to_string(),
            2 => "gz".to_string(),
            3 => "gw".to_string(),
            n => format!("g{n}"),
        };
        if level == 0 {
            base
        } else {
            format!("{base}{level}")
        }
    }
}

impl fmt::Display for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, l) in self.levels.iter().enumerate() {
            if n > 0 {
                f.write_str("/")?;
            }
            let s: Vec<String> = l.dims.iter().map(|d| d.to_string()).collect();
            f.write_str(&s.join("x"))?;
        }
        Ok(())
    }
}

/// Parses `3x3` (flat) or `2x2/4` (hierarchical).
impl FromStr for Machine {
    type Err = MachineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let levels = s
            .trim()
            .split('/')
            .map(|lvl| {
                lvl.trim()
                    .split(['x', 'X'])
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| MachineError::Parse(s.to_string()))?;
        Machine::new(levels)
    }
}

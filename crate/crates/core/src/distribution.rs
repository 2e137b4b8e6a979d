//! Tensor distribution notation `X -> Y`: validation, the partition and
//! expansion functions, block arithmetic, and lowering to placement CIN.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cin::{CinStmt, Factor, Loop, Relation};
use crate::machine::{Machine, ProcCoord};
use crate::tensor::{for_each_coord, Access, IndexVar, TensorVar};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DistributionError {
    #[error("rank mismatch: {0}")]
    RankMismatch(String),
    #[error("duplicate name {0} in distribution")]
    DuplicateName(String),
    #[error("machine dimension name {0} does not name a tensor dimension")]
    UnboundMachineName(String),
    #[error("fixed coordinate {value} out of range for machine dimension of extent {extent}")]
    FixedOutOfRange { value: usize, extent: usize },
    #[error("coordinate {0:?} out of bounds")]
    OutOfBounds(Vec<usize>),
    #[error("invalid color {0:?}")]
    BadColor(Vec<usize>),
    #[error("cannot parse distribution {0:?}")]
    Parse(String),
    #[error("distributions describe different tensors or machines")]
    Incompatible,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DimName {
    Var(String),
    Fixed(usize),
    Broadcast,
}

impl fmt::Display for DimName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimName::Var(v) => f.write_str(v),
            DimName::Fixed(n) => write!(f, "{n}"),
            DimName::Broadcast => f.write_str("*"),
        }
    }
}

/// One `X -> Y` level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistLevel {
    pub x: Vec<String>,
    pub y: Vec<DimName>,
}

fn join_names<T: fmt::Display>(items: &[T]) -> String {
    let strs: Vec<String> = items.iter().map(|i| i.to_string()).collect();
    if strs.iter().all(|s| s.chars().count() == 1) {
        strs.concat()
    } else {
        strs.join(",")
    }
}

impl fmt::Display for DistLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", join_names(&self.x), join_names(&self.y))
    }
}

/// Unbound distribution: levels of `X -> Y`, not yet tied to a tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub levels: Vec<DistLevel>,
}

impl fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, l) in self.levels.iter().enumerate() {
            if n > 0 {
                f.write_str(" ; ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

fn split_side(side: &str) -> Vec<String> {
    let side = side.trim();
    if side.contains(',') || side.contains(char::is_whitespace) {
        side.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    } else {
        side.chars().map(|c| c.to_string()).collect()
    }
}

/// Parses `xy -> xy*` or `xy -> xy ; xy -> x`. Names are single characters
/// unless a side contains commas or spaces.
impl FromStr for DistributionSpec {
    type Err = DistributionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DistributionError::Parse(s.to_string());
        let mut levels = Vec::new();
        for lvl in s.split(';') {
            let (x, y) = lvl
                .split_once("->")
                .or_else(|| lvl.split_once('↦'))
                .ok_or_else(err)?;
            let x = split_side(x);
            if x.iter().any(|n| !n.chars().all(|c| c.is_alphabetic() || c == '_')) {
                return Err(err());
            }
            let y = split_side(y)
                .into_iter()
                .map(|tok| {
                    if tok == "*" {
                        Ok(DimName::Broadcast)
                    } else if let Ok(n) = tok.parse::<usize>() {
                        Ok(DimName::Fixed(n))
                    } else if tok.chars().all(|c| c.is_alphabetic() || c == '_') {
                        Ok(DimName::Var(tok))
                    } else {
                        Err(err())
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            levels.push(DistLevel { x, y });
        }
        Ok(DistributionSpec { levels })
    }
}

/// Parses `A: xy -> xy*` into the tensor name and its spec.
pub fn parse_named(s: &str) -> Result<(String, DistributionSpec), DistributionError> {
    let (name, rest) = s
        .split_once(':')
        .ok_or_else(|| DistributionError::Parse(s.to_string()))?;
    let name = name.trim();
    if name.is_empty() {
        return Err(DistributionError::Parse(s.to_string()));
    }
    Ok((name.to_string(), rest.parse()?))
}

/// Half-open box `[lo, hi)` per dimension.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HyperRect {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl HyperRect {
    pub fn new(lo: Vec<usize>, hi: Vec<usize>) -> Self {
        debug_assert_eq!(lo.len(), hi.len());
        let hi = lo.iter().zip(hi).map(|(&l, h)| h.max(l)).collect();
        HyperRect { lo, hi }
    }

    pub fn full(dims: &[usize]) -> Self {
        HyperRect::new(vec![0; dims.len()], dims.to_vec())
    }

    pub fn point(c: &[usize]) -> Self {
        HyperRect::new(c.to_vec(), c.iter().map(|x| x + 1).collect())
    }

    pub fn rank(&self) -> usize {
        self.lo.len()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn volume(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.volume() == 0
    }

    pub fn contains(&self, c: &[usize]) -> bool {
        c.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(x, (l, h))| l <= x && x < h)
    }

    pub fn contains_rect(&self, o: &HyperRect) -> bool {
        o.is_empty()
            || self
                .lo
                .iter()
                .zip(&self.hi)
                .zip(o.lo.iter().zip(&o.hi))
                .all(|((l, h), (ol, oh))| l <= ol && oh <= h)
    }

    pub fn intersect(&self, o: &HyperRect) -> HyperRect {
        let lo: Vec<usize> = self.lo.iter().zip(&o.lo).map(|(a, b)| *a.max(b)).collect();
        let hi: Vec<usize> = self.hi.iter().zip(&o.hi).map(|(a, b)| *a.min(b)).collect();
        HyperRect::new(lo, hi)
    }

    /// Visits every coordinate in lexicographic order.
    pub fn for_each(&self, mut f: impl FnMut(&[usize])) {
        if self.is_empty() {
            return;
        }
        let ext = self.extents();
        let mut c = vec![0; self.rank()];
        for_each_coord(&ext, |off| {
            for (k, o) in off.iter().enumerate() {
                c[k] = self.lo[k] + o;
            }
            f(&c);
        });
    }
}

impl fmt::Display for HyperRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rank() == 0 {
            return f.write_str("[]");
        }
        for (n, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if n > 0 {
                f.write_str("x")?;
            }
            write!(f, "[{l},{h})")?;
        }
        Ok(())
    }
}

/// Block `index` of `[0, extent)` cut into `parts` ceil-sized pieces.
pub fn block_range(extent: usize, parts: usize, index: usize) -> (usize, usize) {
    assert!(parts > 0 && index < parts, "block index out of range");
    let b = extent.div_ceil(parts);
    ((index * b).min(extent), ((index + 1) * b).min(extent))
}

pub type Color = Vec<usize>;

/// A distribution bound to a tensor and a machine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDistribution {
    spec: DistributionSpec,
    tensor: TensorVar,
    machine: Machine,
}

/// Machine dimension partitioning a tensor dimension at one level.
#[derive(Clone, Copy, Debug)]
struct Part {
    level: usize,
    tensor_dim: usize,
    parts: usize,
}

impl TensorDistribution {
    pub fn new(spec: DistributionSpec, tensor: TensorVar, machine: Machine) -> Result<Self, DistributionError> {
        let d = TensorDistribution { spec, tensor, machine };
        d.validate()?;
        Ok(d)
    }

    pub fn parse(s: &str, tensor: TensorVar, machine: Machine) -> Result<Self, DistributionError> {
        TensorDistribution::new(s.parse()?, tensor, machine)
    }

    pub fn spec(&self) -> &DistributionSpec {
        &self.spec
    }

    pub fn tensor(&self) -> &TensorVar {
        &self.tensor
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn validate(&self) -> Result<(), DistributionError> {
        let levels = self.machine.levels();
        if self.spec.levels.len() != levels.len() {
            return Err(DistributionError::RankMismatch(format!(
                "{} distribution levels for a {}-level machine",
                self.spec.levels.len(),
                levels.len()
            )));
        }
        for (lvl, (d, m)) in self.spec.levels.iter().zip(levels).enumerate() {
            if d.x.len() != self.tensor.order() {
                return Err(DistributionError::RankMismatch(format!(
                    "{} names for tensor {} of order {} at level {lvl}",
                    d.x.len(),
                    self.tensor.name(),
                    self.tensor.order()
                )));
            }
            if d.y.len() != m.dims.len() {
                return Err(DistributionError::RankMismatch(format!(
                    "{} names for a {}-dimensional machine level {lvl}",
                    d.y.len(),
                    m.dims.len()
                )));
            }
            for (n, v) in d.x.iter().enumerate() {
                if d.x[..n].contains(v) {
                    return Err(DistributionError::DuplicateName(v.clone()));
                }
            }
            for (n, y) in d.y.iter().enumerate() {
                match y {
                    DimName::Var(v) => {
                        if d.y[..n].contains(y) {
                            return Err(DistributionError::DuplicateName(v.clone()));
                        }
                        if !d.x.contains(v) {
                            return Err(DistributionError::UnboundMachineName(v.clone()));
                        }
                    }
                    DimName::Fixed(c) if *c >= m.dims[n] => {
                        return Err(DistributionError::FixedOutOfRange {
                            value: *c,
                            extent: m.dims[n],
                        });
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn parts(&self) -> Vec<Part> {
        let mut out = Vec::new();
        for (level, d) in self.spec.levels.iter().enumerate() {
            for (n, y) in d.y.iter().enumerate() {
                if let DimName::Var(v) = y {
                    out.push(Part {
                        level,
                        tensor_dim: d.x.iter().position(|x| x == v).unwrap(),
                        parts: self.machine.level_dims(level)[n],
                    });
                }
            }
        }
        out
    }

    /// Extent of each color component.
    pub fn color_dims(&self) -> Vec<usize> {
        self.parts().iter().map(|p| p.parts).collect()
    }

    /// Every color in lexicographic order.
    pub fn colors(&self) -> Vec<Color> {
        let mut out = Vec::new();
        for_each_coord(&self.color_dims(), |c| out.push(c.to_vec()));
        out
    }

    pub fn color_of(&self, coord: &[usize]) -> Result<Color, DistributionError> {
        let dims = self.tensor.dims();
        if coord.len() != dims.len() || coord.iter().zip(dims).any(|(c, d)| c >= d) {
            return Err(DistributionError::OutOfBounds(coord.to_vec()));
        }
        // per tensor dim: offset of the current piece and its nominal extent
        let mut offset = vec![0usize; dims.len()];
        let mut nominal = dims.to_vec();
        let mut color = Vec::new();
        let parts = self.parts();
        for level in 0..self.spec.levels.len() {
            let here: Vec<&Part> = parts.iter().filter(|p| p.level == level).collect();
            for p in &here {
                let b = nominal[p.tensor_dim].div_ceil(p.parts);
                color.push((coord[p.tensor_dim] - offset[p.tensor_dim]) / b);
            }
            let first = color.len() - here.len();
            for (p, &c) in here.iter().zip(&color[first..]) {
                let b = nominal[p.tensor_dim].div_ceil(p.parts);
                offset[p.tensor_dim] += c * b;
                nominal[p.tensor_dim] = b;
            }
        }
        Ok(color)
    }

    fn check_color(&self, c: &[usize]) -> Result<(), DistributionError> {
        let cd = self.color_dims();
        if c.len() != cd.len() || c.iter().zip(&cd).any(|(x, d)| x >= d) {
            return Err(DistributionError::BadColor(c.to_vec()));
        }
        Ok(())
    }

    /// Processors holding the piece of color `c`, in enumerate order.
    pub fn processors_of(&self, c: &[usize]) -> Result<Vec<ProcCoord>, DistributionError> {
        self.check_color(c)?;
        let mut choices: Vec<Vec<usize>> = Vec::new();
        let mut next = c.iter();
        for (level, d) in self.spec.levels.iter().enumerate() {
            for (n, y) in d.y.iter().enumerate() {
                let extent = self.machine.level_dims(level)[n];
                choices.push(match y {
                    DimName::Var(_) => vec![*next.next().unwrap()],
                    DimName::Fixed(v) => {
                        if *v >= extent {
                            return Err(DistributionError::FixedOutOfRange { value: *v, extent });
                        }
                        vec![*v]
                    }
                    DimName::Broadcast => (0..extent).collect(),
                });
            }
        }
        let lens: Vec<usize> = choices.iter().map(Vec::len).collect();
        let mut out = Vec::new();
        for_each_coord(&lens, |ix| {
            out.push(ProcCoord(ix.iter().zip(&choices).map(|(&i, ch)| ch[i]).collect()));
        });
        Ok(out)
    }

    /// Owner of a piece: the first of its processors in enumerate order.
    pub fn home_of(&self, c: &[usize]) -> Result<ProcCoord, DistributionError> {
        Ok(self.processors_of(c)?.remove(0))
    }

    pub fn piece_bounds(&self, c: &[usize]) -> Result<HyperRect, DistributionError> {
        self.check_color(c)?;
        let dims = self.tensor.dims();
        let mut lo = vec![0usize; dims.len()];
        let mut hi = dims.to_vec();
        let mut nominal = dims.to_vec();
        let parts = self.parts();
        let mut k = 0;
        for level in 0..self.spec.levels.len() {
            for p in parts.iter().filter(|p| p.level == level) {
                let d = p.tensor_dim;
                let b = nominal[d].div_ceil(p.parts);
                let start = lo[d] + c[k] * b;
                lo[d] = start.min(hi[d]);
                hi[d] = (start + b).min(hi[d]);
                nominal[d] = b;
                k += 1;
            }
        }
        Ok(HyperRect::new(lo, hi))
    }

    /// `(color, bounds, processors)` for every color.
    pub fn pieces(&self) -> Vec<(Color, HyperRect, Vec<ProcCoord>)> {
        self.colors()
            .into_iter()
            .map(|c| {
                let r = self.piece_bounds(&c).expect("valid color");
                let p = self.processors_of(&c).expect("validated");
                (c, r, p)
            })
            .collect()
    }

    pub fn is_replicated(&self) -> bool {
        self.spec
            .levels
            .iter()
            .any(|l| l.y.contains(&DimName::Broadcast))
    }

    /// The placement statement that materializes every piece on each of its
    /// processors.
    pub fn lower_placement(&self) -> CinStmt {
        let level0 = &self.spec.levels[0];
        let dims = self.tensor.dims();
        // current (innermost so far) variable for each tensor dim
        let mut cur: Vec<String> = level0.x.clone();
        let mut cur_extent: Vec<usize> = dims.to_vec();
        let mut machine_loops: Vec<Loop> = Vec::new();
        let mut relations: Vec<Relation> = Vec::new();
        let mut fresh = 0usize;
        let used: Vec<String> = level0.x.clone();
        let mut fresh_var = |prefix: &str| loop {
            let v = format!("{prefix}{fresh}");
            fresh += 1;
            if !used.contains(&v) {
                break v;
            }
        };
        for (level, d) in self.spec.levels.iter().enumerate() {
            let mdims = self.machine.level_dims(level);
            for (n, y) in d.y.iter().enumerate() {
                match y {
                    DimName::Var(v) => {
                        let t = d.x.iter().position(|x| x == v).unwrap();
                        let parent = cur[t].clone();
                        let outer = format!("{parent}o");
                        let inner = format!("{parent}i");
                        relations.push(Relation::Divide {
                            parent: parent.as_str().into(),
                            outer: outer.as_str().into(),
                            inner: inner.as_str().into(),
                            parts: Factor::named(mdims[n], self.machine.dim_label(level, n)),
                            parent_extent: cur_extent[t],
                        });
                        machine_loops.push(Loop::new(outer.into(), mdims[n]));
                        cur_extent[t] = cur_extent[t].div_ceil(mdims[n]);
                        cur[t] = inner;
                    }
                    DimName::Fixed(c) => {
                        machine_loops.push(Loop::fixed_at(fresh_var("p").into(), mdims[n], *c));
                    }
                    DimName::Broadcast => {
                        machine_loops.push(Loop::new(fresh_var("p").into(), mdims[n]));
                    }
                }
            }
        }
        let access = Access::new(
            self.tensor.clone(),
            level0.x.iter().map(|v| IndexVar::new(v.clone())).collect(),
        );
        let local: Vec<Loop> = cur
            .iter()
            .zip(&cur_extent)
            .map(|(v, &e)| Loop::new(v.as_str().into(), e))
            .collect();
        let last = machine_loops.last().map(|l| l.var.clone());
        for lp in &machine_loops {
            relations.push(Relation::Distribute(lp.var.clone()));
        }
        if let Some(at) = last {
            relations.push(Relation::Communicate {
                tensors: vec![self.tensor.name().to_string()],
                at,
            });
        }
        let body = machine_loops
            .into_iter()
            .chain(local)
            .rev()
            .fold(CinStmt::Touch(access), |b, lp| CinStmt::forall(lp, b));
        CinStmt::such_that(body, relations)
    }
}

impl fmt::Display for TensorDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.tensor.name(), self.spec)
    }
}

/// Program moving `from`'s layout to `to`'s; runs on a machine where the
/// tensor is already placed per `from`.
pub fn redistribute(from: &TensorDistribution, to: &TensorDistribution) -> Result<CinStmt, DistributionError> {
    from.validate()?;
    to.validate()?;
    if from.tensor != to.tensor || from.machine != to.machine {
        return Err(DistributionError::Incompatible);
    }
    Ok(to.lower_placement())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn td(spec: &str, dims: &[usize], m: &[usize]) -> Result<TensorDistribution, DistributionError> {
        TensorDistribution::parse(
            spec,
            TensorVar::new("T", dims.to_vec()).unwrap(),
            Machine::grid(m).unwrap(),
        )
    }

    #[test]
    fn validation() {
        assert!(td("xy -> xy", &[4, 4], &[2, 2]).is_ok());
        assert_eq!(
            td("xy -> z", &[4, 4], &[2]).unwrap_err(),
            DistributionError::UnboundMachineName("z".into())
        );
        assert_eq!(
            td("xx -> x", &[4, 4], &[2]).unwrap_err(),
            DistributionError::DuplicateName("x".into())
        );
        assert!(matches!(
            td("xy -> x", &[4, 4], &[2, 2]),
            Err(DistributionError::RankMismatch(_))
        ));
        assert!(matches!(
            td("xy -> x3", &[4, 4], &[2, 2]),
            Err(DistributionError::FixedOutOfRange { .. })
        ));
    }

    #[test]
    fn blocks() {
        assert_eq!(block_range(100, 10, 3), (30, 40));
        let b: Vec<_> = (0..3).map(|i| block_range(10, 3, i)).collect();
        assert_eq!(b, vec![(0, 4), (4, 8), (8, 10)]);
        let b: Vec<_> = (0..4).map(|i| block_range(2, 4, i)).collect();
        assert_eq!(b, vec![(0, 1), (1, 2), (2, 2), (2, 2)]);
    }

    #[test]
    fn row_distribution_colors() {
        let d = td("xy -> x", &[4, 4], &[2]).unwrap();
        assert_eq!(d.color_of(&[3, 0]).unwrap(), vec![1]);
        assert_eq!(d.color_of(&[3, 3]).unwrap(), vec![1]);
        assert_eq!(d.piece_bounds(&[1]).unwrap().to_string(), "[2,4)x[0,4)");
        let one = td("xy -> x", &[4, 4], &[1]).unwrap();
        assert_eq!(one.color_of(&[3, 2]).unwrap(), vec![0]);
    }

    #[test]
    fn three_tensor_on_grid() {
        let d = td("xyz -> xy", &[4, 4, 4], &[2, 2]).unwrap();
        assert_eq!(d.piece_bounds(&[0, 1]).unwrap().to_string(), "[0,2)x[2,4)x[0,4)");
    }

    #[test]
    fn broadcast_and_fixed() {
        let d = td("xy -> xy*", &[2, 2], &[2, 2, 2]).unwrap();
        assert_eq!(d.color_of(&[0, 1]).unwrap(), vec![0, 1]);
        assert_eq!(
            d.processors_of(&[0, 0]).unwrap(),
            vec![ProcCoord(vec![0, 0, 0]), ProcCoord(vec![0, 0, 1])]
        );
        let f = td("xy -> xy0", &[4, 4], &[2, 2, 2]).unwrap();
        assert_eq!(f.processors_of(&[1, 1]).unwrap(), vec![ProcCoord(vec![1, 1, 0])]);
        let t = td("xy -> xy", &[4, 4], &[2, 2]).unwrap();
        assert_eq!(t.processors_of(&[0, 1]).unwrap(), vec![ProcCoord(vec![0, 1])]);
    }

    #[test]
    fn placement_lowering_text() {
        let d = td("xy -> x", &[4, 4], &[2]).unwrap();
        assert_eq!(
            d.lower_placement().to_string(),
            "forall(xo) forall(xi) forall(y) T(x,y) s.t. divide(x,xo,xi,gx), distribute(xo), communicate(T,xo)"
        );
    }

    #[test]
    fn hierarchical_pieces_nest() {
        let d = TensorDistribution::parse(
            "xy -> xy ; xy -> x",
            TensorVar::new("T", vec![8, 8]).unwrap(),
            "2x2/2".parse().unwrap(),
        )
        .unwrap();
        assert_eq!(d.color_dims(), vec![2, 2, 2]);
        assert_eq!(d.piece_bounds(&[1, 0, 1]).unwrap().to_string(), "[6,8)x[0,4)");
        assert_eq!(d.color_of(&[6, 3]).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn parse_forms() {
        let (n, s) = parse_named("A: xy -> xy* ; zw -> z").unwrap();
        assert_eq!(n, "A");
        assert_eq!(s.levels.len(), 2);
        assert_eq!(s.levels[0].y[2], DimName::Broadcast);
        assert_eq!(s.to_string(), "xy -> xy* ; zw -> z");
        let s: DistributionSpec = "i,j -> i,0".parse().unwrap();
        assert_eq!(s.levels[0].y[1], DimName::Fixed(0));
        assert!("xy".parse::<DistributionSpec>().is_err());
        let scalar: DistributionSpec = " -> 0".parse().unwrap();
        assert!(scalar.levels[0].x.is_empty());
    }
}

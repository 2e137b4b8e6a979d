//! Scheduling commands as rewrites over CIN, a builder, and a line-oriented
//! text form.

use std::fmt;

use thiserror::Error;

use crate::cin::{CinStmt, Factor, Loop, Relation};
use crate::machine::Machine;
use crate::tensor::IndexVar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("unknown index variable {0}")]
    UnknownVar(String),
    #[error("variable {0} is already in use")]
    NonFreshVar(String),
    #[error("unknown tensor {0}")]
    UnknownTensor(String),
    #[error("variables {0:?} do not lie in one perfect loop nest")]
    NotContiguousNest(Vec<String>),
    #[error("reorder list {0:?} is not a permutation")]
    NotPermutation(Vec<String>),
    #[error("{targets} targets, {dist} distributed and {local} local variables for a {machine}-dimensional grid")]
    DimCountMismatch {
        targets: usize,
        dist: usize,
        local: usize,
        machine: usize,
    },
    #[error("rotation variable {0} is not bound above {1}")]
    IBelowT(String, String),
    #[error("variables {0:?} are not the innermost loops")]
    NotInnermost(Vec<String>),
    #[error("loop {0} is fixed to one iteration and cannot be transformed")]
    FixedLoop(String),
    #[error("chunk or part count must be positive")]
    ZeroFactor,
    #[error("compound distribute needs a machine")]
    NoMachine,
    #[error("machine has no level {0}")]
    BadLevel(usize),
    #[error("loop {0} is already targeted by {1}")]
    MarkedLoop(String, String),
    #[error("communicate needs at least one tensor")]
    NoTensors,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A perfect loop chain with its leaf and relations.
struct Nest {
    loops: Vec<Loop>,
    leaf: CinStmt,
    relations: Vec<Relation>,
}

impl Nest {
    fn from_stmt(s: CinStmt) -> Nest {
        let mut relations = Vec::new();
        let mut loops = Vec::new();
        let mut cur = s;
        loop {
            match cur {
                CinStmt::SuchThat { body, relations: r } => {
                    relations.extend(r);
                    cur = *body;
                }
                CinStmt::Forall { lp, body } => {
                    loops.push(lp);
                    cur = *body;
                }
                leaf => {
                    return Nest {
                        loops,
                        leaf,
                        relations,
                    }
                }
            }
        }
    }

    fn into_stmt(self) -> CinStmt {
        let body = self
            .loops
            .into_iter()
            .rev()
            .fold(self.leaf, |b, lp| CinStmt::forall(lp, b));
        if self.relations.is_empty() {
            body
        } else {
            CinStmt::such_that(body, self.relations)
        }
    }

    fn position(&self, v: &IndexVar) -> Option<usize> {
        self.loops.iter().position(|l| &l.var == v)
    }
}

fn branches(s: CinStmt) -> Vec<CinStmt> {
    match s {
        CinStmt::Seq(items) => items,
        other => vec![other],
    }
}

fn rebuild(mut items: Vec<CinStmt>) -> CinStmt {
    if items.len() == 1 {
        items.pop().unwrap()
    } else {
        CinStmt::Seq(items)
    }
}

fn branch_mentions(s: &CinStmt, v: &IndexVar) -> bool {
    s.loops().iter().any(|l| &l.var == v)
}

/// Applies `f` to the branch whose loop chain binds `v`.
fn on_branch(
    s: CinStmt,
    v: &IndexVar,
    f: impl FnOnce(&mut Nest) -> Result<(), ScheduleError>,
) -> Result<CinStmt, ScheduleError> {
    let mut items = branches(s);
    let idx = items
        .iter()
        .position(|b| branch_mentions(b, v))
        .ok_or_else(|| ScheduleError::UnknownVar(v.to_string()))?;
    let mut nest = Nest::from_stmt(items[idx].clone());
    if nest.position(v).is_none() {
        // bound deeper than the perfect chain
        return Err(ScheduleError::NotContiguousNest(vec![v.to_string()]));
    }
    f(&mut nest)?;
    items[idx] = nest.into_stmt();
    Ok(rebuild(items))
}

fn check_fresh(s: &CinStmt, vars: &[&IndexVar]) -> Result<(), ScheduleError> {
    let used = s.all_vars();
    for (n, v) in vars.iter().enumerate() {
        if used.contains(v) || vars[..n].contains(v) {
            return Err(ScheduleError::NonFreshVar(v.to_string()));
        }
    }
    Ok(())
}

fn loop_at<'a>(nest: &'a Nest, v: &IndexVar) -> (usize, &'a Loop) {
    let p = nest.position(v).expect("checked by on_branch");
    (p, &nest.loops[p])
}

/// Loops named by marker relations keep their identity; splitting them would
/// leave the marker dangling.
fn check_unmarked(nest: &Nest, i: &IndexVar) -> Result<(), ScheduleError> {
    for r in &nest.relations {
        let named = match r {
            Relation::Distribute(v) | Relation::Parallelize(v) | Relation::Communicate { at: v, .. } => v == i,
            Relation::LeafKernel { vars, .. } => vars.contains(i),
            _ => false,
        };
        if named {
            return Err(ScheduleError::MarkedLoop(i.to_string(), r.to_string()));
        }
    }
    Ok(())
}

/// `forall(i) S` becomes `forall(io) forall(ii) S s.t. split(i,io,ii,chunk)`.
pub fn split(s: CinStmt, i: &IndexVar, io: &IndexVar, ii: &IndexVar, chunk: usize) -> Result<CinStmt, ScheduleError> {
    if chunk == 0 {
        return Err(ScheduleError::ZeroFactor);
    }
    check_fresh(&s, &[io, ii])?;
    on_branch(s, i, |nest| {
        check_unmarked(nest, i)?;
        let (p, lp) = loop_at(nest, i);
        if lp.fixed.is_some() {
            return Err(ScheduleError::FixedLoop(i.to_string()));
        }
        let extent = lp.extent;
        nest.loops.splice(
            p..=p,
            [Loop::new(io.clone(), extent.div_ceil(chunk)), Loop::new(ii.clone(), chunk)],
        );
        nest.relations.push(Relation::Split {
            parent: i.clone(),
            outer: io.clone(),
            inner: ii.clone(),
            chunk,
            parent_extent: extent,
        });
        Ok(())
    })
}

/// Like [`split`] but fixes the outer extent to `parts`.
pub fn divide(
    s: CinStmt,
    i: &IndexVar,
    io: &IndexVar,
    ii: &IndexVar,
    parts: impl Into<Factor>,
) -> Result<CinStmt, ScheduleError> {
    let parts = parts.into();
    if parts.value == 0 {
        return Err(ScheduleError::ZeroFactor);
    }
    check_fresh(&s, &[io, ii])?;
    on_branch(s, i, |nest| {
        check_unmarked(nest, i)?;
        let (p, lp) = loop_at(nest, i);
        if lp.fixed.is_some() {
            return Err(ScheduleError::FixedLoop(i.to_string()));
        }
        let extent = lp.extent;
        nest.loops.splice(
            p..=p,
            [
                Loop::new(io.clone(), parts.value),
                Loop::new(ii.clone(), extent.div_ceil(parts.value)),
            ],
        );
        nest.relations.push(Relation::Divide {
            parent: i.clone(),
            outer: io.clone(),
            inner: ii.clone(),
            parts,
            parent_extent: extent,
        });
        Ok(())
    })
}

/// Permutes the named loops among the positions they occupy.
pub fn reorder(s: CinStmt, vars: &[IndexVar]) -> Result<CinStmt, ScheduleError> {
    let names = || vars.iter().map(|v| v.to_string()).collect::<Vec<_>>();
    for (n, v) in vars.iter().enumerate() {
        if vars[..n].contains(v) {
            return Err(ScheduleError::NotPermutation(names()));
        }
    }
    let Some(first) = vars.first() else {
        return Ok(s);
    };
    let all = s.all_vars();
    if let Some(v) = vars.iter().find(|v| !all.contains(v)) {
        return Err(ScheduleError::UnknownVar(v.to_string()));
    }
    on_branch(s, first, |nest| {
        let mut pos = Vec::with_capacity(vars.len());
        for v in vars {
            pos.push(
                nest.position(v)
                    .ok_or_else(|| ScheduleError::NotContiguousNest(names()))?,
            );
        }
        let mut slots = pos.clone();
        slots.sort_unstable();
        let taken: Vec<Loop> = pos.iter().map(|&p| nest.loops[p].clone()).collect();
        for (slot, lp) in slots.into_iter().zip(taken) {
            nest.loops[slot] = lp;
        }
        // a rotation's offsets must stay bound above its loop
        for r in &nest.relations {
            if let Relation::Rotate { over, result, .. } = r {
                if let Some(rp) = nest.position(result) {
                    for o in over {
                        if nest.position(o).is_some_and(|op| op > rp) {
                            return Err(ScheduleError::IBelowT(o.to_string(), result.to_string()));
                        }
                    }
                }
            }
        }
        Ok(())
    })
}

/// Marks a loop as distributed across processors.
pub fn distribute(s: CinStmt, i: &IndexVar) -> Result<CinStmt, ScheduleError> {
    on_branch(s, i, |nest| {
        nest.relations.push(Relation::Distribute(i.clone()));
        Ok(())
    })
}

/// Divides each target by the matching dimension of one machine level, moves
/// the outer loops above the inner ones and distributes them.
pub fn distribute_onto(
    mut s: CinStmt,
    targets: &[IndexVar],
    dist: &[IndexVar],
    local: &[IndexVar],
    machine: &Machine,
    level: usize,
) -> Result<CinStmt, ScheduleError> {
    if level >= machine.levels().len() {
        return Err(ScheduleError::BadLevel(level));
    }
    let dims = machine.level_dims(level);
    if targets.len() != dims.len() || dist.len() != dims.len() || local.len() != dims.len() {
        return Err(ScheduleError::DimCountMismatch {
            targets: targets.len(),
            dist: dist.len(),
            local: local.len(),
            machine: dims.len(),
        });
    }
    for (n, t) in targets.iter().enumerate() {
        let f = Factor::named(dims[n], machine.dim_label(level, n));
        s = divide(s, t, &dist[n], &local[n], f)?;
    }
    let order: Vec<IndexVar> = dist.iter().chain(local).cloned().collect();
    s = reorder(s, &order)?;
    for d in dist {
        s = distribute(s, d)?;
    }
    Ok(s)
}

/// Aggregates the data movement of `tensors` at each iteration of `i`.
pub fn communicate(s: CinStmt, tensors: &[String], i: &IndexVar) -> Result<CinStmt, ScheduleError> {
    if tensors.is_empty() {
        return Err(ScheduleError::NoTensors);
    }
    let known: Vec<String> = s.accesses().iter().map(|a| a.name().to_string()).collect();
    if let Some(t) = tensors.iter().find(|t| !known.contains(t)) {
        return Err(ScheduleError::UnknownTensor(t.clone()));
    }
    on_branch(s, i, |nest| {
        nest.relations.push(Relation::Communicate {
            tensors: tensors.to_vec(),
            at: i.clone(),
        });
        Ok(())
    })
}

/// Replaces loop `t` by `r` with `t = (r + sum(over)) mod extent(t)`.
pub fn rotate(s: CinStmt, t: &IndexVar, over: &[IndexVar], r: &IndexVar) -> Result<CinStmt, ScheduleError> {
    check_fresh(&s, &[r])?;
    on_branch(s, t, |nest| {
        let (tp, lp) = loop_at(nest, t);
        if lp.fixed.is_some() {
            return Err(ScheduleError::FixedLoop(t.to_string()));
        }
        for o in over {
            match nest.position(o) {
                Some(op) if op < tp => {}
                _ => return Err(ScheduleError::IBelowT(o.to_string(), t.to_string())),
            }
        }
        let extent = lp.extent;
        nest.loops[tp] = Loop::new(r.clone(), extent);
        for rel in nest.relations.iter_mut() {
            match rel {
                Relation::Communicate { at, .. } if at == t => *at = r.clone(),
                Relation::Distribute(v) | Relation::Parallelize(v) if v == t => *v = r.clone(),
                Relation::LeafKernel { vars, .. } => {
                    for v in vars.iter_mut().filter(|v| *v == t) {
                        *v = r.clone();
                    }
                }
                _ => {}
            }
        }
        nest.relations.push(Relation::Rotate {
            target: t.clone(),
            over: over.to_vec(),
            result: r.clone(),
            extent,
        });
        Ok(())
    })
}

/// Recorded only; the simulator does not model intra-processor parallelism.
pub fn parallelize(s: CinStmt, i: &IndexVar) -> Result<CinStmt, ScheduleError> {
    on_branch(s, i, |nest| {
        nest.relations.push(Relation::Parallelize(i.clone()));
        Ok(())
    })
}

/// Hands the innermost loops `vars` to a registered leaf kernel.
pub fn substitute_leaf(s: CinStmt, vars: &[IndexVar], kernel: &str) -> Result<CinStmt, ScheduleError> {
    let names = || vars.iter().map(|v| v.to_string()).collect::<Vec<_>>();
    let Some(first) = vars.first() else {
        return Err(ScheduleError::NotInnermost(names()));
    };
    on_branch(s, first, |nest| {
        let n = nest.loops.len();
        if vars.len() > n || nest.loops[n - vars.len()..].iter().zip(vars).any(|(l, v)| &l.var != v) {
            return Err(ScheduleError::NotInnermost(names()));
        }
        nest.relations.push(Relation::LeafKernel {
            vars: vars.to_vec(),
            kernel: kernel.to_string(),
        });
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Split {
        i: IndexVar,
        io: IndexVar,
        ii: IndexVar,
        chunk: usize,
    },
    Divide {
        i: IndexVar,
        io: IndexVar,
        ii: IndexVar,
        parts: usize,
    },
    Reorder(Vec<IndexVar>),
    Distribute(IndexVar),
    DistributeOnto {
        targets: Vec<IndexVar>,
        dist: Vec<IndexVar>,
        local: Vec<IndexVar>,
        level: usize,
    },
    Communicate {
        tensors: Vec<String>,
        at: IndexVar,
    },
    Rotate {
        t: IndexVar,
        over: Vec<IndexVar>,
        r: IndexVar,
    },
    Parallelize(IndexVar),
    Substitute {
        vars: Vec<IndexVar>,
        kernel: String,
    },
}

fn csv<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Text form, one command per line; parsed back by [`Schedule::parse`].
impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Split { i, io, ii, chunk } => write!(f, "split {i} {io} {ii} {chunk}"),
            Command::Divide { i, io, ii, parts } => write!(f, "divide {i} {io} {ii} {parts}"),
            Command::Reorder(v) => {
                let v: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "reorder {}", v.join(" "))
            }
            Command::Distribute(v) => write!(f, "distribute {v}"),
            Command::DistributeOnto {
                targets,
                dist,
                local,
                level,
            } => {
                write!(f, "distribute {} {} {}", csv(targets), csv(dist), csv(local))?;
                if *level > 0 {
                    write!(f, " @{level}")?;
                }
                Ok(())
            }
            Command::Communicate { tensors, at } => write!(f, "communicate {} {at}", csv(tensors)),
            Command::Rotate { t, over, r } => {
                let over = if over.is_empty() { "-".to_string() } else { csv(over) };
                write!(f, "rotate {t} {over} {r}")
            }
            Command::Parallelize(v) => write!(f, "parallelize {v}"),
            Command::Substitute { vars, kernel } => write!(f, "substitute {} {kernel}", csv(vars)),
        }
    }
}

impl Command {
    pub fn apply(&self, s: CinStmt, machine: Option<&Machine>) -> Result<CinStmt, ScheduleError> {
        match self {
            Command::Split { i, io, ii, chunk } => split(s, i, io, ii, *chunk),
            Command::Divide { i, io, ii, parts } => divide(s, i, io, ii, *parts),
            Command::Reorder(v) => reorder(s, v),
            Command::Distribute(v) => distribute(s, v),
            Command::DistributeOnto {
                targets,
                dist,
                local,
                level,
            } => {
                let m = machine.ok_or(ScheduleError::NoMachine)?;
                distribute_onto(s, targets, dist, local, m, *level)
            }
            Command::Communicate { tensors, at } => communicate(s, tensors, at),
            Command::Rotate { t, over, r } => rotate(s, t, over, r),
            Command::Parallelize(v) => parallelize(s, v),
            Command::Substitute { vars, kernel } => substitute_leaf(s, vars, kernel),
        }
    }
}

fn vlist(names: &[&str]) -> Vec<IndexVar> {
    names.iter().map(|n| IndexVar::new(*n)).collect()
}

/// An ordered list of commands, built fluently.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Schedule {
    commands: Vec<Command>,
}

impl Schedule {
    pub fn new() -> Self {
        Schedule::default()
    }

    pub fn commands(&self) -> &[Command] {
        &self.commands
    }

    pub fn push(mut self, c: Command) -> Self {
        self.commands.push(c);
        self
    }

    pub fn split(self, i: &str, io: &str, ii: &str, chunk: usize) -> Self {
        self.push(Command::Split {
            i: i.into(),
            io: io.into(),
            ii: ii.into(),
            chunk,
        })
    }

    pub fn divide(self, i: &str, io: &str, ii: &str, parts: usize) -> Self {
        self.push(Command::Divide {
            i: i.into(),
            io: io.into(),
            ii: ii.into(),
            parts,
        })
    }

    pub fn reorder(self, vars: &[&str]) -> Self {
        self.push(Command::Reorder(vlist(vars)))
    }

    pub fn distribute(self, v: &str) -> Self {
        self.push(Command::Distribute(v.into()))
    }

    pub fn distribute_onto(self, targets: &[&str], dist: &[&str], local: &[&str]) -> Self {
        self.distribute_onto_level(targets, dist, local, 0)
    }

    pub fn distribute_onto_level(self, targets: &[&str], dist: &[&str], local: &[&str], level: usize) -> Self {
        self.push(Command::DistributeOnto {
            targets: vlist(targets),
            dist: vlist(dist),
            local: vlist(local),
            level,
        })
    }

    pub fn communicate(self, tensors: &[&str], at: &str) -> Self {
        self.push(Command::Communicate {
            tensors: tensors.iter().map(|t| t.to_string()).collect(),
            at: at.into(),
        })
    }

    pub fn rotate(self, t: &str, over: &[&str], r: &str) -> Self {
        self.push(Command::Rotate {
            t: t.into(),
            over: vlist(over),
            r: r.into(),
        })
    }

    pub fn parallelize(self, v: &str) -> Self {
        self.push(Command::Parallelize(v.into()))
    }

    pub fn substitute(self, vars: &[&str], kernel: &str) -> Self {
        self.push(Command::Substitute {
            vars: vlist(vars),
            kernel: kernel.to_string(),
        })
    }

    pub fn apply(&self, s: CinStmt, machine: Option<&Machine>) -> Result<CinStmt, ScheduleError> {
        self.commands.iter().try_fold(s, |s, c| c.apply(s, machine))
    }

    /// Like [`Schedule::apply`], also returning the statement after each command.
    pub fn apply_traced(
        &self,
        s: CinStmt,
        machine: Option<&Machine>,
    ) -> Result<Vec<(String, CinStmt)>, ScheduleError> {
        let mut out = Vec::with_capacity(self.commands.len());
        let mut cur = s;
        for c in &self.commands {
            cur = c.apply(cur, machine)?;
            out.push((c.to_string(), cur.clone()));
        }
        Ok(out)
    }

    /// Parses the text form. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Schedule, ScheduleError> {
        let mut sched = Schedule::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            sched.commands.push(parse_command(line).map_err(|msg| ScheduleError::Parse {
                line: n + 1,
                msg,
            })?);
        }
        Ok(sched)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.commands {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

fn list(tok: &str) -> Vec<IndexVar> {
    if tok == "-" {
        return Vec::new();
    }
    tok.trim_matches(|c| c == '{' || c == '}')
        .split(',')
        .filter(|s| !s.is_empty())
        .map(IndexVar::new)
        .collect()
}

fn parse_command(line: &str) -> Result<Command, String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("expected a number, got {s:?}"));
    let arity = |n: usize| {
        if toks.len() == n + 1 {
            Ok(())
        } else {
            Err(format!("{} expects {n} arguments", toks[0]))
        }
    };
    match toks[0] {
        "split" | "divide" => {
            arity(4)?;
            let (i, io, ii, n) = (toks[1].into(), toks[2].into(), toks[3].into(), num(toks[4])?);
            Ok(if toks[0] == "split" {
                Command::Split { i, io, ii, chunk: n }
            } else {
                Command::Divide { i, io, ii, parts: n }
            })
        }
        "reorder" => Ok(Command::Reorder(toks[1..].iter().flat_map(|t| list(t)).collect())),
        "distribute" => match toks.len() {
            2 => Ok(Command::Distribute(toks[1].into())),
            4 | 5 => {
                let level = match toks.get(4) {
                    Some(l) => num(l.trim_start_matches('@'))?,
                    None => 0,
                };
                Ok(Command::DistributeOnto {
                    targets: list(toks[1]),
                    dist: list(toks[2]),
                    local: list(toks[3]),
                    level,
                })
            }
            _ => Err("distribute expects 1 or 3 arguments".into()),
        },
        "communicate" => {
            arity(2)?;
            Ok(Command::Communicate {
                tensors: list(toks[1]).into_iter().map(|v| v.name().to_string()).collect(),
                at: toks[2].into(),
            })
        }
        "rotate" => {
            arity(3)?;
            Ok(Command::Rotate {
                t: toks[1].into(),
                over: list(toks[2]),
                r: toks[3].into(),
            })
        }
        "parallelize" => {
            arity(1)?;
            Ok(Command::Parallelize(toks[1].into()))
        }
        "substitute" => {
            arity(2)?;
            Ok(Command::Substitute {
                vars: list(toks[1]),
                kernel: toks[2].to_string(),
            })
        }
        other => Err(format!("unknown command {other:?}")),
    }
}

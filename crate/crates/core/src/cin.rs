//! Concrete index notation: forall nests, assignments, sequencing and the
//! `s.t.` relation list, plus a single-memory interpreter.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Access, DenseTensor, Expr, IndexVar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CinError {
    #[error("variable {0} is not bound by a loop or relation")]
    UnboundVariable(String),
    #[error("access {access} at {coord:?} is out of bounds")]
    OutOfBounds { access: String, coord: Vec<usize> },
    #[error("tensor {0} is not present in the store")]
    MissingTensor(String),
    #[error("leaf kernel {0} failed: {1}")]
    Kernel(String, String),
    #[error("ill-formed statement: {0}")]
    IllFormed(String),
}

/// A loop bound. `fixed` restricts the loop to a single iteration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Loop {
    pub var: IndexVar,
    pub extent: usize,
    pub fixed: Option<usize>,
}

impl Loop {
    pub fn new(var: IndexVar, extent: usize) -> Self {
        Loop {
            var,
            extent,
            fixed: None,
        }
    }

    pub fn fixed_at(var: IndexVar, extent: usize, value: usize) -> Self {
        Loop {
            var,
            extent,
            fixed: Some(value),
        }
    }

    /// Iteration values in order.
    pub fn range(&self) -> std::ops::Range<usize> {
        match self.fixed {
            Some(c) => c..c + 1,
            None => 0..self.extent,
        }
    }
}

/// A numeric parameter that prints with a symbolic label when it has one
/// (e.g. machine dimension `gx`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub value: usize,
    pub label: Option<String>,
}

impl Factor {
    pub fn lit(value: usize) -> Self {
        Factor { value, label: None }
    }

    pub fn named(value: usize, label: impl Into<String>) -> Self {
        Factor {
            value,
            label: Some(label.into()),
        }
    }
}

impl From<usize> for Factor {
    fn from(v: usize) -> Self {
        Factor::lit(v)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.label {
            Some(l) => f.write_str(l),
            None => write!(f, "{}", self.value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Relation {
    /// `parent = outer * ceil(parent_extent / parts) + inner`, outer extent = parts.
    Divide {
        parent: IndexVar,
        outer: IndexVar,
        inner: IndexVar,
        parts: Factor,
        parent_extent: usize,
    },
    /// `parent = outer * chunk + inner`, inner extent = chunk.
    Split {
        parent: IndexVar,
        outer: IndexVar,
        inner: IndexVar,
        chunk: usize,
        parent_extent: usize,
    },
    Distribute(IndexVar),
    /// `target = (result + sum(over)) mod extent`.
    Rotate {
        target: IndexVar,
        over: Vec<IndexVar>,
        result: IndexVar,
        extent: usize,
    },
    Communicate {
        tensors: Vec<String>,
        at: IndexVar,
    },
    Parallelize(IndexVar),
    LeafKernel {
        vars: Vec<IndexVar>,
        kernel: String,
    },
}

impl Relation {
    /// The variable this relation defines in terms of loop variables, if any.
    pub fn defines(&self) -> Option<&IndexVar> {
        match self {
            Relation::Divide { parent, .. } | Relation::Split { parent, .. } => Some(parent),
            Relation::Rotate { target, .. } => Some(target),
            _ => None,
        }
    }

    /// Every variable named by the relation.
    pub fn mentioned(&self) -> Vec<&IndexVar> {
        match self {
            Relation::Divide {
                parent,
                outer,
                inner,
                ..
            }
            | Relation::Split {
                parent,
                outer,
                inner,
                ..
            } => vec![parent, outer, inner],
            Relation::Distribute(v) | Relation::Parallelize(v) => vec![v],
            Relation::Rotate {
                target,
                over,
                result,
                ..
            } => {
                let mut v = vec![target, result];
                v.extend(over);
                v
            }
            Relation::Communicate { at, .. } => vec![at],
            Relation::LeafKernel { vars, .. } => vars.iter().collect(),
        }
    }
}

fn fmt_var_set(f: &mut fmt::Formatter<'_>, items: &[String]) -> fmt::Result {
    if items.len() == 1 {
        f.write_str(&items[0])
    } else {
        write!(f, "{{{}}}", items.join(","))
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Relation::Divide {
                parent,
                outer,
                inner,
                parts,
                ..
            } => write!(f, "divide({parent},{outer},{inner},{parts})"),
            Relation::Split {
                parent,
                outer,
                inner,
                chunk,
                ..
            } => write!(f, "split({parent},{outer},{inner},{chunk})"),
            Relation::Distribute(v) => write!(f, "distribute({v})"),
            Relation::Rotate {
                target,
                over,
                result,
                ..
            } => {
                let over: Vec<String> = over.iter().map(|v| v.to_string()).collect();
                write!(f, "rotate({target},{{{}}},{result})", over.join(","))
            }
            Relation::Communicate { tensors, at } => {
                f.write_str("communicate(")?;
                fmt_var_set(f, tensors)?;
                write!(f, ",{at})")
            }
            Relation::Parallelize(v) => write!(f, "parallelize({v})"),
            Relation::LeafKernel { vars, kernel } => {
                let vs: Vec<String> = vars.iter().map(|v| v.to_string()).collect();
                write!(f, "substitute({{{}}},{kernel})", vs.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CinStmt {
    Forall { lp: Loop, body: Box<CinStmt> },
    Assign { lhs: Access, rhs: Expr },
    Reduce { lhs: Access, rhs: Expr },
    /// A bare access; materializes the accessed data where it executes.
    Touch(Access),
    Seq(Vec<CinStmt>),
    SuchThat {
        body: Box<CinStmt>,
        relations: Vec<Relation>,
    },
}

impl CinStmt {
    pub fn forall(lp: Loop, body: CinStmt) -> CinStmt {
        CinStmt::Forall {
            lp,
            body: Box::new(body),
        }
    }

    pub fn such_that(body: CinStmt, relations: Vec<Relation>) -> CinStmt {
        CinStmt::SuchThat {
            body: Box::new(body),
            relations,
        }
    }

    /// Outermost-to-innermost loop variables. For a `Seq`, the branches'
    /// lists are concatenated; use [`CinStmt::branch_loop_orders`] to keep
    /// them apart.
    pub fn loop_nest_order(&self) -> Vec<IndexVar> {
        self.branch_loop_orders().concat()
    }

    pub fn branch_loop_orders(&self) -> Vec<Vec<IndexVar>> {
        match self {
            CinStmt::Seq(items) => items.iter().flat_map(|s| s.branch_loop_orders()).collect(),
            _ => {
                let mut out = Vec::new();
                self.collect_loops(&mut out);
                vec![out]
            }
        }
    }

    fn collect_loops(&self, out: &mut Vec<IndexVar>) {
        match self {
            CinStmt::Forall { lp, body } => {
                out.push(lp.var.clone());
                body.collect_loops(out);
            }
            CinStmt::SuchThat { body, .. } => body.collect_loops(out),
            CinStmt::Seq(items) => items.iter().for_each(|s| s.collect_loops(out)),
            _ => {}
        }
    }

    /// All loops in the statement, in pre-order.
    pub fn loops(&self) -> Vec<&Loop> {
        let mut out = Vec::new();
        fn go<'a>(s: &'a CinStmt, out: &mut Vec<&'a Loop>) {
            match s {
                CinStmt::Forall { lp, body } => {
                    out.push(lp);
                    go(body, out);
                }
                CinStmt::SuchThat { body, .. } => go(body, out),
                CinStmt::Seq(items) => items.iter().for_each(|s| go(s, out)),
                _ => {}
            }
        }
        go(self, &mut out);
        out
    }

    /// Every relation in the statement, outermost first.
    pub fn relations(&self) -> Vec<&Relation> {
        let mut out = Vec::new();
        fn go<'a>(s: &'a CinStmt, out: &mut Vec<&'a Relation>) {
            match s {
                CinStmt::Forall { body, .. } => go(body, out),
                CinStmt::SuchThat { body, relations } => {
                    out.extend(relations);
                    go(body, out);
                }
                CinStmt::Seq(items) => items.iter().for_each(|s| go(s, out)),
                _ => {}
            }
        }
        go(self, &mut out);
        out
    }

    /// Leaf statements (assignments, reductions, touches).
    pub fn leaves(&self) -> Vec<&CinStmt> {
        let mut out = Vec::new();
        fn go<'a>(s: &'a CinStmt, out: &mut Vec<&'a CinStmt>) {
            match s {
                CinStmt::Forall { body, .. } | CinStmt::SuchThat { body, .. } => go(body, out),
                CinStmt::Seq(items) => items.iter().for_each(|s| go(s, out)),
                leaf => out.push(leaf),
            }
        }
        go(self, &mut out);
        out
    }

    /// Accesses made by the leaves, lhs first within each leaf.
    pub fn accesses(&self) -> Vec<&Access> {
        let mut out = Vec::new();
        for leaf in self.leaves() {
            match leaf {
                CinStmt::Assign { lhs, rhs } | CinStmt::Reduce { lhs, rhs } => {
                    out.push(lhs);
                    out.extend(rhs.accesses());
                }
                CinStmt::Touch(a) => out.push(a),
                _ => {}
            }
        }
        out
    }

    /// Every variable name used anywhere in the statement.
    pub fn all_vars(&self) -> Vec<IndexVar> {
        let mut out: Vec<IndexVar> = Vec::new();
        let mut add = |v: &IndexVar| {
            if !out.contains(v) {
                out.push(v.clone());
            }
        };
        for lp in self.loops() {
            add(&lp.var);
        }
        for r in self.relations() {
            r.mentioned().into_iter().for_each(&mut add);
        }
        for a in self.accesses() {
            a.indices.iter().for_each(&mut add);
        }
        out
    }

    /// Structural checks per branch: loop variables bound once, relations
    /// define each variable at most once and only in terms of loop variables
    /// (without cycles), marker relations name loops, and every access index
    /// resolves.
    pub fn check_well_formed(&self) -> Result<(), CinError> {
        if let CinStmt::Seq(items) = self {
            return items.iter().try_for_each(|s| s.check_well_formed());
        }
        let bad = |m: String| Err(CinError::IllFormed(m));
        let loops: Vec<&IndexVar> = self.loops().into_iter().map(|l| &l.var).collect();
        for (n, v) in loops.iter().enumerate() {
            if loops[..n].contains(v) {
                return bad(format!("loop {v} bound twice"));
            }
        }
        let rels = self.relations();
        let mut defs: BTreeMap<&IndexVar, &Relation> = BTreeMap::new();
        for r in &rels {
            if let Some(v) = r.defines() {
                if loops.contains(&v) || defs.insert(v, r).is_some() {
                    return bad(format!("{v} defined twice"));
                }
            }
        }
        fn resolvable<'a>(
            v: &'a IndexVar,
            loops: &[&IndexVar],
            defs: &BTreeMap<&'a IndexVar, &'a Relation>,
            depth: usize,
        ) -> bool {
            if loops.contains(&v) {
                return true;
            }
            if depth > defs.len() {
                return false;
            }
            let deps: Vec<&IndexVar> = match defs.get(v) {
                Some(Relation::Divide { outer, inner, .. }) | Some(Relation::Split { outer, inner, .. }) => {
                    vec![outer, inner]
                }
                Some(Relation::Rotate { over, result, .. }) => over.iter().chain([result]).collect(),
                _ => return false,
            };
            deps.into_iter().all(|d| resolvable(d, loops, defs, depth + 1))
        }
        for r in &rels {
            let named: Vec<&IndexVar> = match r {
                Relation::Distribute(v) | Relation::Parallelize(v) | Relation::Communicate { at: v, .. } => vec![v],
                Relation::LeafKernel { vars, .. } => vars.iter().collect(),
                _ => r.mentioned().into_iter().filter(|v| !defs.contains_key(v)).collect(),
            };
            if let Some(v) = named.into_iter().find(|v| !loops.contains(v)) {
                return bad(format!("{r} names {v}, which is not a loop"));
            }
        }
        for a in self.accesses() {
            if let Some(v) = a.indices.iter().find(|v| !resolvable(v, &loops, &defs, 0)) {
                return bad(format!("index {v} of {a} does not resolve"));
            }
        }
        Ok(())
    }

    /// Merges nested `s.t.` clauses into the outermost one of each branch.
    pub fn canonicalize(self) -> CinStmt {
        match self {
            CinStmt::Seq(items) => CinStmt::Seq(items.into_iter().map(|s| s.canonicalize()).collect()),
            other => {
                let mut rels = Vec::new();
                let body = strip_such_that(other, &mut rels);
                if rels.is_empty() {
                    body
                } else {
                    CinStmt::such_that(body, rels)
                }
            }
        }
    }
}

fn strip_such_that(s: CinStmt, rels: &mut Vec<Relation>) -> CinStmt {
    match s {
        CinStmt::SuchThat { body, relations } => {
            rels.extend(relations);
            strip_such_that(*body, rels)
        }
        CinStmt::Forall { lp, body } => CinStmt::forall(lp, strip_such_that(*body, rels)),
        // nested sequences keep their own clauses
        other => other.canonicalize_inner(),
    }
}

impl CinStmt {
    fn canonicalize_inner(self) -> CinStmt {
        match self {
            CinStmt::Seq(items) => CinStmt::Seq(items.into_iter().map(|s| s.canonicalize()).collect()),
            other => other,
        }
    }
}

impl fmt::Display for CinStmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CinStmt::Forall { lp, body } => {
                match lp.fixed {
                    Some(c) => write!(f, "forall({}={c}) ", lp.var)?,
                    None => write!(f, "forall({}) ", lp.var)?,
                }
                write!(f, "{body}")
            }
            CinStmt::Assign { lhs, rhs } => write!(f, "{lhs} = {rhs}"),
            CinStmt::Reduce { lhs, rhs } => write!(f, "{lhs} += {rhs}"),
            CinStmt::Touch(a) => write!(f, "{a}"),
            CinStmt::Seq(items) => {
                for (n, s) in items.iter().enumerate() {
                    if n > 0 {
                        f.write_str(" ; ")?;
                    }
                    write!(f, "{s}")?;
                }
                Ok(())
            }
            CinStmt::SuchThat { body, relations } => {
                write!(f, "{body}")?;
                if !relations.is_empty() {
                    f.write_str(" s.t. ")?;
                    for (n, r) in relations.iter().enumerate() {
                        if n > 0 {
                            f.write_str(", ")?;
                        }
                        write!(f, "{r}")?;
                    }
                }
                Ok(())
            }
        }
    }
}

/// Loop-variable bindings, innermost last.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Env(Vec<(IndexVar, usize)>);

impl Env {
    pub fn new() -> Self {
        Env(Vec::new())
    }

    pub fn get(&self, v: &IndexVar) -> Option<usize> {
        self.0.iter().rev().find(|(k, _)| k == v).map(|(_, x)| *x)
    }

    pub fn push(&mut self, v: IndexVar, x: usize) {
        self.0.push((v, x));
    }

    pub fn pop(&mut self) {
        self.0.pop();
    }

    pub fn set_last(&mut self, x: usize) {
        if let Some(last) = self.0.last_mut() {
            last.1 = x;
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.0.truncate(n);
    }

    pub fn iter(&self) -> impl Iterator<Item = &(IndexVar, usize)> {
        self.0.iter()
    }
}

impl FromIterator<(IndexVar, usize)> for Env {
    fn from_iter<T: IntoIterator<Item = (IndexVar, usize)>>(iter: T) -> Self {
        Env(iter.into_iter().collect())
    }
}

/// Recovers derived variables (divided, split, rotated) from loop variables.
#[derive(Clone, Debug, Default)]
pub struct Resolver {
    defs: BTreeMap<IndexVar, Relation>,
    guarded: Vec<IndexVar>,
}

impl Resolver {
    pub fn new<'a>(relations: impl IntoIterator<Item = &'a Relation>) -> Self {
        let mut defs = BTreeMap::new();
        let mut guarded = Vec::new();
        for r in relations {
            if let Some(v) = r.defines() {
                if matches!(r, Relation::Divide { .. } | Relation::Split { .. }) {
                    guarded.push(v.clone());
                }
                defs.insert(v.clone(), r.clone());
            }
        }
        Resolver { defs, guarded }
    }

    pub fn for_stmt(stmt: &CinStmt) -> Self {
        Resolver::new(stmt.relations())
    }

    pub fn definition(&self, v: &IndexVar) -> Option<&Relation> {
        self.defs.get(v)
    }

    /// Value of `v`, or `None` when the point lies in a ragged tail
    /// (a divided/split variable reconstructs past its extent).
    pub fn resolve(&self, v: &IndexVar, env: &Env) -> Result<Option<usize>, CinError> {
        if let Some(x) = env.get(v) {
            return Ok(Some(x));
        }
        let rel = self
            .defs
            .get(v)
            .ok_or_else(|| CinError::UnboundVariable(v.to_string()))?;
        match rel {
            Relation::Divide {
                outer,
                inner,
                parts,
                parent_extent,
                ..
            } => {
                let inner_extent = parent_extent.div_ceil(parts.value);
                self.affine(outer, inner, inner_extent, *parent_extent, env)
            }
            Relation::Split {
                outer,
                inner,
                chunk,
                parent_extent,
                ..
            } => self.affine(outer, inner, *chunk, *parent_extent, env),
            Relation::Rotate {
                over,
                result,
                extent,
                ..
            } => {
                let Some(mut x) = self.resolve(result, env)? else {
                    return Ok(None);
                };
                for o in over {
                    match self.resolve(o, env)? {
                        Some(y) => x += y,
                        None => return Ok(None),
                    }
                }
                Ok(Some(x % extent))
            }
            _ => unreachable!("only defining relations are stored"),
        }
    }

    fn affine(
        &self,
        outer: &IndexVar,
        inner: &IndexVar,
        stride: usize,
        extent: usize,
        env: &Env,
    ) -> Result<Option<usize>, CinError> {
        let (Some(o), Some(i)) = (self.resolve(outer, env)?, self.resolve(inner, env)?) else {
            return Ok(None);
        };
        let x = o * stride + i;
        Ok((x < extent).then_some(x))
    }

    /// True when every divided/split variable reconstructs within its extent.
    pub fn in_bounds(&self, env: &Env) -> Result<bool, CinError> {
        for v in &self.guarded {
            if self.resolve(v, env)?.is_none() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Coordinate of an access, or `None` for a ragged-tail point.
    pub fn coord(&self, a: &Access, env: &Env) -> Result<Option<Vec<usize>>, CinError> {
        let mut out = Vec::with_capacity(a.indices.len());
        for v in &a.indices {
            match self.resolve(v, env)? {
                Some(x) => out.push(x),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }
}

/// Tensor storage seen by a leaf.
pub trait Store {
    fn read(&self, access: &Access, coord: &[usize]) -> Result<f64, CinError>;
    /// Writes (`accumulate == false`) or adds into an element.
    fn write(&mut self, access: &Access, coord: &[usize], value: f64, accumulate: bool)
        -> Result<(), CinError>;
}

/// Single memory holding whole tensors by name.
pub type TensorStore = BTreeMap<String, DenseTensor>;

fn checked_index(t: &DenseTensor, a: &Access, coord: &[usize]) -> Result<usize, CinError> {
    if coord.len() != t.dims().len() || coord.iter().zip(t.dims()).any(|(c, d)| c >= d) {
        return Err(CinError::OutOfBounds {
            access: a.to_string(),
            coord: coord.to_vec(),
        });
    }
    Ok(t.linear_index(coord))
}

impl Store for TensorStore {
    fn read(&self, a: &Access, coord: &[usize]) -> Result<f64, CinError> {
        let t = self
            .get(a.name())
            .ok_or_else(|| CinError::MissingTensor(a.name().to_string()))?;
        Ok(t.data()[checked_index(t, a, coord)?])
    }

    fn write(&mut self, a: &Access, coord: &[usize], value: f64, accumulate: bool) -> Result<(), CinError> {
        let t = self
            .get_mut(a.name())
            .ok_or_else(|| CinError::MissingTensor(a.name().to_string()))?;
        let n = checked_index(t, a, coord)?;
        if accumulate {
            t.data_mut()[n] += value;
        } else {
            t.data_mut()[n] = value;
        }
        Ok(())
    }
}

/// Executes one leaf at the current point. Ragged-tail points are skipped.
pub fn exec_leaf(
    leaf: &CinStmt,
    resolver: &Resolver,
    env: &Env,
    store: &mut dyn Store,
) -> Result<(), CinError> {
    if !resolver.in_bounds(env)? {
        return Ok(());
    }
    let (lhs, rhs, accumulate) = match leaf {
        CinStmt::Assign { lhs, rhs } => (lhs, rhs, false),
        CinStmt::Reduce { lhs, rhs } => (lhs, rhs, true),
        CinStmt::Touch(a) => {
            if let Some(c) = resolver.coord(a, env)? {
                store.read(a, &c)?;
            }
            return Ok(());
        }
        _ => return Ok(()),
    };
    let Some(out) = resolver.coord(lhs, env)? else {
        return Ok(());
    };
    let mut ragged = false;
    let value = rhs.eval(&mut |a: &Access| -> Result<f64, CinError> {
        match resolver.coord(a, env)? {
            Some(c) => store.read(a, &c),
            None => {
                ragged = true;
                Ok(0.0)
            }
        }
    })?;
    if ragged {
        return Ok(());
    }
    store.write(lhs, &out, value, accumulate)
}

/// Walks the loop structure, calling `visit` at each leaf with the loop
/// bindings. `SuchThat` nodes are transparent.
pub fn walk<E>(
    stmt: &CinStmt,
    env: &mut Env,
    visit: &mut impl FnMut(&CinStmt, &Env) -> Result<(), E>,
) -> Result<(), E> {
    match stmt {
        CinStmt::Forall { lp, body } => {
            env.push(lp.var.clone(), 0);
            for x in lp.range() {
                env.set_last(x);
                walk(body, env, visit)?;
            }
            env.pop();
            Ok(())
        }
        CinStmt::SuchThat { body, .. } => walk(body, env, visit),
        CinStmt::Seq(items) => {
            for s in items {
                walk(s, env, visit)?;
            }
            Ok(())
        }
        leaf => visit(leaf, env),
    }
}

/// Interprets `stmt` against a single memory. Output tensors missing from
/// the store are created zero-filled. Scheduling relations other than the
/// variable-defining ones have no effect here.
pub fn interpret(stmt: &CinStmt, store: &mut TensorStore) -> Result<(), CinError> {
    for leaf in stmt.leaves() {
        if let CinStmt::Assign { lhs, .. } | CinStmt::Reduce { lhs, .. } = leaf {
            store
                .entry(lhs.name().to_string())
                .or_insert_with(|| DenseTensor::zeros(lhs.tensor.dims()));
        }
    }
    let resolver = Resolver::for_stmt(stmt);
    walk(stmt, &mut Env::new(), &mut |leaf, env| {
        exec_leaf(leaf, &resolver, env, store)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{build_statement, lower_to_cin, sequential_evaluate, TensorVar};

    fn gemm_inputs(n: usize) -> (crate::tensor::TensorIndexStmt, TensorStore) {
        let a = TensorVar::new("A", vec![n, n]).unwrap();
        let b = TensorVar::new("B", vec![n, n]).unwrap();
        let c = TensorVar::new("C", vec![n, n]).unwrap();
        let s = build_statement(
            a.at(&["i", "j"]),
            Expr::from(b.at(&["i", "k"])) * c.at(&["k", "j"]).into(),
        )
        .unwrap();
        let mut store = TensorStore::new();
        store.insert("B".into(), DenseTensor::from_fn(&[n, n], |c| (c[0] * 3 + c[1]) as f64 - 4.0));
        store.insert("C".into(), DenseTensor::from_fn(&[n, n], |c| (c[0] + 2 * c[1]) as f64 % 5.0));
        (s, store)
    }

    #[test]
    fn interpreting_lowered_gemm_matches_oracle() {
        let (s, mut store) = gemm_inputs(2);
        let expected = sequential_evaluate(&s, &store).unwrap();
        interpret(&lower_to_cin(&s), &mut store).unwrap();
        assert!(store["A"].bit_eq(&expected));
    }

    #[test]
    fn split_enumerates_each_point_once() {
        // extent 12 split by 5: (ko,ki) pairs with ko*5+ki < 12
        let mut oracle = 0;
        for ko in 0..3 {
            for ki in 0..5 {
                if ko * 5 + ki < 12 {
                    oracle += 1;
                }
            }
        }
        assert_eq!(oracle, 12);
        let rel = Relation::Split {
            parent: "k".into(),
            outer: "ko".into(),
            inner: "ki".into(),
            chunk: 5,
            parent_extent: 12,
        };
        let r = Resolver::new([&rel]);
        let mut hits = Vec::new();
        for ko in 0..3 {
            for ki in 0..5 {
                let env: Env = [("ko".into(), ko), ("ki".into(), ki)].into_iter().collect();
                if let Some(k) = r.resolve(&"k".into(), &env).unwrap() {
                    hits.push(k);
                }
            }
        }
        assert_eq!(hits, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn rotation_offsets_start() {
        let rel = Relation::Rotate {
            target: "t".into(),
            over: vec!["i".into()],
            result: "r".into(),
            extent: 3,
        };
        let res = Resolver::new([&rel]);
        let seq: Vec<usize> = (0..3)
            .map(|r| {
                let env: Env = [("i".into(), 2), ("r".into(), r)].into_iter().collect();
                res.resolve(&"t".into(), &env).unwrap().unwrap()
            })
            .collect();
        assert_eq!(seq, vec![2, 0, 1]);
    }

    #[test]
    fn unbound_variable_reported() {
        let a = TensorVar::new("a", vec![2]).unwrap();
        let stmt = CinStmt::Touch(a.at(&["q"]));
        let err = interpret(&stmt, &mut TensorStore::new()).unwrap_err();
        assert_eq!(err, CinError::UnboundVariable("q".into()));
    }

    #[test]
    fn loop_orders() {
        let (s, _) = gemm_inputs(2);
        let cin = lower_to_cin(&s);
        assert_eq!(cin.loop_nest_order(), crate::tensor::vars(&["i", "j", "k"]));
        let seq = CinStmt::Seq(vec![cin.clone(), cin]);
        assert_eq!(seq.branch_loop_orders().len(), 2);
    }

    #[test]
    fn printer_matches_notation() {
        let t = TensorVar::new("T", vec![4, 4]).unwrap();
        let body = CinStmt::forall(
            Loop::new("xo".into(), 2),
            CinStmt::forall(
                Loop::new("xi".into(), 2),
                CinStmt::forall(Loop::new("y".into(), 4), CinStmt::Touch(t.at(&["x", "y"]))),
            ),
        );
        let s = CinStmt::such_that(
            body,
            vec![
                Relation::Divide {
                    parent: "x".into(),
                    outer: "xo".into(),
                    inner: "xi".into(),
                    parts: Factor::named(2, "gx"),
                    parent_extent: 4,
                },
                Relation::Distribute("xo".into()),
                Relation::Communicate {
                    tensors: vec!["T".into()],
                    at: "xo".into(),
                },
            ],
        );
        assert_eq!(
            s.to_string(),
            "forall(xo) forall(xi) forall(y) T(x,y) s.t. divide(x,xo,xi,gx), distribute(xo), communicate(T,xo)"
        );
    }

    #[test]
    fn nested_such_that_flattened() {
        let t = TensorVar::new("T", vec![2]).unwrap();
        let inner = CinStmt::such_that(CinStmt::Touch(t.at(&["x"])), vec![Relation::Parallelize("x".into())]);
        let s = CinStmt::such_that(
            CinStmt::forall(Loop::new("x".into(), 2), inner),
            vec![Relation::Distribute("x".into())],
        )
        .canonicalize();
        assert_eq!(s.to_string(), "forall(x) T(x) s.t. distribute(x), parallelize(x)");
    }
}

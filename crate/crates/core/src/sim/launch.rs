//! Lowering a scheduled loop nest to index task launches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cin::{CinStmt, Env, Loop, Relation, Resolver, Store};
use crate::distribution::{HyperRect, TensorDistribution};
use crate::machine::{Machine, ProcCoord};
use crate::tensor::{for_each_coord, Access, DenseTensor, IndexVar};

use super::bounds::bounds_analysis;
use super::kernel::{interpret_loops, LocalKernel};
use super::trace::TaskRecord;
use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Privilege {
    Read,
    Write,
    ReduceSum,
}

/// Where a tensor's data movement is aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Once per task, before its first step.
    Task,
    /// At each iteration of body loop `d`.
    Body(usize),
}

/// A perfect nest split around its distributed loop group.
#[derive(Clone, Debug)]
pub struct LaunchPlan {
    pub outer: Vec<Loop>,
    pub dist: Vec<Loop>,
    pub body: Vec<Loop>,
    pub leaf: CinStmt,
    pub resolver: Resolver,
    /// Accesses of every non-output tensor, grouped by tensor.
    pub inputs: BTreeMap<String, Vec<Access>>,
    pub scopes: BTreeMap<String, Scope>,
    /// Number of leading body loops whose iterations are timesteps.
    pub step_depth: usize,
    pub output: Option<(Access, Privilege)>,
    /// Body index where a leaf kernel takes over, and its name.
    pub kernel: Option<(usize, String)>,
}

fn perfect_nest(s: &CinStmt) -> Result<(Vec<Loop>, CinStmt, Vec<Relation>), SimError> {
    let mut loops = Vec::new();
    let mut rels = Vec::new();
    let mut cur = s;
    loop {
        match cur {
            CinStmt::SuchThat { body, relations } => {
                rels.extend(relations.iter().cloned());
                cur = body;
            }
            CinStmt::Forall { lp, body } => {
                loops.push(lp.clone());
                cur = body;
            }
            CinStmt::Seq(_) => return Err(SimError::Unsupported("sequence nested inside a loop".into())),
            leaf => return Ok((loops, leaf.clone(), rels)),
        }
    }
}

/// True when `x`'s value depends on `v` through divide, split or the result
/// of a rotation.
fn derives(resolver: &Resolver, v: &IndexVar, x: &IndexVar) -> bool {
    if v == x {
        return true;
    }
    match resolver.definition(x) {
        Some(Relation::Divide { outer, inner, .. }) | Some(Relation::Split { outer, inner, .. }) => {
            derives(resolver, v, outer) || derives(resolver, v, inner)
        }
        Some(Relation::Rotate { result, .. }) => derives(resolver, v, result),
        _ => false,
    }
}

impl LaunchPlan {
    pub fn analyze(
        branch: &CinStmt,
        dists: &BTreeMap<String, TensorDistribution>,
        machine: &Machine,
    ) -> Result<LaunchPlan, SimError> {
        let (loops, leaf, relations) = perfect_nest(branch)?;
        let resolver = Resolver::new(relations.iter());
        let mut dpos: Vec<usize> = Vec::new();
        for r in &relations {
            if let Relation::Distribute(v) = r {
                let p = loops
                    .iter()
                    .position(|l| &l.var == v)
                    .ok_or_else(|| SimError::UnknownScope {
                        tensor: String::new(),
                        var: v.to_string(),
                    })?;
                if !dpos.contains(&p) {
                    dpos.push(p);
                }
            }
        }
        dpos.sort_unstable();
        let (outer, dist, body) = match (dpos.first(), dpos.last()) {
            (Some(&a), Some(&b)) => {
                if b - a + 1 != dpos.len() {
                    return Err(SimError::NonContiguousDistribution);
                }
                let domain: Vec<usize> = loops[a..=b].iter().map(|l| l.extent).collect();
                if domain != machine.flat_dims() {
                    return Err(SimError::GridMismatch {
                        domain,
                        machine: machine.flat_dims(),
                    });
                }
                (loops[..a].to_vec(), loops[a..=b].to_vec(), loops[b + 1..].to_vec())
            }
            _ => (Vec::new(), Vec::new(), loops),
        };

        let (output, rhs_accesses): (Option<&Access>, Vec<&Access>) = match &leaf {
            CinStmt::Assign { lhs, rhs } | CinStmt::Reduce { lhs, rhs } => (Some(lhs), rhs.accesses()),
            CinStmt::Touch(a) => (None, vec![a]),
            _ => return Err(SimError::Unsupported("leaf statement".into())),
        };
        let mut inputs: BTreeMap<String, Vec<Access>> = BTreeMap::new();
        for a in &rhs_accesses {
            if !dists.contains_key(a.name()) {
                return Err(SimError::MissingDistribution(a.name().to_string()));
            }
            let list = inputs.entry(a.name().to_string()).or_default();
            if !list.contains(a) {
                list.push((*a).clone());
            }
        }

        let locate = |tensor: &str, v: &IndexVar| -> Result<Scope, SimError> {
            if outer.iter().chain(&dist).any(|l| &l.var == v) {
                Ok(Scope::Task)
            } else if let Some(d) = body.iter().position(|l| &l.var == v) {
                Ok(Scope::Body(d))
            } else {
                Err(SimError::UnknownScope {
                    tensor: tensor.to_string(),
                    var: v.to_string(),
                })
            }
        };
        let mut scopes = BTreeMap::new();
        for r in &relations {
            if let Relation::Communicate { tensors, at } = r {
                for t in tensors {
                    scopes.insert(t.clone(), locate(t, at)?);
                }
            }
        }
        let default_scope = if body.is_empty() {
            Scope::Task
        } else {
            Scope::Body(body.len() - 1)
        };
        for t in inputs.keys() {
            scopes.entry(t.clone()).or_insert(default_scope);
        }

        let output = match output {
            None => None,
            Some(lhs) => {
                let d = dists
                    .get(lhs.name())
                    .ok_or_else(|| SimError::MissingDistribution(lhs.name().to_string()))?;
                if d.is_replicated() {
                    return Err(SimError::WriteToReplica(lhs.name().to_string()));
                }
                if inputs.contains_key(lhs.name()) {
                    return Err(SimError::Unsupported("output read on the right-hand side".into()));
                }
                let reduction: Vec<&IndexVar> = rhs_accesses
                    .iter()
                    .flat_map(|a| a.indices.iter())
                    .filter(|v| !lhs.indices.contains(v))
                    .collect();
                let reduced_across_tasks = matches!(leaf, CinStmt::Reduce { .. })
                    && outer
                        .iter()
                        .chain(&dist)
                        .any(|l| reduction.iter().any(|k| derives(&resolver, &l.var, k)));
                let p = if reduced_across_tasks {
                    Privilege::ReduceSum
                } else {
                    Privilege::Write
                };
                Some((lhs.clone(), p))
            }
        };

        let step_depth = inputs
            .keys()
            .filter_map(|t| match scopes[t] {
                Scope::Body(d) => Some(d + 1),
                Scope::Task => None,
            })
            .min()
            .unwrap_or(0);

        let mut kernel = None;
        for r in &relations {
            if let Relation::LeafKernel { vars, kernel: k } = r {
                let n = body.len();
                let ok = vars.len() <= n && body[n - vars.len()..].iter().zip(vars).all(|(l, v)| &l.var == v);
                if !ok {
                    return Err(SimError::Kernel(format!("{k} is not attached to the innermost loops")));
                }
                kernel = Some((n - vars.len(), k.clone()));
            }
        }

        Ok(LaunchPlan {
            outer,
            dist,
            body,
            leaf,
            resolver,
            inputs,
            scopes,
            step_depth,
            output,
            kernel,
        })
    }

    /// Environments of the sequential launches (one per outer point).
    pub fn outer_points(&self) -> Vec<Env> {
        points(&self.outer, &Env::new())
    }

    /// Tasks of one launch in processor enumerate order.
    pub fn tasks(&self, outer: &Env, machine: &Machine) -> Vec<(usize, TaskRecord, Env)> {
        if self.dist.is_empty() {
            let p = machine.enumerate().remove(0);
            return vec![(
                0,
                TaskRecord {
                    proc: p,
                    point: Vec::new(),
                },
                outer.clone(),
            )];
        }
        points(&self.dist, outer)
            .into_iter()
            .map(|env| {
                let point: Vec<usize> = self.dist.iter().map(|l| env.get(&l.var).unwrap()).collect();
                let proc = ProcCoord(point.clone());
                (machine.proc_index(&proc), TaskRecord { proc, point }, env)
            })
            .collect()
    }

    /// Output box a task writes, with all body loops free.
    pub fn output_rect(&self, env: &Env) -> Result<Option<HyperRect>, SimError> {
        match &self.output {
            Some((a, _)) => Ok(Some(bounds_analysis(a, &self.resolver, env, &self.body)?)),
            None => Ok(None),
        }
    }

    /// Boxes of `tensor` needed at one scope instance; the loops from
    /// `free_from` inward are unbound.
    pub fn needs(&self, tensor: &str, env: &Env, free_from: usize) -> Result<Vec<HyperRect>, SimError> {
        self.inputs[tensor]
            .iter()
            .map(|a| bounds_analysis(a, &self.resolver, env, &self.body[free_from..]))
            .collect()
    }

    pub fn tensors_at(&self, scope: Scope) -> Vec<&str> {
        self.scopes
            .iter()
            .filter(|(t, s)| **s == scope && self.inputs.contains_key(t.as_str()))
            .map(|(t, _)| t.as_str())
            .collect()
    }
}

/// Every binding of `loops` on top of `base`, in lexicographic order.
fn points(loops: &[Loop], base: &Env) -> Vec<Env> {
    let ranges: Vec<std::ops::Range<usize>> = loops.iter().map(|l| l.range()).collect();
    let lens: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
    let mut out = Vec::new();
    for_each_coord(&lens, |c| {
        let mut e = base.clone();
        for ((l, r), &x) in loops.iter().zip(&ranges).zip(c) {
            e.push(l.var.clone(), r.start + x);
        }
        out.push(e);
    });
    out
}

/// Region requirement of one launch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRequirement {
    pub tensor: String,
    pub privilege: Privilege,
    /// Loop at which movement is aggregated; `None` for the whole task.
    pub scope: Option<String>,
    /// Task-wide bounding box per task, in task order.
    pub rects: Vec<HyperRect>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLaunch {
    pub outer: Vec<(String, usize)>,
    pub domain: Vec<usize>,
    pub tasks: Vec<TaskRecord>,
    pub requirements: Vec<RegionRequirement>,
}

/// One launch per iteration of the loops above the distributed group.
pub fn lower_to_tasks(
    stmt: &CinStmt,
    dists: &BTreeMap<String, TensorDistribution>,
    machine: &Machine,
) -> Result<Vec<TaskLaunch>, SimError> {
    let mut out = Vec::new();
    let branches = match stmt {
        CinStmt::Seq(items) => items.iter().collect(),
        s => vec![s],
    };
    for b in branches {
        let plan = LaunchPlan::analyze(b, dists, machine)?;
        for outer in plan.outer_points() {
            let tasks = plan.tasks(&outer, machine);
            let mut reqs = Vec::new();
            for (t, accesses) in &plan.inputs {
                let scope = match plan.scopes[t] {
                    Scope::Task => None,
                    Scope::Body(d) => Some(plan.body[d].var.to_string()),
                };
                let mut rects = Vec::new();
                for (_, _, env) in &tasks {
                    let mut r: Option<HyperRect> = None;
                    for a in accesses {
                        let b = bounds_analysis(a, &plan.resolver, env, &plan.body)?;
                        r = Some(match r {
                            None => b,
                            Some(x) => hull(&x, &b),
                        });
                    }
                    rects.push(r.expect("tensor has an access"));
                }
                reqs.push(RegionRequirement {
                    tensor: t.clone(),
                    privilege: Privilege::Read,
                    scope,
                    rects,
                });
            }
            if let Some((a, p)) = &plan.output {
                let rects = tasks
                    .iter()
                    .map(|(_, _, env)| bounds_analysis(a, &plan.resolver, env, &plan.body))
                    .collect::<Result<Vec<_>, _>>()?;
                reqs.push(RegionRequirement {
                    tensor: a.name().to_string(),
                    privilege: *p,
                    scope: None,
                    rects,
                });
            }
            out.push(TaskLaunch {
                outer: outer.iter().map(|(v, x)| (v.to_string(), *x)).collect(),
                domain: plan.dist.iter().map(|l| l.extent).collect(),
                tasks: tasks.into_iter().map(|(_, r, _)| r).collect(),
                requirements: reqs,
            });
        }
    }
    Ok(out)
}

fn hull(a: &HyperRect, b: &HyperRect) -> HyperRect {
    if a.is_empty() {
        return b.clone();
    }
    if b.is_empty() {
        return a.clone();
    }
    HyperRect::new(
        a.lo.iter().zip(&b.lo).map(|(x, y)| *x.min(y)).collect(),
        a.hi.iter().zip(&b.hi).map(|(x, y)| *x.max(y)).collect(),
    )
}

/// Task-local view: inputs read from their authoritative values, the
/// output goes to a private buffer over `rect`.
pub(crate) struct TaskStore<'a> {
    pub inputs: &'a BTreeMap<String, DenseTensor>,
    pub out: &'a str,
    pub rect: HyperRect,
    pub buf: Vec<f64>,
    pub written: Vec<bool>,
}

impl TaskStore<'_> {
    pub fn local(&self, coord: &[usize]) -> Option<usize> {
        if !self.rect.contains(coord) {
            return None;
        }
        let mut n = 0;
        for ((c, lo), hi) in coord.iter().zip(&self.rect.lo).zip(&self.rect.hi) {
            n = n * (hi - lo) + (c - lo);
        }
        Some(n)
    }
}

impl Store for TaskStore<'_> {
    fn read(&self, a: &Access, coord: &[usize]) -> Result<f64, crate::cin::CinError> {
        if a.name() == self.out {
            let n = self.local(coord).ok_or_else(|| crate::cin::CinError::OutOfBounds {
                access: a.to_string(),
                coord: coord.to_vec(),
            })?;
            return Ok(self.buf[n]);
        }
        let t = self
            .inputs
            .get(a.name())
            .ok_or_else(|| crate::cin::CinError::MissingTensor(a.name().to_string()))?;
        Ok(t.get(coord))
    }

    fn write(&mut self, a: &Access, coord: &[usize], value: f64, accumulate: bool) -> Result<(), crate::cin::CinError> {
        let n = self.local(coord).ok_or_else(|| crate::cin::CinError::OutOfBounds {
            access: a.to_string(),
            coord: coord.to_vec(),
        })?;
        if accumulate {
            self.buf[n] += value;
        } else {
            self.buf[n] = value;
        }
        self.written[n] = true;
        Ok(())
    }
}

/// Runs the body loops of one task, handing the innermost loops to `kernel`
/// when one is attached.
pub(crate) fn run_body(
    plan: &LaunchPlan,
    kernel: Option<&dyn LocalKernel>,
    env: &mut Env,
    store: &mut dyn Store,
) -> Result<(), SimError> {
    fn go(
        plan: &LaunchPlan,
        depth: usize,
        kernel: Option<(usize, &dyn LocalKernel)>,
        env: &mut Env,
        store: &mut dyn Store,
    ) -> Result<(), SimError> {
        if let Some((start, k)) = kernel {
            if depth == start {
                return Ok(k.execute(&plan.body[depth..], &plan.leaf, &plan.resolver, env, store)?);
            }
        }
        if depth == plan.body.len() {
            return Ok(interpret_loops(&[], &plan.leaf, &plan.resolver, env, store)?);
        }
        let lp = &plan.body[depth];
        env.push(lp.var.clone(), 0);
        for x in lp.range() {
            env.set_last(x);
            go(plan, depth + 1, kernel, env, store)?;
        }
        env.pop();
        Ok(())
    }
    let k = match (&plan.kernel, kernel) {
        (Some((start, _)), Some(k)) => Some((*start, k)),
        _ => None,
    };
    go(plan, 0, k, env, store)
}

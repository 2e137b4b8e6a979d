//! Deterministic task-based execution on a simulated machine.
//!
//! Each launch runs in two phases. The first walks every task step by step
//! in enumerate order, moving data into processor memories and recording the
//! ledger; the second does the arithmetic, optionally on a worker pool, and
//! combines per-task output buffers into the home memories in enumerate
//! order.

pub mod bounds;
pub mod kernel;
pub mod launch;
pub mod memory;
pub mod trace;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::cin::{CinError, CinStmt, Env};
use crate::distribution::{redistribute, DistributionError, HyperRect, TensorDistribution};
use crate::machine::{Machine, ProcCoord};
use crate::tensor::{DenseTensor, TensorError};

pub use bounds::bounds_analysis;
pub use kernel::{BlockedMatmul, Interpreter, KernelRegistry, LocalKernel};
pub use launch::{lower_to_tasks, LaunchPlan, Privilege, RegionRequirement, Scope, TaskLaunch};
pub use memory::{Block, BlockKind, Memories};
pub use trace::{CommEvent, EventKind, ExecutionTrace, Phase, Stats, StepRecord, TaskRecord};

use launch::{run_body, TaskStore};
use memory::{cover, Stamp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Cin(#[from] CinError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("variable {0} is not an affine function of loop variables")]
    NonAffineAccess(String),
    #[error("access to {tensor} at {coord:?} is out of bounds")]
    OutOfBounds { tensor: String, coord: Vec<usize> },
    #[error("tensor {0} has no distribution")]
    MissingDistribution(String),
    #[error("no input data for tensor {0}")]
    MissingInput(String),
    #[error("launch domain {domain:?} does not match machine grid {machine:?}")]
    GridMismatch { domain: Vec<usize>, machine: Vec<usize> },
    #[error("distributed loops are not directly nested")]
    NonContiguousDistribution,
    #[error("output {0} is replicated; writes to replicas are not supported")]
    WriteToReplica(String),
    #[error("processor {proc} read {tensor}{coord:?} without holding it")]
    PhantomRead {
        tensor: String,
        coord: Vec<usize>,
        proc: String,
    },
    #[error("no processor holds {tensor} {rect}")]
    NoSource { tensor: String, rect: String },
    #[error("communicate of {tensor} names {var}, which is not a loop of the nest")]
    UnknownScope { tensor: String, var: String },
    #[error("leaf kernel: {0}")]
    Kernel(String),
    #[error("distribution of {0} targets a different machine")]
    MachineMismatch(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Result of a simulation.
#[derive(Debug, Clone)]
pub struct SimResult {
    /// Final contents of every tensor written by the program.
    pub outputs: BTreeMap<String, DenseTensor>,
    pub trace: ExecutionTrace,
    /// Residency after completion.
    pub memory: Memories,
}

#[derive(Clone, Debug)]
pub struct Simulator {
    machine: Machine,
    workers: usize,
    pool: Option<Arc<rayon::ThreadPool>>,
    kernels: KernelRegistry,
}

impl Simulator {
    pub fn new(machine: Machine) -> Self {
        Simulator {
            machine,
            workers: 1,
            pool: None,
            kernels: KernelRegistry::default(),
        }
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    /// Worker threads for task arithmetic; 1 runs everything on the caller.
    pub fn with_workers(mut self, n: usize) -> Self {
        self.workers = n.max(1);
        self.pool = if self.workers > 1 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
                .ok()
                .map(Arc::new)
        } else {
            None
        };
        self
    }

    pub fn with_kernel(mut self, k: Arc<dyn LocalKernel>) -> Self {
        self.kernels.register(k);
        self
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            sim: self,
            mem: Memories::new(&self.machine),
            values: BTreeMap::new(),
            trace: ExecutionTrace::default(),
            step: 0,
            launch: 0,
            written: Vec::new(),
        }
    }

    /// Places every tensor per its distribution, then runs `stmt`.
    /// Outputs missing from `inputs` start as zeros.
    pub fn run(
        &self,
        stmt: &CinStmt,
        dists: &BTreeMap<String, TensorDistribution>,
        inputs: &BTreeMap<String, DenseTensor>,
    ) -> Result<SimResult, SimError> {
        // reject bad programs before any data moves
        if let Some(d) = dists.values().find(|d| d.machine() != &self.machine) {
            return Err(SimError::MachineMismatch(d.tensor().name().to_string()));
        }
        for b in branches(stmt) {
            LaunchPlan::analyze(b, dists, &self.machine)?;
        }
        let mut names: Vec<&str> = stmt.accesses().iter().map(|a| a.name()).collect();
        names.sort_unstable();
        names.dedup();
        let outputs: Vec<&str> = stmt
            .leaves()
            .iter()
            .filter_map(|l| match l {
                CinStmt::Assign { lhs, .. } | CinStmt::Reduce { lhs, .. } => Some(lhs.name()),
                _ => None,
            })
            .collect();
        let mut s = self.session();
        for n in names {
            let d = &dists[n];
            let data = match inputs.get(n) {
                Some(t) => t.clone(),
                None if outputs.contains(&n) => DenseTensor::zeros(d.tensor().dims()),
                None => return Err(SimError::MissingInput(n.to_string())),
            };
            s.place(d, data)?;
        }
        s.execute(stmt, dists, Phase::Compute)?;
        Ok(s.finish())
    }

    /// Moves a tensor laid out per `from` to `to`.
    pub fn redistribute(
        &self,
        from: &TensorDistribution,
        to: &TensorDistribution,
        data: &DenseTensor,
    ) -> Result<SimResult, SimError> {
        let prog = redistribute(from, to)?;
        let mut s = self.session();
        s.place_without_movement(from, data.clone())?;
        let dists = BTreeMap::from([(to.tensor().name().to_string(), to.clone())]);
        s.execute(&prog, &dists, Phase::Placement)?;
        s.mem.rebuild_homes(to);
        s.written.push(to.tensor().name().to_string());
        Ok(s.finish())
    }
}

fn branches(s: &CinStmt) -> Vec<&CinStmt> {
    match s {
        CinStmt::Seq(items) => items.iter().collect(),
        other => vec![other],
    }
}

/// Mutable simulation state: memories, authoritative values and the trace.
pub struct Session<'a> {
    sim: &'a Simulator,
    mem: Memories,
    values: BTreeMap<String, DenseTensor>,
    trace: ExecutionTrace,
    step: usize,
    launch: usize,
    written: Vec<String>,
}

struct TaskOutput {
    rect: HyperRect,
    buf: Vec<f64>,
    written: Vec<bool>,
}

impl Session<'_> {
    pub fn memory(&self) -> &Memories {
        &self.mem
    }

    pub fn trace(&self) -> &ExecutionTrace {
        &self.trace
    }

    fn check_machine(&self, d: &TensorDistribution) -> Result<(), SimError> {
        if d.machine() != &self.sim.machine {
            return Err(SimError::MachineMismatch(d.tensor().name().to_string()));
        }
        Ok(())
    }

    fn check_data(d: &TensorDistribution, data: &DenseTensor) -> Result<(), SimError> {
        if data.dims() != d.tensor().dims() {
            return Err(TensorError::InputShape {
                name: d.tensor().name().to_string(),
                expected: d.tensor().dims().to_vec(),
                got: data.dims().to_vec(),
            }
            .into());
        }
        Ok(())
    }

    /// Puts each piece on its home, then runs the placement statement so
    /// replicas are copied out and recorded.
    pub fn place(&mut self, d: &TensorDistribution, data: DenseTensor) -> Result<(), SimError> {
        self.check_machine(d)?;
        Self::check_data(d, &data)?;
        self.values.insert(d.tensor().name().to_string(), data);
        self.mem.place_homes(d);
        let dists = BTreeMap::from([(d.tensor().name().to_string(), d.clone())]);
        self.execute(&d.lower_placement(), &dists, Phase::Placement)?;
        self.mem.rebuild_homes(d);
        Ok(())
    }

    /// Installs a layout as the starting state without recording movement.
    pub fn place_without_movement(&mut self, d: &TensorDistribution, data: DenseTensor) -> Result<(), SimError> {
        self.check_machine(d)?;
        Self::check_data(d, &data)?;
        self.values.insert(d.tensor().name().to_string(), data);
        self.mem.place_full(d);
        Ok(())
    }

    pub fn execute(
        &mut self,
        stmt: &CinStmt,
        dists: &BTreeMap<String, TensorDistribution>,
        phase: Phase,
    ) -> Result<(), SimError> {
        for b in branches(stmt) {
            let plan = LaunchPlan::analyze(b, dists, &self.sim.machine)?;
            for outer in plan.outer_points() {
                self.run_launch(&plan, &outer, phase)?;
            }
            if let Some((a, _)) = &plan.output {
                if !self.written.iter().any(|w| w == a.name()) {
                    self.written.push(a.name().to_string());
                }
            }
        }
        Ok(())
    }

    fn run_launch(&mut self, plan: &LaunchPlan, outer: &Env, phase: Phase) -> Result<(), SimError> {
        let machine = self.sim.machine.clone();
        let tasks = plan.tasks(outer, &machine);
        let launch = self.launch;
        self.launch += 1;

        let prefix = &plan.body[..plan.step_depth];
        let lens: Vec<usize> = prefix.iter().map(|l| l.range().len()).collect();
        let mut steps: Vec<Vec<usize>> = Vec::new();
        crate::tensor::for_each_coord(&lens, |c| {
            steps.push(c.iter().zip(prefix).map(|(&x, l)| l.range().start + x).collect())
        });

        let out_name = plan.output.as_ref().map(|(a, _)| a.name().to_string());
        let fetch_output = matches!(
            (&plan.output, &plan.leaf),
            (Some((_, Privilege::Write)), CinStmt::Reduce { .. })
        );
        let mut out_rects: Vec<Option<HyperRect>> = Vec::with_capacity(tasks.len());
        for (_, _, env) in &tasks {
            out_rects.push(plan.output_rect(env)?);
        }

        let mut last_step = self.step;
        for (si, pp) in steps.iter().enumerate() {
            let step = self.step;
            self.step += 1;
            last_step = step;
            self.trace.steps.push(StepRecord {
                step,
                phase,
                launch,
                tasks: tasks.iter().map(|(_, r, _)| r.clone()).collect(),
            });
            let stamp = Stamp { step, phase, launch };
            for (ti, (p, _, tenv)) in tasks.iter().enumerate() {
                let p = *p;
                let mut env = tenv.clone();
                if si == 0 {
                    for t in plan.tensors_at(Scope::Task) {
                        for need in plan.needs(t, &env, 0)? {
                            self.mem.fetch(p, t, &need, stamp, &mut self.trace.events)?;
                        }
                    }
                    if let (Some(name), Some(rect)) = (&out_name, &out_rects[ti]) {
                        if fetch_output {
                            self.mem.fetch(p, name, rect, stamp, &mut self.trace.events)?;
                        }
                        let mut extra = 0;
                        rect.for_each(|c| {
                            if !self.mem.is_live(p, name, c) {
                                extra += 1;
                            }
                        });
                        self.mem.set_extra(p, extra);
                    }
                }
                for (d, &x) in pp.iter().enumerate() {
                    env.push(prefix[d].var.clone(), x);
                    let changed = si == 0 || steps[si - 1][..=d] != pp[..=d];
                    if changed {
                        for t in plan.tensors_at(Scope::Body(d)) {
                            for need in plan.needs(t, &env, d + 1)? {
                                self.mem.fetch(p, t, &need, stamp, &mut self.trace.events)?;
                            }
                        }
                    }
                }
                self.walk(plan, plan.step_depth, p, &mut env, stamp)?;
            }
            self.mem.end_step();
        }

        if let Some(name) = out_name {
            let results = self.compute(plan, &tasks, &out_rects, &name)?;
            self.combine(plan, &tasks, results, &name, Stamp {
                step: last_step,
                phase,
                launch,
            })?;
        }
        self.mem.drop_copies();
        self.mem.clear_extras();
        self.trace.memory_high_water = self.mem.high_water();
        Ok(())
    }

    /// Moves data for body scopes below the step loops and checks that every
    /// read is of resident data.
    fn walk(&mut self, plan: &LaunchPlan, depth: usize, p: usize, env: &mut Env, stamp: Stamp) -> Result<(), SimError> {
        if depth == plan.body.len() {
            if !plan.resolver.in_bounds(env)? {
                return Ok(());
            }
            for (t, accesses) in &plan.inputs {
                for a in accesses {
                    if let Some(c) = plan.resolver.coord(a, env)? {
                        if !HyperRect::full(a.tensor.dims()).contains(&c) {
                            return Err(SimError::OutOfBounds {
                                tensor: t.clone(),
                                coord: c,
                            });
                        }
                        if !self.mem.is_live(p, t, &c) {
                            return Err(SimError::PhantomRead {
                                tensor: t.clone(),
                                coord: c,
                                proc: self.mem.procs()[p].to_string(),
                            });
                        }
                    }
                }
            }
            return Ok(());
        }
        let lp = plan.body[depth].clone();
        let here = plan.tensors_at(Scope::Body(depth));
        env.push(lp.var.clone(), 0);
        for x in lp.range() {
            env.set_last(x);
            for t in &here {
                for need in plan.needs(t, env, depth + 1)? {
                    self.mem.fetch(p, t, &need, stamp, &mut self.trace.events)?;
                }
            }
            self.walk(plan, depth + 1, p, env, stamp)?;
        }
        env.pop();
        Ok(())
    }

    fn compute(
        &self,
        plan: &LaunchPlan,
        tasks: &[(usize, TaskRecord, Env)],
        rects: &[Option<HyperRect>],
        out: &str,
    ) -> Result<Vec<TaskOutput>, SimError> {
        let kernel = match &plan.kernel {
            Some((_, name)) => Some(
                self.sim
                    .kernels
                    .get(name)
                    .ok_or_else(|| SimError::Kernel(format!("no kernel registered as {name}")))?,
            ),
            None => None,
        };
        let privilege = plan.output.as_ref().map(|(_, p)| *p).unwrap_or(Privilege::Write);
        let current = &self.values[out];
        let one = |i: usize| -> Result<TaskOutput, SimError> {
            let rect = rects[i].clone().expect("output present");
            let buf: Vec<f64> = match privilege {
                Privilege::ReduceSum => vec![0.0; rect.volume()],
                _ => {
                    let mut v = Vec::with_capacity(rect.volume());
                    rect.for_each(|c| v.push(current.get(c)));
                    v
                }
            };
            let mut store = TaskStore {
                inputs: &self.values,
                out,
                written: vec![false; buf.len()],
                buf,
                rect,
            };
            let mut env = tasks[i].2.clone();
            run_body(plan, kernel.as_deref(), &mut env, &mut store)?;
            Ok(TaskOutput {
                rect: store.rect,
                buf: store.buf,
                written: store.written,
            })
        };
        match &self.sim.pool {
            Some(pool) => pool.install(|| (0..tasks.len()).into_par_iter().map(one).collect()),
            None => (0..tasks.len()).map(one).collect(),
        }
    }

    fn combine(
        &mut self,
        plan: &LaunchPlan,
        tasks: &[(usize, TaskRecord, Env)],
        results: Vec<TaskOutput>,
        out: &str,
        stamp: Stamp,
    ) -> Result<(), SimError> {
        let privilege = plan.output.as_ref().map(|(_, p)| *p).unwrap_or(Privilege::Write);
        let layout = self
            .mem
            .layout(out)
            .ok_or_else(|| SimError::MissingDistribution(out.to_string()))?
            .clone();
        let pieces = layout.pieces();
        let machine = self.sim.machine.clone();
        for ((_, rec, _), r) in tasks.iter().zip(results) {
            let local = |c: &[usize]| -> usize {
                let mut n = 0;
                for ((x, lo), hi) in c.iter().zip(&r.rect.lo).zip(&r.rect.hi) {
                    n = n * (hi - lo) + (x - lo);
                }
                n
            };
            let target = self.values.get_mut(out).unwrap();
            r.rect.for_each(|c| {
                let n = local(c);
                if r.written[n] {
                    let v = match privilege {
                        Privilege::ReduceSum => target.get(c) + r.buf[n],
                        _ => r.buf[n],
                    };
                    target.set(c, v);
                }
            });
            for (_, prect, procs) in &pieces {
                let home = &procs[0];
                if home == &rec.proc {
                    continue;
                }
                let sub = r.rect.intersect(prect);
                for rect in cover(&sub, &|c| r.written[local(c)]) {
                    self.trace.events.push(CommEvent {
                        step: stamp.step,
                        phase: stamp.phase,
                        launch: stamp.launch,
                        src: rec.proc.clone(),
                        dst: home.clone(),
                        tensor: out.to_string(),
                        elements: rect.volume(),
                        rect,
                        kind: match privilege {
                            Privilege::ReduceSum => EventKind::Reduce,
                            _ => EventKind::Copy,
                        },
                        intra_node: machine.same_node(&rec.proc, home),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> SimResult {
        self.trace.memory_high_water = self.mem.high_water();
        let outputs = self
            .written
            .iter()
            .map(|n| (n.clone(), self.values[n].clone()))
            .collect();
        SimResult {
            outputs,
            trace: self.trace,
            memory: self.mem,
        }
    }
}

/// Processors that hold a copy of `coord` after a run.
pub fn holders(result: &SimResult, tensor: &str, coord: &[usize]) -> Vec<ProcCoord> {
    result.memory.holders(tensor, coord)
}
